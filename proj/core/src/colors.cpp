#include "ssmg/colors.hpp"

#include <sstream>

namespace ssmg {

const std::vector<PaletteColor>& palette() {
    static const std::vector<PaletteColor> p = {
        {"red", 220, 50, 40},    {"green", 60, 180, 70},  {"blue", 50, 90, 220},
        {"yellow", 230, 210, 50}, {"purple", 150, 60, 200}, {"cyan", 60, 200, 210},
    };
    return p;
}

int find_color_word(const std::string& desc) {
    std::istringstream ss(desc);
    std::string word;
    while (ss >> word) {
        std::string low;
        for (char c : word)
            if (c >= 'A' && c <= 'Z')
                low.push_back(static_cast<char>(c - 'A' + 'a'));
            else
                low.push_back(c);
        for (size_t i = 0; i < palette().size(); ++i)
            if (low == palette()[i].name) return static_cast<int>(i);
    }
    return -1;
}

Tensor render_layout_rgb(const Layout& layout, int h, int w) {
    std::vector<std::array<uint8_t, 3>> px(static_cast<size_t>(h) * static_cast<size_t>(w),
                                           kBackgroundRgb);
    for (const auto& e : layout.entities) {
        CoverageMask cm = rasterize(e.region, h, w);
        int pi = find_color_word(e.desc);
        std::array<uint8_t, 3> rgb = {255, 255, 255};
        if (pi >= 0) {
            const PaletteColor& c = palette()[static_cast<size_t>(pi)];
            rgb = {c.r, c.g, c.b};
        }
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                if (cm.at(i, j)) px[static_cast<size_t>(i) * static_cast<size_t>(w) +
                                    static_cast<size_t>(j)] = rgb;
    }
    Tensor out({3, h, w});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                out.at3(c, i, j) =
                    static_cast<float>(px[static_cast<size_t>(i) * static_cast<size_t>(w) +
                                          static_cast<size_t>(j)][static_cast<size_t>(c)]) /
                        127.5f -
                    1.0f;
    return out;
}

}  // namespace ssmg

#include "ssmg/detector.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ssmg/colors.hpp"
#include "ssmg/errors.hpp"

namespace ssmg {

namespace {

const char* kShapeNames[kNumShapes] = {"circle", "square", "triangle"};

double color_dist(const uint8_t* px, const PaletteColor& c) {
    double dr = static_cast<double>(px[0]) - c.r;
    double dg = static_cast<double>(px[1]) - c.g;
    double db = static_cast<double>(px[2]) - c.b;
    return std::sqrt(dr * dr + dg * dg + db * db);
}

int shape_from_fill(double fill) {
    if (fill >= 0.9) return 1;
    if (fill >= 0.65) return 0;
    if (fill >= 0.3) return 2;
    return -1;
}

}  // namespace

const char* shape_name(int shape_id) {
    if (shape_id < 0 || shape_id >= kNumShapes) throw RangeError("shape_name: bad id");
    return kShapeNames[shape_id];
}

int find_shape_word(const std::string& desc) {
    std::istringstream ss(desc);
    std::string word;
    while (ss >> word) {
        std::string low;
        for (char c : word)
            if (c >= 'A' && c <= 'Z')
                low.push_back(static_cast<char>(c - 'A' + 'a'));
            else
                low.push_back(c);
        for (int i = 0; i < kNumShapes; ++i)
            if (low == kShapeNames[i]) return i;
    }
    return -1;
}

std::vector<Detection> detect(const ImageU8& img) {
    int h = img.h, w = img.w;
    std::vector<int> label(static_cast<size_t>(h) * static_cast<size_t>(w), -1);
    std::vector<double> dist(static_cast<size_t>(h) * static_cast<size_t>(w), 0.0);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const uint8_t* px = img.px(i, j);
            double best = kColorTau;
            int best_c = -1;
            for (size_t c = 0; c < palette().size(); ++c) {
                double d = color_dist(px, palette()[c]);
                if (d <= best) {
                    best = d;
                    best_c = static_cast<int>(c);
                }
            }
            label[static_cast<size_t>(i) * static_cast<size_t>(w) + static_cast<size_t>(j)] =
                best_c;
            dist[static_cast<size_t>(i) * static_cast<size_t>(w) + static_cast<size_t>(j)] = best;
        }

    std::vector<Detection> out;
    std::vector<uint8_t> seen(static_cast<size_t>(h) * static_cast<size_t>(w), 0);
    std::vector<int> stack;
    for (int si = 0; si < h; ++si)
        for (int sj = 0; sj < w; ++sj) {
            size_t sp = static_cast<size_t>(si) * static_cast<size_t>(w) + static_cast<size_t>(sj);
            if (seen[sp] || label[sp] < 0) continue;
            int color = label[sp];
            stack.assign(1, static_cast<int>(sp));
            seen[sp] = 1;
            int imin = si, imax = si, jmin = sj, jmax = sj;
            int64_t count = 0;
            double score_sum = 0.0;
            while (!stack.empty()) {
                int p = stack.back();
                stack.pop_back();
                int pi = p / w, pj = p % w;
                ++count;
                score_sum += 1.0 - dist[static_cast<size_t>(p)] / kColorTau;
                imin = std::min(imin, pi);
                imax = std::max(imax, pi);
                jmin = std::min(jmin, pj);
                jmax = std::max(jmax, pj);
                const int di[4] = {-1, 1, 0, 0};
                const int dj[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    int ni = pi + di[k], nj = pj + dj[k];
                    if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
                    size_t np = static_cast<size_t>(ni) * static_cast<size_t>(w) +
                                static_cast<size_t>(nj);
                    if (seen[np] || label[np] != color) continue;
                    seen[np] = 1;
                    stack.push_back(static_cast<int>(np));
                }
            }
            if (count < 5) continue;
            double bw = jmax - jmin + 1, bh = imax - imin + 1;
            double fill = static_cast<double>(count) / (bw * bh);
            int shape = shape_from_fill(fill);
            if (shape < 0) continue;
            Detection d;
            d.color_id = color;
            d.shape_id = shape;
            d.x0 = static_cast<double>(jmin) / w;
            d.y0 = static_cast<double>(imin) / h;
            d.x1 = static_cast<double>(jmax + 1) / w;
            d.y1 = static_cast<double>(imax + 1) / h;
            d.score = score_sum / static_cast<double>(count);
            out.push_back(d);
        }
    return out;
}

std::vector<GroundTruth> layout_ground_truth(const Layout& layout) {
    std::vector<GroundTruth> out;
    for (const auto& e : layout.entities) {
        GroundTruth g;
        g.color_id = find_color_word(e.desc);
        g.shape_id = find_shape_word(e.desc);
        CoverageMask cm = rasterize(e.region, layout.canvas_h, layout.canvas_w);
        int imin = layout.canvas_h, imax = -1, jmin = layout.canvas_w, jmax = -1;
        for (int i = 0; i < layout.canvas_h; ++i)
            for (int j = 0; j < layout.canvas_w; ++j)
                if (cm.at(i, j)) {
                    imin = std::min(imin, i);
                    imax = std::max(imax, i);
                    jmin = std::min(jmin, j);
                    jmax = std::max(jmax, j);
                }
        g.x0 = static_cast<double>(jmin) / layout.canvas_w;
        g.y0 = static_cast<double>(imin) / layout.canvas_h;
        g.x1 = static_cast<double>(jmax + 1) / layout.canvas_w;
        g.y1 = static_cast<double>(imax + 1) / layout.canvas_h;
        out.push_back(g);
    }
    return out;
}

double box_iou(double ax0, double ay0, double ax1, double ay1, double bx0, double by0, double bx1,
               double by1) {
    double ix0 = std::max(ax0, bx0), iy0 = std::max(ay0, by0);
    double ix1 = std::min(ax1, bx1), iy1 = std::min(ay1, by1);
    double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
    double inter = iw * ih;
    double ua = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    return ua > 0 ? inter / ua : 0.0;
}

}  // namespace ssmg

#include "ssmg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "ssmg/colors.hpp"
#include "ssmg/detector.hpp"
#include "ssmg/errors.hpp"
#include "ssmg/rng.hpp"

namespace ssmg {
namespace {

struct Placement {
    int shape_id = 0;
    double cx = 0, cy = 0;  // pixel coordinates
    double size = 0;        // radius / half-side / half-base
    std::vector<uint8_t> mask;
    int px_count = 0;
    int i0 = 0, i1 = 0, j0 = 0, j1 = 0;  // tight pixel box, inclusive
};

bool inside_shape(int shape_id, double cx, double cy, double size, double x, double y) {
    const double dx = x - cx, dy = y - cy;
    switch (shape_id) {
        case 0:
            return dx * dx + dy * dy <= size * size;
        case 1:
            return std::abs(dx) <= size && std::abs(dy) <= size;
        default: {
            // Isoceles triangle, apex up: base 2*size, height 0.9 * base.
            const double hgt = 1.8 * size;
            const double ty = dy + hgt / 2;  // 0 at apex, hgt at base
            if (ty < 0 || ty > hgt) return false;
            return std::abs(dx) <= size * (ty / hgt);
        }
    }
}

// Half-extent of the shape's bounding box, (x, y).
std::pair<double, double> half_extent(int shape_id, double size) {
    if (shape_id == 2) return {size, 0.9 * size};
    return {size, size};
}

bool rasterize_placement(Placement& p, int h, int w, int min_px) {
    p.mask.assign(static_cast<size_t>(h) * w, 0);
    p.px_count = 0;
    p.i0 = h;
    p.i1 = -1;
    p.j0 = w;
    p.j1 = -1;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            if (inside_shape(p.shape_id, p.cx, p.cy, p.size, j + 0.5, i + 0.5)) {
                p.mask[static_cast<size_t>(i) * w + j] = 1;
                ++p.px_count;
                p.i0 = std::min(p.i0, i);
                p.i1 = std::max(p.i1, i);
                p.j0 = std::min(p.j0, j);
                p.j1 = std::max(p.j1, j);
            }
    return p.px_count >= min_px;
}

Region make_region(const Placement& p, const GenConfig& cfg, RegionForm form) {
    const int h = cfg.h, w = cfg.w;
    if (form == RegionForm::Box) {
        BoxRegion b;
        b.x0 = static_cast<double>(p.j0) / w;
        b.x1 = static_cast<double>(p.j1 + 1) / w;
        b.y0 = static_cast<double>(p.i0) / h;
        b.y1 = static_cast<double>(p.i1 + 1) / h;
        return b;
    }
    if (form == RegionForm::Mask) {
        MaskRegion m;
        m.h = h;
        m.w = w;
        m.grid = p.mask;
        return m;
    }
    // One point per covered pixel center with a sub-pixel radius, so the
    // rasterized coverage is exactly the drawn pixel set.
    KeypointsRegion k;
    k.radius = 0.5 / std::max(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            if (p.mask[static_cast<size_t>(i) * w + j])
                k.pts.emplace_back((j + 0.5) / w, (i + 0.5) / h);
    return k;
}

bool detector_consistent(const ImageU8& img, const Layout& layout) {
    const auto gts = layout_ground_truth(layout);
    auto dets = detect(img);
    if (dets.size() != gts.size()) return false;
    std::vector<bool> used(dets.size(), false);
    for (const auto& gt : gts) {
        bool matched = false;
        for (size_t d = 0; d < dets.size(); ++d) {
            if (used[d] || dets[d].color_id != gt.color_id || dets[d].shape_id != gt.shape_id)
                continue;
            if (box_iou(dets[d].x0, dets[d].y0, dets[d].x1, dets[d].y1, gt.x0, gt.y0, gt.x1,
                        gt.y1) >= 0.5) {
                used[d] = true;
                matched = true;
                break;
            }
        }
        if (!matched) return false;
    }
    return true;
}

}  // namespace

Scene gen_scene(uint64_t seed, const GenConfig& cfg) {
    if (cfg.h <= 0 || cfg.w <= 0 || cfg.min_entities < 1 || cfg.max_entities < cfg.min_entities)
        throw ValueError("gen_scene: bad config");
    Rng rng(derive_seed(seed, "scene"));
    const auto& pal = palette();
    const int n = cfg.min_entities + static_cast<int>(rng.below(
                                         static_cast<uint64_t>(cfg.max_entities - cfg.min_entities + 1)));
    std::vector<int> colors(n), shapes(n);
    for (int e = 0; e < n; ++e) {
        colors[e] = static_cast<int>(rng.below(pal.size()));
        shapes[e] = static_cast<int>(rng.below(kNumShapes));
    }
    const int min_px =
        static_cast<int>(std::ceil(cfg.min_coverage * cfg.h * cfg.w));

    for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        std::vector<Placement> placed;
        bool ok = true;
        for (int e = 0; e < n && ok; ++e) {
            Placement p;
            p.shape_id = shapes[e];
            bool found = false;
            for (int t = 0; t < cfg.place_tries; ++t) {
                switch (p.shape_id) {
                    case 0: p.size = 2.8 + rng.uniform() * (5.2 - 2.8); break;
                    case 1: p.size = 0.5 * (4.8 + rng.uniform() * (8.5 - 4.8)); break;
                    default: p.size = 0.5 * (7.5 + rng.uniform() * (12.0 - 7.5)); break;
                }
                const auto [hx, hy] = half_extent(p.shape_id, p.size);
                const double mx = hx + 0.5, my = hy + 0.5;
                if (cfg.w - 2 * mx <= 0 || cfg.h - 2 * my <= 0) continue;
                p.cx = mx + rng.uniform() * (cfg.w - 2 * mx);
                p.cy = my + rng.uniform() * (cfg.h - 2 * my);
                if (!rasterize_placement(p, cfg.h, cfg.w, min_px)) continue;
                bool clear = true;
                for (const auto& q : placed)
                    if (!(p.j1 + 2 < q.j0 || q.j1 + 2 < p.j0 || p.i1 + 2 < q.i0 ||
                          q.i1 + 2 < p.i0)) {
                        clear = false;
                        break;
                    }
                if (!clear) continue;
                found = true;
                break;
            }
            if (!found) {
                ok = false;
                break;
            }
            placed.push_back(std::move(p));
        }
        if (!ok) continue;

        ImageU8 img(cfg.h, cfg.w);
        std::vector<int> owner(static_cast<size_t>(cfg.h) * cfg.w, -1);
        for (int e = 0; e < n; ++e)
            for (size_t k = 0; k < owner.size(); ++k)
                if (placed[e].mask[k]) owner[k] = e;
        for (int i = 0; i < cfg.h; ++i)
            for (int j = 0; j < cfg.w; ++j) {
                const int e = owner[static_cast<size_t>(i) * cfg.w + j];
                uint8_t base[3];
                int noise;
                if (e < 0) {
                    base[0] = kBackgroundRgb[0];
                    base[1] = kBackgroundRgb[1];
                    base[2] = kBackgroundRgb[2];
                    noise = cfg.bg_noise;
                } else {
                    const auto& c = pal[static_cast<size_t>(colors[e])];
                    base[0] = c.r;
                    base[1] = c.g;
                    base[2] = c.b;
                    noise = cfg.fg_noise;
                }
                uint8_t* dst = img.px(i, j);
                for (int ch = 0; ch < 3; ++ch) {
                    const int v = base[ch] + rng.range(-noise, noise);
                    dst[ch] = static_cast<uint8_t>(std::clamp(v, 0, 255));
                }
            }

        Layout layout;
        layout.canvas_h = cfg.h;
        layout.canvas_w = cfg.w;
        layout.global_desc = "a scene with " + std::to_string(n) + " shapes";
        for (int e = 0; e < n; ++e) {
            Entity ent;
            ent.id = e;
            ent.desc = std::string(pal[static_cast<size_t>(colors[e])].name) + " " +
                       shape_name(shapes[e]);
            ent.region = make_region(placed[e], cfg, cfg.region_form);
            layout.entities.push_back(std::move(ent));
        }
        if (!validate(layout, cfg.h, cfg.w).empty()) continue;
        if (!detector_consistent(img, layout)) continue;

        Scene scene;
        scene.image = std::move(img);
        scene.layout = std::move(layout);
        scene.color_ids = colors;
        scene.shape_ids = shapes;
        return scene;
    }
    throw RetryExhausted("gen_scene: no valid scene for seed " + std::to_string(seed) + " after " +
                         std::to_string(cfg.max_attempts) + " attempts");
}

std::string scene_stem(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", index);
    return buf;
}

DatasetManifest gen_dataset(int n, uint64_t seed, const std::filesystem::path& dir,
                            const GenConfig& cfg) {
    if (n < 0) throw ValueError("gen_dataset: n must be non-negative");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    fs::create_directories(dir / "layouts", ec);
    if (ec) throw IoError("gen_dataset: cannot create " + dir.string() + ": " + ec.message());

    DatasetManifest man;
    man.n = n;
    man.seed = seed;
    for (int i = 0; i < n; ++i) {
        Scene s = gen_scene(derive_seed(seed, "scene", static_cast<uint64_t>(i)), cfg);
        const std::string stem = scene_stem(i);
        write_png((dir / "images" / (stem + ".png")).string(), s.image);
        std::ofstream lf(dir / "layouts" / (stem + ".json"), std::ios::binary);
        if (!lf) throw IoError("gen_dataset: cannot write layout " + stem);
        lf << serialize_layout(s.layout) << "\n";
        if (i % 20 == 19)
            man.val_ids.push_back(i);
        else
            man.train_ids.push_back(i);
    }
    nlohmann::json j;
    j["n"] = man.n;
    j["seed"] = man.seed;
    j["splits"] = {{"train", man.train_ids}, {"val", man.val_ids}};
    std::ofstream mf(dir / "manifest.json", std::ios::binary);
    if (!mf) throw IoError("gen_dataset: cannot write manifest under " + dir.string());
    mf << j.dump(2) << "\n";
    return man;
}

DatasetManifest load_manifest(const std::filesystem::path& dir) {
    std::ifstream f(dir / "manifest.json", std::ios::binary);
    if (!f) throw IoError("load_manifest: cannot open " + (dir / "manifest.json").string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError(std::string("manifest: not valid JSON: ") + e.what());
    }
    DatasetManifest man;
    man.n = j.at("n").get<int>();
    man.seed = j.at("seed").get<uint64_t>();
    man.train_ids = j.at("splits").at("train").get<std::vector<int>>();
    man.val_ids = j.at("splits").at("val").get<std::vector<int>>();
    return man;
}

Layout load_layout_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_layout_file: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_layout(bytes);
}

}  // namespace ssmg

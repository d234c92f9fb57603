#include "ssmg/ssmap.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "ssmg/rng.hpp"

namespace ssmg {

SpatialSemanticMap init_map(const Layout& layout, int h, int w, const VocabTable& vocab) {
    if (static_cast<int>(layout.entities.size()) > kMaxMapEntities)
        throw ValueError("init_map: more than 64 entities");

    SpatialSemanticMap map;
    map.h = h;
    map.w = w;
    map.c = vocab.dim();
    map.n_entities = static_cast<int>(layout.entities.size());
    map.feat = Tensor({h, w, map.c});
    map.coverage.assign(static_cast<size_t>(h) * w, 0);

    std::vector<std::vector<float>> emb;
    std::vector<CoverageMask> masks;
    emb.reserve(layout.entities.size());
    masks.reserve(layout.entities.size());
    for (const Entity& e : layout.entities) {
        emb.push_back(vocab.embed(e.desc));
        masks.push_back(rasterize(e.region, h, w));  // EmptyCoverage propagates
    }

    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            uint64_t bits = 0;
            for (size_t k = 0; k < masks.size(); ++k)
                if (masks[k].at(i, j)) bits |= 1ull << k;
            map.coverage[static_cast<size_t>(i) * w + j] = bits;
            if (bits == 0) continue;
            float* dst = &map.feat.at3(i, j, 0);
            int count = 0;
            for (size_t k = 0; k < masks.size(); ++k) {
                if (!(bits & (1ull << k))) continue;
                for (int c = 0; c < map.c; ++c) dst[c] += emb[k][static_cast<size_t>(c)];
                ++count;
            }
            const float inv = 1.0f / static_cast<float>(count);
            for (int c = 0; c < map.c; ++c) dst[c] *= inv;
        }
    }
    return map;
}

SpatialSemanticMap downsample_map(const SpatialSemanticMap& map, int h2, int w2) {
    if (h2 < 1 || w2 < 1 || h2 > map.h || w2 > map.w || map.h % h2 != 0 || map.w % w2 != 0)
        throw DimensionError("downsample_map: target must be an integer divisor of the source");
    const int fy = map.h / h2, fx = map.w / w2;

    SpatialSemanticMap out;
    out.h = h2;
    out.w = w2;
    out.c = map.c;
    out.n_entities = map.n_entities;
    out.feat = Tensor({h2, w2, map.c});
    out.coverage.assign(static_cast<size_t>(h2) * w2, 0);

    const float inv = 1.0f / static_cast<float>(fy * fx);
    for (int i = 0; i < h2; ++i) {
        for (int j = 0; j < w2; ++j) {
            uint64_t bits = 0;
            float* dst = &out.feat.at3(i, j, 0);
            for (int di = 0; di < fy; ++di) {
                for (int dj = 0; dj < fx; ++dj) {
                    const int si = i * fy + di, sj = j * fx + dj;
                    bits |= map.cov(si, sj);
                    const float* src = &map.feat.at3(si, sj, 0);
                    for (int c = 0; c < map.c; ++c) dst[c] += src[c];
                }
            }
            for (int c = 0; c < map.c; ++c) dst[c] *= inv;
            out.coverage[static_cast<size_t>(i) * w2 + j] = bits;
        }
    }
    return out;
}

ImageU8 project_map_rgb(const SpatialSemanticMap& map, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> proj(static_cast<size_t>(map.c) * 3);
    const double scale = 1.0 / std::sqrt(static_cast<double>(map.c));
    for (auto& v : proj) v = static_cast<float>(rng.gauss() * scale);

    ImageU8 img(map.h, map.w);
    for (int i = 0; i < map.h; ++i) {
        for (int j = 0; j < map.w; ++j) {
            if (map.cov(i, j) == 0) continue;  // uncovered stays black
            const float* f = &map.feat.at3(i, j, 0);
            for (int ch = 0; ch < 3; ++ch) {
                float v = 0;
                for (int c = 0; c < map.c; ++c) v += f[c] * proj[static_cast<size_t>(c) * 3 + ch];
                img.px(i, j)[ch] = static_cast<uint8_t>(
                    std::clamp(std::lround(128.0f + 400.0f * v), 1L, 255L));
            }
        }
    }
    return img;
}

ImageU8 coverage_heatmap(const SpatialSemanticMap& map) {
    int max_count = 1;
    for (uint64_t bits : map.coverage) max_count = std::max(max_count, std::popcount(bits));
    ImageU8 img(map.h, map.w);
    for (int i = 0; i < map.h; ++i) {
        for (int j = 0; j < map.w; ++j) {
            const int n = std::popcount(map.cov(i, j));
            const auto v = static_cast<uint8_t>(255 * n / max_count);
            img.px(i, j)[0] = img.px(i, j)[1] = img.px(i, j)[2] = v;
        }
    }
    return img;
}

}  // namespace ssmg

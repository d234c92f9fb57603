#include "ssmg/rsa.hpp"

#include <bit>
#include <cmath>
#include <limits>

namespace ssmg {

bool relation_allowed(uint64_t cov_m, uint64_t cov_n) {
    if (cov_m == 0 || cov_n == 0) return false;
    // A distinct pair exists unless both pixels carry exactly the same single
    // entity.
    return !(cov_m == cov_n && std::popcount(cov_m) == 1);
}

RelationMatrix build_relation_matrix(const SpatialSemanticMap& map) {
    int hw = map.h * map.w;
    RelationMatrix m;
    m.n_tokens = hw + 1;
    m.allowed.assign(static_cast<size_t>(m.n_tokens) * static_cast<size_t>(m.n_tokens), 0);
    auto set = [&](int a, int b, uint8_t v) {
        m.allowed[static_cast<size_t>(a) * static_cast<size_t>(m.n_tokens) +
                  static_cast<size_t>(b)] = v;
    };
    for (int a = 0; a < hw; ++a) {
        uint64_t ca = map.coverage[static_cast<size_t>(a)];
        if (ca == 0) continue;
        for (int b = 0; b < hw; ++b) {
            uint64_t cb = map.coverage[static_cast<size_t>(b)];
            if (relation_allowed(ca, cb)) set(a, b, 1);
        }
        set(a, hw, 1);
        set(hw, a, 1);
    }
    return m;
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const RelationMatrix& m) {
    if (q.shape.size() != 2 || k.shape.size() != 2 || v.shape.size() != 2)
        throw ShapeError("masked_attention: want rank 2 inputs");
    int64_t n = q.shape[0], d = q.shape[1];
    if (k.shape[0] != n || k.shape[1] != d || v.shape[0] != n)
        throw ShapeError("masked_attention: shape mismatch");
    if (m.n_tokens != n) throw ShapeError("masked_attention: mask size mismatch");
    int64_t dv = v.shape[1];
    Tensor out({n, dv});
    float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
    std::vector<float> logits(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        float mx = -std::numeric_limits<float>::infinity();
        for (int64_t j = 0; j < n; ++j) {
            if (!m.at(static_cast<int>(i), static_cast<int>(j))) continue;
            float dot = 0.0f;
            for (int64_t c = 0; c < d; ++c) dot += q.at2(i, c) * k.at2(j, c);
            logits[static_cast<size_t>(j)] = dot * inv_sqrt_d;
            mx = std::max(mx, logits[static_cast<size_t>(j)]);
        }
        if (mx == -std::numeric_limits<float>::infinity()) continue;
        float sum = 0.0f;
        for (int64_t j = 0; j < n; ++j) {
            if (!m.at(static_cast<int>(i), static_cast<int>(j))) continue;
            sum += std::exp(logits[static_cast<size_t>(j)] - mx);
        }
        for (int64_t j = 0; j < n; ++j) {
            if (!m.at(static_cast<int>(i), static_cast<int>(j))) continue;
            float w = std::exp(logits[static_cast<size_t>(j)] - mx) / sum;
            for (int64_t c = 0; c < dv; ++c) out.at2(i, c) += w * v.at2(j, c);
        }
    }
    return out;
}

SpatialSemanticMap rsa_block(const SpatialSemanticMap& map, const Tensor& scene_embedding,
                             const RsaParams& params) {
    if (scene_embedding.numel() != map.c) throw ShapeError("rsa_block: scene embedding dim");
    Tape<float> tape;
    Tensor tokens({1, static_cast<int64_t>(map.h) * map.w, static_cast<int64_t>(map.c)});
    tokens.data = map.feat.data;
    Tensor scene({1, 1, static_cast<int64_t>(map.c)});
    scene.data = scene_embedding.data;
    Var<float> out = rsa_apply(tape, tape.input(std::move(tokens)), tape.input(std::move(scene)),
                               map, params);
    SpatialSemanticMap result = map;
    result.feat.data = tape.val(out).data;
    return result;
}

}  // namespace ssmg

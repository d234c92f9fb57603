#pragma once

#include <memory>
#include <vector>

#include "ssmg/nn.hpp"
#include "ssmg/rng.hpp"
#include "ssmg/ssmap.hpp"
#include "ssmg/tape.hpp"

namespace ssmg {

// Pairwise attention rights over [pixel tokens..., scene token].
// Pixel order is row-major; the scene token sits at index h*w.
struct RelationMatrix {
    int n_tokens = 0;
    std::vector<uint8_t> allowed;

    uint8_t at(int m, int n) const {
        return allowed[static_cast<size_t>(m) * static_cast<size_t>(n_tokens) +
                       static_cast<size_t>(n)];
    }
};

// Pixel pairs attend iff their coverage sets contain a pair of distinct
// entities (overlapping pixels qualify through any cross pair). Covered
// pixels attend to the scene token and vice versa. The scene token does not
// attend to itself, and background pixels are fully blocked.
bool relation_allowed(uint64_t cov_m, uint64_t cov_n);

RelationMatrix build_relation_matrix(const SpatialSemanticMap& map);

// Reference single-head masked attention: logits Q_m.K_n/sqrt(d) where
// allowed, softmax per row over allowed keys, zero output for fully blocked
// rows. Q, K, V are [N, d].
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const RelationMatrix& m);

template <typename T>
struct RsaParamsT {
    ParamTensor<T>* wq = nullptr;
    ParamTensor<T>* wk = nullptr;
    ParamTensor<T>* wv = nullptr;
    ParamTensor<T>* wo = nullptr;
    ParamTensor<T>* ln_gain = nullptr;
    ParamTensor<T>* ln_bias = nullptr;
    int64_t channels = 0;
    int64_t heads = 4;

    static RsaParamsT create(ParamStore<T>& store, const std::string& prefix, int64_t channels,
                             int64_t heads = 4) {
        if (channels % heads != 0) throw DimensionError("rsa: channels not divisible by heads");
        RsaParamsT p;
        p.channels = channels;
        p.heads = heads;
        p.wq = &store.create(prefix + ".wq", {channels, channels});
        p.wk = &store.create(prefix + ".wk", {channels, channels});
        p.wv = &store.create(prefix + ".wv", {channels, channels});
        p.wo = &store.create(prefix + ".wo", {channels, channels});
        p.ln_gain = &store.create(prefix + ".ln_gain", {channels});
        p.ln_bias = &store.create(prefix + ".ln_bias", {channels});
        return p;
    }

    void init(Rng& rng, bool zero_out_proj) {
        T std = T(1) / std::sqrt(T(channels));
        for (auto* w : {wq, wk, wv})
            for (auto& v : w->value.data) v = static_cast<T>(rng.gauss()) * std;
        if (zero_out_proj) {
            wo->value.fill(T(0));
        } else {
            for (auto& v : wo->value.data) v = static_cast<T>(rng.gauss()) * std;
        }
        ln_gain->value.fill(T(1));
        ln_bias->value.fill(T(0));
    }
};

using RsaParams = RsaParamsT<float>;

namespace detail {

// Token indices that carry coverage, in row-major pixel order.
inline std::shared_ptr<std::vector<int>> covered_token_indices(const SpatialSemanticMap& map) {
    auto idx = std::make_shared<std::vector<int>>();
    for (int p = 0; p < map.h * map.w; ++p)
        if (map.coverage[static_cast<size_t>(p)] != 0) idx->push_back(p);
    return idx;
}

// Relation mask restricted to [covered pixels..., scene], built straight from
// coverage bitmasks. Equals the full matrix with blocked background rows and
// columns removed.
inline std::shared_ptr<std::vector<uint8_t>> compact_relation_mask(
    const SpatialSemanticMap& map, const std::vector<int>& covered) {
    int64_t p = static_cast<int64_t>(covered.size());
    int64_t n = p + 1;
    auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n * n), uint8_t(0));
    for (int64_t a = 0; a < p; ++a) {
        uint64_t ca = map.coverage[static_cast<size_t>(covered[static_cast<size_t>(a)])];
        for (int64_t b = 0; b < p; ++b) {
            uint64_t cb = map.coverage[static_cast<size_t>(covered[static_cast<size_t>(b)])];
            (*mask)[static_cast<size_t>(a * n + b)] = relation_allowed(ca, cb) ? 1 : 0;
        }
        (*mask)[static_cast<size_t>(a * n + p)] = 1;
        (*mask)[static_cast<size_t>(p * n + a)] = 1;
    }
    return mask;
}

}  // namespace detail

// One pre-norm residual masked self-attention block over map tokens plus the
// scene token. Only covered pixels participate; background rows are returned
// untouched. map_tokens is [1, H*W, C], scene is [1, 1, C]; the result drops
// the scene row and matches map_tokens' shape.
template <typename T>
Var<T> rsa_apply(Tape<T>& tape, Var<T> map_tokens, Var<T> scene, const SpatialSemanticMap& map,
                 const RsaParamsT<T>& params) {
    const auto& ts = tape.val(map_tokens).shape;
    if (ts.size() != 3 || ts[0] != 1 || ts[1] != map.h * map.w || ts[2] != params.channels)
        throw ShapeError("rsa_apply: map token shape mismatch");
    const auto& ss = tape.val(scene).shape;
    if (ss.size() != 3 || ss[0] != 1 || ss[1] != 1 || ss[2] != params.channels)
        throw ShapeError("rsa_apply: scene token shape mismatch");

    auto covered = detail::covered_token_indices(map);
    if (covered->empty()) return map_tokens;
    auto mask = detail::compact_relation_mask(map, *covered);

    Var<T> pix = gather_tokens(map_tokens, covered);
    Var<T> tokens = concat_tokens(pix, scene);
    Var<T> normed = layer_norm(tokens, tape.param(*params.ln_gain), tape.param(*params.ln_bias));
    Var<T> q = linear(normed, tape.param(*params.wq));
    Var<T> k = linear(normed, tape.param(*params.wk));
    Var<T> v = linear(normed, tape.param(*params.wv));
    Var<T> ctx = attention(q, k, v, params.heads, mask);
    Var<T> update = linear(ctx, tape.param(*params.wo));

    // Drop the scene row, then scatter pixel updates back to full resolution.
    int64_t p = static_cast<int64_t>(covered->size());
    auto pix_rows = std::make_shared<std::vector<int>>();
    for (int i = 0; i < p; ++i) pix_rows->push_back(i);
    Var<T> pix_update = gather_tokens(update, pix_rows);
    Var<T> full_update = scatter_tokens(pix_update, covered, map.h * map.w);
    return add(map_tokens, full_update);
}

// Map-level convenience: runs the block on plain tensors and returns the
// enhanced map. Coverage is carried over unchanged.
SpatialSemanticMap rsa_block(const SpatialSemanticMap& map, const Tensor& scene_embedding,
                             const RsaParams& params);

}  // namespace ssmg

#pragma once

#include <string>

#include "ssmg/nn.hpp"
#include "ssmg/rng.hpp"
#include "ssmg/tape.hpp"

namespace ssmg {

// Gated cross-attention that warps noise features with conditional map
// features as queries. The gate starts closed: tanh(0) = 0 makes the fusion
// an exact identity at construction.
template <typename T>
struct LsaParamsT {
    ParamTensor<T>* wq = nullptr;
    ParamTensor<T>* wk = nullptr;
    ParamTensor<T>* wv = nullptr;
    ParamTensor<T>* gamma = nullptr;
    int64_t channels = 0;
    int64_t heads = 4;

    static LsaParamsT create(ParamStore<T>& store, const std::string& prefix, int64_t channels,
                             int64_t heads = 4) {
        if (channels % heads != 0) throw DimensionError("lsa: channels not divisible by heads");
        LsaParamsT p;
        p.channels = channels;
        p.heads = heads;
        p.wq = &store.create(prefix + ".wq", {channels, channels});
        p.wk = &store.create(prefix + ".wk", {channels, channels});
        p.wv = &store.create(prefix + ".wv", {channels, channels});
        p.gamma = &store.create(prefix + ".gamma", {1});
        return p;
    }

    void init(Rng& rng) {
        T std = T(1) / std::sqrt(T(channels));
        for (auto* w : {wq, wk, wv})
            for (auto& v : w->value.data) v = static_cast<T>(rng.gauss()) * std;
        gamma->value.fill(T(0));
    }

    T gate() const { return std::tanh(gamma->value.data[0]); }
};

using LsaParams = LsaParamsT<float>;

// v_tokens, c_tokens: [B, N, C] with matching shapes. Returns
// v + tanh(gamma) * MHA(Q = wq(c), K = wk(v), V = wv(v)), unmasked.
template <typename T>
Var<T> lsa_fuse(Tape<T>& tape, Var<T> v_tokens, Var<T> c_tokens, const LsaParamsT<T>& params) {
    const auto& vs = tape.val(v_tokens).shape;
    const auto& cs = tape.val(c_tokens).shape;
    if (vs.size() != 3 || cs.size() != 3 || vs != cs)
        throw ShapeError("lsa_fuse: token shapes must match");
    if (vs[2] != params.channels) throw ShapeError("lsa_fuse: channel mismatch");

    Var<T> q = linear(c_tokens, tape.param(*params.wq));
    Var<T> k = linear(v_tokens, tape.param(*params.wk));
    Var<T> v = linear(v_tokens, tape.param(*params.wv));
    Var<T> ctx = attention(q, k, v, params.heads);
    Var<T> gate = tanh_v(tape.param(*params.gamma));
    return add(v_tokens, scale_by(ctx, gate));
}

}  // namespace ssmg

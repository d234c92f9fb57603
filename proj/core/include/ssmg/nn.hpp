#pragma once

#include <cblas.h>

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "ssmg/errors.hpp"
#include "ssmg/tape.hpp"
#include "ssmg/tensor.hpp"

namespace ssmg {

inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha, const float* a,
                 int64_t lda, const float* b, int64_t ldb, float beta, float* c, int64_t ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const double* a,
                 int64_t lda, const double* b, int64_t ldb, double beta, double* c, int64_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

namespace detail {

template <typename T>
Tape<T>& tape_of(Var<T> a) {
    if (!a.valid()) throw Error("op on invalid Var");
    return *a.tape;
}

template <typename T>
Tape<T>& tape_of(Var<T> a, Var<T> b) {
    Tape<T>& t = tape_of(a);
    if (b.tape != &t) throw Error("op on Vars from different tapes");
    return t;
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::tape_of(a, b);
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    av.check_shape(bv.shape, "add");
    TensorT<T> out = av;
    const T* bp = bv.ptr();
    T* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] += bp[i];
    int ai = a.idx, bi = b.idx;
    return t.make(std::move(out), t.needs(a) || t.needs(b), [ai, bi](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.node(self).grad;
        tp.accum(ai, g.ptr(), g.numel());
        tp.accum(bi, g.ptr(), g.numel());
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::tape_of(a, b);
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    av.check_shape(bv.shape, "sub");
    TensorT<T> out = av;
    const T* bp = bv.ptr();
    T* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] -= bp[i];
    int ai = a.idx, bi = b.idx;
    return t.make(std::move(out), t.needs(a) || t.needs(b), [ai, bi](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.node(self).grad;
        tp.accum(ai, g.ptr(), g.numel());
        if (T* gb = tp.gptr(bi)) {
            const T* gp = g.ptr();
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= gp[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::tape_of(a, b);
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    av.check_shape(bv.shape, "mul");
    TensorT<T> out(av.shape);
    const T* ap = av.ptr();
    const T* bp = bv.ptr();
    T* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] = ap[i] * bp[i];
    int ai = a.idx, bi = b.idx;
    return t.make(std::move(out), t.needs(a) || t.needs(b), [ai, bi](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.node(self).grad;
        const T* gp = g.ptr();
        if (T* ga = tp.gptr(ai)) {
            const T* bp2 = tp.val(bi).ptr();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += gp[i] * bp2[i];
        }
        if (T* gb = tp.gptr(bi)) {
            const T* ap2 = tp.val(ai).ptr();
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += gp[i] * ap2[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    Tape<T>& t = detail::tape_of(a);
    TensorT<T> out = t.val(a);
    T* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] *= s;
    int ai = a.idx;
    return t.make(std::move(out), t.needs(a), [ai, s](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.node(self).grad;
        if (T* ga = tp.gptr(ai)) {
            const T* gp = g.ptr();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += gp[i] * s;
        }
    });
}

// Multiplies a tensor by a scalar variable of shape [1].
template <typename T>
Var<T> scale_by(Var<T> a, Var<T> s) {
    Tape<T>& t = detail::tape_of(a, s);
    const auto& sv = t.val(s);
    if (sv.numel() != 1) throw ShapeError("scale_by: scalar must have one element");
    T sval = sv.data[0];
    TensorT<T> out = t.val(a);
    T* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] *= sval;
    int ai = a.idx, si = s.idx;
    return t.make(std::move(out), t.needs(a) || t.needs(s), [ai, si](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.node(self).grad;
        const T* gp = g.ptr();
        T sv2 = tp.val(si).data[0];
        if (T* ga = tp.gptr(ai)) {
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += gp[i] * sv2;
        }
        if (T* gs = tp.gptr(si)) {
            const T* ap = tp.val(ai).ptr();
            T acc = T(0);
            for (int64_t i = 0; i < g.numel(); ++i) acc += gp[i] * ap[i];
            gs[0] += acc;
        }
    });
}

template <typename T>
Var<T> tanh_v(Var<T> a) {
    Tape<T>& t = detail::tape_of(a);
    TensorT<T> out(t.val(a).shape);
    const T* ap = t.val(a).ptr();
    T* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] = std::tanh(ap[i]);
    int ai = a.idx;
    return t.make(std::move(out), t.needs(a), [ai](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.node(self).grad;
        const TensorT<T>& y = tp.node(self).val;
        if (T* ga = tp.gptr(ai)) {
            const T* gp = g.ptr();
            const T* yp = y.ptr();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += gp[i] * (T(1) - yp[i] * yp[i]);
        }
    });
}

template <typename T>
Var<T> silu(Var<T> a) {
    Tape<T>& t = detail::tape_of(a);
    TensorT<T> out(t.val(a).shape);
    const T* ap = t.val(a).ptr();
    T* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) {
        T s = T(1) / (T(1) + std::exp(-ap[i]));
        op[i] = ap[i] * s;
    }
    int ai = a.idx;
    return t.make(std::move(out), t.needs(a), [ai](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.node(self).grad;
        if (T* ga = tp.gptr(ai)) {
            const T* gp = g.ptr();
            const T* xp = tp.val(ai).ptr();
            for (int64_t i = 0; i < g.numel(); ++i) {
                T s = T(1) / (T(1) + std::exp(-xp[i]));
                ga[i] += gp[i] * s * (T(1) + xp[i] * (T(1) - s));
            }
        }
    });
}

// ---- shape plumbing ----

template <typename T>
Var<T> reshape(Var<T> a, std::vector<int64_t> shape) {
    Tape<T>& t = detail::tape_of(a);
    TensorT<T> out = t.val(a);
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    if (n != out.numel()) throw ShapeError("reshape: element count mismatch");
    out.shape = std::move(shape);
    int ai = a.idx;
    return t.make(std::move(out), t.needs(a), [ai](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.node(self).grad;
        tp.accum(ai, g.ptr(), g.numel());
    });
}

// [B,C,H,W] -> [B,H*W,C]
template <typename T>
Var<T> nchw_to_tokens(Var<T> a) {
    Tape<T>& t = detail::tape_of(a);
    const auto& av = t.val(a);
    if (av.shape.size() != 4) throw ShapeError("nchw_to_tokens: want rank 4");
    int64_t B = av.shape[0], C = av.shape[1], H = av.shape[2], W = av.shape[3];
    int64_t P = H * W;
    TensorT<T> out({B, P, C});
    const T* xp = av.ptr();
    T* op = out.ptr();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t p = 0; p < P; ++p) op[(b * P + p) * C + c] = xp[(b * C + c) * P + p];
    int ai = a.idx;
    return t.make(std::move(out), t.needs(a), [ai, B, C, P](Tape<T>& tp, int self) {
        const T* gp = tp.node(self).grad.ptr();
        if (T* ga = tp.gptr(ai)) {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t p = 0; p < P; ++p)
                        ga[(b * C + c) * P + p] += gp[(b * P + p) * C + c];
        }
    });
}

// [B,H*W,C] -> [B,C,H,W]
template <typename T>
Var<T> tokens_to_nchw(Var<T> a, int64_t H, int64_t W) {
    Tape<T>& t = detail::tape_of(a);
    const auto& av = t.val(a);
    if (av.shape.size() != 3 || av.shape[1] != H * W)
        throw ShapeError("tokens_to_nchw: want [B," + std::to_string(H * W) + ",C]");
    int64_t B = av.shape[0], P = av.shape[1], C = av.shape[2];
    TensorT<T> out({B, C, H, W});
    const T* xp = av.ptr();
    T* op = out.ptr();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t p = 0; p < P; ++p) op[(b * C + c) * P + p] = xp[(b * P + p) * C + c];
    int ai = a.idx;
    return t.make(std::move(out), t.needs(a), [ai, B, C, P](Tape<T>& tp, int self) {
        const T* gp = tp.node(self).grad.ptr();
        if (T* ga = tp.gptr(ai)) {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t p = 0; p < P; ++p)
                        ga[(b * P + p) * C + c] += gp[(b * C + c) * P + p];
        }
    });
}

// [B,N,C] -> [B*heads,N,C/heads]
template <typename T>
Var<T> split_heads(Var<T> a, int64_t heads) {
    Tape<T>& t = detail::tape_of(a);
    const auto& av = t.val(a);
    if (av.shape.size() != 3) throw ShapeError("split_heads: want rank 3");
    int64_t B = av.shape[0], N = av.shape[1], C = av.shape[2];
    if (C % heads != 0) throw ShapeError("split_heads: channels not divisible by heads");
    int64_t d = C / heads;
    TensorT<T> out({B * heads, N, d});
    const T* xp = av.ptr();
    T* op = out.ptr();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t n = 0; n < N; ++n)
                for (int64_t k = 0; k < d; ++k)
                    op[((b * heads + h) * N + n) * d + k] = xp[(b * N + n) * C + h * d + k];
    int ai = a.idx;
    return t.make(std::move(out), t.needs(a), [ai, B, N, C, heads, d](Tape<T>& tp, int self) {
        const T* gp = tp.node(self).grad.ptr();
        if (T* ga = tp.gptr(ai)) {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t k = 0; k < d; ++k)
                            ga[(b * N + n) * C + h * d + k] +=
                                gp[((b * heads + h) * N + n) * d + k];
        }
    });
}

// [B*heads,N,d] -> [B,N,heads*d]
template <typename T>
Var<T> merge_heads(Var<T> a, int64_t heads) {
    Tape<T>& t = detail::tape_of(a);
    const auto& av = t.val(a);
    if (av.shape.size() != 3 || av.shape[0] % heads != 0)
        throw ShapeError("merge_heads: bad input shape");
    int64_t B = av.shape[0] / heads, N = av.shape[1], d = av.shape[2];
    int64_t C = heads * d;
    TensorT<T> out({B, N, C});
    const T* xp = av.ptr();
    T* op = out.ptr();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t n = 0; n < N; ++n)
                for (int64_t k = 0; k < d; ++k)
                    op[(b * N + n) * C + h * d + k] = xp[((b * heads + h) * N + n) * d + k];
    int ai = a.idx;
    return t.make(std::move(out), t.needs(a), [ai, B, N, C, heads, d](Tape<T>& tp, int self) {
        const T* gp = tp.node(self).grad.ptr();
        if (T* ga = tp.gptr(ai)) {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t k = 0; k < d; ++k)
                            ga[((b * heads + h) * N + n) * d + k] +=
                                gp[(b * N + n) * C + h * d + k];
        }
    });
}

// Concatenates token tensors along the sequence dim: [B,N1,C] + [B,N2,C].
template <typename T>
Var<T> concat_tokens(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::tape_of(a, b);
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    if (av.shape.size() != 3 || bv.shape.size() != 3 || av.shape[0] != bv.shape[0] ||
        av.shape[2] != bv.shape[2])
        throw ShapeError("concat_tokens: incompatible shapes");
    int64_t B = av.shape[0], N1 = av.shape[1], N2 = bv.shape[1], C = av.shape[2];
    TensorT<T> out({B, N1 + N2, C});
    for (int64_t bb = 0; bb < B; ++bb) {
        std::copy(av.ptr() + bb * N1 * C, av.ptr() + (bb + 1) * N1 * C,
                  out.ptr() + bb * (N1 + N2) * C);
        std::copy(bv.ptr() + bb * N2 * C, bv.ptr() + (bb + 1) * N2 * C,
                  out.ptr() + bb * (N1 + N2) * C + N1 * C);
    }
    int ai = a.idx, bi = b.idx;
    return t.make(std::move(out), t.needs(a) || t.needs(b),
                  [ai, bi, B, N1, N2, C](Tape<T>& tp, int self) {
                      const T* gp = tp.node(self).grad.ptr();
                      if (T* ga = tp.gptr(ai)) {
                          for (int64_t bb = 0; bb < B; ++bb)
                              for (int64_t i = 0; i < N1 * C; ++i)
                                  ga[bb * N1 * C + i] += gp[bb * (N1 + N2) * C + i];
                      }
                      if (T* gb = tp.gptr(bi)) {
                          for (int64_t bb = 0; bb < B; ++bb)
                              for (int64_t i = 0; i < N2 * C; ++i)
                                  gb[bb * N2 * C + i] += gp[bb * (N1 + N2) * C + N1 * C + i];
                      }
                  });
}

// Concatenates along dim 0 in a single node.
template <typename T>
Var<T> concat_batch(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_batch: no inputs");
    Tape<T>& t = detail::tape_of(parts[0]);
    const auto& s0 = t.val(parts[0]).shape;
    std::vector<int64_t> oshape = s0;
    int64_t item = t.val(parts[0]).numel() / s0[0];
    int64_t total = 0;
    bool ng = false;
    std::vector<int> idxs;
    std::vector<int64_t> counts;
    for (const auto& p : parts) {
        if (p.tape != &t) throw Error("concat_batch: Vars from different tapes");
        const auto& s = t.val(p).shape;
        if (s.size() != s0.size()) throw ShapeError("concat_batch: rank mismatch");
        for (size_t d = 1; d < s.size(); ++d)
            if (s[d] != s0[d]) throw ShapeError("concat_batch: trailing dims mismatch");
        total += s[0];
        ng = ng || t.needs(p);
        idxs.push_back(p.idx);
        counts.push_back(s[0]);
    }
    oshape[0] = total;
    TensorT<T> out(oshape);
    T* op = out.ptr();
    for (const auto& p : parts) {
        const auto& v = t.val(p);
        std::copy(v.ptr(), v.ptr() + v.numel(), op);
        op += v.numel();
    }
    return t.make(std::move(out), ng, [idxs, counts, item](Tape<T>& tp, int self) {
        const T* gp = tp.node(self).grad.ptr();
        for (size_t i = 0; i < idxs.size(); ++i) {
            int64_t n = counts[i] * item;
            tp.accum(idxs[i], gp, n);
            gp += n;
        }
    });
}

template <typename T>
Var<T> concat_ch(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::tape_of(a, b);
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    if (av.shape.size() != 4 || bv.shape.size() != 4 || av.shape[0] != bv.shape[0] ||
        av.shape[2] != bv.shape[2] || av.shape[3] != bv.shape[3])
        throw ShapeError("concat_ch: incompatible shapes");
    int64_t B = av.shape[0], C1 = av.shape[1], C2 = bv.shape[1];
    int64_t S = av.shape[2] * av.shape[3];
    TensorT<T> out({B, C1 + C2, av.shape[2], av.shape[3]});
    for (int64_t bb = 0; bb < B; ++bb) {
        std::copy(av.ptr() + bb * C1 * S, av.ptr() + (bb + 1) * C1 * S,
                  out.ptr() + bb * (C1 + C2) * S);
        std::copy(bv.ptr() + bb * C2 * S, bv.ptr() + (bb + 1) * C2 * S,
                  out.ptr() + bb * (C1 + C2) * S + C1 * S);
    }
    int ai = a.idx, bi = b.idx;
    return t.make(std::move(out), t.needs(a) || t.needs(b),
                  [ai, bi, B, C1, C2, S](Tape<T>& tp, int self) {
                      const T* gp = tp.node(self).grad.ptr();
                      if (T* ga = tp.gptr(ai)) {
                          for (int64_t bb = 0; bb < B; ++bb)
                              for (int64_t i = 0; i < C1 * S; ++i)
                                  ga[bb * C1 * S + i] += gp[bb * (C1 + C2) * S + i];
                      }
                      if (T* gb = tp.gptr(bi)) {
                          for (int64_t bb = 0; bb < B; ++bb)
                              for (int64_t i = 0; i < C2 * S; ++i)
                                  gb[bb * C2 * S + i] += gp[bb * (C1 + C2) * S + C1 * S + i];
                      }
                  });
}

// Selects token rows by index: [B,N,C] -> [B,P,C].
template <typename T>
Var<T> gather_tokens(Var<T> a, std::shared_ptr<const std::vector<int>> idx) {
    Tape<T>& t = detail::tape_of(a);
    const auto& av = t.val(a);
    if (av.shape.size() != 3) throw ShapeError("gather_tokens: want rank 3");
    int64_t B = av.shape[0], N = av.shape[1], C = av.shape[2];
    int64_t P = static_cast<int64_t>(idx->size());
    TensorT<T> out({B, P, C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < P; ++p) {
            int n = (*idx)[static_cast<size_t>(p)];
            if (n < 0 || n >= N) throw RangeError("gather_tokens: index out of range");
            std::copy(av.ptr() + (b * N + n) * C, av.ptr() + (b * N + n + 1) * C,
                      out.ptr() + (b * P + p) * C);
        }
    int ai = a.idx;
    return t.make(std::move(out), t.needs(a), [ai, idx, B, N, C, P](Tape<T>& tp, int self) {
        const T* gp = tp.node(self).grad.ptr();
        if (T* ga = tp.gptr(ai)) {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t p = 0; p < P; ++p) {
                    int n = (*idx)[static_cast<size_t>(p)];
                    for (int64_t c = 0; c < C; ++c)
                        ga[(b * N + n) * C + c] += gp[(b * P + p) * C + c];
                }
        }
    });
}

// Writes token rows into a zero tensor of N rows: inverse layout of gather.
template <typename T>
Var<T> scatter_tokens(Var<T> a, std::shared_ptr<const std::vector<int>> idx, int64_t N) {
    Tape<T>& t = detail::tape_of(a);
    const auto& av = t.val(a);
    if (av.shape.size() != 3) throw ShapeError("scatter_tokens: want rank 3");
    int64_t B = av.shape[0], P = av.shape[1], C = av.shape[2];
    if (P != static_cast<int64_t>(idx->size())) throw ShapeError("scatter_tokens: index count");
    TensorT<T> out({B, N, C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < P; ++p) {
            int n = (*idx)[static_cast<size_t>(p)];
            if (n < 0 || n >= N) throw RangeError("scatter_tokens: index out of range");
            std::copy(av.ptr() + (b * P + p) * C, av.ptr() + (b * P + p + 1) * C,
                      out.ptr() + (b * N + n) * C);
        }
    int ai = a.idx;
    return t.make(std::move(out), t.needs(a), [ai, idx, B, N, C, P](Tape<T>& tp, int self) {
        const T* gp = tp.node(self).grad.ptr();
        if (T* ga = tp.gptr(ai)) {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t p = 0; p < P; ++p) {
                    int n = (*idx)[static_cast<size_t>(p)];
                    for (int64_t c = 0; c < C; ++c)
                        ga[(b * P + p) * C + c] += gp[(b * N + n) * C + c];
                }
        }
    });
}

// ---- dense / matmul ----

// x [..., K] times W [K, N] plus optional bias [N].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T>* b = nullptr) {
    Tape<T>& t = detail::tape_of(x, w);
    const auto& xv = t.val(x);
    const auto& wv = t.val(w);
    if (wv.shape.size() != 2) throw ShapeError("linear: weight must be rank 2");
    int64_t K = wv.shape[0], N = wv.shape[1];
    if (xv.shape.empty() || xv.shape.back() != K) throw ShapeError("linear: inner dim mismatch");
    int64_t M = xv.numel() / K;
    std::vector<int64_t> oshape = xv.shape;
    oshape.back() = N;
    TensorT<T> out(oshape);
    gemm(false, false, M, N, K, T(1), xv.ptr(), K, wv.ptr(), N, T(0), out.ptr(), N);
    int bi = -1;
    bool bneeds = false;
    if (b) {
        const auto& bv = t.val(*b);
        if (bv.numel() != N) throw ShapeError("linear: bias size mismatch");
        T* op = out.ptr();
        const T* bp = bv.ptr();
        for (int64_t m = 0; m < M; ++m)
            for (int64_t n = 0; n < N; ++n) op[m * N + n] += bp[n];
        bi = b->idx;
        bneeds = t.needs(*b);
    }
    int xi = x.idx, wi = w.idx;
    return t.make(std::move(out), t.needs(x) || t.needs(w) || bneeds,
                  [xi, wi, bi, M, N, K](Tape<T>& tp, int self) {
                      const T* gp = tp.node(self).grad.ptr();
                      if (T* gx = tp.gptr(xi))
                          gemm(false, true, M, K, N, T(1), gp, N, tp.val(wi).ptr(), N, T(1), gx, K);
                      if (T* gw = tp.gptr(wi))
                          gemm(true, false, K, N, M, T(1), tp.val(xi).ptr(), K, gp, N, T(1), gw, N);
                      if (bi >= 0) {
                          if (T* gb = tp.gptr(bi)) {
                              for (int64_t m = 0; m < M; ++m)
                                  for (int64_t n = 0; n < N; ++n) gb[n] += gp[m * N + n];
                          }
                      }
                  });
}

// Batched a [G,M,K] times b [G,K,N] -> [G,M,N].
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::tape_of(a, b);
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    if (av.shape.size() != 3 || bv.shape.size() != 3 || av.shape[0] != bv.shape[0] ||
        av.shape[2] != bv.shape[1])
        throw ShapeError("bmm: incompatible shapes");
    int64_t G = av.shape[0], M = av.shape[1], K = av.shape[2], N = bv.shape[2];
    TensorT<T> out({G, M, N});
    for (int64_t g = 0; g < G; ++g)
        gemm(false, false, M, N, K, T(1), av.ptr() + g * M * K, K, bv.ptr() + g * K * N, N, T(0),
             out.ptr() + g * M * N, N);
    int ai = a.idx, bi = b.idx;
    return t.make(std::move(out), t.needs(a) || t.needs(b),
                  [ai, bi, G, M, N, K](Tape<T>& tp, int self) {
                      const T* gp = tp.node(self).grad.ptr();
                      if (T* ga = tp.gptr(ai)) {
                          const T* bp = tp.val(bi).ptr();
                          for (int64_t g = 0; g < G; ++g)
                              gemm(false, true, M, K, N, T(1), gp + g * M * N, N, bp + g * K * N, N,
                                   T(1), ga + g * M * K, K);
                      }
                      if (T* gb = tp.gptr(bi)) {
                          const T* ap = tp.val(ai).ptr();
                          for (int64_t g = 0; g < G; ++g)
                              gemm(true, false, K, N, M, T(1), ap + g * M * K, K, gp + g * M * N, N,
                                   T(1), gb + g * K * N, N);
                      }
                  });
}

// Batched a [G,M,K] times b^T with b [G,N,K] -> [G,M,N].
template <typename T>
Var<T> bmm_nt(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::tape_of(a, b);
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    if (av.shape.size() != 3 || bv.shape.size() != 3 || av.shape[0] != bv.shape[0] ||
        av.shape[2] != bv.shape[2])
        throw ShapeError("bmm_nt: incompatible shapes");
    int64_t G = av.shape[0], M = av.shape[1], K = av.shape[2], N = bv.shape[1];
    TensorT<T> out({G, M, N});
    for (int64_t g = 0; g < G; ++g)
        gemm(false, true, M, N, K, T(1), av.ptr() + g * M * K, K, bv.ptr() + g * N * K, K, T(0),
             out.ptr() + g * M * N, N);
    int ai = a.idx, bi = b.idx;
    return t.make(std::move(out), t.needs(a) || t.needs(b),
                  [ai, bi, G, M, N, K](Tape<T>& tp, int self) {
                      const T* gp = tp.node(self).grad.ptr();
                      if (T* ga = tp.gptr(ai)) {
                          const T* bp = tp.val(bi).ptr();
                          for (int64_t g = 0; g < G; ++g)
                              gemm(false, false, M, K, N, T(1), gp + g * M * N, N, bp + g * N * K,
                                   K, T(1), ga + g * M * K, K);
                      }
                      if (T* gb = tp.gptr(bi)) {
                          const T* ap = tp.val(ai).ptr();
                          for (int64_t g = 0; g < G; ++g)
                              gemm(true, false, N, K, M, T(1), gp + g * M * N, N, ap + g * M * K, K,
                                   T(1), gb + g * N * K, K);
                      }
                  });
}

// Softmax over the last dim of [G,N,M]. The optional mask has shape [N,M],
// is shared across G, and marks allowed entries with nonzero bytes. Rows with
// no allowed entry produce exact zeros and propagate no gradient.
template <typename T>
Var<T> masked_softmax(Var<T> a, std::shared_ptr<const std::vector<uint8_t>> mask = nullptr) {
    Tape<T>& t = detail::tape_of(a);
    const auto& av = t.val(a);
    if (av.shape.size() != 3) throw ShapeError("masked_softmax: want rank 3");
    int64_t G = av.shape[0], N = av.shape[1], M = av.shape[2];
    if (mask && static_cast<int64_t>(mask->size()) != N * M)
        throw ShapeError("masked_softmax: mask size mismatch");
    TensorT<T> out({G, N, M});
    const T* xp = av.ptr();
    T* op = out.ptr();
    for (int64_t g = 0; g < G; ++g)
        for (int64_t n = 0; n < N; ++n) {
            const T* row = xp + (g * N + n) * M;
            T* orow = op + (g * N + n) * M;
            const uint8_t* mrow = mask ? mask->data() + n * M : nullptr;
            T mx = -std::numeric_limits<T>::infinity();
            for (int64_t m = 0; m < M; ++m)
                if (!mrow || mrow[m]) mx = std::max(mx, row[m]);
            if (mx == -std::numeric_limits<T>::infinity()) {
                for (int64_t m = 0; m < M; ++m) orow[m] = T(0);
                continue;
            }
            T sum = T(0);
            for (int64_t m = 0; m < M; ++m) {
                if (!mrow || mrow[m]) {
                    orow[m] = std::exp(row[m] - mx);
                    sum += orow[m];
                } else {
                    orow[m] = T(0);
                }
            }
            T inv = T(1) / sum;
            for (int64_t m = 0; m < M; ++m) orow[m] *= inv;
        }
    int ai = a.idx;
    return t.make(std::move(out), t.needs(a), [ai, G, N, M](Tape<T>& tp, int self) {
        const T* gp = tp.node(self).grad.ptr();
        const T* yp = tp.node(self).val.ptr();
        if (T* ga = tp.gptr(ai)) {
            for (int64_t r = 0; r < G * N; ++r) {
                const T* grow = gp + r * M;
                const T* yrow = yp + r * M;
                T dot = T(0);
                for (int64_t m = 0; m < M; ++m) dot += grow[m] * yrow[m];
                T* garow = ga + r * M;
                for (int64_t m = 0; m < M; ++m) garow[m] += yrow[m] * (grow[m] - dot);
            }
        }
    });
}

// ---- convolution ----

namespace detail {

template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t OH, int64_t OW, T* cols) {
    for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
            T* crow = cols + (oy * OW + ox) * C * kh * kw;
            for (int64_t c = 0; c < C; ++c)
                for (int64_t ky = 0; ky < kh; ++ky) {
                    int64_t iy = oy * stride + ky - pad;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        int64_t ix = ox * stride + kx - pad;
                        T v = T(0);
                        if (iy >= 0 && iy < H && ix >= 0 && ix < W) v = x[(c * H + iy) * W + ix];
                        crow[(c * kh + ky) * kw + kx] = v;
                    }
                }
        }
}

template <typename T>
void col2im_accum(const T* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                  int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* gx) {
    for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
            const T* crow = cols + (oy * OW + ox) * C * kh * kw;
            for (int64_t c = 0; c < C; ++c)
                for (int64_t ky = 0; ky < kh; ++ky) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        gx[(c * H + iy) * W + ix] += crow[(c * kh + ky) * kw + kx];
                    }
                }
        }
}

}  // namespace detail

// x [B,C,H,W], w [OC,C,kh,kw], b [OC].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int64_t stride, int64_t pad) {
    Tape<T>& t = detail::tape_of(x, w);
    const auto& xv = t.val(x);
    const auto& wv = t.val(w);
    const auto& bv = t.val(b);
    if (xv.shape.size() != 4 || wv.shape.size() != 4) throw ShapeError("conv2d: want rank 4");
    int64_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    int64_t OC = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
    if (wv.shape[1] != C) throw ShapeError("conv2d: channel mismatch");
    if (bv.numel() != OC) throw ShapeError("conv2d: bias size mismatch");
    int64_t OH = (H + 2 * pad - kh) / stride + 1;
    int64_t OW = (W + 2 * pad - kw) / stride + 1;
    if (OH <= 0 || OW <= 0) throw ShapeError("conv2d: output collapses to zero");
    int64_t Q = C * kh * kw;
    int64_t R = OH * OW;

    auto cols = std::make_shared<TensorT<T>>(std::vector<int64_t>{B * R, Q});
    for (int64_t bb = 0; bb < B; ++bb)
        detail::im2col(xv.ptr() + bb * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW,
                       cols->ptr() + bb * R * Q);

    TensorT<T> rows({B * R, OC});
    gemm(false, true, B * R, OC, Q, T(1), cols->ptr(), Q, wv.ptr(), Q, T(0), rows.ptr(), OC);

    TensorT<T> out({B, OC, OH, OW});
    const T* rp = rows.ptr();
    const T* bp = bv.ptr();
    T* op = out.ptr();
    for (int64_t bb = 0; bb < B; ++bb)
        for (int64_t oc = 0; oc < OC; ++oc)
            for (int64_t r = 0; r < R; ++r)
                op[(bb * OC + oc) * R + r] = rp[(bb * R + r) * OC + oc] + bp[oc];

    int xi = x.idx, wi = w.idx, bi = b.idx;
    bool ng = t.needs(x) || t.needs(w) || t.needs(b);
    return t.make(
        std::move(out), ng,
        [xi, wi, bi, cols, B, C, H, W, OC, kh, kw, stride, pad, OH, OW, Q, R](Tape<T>& tp,
                                                                              int self) {
            const T* gp = tp.node(self).grad.ptr();
            TensorT<T> grows({B * R, OC});
            T* grp = grows.ptr();
            for (int64_t bb = 0; bb < B; ++bb)
                for (int64_t oc = 0; oc < OC; ++oc)
                    for (int64_t r = 0; r < R; ++r)
                        grp[(bb * R + r) * OC + oc] = gp[(bb * OC + oc) * R + r];
            if (T* gw = tp.gptr(wi))
                gemm(true, false, OC, Q, B * R, T(1), grp, OC, cols->ptr(), Q, T(1), gw, Q);
            if (T* gb = tp.gptr(bi)) {
                for (int64_t m = 0; m < B * R; ++m)
                    for (int64_t oc = 0; oc < OC; ++oc) gb[oc] += grp[m * OC + oc];
            }
            if (T* gx = tp.gptr(xi)) {
                TensorT<T> gcols({B * R, Q});
                gemm(false, false, B * R, Q, OC, T(1), grp, OC, tp.val(wi).ptr(), Q, T(0),
                     gcols.ptr(), Q);
                for (int64_t bb = 0; bb < B; ++bb)
                    detail::col2im_accum(gcols.ptr() + bb * R * Q, C, H, W, kh, kw, stride, pad, OH,
                                         OW, gx + bb * C * H * W);
            }
        });
}

// ---- normalization ----

template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gain, Var<T> bias, int64_t groups, T eps = T(1e-5)) {
    Tape<T>& t = detail::tape_of(x, gain);
    const auto& xv = t.val(x);
    if (xv.shape.size() != 4) throw ShapeError("group_norm: want rank 4");
    int64_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    if (C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    if (t.val(gain).numel() != C || t.val(bias).numel() != C)
        throw ShapeError("group_norm: affine size mismatch");
    int64_t cg = C / groups;
    int64_t S = H * W;
    int64_t GN = cg * S;

    auto stats = std::make_shared<std::vector<T>>(static_cast<size_t>(B * groups * 2));
    TensorT<T> out({B, C, H, W});
    const T* xp = xv.ptr();
    const T* gp0 = t.val(gain).ptr();
    const T* bp0 = t.val(bias).ptr();
    T* op = out.ptr();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t g = 0; g < groups; ++g) {
            const T* base = xp + (b * C + g * cg) * S;
            T mean = T(0);
            for (int64_t i = 0; i < GN; ++i) mean += base[i];
            mean /= T(GN);
            T var = T(0);
            for (int64_t i = 0; i < GN; ++i) {
                T d = base[i] - mean;
                var += d * d;
            }
            var /= T(GN);
            T istd = T(1) / std::sqrt(var + eps);
            (*stats)[static_cast<size_t>((b * groups + g) * 2)] = mean;
            (*stats)[static_cast<size_t>((b * groups + g) * 2 + 1)] = istd;
            for (int64_t c = 0; c < cg; ++c) {
                int64_t ch = g * cg + c;
                const T* xrow = xp + (b * C + ch) * S;
                T* orow = op + (b * C + ch) * S;
                for (int64_t i = 0; i < S; ++i)
                    orow[i] = (xrow[i] - mean) * istd * gp0[ch] + bp0[ch];
            }
        }

    int xi = x.idx, gi = gain.idx, bi = bias.idx;
    bool ng = t.needs(x) || t.needs(gain) || t.needs(bias);
    return t.make(std::move(out), ng,
                  [xi, gi, bi, stats, B, C, S, groups, cg, GN](Tape<T>& tp, int self) {
                      const T* gout = tp.node(self).grad.ptr();
                      const T* xp2 = tp.val(xi).ptr();
                      const T* gainp = tp.val(gi).ptr();
                      T* gx = tp.gptr(xi);
                      T* ggain = tp.gptr(gi);
                      T* gbias = tp.gptr(bi);
                      for (int64_t b = 0; b < B; ++b)
                          for (int64_t g = 0; g < groups; ++g) {
                              T mean = (*stats)[static_cast<size_t>((b * groups + g) * 2)];
                              T istd = (*stats)[static_cast<size_t>((b * groups + g) * 2 + 1)];
                              T sum_dxh = T(0), sum_dxh_xh = T(0);
                              for (int64_t c = 0; c < cg; ++c) {
                                  int64_t ch = g * cg + c;
                                  const T* xrow = xp2 + (b * C + ch) * S;
                                  const T* grow = gout + (b * C + ch) * S;
                                  for (int64_t i = 0; i < S; ++i) {
                                      T xh = (xrow[i] - mean) * istd;
                                      T dxh = grow[i] * gainp[ch];
                                      sum_dxh += dxh;
                                      sum_dxh_xh += dxh * xh;
                                      if (ggain) ggain[ch] += grow[i] * xh;
                                      if (gbias) gbias[ch] += grow[i];
                                  }
                              }
                              if (gx) {
                                  T m1 = sum_dxh / T(GN);
                                  T m2 = sum_dxh_xh / T(GN);
                                  for (int64_t c = 0; c < cg; ++c) {
                                      int64_t ch = g * cg + c;
                                      const T* xrow = xp2 + (b * C + ch) * S;
                                      const T* grow = gout + (b * C + ch) * S;
                                      T* gxrow = gx + (b * C + ch) * S;
                                      for (int64_t i = 0; i < S; ++i) {
                                          T xh = (xrow[i] - mean) * istd;
                                          T dxh = grow[i] * gainp[ch];
                                          gxrow[i] += istd * (dxh - m1 - xh * m2);
                                      }
                                  }
                              }
                          }
                  });
}

// Normalizes over the last dim of any rank-n tensor.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
    Tape<T>& t = detail::tape_of(x, gain);
    const auto& xv = t.val(x);
    if (xv.shape.empty()) throw ShapeError("layer_norm: want rank >= 1");
    int64_t C = xv.shape.back();
    int64_t M = xv.numel() / C;
    if (t.val(gain).numel() != C || t.val(bias).numel() != C)
        throw ShapeError("layer_norm: affine size mismatch");

    auto stats = std::make_shared<std::vector<T>>(static_cast<size_t>(M * 2));
    TensorT<T> out(xv.shape);
    const T* xp = xv.ptr();
    const T* gp0 = t.val(gain).ptr();
    const T* bp0 = t.val(bias).ptr();
    T* op = out.ptr();
    for (int64_t m = 0; m < M; ++m) {
        const T* row = xp + m * C;
        T mean = T(0);
        for (int64_t c = 0; c < C; ++c) mean += row[c];
        mean /= T(C);
        T var = T(0);
        for (int64_t c = 0; c < C; ++c) {
            T d = row[c] - mean;
            var += d * d;
        }
        var /= T(C);
        T istd = T(1) / std::sqrt(var + eps);
        (*stats)[static_cast<size_t>(m * 2)] = mean;
        (*stats)[static_cast<size_t>(m * 2 + 1)] = istd;
        T* orow = op + m * C;
        for (int64_t c = 0; c < C; ++c) orow[c] = (row[c] - mean) * istd * gp0[c] + bp0[c];
    }

    int xi = x.idx, gi = gain.idx, bi = bias.idx;
    bool ng = t.needs(x) || t.needs(gain) || t.needs(bias);
    return t.make(std::move(out), ng, [xi, gi, bi, stats, M, C](Tape<T>& tp, int self) {
        const T* gout = tp.node(self).grad.ptr();
        const T* xp2 = tp.val(xi).ptr();
        const T* gainp = tp.val(gi).ptr();
        T* gx = tp.gptr(xi);
        T* ggain = tp.gptr(gi);
        T* gbias = tp.gptr(bi);
        for (int64_t m = 0; m < M; ++m) {
            T mean = (*stats)[static_cast<size_t>(m * 2)];
            T istd = (*stats)[static_cast<size_t>(m * 2 + 1)];
            const T* xrow = xp2 + m * C;
            const T* grow = gout + m * C;
            T sum_dxh = T(0), sum_dxh_xh = T(0);
            for (int64_t c = 0; c < C; ++c) {
                T xh = (xrow[c] - mean) * istd;
                T dxh = grow[c] * gainp[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
                if (ggain) ggain[c] += grow[c] * xh;
                if (gbias) gbias[c] += grow[c];
            }
            if (gx) {
                T m1 = sum_dxh / T(C);
                T m2 = sum_dxh_xh / T(C);
                T* gxrow = gx + m * C;
                for (int64_t c = 0; c < C; ++c) {
                    T xh = (xrow[c] - mean) * istd;
                    T dxh = grow[c] * gainp[c];
                    gxrow[c] += istd * (dxh - m1 - xh * m2);
                }
            }
        }
    });
}

// ---- spatial ----

template <typename T>
Var<T> upsample_nearest2(Var<T> x) {
    Tape<T>& t = detail::tape_of(x);
    const auto& xv = t.val(x);
    if (xv.shape.size() != 4) throw ShapeError("upsample_nearest2: want rank 4");
    int64_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    TensorT<T> out({B, C, H * 2, W * 2});
    const T* xp = xv.ptr();
    T* op = out.ptr();
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) {
                T v = xp[(bc * H + i) * W + j];
                int64_t base = (bc * 2 * H + 2 * i) * 2 * W + 2 * j;
                op[base] = v;
                op[base + 1] = v;
                op[base + 2 * W] = v;
                op[base + 2 * W + 1] = v;
            }
    int xi = x.idx;
    return t.make(std::move(out), t.needs(x), [xi, B, C, H, W](Tape<T>& tp, int self) {
        const T* gp = tp.node(self).grad.ptr();
        if (T* gx = tp.gptr(xi)) {
            for (int64_t bc = 0; bc < B * C; ++bc)
                for (int64_t i = 0; i < H; ++i)
                    for (int64_t j = 0; j < W; ++j) {
                        int64_t base = (bc * 2 * H + 2 * i) * 2 * W + 2 * j;
                        gx[(bc * H + i) * W + j] +=
                            gp[base] + gp[base + 1] + gp[base + 2 * W] + gp[base + 2 * W + 1];
                    }
        }
    });
}

// Adds a per-sample channel vector [B,C] across the spatial dims of [B,C,H,W].
template <typename T>
Var<T> add_bias_bc(Var<T> x, Var<T> v) {
    Tape<T>& t = detail::tape_of(x, v);
    const auto& xv = t.val(x);
    const auto& vv = t.val(v);
    if (xv.shape.size() != 4 || vv.shape.size() != 2 || xv.shape[0] != vv.shape[0] ||
        xv.shape[1] != vv.shape[1])
        throw ShapeError("add_bias_bc: incompatible shapes");
    int64_t B = xv.shape[0], C = xv.shape[1], S = xv.shape[2] * xv.shape[3];
    TensorT<T> out = xv;
    T* op = out.ptr();
    const T* vp = vv.ptr();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            T add_v = vp[b * C + c];
            T* row = op + (b * C + c) * S;
            for (int64_t i = 0; i < S; ++i) row[i] += add_v;
        }
    int xi = x.idx, vi = v.idx;
    return t.make(std::move(out), t.needs(x) || t.needs(v), [xi, vi, B, C, S](Tape<T>& tp,
                                                                              int self) {
        const T* gp = tp.node(self).grad.ptr();
        tp.accum(xi, gp, B * C * S);
        if (T* gv = tp.gptr(vi)) {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    const T* row = gp + (b * C + c) * S;
                    T acc = T(0);
                    for (int64_t i = 0; i < S; ++i) acc += row[i];
                    gv[b * C + c] += acc;
                }
        }
    });
}

// ---- reductions ----

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::tape_of(a, b);
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    av.check_shape(bv.shape, "mse");
    int64_t n = av.numel();
    const T* ap = av.ptr();
    const T* bp = bv.ptr();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        T d = ap[i] - bp[i];
        acc += d * d;
    }
    TensorT<T> out({1});
    out.data[0] = acc / T(n);
    int ai = a.idx, bi = b.idx;
    return t.make(std::move(out), t.needs(a) || t.needs(b), [ai, bi, n](Tape<T>& tp, int self) {
        T go = tp.node(self).grad.data[0];
        const T* ap2 = tp.val(ai).ptr();
        const T* bp2 = tp.val(bi).ptr();
        T k = go * T(2) / T(n);
        if (T* ga = tp.gptr(ai))
            for (int64_t i = 0; i < n; ++i) ga[i] += k * (ap2[i] - bp2[i]);
        if (T* gb = tp.gptr(bi))
            for (int64_t i = 0; i < n; ++i) gb[i] -= k * (ap2[i] - bp2[i]);
    });
}

// Scalar projection sum(a * r) against a fixed tensor, mostly for tests.
template <typename T>
Var<T> dot_const(Var<T> a, TensorT<T> r) {
    Tape<T>& t = detail::tape_of(a);
    const auto& av = t.val(a);
    av.check_shape(r.shape, "dot_const");
    T acc = T(0);
    const T* ap = av.ptr();
    for (int64_t i = 0; i < av.numel(); ++i) acc += ap[i] * r.data[static_cast<size_t>(i)];
    TensorT<T> out({1});
    out.data[0] = acc;
    int ai = a.idx;
    auto rp = std::make_shared<TensorT<T>>(std::move(r));
    return t.make(std::move(out), t.needs(a), [ai, rp](Tape<T>& tp, int self) {
        T go = tp.node(self).grad.data[0];
        if (T* ga = tp.gptr(ai)) {
            const T* rr = rp->ptr();
            for (int64_t i = 0; i < rp->numel(); ++i) ga[i] += go * rr[i];
        }
    });
}

// ---- composite attention ----

// Scaled dot-product attention over pre-projected token tensors.
// q [B,Nq,C], k/v [B,Nk,C]; the optional mask is [Nq,Nk] shared across batch
// and heads. Fully blocked query rows yield zero output rows.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int64_t heads,
                 std::shared_ptr<const std::vector<uint8_t>> mask = nullptr) {
    const auto& qs = q.val().shape;
    if (qs.size() != 3) throw ShapeError("attention: want rank 3 tokens");
    int64_t C = qs[2];
    if (C % heads != 0) throw ShapeError("attention: channels not divisible by heads");
    T inv_sqrt_d = T(1) / std::sqrt(T(C / heads));
    Var<T> qh = split_heads(q, heads);
    Var<T> kh = split_heads(k, heads);
    Var<T> vh = split_heads(v, heads);
    Var<T> logits = scale(bmm_nt(qh, kh), inv_sqrt_d);
    Var<T> att = masked_softmax(logits, std::move(mask));
    Var<T> ctx = bmm(att, vh);
    return merge_heads(ctx, heads);
}

}  // namespace ssmg

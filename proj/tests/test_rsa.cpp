#include <doctest.h>

#include <bit>
#include <cmath>
#include <vector>

#include "ssmg/rsa.hpp"
#include "testutil.hpp"

using namespace ssmg;
using ssmg::testutil::gradcheck;
using ssmg::testutil::randomize_params;

namespace {

// "Some pair of distinct entities exists across the two coverage sets",
// spelled out bit by bit.
bool allowed_brute(uint64_t a, uint64_t b) {
    for (int i = 0; i < 64; ++i) {
        if (!((a >> i) & 1)) continue;
        for (int j = 0; j < 64; ++j) {
            if (!((b >> j) & 1)) continue;
            if (i != j) return true;
        }
    }
    return false;
}

SpatialSemanticMap make_map(int h, int w, int c, uint64_t seed, int n_entities) {
    SpatialSemanticMap m;
    m.h = h;
    m.w = w;
    m.c = c;
    m.n_entities = n_entities;
    m.feat = Tensor({h, w, c});
    m.coverage.assign(static_cast<size_t>(h) * w, 0);
    Rng rng(seed);
    for (auto& v : m.feat.data) v = static_cast<float>(rng.gauss());
    for (auto& cov : m.coverage) {
        if (rng.below(4) == 0) continue;  // leave some background
        for (int e = 0; e < n_entities; ++e)
            if (rng.below(3) == 0) cov |= uint64_t(1) << e;
    }
    // Zero features where nothing covers, matching init_map output.
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            if (m.cov(i, j) == 0)
                for (int ch = 0; ch < c; ++ch) m.feat.at3(i, j, ch) = 0.0f;
    return m;
}

}  // namespace

TEST_CASE("relation_allowed matches the brute-force pair search") {
    Rng rng(1);
    CHECK(!relation_allowed(0, 0));
    CHECK(!relation_allowed(0, 5));
    CHECK(!relation_allowed(1, 0));
    CHECK(!relation_allowed(1, 1));        // same single entity
    CHECK(relation_allowed(1, 2));         // distinct singles
    CHECK(relation_allowed(3, 3));         // overlap carries a cross pair
    CHECK(relation_allowed(3, 1));
    CHECK(relation_allowed(uint64_t(1) << 63, 1));
    for (int trial = 0; trial < 2000; ++trial) {
        uint64_t a = 0, b = 0;
        for (int e = 0; e < 8; ++e) {
            if (rng.below(3) == 0) a |= uint64_t(1) << rng.below(64);
            if (rng.below(3) == 0) b |= uint64_t(1) << rng.below(64);
        }
        CHECK(relation_allowed(a, b) == allowed_brute(a, b));
    }
}

TEST_CASE("build_relation_matrix matches per-pair recomputation") {
    for (uint64_t seed : {10ull, 11ull, 12ull, 13ull}) {
        SpatialSemanticMap map = make_map(5, 6, 4, seed, 6);
        RelationMatrix m = build_relation_matrix(map);
        int hw = 30;
        REQUIRE(m.n_tokens == hw + 1);
        for (int a = 0; a < hw; ++a) {
            uint64_t ca = map.coverage[static_cast<size_t>(a)];
            for (int b = 0; b < hw; ++b) {
                uint64_t cb = map.coverage[static_cast<size_t>(b)];
                CHECK(m.at(a, b) == (relation_allowed(ca, cb) ? 1 : 0));
            }
            CHECK(m.at(a, hw) == (ca != 0 ? 1 : 0));
            CHECK(m.at(hw, a) == (ca != 0 ? 1 : 0));
        }
        CHECK(m.at(hw, hw) == 0);
    }
}

TEST_CASE("masked_attention weights are row-stochastic over allowed keys") {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        int n = 3 + static_cast<int>(rng.below(8));
        RelationMatrix m;
        m.n_tokens = n;
        m.allowed.assign(static_cast<size_t>(n) * n, 0);
        for (auto& v : m.allowed) v = rng.below(2) ? 1 : 0;

        Tensor q({n, 4}), k({n, 4}), v({n, n});
        for (auto& x : q.data) x = static_cast<float>(rng.gauss()) * 2.0f;
        for (auto& x : k.data) x = static_cast<float>(rng.gauss()) * 2.0f;
        for (int i = 0; i < n; ++i) v.at2(i, i) = 1.0f;  // identity exposes the weights

        Tensor w = masked_attention(q, k, v, m);
        for (int i = 0; i < n; ++i) {
            bool any = false;
            double sum = 0;
            for (int j = 0; j < n; ++j) {
                float wij = w.at2(i, j);
                if (!m.at(i, j)) {
                    CHECK(wij == 0.0f);
                } else {
                    any = true;
                    CHECK(wij >= 0.0f);
                }
                sum += wij;
            }
            if (any)
                CHECK(std::abs(sum - 1.0) <= 1e-6);
            else
                CHECK(sum == 0.0);
        }
    }
}

TEST_CASE("rsa_apply agrees with the reference attention path") {
    const int h = 4, w = 4, c = 8;
    const int64_t heads = 2, dh = c / heads;
    SpatialSemanticMap map = make_map(h, w, c, 31, 3);

    ParamStore<float> store;
    RsaParams params = RsaParams::create(store, "rsa", c, heads);
    Rng prng(33);
    params.init(prng, false);

    Tensor scene({1, 1, c});
    for (auto& v : scene.data) v = static_cast<float>(prng.gauss());

    Tensor tokens({1, h * w, c});
    tokens.data = map.feat.data;

    Tape<float> tape;
    Var<float> out = rsa_apply(tape, tape.input(tokens), tape.input(scene), map, params);
    const Tensor& got = tape.val(out);

    // Oracle: compact tokens, layer norm, per-head reference masked attention.
    std::vector<int> covered;
    for (int p = 0; p < h * w; ++p)
        if (map.coverage[static_cast<size_t>(p)] != 0) covered.push_back(p);
    REQUIRE(!covered.empty());
    const int np = static_cast<int>(covered.size());
    const int n = np + 1;

    RelationMatrix compact;
    compact.n_tokens = n;
    compact.allowed.assign(static_cast<size_t>(n) * n, 0);
    for (int a = 0; a < np; ++a) {
        uint64_t ca = map.coverage[static_cast<size_t>(covered[static_cast<size_t>(a)])];
        for (int b = 0; b < np; ++b) {
            uint64_t cb = map.coverage[static_cast<size_t>(covered[static_cast<size_t>(b)])];
            if (relation_allowed(ca, cb))
                compact.allowed[static_cast<size_t>(a) * n + static_cast<size_t>(b)] = 1;
        }
        compact.allowed[static_cast<size_t>(a) * n + static_cast<size_t>(np)] = 1;
        compact.allowed[static_cast<size_t>(np) * n + static_cast<size_t>(a)] = 1;
    }

    Tensor normed({n, c});
    for (int r = 0; r < n; ++r) {
        std::vector<double> row(static_cast<size_t>(c));
        for (int ch = 0; ch < c; ++ch)
            row[static_cast<size_t>(ch)] =
                r < np ? tokens.data[static_cast<size_t>(covered[static_cast<size_t>(r)]) * c +
                                     static_cast<size_t>(ch)]
                       : scene.data[static_cast<size_t>(ch)];
        double mean = 0;
        for (double v : row) mean += v;
        mean /= c;
        double var = 0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= c;
        for (int ch = 0; ch < c; ++ch)
            normed.at2(r, ch) = static_cast<float>(
                (row[static_cast<size_t>(ch)] - mean) / std::sqrt(var + 1e-5) *
                    params.ln_gain->value.data[static_cast<size_t>(ch)] +
                params.ln_bias->value.data[static_cast<size_t>(ch)]);
    }
    auto matmul = [&](const Tensor& x, const Tensor& wt) {
        Tensor y({n, c});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                double acc = 0;
                for (int kk = 0; kk < c; ++kk) acc += x.at2(i, kk) * wt.at2(kk, j);
                y.at2(i, j) = static_cast<float>(acc);
            }
        return y;
    };
    Tensor q = matmul(normed, params.wq->value);
    Tensor k = matmul(normed, params.wk->value);
    Tensor v = matmul(normed, params.wv->value);
    Tensor ctx({n, c});
    for (int64_t hd = 0; hd < heads; ++hd) {
        Tensor qh({n, dh}), kh({n, dh}), vh({n, dh});
        for (int i = 0; i < n; ++i)
            for (int64_t j = 0; j < dh; ++j) {
                qh.at2(i, j) = q.at2(i, hd * dh + j);
                kh.at2(i, j) = k.at2(i, hd * dh + j);
                vh.at2(i, j) = v.at2(i, hd * dh + j);
            }
        Tensor oh = masked_attention(qh, kh, vh, compact);
        for (int i = 0; i < n; ++i)
            for (int64_t j = 0; j < dh; ++j) ctx.at2(i, hd * dh + j) = oh.at2(i, j);
    }
    Tensor update = matmul(ctx, params.wo->value);

    Tensor want = tokens;
    for (int a = 0; a < np; ++a)
        for (int ch = 0; ch < c; ++ch)
            want.data[static_cast<size_t>(covered[static_cast<size_t>(a)]) * c +
                      static_cast<size_t>(ch)] += update.at2(a, ch);

    REQUIRE(got.shape == std::vector<int64_t>{1, h * w, c});
    float max_diff = 0.0f;
    for (size_t i = 0; i < want.data.size(); ++i)
        max_diff = std::max(max_diff, std::abs(got.data[i] - want.data[i]));
    CHECK(max_diff < 5e-4f);

    // Background rows pass through bitwise.
    for (int p = 0; p < h * w; ++p) {
        if (map.coverage[static_cast<size_t>(p)] != 0) continue;
        for (int ch = 0; ch < c; ++ch)
            CHECK(got.data[static_cast<size_t>(p) * c + static_cast<size_t>(ch)] ==
                  tokens.data[static_cast<size_t>(p) * c + static_cast<size_t>(ch)]);
    }
}

TEST_CASE("zero output projection makes the block an exact identity") {
    SpatialSemanticMap map = make_map(4, 4, 8, 41, 3);
    ParamStore<float> store;
    RsaParams params = RsaParams::create(store, "rsa", 8, 2);
    Rng prng(43);
    params.init(prng, true);
    Tensor scene({8});
    for (auto& v : scene.data) v = static_cast<float>(prng.gauss());

    SpatialSemanticMap out = rsa_block(map, scene, params);
    CHECK(out.feat.data == map.feat.data);
    CHECK(out.coverage == map.coverage);
}

TEST_CASE("a fully uncovered map is returned untouched") {
    SpatialSemanticMap map;
    map.h = 3;
    map.w = 3;
    map.c = 8;
    map.feat = Tensor({3, 3, 8});
    map.coverage.assign(9, 0);
    Rng rng(47);
    for (auto& v : map.feat.data) v = static_cast<float>(rng.gauss());

    ParamStore<float> store;
    RsaParams params = RsaParams::create(store, "rsa", 8, 2);
    params.init(rng, false);
    Tensor scene({8});
    for (auto& v : scene.data) v = static_cast<float>(rng.gauss());

    SpatialSemanticMap out = rsa_block(map, scene, params);
    CHECK(out.feat.data == map.feat.data);
}

TEST_CASE("rsa_apply gradients pass finite differences") {
    const int h = 3, w = 3, c = 8;
    SpatialSemanticMap map = make_map(h, w, c, 53, 3);

    ParamStore<double> store;
    auto params = RsaParamsT<double>::create(store, "rsa", c, 2);
    auto& tokens = store.create("tokens", {1, h * w, c});
    auto& scene = store.create("scene", {1, 1, c});
    randomize_params(store, 59);
    // Keep the layer norm affine near its usual operating point.
    for (auto& v : params.ln_gain->value.data) v = 1.0 + 0.1 * v;

    TensorD target({1, h * w, c});
    Rng trng(61);
    for (auto& v : target.data) v = trng.gauss();

    auto res = gradcheck(store, [&](Tape<double>& t) {
        return mse(rsa_apply(t, t.param(tokens), t.param(scene), map, params), t.input(target));
    });
    CHECK(res.max_rel <= 1e-4);
    CHECK(res.checked > 100);
}

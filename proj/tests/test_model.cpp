#include <doctest.h>

#include <cmath>

#include "ssmg/model.hpp"
#include "testutil.hpp"

using namespace ssmg;
using ssmg::testutil::randomize_params;

namespace {

UNetConfig tiny_cfg() {
    UNetConfig cfg;
    cfg.base = 8;
    cfg.ch_mult = {1, 2};
    cfg.sin_dim = 8;
    cfg.time_dim = 16;
    cfg.text_dim = 8;
    cfg.map_channels = 8;
    cfg.heads = 2;
    cfg.groups = 4;
    cfg.img_size = 8;
    return cfg;
}

VocabConfig tiny_vocab() {
    VocabConfig v;
    v.size = 128;
    v.dim = 8;
    v.seed = 7;
    return v;
}

Tensor randf(std::vector<int64_t> shape, uint64_t seed, float scale = 1.0f) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (auto& v : t.data) v = static_cast<float>(rng.gauss()) * scale;
    return t;
}

SpatialSemanticMap simple_map(int h, int w, int c) {
    SpatialSemanticMap m;
    m.h = h;
    m.w = w;
    m.c = c;
    m.n_entities = 2;
    m.feat = Tensor({h, w, c});
    m.coverage.assign(static_cast<size_t>(h) * w, 0);
    Rng rng(99);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            uint64_t cov = 0;
            if (j < w / 2 && i < h / 2) cov = 1;
            if (j >= w / 2 && i >= h / 2) cov = 2;
            m.coverage[static_cast<size_t>(i) * w + static_cast<size_t>(j)] = cov;
            if (cov)
                for (int ch = 0; ch < c; ++ch)
                    m.feat.at3(i, j, ch) = static_cast<float>(rng.gauss());
        }
    return m;
}

Tensor forward_once(Model& m, const Tensor& z, const Tensor& temb, const Tensor& text,
                    const Tensor* branch_in, std::vector<uint8_t> fuse_mask = {}) {
    Tape<float> t;
    CondInput<float> local;
    const CondInput<float>* use = nullptr;
    if (branch_in) {
        local.branch_in = t.input(Tensor(*branch_in));
        local.fuse_mask = std::move(fuse_mask);
        use = &local;
    }
    Var<float> out =
        denoise_forward(t, m, t.input(z), t.input(temb), t.input(text), use);
    return t.val(out);
}

}  // namespace

TEST_CASE("config validation rejects bad shapes and flags") {
    UNetConfig cfg = tiny_cfg();
    CHECK_NOTHROW(cfg.validate());
    cfg.base = 10;  // 10 % 4 groups != 0
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = tiny_cfg();
    cfg.ch_mult = {1, 2, 4};  // 8 >> 2 = 2 < 4
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = tiny_cfg();
    cfg.img_size = 9;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = tiny_cfg();
    cfg.ch_mult.clear();
    CHECK_THROWS_AS(cfg.validate(), ValueError);

    AblationFlags f;
    CHECK_NOTHROW(f.validate());
    f.guidance = "rgb";
    f.rsa = true;
    CHECK_THROWS_AS(f.validate(), ValueError);
    f.rsa = false;
    CHECK_NOTHROW(f.validate());
    f.guidance = "nope";
    CHECK_THROWS_AS(f.validate(), ValueError);
    f = AblationFlags{};
    f.fusion = "concat";
    CHECK_THROWS_AS(f.validate(), ValueError);
}

TEST_CASE("time_embedding_sin matches the closed form") {
    std::vector<int> ts = {0, 1, 999};
    TensorD e = time_embedding_sin<double>(ts, 8);
    REQUIRE(e.shape == std::vector<int64_t>{3, 8});
    for (size_t b = 0; b < ts.size(); ++b)
        for (int64_t k = 0; k < 4; ++k) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / 4.0);
            CHECK(e.at2(static_cast<int64_t>(b), k) ==
                  doctest::Approx(std::sin(ts[b] * freq)).epsilon(1e-12));
            CHECK(e.at2(static_cast<int64_t>(b), 4 + k) ==
                  doctest::Approx(std::cos(ts[b] * freq)).epsilon(1e-12));
        }
    // t = 0 is all zeros then all ones.
    for (int64_t k = 0; k < 4; ++k) {
        CHECK(e.at2(0, k) == 0.0);
        CHECK(e.at2(0, 4 + k) == 1.0);
    }
}

TEST_CASE("a fresh model predicts exactly zero noise, conditioned or not") {
    AblationFlags flags;  // map + rsa + lsa
    Model m = Model::create(tiny_cfg(), flags, tiny_vocab());
    m.init_params(123);

    const int64_t B = 2;
    Tensor z = randf({B, 3, 8, 8}, 1);
    Tensor temb = time_embedding_sin<float>({10, 500}, m.cfg.sin_dim);
    Tensor text = randf({B, 1, 8}, 2);

    Tensor uncond = forward_once(m, z, temb, text, nullptr);
    REQUIRE(uncond.shape == std::vector<int64_t>{B, 3, 8, 8});
    for (float v : uncond.data) CHECK(v == 0.0f);

    // Fresh fusion gates are closed and the output conv is zero, so the
    // conditional pass is bitwise identical to the unconditional one.
    Tensor branch_in = randf({B, 8, 8, 8}, 3);
    Tensor cond_out = forward_once(m, z, temb, text, &branch_in, {1, 1});
    CHECK(cond_out.data == uncond.data);
}

TEST_CASE("branch weights start as an exact copy of the encoder") {
    Model m = Model::create(tiny_cfg(), AblationFlags{}, tiny_vocab());
    m.init_params(7);
    std::vector<ParamTensor<float>*> src, dst;
    m.enc.collect(m.cfg, src);
    m.branch.collect(m.cfg, dst);
    REQUIRE(src.size() == dst.size());
    REQUIRE(src.size() > 20);
    for (size_t i = 0; i < src.size(); ++i) {
        CHECK(src[i]->value.shape == dst[i]->value.shape);
        CHECK(src[i]->value.data == dst[i]->value.data);
    }
}

TEST_CASE("conditioning a branchless model is a config mismatch") {
    AblationFlags flags;
    flags.guidance = "none";
    flags.rsa = false;
    flags.fusion = "add";
    Model m = Model::create(tiny_cfg(), flags, tiny_vocab());
    m.init_params(11);

    Tensor z = randf({1, 3, 8, 8}, 4);
    Tensor temb = time_embedding_sin<float>({5}, m.cfg.sin_dim);
    Tensor text = randf({1, 1, 8}, 5);
    Tape<float> t;
    CondInput<float> cond;
    cond.branch_in = t.input(randf({1, 8, 8, 8}, 6));
    cond.fuse_mask = {1};
    CHECK_THROWS_AS(
        denoise_forward(t, m, t.input(z), t.input(temb), t.input(text), &cond),
        ConfigMismatch);
}

TEST_CASE("a zeroed fuse mask reproduces the unconditional pass bitwise") {
    Model m = Model::create(tiny_cfg(), AblationFlags{}, tiny_vocab());
    m.init_params(21);
    randomize_params(m.store, 22, 0.05f);  // make fusion genuinely active

    const int64_t B = 2;
    Tensor z = randf({B, 3, 8, 8}, 7);
    Tensor temb = time_embedding_sin<float>({100, 900}, m.cfg.sin_dim);
    Tensor text = randf({B, 1, 8}, 8, 0.3f);
    Tensor branch_in = randf({B, 8, 8, 8}, 9, 0.3f);

    Tensor uncond = forward_once(m, z, temb, text, nullptr);

    Tensor off = forward_once(m, z, temb, text, &branch_in, {0, 0});
    CHECK(off.data == uncond.data);

    Tensor mixed = forward_once(m, z, temb, text, &branch_in, {1, 0});
    size_t per = mixed.data.size() / 2;
    float diff0 = 0.0f;
    for (size_t i = 0; i < per; ++i)
        diff0 = std::max(diff0, std::abs(mixed.data[i] - uncond.data[i]));
    CHECK(diff0 > 0.0f);  // fused sample moved
    for (size_t i = per; i < mixed.data.size(); ++i)
        CHECK(mixed.data[i] == uncond.data[i]);  // masked sample untouched
}

TEST_CASE("build_cond_tokens lays the map out channel-first") {
    UNetConfig cfg = tiny_cfg();
    AblationFlags flags;
    flags.rsa = false;
    Model m = Model::create(cfg, flags, tiny_vocab());
    m.init_params(31);

    SpatialSemanticMap map = simple_map(8, 8, 8);
    Tensor scene = randf({8}, 10);
    Tape<float> t;
    Var<float> tok = build_cond_tokens(t, m, map, scene);
    const Tensor& v = t.val(tok);
    REQUIRE(v.shape == std::vector<int64_t>{1, 8, 8, 8});
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            for (int c = 0; c < 8; ++c)
                CHECK(v.at4(0, c, i, j) == map.feat.at3(i, j, c));
}

TEST_CASE("build_cond_tokens with a zeroed RSA projection is still the raw map") {
    Model m = Model::create(tiny_cfg(), AblationFlags{}, tiny_vocab());
    m.init_params(41);  // rsa init zeroes the output projection

    SpatialSemanticMap map = simple_map(8, 8, 8);
    Tensor scene = randf({8}, 11);
    Tape<float> t;
    Var<float> tok = build_cond_tokens(t, m, map, scene);
    const Tensor& v = t.val(tok);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            for (int c = 0; c < 8; ++c)
                CHECK(v.at4(0, c, i, j) == map.feat.at3(i, j, c));

    // Open the projection and covered pixels move while background stays.
    Rng rng(43);
    for (auto& w : m.rsa.wo->value.data) w = static_cast<float>(rng.gauss()) * 0.1f;
    Tape<float> t2;
    const Tensor& v2 = t2.val(build_cond_tokens(t2, m, map, scene));
    float moved = 0.0f;
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
            bool covered = map.cov(i, j) != 0;
            for (int c = 0; c < 8; ++c) {
                float d = std::abs(v2.at4(0, c, i, j) - map.feat.at3(i, j, c));
                if (covered)
                    moved = std::max(moved, d);
                else
                    CHECK(d == 0.0f);
            }
        }
    CHECK(moved > 0.0f);
}

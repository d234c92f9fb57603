#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ssmg/train.hpp"
#include "testutil.hpp"

using namespace ssmg;
namespace fs = std::filesystem;

namespace {

UNetConfig small32() {
    UNetConfig cfg;
    cfg.base = 8;
    cfg.ch_mult = {1, 2};
    cfg.sin_dim = 8;
    cfg.time_dim = 16;
    cfg.text_dim = 8;
    cfg.map_channels = 8;
    cfg.heads = 2;
    cfg.groups = 4;
    cfg.img_size = 32;
    return cfg;
}

VocabConfig vocab8() {
    VocabConfig v;
    v.size = 256;
    v.dim = 8;
    v.seed = 3;
    return v;
}

TrainConfig small_train_cfg() {
    TrainConfig cfg;
    cfg.unet = small32();
    cfg.vocab = vocab8();
    cfg.batch_size = 4;
    cfg.max_steps = 4;
    cfg.cond_drop = 0.1;
    cfg.seed = 11;
    cfg.checkpoint_every = 0;
    return cfg;
}

std::vector<TrainSample> make_samples(int n, uint64_t seed) {
    std::vector<TrainSample> out;
    for (int i = 0; i < n; ++i) {
        Scene s = gen_scene(derive_seed(seed, "t", static_cast<uint64_t>(i)));
        out.push_back({image_to_tensor(s.image), s.layout});
    }
    return out;
}

std::vector<const TrainSample*> ptrs(const std::vector<TrainSample>& v) {
    std::vector<const TrainSample*> p;
    for (const auto& s : v) p.push_back(&s);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("train config json round-trips and validates") {
    TrainConfig cfg = small_train_cfg();
    cfg.lr = 3e-4;
    cfg.epochs = 7;
    TrainConfig back = parse_train_config(train_config_to_json(cfg));
    CHECK(back.unet.base == 8);
    CHECK(back.unet.ch_mult == std::vector<int64_t>{1, 2});
    CHECK(back.lr == doctest::Approx(3e-4).epsilon(1e-15));
    CHECK(back.epochs == 7);
    CHECK(back.max_steps == 4);
    CHECK(back.seed == 11);
    CHECK(back.flags.guidance == "map");

    CHECK_THROWS_AS(parse_train_config("not json"), SchemaError);
    cfg.cond_drop = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = small_train_cfg();
    cfg.vocab.dim = 16;  // != text_dim
    CHECK_THROWS_AS(cfg.validate(), ConfigMismatch);
}

TEST_CASE("batches carry embeddings for kept samples and zeros for dropped") {
    Model m = Model::create(small32(), AblationFlags{}, vocab8());
    m.init_params(1);
    VocabTable vocab(vocab8());
    auto samples = make_samples(4, 5);

    Rng rng_a(99);
    TrainBatch keep = make_train_batch(m, vocab, ptrs(samples), 0.0, rng_a);
    REQUIRE(keep.x0.shape == std::vector<int64_t>{4, 3, 32, 32});
    REQUIRE(keep.maps.size() == 4);
    CHECK(keep.rgb.numel() == 0);
    for (int b = 0; b < 4; ++b) {
        CHECK(keep.use_cond[static_cast<size_t>(b)] == 1);
        CHECK(keep.t_steps[static_cast<size_t>(b)] >= 0);
        CHECK(keep.t_steps[static_cast<size_t>(b)] < 1000);
        auto emb = vocab.embed(samples[static_cast<size_t>(b)].layout.global_desc);
        for (int i = 0; i < 8; ++i) {
            CHECK(keep.text.at3(b, 0, i) == emb[static_cast<size_t>(i)]);
            CHECK(keep.scene.at2(b, i) == emb[static_cast<size_t>(i)]);
        }
        // x0 is the [-1,1] image tensor.
        CHECK(keep.x0.at4(b, 0, 0, 0) ==
              samples[static_cast<size_t>(b)].x0.at3(0, 0, 0));
    }

    Rng rng_b(99);
    TrainBatch drop = make_train_batch(m, vocab, ptrs(samples), 1.01, rng_b);
    for (int b = 0; b < 4; ++b) {
        CHECK(drop.use_cond[static_cast<size_t>(b)] == 0);
        for (int i = 0; i < 8; ++i) {
            CHECK(drop.text.at3(b, 0, i) == 0.0f);
            CHECK(drop.scene.at2(b, i) == 0.0f);
        }
    }
    // The random draws themselves are identical across the two calls.
    CHECK(keep.eps.data == drop.eps.data);
    CHECK(keep.t_steps == drop.t_steps);
}

TEST_CASE("rgb guidance fills the render instead of maps") {
    AblationFlags flags;
    flags.guidance = "rgb";
    flags.rsa = false;
    flags.fusion = "add";
    Model m = Model::create(small32(), flags, vocab8());
    m.init_params(2);
    VocabTable vocab(vocab8());
    auto samples = make_samples(2, 6);
    Rng rng(1);
    TrainBatch batch = make_train_batch(m, vocab, ptrs(samples), 0.0, rng);
    CHECK(batch.maps.empty());
    REQUIRE(batch.rgb.shape == std::vector<int64_t>{2, 3, 32, 32});
    Tensor want = render_layout_rgb(samples[1].layout, 32, 32);
    for (int64_t i = 0; i < want.numel(); ++i)
        CHECK(batch.rgb.data[static_cast<size_t>(want.numel() + i)] ==
              want.data[static_cast<size_t>(i)]);

    Tape<float> t;
    Var<float> loss = training_step_loss(t, m, batch);
    CHECK(std::isfinite(t.val(loss).data[0]));
}

TEST_CASE("a fresh model's loss is exactly the noise energy") {
    Model m = Model::create(small32(), AblationFlags{}, vocab8());
    m.init_params(3);
    VocabTable vocab(vocab8());
    auto samples = make_samples(2, 7);
    Rng rng(5);
    TrainBatch batch = make_train_batch(m, vocab, ptrs(samples), 0.1, rng);

    Tape<float> t;
    Var<float> loss = training_step_loss(t, m, batch);
    double want = 0;
    for (float e : batch.eps.data) want += static_cast<double>(e) * e;
    want /= static_cast<double>(batch.eps.data.size());
    CHECK(t.val(loss).data[0] == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("an optimizer step moves the weights and keeps the loss finite") {
    Model m = Model::create(small32(), AblationFlags{}, vocab8());
    m.init_params(4);
    VocabTable vocab(vocab8());
    auto samples = make_samples(4, 8);
    AdamW<float> opt;
    opt.lr = 1e-3f;

    Rng rng(6);
    TrainBatch batch = make_train_batch(m, vocab, ptrs(samples), 0.1, rng);
    std::vector<float> stem_before = m.enc.stem.w->value.data;
    float l1 = training_step(m, opt, batch);
    CHECK(std::isfinite(l1));
    CHECK(m.enc.stem.w->value.data != stem_before);
    CHECK(opt.step_count == 1);

    // Poisoned pixels surface as NaNLoss instead of silent corruption.
    batch.x0.data[0] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(training_step(m, opt, batch), NaNLoss);
}

TEST_CASE("full training-step gradients pass finite differences") {
    UNetConfig cfg = small32();
    cfg.img_size = 8;  // keep the finite-difference sweep cheap
    ModelT<double> m = ModelT<double>::create(cfg, AblationFlags{}, vocab8());
    m.init_params(5);
    ssmg::testutil::randomize_params(m.store, 55, 0.15);
    VocabTable vocab(vocab8());

    // Hand-built samples at the model's resolution, one with two entities.
    std::vector<TrainSample> samples(3);
    Rng xr(9);
    for (auto& s : samples) {
        s.x0 = Tensor({3, 8, 8});
        for (auto& v : s.x0.data) v = static_cast<float>(xr.gauss()) * 0.5f;
        s.layout.canvas_h = 8;
        s.layout.canvas_w = 8;
        s.layout.global_desc = "a scene with shapes";
    }
    Entity a;
    a.id = 0;
    a.desc = "red circle";
    a.region = BoxRegion{0.1, 0.1, 0.6, 0.6};
    Entity b;
    b.id = 1;
    b.desc = "blue square";
    b.region = BoxRegion{0.4, 0.4, 0.9, 0.9};
    samples[0].layout.entities = {a, b};
    samples[1].layout.entities = {a};
    b.id = 0;
    samples[2].layout.entities = {b};

    Rng rng(12);
    auto batch = make_train_batch(m, vocab, ptrs(samples), 0.4, rng);
    // A mixed mask exercises the masked fusion path in the backward pass.
    batch.use_cond = {1, 0, 1};

    auto res = ssmg::testutil::gradcheck(
        m.store, [&](Tape<double>& t) { return training_step_loss(t, m, batch); }, 1, 1e-5);
    CAPTURE(res.where);
    CAPTURE(res.fd_at_max);
    CAPTURE(res.an_at_max);
    CHECK(res.max_rel <= 1e-4);
    CHECK(res.checked > 100);
}

TEST_CASE("training runs are deterministic and resumable bit for bit") {
    fs::path data = testutil::temp_dir("train_data");
    gen_dataset(20, 21, data, GenConfig{});

    TrainConfig cfg = small_train_cfg();
    fs::path run_a = testutil::temp_dir("train_a");
    fs::path run_b = testutil::temp_dir("train_b");
    fs::path run_c = testutil::temp_dir("train_c");

    TrainResult ra = train(cfg, data, run_a, nullptr);
    CHECK(ra.steps == 4);
    CHECK(std::isfinite(ra.final_loss));
    CHECK(fs::exists(run_a / "train_config.json"));
    CHECK(fs::exists(run_a / "metrics.jsonl"));

    // Same seed, fresh directory: identical metrics and checkpoint bytes.
    TrainResult rb = train(cfg, data, run_b, nullptr);
    CHECK(slurp(run_a / "metrics.jsonl") == slurp(run_b / "metrics.jsonl"));
    CHECK(slurp(ra.last_checkpoint) == slurp(rb.last_checkpoint));

    // Two steps now, two steps after a resume: identical end state.
    TrainConfig half = cfg;
    half.max_steps = 2;
    TrainResult rc1 = train(half, data, run_c, nullptr);
    CHECK(rc1.steps == 2);
    fs::path mid = run_c / "ckpt_mid.ssmg";
    fs::copy_file(rc1.last_checkpoint, mid);
    TrainConfig full = cfg;
    TrainResult rc2 = train(full, data, run_c, &mid);
    CHECK(rc2.steps == 4);
    CHECK(slurp(rc2.last_checkpoint) == slurp(ra.last_checkpoint));

    // Metrics from the resumed run cover all four steps.
    std::string lines = slurp(run_c / "metrics.jsonl");
    CHECK(std::count(lines.begin(), lines.end(), '\n') == 4);

    // Resuming under a different architecture is refused.
    TrainConfig other = cfg;
    other.unet.base = 16;
    CHECK_THROWS_AS(train(other, data, run_c, &mid), ConfigMismatch);
    other = cfg;
    other.flags.fusion = "add";
    CHECK_THROWS_AS(train(other, data, run_c, &mid), ConfigMismatch);

    fs::remove_all(data);
    fs::remove_all(run_a);
    fs::remove_all(run_b);
    fs::remove_all(run_c);
}

TEST_CASE("gamma gates are logged per fusion site") {
    fs::path data = testutil::temp_dir("train_gamma");
    gen_dataset(8, 31, data, GenConfig{});
    TrainConfig cfg = small_train_cfg();
    cfg.batch_size = 2;
    cfg.max_steps = 1;
    fs::path out = testutil::temp_dir("train_gamma_out");
    train(cfg, data, out, nullptr);

    nlohmann::json line = nlohmann::json::parse(slurp(out / "metrics.jsonl"));
    CHECK(line.at("step").get<int>() == 1);
    CHECK(std::isfinite(line.at("loss").get<double>()));
    // Two levels: fusion sites at mid, dec1, dec0.
    REQUIRE(line.at("gammas").size() == 3);
    for (const auto& g : line.at("gammas")) {
        double v = g.get<double>();
        CHECK(v > -1.0);
        CHECK(v < 1.0);
    }
    fs::remove_all(data);
    fs::remove_all(out);
}

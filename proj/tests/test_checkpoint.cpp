#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ssmg/checkpoint.hpp"
#include "ssmg/train.hpp"
#include "testutil.hpp"

using namespace ssmg;
namespace fs = std::filesystem;

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

}  // namespace

TEST_CASE("raw container round-trips config and tensors bitwise") {
    fs::path dir = testutil::temp_dir("ckpt");
    fs::path file = dir / "a.ssmg";

    Tensor t1({2, 3});
    Tensor t2({4});
    Rng rng(3);
    for (auto& v : t1.data) v = static_cast<float>(rng.gauss());
    for (auto& v : t2.data) v = static_cast<float>(rng.gauss());
    std::string cfg = "{\"k\":[1,2,3],\"s\":\"text with \\\"quotes\\\"\"}";

    save_checkpoint(file.string(), cfg, {{"layer.w", &t1}, {"layer.b", &t2}});
    Checkpoint ck = load_checkpoint(file.string());
    CHECK(ck.config_json == cfg);
    REQUIRE(ck.tensors.size() == 2);
    REQUIRE(ck.tensors.count("layer.w") == 1);
    CHECK(ck.tensors.at("layer.w").shape == t1.shape);
    CHECK(ck.tensors.at("layer.w").data == t1.data);
    CHECK(ck.tensors.at("layer.b").data == t2.data);
    // No stray temp file once the rename lands.
    CHECK(!fs::exists(file.string() + ".tmp"));
    fs::remove_all(dir);
}

TEST_CASE("corrupt and missing files raise IoError") {
    fs::path dir = testutil::temp_dir("ckpt_bad");

    CHECK_THROWS_AS(load_checkpoint((dir / "absent.ssmg").string()), IoError);

    fs::path bad_magic = dir / "bad_magic.ssmg";
    std::ofstream(bad_magic, std::ios::binary) << "NOPExxxxxxxxxxxxxxxx";
    CHECK_THROWS_AS(load_checkpoint(bad_magic.string()), IoError);

    fs::path bad_version = dir / "bad_version.ssmg";
    {
        std::ofstream f(bad_version, std::ios::binary);
        f.write("SSMG", 4);
        uint32_t v = 99;
        f.write(reinterpret_cast<const char*>(&v), 4);
        uint64_t n = 0;
        f.write(reinterpret_cast<const char*>(&n), 8);
    }
    CHECK_THROWS_AS(load_checkpoint(bad_version.string()), IoError);

    Tensor t({2});
    fs::path truncated = dir / "trunc.ssmg";
    save_checkpoint(truncated.string(), "{}", {{"w", &t}});
    auto size = fs::file_size(truncated);
    fs::resize_file(truncated, size - 5);
    CHECK_THROWS_AS(load_checkpoint(truncated.string()), IoError);

    fs::remove_all(dir);
}

TEST_CASE("model checkpoints restore weights, optimizer state, and step") {
    fs::path dir = testutil::temp_dir("ckpt_model");
    fs::path file = dir / "model.ssmg";

    Model m = Model::create(tiny_cfg(), AblationFlags{}, tiny_vocab());
    m.init_params(5);
    // Fake a little training history so moments are nonzero.
    AdamW<float> opt;
    for (int it = 0; it < 3; ++it) {
        for (const auto& p : m.store.all())
            for (auto& g : p->grad.data) g = 0.01f * static_cast<float>(it + 1);
        opt.step(m.store);
    }
    save_model_checkpoint(file, m, &opt, 42);

    AdamW<float> opt2;
    int64_t step = -1;
    Model m2 = load_model_checkpoint(file, &opt2, &step);
    CHECK(step == 42);
    CHECK(opt2.step_count == opt.step_count);
    CHECK(m2.cfg.base == 8);
    CHECK(m2.flags.guidance == "map");
    CHECK(m2.vocab_cfg.dim == 8);
    CHECK(m2.sched.steps == 1000);

    const auto& names = m.store.all();
    const auto& names2 = m2.store.all();
    REQUIRE(names.size() == names2.size());
    for (size_t i = 0; i < names.size(); ++i) {
        CHECK(names[i]->name == names2[i]->name);
        CHECK(names[i]->value.data == names2[i]->value.data);
    }
    for (const auto& [name, mt] : opt.m) {
        REQUIRE(opt2.m.count(name) == 1);
        CHECK(opt2.m.at(name).data == mt.data);
        CHECK(opt2.v.at(name).data == opt.v.at(name).data);
    }

    // Loading without an optimizer still works.
    Model m3 = load_model_checkpoint(file);
    CHECK(m3.store.all().size() == names.size());
    fs::remove_all(dir);
}

TEST_CASE("meta json round-trips every config field") {
    Model m = Model::create(tiny_cfg(), AblationFlags{}, tiny_vocab());
    m.init_params(9);
    std::string js = checkpoint_meta_json(m, 17, 23);
    CheckpointMeta meta = parse_checkpoint_meta(js);
    CHECK(meta.unet.base == 8);
    CHECK(meta.unet.ch_mult == std::vector<int64_t>{1, 2});
    CHECK(meta.unet.img_size == 8);
    CHECK(meta.flags.guidance == "map");
    CHECK(meta.flags.rsa);
    CHECK(meta.flags.fusion == "lsa");
    CHECK(meta.vocab.size == 128);
    CHECK(meta.vocab.dim == 8);
    CHECK(meta.vocab.seed == 7);
    CHECK(meta.sched_steps == 1000);
    CHECK(meta.step == 17);
    CHECK(meta.opt_step == 23);
}

TEST_CASE("a checkpoint missing tensors is a config mismatch") {
    fs::path dir = testutil::temp_dir("ckpt_mismatch");
    fs::path file = dir / "m.ssmg";

    Model m = Model::create(tiny_cfg(), AblationFlags{}, tiny_vocab());
    m.init_params(13);
    std::string meta = checkpoint_meta_json(m, 0, 0);
    // Drop one required tensor from the payload.
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    const auto& all = m.store.all();
    for (size_t i = 0; i + 1 < all.size(); ++i)
        tensors.emplace_back(all[i]->name, &all[i]->value);
    save_checkpoint(file.string(), meta, tensors);
    CHECK_THROWS_AS(load_model_checkpoint(file), ConfigMismatch);

    // Same tensor set but one shape off.
    Tensor wrong({1, 1});
    tensors.emplace_back(all.back()->name, &wrong);
    save_checkpoint(file.string(), meta, tensors);
    CHECK_THROWS_AS(load_model_checkpoint(file), ConfigMismatch);
    fs::remove_all(dir);
}

#include "ssmg/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ssmg/checkpoint.hpp"

namespace ssmg {

using nlohmann::json;

namespace {

json unet_to_json(const UNetConfig& u) {
    return json{{"in_ch", u.in_ch},     {"out_ch", u.out_ch},
                {"base", u.base},       {"ch_mult", u.ch_mult},
                {"sin_dim", u.sin_dim}, {"time_dim", u.time_dim},
                {"text_dim", u.text_dim}, {"map_channels", u.map_channels},
                {"heads", u.heads},     {"groups", u.groups},
                {"img_size", u.img_size}};
}

UNetConfig unet_from_json(const json& j) {
    UNetConfig d;
    d.in_ch = j.value("in_ch", d.in_ch);
    d.out_ch = j.value("out_ch", d.out_ch);
    d.base = j.value("base", d.base);
    d.ch_mult = j.value("ch_mult", d.ch_mult);
    d.sin_dim = j.value("sin_dim", d.sin_dim);
    d.time_dim = j.value("time_dim", d.time_dim);
    d.text_dim = j.value("text_dim", d.text_dim);
    d.map_channels = j.value("map_channels", d.map_channels);
    d.heads = j.value("heads", d.heads);
    d.groups = j.value("groups", d.groups);
    d.img_size = j.value("img_size", d.img_size);
    return d;
}

json flags_to_json(const AblationFlags& f) {
    return json{{"guidance", f.guidance}, {"rsa", f.rsa}, {"fusion", f.fusion}};
}

AblationFlags flags_from_json(const json& j) {
    AblationFlags f;
    f.guidance = j.value("guidance", f.guidance);
    f.rsa = j.value("rsa", f.rsa);
    f.fusion = j.value("fusion", f.fusion);
    return f;
}

json vocab_to_json(const VocabConfig& v) {
    return json{{"size", v.size}, {"dim", v.dim}, {"seed", v.seed}};
}

VocabConfig vocab_from_json(const json& j) {
    VocabConfig v;
    v.size = j.value("size", v.size);
    v.dim = j.value("dim", v.dim);
    v.seed = j.value("seed", v.seed);
    return v;
}

json parse_json(const std::string& bytes, const char* what) {
    try {
        return json::parse(bytes);
    } catch (const json::parse_error& e) {
        throw SchemaError(std::string(what) + ": not valid JSON: " + e.what());
    }
}

}  // namespace

TrainConfig parse_train_config(const std::string& json_bytes) {
    json j = parse_json(json_bytes, "train config");
    TrainConfig c;
    if (j.contains("unet")) c.unet = unet_from_json(j.at("unet"));
    if (j.contains("flags")) c.flags = flags_from_json(j.at("flags"));
    if (j.contains("vocab")) c.vocab = vocab_from_json(j.at("vocab"));
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.cond_drop = j.value("cond_drop", c.cond_drop);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

std::string train_config_to_json(const TrainConfig& c) {
    json j;
    j["unet"] = unet_to_json(c.unet);
    j["flags"] = flags_to_json(c.flags);
    j["vocab"] = vocab_to_json(c.vocab);
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["max_steps"] = c.max_steps;
    j["cond_drop"] = c.cond_drop;
    j["seed"] = c.seed;
    j["log_every"] = c.log_every;
    j["checkpoint_every"] = c.checkpoint_every;
    return j.dump(2);
}

std::vector<TrainSample> load_split(const std::filesystem::path& data_dir,
                                    const std::vector<int>& ids) {
    std::vector<TrainSample> out;
    out.reserve(ids.size());
    for (int id : ids) {
        const std::string stem = scene_stem(id);
        TrainSample s;
        s.x0 = image_to_tensor(read_png((data_dir / "images" / (stem + ".png")).string()));
        s.layout = load_layout_file(data_dir / "layouts" / (stem + ".json"));
        out.push_back(std::move(s));
    }
    return out;
}

float training_step(Model& m, AdamW<float>& opt, const TrainBatch& batch) {
    Tape<float> tape;
    Var<float> loss = training_step_loss(tape, m, batch);
    const float lv = tape.val(loss).data[0];
    if (!std::isfinite(lv))
        throw NaNLoss("training_step: non-finite loss " + std::to_string(lv) + " at t=[" +
                      std::to_string(batch.t_steps.front()) + "..]");
    m.store.zero_grads();
    tape.backward(loss);
    opt.step(m.store);
    return lv;
}

std::string checkpoint_meta_json(const Model& m, int64_t step, int64_t opt_step) {
    json j;
    j["unet"] = unet_to_json(m.cfg);
    j["flags"] = flags_to_json(m.flags);
    j["vocab"] = vocab_to_json(m.vocab_cfg);
    j["schedule"] = {{"steps", m.sched.steps}, {"beta_start", 1e-4}, {"beta_end", 0.02}};
    j["step"] = step;
    j["opt_step"] = opt_step;
    return j.dump();
}

CheckpointMeta parse_checkpoint_meta(const std::string& json_bytes) {
    json j = parse_json(json_bytes, "checkpoint config");
    CheckpointMeta meta;
    meta.unet = unet_from_json(j.at("unet"));
    meta.flags = flags_from_json(j.at("flags"));
    meta.vocab = vocab_from_json(j.at("vocab"));
    if (j.contains("schedule")) {
        meta.sched_steps = j["schedule"].value("steps", meta.sched_steps);
        meta.beta_start = j["schedule"].value("beta_start", meta.beta_start);
        meta.beta_end = j["schedule"].value("beta_end", meta.beta_end);
    }
    meta.step = j.value("step", int64_t(0));
    meta.opt_step = j.value("opt_step", int64_t(0));
    return meta;
}

void save_model_checkpoint(const std::filesystem::path& path, const Model& m,
                           const AdamW<float>* opt, int64_t step) {
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (const auto& p : m.store.all()) tensors.emplace_back(p->name, &p->value);
    if (opt) {
        for (const auto& [name, t] : opt->m) tensors.emplace_back("opt.m." + name, &t);
        for (const auto& [name, t] : opt->v) tensors.emplace_back("opt.v." + name, &t);
    }
    save_checkpoint(path.string(), checkpoint_meta_json(m, step, opt ? opt->step_count : 0),
                    tensors);
}

Model load_model_checkpoint(const std::filesystem::path& path, AdamW<float>* opt,
                            int64_t* step) {
    Checkpoint ck = load_checkpoint(path.string());
    CheckpointMeta meta = parse_checkpoint_meta(ck.config_json);
    Model m = Model::create(meta.unet, meta.flags, meta.vocab);
    m.sched = NoiseSchedule::linear(meta.sched_steps, meta.beta_start, meta.beta_end);
    for (const auto& p : m.store.all()) {
        auto it = ck.tensors.find(p->name);
        if (it == ck.tensors.end())
            throw ConfigMismatch("checkpoint: missing tensor " + p->name);
        if (it->second.shape != p->value.shape)
            throw ConfigMismatch("checkpoint: shape mismatch at " + p->name);
        p->value.data = it->second.data;
    }
    if (opt) {
        opt->step_count = meta.opt_step;
        for (const auto& p : m.store.all()) {
            auto mi = ck.tensors.find("opt.m." + p->name);
            auto vi = ck.tensors.find("opt.v." + p->name);
            if (mi == ck.tensors.end() || vi == ck.tensors.end()) continue;
            opt->m[p->name] = mi->second;
            opt->v[p->name] = vi->second;
        }
    }
    if (step) *step = meta.step;
    return m;
}

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                  const std::filesystem::path& out_dir, const std::filesystem::path* resume) {
    cfg.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("train: cannot create " + out_dir.string() + ": " + ec.message());

    DatasetManifest man = load_manifest(data_dir);
    std::vector<TrainSample> samples = load_split(data_dir, man.train_ids);
    if (samples.empty()) throw ValueError("train: empty train split");
    VocabTable vocab(cfg.vocab);

    AdamW<float> opt;
    opt.lr = static_cast<float>(cfg.lr);
    opt.weight_decay = static_cast<float>(cfg.weight_decay);
    opt.beta1 = static_cast<float>(cfg.beta1);
    opt.beta2 = static_cast<float>(cfg.beta2);

    Model model = Model::create(cfg.unet, cfg.flags, cfg.vocab);
    int64_t start_step = 0;
    if (resume) {
        model = load_model_checkpoint(*resume, &opt, &start_step);
        json stored = json::parse(checkpoint_meta_json(model, 0, 0));
        json wanted;
        wanted["unet"] = unet_to_json(cfg.unet);
        wanted["flags"] = flags_to_json(cfg.flags);
        wanted["vocab"] = vocab_to_json(cfg.vocab);
        for (const char* key : {"unet", "flags", "vocab"})
            if (stored.at(key) != wanted.at(key))
                throw ConfigMismatch(std::string("train: resume checkpoint differs in ") + key);
    } else {
        model.init_params(cfg.seed);
    }

    {
        std::ofstream cf(out_dir / "train_config.json", std::ios::binary);
        if (!cf) throw IoError("train: cannot write train_config.json");
        cf << train_config_to_json(cfg) << "\n";
    }
    std::ofstream metrics(out_dir / "metrics.jsonl",
                          start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("train: cannot write metrics.jsonl");

    const int64_t n = static_cast<int64_t>(samples.size());
    const int64_t batches_per_epoch = std::max<int64_t>(n / cfg.batch_size, 1);
    int64_t total_steps = cfg.max_steps > 0
                              ? cfg.max_steps
                              : batches_per_epoch * static_cast<int64_t>(cfg.epochs);

    auto log_metrics = [&](int64_t step, float loss) {
        json line;
        line["step"] = step;
        line["loss"] = loss;
        json g = json::array();
        if (model.flags.has_branch() && model.flags.fusion == "lsa")
            for (const auto& f : model.fusion)
                g.push_back(std::tanh(f.lsa.gamma->value.data[0]));
        line["gammas"] = g;
        metrics << line.dump() << "\n";
        metrics.flush();
    };

    float last_loss = 0;
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    int64_t step = start_step;
    while (step < total_steps) {
        const int64_t epoch = step / batches_per_epoch;
        Rng shuffle_rng(derive_seed(cfg.seed, "epoch_order", static_cast<uint64_t>(epoch)));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        const int64_t in_epoch = step % batches_per_epoch;
        for (int64_t bi = in_epoch; bi < batches_per_epoch && step < total_steps; ++bi) {
            std::vector<const TrainSample*> picks;
            for (int64_t k = bi * cfg.batch_size;
                 k < (bi + 1) * cfg.batch_size && k < n; ++k)
                picks.push_back(&samples[static_cast<size_t>(order[static_cast<size_t>(k)])]);
            Rng step_rng(derive_seed(cfg.seed, "train_step", static_cast<uint64_t>(step)));
            TrainBatch batch = make_train_batch(model, vocab, picks, cfg.cond_drop, step_rng);
            last_loss = training_step(model, opt, batch);
            ++step;
            if (cfg.log_every > 0 && step % cfg.log_every == 0) log_metrics(step, last_loss);
            if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
                save_model_checkpoint(out_dir / ("ckpt_" + scene_stem(static_cast<int>(step)) +
                                                 ".ssmg"),
                                      model, &opt, step);
        }
    }
    const fs::path last = out_dir / "ckpt_last.ssmg";
    save_model_checkpoint(last, model, &opt, step);
    return TrainResult{last, step, last_loss};
}

}  // namespace ssmg

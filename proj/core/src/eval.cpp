#include "ssmg/eval.hpp"

#include <chrono>
#include <fstream>

#include <json.hpp>

#include "ssmg/dataset.hpp"
#include "ssmg/sampler.hpp"

namespace ssmg {

using nlohmann::json;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

EvalReport evaluate_model(const Model& model, const VocabTable& vocab,
                          const std::vector<Layout>& layouts, const EvalOptions& opts) {
    if (layouts.empty()) throw ValueError("evaluate_model: no layouts");
    EvalReport rep;
    rep.n = static_cast<int>(layouts.size());
    std::vector<EvalSample> samples;
    samples.reserve(layouts.size());
    const int bs = std::max(opts.sample_batch, 1);
    for (size_t at = 0; at < layouts.size(); at += static_cast<size_t>(bs)) {
        const size_t end = std::min(layouts.size(), at + static_cast<size_t>(bs));
        std::vector<Layout> chunk(layouts.begin() + static_cast<std::ptrdiff_t>(at),
                                  layouts.begin() + static_cast<std::ptrdiff_t>(end));
        std::vector<uint64_t> seeds;
        for (size_t i = at; i < end; ++i) seeds.push_back(derive_seed(opts.seed, "eval", i));
        auto imgs = ddim_sample_batch(model, vocab, chunk, seeds, opts.steps, opts.cfg_scale);
        for (size_t i = 0; i < chunk.size(); ++i) {
            EvalSample s;
            s.dets = detect(tensor_to_image(imgs[i]));
            s.gts = layout_ground_truth(chunk[i]);
            samples.push_back(std::move(s));
        }
    }
    rep.yolo = yolo_score(samples);

    const int pairs = std::min<int>(opts.diversity_pairs, rep.n);
    if (pairs > 0) {
        double acc = 0;
        for (int i = 0; i < pairs; ++i) {
            const size_t li = static_cast<size_t>(i);
            acc += diversity_from_model(model, vocab, layouts[li],
                                        derive_seed(opts.seed, "eval", li),
                                        derive_seed(opts.seed, "eval_alt", li), opts.steps,
                                        opts.cfg_scale);
        }
        rep.diversity = acc / pairs;
    }
    return rep;
}

double diversity_from_model(const Model& model, const VocabTable& vocab, const Layout& layout,
                            uint64_t seed_a, uint64_t seed_b, int steps, float cfg_scale) {
    std::vector<Layout> pair = {layout, layout};
    auto imgs = ddim_sample_batch(model, vocab, pair, {seed_a, seed_b}, steps, cfg_scale);
    return diversity_score(tensor_to_image(imgs[0]), tensor_to_image(imgs[1]));
}

std::vector<Layout> eval_layouts(const std::filesystem::path& data_dir, int n,
                                 uint64_t extra_seed) {
    DatasetManifest man = load_manifest(data_dir);
    std::vector<Layout> out;
    for (int id : man.val_ids) {
        if (static_cast<int>(out.size()) >= n) break;
        out.push_back(load_layout_file(data_dir / "layouts" / (scene_stem(id) + ".json")));
    }
    uint64_t i = 0;
    while (static_cast<int>(out.size()) < n)
        out.push_back(gen_scene(derive_seed(extra_seed, "val_extra", i++)).layout);
    return out;
}

std::vector<AblationVariant> standard_ablation(const TrainConfig& base) {
    std::vector<AblationVariant> v(4);
    v[0].name = "rgb_baseline";
    v[0].config = base;
    v[0].config.flags = {"rgb", false, "add"};
    v[1].name = "map_add";
    v[1].config = base;
    v[1].config.flags = {"map", false, "add"};
    v[2].name = "map_rsa_add";
    v[2].config = base;
    v[2].config.flags = {"map", true, "add"};
    v[3].name = "map_rsa_lsa";
    v[3].config = base;
    v[3].config.flags = {"map", true, "lsa"};
    return v;
}

std::vector<AblationRow> run_ablation(const std::filesystem::path& data_dir,
                                      const std::vector<AblationVariant>& variants,
                                      const std::vector<Layout>& layouts, const EvalOptions& opts,
                                      const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("run_ablation: cannot create " + out_dir.string());
    std::vector<AblationRow> rows;
    for (const auto& variant : variants) {
        AblationRow row;
        row.name = variant.name;
        row.flags = variant.config.flags;
        try {
            auto t0 = std::chrono::steady_clock::now();
            TrainResult tr = train(variant.config, data_dir, out_dir / variant.name);
            row.train_seconds = seconds_since(t0);
            row.checkpoint = tr.last_checkpoint;

            t0 = std::chrono::steady_clock::now();
            Model model = load_model_checkpoint(tr.last_checkpoint);
            VocabTable vocab(model.vocab_cfg);
            row.eval = evaluate_model(model, vocab, layouts, opts);
            row.eval_seconds = seconds_since(t0);
            row.ok = true;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
        }
        rows.push_back(std::move(row));

        std::ofstream jf(out_dir / "report.json", std::ios::binary);
        jf << ablation_report_json(rows) << "\n";
        std::ofstream mf(out_dir / "report.md", std::ios::binary);
        mf << ablation_report_markdown(rows);
    }
    return rows;
}

std::string ablation_report_json(const std::vector<AblationRow>& rows) {
    json arr = json::array();
    for (const auto& r : rows) {
        json j;
        j["name"] = r.name;
        j["ok"] = r.ok;
        if (!r.ok) j["error"] = r.error;
        j["flags"] = {{"guidance", r.flags.guidance}, {"rsa", r.flags.rsa},
                      {"fusion", r.flags.fusion}};
        j["map"] = r.eval.yolo.map;
        j["map50"] = r.eval.yolo.map50;
        j["map75"] = r.eval.yolo.map75;
        j["diversity"] = r.eval.diversity;
        j["n_eval"] = r.eval.n;
        j["checkpoint"] = r.checkpoint.string();
        j["train_seconds"] = r.train_seconds;
        j["eval_seconds"] = r.eval_seconds;
        arr.push_back(std::move(j));
    }
    return json{{"rows", arr}}.dump(2);
}

std::string ablation_report_markdown(const std::vector<AblationRow>& rows) {
    std::string md =
        "| variant | guidance | RSA | fusion | mAP | mAP50 | mAP75 | DS | status |\n"
        "|---|---|---|---|---|---|---|---|---|\n";
    char buf[64];
    for (const auto& r : rows) {
        md += "| " + r.name + " | " + r.flags.guidance + " | " + (r.flags.rsa ? "on" : "off") +
              " | " + r.flags.fusion + " | ";
        auto num = [&](double v) {
            std::snprintf(buf, sizeof(buf), "%.3f", v);
            return std::string(buf) + " | ";
        };
        md += num(r.eval.yolo.map) + num(r.eval.yolo.map50) + num(r.eval.yolo.map75) +
              num(r.eval.diversity);
        md += r.ok ? "ok |" : ("failed: " + r.error + " |");
        md += "\n";
    }
    return md;
}

}  // namespace ssmg

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ssmg/dataset.hpp"
#include "ssmg/eval.hpp"
#include "ssmg/rsa.hpp"
#include "ssmg/sampler.hpp"
#include "ssmg/ssmap.hpp"
#include "ssmg/train.hpp"

extern "C" void openblas_set_num_threads(int);

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

void apply_thread_cap() {
    if (const char* env = std::getenv("SSMG_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) openblas_set_num_threads(n);
    }
}

std::string slurp(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ssmg::IoError("cannot open " + path.string());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ssmg::IoError("cannot write " + path.string());
    f << text;
    if (!text.empty() && text.back() != '\n') f << "\n";
}

void write_resolved_config(const fs::path& out_dir, const json& cfg) {
    write_text(out_dir / "resolved_config.json", cfg.dump(2));
}

double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_gen_data(int n, uint64_t seed, const std::string& out, const std::string& form) {
    ssmg::GenConfig cfg;
    if (form == "box")
        cfg.region_form = ssmg::RegionForm::Box;
    else if (form == "mask")
        cfg.region_form = ssmg::RegionForm::Mask;
    else if (form == "keypoints")
        cfg.region_form = ssmg::RegionForm::Keypoints;
    else
        throw ssmg::ValueError("gen-data: unknown region form " + form);
    auto man = ssmg::gen_dataset(n, seed, out, cfg);
    write_resolved_config(out, json{{"cmd", "gen-data"},
                                    {"n", n},
                                    {"seed", seed},
                                    {"form", form},
                                    {"h", cfg.h},
                                    {"w", cfg.w}});
    std::cout << "wrote " << man.n << " scenes (" << man.train_ids.size() << " train, "
              << man.val_ids.size() << " val) under " << out << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out,
              const std::string& resume) {
    ssmg::TrainConfig cfg = ssmg::parse_train_config(slurp(config_path));
    fs::path resume_path = resume;
    auto t0 = std::chrono::steady_clock::now();
    ssmg::TrainResult res =
        ssmg::train(cfg, data, out, resume.empty() ? nullptr : &resume_path);
    std::cout << "trained " << res.steps << " steps in " << elapsed(t0)
              << " s, final loss " << res.final_loss << ", checkpoint "
              << res.last_checkpoint.string() << "\n";
    return 0;
}

json gamma_values(const ssmg::Model& model) {
    json g = json::array();
    if (model.flags.has_branch() && model.flags.fusion == "lsa")
        for (const auto& f : model.fusion)
            g.push_back(std::tanh(f.lsa.gamma->value.data[0]));
    return g;
}

int cmd_sample(const std::string& ckpt, const std::string& layout_path, const std::string& out,
               int n, int steps, float cfg_scale, uint64_t seed) {
    ssmg::Layout layout = ssmg::parse_layout(slurp(layout_path));
    ssmg::Model model = ssmg::load_model_checkpoint(ckpt);
    ssmg::VocabTable vocab(model.vocab_cfg);

    fs::create_directories(out);
    auto t0 = std::chrono::steady_clock::now();
    std::vector<ssmg::Layout> layouts(static_cast<size_t>(n), layout);
    std::vector<uint64_t> seeds;
    for (int i = 0; i < n; ++i) seeds.push_back(seed + static_cast<uint64_t>(i));
    auto imgs = ssmg::ddim_sample_batch(model, vocab, layouts, seeds, steps, cfg_scale);
    json files = json::array();
    for (int i = 0; i < n; ++i) {
        const std::string name = "sample_" + std::to_string(seeds[static_cast<size_t>(i)]) + ".png";
        ssmg::write_png((fs::path(out) / name).string(),
                        ssmg::tensor_to_image(imgs[static_cast<size_t>(i)]));
        files.push_back(name);
    }
    const double secs = elapsed(t0);

    json meta;
    meta["n"] = n;
    meta["steps"] = steps;
    meta["cfg_scale"] = cfg_scale;
    meta["seeds"] = seeds;
    meta["files"] = files;
    meta["gammas"] = gamma_values(model);
    meta["flags"] = {{"guidance", model.flags.guidance},
                     {"rsa", model.flags.rsa},
                     {"fusion", model.flags.fusion}};
    meta["seconds"] = secs;
    write_text(fs::path(out) / "metadata.json", meta.dump(2));
    write_resolved_config(out, json{{"cmd", "sample"},
                                    {"ckpt", ckpt},
                                    {"layout", layout_path},
                                    {"n", n},
                                    {"steps", steps},
                                    {"cfg_scale", cfg_scale},
                                    {"seed", seed}});
    std::cout << "wrote " << n << " samples under " << out << " in " << secs << " s\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out, int n,
             int steps, float cfg_scale, uint64_t seed, int diversity_pairs) {
    ssmg::Model model = ssmg::load_model_checkpoint(ckpt);
    ssmg::VocabTable vocab(model.vocab_cfg);
    auto layouts = ssmg::eval_layouts(data, n, ssmg::derive_seed(seed, "eval_extra"));
    ssmg::EvalOptions opts;
    opts.steps = steps;
    opts.cfg_scale = cfg_scale;
    opts.seed = seed;
    opts.diversity_pairs = diversity_pairs;
    auto t0 = std::chrono::steady_clock::now();
    ssmg::EvalReport rep = ssmg::evaluate_model(model, vocab, layouts, opts);
    json j;
    j["n"] = rep.n;
    j["map"] = rep.yolo.map;
    j["map50"] = rep.yolo.map50;
    j["map75"] = rep.yolo.map75;
    j["diversity"] = rep.diversity;
    j["seconds"] = elapsed(t0);
    j["config"] = {{"cmd", "eval"},   {"ckpt", ckpt}, {"data", data},
                   {"n", n},          {"steps", steps}, {"cfg_scale", cfg_scale},
                   {"seed", seed},    {"diversity_pairs", diversity_pairs}};
    write_text(out, j.dump(2));
    std::cout << "mAP " << rep.yolo.map << "  mAP50 " << rep.yolo.map50 << "  mAP75 "
              << rep.yolo.map75 << " -> " << out << "\n";
    return 0;
}

int cmd_ablate(const std::string& configs_dir, const std::string& data, const std::string& out,
               int eval_n, int steps, float cfg_scale, uint64_t seed) {
    std::vector<ssmg::AblationVariant> variants;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(configs_dir))
        if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files)
        variants.push_back({p.stem().string(), ssmg::parse_train_config(slurp(p))});
    if (variants.empty()) throw ssmg::ValueError("ablate: no .json configs in " + configs_dir);

    auto layouts = ssmg::eval_layouts(data, eval_n, ssmg::derive_seed(seed, "eval_extra"));
    ssmg::EvalOptions opts;
    opts.steps = steps;
    opts.cfg_scale = cfg_scale;
    opts.seed = seed;
    opts.diversity_pairs = std::min(eval_n, 16);
    auto rows = ssmg::run_ablation(data, variants, layouts, opts, out);
    write_resolved_config(out, json{{"cmd", "ablate"},
                                    {"configs", configs_dir},
                                    {"data", data},
                                    {"eval_n", eval_n},
                                    {"steps", steps},
                                    {"cfg_scale", cfg_scale},
                                    {"seed", seed}});
    int failed = 0;
    for (const auto& r : rows)
        if (!r.ok) ++failed;
    std::cout << rows.size() << " variants, " << failed << " failed; report under " << out
              << "\n";
    return failed == 0 ? 0 : 4;
}

int cmd_inspect_map(const std::string& layout_path, const std::string& out, int res,
                    uint64_t vocab_seed) {
    ssmg::Layout layout = ssmg::parse_layout(slurp(layout_path));
    ssmg::VocabConfig vc;
    vc.seed = vocab_seed;
    ssmg::VocabTable vocab(vc);
    ssmg::SpatialSemanticMap map = ssmg::init_map(layout, res, res, vocab);
    ssmg::RelationMatrix rel = ssmg::build_relation_matrix(map);

    fs::create_directories(out);
    ssmg::write_png((fs::path(out) / "map.png").string(), ssmg::project_map_rgb(map));
    ssmg::ImageU8 rm(rel.n_tokens, rel.n_tokens);
    int64_t edges = 0;
    for (int i = 0; i < rel.n_tokens; ++i)
        for (int j = 0; j < rel.n_tokens; ++j)
            if (rel.at(i, j)) {
                ++edges;
                uint8_t* p = rm.px(i, j);
                p[0] = p[1] = p[2] = 255;
            }
    ssmg::write_png((fs::path(out) / "relmatrix.png").string(), rm);

    int covered = 0;
    for (int i = 0; i < map.h; ++i)
        for (int j = 0; j < map.w; ++j)
            if (map.cov(i, j) != 0) ++covered;
    json stats;
    stats["res"] = res;
    stats["entities"] = map.n_entities;
    stats["tokens"] = rel.n_tokens;
    stats["covered_pixels"] = covered;
    stats["coverage_fraction"] = static_cast<double>(covered) / (map.h * map.w);
    stats["allowed_edges"] = edges;
    json per = json::array();
    for (int e = 0; e < map.n_entities; ++e) {
        int cnt = 0;
        for (int i = 0; i < map.h; ++i)
            for (int j = 0; j < map.w; ++j)
                if (map.cov(i, j) & (uint64_t(1) << e)) ++cnt;
        per.push_back(cnt);
    }
    stats["entity_pixels"] = per;
    write_text(fs::path(out) / "stats.json", stats.dump(2));
    write_resolved_config(out, json{{"cmd", "inspect-map"},
                                    {"layout", layout_path},
                                    {"res", res},
                                    {"vocab_seed", vocab_seed}});
    std::cout << "map stats: " << covered << " covered px, " << edges << " allowed edges -> "
              << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    apply_thread_cap();
    CLI::App app{"layout-to-image diffusion toolkit"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic shapes dataset");
    int gen_n = 1000;
    uint64_t gen_seed = 0;
    std::string gen_out, gen_form = "box";
    gen->add_option("--n", gen_n, "number of scenes");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--form", gen_form, "region form: box|mask|keypoints");

    auto* tr = app.add_subcommand("train", "train a model");
    std::string tr_config, tr_data, tr_out, tr_resume;
    tr->add_option("--config", tr_config, "TrainConfig JSON")->required();
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");

    auto* sa = app.add_subcommand("sample", "sample images for one layout");
    std::string sa_ckpt, sa_layout, sa_out;
    int sa_n = 1, sa_steps = 20;
    float sa_cfg = 9.0f;
    uint64_t sa_seed = 0;
    sa->add_option("--ckpt", sa_ckpt, "checkpoint file")->required();
    sa->add_option("--layout", sa_layout, "layout JSON file")->required();
    sa->add_option("--out", sa_out, "output directory")->required();
    sa->add_option("--n", sa_n, "number of samples");
    sa->add_option("--steps", sa_steps, "DDIM steps");
    sa->add_option("--cfg", sa_cfg, "guidance scale");
    sa->add_option("--seed", sa_seed, "base seed; image i uses seed+i");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on held-out layouts");
    std::string ev_ckpt, ev_data, ev_out;
    int ev_n = 500, ev_steps = 20, ev_div = 0;
    float ev_cfg = 9.0f;
    uint64_t ev_seed = 0;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--out", ev_out, "report JSON path")->required();
    ev->add_option("--n", ev_n, "number of eval layouts");
    ev->add_option("--steps", ev_steps, "DDIM steps");
    ev->add_option("--cfg", ev_cfg, "guidance scale");
    ev->add_option("--seed", ev_seed, "evaluation seed");
    ev->add_option("--diversity-pairs", ev_div, "layouts re-sampled for the diversity score");

    auto* ab = app.add_subcommand("ablate", "train and compare ablation variants");
    std::string ab_configs, ab_data, ab_out;
    int ab_eval_n = 100, ab_steps = 20;
    float ab_cfg = 9.0f;
    uint64_t ab_seed = 0;
    ab->add_option("--configs", ab_configs, "directory of TrainConfig JSONs")->required();
    ab->add_option("--data", ab_data, "dataset directory")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_option("--eval-n", ab_eval_n, "number of eval layouts");
    ab->add_option("--steps", ab_steps, "DDIM steps");
    ab->add_option("--cfg", ab_cfg, "guidance scale");
    ab->add_option("--seed", ab_seed, "evaluation seed");

    auto* im = app.add_subcommand("inspect-map", "render the semantic map and relation matrix");
    std::string im_layout, im_out;
    int im_res = 32;
    uint64_t im_vocab_seed = 0;
    im->add_option("--layout", im_layout, "layout JSON file")->required();
    im->add_option("--out", im_out, "output directory")->required();
    im->add_option("--res", im_res, "map resolution");
    im->add_option("--vocab-seed", im_vocab_seed, "embedding table seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_n, gen_seed, gen_out, gen_form);
        if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_resume);
        if (sa->parsed()) return cmd_sample(sa_ckpt, sa_layout, sa_out, sa_n, sa_steps, sa_cfg,
                                            sa_seed);
        if (ev->parsed())
            return cmd_eval(ev_ckpt, ev_data, ev_out, ev_n, ev_steps, ev_cfg, ev_seed, ev_div);
        if (ab->parsed())
            return cmd_ablate(ab_configs, ab_data, ab_out, ab_eval_n, ab_steps, ab_cfg, ab_seed);
        if (im->parsed()) return cmd_inspect_map(im_layout, im_out, im_res, im_vocab_seed);
    } catch (const ssmg::ConfigMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ssmg::SchemaError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ssmg::ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ssmg::EmptyCoverage& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ssmg::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}

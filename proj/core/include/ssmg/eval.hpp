#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ssmg/metrics.hpp"
#include "ssmg/train.hpp"

namespace ssmg {

struct EvalOptions {
    int steps = 20;
    float cfg_scale = 9.0f;
    uint64_t seed = 0;
    int sample_batch = 8;     // layouts sampled per forward batch
    int diversity_pairs = 0;  // layouts re-sampled under a second seed
};

struct EvalReport {
    int n = 0;
    YoloScore yolo;
    double diversity = 0;  // mean over diversity_pairs, 0 when disabled
};

// Samples one image per layout, runs the detector oracle against each
// layout's ground truth and aggregates the YOLO-score analogue.
EvalReport evaluate_model(const Model& model, const VocabTable& vocab,
                          const std::vector<Layout>& layouts, const EvalOptions& opts);

// Two samples of the same layout under different seeds, compared pixelwise.
double diversity_from_model(const Model& model, const VocabTable& vocab, const Layout& layout,
                            uint64_t seed_a, uint64_t seed_b, int steps, float cfg_scale);

// Held-out layouts for evaluation: the manifest's val split, topped up with
// freshly generated scenes from a disjoint seed stream when the split is
// smaller than n.
std::vector<Layout> eval_layouts(const std::filesystem::path& data_dir, int n,
                                 uint64_t extra_seed);

struct AblationVariant {
    std::string name;
    TrainConfig config;
};

struct AblationRow {
    std::string name;
    bool ok = false;
    std::string error;
    AblationFlags flags;
    EvalReport eval;
    std::filesystem::path checkpoint;
    double train_seconds = 0;
    double eval_seconds = 0;
};

// Table 3 rows for the canonical ablation chain at one budget: rgb baseline,
// map without RSA, map with RSA, and the full model with LSA fusion.
std::vector<AblationVariant> standard_ablation(const TrainConfig& base);

// Trains and evaluates each variant; a variant failure is recorded in its
// row and does not abort the others. Writes report.json and report.md under
// out_dir next to the per-variant training directories.
std::vector<AblationRow> run_ablation(const std::filesystem::path& data_dir,
                                      const std::vector<AblationVariant>& variants,
                                      const std::vector<Layout>& layouts,
                                      const EvalOptions& opts,
                                      const std::filesystem::path& out_dir);

std::string ablation_report_json(const std::vector<AblationRow>& rows);
std::string ablation_report_markdown(const std::vector<AblationRow>& rows);

}  // namespace ssmg

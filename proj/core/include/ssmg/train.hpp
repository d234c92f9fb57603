#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ssmg/colors.hpp"
#include "ssmg/dataset.hpp"
#include "ssmg/model.hpp"
#include "ssmg/optimizer.hpp"
#include "ssmg/ssmap.hpp"
#include "ssmg/textenc.hpp"

namespace ssmg {

struct TrainConfig {
    UNetConfig unet;
    AblationFlags flags;
    VocabConfig vocab;
    double lr = 1e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9, beta2 = 0.999;
    int batch_size = 64;
    int epochs = 50;
    int max_steps = 0;  // > 0 caps the total optimizer steps
    double cond_drop = 0.1;
    uint64_t seed = 0;
    int log_every = 1;
    int checkpoint_every = 1000;

    void validate() const {
        unet.validate();
        flags.validate();
        if (!(cond_drop >= 0.0 && cond_drop < 1.0))
            throw ValueError("train: cond_drop must be in [0,1)");
        if (batch_size < 1) throw ValueError("train: batch_size must be positive");
        if (epochs < 0 || max_steps < 0) throw ValueError("train: negative step budget");
        if (vocab.dim != unet.text_dim || vocab.dim != unet.map_channels)
            throw ConfigMismatch("train: vocab dim must match text_dim and map_channels");
    }
};

TrainConfig parse_train_config(const std::string& json_bytes);
std::string train_config_to_json(const TrainConfig& cfg);

// One in-memory training example.
struct TrainSample {
    Tensor x0;  // [3,H,W] in [-1,1]
    Layout layout;
};

std::vector<TrainSample> load_split(const std::filesystem::path& data_dir,
                                    const std::vector<int>& ids);

// Everything the loss needs, fully materialized so the forward pass is a
// pure function of the batch (the gradient checks rely on this).
template <typename T>
struct TrainBatchT {
    TensorT<T> x0;    // [B,3,H,W]
    TensorT<T> eps;   // [B,3,H,W]
    TensorT<T> text;  // [B,1,text_dim], zero rows where dropped
    TensorT<T> scene;                   // [B,map_channels] scene embeddings
    std::vector<int> t_steps;           // per-sample diffusion time
    std::vector<uint8_t> use_cond;      // 0 where the (text, map) pair is dropped
    std::vector<SpatialSemanticMap> maps;  // map guidance
    TensorT<T> rgb;                     // [B,3,H,W] rgb guidance render
};
using TrainBatch = TrainBatchT<float>;

template <typename T>
TrainBatchT<T> make_train_batch(const ModelT<T>& m, const VocabTable& vocab,
                                const std::vector<const TrainSample*>& samples, double cond_drop,
                                Rng& rng) {
    const UNetConfig& cfg = m.cfg;
    const int64_t B = static_cast<int64_t>(samples.size());
    if (B == 0) throw ValueError("make_train_batch: empty batch");
    const int H = static_cast<int>(cfg.img_size), W = static_cast<int>(cfg.img_size);
    TrainBatchT<T> batch;
    batch.x0 = TensorT<T>({B, cfg.in_ch, H, W});
    batch.eps = TensorT<T>({B, cfg.in_ch, H, W});
    batch.text = TensorT<T>({B, 1, cfg.text_dim});
    batch.scene = TensorT<T>({B, cfg.map_channels});
    if (m.flags.guidance == "rgb") batch.rgb = TensorT<T>({B, 3, H, W});
    const int64_t per = cfg.in_ch * H * W;
    for (int64_t b = 0; b < B; ++b) {
        const TrainSample& s = *samples[static_cast<size_t>(b)];
        if (s.x0.numel() != per) throw ShapeError("make_train_batch: sample size mismatch");
        for (int64_t i = 0; i < per; ++i)
            batch.x0.data[static_cast<size_t>(b * per + i)] =
                static_cast<T>(s.x0.data[static_cast<size_t>(i)]);
        for (int64_t i = 0; i < per; ++i)
            batch.eps.data[static_cast<size_t>(b * per + i)] = static_cast<T>(rng.gauss());
        batch.t_steps.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(m.sched.steps))));
        const bool drop = rng.uniform() < cond_drop;
        batch.use_cond.push_back(drop ? 0 : 1);
        if (!drop) {
            const auto emb = vocab.embed(s.layout.global_desc);
            for (int64_t i = 0; i < cfg.text_dim; ++i)
                batch.text.data[static_cast<size_t>(b * cfg.text_dim + i)] =
                    static_cast<T>(emb[static_cast<size_t>(i)]);
            for (int64_t i = 0; i < cfg.map_channels; ++i)
                batch.scene.data[static_cast<size_t>(b * cfg.map_channels + i)] =
                    static_cast<T>(emb[static_cast<size_t>(i)]);
        }
        if (m.flags.guidance == "map") {
            batch.maps.push_back(init_map(s.layout, H, W, vocab));
        } else if (m.flags.guidance == "rgb") {
            Tensor r = render_layout_rgb(s.layout, H, W);
            for (int64_t i = 0; i < r.numel(); ++i)
                batch.rgb.data[static_cast<size_t>(b * r.numel() + i)] =
                    static_cast<T>(r.data[static_cast<size_t>(i)]);
        }
    }
    return batch;
}

// Builds the denoising loss for one batch on the given tape:
// || eps - f(sqrt(ab_t) x0 + sqrt(1-ab_t) eps, t, text, cond) ||^2 / numel.
template <typename T>
Var<T> training_step_loss(Tape<T>& tape, const ModelT<T>& m, const TrainBatchT<T>& batch) {
    const UNetConfig& cfg = m.cfg;
    const int64_t B = batch.x0.shape[0];
    const int64_t per = batch.x0.numel() / B;

    TensorT<T> zt(batch.x0.shape);
    for (int64_t b = 0; b < B; ++b) {
        const double ab = m.sched.alpha_bars[static_cast<size_t>(
            batch.t_steps[static_cast<size_t>(b)])];
        const T sa = static_cast<T>(std::sqrt(ab));
        const T sb = static_cast<T>(std::sqrt(1.0 - ab));
        for (int64_t i = b * per; i < (b + 1) * per; ++i)
            zt.data[static_cast<size_t>(i)] = sa * batch.x0.data[static_cast<size_t>(i)] +
                                              sb * batch.eps.data[static_cast<size_t>(i)];
    }
    Var<T> z = tape.input(std::move(zt));
    Var<T> temb_sin = tape.input(time_embedding_sin<T>(batch.t_steps, cfg.sin_dim));
    Var<T> text = tape.input(batch.text);

    CondInput<T> cond;
    bool has_cond = m.flags.has_branch();
    if (has_cond) {
        cond.fuse_mask = batch.use_cond;
        if (m.flags.guidance == "map") {
            if (static_cast<int64_t>(batch.maps.size()) != B)
                throw ShapeError("training_step_loss: map count mismatch");
            std::vector<Var<T>> parts;
            for (int64_t b = 0; b < B; ++b) {
                TensorT<T> scene_emb({cfg.map_channels});
                for (int64_t i = 0; i < cfg.map_channels; ++i)
                    scene_emb.data[static_cast<size_t>(i)] =
                        batch.scene.data[static_cast<size_t>(b * cfg.map_channels + i)];
                parts.push_back(build_cond_tokens(tape, m, batch.maps[static_cast<size_t>(b)],
                                                  scene_emb));
            }
            cond.branch_in = parts.size() == 1 ? parts[0] : concat_batch(parts);
        } else {
            cond.branch_in = tape.input(batch.rgb);
        }
    }
    Var<T> eps_hat =
        denoise_forward(tape, m, z, temb_sin, text, has_cond ? &cond : nullptr);
    return mse(eps_hat, tape.input(batch.eps));
}

// Forward + backward + AdamW update. Throws NaNLoss when the loss leaves the
// finite range.
float training_step(Model& m, AdamW<float>& opt, const TrainBatch& batch);

// ---- checkpoint orchestration ----

struct CheckpointMeta {
    UNetConfig unet;
    AblationFlags flags;
    VocabConfig vocab;
    int sched_steps = 1000;
    double beta_start = 1e-4, beta_end = 0.02;
    int64_t step = 0;
    int64_t opt_step = 0;
};

std::string checkpoint_meta_json(const Model& m, int64_t step, int64_t opt_step);
CheckpointMeta parse_checkpoint_meta(const std::string& json_bytes);

void save_model_checkpoint(const std::filesystem::path& path, const Model& m,
                           const AdamW<float>* opt, int64_t step);

// Rebuilds the model from the stored config and loads every tensor.
// Optimizer state is restored when opt is non-null and the file carries it.
Model load_model_checkpoint(const std::filesystem::path& path, AdamW<float>* opt = nullptr,
                            int64_t* step = nullptr);

struct TrainResult {
    std::filesystem::path last_checkpoint;
    int64_t steps = 0;
    float final_loss = 0;
};

// Full loop: loads the train split, runs the step budget, writes JSON-lines
// metrics (step, loss, fusion gates) and periodic checkpoints under out_dir.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                  const std::filesystem::path& out_dir,
                  const std::filesystem::path* resume = nullptr);

}  // namespace ssmg

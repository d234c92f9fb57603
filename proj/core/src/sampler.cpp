#include "ssmg/sampler.hpp"

#include <cmath>

#include "ssmg/colors.hpp"
#include "ssmg/ssmap.hpp"

namespace ssmg {

Tensor precompute_branch_input(const Model& model, const VocabTable& vocab,
                               const Layout& layout) {
    int h = static_cast<int>(model.cfg.img_size);
    int w = h;
    if (model.flags.guidance == "rgb") return render_layout_rgb(layout, h, w);
    if (model.flags.guidance != "map") return Tensor();

    SpatialSemanticMap map = init_map(layout, h, w, vocab);
    if (model.flags.rsa) {
        Tensor scene({static_cast<int64_t>(vocab.dim())});
        scene.data = vocab.embed(layout.global_desc);
        map = rsa_block(map, scene, model.rsa);
    }
    Tensor out({static_cast<int64_t>(map.c), h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < map.c; ++c) out.at3(c, i, j) = map.feat.at3(i, j, c);
    return out;
}

std::vector<Tensor> ddim_sample_batch(const Model& model, const VocabTable& vocab,
                                      const std::vector<Layout>& layouts,
                                      const std::vector<uint64_t>& seeds, int steps,
                                      float cfg_scale) {
    if (layouts.size() != seeds.size()) throw ValueError("sample: one seed per layout");
    if (layouts.empty()) return {};
    int64_t B = static_cast<int64_t>(layouts.size());
    int64_t H = model.cfg.img_size;
    const NoiseSchedule& sched = model.sched;
    std::vector<int> taus = ddim_timesteps(sched.steps, steps);

    bool has_branch = model.flags.has_branch();
    int64_t cond_ch = model.flags.guidance == "map" ? model.cfg.map_channels : 3;
    Tensor branch_in;
    if (has_branch) {
        branch_in = Tensor({B, cond_ch, H, H});
        for (int64_t b = 0; b < B; ++b) {
            Tensor one = precompute_branch_input(model, vocab, layouts[static_cast<size_t>(b)]);
            std::copy(one.data.begin(), one.data.end(),
                      branch_in.data.begin() + b * one.numel());
        }
    }

    Tensor text({B, 1, model.cfg.text_dim});
    for (int64_t b = 0; b < B; ++b) {
        std::vector<float> e = vocab.embed(layouts[static_cast<size_t>(b)].global_desc);
        std::copy(e.begin(), e.end(), text.data.begin() + b * model.cfg.text_dim);
    }
    Tensor null_text({B, 1, model.cfg.text_dim});

    Tensor x({B, model.cfg.in_ch, H, H});
    for (int64_t b = 0; b < B; ++b) {
        Rng rng(derive_seed(seeds[static_cast<size_t>(b)], "init_noise"));
        for (int64_t i = 0; i < model.cfg.in_ch * H * H; ++i)
            x.data[static_cast<size_t>(b * model.cfg.in_ch * H * H + i)] =
                static_cast<float>(rng.gauss());
    }

    for (int si = static_cast<int>(taus.size()) - 1; si >= 0; --si) {
        int tau = taus[static_cast<size_t>(si)];
        std::vector<int> ts(static_cast<size_t>(B), tau);
        Tensor sin_emb = time_embedding_sin<float>(ts, model.cfg.sin_dim);

        Tensor eps_c, eps_u;
        {
            Tape<float> tape;
            CondInput<float> cond;
            const CondInput<float>* cond_p = nullptr;
            if (has_branch) {
                cond.branch_in = tape.input(branch_in);
                cond.fuse_mask.assign(static_cast<size_t>(B), 1);
                cond_p = &cond;
            }
            Var<float> out = denoise_forward(tape, model, tape.input(x), tape.input(sin_emb),
                                             tape.input(text), cond_p);
            eps_c = tape.val(out);
        }
        {
            Tape<float> tape;
            Var<float> out =
                denoise_forward(tape, model, tape.input(x), tape.input(sin_emb),
                                tape.input(null_text), static_cast<const CondInput<float>*>(nullptr));
            eps_u = tape.val(out);
        }
        Tensor eps = cfg_combine(eps_u, eps_c, cfg_scale);

        double abar_t = sched.alpha_bars[static_cast<size_t>(tau)];
        double abar_prev = si > 0 ? sched.alpha_bars[static_cast<size_t>(
                                        taus[static_cast<size_t>(si - 1)])]
                                  : 1.0;
        float c_x0 = static_cast<float>(1.0 / std::sqrt(abar_t));
        float c_e = static_cast<float>(std::sqrt(1.0 - abar_t));
        float c_prev_x0 = static_cast<float>(std::sqrt(abar_prev));
        float c_prev_e = static_cast<float>(std::sqrt(1.0 - abar_prev));
        for (int64_t i = 0; i < x.numel(); ++i) {
            float e = eps.data[static_cast<size_t>(i)];
            float x0_hat = (x.data[static_cast<size_t>(i)] - c_e * e) * c_x0;
            x.data[static_cast<size_t>(i)] = c_prev_x0 * x0_hat + c_prev_e * e;
        }
    }

    std::vector<Tensor> out;
    int64_t per = model.cfg.in_ch * H * H;
    for (int64_t b = 0; b < B; ++b) {
        Tensor img({model.cfg.in_ch, H, H});
        std::copy(x.data.begin() + b * per, x.data.begin() + (b + 1) * per, img.data.begin());
        out.push_back(std::move(img));
    }
    return out;
}

Tensor ddim_sample(const Model& model, const VocabTable& vocab, const Layout& layout, int steps,
                   float cfg_scale, uint64_t seed) {
    return ddim_sample_batch(model, vocab, {layout}, {seed}, steps, cfg_scale)[0];
}

}  // namespace ssmg

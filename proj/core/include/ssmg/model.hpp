#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ssmg/errors.hpp"
#include "ssmg/lsa.hpp"
#include "ssmg/nn.hpp"
#include "ssmg/rng.hpp"
#include "ssmg/rsa.hpp"
#include "ssmg/schedule.hpp"
#include "ssmg/ssmap.hpp"
#include "ssmg/tape.hpp"
#include "ssmg/textenc.hpp"

namespace ssmg {

struct UNetConfig {
    int64_t in_ch = 3;
    int64_t out_ch = 3;
    int64_t base = 64;
    std::vector<int64_t> ch_mult = {1, 2, 4};
    int64_t sin_dim = 64;
    int64_t time_dim = 128;
    int64_t text_dim = 64;
    int64_t map_channels = 64;
    int64_t heads = 4;
    int64_t groups = 8;
    int64_t img_size = 32;

    int levels() const { return static_cast<int>(ch_mult.size()); }
    int64_t level_ch(int i) const { return base * ch_mult[static_cast<size_t>(i)]; }
    // Text cross-attention runs at the coarser levels only.
    bool attn_at(int level) const { return level >= 1; }

    void validate() const {
        if (ch_mult.empty()) throw ValueError("unet: ch_mult empty");
        for (int i = 0; i < levels(); ++i) {
            if (level_ch(i) % groups != 0)
                throw ValueError("unet: channels must be divisible by norm groups");
            if (level_ch(i) % heads != 0)
                throw ValueError("unet: channels must be divisible by heads");
        }
        int64_t min_res = img_size >> (levels() - 1);
        if (min_res < 4) throw ValueError("unet: too many levels for image size");
        if (img_size % (int64_t(1) << (levels() - 1)) != 0)
            throw ValueError("unet: image size not divisible by downsample factor");
    }
};

struct AblationFlags {
    std::string guidance = "map";  // map | rgb | none
    bool rsa = true;
    std::string fusion = "lsa";  // lsa | add

    bool has_branch() const { return guidance != "none"; }

    void validate() const {
        if (guidance != "map" && guidance != "rgb" && guidance != "none")
            throw ValueError("flags: guidance must be map, rgb, or none");
        if (fusion != "lsa" && fusion != "add")
            throw ValueError("flags: fusion must be lsa or add");
        if (rsa && guidance != "map")
            throw ValueError("flags: rsa requires map guidance");
    }
};

// ---- parameter bundles ----

template <typename T>
struct ConvP {
    ParamTensor<T>* w = nullptr;
    ParamTensor<T>* b = nullptr;
    static ConvP create(ParamStore<T>& s, const std::string& p, int64_t oc, int64_t ic,
                        int64_t k) {
        ConvP c;
        c.w = &s.create(p + ".w", {oc, ic, k, k});
        c.b = &s.create(p + ".b", {oc});
        return c;
    }
    void init(Rng& rng, T gain = T(1)) {
        int64_t fan_in = w->value.shape[1] * w->value.shape[2] * w->value.shape[3];
        T std = gain * std::sqrt(T(2) / T(fan_in));
        for (auto& v : w->value.data) v = static_cast<T>(rng.gauss()) * std;
        b->value.fill(T(0));
    }
    void init_zero() {
        w->value.fill(T(0));
        b->value.fill(T(0));
    }
};

template <typename T>
struct LinP {
    ParamTensor<T>* w = nullptr;
    ParamTensor<T>* b = nullptr;
    static LinP create(ParamStore<T>& s, const std::string& p, int64_t in, int64_t out) {
        LinP l;
        l.w = &s.create(p + ".w", {in, out});
        l.b = &s.create(p + ".b", {out});
        return l;
    }
    void init(Rng& rng) {
        int64_t fan_in = w->value.shape[0];
        T std = T(1) / std::sqrt(T(fan_in));
        for (auto& v : w->value.data) v = static_cast<T>(rng.gauss()) * std;
        b->value.fill(T(0));
    }
};

template <typename T>
struct NormP {
    ParamTensor<T>* g = nullptr;
    ParamTensor<T>* b = nullptr;
    static NormP create(ParamStore<T>& s, const std::string& p, int64_t c) {
        NormP n;
        n.g = &s.create(p + ".g", {c});
        n.b = &s.create(p + ".b", {c});
        return n;
    }
    void init() {
        g->value.fill(T(1));
        b->value.fill(T(0));
    }
};

template <typename T>
struct ResBlockP {
    NormP<T> gn1;
    ConvP<T> conv1;
    LinP<T> temb;
    NormP<T> gn2;
    ConvP<T> conv2;
    ConvP<T> skip;
    bool has_skip = false;
    int64_t cin = 0, cout = 0;

    static ResBlockP create(ParamStore<T>& s, const std::string& p, int64_t cin, int64_t cout,
                            int64_t time_dim) {
        ResBlockP r;
        r.cin = cin;
        r.cout = cout;
        r.gn1 = NormP<T>::create(s, p + ".gn1", cin);
        r.conv1 = ConvP<T>::create(s, p + ".conv1", cout, cin, 3);
        r.temb = LinP<T>::create(s, p + ".temb", time_dim, cout);
        r.gn2 = NormP<T>::create(s, p + ".gn2", cout);
        r.conv2 = ConvP<T>::create(s, p + ".conv2", cout, cout, 3);
        if (cin != cout) {
            r.skip = ConvP<T>::create(s, p + ".skip", cout, cin, 1);
            r.has_skip = true;
        }
        return r;
    }
    void init(Rng& rng) {
        gn1.init();
        conv1.init(rng);
        temb.init(rng);
        gn2.init();
        conv2.init_zero();
        if (has_skip) skip.init(rng);
    }
};

template <typename T>
struct TextAttnP {
    NormP<T> ln;
    ParamTensor<T>* wq = nullptr;
    ParamTensor<T>* wk = nullptr;
    ParamTensor<T>* wv = nullptr;
    ParamTensor<T>* wo = nullptr;
    int64_t heads = 4;

    static TextAttnP create(ParamStore<T>& s, const std::string& p, int64_t c, int64_t text_dim,
                            int64_t heads) {
        TextAttnP a;
        a.heads = heads;
        a.ln = NormP<T>::create(s, p + ".ln", c);
        a.wq = &s.create(p + ".wq", {c, c});
        a.wk = &s.create(p + ".wk", {text_dim, c});
        a.wv = &s.create(p + ".wv", {text_dim, c});
        a.wo = &s.create(p + ".wo", {c, c});
        return a;
    }
    void init(Rng& rng) {
        ln.init();
        for (auto* w : {wq, wk, wv}) {
            T std = T(1) / std::sqrt(T(w->value.shape[0]));
            for (auto& v : w->value.data) v = static_cast<T>(rng.gauss()) * std;
        }
        wo->value.fill(T(0));
    }
};

// Encoder plus middle block; the conditional branch duplicates this topology.
template <typename T>
struct EncoderP {
    ConvP<T> stem;
    std::vector<ResBlockP<T>> enc;
    std::vector<TextAttnP<T>> enc_attn;  // indexed per level; valid only where attn_at
    std::vector<ConvP<T>> down;
    ResBlockP<T> mid1;
    TextAttnP<T> mid_attn;
    ResBlockP<T> mid2;

    static EncoderP create(ParamStore<T>& s, const std::string& p, const UNetConfig& cfg,
                           int64_t stem_in) {
        EncoderP e;
        int L = cfg.levels();
        e.stem = ConvP<T>::create(s, p + ".stem", cfg.level_ch(0), stem_in, 3);
        e.enc.resize(static_cast<size_t>(L));
        e.enc_attn.resize(static_cast<size_t>(L));
        for (int i = 0; i < L; ++i) {
            int64_t cin = cfg.level_ch(i == 0 ? 0 : i - 1);
            int64_t cout = cfg.level_ch(i);
            e.enc[static_cast<size_t>(i)] = ResBlockP<T>::create(
                s, p + ".enc" + std::to_string(i), cin, cout, cfg.time_dim);
            if (cfg.attn_at(i))
                e.enc_attn[static_cast<size_t>(i)] = TextAttnP<T>::create(
                    s, p + ".enc" + std::to_string(i) + ".attn", cout, cfg.text_dim, cfg.heads);
        }
        for (int i = 0; i + 1 < L; ++i)
            e.down.push_back(ConvP<T>::create(s, p + ".down" + std::to_string(i),
                                              cfg.level_ch(i), cfg.level_ch(i), 3));
        int64_t cl = cfg.level_ch(L - 1);
        e.mid1 = ResBlockP<T>::create(s, p + ".mid1", cl, cl, cfg.time_dim);
        e.mid_attn = TextAttnP<T>::create(s, p + ".mid_attn", cl, cfg.text_dim, cfg.heads);
        e.mid2 = ResBlockP<T>::create(s, p + ".mid2", cl, cl, cfg.time_dim);
        return e;
    }

    void init(Rng& rng, const UNetConfig& cfg) {
        stem.init(rng);
        for (int i = 0; i < cfg.levels(); ++i) {
            enc[static_cast<size_t>(i)].init(rng);
            if (cfg.attn_at(i)) enc_attn[static_cast<size_t>(i)].init(rng);
        }
        for (auto& d : down) d.init(rng);
        mid1.init(rng);
        mid_attn.init(rng);
        mid2.init(rng);
    }

    void collect(const UNetConfig& cfg, std::vector<ParamTensor<T>*>& out) const {
        auto add_conv = [&](const ConvP<T>& c) {
            out.push_back(c.w);
            out.push_back(c.b);
        };
        auto add_lin = [&](const LinP<T>& l) {
            out.push_back(l.w);
            out.push_back(l.b);
        };
        auto add_norm = [&](const NormP<T>& n) {
            out.push_back(n.g);
            out.push_back(n.b);
        };
        auto add_rb = [&](const ResBlockP<T>& r) {
            add_norm(r.gn1);
            add_conv(r.conv1);
            add_lin(r.temb);
            add_norm(r.gn2);
            add_conv(r.conv2);
            if (r.has_skip) add_conv(r.skip);
        };
        auto add_attn = [&](const TextAttnP<T>& a) {
            add_norm(a.ln);
            out.push_back(a.wq);
            out.push_back(a.wk);
            out.push_back(a.wv);
            out.push_back(a.wo);
        };
        add_conv(stem);
        for (int i = 0; i < cfg.levels(); ++i) {
            add_rb(enc[static_cast<size_t>(i)]);
            if (cfg.attn_at(i)) add_attn(enc_attn[static_cast<size_t>(i)]);
        }
        for (const auto& d : down) add_conv(d);
        add_rb(mid1);
        add_attn(mid_attn);
        add_rb(mid2);
    }
};

template <typename T>
struct FusionSiteT {
    LsaParamsT<T> lsa;
    ConvP<T> add_proj;
    int64_t channels = 0;
};

// Denoising UNet with an optional duplicated conditional branch. Fusion sites
// sit on the middle output and after each decoder level's blocks.
template <typename T>
struct ModelT {
    UNetConfig cfg;
    AblationFlags flags;
    VocabConfig vocab_cfg;
    NoiseSchedule sched;
    ParamStore<T> store;

    LinP<T> temb1, temb2;
    EncoderP<T> enc;
    std::vector<std::vector<ResBlockP<T>>> dec;  // per level, coarse to fine
    std::vector<TextAttnP<T>> dec_attn;
    std::vector<ConvP<T>> up;
    NormP<T> out_gn;
    ConvP<T> out_conv;

    ConvP<T> lift;
    EncoderP<T> branch;
    RsaParamsT<T> rsa;
    std::vector<FusionSiteT<T>> fusion;  // [mid, dec(L-1), ..., dec0]

    static ModelT create(const UNetConfig& cfg, const AblationFlags& flags,
                         const VocabConfig& vocab_cfg) {
        cfg.validate();
        flags.validate();
        ModelT m;
        m.cfg = cfg;
        m.flags = flags;
        m.vocab_cfg = vocab_cfg;
        m.sched = NoiseSchedule::linear();
        int L = cfg.levels();

        m.temb1 = LinP<T>::create(m.store, "unet.temb1", cfg.sin_dim, cfg.time_dim);
        m.temb2 = LinP<T>::create(m.store, "unet.temb2", cfg.time_dim, cfg.time_dim);
        m.enc = EncoderP<T>::create(m.store, "unet", cfg, cfg.in_ch);

        m.dec.resize(static_cast<size_t>(L));
        m.dec_attn.resize(static_cast<size_t>(L));
        for (int i = L - 1; i >= 0; --i) {
            int64_t c = cfg.level_ch(i);
            int64_t c_above = cfg.level_ch(std::min(i + 1, L - 1));
            // First decoder block at each level consumes the feature arriving
            // from the coarser level; both blocks consume one skip each.
            std::vector<int64_t> skip_ch = {c, cfg.level_ch(std::max(i - 1, 0))};
            auto& blocks = m.dec[static_cast<size_t>(i)];
            for (int j = 0; j < 2; ++j) {
                int64_t cin = (j == 0 ? c_above : c) + skip_ch[static_cast<size_t>(j)];
                blocks.push_back(ResBlockP<T>::create(
                    m.store, "unet.dec" + std::to_string(i) + ".rb" + std::to_string(j), cin, c,
                    cfg.time_dim));
            }
            if (cfg.attn_at(i))
                m.dec_attn[static_cast<size_t>(i)] = TextAttnP<T>::create(
                    m.store, "unet.dec" + std::to_string(i) + ".attn", c, cfg.text_dim, cfg.heads);
            if (i > 0)
                m.up.push_back(ConvP<T>::create(m.store, "unet.up" + std::to_string(i),
                                                cfg.level_ch(i), cfg.level_ch(i), 3));
        }
        m.out_gn = NormP<T>::create(m.store, "unet.out_gn", cfg.level_ch(0));
        m.out_conv = ConvP<T>::create(m.store, "unet.out_conv", cfg.out_ch, cfg.level_ch(0), 3);

        if (flags.has_branch()) {
            int64_t lift_in = flags.guidance == "map" ? cfg.map_channels : 3;
            m.lift = ConvP<T>::create(m.store, "branch.lift", cfg.in_ch, lift_in, 1);
            m.branch = EncoderP<T>::create(m.store, "branch", cfg, cfg.in_ch);
            if (flags.rsa)
                m.rsa = RsaParamsT<T>::create(m.store, "rsa", cfg.map_channels, cfg.heads);
            for (int site = 0; site <= L; ++site) {
                // site 0 is the middle block, then decoder levels coarse to
                // fine.
                int64_t c = site == 0 ? cfg.level_ch(L - 1) : cfg.level_ch(L - site);
                FusionSiteT<T> f;
                f.channels = c;
                std::string name = site == 0 ? "fuse.mid"
                                             : "fuse.dec" + std::to_string(L - site);
                if (flags.fusion == "lsa")
                    f.lsa = LsaParamsT<T>::create(m.store, name, c, cfg.heads);
                else
                    f.add_proj = ConvP<T>::create(m.store, name + ".proj", c, c, 1);
                m.fusion.push_back(f);
            }
        }
        return m;
    }

    void init_params(uint64_t seed) {
        Rng rng(derive_seed(seed, "model_init"));
        temb1.init(rng);
        temb2.init(rng);
        enc.init(rng, cfg);
        int L = cfg.levels();
        for (int i = L - 1; i >= 0; --i) {
            for (auto& rb : dec[static_cast<size_t>(i)]) rb.init(rng);
            if (cfg.attn_at(i)) dec_attn[static_cast<size_t>(i)].init(rng);
        }
        for (auto& u : up) u.init(rng);
        out_gn.init();
        out_conv.init_zero();

        if (flags.has_branch()) {
            lift.init(rng);
            branch.init(rng, cfg);
            copy_branch_from_encoder();
            if (flags.rsa) rsa.init(rng, true);
            for (auto& f : fusion) {
                if (flags.fusion == "lsa")
                    f.lsa.init(rng);
                else
                    f.add_proj.init_zero();
            }
        }
    }

    // Bitwise weight duplication of the denoiser encoder+middle into the
    // conditional branch.
    void copy_branch_from_encoder() {
        std::vector<ParamTensor<T>*> src, dst;
        enc.collect(cfg, src);
        branch.collect(cfg, dst);
        if (src.size() != dst.size()) throw Error("branch copy: parameter list mismatch");
        for (size_t i = 0; i < src.size(); ++i) {
            if (src[i]->value.shape != dst[i]->value.shape)
                throw Error("branch copy: shape mismatch at " + src[i]->name);
            dst[i]->value.data = src[i]->value.data;
        }
    }
};

using Model = ModelT<float>;

// Sinusoidal position features for a batch of timesteps.
template <typename T>
TensorT<T> time_embedding_sin(const std::vector<int>& ts, int64_t dim) {
    int64_t half = dim / 2;
    TensorT<T> out({static_cast<int64_t>(ts.size()), dim});
    for (size_t b = 0; b < ts.size(); ++b) {
        for (int64_t k = 0; k < half; ++k) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                   static_cast<double>(half));
            double ang = ts[b] * freq;
            out.at2(static_cast<int64_t>(b), k) = static_cast<T>(std::sin(ang));
            out.at2(static_cast<int64_t>(b), half + k) = static_cast<T>(std::cos(ang));
        }
    }
    return out;
}

namespace detail {

template <typename T>
Var<T> resblock_apply(Tape<T>& t, const ResBlockP<T>& p, Var<T> x, Var<T> temb, int64_t groups) {
    Var<T> h = group_norm(x, t.param(*p.gn1.g), t.param(*p.gn1.b), groups);
    h = conv2d(silu(h), t.param(*p.conv1.w), t.param(*p.conv1.b), 1, 1);
    Var<T> tb = t.param(*p.temb.b);
    Var<T> tproj = linear(silu(temb), t.param(*p.temb.w), &tb);
    h = add_bias_bc(h, tproj);
    h = group_norm(h, t.param(*p.gn2.g), t.param(*p.gn2.b), groups);
    h = conv2d(silu(h), t.param(*p.conv2.w), t.param(*p.conv2.b), 1, 1);
    Var<T> sk = x;
    if (p.has_skip) sk = conv2d(x, t.param(*p.skip.w), t.param(*p.skip.b), 1, 0);
    return add(h, sk);
}

template <typename T>
Var<T> text_attn_apply(Tape<T>& t, const TextAttnP<T>& p, Var<T> x, Var<T> text) {
    const auto& xs = t.val(x).shape;
    int64_t H = xs[2], W = xs[3];
    Var<T> tokens = nchw_to_tokens(x);
    Var<T> normed = layer_norm(tokens, t.param(*p.ln.g), t.param(*p.ln.b));
    Var<T> q = linear(normed, t.param(*p.wq));
    Var<T> k = linear(text, t.param(*p.wk));
    Var<T> v = linear(text, t.param(*p.wv));
    Var<T> ctx = attention(q, k, v, p.heads);
    Var<T> upd = linear(ctx, t.param(*p.wo));
    return tokens_to_nchw(add(tokens, upd), H, W);
}

template <typename T>
struct EncoderOut {
    Var<T> mid;
    std::vector<Var<T>> skips;
    std::vector<Var<T>> level_out;  // per level, finest first
};

template <typename T>
EncoderOut<T> encoder_apply(Tape<T>& t, const EncoderP<T>& p, const UNetConfig& cfg, Var<T> x,
                            Var<T> temb, Var<T> text) {
    EncoderOut<T> out;
    int L = cfg.levels();
    Var<T> h = conv2d(x, t.param(*p.stem.w), t.param(*p.stem.b), 1, 1);
    out.skips.push_back(h);
    for (int i = 0; i < L; ++i) {
        h = resblock_apply(t, p.enc[static_cast<size_t>(i)], h, temb, cfg.groups);
        if (cfg.attn_at(i)) h = text_attn_apply(t, p.enc_attn[static_cast<size_t>(i)], h, text);
        out.skips.push_back(h);
        out.level_out.push_back(h);
        if (i + 1 < L) {
            h = conv2d(h, t.param(*p.down[static_cast<size_t>(i)].w),
                       t.param(*p.down[static_cast<size_t>(i)].b), 2, 1);
            out.skips.push_back(h);
        }
    }
    h = resblock_apply(t, p.mid1, h, temb, cfg.groups);
    h = text_attn_apply(t, p.mid_attn, h, text);
    h = resblock_apply(t, p.mid2, h, temb, cfg.groups);
    out.mid = h;
    return out;
}

// Applies one fusion site, honoring the per-sample mask: samples whose flag
// is 0 keep their unfused features exactly.
template <typename T>
Var<T> fuse_apply(Tape<T>& t, const ModelT<T>& m, const FusionSiteT<T>& site, Var<T> v,
                  Var<T> c, const std::vector<uint8_t>& fuse_mask) {
    const std::vector<int64_t> vs = t.val(v).shape;  // copied: ops below grow the tape
    t.val(c).check_shape(vs, "fusion");
    Var<T> fused;
    if (m.flags.fusion == "lsa") {
        int64_t H = vs[2], W = vs[3];
        Var<T> vt = nchw_to_tokens(v);
        Var<T> ct = nchw_to_tokens(c);
        fused = tokens_to_nchw(lsa_fuse(t, vt, ct, site.lsa), H, W);
    } else {
        fused = add(v, conv2d(c, t.param(*site.add_proj.w), t.param(*site.add_proj.b), 1, 0));
    }
    bool all_on = true;
    for (uint8_t f : fuse_mask) all_on = all_on && f;
    if (all_on) return fused;
    TensorT<T> mask_t(vs);
    int64_t per = mask_t.numel() / vs[0];
    for (int64_t b = 0; b < vs[0]; ++b) {
        T on = fuse_mask[static_cast<size_t>(b)] ? T(1) : T(0);
        for (int64_t i = 0; i < per; ++i) mask_t.data[static_cast<size_t>(b * per + i)] = on;
    }
    Var<T> mask_v = t.input(std::move(mask_t));
    return add(v, mul(mask_v, sub(fused, v)));
}

}  // namespace detail

// Conditioning inputs for one forward pass. branch_in is the branch's lift
// input ([B, map_channels or 3, H, W]); fuse_mask selects which samples
// receive fusion.
template <typename T>
struct CondInput {
    Var<T> branch_in;
    std::vector<uint8_t> fuse_mask;
};

// Predicts noise for a batch. text is [B,1,text_dim]; temb_sin is the
// precomputed sinusoidal feature [B,sin_dim]. cond == nullptr skips the
// branch and all fusion (the unconditional path).
template <typename T>
Var<T> denoise_forward(Tape<T>& t, const ModelT<T>& m, Var<T> z_t, Var<T> temb_sin, Var<T> text,
                       const CondInput<T>* cond) {
    const UNetConfig& cfg = m.cfg;
    const auto& zs = t.val(z_t).shape;
    if (zs.size() != 4 || zs[1] != cfg.in_ch) throw ShapeError("denoise_forward: bad z_t shape");
    if (cond && !m.flags.has_branch())
        throw ConfigMismatch("denoise_forward: conditioning passed to a branchless model");
    int L = cfg.levels();

    Var<T> tb1 = t.param(*m.temb1.b);
    Var<T> temb = linear(temb_sin, t.param(*m.temb1.w), &tb1);
    Var<T> tb2 = t.param(*m.temb2.b);
    temb = linear(silu(temb), t.param(*m.temb2.w), &tb2);

    auto enc_out = detail::encoder_apply(t, m.enc, cfg, z_t, temb, text);

    std::vector<Var<T>> cond_feats;  // level outputs, finest first, then mid
    if (cond) {
        Var<T> lifted =
            conv2d(cond->branch_in, t.param(*m.lift.w), t.param(*m.lift.b), 1, 0);
        auto br = detail::encoder_apply(t, m.branch, cfg, lifted, temb, text);
        cond_feats = br.level_out;
        cond_feats.push_back(br.mid);
    }

    Var<T> h = enc_out.mid;
    if (cond)
        h = detail::fuse_apply(t, m, m.fusion[0], h, cond_feats[static_cast<size_t>(L)],
                               cond->fuse_mask);

    auto& skips = enc_out.skips;
    size_t fuse_idx = 1;
    for (int i = L - 1; i >= 0; --i) {
        for (auto& rb : m.dec[static_cast<size_t>(i)]) {
            Var<T> sk = skips.back();
            skips.pop_back();
            h = detail::resblock_apply(t, rb, concat_ch(h, sk), temb, cfg.groups);
        }
        if (cfg.attn_at(i))
            h = detail::text_attn_apply(t, m.dec_attn[static_cast<size_t>(i)], h, text);
        if (cond) {
            h = detail::fuse_apply(t, m, m.fusion[fuse_idx], h,
                                   cond_feats[static_cast<size_t>(i)], cond->fuse_mask);
        }
        ++fuse_idx;
        if (i > 0) {
            const auto& u = m.up[static_cast<size_t>(L - 1 - i)];
            h = upsample_nearest2(h);
            h = conv2d(h, t.param(*u.w), t.param(*u.b), 1, 1);
        }
    }
    h = group_norm(h, t.param(*m.out_gn.g), t.param(*m.out_gn.b), cfg.groups);
    return conv2d(silu(h), t.param(*m.out_conv.w), t.param(*m.out_conv.b), 1, 1);
}

// Builds the branch input tensor for one layout on the given tape. For map
// guidance this runs the RSA enhancement (when enabled), so gradients reach
// the RSA parameters during training. Returns [1, C, H, W].
template <typename T>
Var<T> build_cond_tokens(Tape<T>& t, const ModelT<T>& m, const SpatialSemanticMap& map,
                         const TensorT<T>& scene_emb) {
    int64_t hw = static_cast<int64_t>(map.h) * map.w;
    TensorT<T> tokens({1, hw, static_cast<int64_t>(map.c)});
    for (int64_t i = 0; i < tokens.numel(); ++i)
        tokens.data[static_cast<size_t>(i)] = static_cast<T>(map.feat.data[static_cast<size_t>(i)]);
    Var<T> tok = t.input(std::move(tokens));
    if (m.flags.rsa) {
        TensorT<T> scene({1, 1, static_cast<int64_t>(map.c)});
        for (int64_t i = 0; i < scene.numel(); ++i)
            scene.data[static_cast<size_t>(i)] = scene_emb.data[static_cast<size_t>(i)];
        tok = rsa_apply(t, tok, t.input(std::move(scene)), map, m.rsa);
    }
    return tokens_to_nchw(tok, map.h, map.w);
}

}  // namespace ssmg

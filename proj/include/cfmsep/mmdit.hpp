#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cfmsep/io.hpp"
#include "cfmsep/ops.hpp"
#include "cfmsep/params.hpp"
#include "cfmsep/synthworld.hpp"

namespace cfmsep {

struct ModelConfig {
    int64_t hidden = 64;
    int64_t heads = 4;
    int64_t n_joint = 2;  // N_1 multimodal blocks
    int64_t n_audio = 2;  // N_2 audio-only blocks
    int64_t cond_channels = 2;  // 2 = target+mixture, 1 = generation-only
    int64_t time_embed_dim = 64;
    // token geometry, mirrored from the world
    int64_t latent_channels = 8;
    int64_t audio_frames = 32;
    int64_t video_tokens = 8;
    int64_t video_dim = 16;
    int64_t sync_tokens = 16;
    int64_t sync_dim = 12;
    int64_t text_tokens = 4;
    int64_t text_dim = 16;

    static ModelConfig from_world(const WorldConfig& w, int64_t cond_channels, int64_t hidden = 64,
                                  int64_t heads = 4, int64_t n_joint = 2, int64_t n_audio = 2,
                                  int64_t time_embed_dim = 64) {
        ModelConfig m;
        m.hidden = hidden;
        m.heads = heads;
        m.n_joint = n_joint;
        m.n_audio = n_audio;
        m.cond_channels = cond_channels;
        m.time_embed_dim = time_embed_dim;
        m.latent_channels = w.latent_channels;
        m.audio_frames = w.audio_frames;
        m.video_tokens = w.video_tokens;
        m.video_dim = w.video_dim;
        m.sync_tokens = w.sync_tokens;
        m.sync_dim = w.sync_dim;
        m.text_tokens = w.text_tokens;
        m.text_dim = w.text_dim;
        return m;
    }

    void validate() const {
        if (hidden % heads != 0) throw TensorError("ModelConfig: hidden must divide by heads");
        if (n_joint < 1 || n_audio < 1) throw TensorError("ModelConfig: N1 and N2 must be >= 1");
        if (cond_channels != 1 && cond_channels != 2)
            throw TensorError("ModelConfig: cond_channels must be 1 or 2");
        if (time_embed_dim % 2 != 0)
            throw TensorError("ModelConfig: time_embed_dim must be even");
    }
};

// Batched condition streams with per-item CFG drop flags.
template <class S>
struct CondBatchT {
    TensorT<S> video;  // [B, T_v, d_v]
    TensorT<S> sync;   // [B, T_s, d_s]
    TensorT<S> text;   // [B, L, d_t]
    std::vector<uint8_t> drop_video, drop_text;

    int64_t batch() const { return video.dim(0); }

    CondBatchT with_all_dropped() const {
        CondBatchT c = *this;
        std::fill(c.drop_video.begin(), c.drop_video.end(), 1);
        std::fill(c.drop_text.begin(), c.drop_text.end(), 1);
        return c;
    }
};

using CondBatch = CondBatchT<float>;

template <class S>
CondBatchT<S> make_cond_batch(const ModelConfig& cfg,
                              const std::vector<const ConditionBundle*>& bundles) {
    const int64_t B = static_cast<int64_t>(bundles.size());
    std::vector<S> video(B * cfg.video_tokens * cfg.video_dim);
    std::vector<S> sync(B * cfg.sync_tokens * cfg.sync_dim);
    std::vector<S> text(B * cfg.text_tokens * cfg.text_dim);
    CondBatchT<S> out;
    out.drop_video.resize(B);
    out.drop_text.resize(B);
    for (int64_t b = 0; b < B; ++b) {
        const ConditionBundle& c = *bundles[b];
        for (size_t i = 0; i < c.video_tokens.size(); ++i)
            video[b * c.video_tokens.size() + i] = static_cast<S>(c.video_tokens[i]);
        for (size_t i = 0; i < c.sync_tokens.size(); ++i)
            sync[b * c.sync_tokens.size() + i] = static_cast<S>(c.sync_tokens[i]);
        for (size_t i = 0; i < c.text_tokens.size(); ++i)
            text[b * c.text_tokens.size() + i] = static_cast<S>(c.text_tokens[i]);
        out.drop_video[b] = c.drop_video ? 1 : 0;
        out.drop_text[b] = c.drop_text ? 1 : 0;
    }
    out.video = TensorT<S>::from_data({B, cfg.video_tokens, cfg.video_dim}, std::move(video));
    out.sync = TensorT<S>::from_data({B, cfg.sync_tokens, cfg.sync_dim}, std::move(sync));
    out.text = TensorT<S>::from_data({B, cfg.text_tokens, cfg.text_dim}, std::move(text));
    return out;
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void add_linear(ParamStoreT<S>& ps, const std::string& prefix, int64_t in, int64_t out,
                uint64_t seed, bool zero_init) {
    if (zero_init) {
        ps.add(prefix + ".weight", TensorT<S>::zeros({in, out}));
    } else {
        RngStream rng(seed, "init." + prefix);
        ps.add(prefix + ".weight",
               TensorT<S>::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in))));
    }
    ps.add(prefix + ".bias", TensorT<S>::zeros({out}));
}

template <class S>
void add_block(ParamStoreT<S>& ps, const std::string& prefix, int64_t h, uint64_t seed) {
    add_linear(ps, prefix + ".mod", h, 6 * h, seed, /*zero_init=*/true);  // adaLN-zero
    add_linear(ps, prefix + ".qkv", h, 3 * h, seed, false);
    add_linear(ps, prefix + ".attn_out", h, h, seed, false);
    add_linear(ps, prefix + ".mlp.fc1", h, 4 * h, seed, false);
    add_linear(ps, prefix + ".mlp.fc2", 4 * h, h, seed, false);
}

// The last joint block only reads the context streams (their post-attention
// updates would be dead ends), so video/text there carry just a pre-attention
// modulation and QKV.
template <class S>
void add_context_pre_block(ParamStoreT<S>& ps, const std::string& prefix, int64_t h,
                           uint64_t seed) {
    add_linear(ps, prefix + ".mod", h, 2 * h, seed, /*zero_init=*/true);
    add_linear(ps, prefix + ".qkv", h, 3 * h, seed, false);
}

}  // namespace detail

template <class S>
ParamStoreT<S> init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ParamStoreT<S> ps;
    const int64_t h = cfg.hidden;
    detail::add_linear(ps, "audio_in_proj", cfg.cond_channels * cfg.latent_channels, h, seed,
                       false);
    detail::add_linear(ps, "sync_proj", cfg.sync_dim, h, seed, false);
    detail::add_linear(ps, "video_proj", cfg.video_dim, h, seed, false);
    detail::add_linear(ps, "text_proj", cfg.text_dim, h, seed, false);

    {
        RngStream rng(seed, "init.pos");
        ps.add("pos.audio", TensorT<S>::randn({cfg.audio_frames, h}, rng, 0.02));
        ps.add("pos.video", TensorT<S>::randn({cfg.video_tokens, h}, rng, 0.02));
        ps.add("pos.text", TensorT<S>::randn({cfg.text_tokens, h}, rng, 0.02));
    }
    {
        RngStream rng(seed, "init.null");
        ps.add("cond.null_video", TensorT<S>::randn({cfg.video_dim}, rng, 0.02));
        ps.add("cond.null_text", TensorT<S>::randn({cfg.text_dim}, rng, 0.02));
        ps.add("cond.null_sync", TensorT<S>::randn({cfg.sync_dim}, rng, 0.02));
    }
    detail::add_linear(ps, "cond.video_pool", cfg.video_dim, h, seed, false);
    detail::add_linear(ps, "cond.text_pool", cfg.text_dim, h, seed, false);
    detail::add_linear(ps, "cond.time_mlp.fc1", cfg.time_embed_dim, h, seed, false);
    detail::add_linear(ps, "cond.time_mlp.fc2", h, h, seed, false);

    for (int64_t i = 0; i < cfg.n_joint; ++i) {
        const std::string base = "mm_block." + std::to_string(i);
        detail::add_block(ps, base + ".audio", h, seed);
        if (i == cfg.n_joint - 1) {
            detail::add_context_pre_block(ps, base + ".video", h, seed);
            detail::add_context_pre_block(ps, base + ".text", h, seed);
        } else {
            detail::add_block(ps, base + ".video", h, seed);
            detail::add_block(ps, base + ".text", h, seed);
        }
    }
    for (int64_t i = 0; i < cfg.n_audio; ++i)
        detail::add_block(ps, "a_block." + std::to_string(i), h, seed);

    detail::add_linear(ps, "head.mod", h, 2 * h, seed, /*zero_init=*/true);
    detail::add_linear(ps, "head.out", h, cfg.latent_channels, seed, /*zero_init=*/true);
    return ps;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
TensorT<S> linear(const TensorT<S>& x, ParamStoreT<S>& ps, const std::string& prefix) {
    return add(matmul(x, ps.at(prefix + ".weight")), ps.at(prefix + ".bias"));
}

// 32-frequency sinusoidal embedding, geometric frequencies 1..1e4 over t in [0,1].
template <class S>
TensorT<S> time_embedding(const TensorT<S>& t, int64_t dim) {
    const int64_t B = t.numel();
    const int64_t half = dim / 2;
    std::vector<S> out(B * dim);
    for (int64_t b = 0; b < B; ++b) {
        const double tv = static_cast<double>(t.data()[b]);
        for (int64_t i = 0; i < half; ++i) {
            const double freq =
                std::pow(10.0, 4.0 * static_cast<double>(i) / std::max<int64_t>(half - 1, 1));
            out[b * dim + i] = static_cast<S>(std::sin(freq * tv));
            out[b * dim + half + i] = static_cast<S>(std::cos(freq * tv));
        }
    }
    return TensorT<S>::from_data({B, dim}, std::move(out));
}

// [T_to x T_from] linear-interpolation matrix, endpoint aligned.
template <class S>
TensorT<S> interp_matrix(int64_t t_from, int64_t t_to) {
    std::vector<S> w(t_to * t_from, S(0));
    for (int64_t i = 0; i < t_to; ++i) {
        const double p =
            t_to == 1 ? 0.0 : static_cast<double>(i) * (t_from - 1) / (t_to - 1);
        const int64_t lo = static_cast<int64_t>(p);
        const int64_t hi = std::min(lo + 1, t_from - 1);
        const double f = p - lo;
        w[i * t_from + lo] += static_cast<S>(1.0 - f);
        w[i * t_from + hi] += static_cast<S>(f);
    }
    return TensorT<S>::from_data({t_to, t_from}, std::move(w));
}

// tokens*(1-m) + null*m with m in {0,1} per item; the null embedding stays on
// the tape every step so its gradient buffer is always populated.
template <class S>
TensorT<S> substitute_dropped(const TensorT<S>& tokens, const TensorT<S>& null_embed,
                              const std::vector<uint8_t>& drop) {
    const int64_t B = tokens.dim(0);
    std::vector<S> m(B), inv(B);
    for (int64_t b = 0; b < B; ++b) {
        m[b] = drop[b] ? S(1) : S(0);
        inv[b] = drop[b] ? S(0) : S(1);
    }
    auto mask = TensorT<S>::from_data({B, 1, 1}, std::move(m));
    auto keep = TensorT<S>::from_data({B, 1, 1}, std::move(inv));
    return add(mul(tokens, keep), mul(null_embed, mask));
}

template <class S>
struct Modulation {
    TensorT<S> shift_attn, scale_attn, gate_attn, shift_mlp, scale_mlp, gate_mlp;
};

template <class S>
Modulation<S> modulation(ParamStoreT<S>& ps, const std::string& prefix, const TensorT<S>& g) {
    auto m = linear(silu(g), ps, prefix + ".mod");  // [B, 6h]
    const int64_t h = m.dim(-1) / 6;
    auto parts = split(m, -1, {h, h, h, h, h, h});
    const int64_t B = m.dim(0);
    Modulation<S> out;
    out.shift_attn = reshape(parts[0], {B, 1, h});
    out.scale_attn = reshape(parts[1], {B, 1, h});
    out.gate_attn = reshape(parts[2], {B, 1, h});
    out.shift_mlp = reshape(parts[3], {B, 1, h});
    out.scale_mlp = reshape(parts[4], {B, 1, h});
    out.gate_mlp = reshape(parts[5], {B, 1, h});
    return out;
}

// shift/scale only, for the read-only context streams of the last joint block
template <class S>
std::pair<TensorT<S>, TensorT<S>> modulation_pre(ParamStoreT<S>& ps, const std::string& prefix,
                                                 const TensorT<S>& g) {
    auto m = linear(silu(g), ps, prefix + ".mod");  // [B, 2h]
    const int64_t h = m.dim(-1) / 2;
    auto parts = split(m, -1, {h, h});
    const int64_t B = m.dim(0);
    return {reshape(parts[0], {B, 1, h}), reshape(parts[1], {B, 1, h})};
}

template <class S>
TensorT<S> adaln(const TensorT<S>& x, const TensorT<S>& shift, const TensorT<S>& scale) {
    return add(mul(layer_norm_lastdim(x), add_scalar(scale, S(1))), shift);
}

// Multi-head attention over already-concatenated token streams.
template <class S>
TensorT<S> attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                     int64_t heads) {
    const int64_t B = q.dim(0), T = q.dim(1), h = q.dim(2);
    const int64_t dh = h / heads;
    auto q4 = permute(reshape(q, {B, T, heads, dh}), {0, 2, 1, 3});
    auto k4 = permute(reshape(k, {B, T, heads, dh}), {0, 2, 3, 1});
    auto v4 = permute(reshape(v, {B, T, heads, dh}), {0, 2, 1, 3});
    auto scores = scale(matmul(q4, k4), static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto w = softmax_lastdim(scores);
    auto out = matmul(w, v4);  // [B, H, T, dh]
    return reshape(permute(out, {0, 2, 1, 3}), {B, T, h});
}

template <class S>
TensorT<S> mlp_ff(const TensorT<S>& x, ParamStoreT<S>& ps, const std::string& prefix) {
    return linear(silu(linear(x, ps, prefix + ".fc1")), ps, prefix + ".fc2");
}

}  // namespace detail

// Channel-concatenation audio input: x_t (+ x_m along channels) -> tokens.
template <class S>
TensorT<S> audio_in_proj(const ModelConfig& cfg, ParamStoreT<S>& ps, const TensorT<S>& x_t,
                         const TensorT<S>* x_m) {
    if (x_t.dim(-1) != cfg.latent_channels)
        throw TensorError("audio_in_proj: latent channel mismatch " + shape_str(x_t.shape()));
    if (cfg.cond_channels == 2) {
        if (!x_m) throw TensorError("audio_in_proj: model expects a mixture channel x_m");
        if (x_m->shape() != x_t.shape())
            throw TensorError("audio_in_proj: x_m shape " + shape_str(x_m->shape()) +
                              " does not match x_t " + shape_str(x_t.shape()));
        return detail::linear(concat<S>({x_t, *x_m}, -1), ps, "audio_in_proj");
    }
    if (x_m) throw TensorError("audio_in_proj: generation-only model got a mixture channel");
    return detail::linear(x_t, ps, "audio_in_proj");
}

// Mean-pooled (null-substituted) condition streams, pre-projection.
template <class S>
std::pair<TensorT<S>, TensorT<S>> pool_conditions(ParamStoreT<S>& ps, const CondBatchT<S>& cond) {
    auto vid = detail::substitute_dropped(cond.video, ps.at("cond.null_video"), cond.drop_video);
    auto txt = detail::substitute_dropped(cond.text, ps.at("cond.null_text"), cond.drop_text);
    return {mean_axis(vid, 1), mean_axis(txt, 1)};
}

// The velocity network v_theta(t, C, x_t [, x_m]) -> [B, T_a, C].
template <class S>
TensorT<S> mmdit_forward(const ModelConfig& cfg, ParamStoreT<S>& ps, const TensorT<S>& t,
                         const TensorT<S>& x_t, const TensorT<S>* x_m,
                         const CondBatchT<S>& cond) {
    using namespace detail;
    const int64_t B = x_t.dim(0);
    const int64_t h = cfg.hidden;

    auto stage = [](const char* name, auto&& fn) {
        try {
            return fn();
        } catch (const TensorError& e) {
            throw TensorError(std::string("in ") + name + ": " + e.what());
        }
    };

    // input projections + frame-aligned sync conditioning
    TensorT<S> audio = stage("audio_in", [&] {
        auto a = audio_in_proj(cfg, ps, x_t, x_m);
        auto sync_in = substitute_dropped(cond.sync, ps.at("cond.null_sync"), cond.drop_video);
        auto up = matmul(interp_matrix<S>(cfg.sync_tokens, cfg.audio_frames), sync_in);
        a = add(a, linear(up, ps, "sync_proj"));
        return add(a, ps.at("pos.audio"));
    });
    TensorT<S> video = stage("video_in", [&] {
        auto v = substitute_dropped(cond.video, ps.at("cond.null_video"), cond.drop_video);
        return add(linear(v, ps, "video_proj"), ps.at("pos.video"));
    });
    TensorT<S> text = stage("text_in", [&] {
        auto x = substitute_dropped(cond.text, ps.at("cond.null_text"), cond.drop_text);
        return add(linear(x, ps, "text_proj"), ps.at("pos.text"));
    });

    // global adaLN conditioning: pooled video + pooled text + timestep MLP
    TensorT<S> g = stage("global_cond", [&] {
        auto [pool_v, pool_t] = pool_conditions(ps, cond);
        auto gv = linear(pool_v, ps, "cond.video_pool");
        auto gt = linear(pool_t, ps, "cond.text_pool");
        auto te = time_embedding<S>(t, cfg.time_embed_dim);
        auto gtime = linear(silu(linear(te, ps, "cond.time_mlp.fc1")), ps, "cond.time_mlp.fc2");
        return add(add(gv, gt), gtime);
    });

    const int64_t Ta = cfg.audio_frames, Tv = cfg.video_tokens, L = cfg.text_tokens;

    for (int64_t i = 0; i < cfg.n_joint; ++i) {
        const std::string base = "mm_block." + std::to_string(i);
        const bool last = i == cfg.n_joint - 1;
        stage(base.c_str(), [&] {
            auto ma = modulation(ps, base + ".audio", g);
            auto qkv_a = linear(adaln(audio, ma.shift_attn, ma.scale_attn), ps, base + ".audio.qkv");

            TensorT<S> qkv_v, qkv_t;
            Modulation<S> mv, mt;
            if (last) {
                auto [sv, cv] = modulation_pre(ps, base + ".video", g);
                auto [st, ct] = modulation_pre(ps, base + ".text", g);
                qkv_v = linear(adaln(video, sv, cv), ps, base + ".video.qkv");
                qkv_t = linear(adaln(text, st, ct), ps, base + ".text.qkv");
            } else {
                mv = modulation(ps, base + ".video", g);
                mt = modulation(ps, base + ".text", g);
                qkv_v = linear(adaln(video, mv.shift_attn, mv.scale_attn), ps, base + ".video.qkv");
                qkv_t = linear(adaln(text, mt.shift_attn, mt.scale_attn), ps, base + ".text.qkv");
            }

            auto pa = split(qkv_a, -1, {h, h, h});
            auto pv = split(qkv_v, -1, {h, h, h});
            auto pt = split(qkv_t, -1, {h, h, h});
            auto q = concat<S>({pa[0], pv[0], pt[0]}, 1);
            auto k = concat<S>({pa[1], pv[1], pt[1]}, 1);
            auto v = concat<S>({pa[2], pv[2], pt[2]}, 1);

            auto joint = attention(q, k, v, cfg.heads);
            auto parts = split(joint, 1, {Ta, Tv, L});

            audio = add(audio, mul(ma.gate_attn, linear(parts[0], ps, base + ".audio.attn_out")));
            audio = add(audio, mul(ma.gate_mlp,
                                   mlp_ff(adaln(audio, ma.shift_mlp, ma.scale_mlp), ps,
                                          base + ".audio.mlp")));
            if (!last) {
                video = add(video, mul(mv.gate_attn, linear(parts[1], ps, base + ".video.attn_out")));
                text = add(text, mul(mt.gate_attn, linear(parts[2], ps, base + ".text.attn_out")));
                video = add(video, mul(mv.gate_mlp,
                                       mlp_ff(adaln(video, mv.shift_mlp, mv.scale_mlp), ps,
                                              base + ".video.mlp")));
                text = add(text, mul(mt.gate_mlp,
                                     mlp_ff(adaln(text, mt.shift_mlp, mt.scale_mlp), ps,
                                            base + ".text.mlp")));
            }
            return 0;
        });
    }

    for (int64_t i = 0; i < cfg.n_audio; ++i) {
        const std::string base = "a_block." + std::to_string(i);
        stage(base.c_str(), [&] {
            auto m = modulation(ps, base, g);
            auto qkv = linear(adaln(audio, m.shift_attn, m.scale_attn), ps, base + ".qkv");
            auto p = split(qkv, -1, {h, h, h});
            auto out = attention(p[0], p[1], p[2], cfg.heads);
            audio = add(audio, mul(m.gate_attn, linear(out, ps, base + ".attn_out")));
            audio = add(audio, mul(m.gate_mlp, mlp_ff(adaln(audio, m.shift_mlp, m.scale_mlp), ps,
                                                      base + ".mlp")));
            return 0;
        });
    }

    return stage("head", [&] {
        auto m = linear(silu(g), ps, "head.mod");
        auto parts = split(m, -1, {h, h});
        auto shift = reshape(parts[0], {B, 1, h});
        auto scl = reshape(parts[1], {B, 1, h});
        return linear(adaln(audio, shift, scl), ps, "head.out");
    });
}

// ---------------------------------------------------------------------------
// fine-tune plumbing: projection expansion, freezing, checkpoints
// ---------------------------------------------------------------------------

// [C -> h] pretrained projection to [2C -> h]: the first C input rows are
// copied, the mixture rows start at zero, so the expanded model reproduces the
// pretrained one whenever x_m is all-zeros.
ParamStore expand_in_proj(const ParamStore& pretrained, const ModelConfig& pretrained_cfg,
                          const ModelConfig& target_cfg);

// scratch | pretrain_all | pretrain_frozen
FreezeMask freeze_sets(const std::string& config_name);

struct Checkpoint {
    ModelConfig model;
    WorldConfig world;
    std::string train_config;
    int64_t step = 0;
    ParamStore params;
};

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& model,
                     const WorldConfig& world, const std::string& train_config, int64_t step,
                     const ParamStore& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const ModelConfig& m);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace cfmsep

#pragma once

#include <optional>

#include "cfmsep/mmdit.hpp"
#include "cfmsep/ops.hpp"

namespace cfmsep {

struct SamplerConfig {
    int64_t steps = 25;
    double guidance_scale = 4.5;
    uint64_t seed = 1234;

    void validate() const {
        if (steps < 1) throw TensorError("SamplerConfig: steps must be >= 1");
        if (guidance_scale < 0) throw TensorError("SamplerConfig: guidance must be >= 0");
    }
};

// x_t = t*x1 + (1-t)*x0 along the linear interpolation path. t is per item.
template <class S>
TensorT<S> interpolate(const TensorT<S>& x0, const TensorT<S>& x1, const TensorT<S>& t) {
    if (x0.shape() != x1.shape())
        throw TensorError("interpolate: shape mismatch " + shape_str(x0.shape()) + " vs " +
                          shape_str(x1.shape()));
    for (S v : t.data())
        if (v < S(0) || v > S(1))
            throw TensorError("interpolate: t out of [0,1]");
    Shape tshape(x0.ndim(), 1);
    tshape[0] = t.numel();
    auto tb = reshape(t, tshape);
    return add(mul(tb, x1), mul(add_scalar(neg(tb), S(1)), x0));
}

// u = x1 - x0, independent of t.
template <class S>
TensorT<S> velocity_target(const TensorT<S>& x0, const TensorT<S>& x1) {
    return sub(x1, x0);
}

// v = v_uncond + s*(v_cond - v_uncond); exact passthrough at s in {0, 1}.
template <class S>
TensorT<S> apply_cfg(const TensorT<S>& v_cond, const TensorT<S>& v_uncond, double s) {
    if (v_cond.shape() != v_uncond.shape())
        throw TensorError("apply_cfg: shape mismatch");
    if (s == 0.0) return v_uncond;
    if (s == 1.0) return v_cond;
    return add(v_uncond, scale(sub(v_cond, v_uncond), static_cast<S>(s)));
}

enum class CfmMode { generation, separation };

// CFG condition dropout: video and text independently dropped with probability
// p_each, plus a joint-drop branch so the fully-unconditional case occurs with
// probability >= p_joint.
struct DropoutPolicy {
    double p_each = 0.1;
    double p_joint = 0.05;
    bool enabled = true;
};

template <class S>
void apply_condition_dropout(CondBatchT<S>& cond, RngStream& rng, const DropoutPolicy& policy) {
    if (!policy.enabled) return;
    const int64_t B = cond.batch();
    for (int64_t b = 0; b < B; ++b) {
        if (rng.uniform() < policy.p_joint) {
            cond.drop_video[b] = 1;
            cond.drop_text[b] = 1;
        } else {
            if (rng.uniform() < policy.p_each) cond.drop_video[b] = 1;
            if (rng.uniform() < policy.p_each) cond.drop_text[b] = 1;
        }
    }
}

// Conditional flow-matching loss: mean over batch and elements of
// ||v(t, C, x_t[, x_m]) - (x1 - x0)||^2. The mixture channel is never noised:
// in separation mode x_m enters unchanged for every t; in generation mode a
// 2-channel model sees an all-zero mixture channel.
template <class S>
TensorT<S> cfm_loss(const ModelConfig& cfg, ParamStoreT<S>& params, const TensorT<S>& x1,
                    const std::optional<TensorT<S>>& x_m, CondBatchT<S> cond, CfmMode mode,
                    RngStream& rng, const DropoutPolicy& dropout = {}) {
    const int64_t B = x1.dim(0);
    if (mode == CfmMode::separation) {
        if (cfg.cond_channels != 2)
            throw TensorError("cfm_loss: separation mode requires a 2-channel model");
        if (!x_m) throw TensorError("cfm_loss: separation mode requires x_m");
    } else if (x_m) {
        throw TensorError("cfm_loss: generation mode does not take x_m");
    }

    apply_condition_dropout(cond, rng, dropout);

    std::vector<S> tv(B);
    for (auto& v : tv) v = static_cast<S>(rng.uniform());
    auto t = TensorT<S>::from_data({B}, std::move(tv));
    auto x0 = TensorT<S>::randn(x1.shape(), rng);
    auto xt = interpolate(x0, x1, t);
    auto u = velocity_target(x0, x1);

    std::optional<TensorT<S>> xm_eff;
    if (mode == CfmMode::separation) xm_eff = *x_m;
    else if (cfg.cond_channels == 2) xm_eff = TensorT<S>::zeros(x1.shape());

    auto v = mmdit_forward(cfg, params, t, xt, xm_eff ? &*xm_eff : nullptr, cond);
    return mse(v, u);
}

// Fixed-step Euler integration of dx/dt = v(t, x) from t=0 to t=1.
// vel(t_k, x) is any callable; non-finite states abort with the step index.
template <class S, class VelFn>
TensorT<S> euler_integrate(TensorT<S> x, int64_t steps, VelFn&& vel) {
    for (int64_t k = 0; k < steps; ++k) {
        try {
            const S tk = static_cast<S>(k) / static_cast<S>(steps);
            x = add(x, scale(vel(tk, x), S(1) / static_cast<S>(steps)));
        } catch (const TensorError& e) {
            throw TensorError("euler_sample: step " + std::to_string(k) + ": " + e.what());
        }
    }
    return x;
}

// CFG-guided Euler sampling from Gaussian noise. The unconditional branch
// drops both modalities; x_m (when present) is held constant throughout.
template <class S>
TensorT<S> euler_sample(const ModelConfig& cfg, ParamStoreT<S>& params, const CondBatchT<S>& cond,
                        const std::optional<TensorT<S>>& x_m, const SamplerConfig& sampler,
                        RngStream& rng) {
    sampler.validate();
    if ((cfg.cond_channels == 2) != x_m.has_value())
        throw TensorError("euler_sample: model channels do not match presence of x_m");
    NoGradGuard ng;
    const int64_t B = cond.batch();
    auto x = TensorT<S>::randn({B, cfg.audio_frames, cfg.latent_channels}, rng);
    auto uncond = cond.with_all_dropped();
    const TensorT<S>* xm_ptr = x_m ? &*x_m : nullptr;
    return euler_integrate(std::move(x), sampler.steps, [&](S tk, const TensorT<S>& xk) {
        auto t = TensorT<S>::full({B}, tk);
        auto v_c = mmdit_forward(cfg, params, t, xk, xm_ptr, cond);
        if (sampler.guidance_scale == 1.0) return v_c;
        auto v_u = mmdit_forward(cfg, params, t, xk, xm_ptr, uncond);
        return apply_cfg(v_c, v_u, sampler.guidance_scale);
    });
}

}  // namespace cfmsep

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cfmsep/ops.hpp"
#include "cfmsep/tensor.hpp"

namespace cfmsep {

// Ordered named parameter store; iteration follows insertion order.
template <class S>
struct ParamStoreT {
    std::vector<std::string> names;
    std::unordered_map<std::string, TensorT<S>> map;
    int64_t step_count = 0;

    void add(const std::string& name, TensorT<S> t) {
        if (map.count(name)) throw TensorError("ParamStore: duplicate name '" + name + "'");
        t.set_requires_grad(true);
        names.push_back(name);
        map.emplace(name, std::move(t));
    }

    bool has(const std::string& name) const { return map.count(name) != 0; }

    TensorT<S>& at(const std::string& name) {
        auto it = map.find(name);
        if (it == map.end()) throw TensorError("ParamStore: unknown parameter '" + name + "'");
        return it->second;
    }
    const TensorT<S>& at(const std::string& name) const {
        auto it = map.find(name);
        if (it == map.end()) throw TensorError("ParamStore: unknown parameter '" + name + "'");
        return it->second;
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& name : names) n += at(name).numel();
        return n;
    }

    void zero_grads() {
        for (const auto& name : names) at(name).zero_grad();
    }

    // Deep copy (fresh buffers, same names/order/flags).
    ParamStoreT clone() const {
        ParamStoreT out;
        out.step_count = step_count;
        for (const auto& name : names) {
            auto t = at(name).clone();
            out.names.push_back(name);
            out.map.emplace(name, std::move(t));
        }
        return out;
    }
};

using ParamStore = ParamStoreT<float>;

// Set of parameter-name prefixes excluded from optimizer updates.
struct FreezeMask {
    std::vector<std::string> frozen_prefixes;

    bool is_frozen(std::string_view name) const {
        for (const auto& p : frozen_prefixes)
            if (name.substr(0, p.size()) == p) return true;
        return false;
    }

    template <class S>
    void validate(const ParamStoreT<S>& ps) const {
        for (const auto& prefix : frozen_prefixes) {
            bool hit = false;
            for (const auto& name : ps.names)
                if (std::string_view(name).substr(0, prefix.size()) == prefix) {
                    hit = true;
                    break;
                }
            if (!hit)
                throw TensorError("FreezeMask: prefix '" + prefix + "' matches no parameter");
        }
    }

    // Frozen entries stop requiring gradients; backward never touches them.
    template <class S>
    void apply(ParamStoreT<S>& ps) const {
        for (const auto& name : ps.names) ps.at(name).set_requires_grad(!is_frozen(name));
    }

    template <class S>
    int64_t frozen_count(const ParamStoreT<S>& ps) const {
        int64_t n = 0;
        for (const auto& name : ps.names)
            if (is_frozen(name)) n += ps.at(name).numel();
        return n;
    }
};

struct OptimizerHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    int64_t warmup_steps = 200;
};

template <class S>
struct OptimizerStateT {
    OptimizerHyper hp;
    std::unordered_map<std::string, std::vector<S>> m, v;
};

using OptimizerState = OptimizerStateT<float>;

// Decoupled-weight-decay Adam with linear warmup. Frozen entries are skipped
// entirely (bit-identical afterwards); trainable grads are zeroed on exit.
template <class S>
void adamw_step(ParamStoreT<S>& ps, OptimizerStateT<S>& st, const FreezeMask& mask) {
    const auto& hp = st.hp;
    const int64_t t = ps.step_count + 1;
    const double warm =
        hp.warmup_steps > 0 ? std::min(1.0, static_cast<double>(t) / hp.warmup_steps) : 1.0;
    const double lr_eff = hp.lr * warm;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));

    for (const auto& name : ps.names) {
        auto& p = ps.at(name);
        if (mask.is_frozen(name) || !p.requires_grad()) continue;
        if (!p.has_grad())
            throw TensorError("adamw_step: missing gradient on trainable entry '" + name + "'");
        auto& m = st.m[name];
        auto& v = st.v[name];
        if (m.empty()) m.assign(p.numel(), S(0));
        if (v.empty()) v.assign(p.numel(), S(0));
        const auto& g = p.grad();
        auto& w = p.mutable_data();
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = hp.beta1 * static_cast<double>(m[i]) + (1.0 - hp.beta1) * gi;
            const double vi = hp.beta2 * static_cast<double>(v[i]) + (1.0 - hp.beta2) * gi * gi;
            m[i] = static_cast<S>(mi);
            v[i] = static_cast<S>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            const double wi = static_cast<double>(w[i]);
            w[i] = static_cast<S>(wi - lr_eff * (mhat / (std::sqrt(vhat) + hp.eps) +
                                                 hp.weight_decay * wi));
        }
        p.zero_grad();
    }
    ps.step_count += 1;
}

// ---------------------------------------------------------------------------
// finite-difference gradient verification (64-bit only)
// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    double max_err = 0;
    int64_t checked = 0;
};

struct GradCheckReport {
    double tol = 0;
    double max_err = 0;
    bool pass = true;
    std::vector<GradCheckEntry> entries;
};

// Central differences against reverse-mode gradients. Vanishing gradients
// (below 1e-8) are compared absolutely; small ones against a denominator
// floor, since the finite-difference noise floor (~1e-10 at h=1e-5) makes a
// pure ratio meaningless there. sample_cap < 0 checks every entry; otherwise
// a deterministic subsample per tensor.
template <class S>
GradCheckReport grad_check(const std::function<TensorT<S>(ParamStoreT<S>&)>& f,
                           ParamStoreT<S>& params, double h, double tol,
                           int64_t sample_cap = -1, uint64_t sample_seed = 0,
                           double denom_floor = 1e-5) {
    static_assert(std::is_same_v<S, double>, "grad_check requires the 64-bit mode");
    params.zero_grads();
    TensorT<S> loss = f(params);
    backward(loss);

    std::unordered_map<std::string, std::vector<S>> saved;
    for (const auto& name : params.names) {
        const auto& p = params.at(name);
        saved[name] = p.has_grad() ? p.grad() : std::vector<S>(p.numel(), S(0));
    }

    GradCheckReport report;
    report.tol = tol;
    NoGradGuard ng;
    int64_t tensor_idx = 0;
    for (const auto& name : params.names) {
        auto& p = params.at(name);
        if (!p.requires_grad()) {
            ++tensor_idx;
            continue;
        }
        std::vector<int64_t> idxs;
        const int64_t n = p.numel();
        if (sample_cap < 0 || n <= sample_cap) {
            idxs.resize(n);
            for (int64_t i = 0; i < n; ++i) idxs[i] = i;
        } else {
            RngStream rs(sample_seed, "gradcheck", static_cast<uint64_t>(tensor_idx));
            for (int64_t i = 0; i < sample_cap; ++i) idxs.push_back(rs.uniform_int(n));
        }
        GradCheckEntry entry{name, 0.0, static_cast<int64_t>(idxs.size())};
        auto& w = p.mutable_data();
        for (int64_t i : idxs) {
            const S old = w[i];
            w[i] = old + static_cast<S>(h);
            const double lp = static_cast<double>(f(params).item());
            w[i] = old - static_cast<S>(h);
            const double lm = static_cast<double>(f(params).item());
            w[i] = old;
            const double fd = (lp - lm) / (2.0 * h);
            const double ad = static_cast<double>(saved[name][i]);
            const double mag = std::max(std::abs(ad), std::abs(fd));
            const double err =
                mag < 1e-8 ? std::abs(ad - fd) : std::abs(ad - fd) / std::max(mag, denom_floor);
            entry.max_err = std::max(entry.max_err, err);
        }
        report.entries.push_back(entry);
        report.max_err = std::max(report.max_err, entry.max_err);
        if (entry.max_err >= tol) report.pass = false;
        ++tensor_idx;
    }
    return report;
}

}  // namespace cfmsep

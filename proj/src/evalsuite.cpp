#include "cfmsep/evalsuite.hpp"

#include <algorithm>
#include <cmath>

namespace cfmsep {

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric d x d matrix.
// A = V diag(eig) V^T with eigenvectors in the columns of V.
void jacobi_eigh(std::vector<double> a, int64_t d, std::vector<double>& eig,
                 std::vector<double>& v) {
    v.assign(d * d, 0.0);
    for (int64_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
    double norm = 0;
    for (double x : a) norm += x * x;
    const double tol = 1e-28 * std::max(norm, 1e-300);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (int64_t p = 0; p < d; ++p)
            for (int64_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
        if (off < tol) break;
        for (int64_t p = 0; p < d; ++p) {
            for (int64_t q = p + 1; q < d; ++q) {
                const double apq = a[p * d + q];
                if (std::abs(apq) < 1e-300) continue;
                const double tau = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                const double t = (tau >= 0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int64_t i = 0; i < d; ++i) {
                    const double aip = a[i * d + p], aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for (int64_t i = 0; i < d; ++i) {
                    const double api = a[p * d + i], aqi = a[q * d + i];
                    a[p * d + i] = c * api - s * aqi;
                    a[q * d + i] = s * api + c * aqi;
                }
                for (int64_t i = 0; i < d; ++i) {
                    const double vip = v[i * d + p], viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    eig.resize(d);
    for (int64_t i = 0; i < d; ++i) eig[i] = a[i * d + i];
}

std::vector<double> matmul_sq(const std::vector<double>& a, const std::vector<double>& b,
                              int64_t d) {
    std::vector<double> c(d * d, 0.0);
    for (int64_t i = 0; i < d; ++i)
        for (int64_t k = 0; k < d; ++k) {
            const double av = a[i * d + k];
            for (int64_t j = 0; j < d; ++j) c[i * d + j] += av * b[k * d + j];
        }
    return c;
}

// V diag(f(eig)) V^T
std::vector<double> eig_rebuild(const std::vector<double>& v, const std::vector<double>& eig,
                                int64_t d, double (*f)(double)) {
    std::vector<double> out(d * d, 0.0);
    for (int64_t k = 0; k < d; ++k) {
        const double fk = f(eig[k]);
        for (int64_t i = 0; i < d; ++i) {
            const double vik = v[i * d + k] * fk;
            for (int64_t j = 0; j < d; ++j) out[i * d + j] += vik * v[j * d + k];
        }
    }
    return out;
}

double sqrt_clamped(double x) { return x > 0 ? std::sqrt(x) : 0.0; }

}  // namespace

double frechet_distance(const std::vector<std::vector<double>>& feats_a,
                        const std::vector<std::vector<double>>& feats_b) {
    const int64_t n = static_cast<int64_t>(feats_a.size());
    const int64_t m = static_cast<int64_t>(feats_b.size());
    if (n < 2 || m < 2) throw MetricError("frechet_distance: need at least 2 samples per set");
    const int64_t d = static_cast<int64_t>(feats_a[0].size());
    for (const auto& f : feats_a)
        if (static_cast<int64_t>(f.size()) != d)
            throw MetricError("frechet_distance: inconsistent feature dim");
    for (const auto& f : feats_b)
        if (static_cast<int64_t>(f.size()) != d)
            throw MetricError("frechet_distance: feature dim mismatch between sets");

    auto moments = [d](const std::vector<std::vector<double>>& feats, std::vector<double>& mu,
                       std::vector<double>& cov) {
        const int64_t nn = static_cast<int64_t>(feats.size());
        mu.assign(d, 0.0);
        for (const auto& f : feats)
            for (int64_t i = 0; i < d; ++i) mu[i] += f[i];
        for (auto& x : mu) x /= nn;
        cov.assign(d * d, 0.0);
        for (const auto& f : feats)
            for (int64_t i = 0; i < d; ++i) {
                const double di = f[i] - mu[i];
                for (int64_t j = 0; j < d; ++j) cov[i * d + j] += di * (f[j] - mu[j]);
            }
        for (auto& x : cov) x /= (nn - 1);
        for (int64_t i = 0; i < d; ++i) cov[i * d + i] += 1e-6;
    };

    std::vector<double> mu_a, cov_a, mu_b, cov_b;
    moments(feats_a, mu_a, cov_a);
    moments(feats_b, mu_b, cov_b);

    double mean_term = 0, tr_a = 0, tr_b = 0;
    for (int64_t i = 0; i < d; ++i) {
        const double dm = mu_a[i] - mu_b[i];
        mean_term += dm * dm;
        tr_a += cov_a[i * d + i];
        tr_b += cov_b[i * d + i];
    }

    // Tr sqrt(Sa^(1/2) Sb Sa^(1/2)) via symmetric eigendecomposition
    std::vector<double> eig, v;
    jacobi_eigh(cov_a, d, eig, v);
    auto sqrt_a = eig_rebuild(v, eig, d, &sqrt_clamped);
    auto inner = matmul_sq(matmul_sq(sqrt_a, cov_b, d), sqrt_a, d);
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = i + 1; j < d; ++j) {
            const double s = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = s;
            inner[j * d + i] = s;
        }
    jacobi_eigh(inner, d, eig, v);
    double tr_sqrt = 0;
    for (double e : eig) tr_sqrt += sqrt_clamped(e);

    return std::max(0.0, mean_term + tr_a + tr_b - 2.0 * tr_sqrt);
}

double inception_from_posteriors(const std::vector<std::vector<double>>& posteriors) {
    const int64_t n = static_cast<int64_t>(posteriors.size());
    if (n == 0) throw MetricError("inception: empty set");
    const int64_t k = static_cast<int64_t>(posteriors[0].size());
    std::vector<double> marginal(k, 0.0);
    for (const auto& p : posteriors)
        for (int64_t i = 0; i < k; ++i) marginal[i] += p[i];
    for (auto& x : marginal) x = std::max(x / n, 1e-12);
    double mean_kl = 0;
    for (const auto& p : posteriors) {
        double kl = 0;
        for (int64_t i = 0; i < k; ++i)
            if (p[i] > 0) kl += p[i] * std::log(p[i] / marginal[i]);
        mean_kl += kl;
    }
    mean_kl = std::max(mean_kl / n, 0.0);
    return std::exp(mean_kl);
}

double kl_paired_from_posteriors(const std::vector<std::vector<double>>& ref,
                                 const std::vector<std::vector<double>>& gen) {
    if (ref.size() != gen.size()) throw MetricError("kl_paired: count mismatch");
    if (ref.empty()) throw MetricError("kl_paired: empty sets");
    double acc = 0;
    for (size_t i = 0; i < ref.size(); ++i) {
        const auto& p = ref[i];
        const auto& q = gen[i];
        if (p.size() != q.size()) throw MetricError("kl_paired: posterior dim mismatch");
        double kl = 0;
        for (size_t y = 0; y < p.size(); ++y) {
            const double py = std::max(p[y], 1e-8);
            const double qy = std::max(q[y], 1e-8);
            kl += py * std::log(py / qy);
        }
        acc += kl;
    }
    return acc / ref.size();
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw MetricError("cosine: dim mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0 || nb <= 0) throw MetricError("cosine: zero-norm feature");
    return dot / std::sqrt(na * nb);
}

double desync_analog(const std::vector<float>& clip, int64_t frames, int64_t channels,
                     const std::vector<float>& true_envelope) {
    if (static_cast<int64_t>(true_envelope.size()) != frames)
        throw MetricError("desync: envelope length mismatch");
    std::vector<double> e(frames, 0.0), r(frames);
    for (int64_t t = 0; t < frames; ++t) {
        for (int64_t c = 0; c < channels; ++c) {
            const double x = clip[t * channels + c];
            e[t] += x * x;
        }
        r[t] = true_envelope[t];
    }
    auto center = [frames](std::vector<double>& x) {
        double mean = 0;
        for (double v : x) mean += v;
        mean /= frames;
        double var = 0;
        for (auto& v : x) {
            v -= mean;
            var += v * v;
        }
        return var;
    };
    if (center(e) < 1e-18) throw MetricError("desync: clip energy envelope is constant");
    if (center(r) < 1e-18) throw MetricError("desync: reference envelope is constant");

    const int64_t half = frames / 2;
    double best = -1e300;
    int64_t best_lag = 0;
    for (int64_t lag = -half; lag <= half; ++lag) {
        double corr = 0;
        for (int64_t t = 0; t < frames; ++t)
            corr += e[((t + lag) % frames + frames) % frames] * r[t];
        if (corr > best) {
            best = corr;
            best_lag = lag;
        }
    }
    return static_cast<double>(std::abs(best_lag));
}

double si_snr(const std::vector<float>& estimate, const std::vector<float>& target) {
    if (estimate.size() != target.size()) throw MetricError("si_snr: size mismatch");
    double dot = 0, tt = 0;
    for (size_t i = 0; i < target.size(); ++i) {
        dot += static_cast<double>(estimate[i]) * target[i];
        tt += static_cast<double>(target[i]) * target[i];
    }
    if (tt <= 0) throw MetricError("si_snr: zero target");
    const double a = dot / tt;
    double sig = 0, err = 0;
    for (size_t i = 0; i < target.size(); ++i) {
        const double s = a * target[i];
        const double e = estimate[i] - s;
        sig += s * s;
        err += e * e;
    }
    if (err <= 0) return 60.0;
    if (sig <= 0) return -60.0;
    return std::clamp(10.0 * std::log10(sig / err), -60.0, 60.0);
}

double inception_analog(const ProbeModel& probe, const std::vector<std::vector<float>>& clips) {
    std::vector<std::vector<double>> posteriors;
    posteriors.reserve(clips.size());
    for (const auto& c : clips) posteriors.push_back(probe.posterior(c));
    return inception_from_posteriors(posteriors);
}

double kl_paired(const ProbeModel& probe, const std::vector<std::vector<float>>& generated,
                 const std::vector<std::vector<float>>& reference) {
    if (generated.size() != reference.size()) throw MetricError("kl_paired: count mismatch");
    std::vector<std::vector<double>> pg, pr;
    for (const auto& c : generated) pg.push_back(probe.posterior(c));
    for (const auto& c : reference) pr.push_back(probe.posterior(c));
    return kl_paired_from_posteriors(pr, pg);
}

std::pair<double, double> alignment_scores(const ProbeModel& probe, const std::vector<float>& clip,
                                           int64_t query_class, const std::vector<float>& target) {
    const auto f = probe.features(clip);
    std::vector<double> proto(probe.hidden_dim);
    for (int64_t i = 0; i < probe.hidden_dim; ++i)
        proto[i] = probe.prototypes[query_class * probe.hidden_dim + i];
    const double at = cosine_similarity(f, proto);
    const double aa = cosine_similarity(f, probe.features(target));
    return {at, aa};
}

nlohmann::json MetricReport::to_json() const {
    return {{"fd", fd},
            {"is_analog", is_analog},
            {"align_text", align_text},
            {"align_audio", align_audio},
            {"desync", desync},
            {"si_snr_db", si_snr_db},
            {"kl_paired", kl_paired},
            {"n", n}};
}

MetricReport compute_report(const ProbeModel& probe, const std::vector<std::vector<float>>& clips,
                            const EvalSet& set) {
    const int64_t n = static_cast<int64_t>(clips.size());
    if (n != static_cast<int64_t>(set.pairs.size()))
        throw MetricError("compute_report: clip count does not match eval set");
    if (n < 2) throw MetricError("compute_report: need at least 2 items");
    const int64_t T = set.world.audio_frames, C = set.world.latent_channels;

    std::vector<std::vector<double>> feats_out(n), feats_tgt(n), post_out(n), post_tgt(n);
    for (int64_t i = 0; i < n; ++i) {
        feats_out[i] = probe.features(clips[i]);
        feats_tgt[i] = probe.features(set.pairs[i].sample.target.latents);
        post_out[i] = probe.posterior(clips[i]);
        post_tgt[i] = probe.posterior(set.pairs[i].sample.target.latents);
    }

    MetricReport rep;
    rep.n = n;
    rep.fd = frechet_distance(feats_out, feats_tgt);
    rep.is_analog = inception_from_posteriors(post_out);
    rep.kl_paired = kl_paired_from_posteriors(post_tgt, post_out);
    double at = 0, aa = 0, de = 0, snr = 0;
    for (int64_t i = 0; i < n; ++i) {
        const auto& pair = set.pairs[i];
        std::vector<double> proto(probe.hidden_dim);
        for (int64_t j = 0; j < probe.hidden_dim; ++j)
            proto[j] = probe.prototypes[pair.sample.target.class_id * probe.hidden_dim + j];
        at += cosine_similarity(feats_out[i], proto);
        aa += cosine_similarity(feats_out[i], feats_tgt[i]);
        de += desync_analog(clips[i], T, C, pair.sample.target.envelope);
        snr += si_snr(clips[i], pair.sample.target.latents);
    }
    rep.align_text = at / n;
    rep.align_audio = aa / n;
    rep.desync = de / n;
    rep.si_snr_db = snr / n;
    return rep;
}

EvalResult evaluate(const Checkpoint& ck, const EvalSet& set, const ProbeModel& probe,
                    const SamplerConfig& sampler, const EvalOptions& opts) {
    if (probe.heldout_accuracy < 0.95)
        throw MetricError("probe held-out accuracy " + std::to_string(probe.heldout_accuracy) +
                          " below 0.95; evaluation void");
    const EvalSet* input = &set;
    EvalSet shuffled;
    if (opts.shuffle_conds) {
        shuffled = shuffle_conditions(set);
        input = &shuffled;
    }
    std::vector<std::vector<float>> outputs =
        opts.mode == EvalMode::separation
            ? separate(ck, *input, opts.query, sampler)
            : generate_v2a(ck, *input, opts.query, sampler, opts.sub);

    EvalResult res;
    res.model = compute_report(probe, outputs, set);
    std::vector<std::vector<float>> mixtures;
    mixtures.reserve(set.pairs.size());
    for (const auto& p : set.pairs) mixtures.push_back(p.sample.mixture);
    res.mixture = compute_report(probe, mixtures, set);
    return res;
}

nlohmann::json eval_result_to_json(const EvalResult& result, const std::string& mode,
                                   const SamplerConfig& sampler) {
    nlohmann::json j = result.model.to_json();
    j["v"] = 1;
    j["mode"] = mode;
    j["sampler"] = {{"steps", sampler.steps},
                    {"guidance_scale", sampler.guidance_scale},
                    {"seed", sampler.seed}};
    j["mixture"] = result.mixture.to_json();
    return j;
}

}  // namespace cfmsep

#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfmsep/synthworld.hpp"
#include "cfmsep/trainer.hpp"

namespace cfmsep {

class MetricError : public std::runtime_error {
public:
    explicit MetricError(const std::string& msg) : std::runtime_error(msg) {}
};

// Small fixed-seed classifier over clean clips; its hidden activations are the
// feature map behind FD / alignment and its posteriors drive IS / KL.
struct ProbeModel {
    WorldConfig world;
    int64_t input_dim = 0;
    int64_t hidden_dim = 32;
    int64_t num_classes = 0;
    std::vector<float> fc1_w, fc1_b;   // [in x hid], [hid]
    std::vector<float> fc2_w, fc2_b;   // [hid x K], [K]
    std::vector<float> prototypes;     // [K x hid] mean clean-clip features
    double heldout_accuracy = 0;

    std::vector<double> features(const std::vector<float>& latents) const;
    std::vector<double> posterior(const std::vector<float>& latents) const;
    int64_t predict(const std::vector<float>& latents) const;
};

ProbeModel train_probe(const World& world, const std::vector<LatentClip>& train_clips,
                       const std::vector<LatentClip>& holdout_clips, uint64_t seed,
                       int64_t hidden_dim = 32);

void save_probe(const std::filesystem::path& path, const ProbeModel& probe);
ProbeModel load_probe(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// metrics (plain double math, no tape)
// ---------------------------------------------------------------------------

// Wasserstein-2 between Gaussian fits of two feature sets [n x d] / [m x d].
double frechet_distance(const std::vector<std::vector<double>>& feats_a,
                        const std::vector<std::vector<double>>& feats_b);

double inception_from_posteriors(const std::vector<std::vector<double>>& posteriors);
double kl_paired_from_posteriors(const std::vector<std::vector<double>>& ref,
                                 const std::vector<std::vector<double>>& gen);

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

// |argmax circular cross-correlation lag| between the clip's energy envelope
// and the true event envelope, lags in [-T/2, T/2], both mean-centered.
double desync_analog(const std::vector<float>& clip, int64_t frames, int64_t channels,
                     const std::vector<float>& true_envelope);

// Scale-invariant SNR in dB, capped at +60 (and floored at -60 to stay finite).
double si_snr(const std::vector<float>& estimate, const std::vector<float>& target);

double inception_analog(const ProbeModel& probe, const std::vector<std::vector<float>>& clips);
double kl_paired(const ProbeModel& probe, const std::vector<std::vector<float>>& generated,
                 const std::vector<std::vector<float>>& reference);
std::pair<double, double> alignment_scores(const ProbeModel& probe, const std::vector<float>& clip,
                                           int64_t query_class, const std::vector<float>& target);

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct MetricReport {
    double fd = 0;
    double is_analog = 1;
    double align_text = 0;
    double align_audio = 0;
    double desync = 0;
    double si_snr_db = 0;
    double kl_paired = 0;
    int64_t n = 0;

    nlohmann::json to_json() const;
};

enum class EvalMode { separation, v2a };

struct EvalOptions {
    EvalMode mode = EvalMode::separation;
    QueryMode query = QueryMode::text_video;
    MixtureSub sub = MixtureSub::white_noise;
    bool shuffle_conds = false;
};

struct EvalResult {
    MetricReport model;
    MetricReport mixture;  // Table-style "Mixture" baseline row
};

// All metrics for a batch of output clips, judged against the eval set's
// ground truth.
MetricReport compute_report(const ProbeModel& probe, const std::vector<std::vector<float>>& clips,
                            const EvalSet& set);

EvalResult evaluate(const Checkpoint& ck, const EvalSet& set, const ProbeModel& probe,
                    const SamplerConfig& sampler, const EvalOptions& opts);

nlohmann::json eval_result_to_json(const EvalResult& result, const std::string& mode,
                                   const SamplerConfig& sampler);

}  // namespace cfmsep

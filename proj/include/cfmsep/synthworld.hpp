#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cfmsep/rng.hpp"

namespace cfmsep {

class WorldError : public std::runtime_error {
public:
    explicit WorldError(const std::string& msg) : std::runtime_error(msg) {}
};

// Interferer had no energy; caller may resample.
class ZeroEnergyError : public WorldError {
public:
    explicit ZeroEnergyError(const std::string& msg) : WorldError(msg) {}
};

struct WorldConfig {
    int64_t num_classes = 8;
    int64_t audio_frames = 32;    // T_a
    int64_t latent_channels = 8;  // C
    int64_t video_tokens = 8;
    int64_t video_dim = 16;
    int64_t sync_tokens = 16;
    int64_t sync_dim = 12;
    int64_t text_tokens = 4;
    int64_t text_dim = 16;
    double noise_latent = 0.20;
    double noise_video = 0.30;
    double noise_sync = 0.10;
    double latent_power = 5.0;  // mean square of the clean per-frame pattern
    uint64_t seed = 1234;

    void validate() const;
};

// One clean audio-latent clip: the separation target x1.
struct LatentClip {
    std::vector<float> latents;   // [T_a x C], row-major
    std::vector<float> envelope;  // [T_a] in [0, 1]
    int64_t class_id = 0;
};

// Query-side condition streams plus CFG drop flags.
struct ConditionBundle {
    std::vector<float> video_tokens;  // [T_v x d_v]
    std::vector<float> sync_tokens;   // [T_s x d_s]
    std::vector<float> text_tokens;   // [L x d_t]
    bool drop_video = false;
    bool drop_text = false;
};

struct MixtureSample {
    std::vector<float> mixture;  // [T_a x C], x_m
    LatentClip target;
    int64_t interferer_class = -1;
    float snr_db = 0.f;
};

struct TrainItem {
    MixtureSample sample;
    ConditionBundle cond;  // the target's conditions
};

// Per-class generation assets derived deterministically from the world seed.
struct ClassSignature {
    std::vector<float> mix;     // [C x r] channel mixing
    std::vector<double> phase;  // [r]
};

struct World {
    WorldConfig cfg;
    std::vector<ClassSignature> classes;
    std::vector<std::vector<float>> video_embed;  // K unit vectors in d_v
    std::vector<std::vector<float>> text_embed;   // K unit vectors in d_t
    std::vector<float> sync_dir;                  // unit vector in d_s

    static World make(const WorldConfig& cfg);
    static constexpr int kSignatureRank = 3;
};

std::pair<LatentClip, ConditionBundle> make_clip(const World& world, int64_t class_id,
                                                 uint64_t stream_index);

// g = rms(target) / (rms(interferer) * 10^(snr_db/20)); mixture = target + g * interferer.
double mix_gain(const std::vector<float>& target, const std::vector<float>& interferer,
                double snr_db);
std::vector<float> mix(const std::vector<float>& target, const std::vector<float>& interferer,
                       double snr_db);

std::vector<TrainItem> sample_training_batch(const World& world, int64_t batch,
                                             uint64_t step_index, double snr_lo = -15.0,
                                             double snr_hi = 15.0);

struct EvalPair {
    MixtureSample sample;
    ConditionBundle cond;
};

struct EvalSet {
    WorldConfig world;
    std::vector<EvalPair> pairs;
};

// Fixed eval set at 0 dB SNR, eval-set binary format ("CFMSEPDS").
void export_eval_set(const World& world, int64_t n_pairs, const std::filesystem::path& path);
EvalSet import_eval_set(const std::filesystem::path& path);

// Labeled clean clips for probe training, same container format.
void export_clean_clips(const World& world, int64_t n_clips, const std::filesystem::path& path,
                        const char* stream_label = "probe");
std::vector<LatentClip> import_clean_clips(const std::filesystem::path& path);

nlohmann::json world_config_to_json(const WorldConfig& w);
WorldConfig world_config_from_json(const nlohmann::json& j);

}  // namespace cfmsep

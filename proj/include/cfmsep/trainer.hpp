#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cfmsep/flow.hpp"
#include "cfmsep/mmdit.hpp"
#include "cfmsep/synthworld.hpp"

namespace cfmsep {

class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

class MissingInitError : public ConfigError {
public:
    explicit MissingInitError(const std::string& msg) : ConfigError(msg) {}
};

enum class Phase { pretrain, finetune };
enum class QueryMode { text_video, text_only };
enum class MixtureSub { white_noise, zeros };

struct RunPaths {
    std::string eval_set;  // optional: enables in-training metric snapshots
    std::string probe;
};

struct RunConfig {
    Phase phase = Phase::pretrain;
    std::string train_config = "scratch";  // finetune: scratch | pretrain_all | pretrain_frozen
    int64_t steps = 4000;
    int64_t batch = 32;
    int64_t eval_every = 1000;
    uint64_t seed = 1234;
    WorldConfig world;
    int64_t hidden = 64, heads = 4, n_joint = 2, n_audio = 2, time_embed_dim = 64;
    SamplerConfig sampler;
    OptimizerHyper opt;
    std::string init_checkpoint;
    RunPaths paths;

    // pretrain is generation-only (1 channel); finetune concatenates the mixture
    ModelConfig model_config() const {
        return ModelConfig::from_world(world, phase == Phase::finetune ? 2 : 1, hidden, heads,
                                       n_joint, n_audio, time_embed_dim);
    }
};

// Aborts when the loss exceeds 10x its step-100 value.
class DivergenceGuard {
public:
    explicit DivergenceGuard(double factor = 10.0, int64_t baseline_step = 100)
        : factor_(factor), baseline_step_(baseline_step) {}

    void record(int64_t step, double loss) {
        if (step == baseline_step_) baseline_ = loss;
        if (baseline_ > 0 && step > baseline_step_ && loss > factor_ * baseline_)
            throw DivergenceError("loss " + std::to_string(loss) + " at step " +
                                  std::to_string(step) + " exceeds " + std::to_string(factor_) +
                                  "x step-" + std::to_string(baseline_step_) + " value " +
                                  std::to_string(baseline_));
    }

private:
    double factor_;
    int64_t baseline_step_;
    double baseline_ = -1;
};

// Append-only line-delimited JSON log.
class TrainLog {
public:
    explicit TrainLog(const std::filesystem::path& path) : out_(path, std::ios::app) {
        if (!out_) throw IoError("cannot open train log: " + path.string());
    }
    void line(const nlohmann::json& j) {
        out_ << j.dump() << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

struct TrainResult {
    std::filesystem::path final_checkpoint;
    double first_loss = 0;
    double last_loss = 0;
};

TrainResult pretrain(const RunConfig& run, const std::filesystem::path& out_dir);
TrainResult finetune(const RunConfig& run, const std::filesystem::path& out_dir);

// Query-conditioned separation over an eval set; one output latent per pair.
std::vector<std::vector<float>> separate(const Checkpoint& ck, const EvalSet& set,
                                         QueryMode query, const SamplerConfig& sampler);

// V2A retention probe: the mixture channel is replaced by the chosen
// substitute and sampling proceeds exactly as in separate.
std::vector<std::vector<float>> generate_v2a(const Checkpoint& ck, const EvalSet& set,
                                             QueryMode query, const SamplerConfig& sampler,
                                             MixtureSub sub);

// Reassign every pair the conditions of another pair with a different class.
EvalSet shuffle_conditions(const EvalSet& set);

}  // namespace cfmsep

#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "cfmsep/flow.hpp"
#include "cfmsep/params.hpp"
#include "cfmsep/synthworld.hpp"

namespace cfmsep {

// The single JSON config behind every CLI command. Every field has a default;
// unknown keys are rejected; CLI flags override file values and CFMSEP_SEED
// overrides the file's seed from below the flags.
struct CliConfig {
    uint64_t seed = 1234;
    WorldConfig world;
    int64_t hidden = 64, heads = 4, n_joint = 2, n_audio = 2, time_embed_dim = 64;
    int64_t pretrain_steps = 4000, finetune_steps = 2000, batch = 32, eval_every = 1000;
    std::string train_config = "pretrain_frozen";
    OptimizerHyper opt;
    std::string init_checkpoint;
    SamplerConfig sampler;
    std::string eval_set_path, probe_path;
};

CliConfig load_cli_config(const std::optional<std::filesystem::path>& file);

// Fully-resolved echo; a command is reproducible from this object alone.
nlohmann::json cli_config_to_json(const CliConfig& c);

}  // namespace cfmsep

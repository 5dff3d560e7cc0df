#include "cfmsep/config.hpp"

#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <set>

#include "cfmsep/io.hpp"

namespace cfmsep {

namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                const std::string& section) {
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!ok.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in config section '" + section +
                              "'");
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

CliConfig load_cli_config(const std::optional<std::filesystem::path>& file) {
    CliConfig c;
    bool world_seed_set = false, sampler_seed_set = false;

    if (file) {
        std::ifstream in(*file);
        if (!in) throw ConfigError("cannot open config file: " + file->string());
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config parse error in " + file->string() + ": " + e.what());
        }
        check_keys(j, {"seed", "world", "model", "run", "sampler", "paths"}, "<top level>");
        maybe(j, "seed", c.seed);

        if (j.contains("world")) {
            const auto& w = j.at("world");
            check_keys(w,
                       {"num_classes", "audio_frames", "latent_channels", "video_tokens",
                        "video_dim", "sync_tokens", "sync_dim", "text_tokens", "text_dim",
                        "noise_latent", "noise_video", "noise_sync", "latent_power", "seed"},
                       "world");
            maybe(w, "num_classes", c.world.num_classes);
            maybe(w, "audio_frames", c.world.audio_frames);
            maybe(w, "latent_channels", c.world.latent_channels);
            maybe(w, "video_tokens", c.world.video_tokens);
            maybe(w, "video_dim", c.world.video_dim);
            maybe(w, "sync_tokens", c.world.sync_tokens);
            maybe(w, "sync_dim", c.world.sync_dim);
            maybe(w, "text_tokens", c.world.text_tokens);
            maybe(w, "text_dim", c.world.text_dim);
            maybe(w, "noise_latent", c.world.noise_latent);
            maybe(w, "noise_video", c.world.noise_video);
            maybe(w, "noise_sync", c.world.noise_sync);
            maybe(w, "latent_power", c.world.latent_power);
            if (w.contains("seed")) {
                c.world.seed = w.at("seed").get<uint64_t>();
                world_seed_set = true;
            }
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            check_keys(m, {"hidden", "heads", "n_joint", "n_audio", "time_embed_dim"}, "model");
            maybe(m, "hidden", c.hidden);
            maybe(m, "heads", c.heads);
            maybe(m, "n_joint", c.n_joint);
            maybe(m, "n_audio", c.n_audio);
            maybe(m, "time_embed_dim", c.time_embed_dim);
        }
        if (j.contains("run")) {
            const auto& r = j.at("run");
            check_keys(r,
                       {"pretrain_steps", "finetune_steps", "batch", "eval_every", "train_config",
                        "lr", "beta1", "beta2", "eps", "weight_decay", "warmup_steps",
                        "init_checkpoint"},
                       "run");
            maybe(r, "pretrain_steps", c.pretrain_steps);
            maybe(r, "finetune_steps", c.finetune_steps);
            maybe(r, "batch", c.batch);
            maybe(r, "eval_every", c.eval_every);
            maybe(r, "train_config", c.train_config);
            maybe(r, "lr", c.opt.lr);
            maybe(r, "beta1", c.opt.beta1);
            maybe(r, "beta2", c.opt.beta2);
            maybe(r, "eps", c.opt.eps);
            maybe(r, "weight_decay", c.opt.weight_decay);
            maybe(r, "warmup_steps", c.opt.warmup_steps);
            maybe(r, "init_checkpoint", c.init_checkpoint);
        }
        if (j.contains("sampler")) {
            const auto& s = j.at("sampler");
            check_keys(s, {"steps", "guidance_scale", "seed"}, "sampler");
            maybe(s, "steps", c.sampler.steps);
            maybe(s, "guidance_scale", c.sampler.guidance_scale);
            if (s.contains("seed")) {
                c.sampler.seed = s.at("seed").get<uint64_t>();
                sampler_seed_set = true;
            }
        }
        if (j.contains("paths")) {
            const auto& p = j.at("paths");
            check_keys(p, {"eval_set", "probe"}, "paths");
            maybe(p, "eval_set", c.eval_set_path);
            maybe(p, "probe", c.probe_path);
        }
    }

    if (const char* env = std::getenv("CFMSEP_SEED")) {
        try {
            c.seed = std::stoull(env);
        } catch (...) {
            throw ConfigError("CFMSEP_SEED is not an integer: " + std::string(env));
        }
        world_seed_set = false;
        sampler_seed_set = false;
    }
    if (!world_seed_set) c.world.seed = c.seed;
    if (!sampler_seed_set) c.sampler.seed = c.seed;
    return c;
}

nlohmann::json cli_config_to_json(const CliConfig& c) {
    return {{"seed", c.seed},
            {"world", world_config_to_json(c.world)},
            {"model",
             {{"hidden", c.hidden},
              {"heads", c.heads},
              {"n_joint", c.n_joint},
              {"n_audio", c.n_audio},
              {"time_embed_dim", c.time_embed_dim}}},
            {"run",
             {{"pretrain_steps", c.pretrain_steps},
              {"finetune_steps", c.finetune_steps},
              {"batch", c.batch},
              {"eval_every", c.eval_every},
              {"train_config", c.train_config},
              {"lr", c.opt.lr},
              {"beta1", c.opt.beta1},
              {"beta2", c.opt.beta2},
              {"eps", c.opt.eps},
              {"weight_decay", c.opt.weight_decay},
              {"warmup_steps", c.opt.warmup_steps},
              {"init_checkpoint", c.init_checkpoint}}},
            {"sampler",
             {{"steps", c.sampler.steps},
              {"guidance_scale", c.sampler.guidance_scale},
              {"seed", c.sampler.seed}}},
            {"paths", {{"eval_set", c.eval_set_path}, {"probe", c.probe_path}}}};
}

}  // namespace cfmsep

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cfmsep/config.hpp"
#include "cfmsep/evalsuite.hpp"
#include "cfmsep/io.hpp"
#include "cfmsep/trainer.hpp"

namespace fs = std::filesystem;
using namespace cfmsep;

namespace {

// stable exit codes: 0 ok, 2 divergence, 3 config, 4 missing --init,
// 5 metric-suite failure, 6 grad-check failure
constexpr int kExitDivergence = 2;
constexpr int kExitConfig = 3;
constexpr int kExitMissingInit = 4;
constexpr int kExitMetric = 5;
constexpr int kExitGradCheck = 6;

constexpr int64_t kProbeTrainClips = 640;
constexpr int64_t kProbeHoldoutClips = 160;

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void write_resolved(const fs::path& out_dir, const CliConfig& cfg,
                    const nlohmann::json& command) {
    fs::create_directories(out_dir);
    nlohmann::json j = cli_config_to_json(cfg);
    j["command"] = command;
    write_json(out_dir / "resolved.json", j);
}

uint64_t env_seed_or(uint64_t fallback) {
    if (const char* env = std::getenv("CFMSEP_SEED")) return std::stoull(env);
    return fallback;
}

RunConfig run_config_from(const CliConfig& c, Phase phase) {
    RunConfig run;
    run.phase = phase;
    run.train_config = c.train_config;
    run.steps = phase == Phase::pretrain ? c.pretrain_steps : c.finetune_steps;
    run.batch = c.batch;
    run.eval_every = c.eval_every;
    run.seed = c.seed;
    run.world = c.world;
    run.hidden = c.hidden;
    run.heads = c.heads;
    run.n_joint = c.n_joint;
    run.n_audio = c.n_audio;
    run.time_embed_dim = c.time_embed_dim;
    run.sampler = c.sampler;
    run.opt = c.opt;
    run.init_checkpoint = c.init_checkpoint;
    run.paths.eval_set = c.eval_set_path;
    run.paths.probe = c.probe_path;
    return run;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir, int64_t pairs) {
    CliConfig cfg = load_cli_config(config_path.empty()
                                        ? std::nullopt
                                        : std::optional<fs::path>(config_path));
    write_resolved(out_dir, cfg, {{"name", "gen-data"}, {"pairs", pairs}});
    World world = World::make(cfg.world);

    const fs::path eval_path = fs::path(out_dir) / "eval_set.bin";
    export_eval_set(world, pairs, eval_path);

    const fs::path clips_path = fs::path(out_dir) / "probe_clips.bin";
    export_clean_clips(world, kProbeTrainClips + kProbeHoldoutClips, clips_path);
    auto clips = import_clean_clips(clips_path);
    std::vector<LatentClip> train(clips.begin(), clips.begin() + kProbeTrainClips);
    std::vector<LatentClip> holdout(clips.begin() + kProbeTrainClips, clips.end());

    ProbeModel probe = train_probe(world, train, holdout, cfg.seed);
    if (probe.heldout_accuracy < 0.95)
        throw MetricError("probe held-out accuracy " + std::to_string(probe.heldout_accuracy) +
                          " below 0.95");
    save_probe(fs::path(out_dir) / "probe.ckpt", probe);

    std::cout << "eval pairs: " << pairs << " (snr 0 dB)\n"
              << "probe clips: " << kProbeTrainClips << " train + " << kProbeHoldoutClips
              << " holdout\n"
              << "probe held-out accuracy: " << probe.heldout_accuracy << "\n";
    return 0;
}

int cmd_train(Phase phase, const std::string& config_path, const std::string& out_dir,
              const std::string& init_flag, const std::string& train_config_flag) {
    CliConfig cfg = load_cli_config(config_path.empty()
                                        ? std::nullopt
                                        : std::optional<fs::path>(config_path));
    if (!init_flag.empty()) cfg.init_checkpoint = init_flag;
    if (!train_config_flag.empty()) cfg.train_config = train_config_flag;

    if (phase == Phase::finetune) {
        if (cfg.train_config != "scratch" && cfg.train_config != "pretrain_all" &&
            cfg.train_config != "pretrain_frozen")
            throw ConfigError("unknown --train-config '" + cfg.train_config + "'");
        if (cfg.train_config != "scratch" && cfg.init_checkpoint.empty())
            throw MissingInitError("--init checkpoint is required for train config '" +
                                   cfg.train_config + "'");
    }

    write_resolved(out_dir, cfg,
                   {{"name", phase == Phase::pretrain ? "pretrain" : "finetune"},
                    {"train_config", cfg.train_config},
                    {"init", cfg.init_checkpoint}});
    RunConfig run = run_config_from(cfg, phase);
    TrainResult res = phase == Phase::pretrain ? pretrain(run, out_dir) : finetune(run, out_dir);
    std::cout << "final checkpoint: " << res.final_checkpoint.string() << "\n"
              << "hash: " << file_hash_hex(res.final_checkpoint) << "\n";
    return 0;
}

int cmd_sample(bool is_generate, const std::string& ckpt_path, const std::string& eval_set_path,
               const std::string& out_dir, const std::string& query_flag,
               const std::string& mixture_sub_flag, int64_t steps, double cfg_scale) {
    if (!is_generate && !mixture_sub_flag.empty())
        throw ConfigError("--mixture-sub is only usable with the generate command");
    QueryMode query;
    if (query_flag == "text") query = QueryMode::text_only;
    else if (query_flag == "text+video") query = QueryMode::text_video;
    else throw ConfigError("unknown --query '" + query_flag + "' (text | text+video)");

    MixtureSub sub = MixtureSub::white_noise;
    if (is_generate && !mixture_sub_flag.empty()) {
        if (mixture_sub_flag == "white_noise") sub = MixtureSub::white_noise;
        else if (mixture_sub_flag == "zeros") sub = MixtureSub::zeros;
        else
            throw ConfigError("unknown --mixture-sub '" + mixture_sub_flag +
                              "' (white_noise | zeros)");
    }

    SamplerConfig sampler;
    sampler.steps = steps;
    sampler.guidance_scale = cfg_scale;
    sampler.seed = env_seed_or(sampler.seed);
    sampler.validate();

    Checkpoint ck = load_checkpoint(ckpt_path);
    EvalSet set = import_eval_set(eval_set_path);
    auto outputs = is_generate ? generate_v2a(ck, set, query, sampler, sub)
                               : separate(ck, set, query, sampler);

    fs::create_directories(out_dir);
    std::vector<NamedTensor> tensors;
    for (size_t i = 0; i < outputs.size(); ++i)
        tensors.push_back({"item" + std::to_string(i) + ".output",
                           {ck.model.audio_frames, ck.model.latent_channels}, outputs[i]});
    nlohmann::json meta = {{"kind", "outputs"},
                           {"world", world_config_to_json(set.world)},
                           {"items", outputs.size()}};
    const fs::path out_bin = fs::path(out_dir) / "outputs.bin";
    write_container(out_bin, "CFMSEPDS", 1, meta, tensors);

    nlohmann::json manifest = {{"command", is_generate ? "generate" : "separate"},
                               {"ckpt", ckpt_path},
                               {"ckpt_hash", file_hash_hex(ckpt_path)},
                               {"eval_set", eval_set_path},
                               {"query", query_flag},
                               {"steps", sampler.steps},
                               {"cfg", sampler.guidance_scale},
                               {"seed", sampler.seed},
                               {"n", outputs.size()}};
    if (is_generate)
        manifest["mixture_sub"] = sub == MixtureSub::white_noise ? "white_noise" : "zeros";
    write_json(fs::path(out_dir) / "manifest.json", manifest);
    write_json(fs::path(out_dir) / "resolved.json", manifest);
    std::cout << "wrote " << outputs.size() << " output latents to " << out_bin.string() << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& eval_set_path,
             const std::string& mode, const std::string& out_path, std::string probe_path) {
    if (mode != "separation" && mode != "v2a")
        throw ConfigError("unknown --mode '" + mode + "' (separation | v2a)");
    if (probe_path.empty())
        probe_path = (fs::path(eval_set_path).parent_path() / "probe.ckpt").string();

    SamplerConfig sampler;
    sampler.seed = env_seed_or(sampler.seed);
    Checkpoint ck = load_checkpoint(ckpt_path);
    EvalSet set = import_eval_set(eval_set_path);
    ProbeModel probe = load_probe(probe_path);

    EvalOptions opts;
    opts.mode = mode == "separation" ? EvalMode::separation : EvalMode::v2a;
    opts.query = QueryMode::text_video;
    opts.sub = MixtureSub::white_noise;
    EvalResult result = evaluate(ck, set, probe, sampler, opts);

    nlohmann::json j = eval_result_to_json(result, mode, sampler);
    j["ckpt"] = ckpt_path;
    j["ckpt_hash"] = file_hash_hex(ckpt_path);
    j["eval_set"] = eval_set_path;
    const fs::path out(out_path);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_json(out, j);
    nlohmann::json resolved = {{"command", "eval"}, {"ckpt", ckpt_path},
                               {"eval_set", eval_set_path}, {"probe", probe_path},
                               {"mode", mode},   {"seed", sampler.seed}};
    write_json(out.has_parent_path() ? out.parent_path() / "resolved.json"
                                     : fs::path("resolved.json"),
               resolved);
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_grad_check(const std::string& config_path) {
    CliConfig cfg = load_cli_config(config_path.empty()
                                        ? std::nullopt
                                        : std::optional<fs::path>(config_path));
    World world = World::make(cfg.world);
    ModelConfig mc = ModelConfig::from_world(cfg.world, 2, cfg.hidden, cfg.heads, cfg.n_joint,
                                             cfg.n_audio, cfg.time_embed_dim);

    // 2-sample batch; one item fully conditioned, one with both modalities
    // dropped so the null embeddings are exercised
    auto items = sample_training_batch(world, 2, /*step_index=*/0);
    items[1].cond.drop_video = true;
    items[1].cond.drop_text = true;
    const int64_t T = mc.audio_frames, C = mc.latent_channels;
    std::vector<double> x1(2 * T * C), xm(2 * T * C);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i < T * C; ++i) {
            x1[b * T * C + i] = items[b].sample.target.latents[i];
            xm[b * T * C + i] = items[b].sample.mixture[i];
        }
    auto x1t = Tensor64::from_data({2, T, C}, std::move(x1));
    auto xmt = Tensor64::from_data({2, T, C}, std::move(xm));
    std::vector<const ConditionBundle*> conds = {&items[0].cond, &items[1].cond};
    auto cond = make_cond_batch<double>(mc, conds);

    auto params = init_params<double>(mc, cfg.seed);
    auto f = [&](ParamStoreT<double>& ps) {
        RngStream rng(cfg.seed, "gradcheck.flow");
        return cfm_loss<double>(mc, ps, x1t, std::optional<Tensor64>(xmt), cond,
                                CfmMode::separation, rng, DropoutPolicy{0.1, 0.05, false});
    };
    GradCheckReport report =
        grad_check<double>(f, params, 1e-5, 1e-4, /*sample_cap=*/4, cfg.seed);
    std::cout << "grad-check over " << report.entries.size()
              << " tensors, max rel err = " << report.max_err << " (tol " << report.tol << ")\n";
    for (const auto& e : report.entries)
        if (e.max_err >= report.tol)
            std::cout << "  FAIL " << e.name << ": " << e.max_err << "\n";
    std::cout << (report.pass ? "PASS" : "FAIL") << "\n";
    return report.pass ? 0 : kExitGradCheck;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"query-conditioned generative sound separation, desk scale"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt_path, eval_set_path, probe_path, out_path;
    std::string query = "text+video", mixture_sub, mode = "separation";
    std::string init_flag, train_config_flag;
    int64_t pairs = 256;
    int64_t steps = 25;
    double cfg_scale = 4.5;

    auto* gen = app.add_subcommand("gen-data", "generate eval set, probe clips and probe");
    gen->add_option("--config", config_path);
    gen->add_option("--out", out_dir)->required();
    gen->add_option("--pairs", pairs);

    auto* pre = app.add_subcommand("pretrain", "train the generation model on clean clips");
    pre->add_option("--config", config_path);
    pre->add_option("--out", out_dir)->required();

    auto* fin = app.add_subcommand("finetune", "fine-tune for separation");
    fin->add_option("--config", config_path);
    fin->add_option("--out", out_dir)->required();
    fin->add_option("--init", init_flag);
    fin->add_option("--train-config", train_config_flag);

    auto* sep = app.add_subcommand("separate", "separate an eval set with a checkpoint");
    sep->add_option("--ckpt", ckpt_path)->required();
    sep->add_option("--eval-set", eval_set_path)->required();
    sep->add_option("--out", out_dir)->required();
    sep->add_option("--query", query);
    sep->add_option("--mixture-sub", mixture_sub);
    sep->add_option("--steps", steps);
    sep->add_option("--cfg", cfg_scale);

    auto* genr = app.add_subcommand("generate", "V2A generation with a mixture substitute");
    genr->add_option("--ckpt", ckpt_path)->required();
    genr->add_option("--eval-set", eval_set_path)->required();
    genr->add_option("--out", out_dir)->required();
    genr->add_option("--query", query);
    genr->add_option("--mixture-sub", mixture_sub);
    genr->add_option("--steps", steps);
    genr->add_option("--cfg", cfg_scale);

    auto* ev = app.add_subcommand("eval", "run the metric suite over an eval set");
    ev->add_option("--ckpt", ckpt_path)->required();
    ev->add_option("--eval-set", eval_set_path)->required();
    ev->add_option("--mode", mode);
    ev->add_option("--out", out_path)->required();
    ev->add_option("--probe", probe_path);

    auto* gc = app.add_subcommand("grad-check", "finite-difference check of the full model");
    gc->add_option("--config", config_path);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_dir, pairs);
        if (pre->parsed()) return cmd_train(Phase::pretrain, config_path, out_dir, "", "");
        if (fin->parsed())
            return cmd_train(Phase::finetune, config_path, out_dir, init_flag, train_config_flag);
        if (sep->parsed())
            return cmd_sample(false, ckpt_path, eval_set_path, out_dir, query, mixture_sub, steps,
                              cfg_scale);
        if (genr->parsed())
            return cmd_sample(true, ckpt_path, eval_set_path, out_dir, query, mixture_sub, steps,
                              cfg_scale);
        if (ev->parsed()) return cmd_eval(ckpt_path, eval_set_path, mode, out_path, probe_path);
        if (gc->parsed()) return cmd_grad_check(config_path);
    } catch (const MissingInitError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissingInit;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const MetricError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMetric;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

#include "cfmsep/trainer.hpp"

#include <chrono>

#include "cfmsep/evalsuite.hpp"
#include "cfmsep/io.hpp"

namespace cfmsep {

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

Tensor latents_batch(const std::vector<const LatentClip*>& clips, int64_t T, int64_t C) {
    const int64_t B = static_cast<int64_t>(clips.size());
    std::vector<float> data(B * T * C);
    for (int64_t b = 0; b < B; ++b)
        std::copy(clips[b]->latents.begin(), clips[b]->latents.end(), data.begin() + b * T * C);
    return Tensor::from_data({B, T, C}, std::move(data));
}

struct StepContext {
    RunConfig run;
    ModelConfig cfg;
    World world;
    ParamStore params;
    OptimizerState opt;
    FreezeMask mask;
};

// Shared train loop: per-step batch assembly is the only difference between
// the two phases.
template <class MakeBatchFn>
TrainResult train_loop(StepContext& ctx, const std::filesystem::path& out_dir,
                       const std::string& final_name, const std::string& tag,
                       MakeBatchFn&& make_batch) {
    std::filesystem::create_directories(out_dir);
    TrainLog log(out_dir / "train_log.jsonl");
    DivergenceGuard guard;
    TrainResult result;

    const bool want_eval_snapshots =
        !ctx.run.paths.eval_set.empty() && !ctx.run.paths.probe.empty();

    const double t0 = now_ms();
    for (int64_t step = 0; step < ctx.run.steps; ++step) {
        Tensor loss = make_batch(step);
        backward(loss);
        adamw_step(ctx.params, ctx.opt, ctx.mask);

        const double lv = static_cast<double>(loss.item());
        if (step == 0) result.first_loss = lv;
        result.last_loss = lv;
        guard.record(step + 1, lv);

        const int64_t t = step + 1;
        const double warm = ctx.opt.hp.warmup_steps > 0
                                ? std::min(1.0, double(t) / ctx.opt.hp.warmup_steps)
                                : 1.0;
        log.line({{"step", t},
                  {"loss", lv},
                  {"lr_eff", ctx.opt.hp.lr * warm},
                  {"wall_ms", now_ms() - t0}});

        if (ctx.run.eval_every > 0 && t % ctx.run.eval_every == 0 && t < ctx.run.steps) {
            const auto path = out_dir / ("ckpt_" + std::to_string(t) + ".ckpt");
            save_checkpoint(path, ctx.cfg, ctx.run.world, tag, t, ctx.params);
            nlohmann::json line = {{"step", t},
                                   {"checkpoint", path.filename().string()},
                                   {"hash", file_hash_hex(path)}};
            if (want_eval_snapshots) {
                Checkpoint snap{ctx.cfg, ctx.run.world, tag, t, ctx.params.clone()};
                EvalSet set = import_eval_set(ctx.run.paths.eval_set);
                ProbeModel probe = load_probe(ctx.run.paths.probe);
                EvalOptions opts;
                opts.mode = ctx.cfg.cond_channels == 2 ? EvalMode::separation : EvalMode::v2a;
                if (ctx.cfg.cond_channels == 2) {
                    EvalResult r = evaluate(snap, set, probe, ctx.run.sampler, opts);
                    line["eval"] = r.model.to_json();
                }
            }
            log.line(line);
        }
    }

    result.final_checkpoint = out_dir / final_name;
    save_checkpoint(result.final_checkpoint, ctx.cfg, ctx.run.world, tag, ctx.run.steps,
                    ctx.params);
    log.line({{"step", ctx.run.steps},
              {"checkpoint", result.final_checkpoint.filename().string()},
              {"hash", file_hash_hex(result.final_checkpoint)}});
    return result;
}

}  // namespace

TrainResult pretrain(const RunConfig& run, const std::filesystem::path& out_dir) {
    if (run.phase != Phase::pretrain) throw ConfigError("pretrain: wrong phase in RunConfig");
    StepContext ctx{run, run.model_config(), World::make(run.world), {}, {}, {}};
    ctx.cfg.validate();
    ctx.params = init_params<float>(ctx.cfg, run.seed);
    ctx.opt.hp = run.opt;

    return train_loop(ctx, out_dir, "pretrain.ckpt", "pretrain", [&](int64_t step) {
        const int64_t B = ctx.run.batch;
        std::vector<std::pair<LatentClip, ConditionBundle>> clips;
        clips.reserve(B);
        for (int64_t i = 0; i < B; ++i) {
            const uint64_t idx = static_cast<uint64_t>(step) * B + i;
            RngStream pick(run.seed, "pretrain.class", idx);
            clips.push_back(make_clip(ctx.world, pick.uniform_int(run.world.num_classes), idx));
        }
        std::vector<const LatentClip*> lat;
        std::vector<const ConditionBundle*> conds;
        for (auto& [clip, cond] : clips) {
            lat.push_back(&clip);
            conds.push_back(&cond);
        }
        auto x1 = latents_batch(lat, ctx.cfg.audio_frames, ctx.cfg.latent_channels);
        auto cond = make_cond_batch<float>(ctx.cfg, conds);
        RngStream rng(run.seed, "pretrain.flow", static_cast<uint64_t>(step));
        return cfm_loss<float>(ctx.cfg, ctx.params, x1, std::nullopt, std::move(cond),
                               CfmMode::generation, rng, DropoutPolicy{});
    });
}

TrainResult finetune(const RunConfig& run, const std::filesystem::path& out_dir) {
    if (run.phase != Phase::finetune) throw ConfigError("finetune: wrong phase in RunConfig");
    StepContext ctx{run, run.model_config(), World::make(run.world), {}, {}, {}};
    ctx.cfg.validate();
    ctx.opt.hp = run.opt;

    if (run.train_config == "scratch") {
        ctx.params = init_params<float>(ctx.cfg, run.seed);
    } else if (run.train_config == "pretrain_all" || run.train_config == "pretrain_frozen") {
        if (run.init_checkpoint.empty())
            throw MissingInitError("finetune: --init checkpoint required for train config '" +
                                   run.train_config + "'");
        Checkpoint ck = load_checkpoint(run.init_checkpoint);
        if (ck.model.cond_channels != 1)
            throw ConfigError("finetune: init checkpoint must be a generation-only model");
        ctx.params = expand_in_proj(ck.params, ck.model, ctx.cfg);
    } else {
        throw ConfigError("finetune: unknown train config '" + run.train_config + "'");
    }

    ctx.mask = freeze_sets(run.train_config);
    ctx.mask.validate(ctx.params);
    ctx.mask.apply(ctx.params);

    std::filesystem::create_directories(out_dir);
    save_checkpoint(out_dir / "init.ckpt", ctx.cfg, run.world, run.train_config, 0, ctx.params);

    const std::string final_name = "finetune_" + run.train_config + ".ckpt";
    return train_loop(ctx, out_dir, final_name, run.train_config, [&](int64_t step) {
        auto items = sample_training_batch(ctx.world, ctx.run.batch, static_cast<uint64_t>(step));
        std::vector<const LatentClip*> lat;
        std::vector<const ConditionBundle*> conds;
        const int64_t T = ctx.cfg.audio_frames, C = ctx.cfg.latent_channels;
        std::vector<float> xm(items.size() * T * C);
        for (size_t i = 0; i < items.size(); ++i) {
            lat.push_back(&items[i].sample.target);
            conds.push_back(&items[i].cond);
            std::copy(items[i].sample.mixture.begin(), items[i].sample.mixture.end(),
                      xm.begin() + i * T * C);
        }
        auto x1 = latents_batch(lat, T, C);
        auto x_m = Tensor::from_data({static_cast<int64_t>(items.size()), T, C}, std::move(xm));
        auto cond = make_cond_batch<float>(ctx.cfg, conds);
        RngStream rng(run.seed, "finetune.flow", static_cast<uint64_t>(step));
        return cfm_loss(ctx.cfg, ctx.params, x1, std::optional<Tensor>(x_m), std::move(cond),
                        CfmMode::separation, rng, DropoutPolicy{});
    });
}

namespace {

constexpr int64_t kSampleChunk = 128;

std::vector<std::vector<float>> run_sampler(const Checkpoint& ck, const EvalSet& set,
                                            QueryMode query, const SamplerConfig& sampler,
                                            const std::optional<MixtureSub>& sub) {
    if (ck.model.cond_channels != 2)
        throw ConfigError("separate/generate: checkpoint is not a 2-channel separation model");
    sampler.validate();
    ParamStore params = ck.params.clone();
    const int64_t T = ck.model.audio_frames, C = ck.model.latent_channels;
    const int64_t n = static_cast<int64_t>(set.pairs.size());

    RngStream noise_rng(sampler.seed, "sample.x0");
    RngStream sub_rng(sampler.seed, "v2a.noise");

    std::vector<std::vector<float>> outputs;
    outputs.reserve(n);
    for (int64_t start = 0; start < n; start += kSampleChunk) {
        const int64_t B = std::min(kSampleChunk, n - start);
        std::vector<ConditionBundle> bundles(B);
        std::vector<const ConditionBundle*> ptrs(B);
        std::vector<float> xm(B * T * C);
        for (int64_t b = 0; b < B; ++b) {
            bundles[b] = set.pairs[start + b].cond;
            bundles[b].drop_video = query == QueryMode::text_only;
            bundles[b].drop_text = false;
            ptrs[b] = &bundles[b];
            if (!sub) {
                const auto& mix = set.pairs[start + b].sample.mixture;
                std::copy(mix.begin(), mix.end(), xm.begin() + b * T * C);
            }
        }
        if (sub && *sub == MixtureSub::white_noise)
            for (auto& v : xm) v = static_cast<float>(sub_rng.normal());
        // MixtureSub::zeros keeps the buffer zeroed

        auto cond = make_cond_batch<float>(ck.model, ptrs);
        auto x_m = Tensor::from_data({B, T, C}, std::move(xm));
        auto out = euler_sample(ck.model, params, cond, std::optional<Tensor>(x_m), sampler,
                                noise_rng);
        const auto& data = out.data();
        for (int64_t b = 0; b < B; ++b)
            outputs.emplace_back(data.begin() + b * T * C, data.begin() + (b + 1) * T * C);
    }
    return outputs;
}

}  // namespace

std::vector<std::vector<float>> separate(const Checkpoint& ck, const EvalSet& set,
                                         QueryMode query, const SamplerConfig& sampler) {
    return run_sampler(ck, set, query, sampler, std::nullopt);
}

std::vector<std::vector<float>> generate_v2a(const Checkpoint& ck, const EvalSet& set,
                                             QueryMode query, const SamplerConfig& sampler,
                                             MixtureSub sub) {
    return run_sampler(ck, set, query, sampler, sub);
}

EvalSet shuffle_conditions(const EvalSet& set) {
    EvalSet out = set;
    const int64_t n = static_cast<int64_t>(set.pairs.size());
    for (int64_t i = 0; i < n; ++i) {
        int64_t j = (i + 1) % n;
        while (j != i &&
               set.pairs[j].sample.target.class_id == set.pairs[i].sample.target.class_id)
            j = (j + 1) % n;
        out.pairs[i].cond = set.pairs[j].cond;
    }
    return out;
}

}  // namespace cfmsep

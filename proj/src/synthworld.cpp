#include "cfmsep/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cfmsep/io.hpp"

namespace cfmsep {

namespace {

constexpr double kTwoPi = 6.28318530717958647692;

std::vector<float> unit_vector(RngStream& rng, int64_t dim) {
    std::vector<float> v(dim);
    double norm2 = 0;
    for (auto& x : v) {
        double g = rng.normal();
        x = static_cast<float>(g);
        norm2 += g * g;
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(std::max(norm2, 1e-12)));
    for (auto& x : v) x *= inv;
    return v;
}

// Smooth raised-cosine temporal bases, bounded away from zero so per-frame
// energy never vanishes inside an event.
double basis_value(const ClassSignature& sig, int j, double t01) {
    const double freq = static_cast<double>(j + 1);
    return 0.6 + 0.4 * std::cos(kTwoPi * (freq * t01 + sig.phase[j]));
}

// 1-3 raised-cosine bumps, clamped to [0,1], max forced above 0.5.
std::vector<float> make_envelope(const WorldConfig& cfg, RngStream& rng) {
    const int64_t T = cfg.audio_frames;
    std::vector<float> env(T, 0.f);
    const int n_bumps = 1 + static_cast<int>(rng.uniform_int(3));
    for (int b = 0; b < n_bumps; ++b) {
        const double center = rng.uniform(0.08, 0.92) * (T - 1);
        const double width = rng.uniform(2.5, 6.5);
        const double amp = rng.uniform(0.6, 1.0);
        for (int64_t t = 0; t < T; ++t) {
            const double d = std::abs(t - center);
            if (d < width) env[t] += static_cast<float>(amp * 0.5 * (1.0 + std::cos(3.14159265358979323846 * d / width)));
        }
    }
    float peak = 0.f;
    for (auto& e : env) {
        e = std::min(e, 1.0f);
        peak = std::max(peak, e);
    }
    if (peak < 0.55f) {
        const float s = 0.8f / peak;
        for (auto& e : env) e = std::min(1.0f, e * s);
    }
    return env;
}

// Linear resample of [T_from] onto [T_to], endpoint aligned.
std::vector<float> resample_linear(const std::vector<float>& x, int64_t t_to) {
    const int64_t t_from = static_cast<int64_t>(x.size());
    std::vector<float> out(t_to);
    if (t_from == 1) {
        std::fill(out.begin(), out.end(), x[0]);
        return out;
    }
    for (int64_t i = 0; i < t_to; ++i) {
        const double p = t_to == 1 ? 0.0
                                   : static_cast<double>(i) * (t_from - 1) / (t_to - 1);
        const int64_t lo = static_cast<int64_t>(p);
        const int64_t hi = std::min(lo + 1, t_from - 1);
        const double f = p - lo;
        out[i] = static_cast<float>((1.0 - f) * x[lo] + f * x[hi]);
    }
    return out;
}

double rms(const std::vector<float>& x) {
    double acc = 0;
    for (float v : x) acc += static_cast<double>(v) * v;
    return std::sqrt(acc / x.size());
}

}  // namespace

void WorldConfig::validate() const {
    if (num_classes < 2) throw WorldError("WorldConfig: num_classes must be >= 2");
    if (audio_frames < 2 || latent_channels < 1 || video_tokens < 1 || video_dim < 1 ||
        sync_tokens < 1 || sync_dim < 1 || text_tokens < 1 || text_dim < 1)
        throw WorldError("WorldConfig: all token counts and dims must be >= 1");
    if (latent_power <= 0) throw WorldError("WorldConfig: latent_power must be > 0");
}

World World::make(const WorldConfig& cfg) {
    cfg.validate();
    World w;
    w.cfg = cfg;
    const int64_t C = cfg.latent_channels;

    // principal channel directions, Gram-Schmidt orthonormalized while they
    // fit (K <= C), so every class owns a clearly separable latent direction
    std::vector<std::vector<double>> principal;
    RngStream rq(cfg.seed, "world.principal");
    for (int64_t k = 0; k < cfg.num_classes; ++k) {
        std::vector<double> v(C);
        for (auto& x : v) x = rq.normal();
        for (const auto& prev : principal) {
            if (static_cast<int64_t>(principal.size()) >= C) break;
            double dot = 0;
            for (int64_t c = 0; c < C; ++c) dot += v[c] * prev[c];
            for (int64_t c = 0; c < C; ++c) v[c] -= dot * prev[c];
        }
        double norm2 = 0;
        for (double x : v) norm2 += x * x;
        const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-12));
        for (auto& x : v) x *= inv;
        principal.push_back(std::move(v));
    }

    for (int64_t k = 0; k < cfg.num_classes; ++k) {
        ClassSignature sig;
        RngStream rng(cfg.seed, "world.class", static_cast<uint64_t>(k));
        sig.mix.resize(C * kSignatureRank);
        for (int64_t c = 0; c < C; ++c) {
            sig.mix[c * kSignatureRank + 0] = static_cast<float>(principal[k][c]);
            for (int j = 1; j < kSignatureRank; ++j)
                sig.mix[c * kSignatureRank + j] =
                    static_cast<float>(0.55 / std::sqrt(double(C)) * rng.normal());
        }
        sig.phase.resize(kSignatureRank);
        for (auto& p : sig.phase) p = rng.uniform();
        w.classes.push_back(std::move(sig));

        RngStream rv(cfg.seed, "world.vis", static_cast<uint64_t>(k));
        w.video_embed.push_back(unit_vector(rv, cfg.video_dim));
        RngStream rt(cfg.seed, "world.txt", static_cast<uint64_t>(k));
        w.text_embed.push_back(unit_vector(rt, cfg.text_dim));
    }
    RngStream rs(cfg.seed, "world.sync");
    w.sync_dir = unit_vector(rs, cfg.sync_dim);
    return w;
}

std::pair<LatentClip, ConditionBundle> make_clip(const World& world, int64_t class_id,
                                                 uint64_t stream_index) {
    const WorldConfig& cfg = world.cfg;
    if (class_id < 0 || class_id >= cfg.num_classes)
        throw WorldError("make_clip: class_id " + std::to_string(class_id) + " out of range");
    const int64_t T = cfg.audio_frames, C = cfg.latent_channels;
    const ClassSignature& sig = world.classes[class_id];

    RngStream rng(cfg.seed, "clip",
                  stream_index * static_cast<uint64_t>(cfg.num_classes) +
                      static_cast<uint64_t>(class_id));

    LatentClip clip;
    clip.class_id = class_id;
    clip.envelope = make_envelope(cfg, rng);

    // Per-frame class pattern: channel direction from the signature bases,
    // normalized to constant per-frame power so clip energy tracks the
    // envelope; then envelope modulation plus latent noise.
    clip.latents.resize(T * C);
    const double target_norm = std::sqrt(cfg.latent_power * C);
    std::vector<double> frame(C);
    for (int64_t t = 0; t < T; ++t) {
        const double t01 = static_cast<double>(t) / T;
        double b[World::kSignatureRank];
        for (int j = 0; j < World::kSignatureRank; ++j) b[j] = basis_value(sig, j, t01);
        double norm2 = 0;
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0;
            for (int j = 0; j < World::kSignatureRank; ++j)
                acc += static_cast<double>(sig.mix[c * World::kSignatureRank + j]) * b[j];
            frame[c] = acc;
            norm2 += acc * acc;
        }
        const double s = target_norm / std::sqrt(std::max(norm2, 1e-9));
        for (int64_t c = 0; c < C; ++c)
            clip.latents[t * C + c] = static_cast<float>(clip.envelope[t] * frame[c] * s);
    }
    for (auto& v : clip.latents) v += static_cast<float>(cfg.noise_latent * rng.normal());

    ConditionBundle cond;
    cond.video_tokens.resize(cfg.video_tokens * cfg.video_dim);
    const auto& evis = world.video_embed[class_id];
    for (int64_t i = 0; i < cfg.video_tokens; ++i)
        for (int64_t d = 0; d < cfg.video_dim; ++d)
            cond.video_tokens[i * cfg.video_dim + d] =
                evis[d] + static_cast<float>(cfg.noise_video * rng.normal());

    const auto env_ds = resample_linear(clip.envelope, cfg.sync_tokens);
    cond.sync_tokens.resize(cfg.sync_tokens * cfg.sync_dim);
    for (int64_t i = 0; i < cfg.sync_tokens; ++i)
        for (int64_t d = 0; d < cfg.sync_dim; ++d)
            cond.sync_tokens[i * cfg.sync_dim + d] =
                env_ds[i] * world.sync_dir[d] + static_cast<float>(cfg.noise_sync * rng.normal());

    cond.text_tokens.assign(cfg.text_tokens * cfg.text_dim, 0.f);
    std::memcpy(cond.text_tokens.data(), world.text_embed[class_id].data(),
                sizeof(float) * cfg.text_dim);

    return {std::move(clip), std::move(cond)};
}

double mix_gain(const std::vector<float>& target, const std::vector<float>& interferer,
                double snr_db) {
    const double ri = rms(interferer);
    if (ri < 1e-9) throw ZeroEnergyError("mix: interferer has no energy, resample required");
    return rms(target) / (ri * std::pow(10.0, snr_db / 20.0));
}

std::vector<float> mix(const std::vector<float>& target, const std::vector<float>& interferer,
                       double snr_db) {
    if (target.size() != interferer.size()) throw WorldError("mix: size mismatch");
    const float g = static_cast<float>(mix_gain(target, interferer, snr_db));
    std::vector<float> out(target.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = target[i] + g * interferer[i];
    return out;
}

std::vector<TrainItem> sample_training_batch(const World& world, int64_t batch,
                                             uint64_t step_index, double snr_lo, double snr_hi) {
    if (batch < 1) throw WorldError("sample_training_batch: batch must be >= 1");
    const int64_t K = world.cfg.num_classes;
    std::vector<TrainItem> items;
    items.reserve(batch);
    for (int64_t i = 0; i < batch; ++i) {
        const uint64_t base = step_index * static_cast<uint64_t>(batch) + static_cast<uint64_t>(i);
        RngStream pick(world.cfg.seed, "batch.pick", base);
        const int64_t target_class = pick.uniform_int(K);
        int64_t interferer_class = pick.uniform_int(K - 1);
        if (interferer_class >= target_class) ++interferer_class;
        const double snr_db = pick.uniform(snr_lo, snr_hi);

        auto [target, cond] = make_clip(world, target_class, 2 * base);
        auto [interferer, icond] = make_clip(world, interferer_class, 2 * base + 1);
        (void)icond;

        TrainItem item;
        item.sample.mixture = mix(target.latents, interferer.latents, snr_db);
        item.sample.target = std::move(target);
        item.sample.interferer_class = interferer_class;
        item.sample.snr_db = static_cast<float>(snr_db);
        item.cond = std::move(cond);
        items.push_back(std::move(item));
    }
    return items;
}

namespace {
constexpr char kDatasetMagic[9] = "CFMSEPDS";
}  // namespace

nlohmann::json world_config_to_json(const WorldConfig& cfg) {
    return {{"num_classes", cfg.num_classes},
            {"audio_frames", cfg.audio_frames},
            {"latent_channels", cfg.latent_channels},
            {"video_tokens", cfg.video_tokens},
            {"video_dim", cfg.video_dim},
            {"sync_tokens", cfg.sync_tokens},
            {"sync_dim", cfg.sync_dim},
            {"text_tokens", cfg.text_tokens},
            {"text_dim", cfg.text_dim},
            {"noise_latent", cfg.noise_latent},
            {"noise_video", cfg.noise_video},
            {"noise_sync", cfg.noise_sync},
            {"latent_power", cfg.latent_power},
            {"seed", cfg.seed}};
}

WorldConfig world_config_from_json(const nlohmann::json& j) {
    WorldConfig cfg;
    cfg.num_classes = j.at("num_classes").get<int64_t>();
    cfg.audio_frames = j.at("audio_frames").get<int64_t>();
    cfg.latent_channels = j.at("latent_channels").get<int64_t>();
    cfg.video_tokens = j.at("video_tokens").get<int64_t>();
    cfg.video_dim = j.at("video_dim").get<int64_t>();
    cfg.sync_tokens = j.at("sync_tokens").get<int64_t>();
    cfg.sync_dim = j.at("sync_dim").get<int64_t>();
    cfg.text_tokens = j.at("text_tokens").get<int64_t>();
    cfg.text_dim = j.at("text_dim").get<int64_t>();
    cfg.noise_latent = j.at("noise_latent").get<double>();
    cfg.noise_video = j.at("noise_video").get<double>();
    cfg.noise_sync = j.at("noise_sync").get<double>();
    cfg.latent_power = j.at("latent_power").get<double>();
    cfg.seed = j.at("seed").get<uint64_t>();
    return cfg;
}

void export_eval_set(const World& world, int64_t n_pairs, const std::filesystem::path& path) {
    const WorldConfig& cfg = world.cfg;
    const int64_t K = cfg.num_classes;
    std::vector<NamedTensor> tensors;
    nlohmann::json items = nlohmann::json::array();
    for (int64_t i = 0; i < n_pairs; ++i) {
        RngStream pick(cfg.seed, "eval.pick", static_cast<uint64_t>(i));
        const int64_t target_class = pick.uniform_int(K);
        int64_t interferer_class = pick.uniform_int(K - 1);
        if (interferer_class >= target_class) ++interferer_class;

        const uint64_t base = 1ull << 40;  // eval streams never collide with training
        auto [target, cond] = make_clip(world, target_class, base + 2 * i);
        auto [interferer, icond] = make_clip(world, interferer_class, base + 2 * i + 1);
        (void)icond;
        auto mixture = mix(target.latents, interferer.latents, 0.0);

        const std::string p = "pair" + std::to_string(i) + ".";
        tensors.push_back({p + "mixture", {cfg.audio_frames, cfg.latent_channels}, mixture});
        tensors.push_back({p + "target", {cfg.audio_frames, cfg.latent_channels}, target.latents});
        tensors.push_back({p + "envelope", {cfg.audio_frames}, target.envelope});
        tensors.push_back({p + "video", {cfg.video_tokens, cfg.video_dim}, cond.video_tokens});
        tensors.push_back({p + "sync", {cfg.sync_tokens, cfg.sync_dim}, cond.sync_tokens});
        tensors.push_back({p + "text", {cfg.text_tokens, cfg.text_dim}, cond.text_tokens});
        items.push_back({{"class_id", target_class},
                         {"interferer_class", interferer_class},
                         {"snr_db", 0.0}});
    }
    nlohmann::json meta = {{"kind", "evalset"},
                           {"world", world_config_to_json(cfg)},
                           {"pairs", n_pairs},
                           {"items", items}};
    write_container(path, kDatasetMagic, 1, meta, tensors);
}

EvalSet import_eval_set(const std::filesystem::path& path) {
    Container c = read_container(path, kDatasetMagic);
    if (c.meta.value("kind", "") != "evalset")
        throw IoError("not an eval set: " + path.string());
    EvalSet set;
    set.world = world_config_from_json(c.meta.at("world"));
    const int64_t n = c.meta.at("pairs").get<int64_t>();
    const auto& items = c.meta.at("items");
    for (int64_t i = 0; i < n; ++i) {
        const std::string p = "pair" + std::to_string(i) + ".";
        EvalPair pair;
        pair.sample.mixture = c.at(p + "mixture").data;
        pair.sample.target.latents = c.at(p + "target").data;
        pair.sample.target.envelope = c.at(p + "envelope").data;
        pair.sample.target.class_id = items[i].at("class_id").get<int64_t>();
        pair.sample.interferer_class = items[i].at("interferer_class").get<int64_t>();
        pair.sample.snr_db = items[i].at("snr_db").get<float>();
        pair.cond.video_tokens = c.at(p + "video").data;
        pair.cond.sync_tokens = c.at(p + "sync").data;
        pair.cond.text_tokens = c.at(p + "text").data;
        set.pairs.push_back(std::move(pair));
    }
    return set;
}

void export_clean_clips(const World& world, int64_t n_clips, const std::filesystem::path& path,
                        const char* stream_label) {
    const WorldConfig& cfg = world.cfg;
    std::vector<NamedTensor> tensors;
    nlohmann::json classes = nlohmann::json::array();
    const uint64_t base = 1ull << 41;
    for (int64_t i = 0; i < n_clips; ++i) {
        RngStream pick(cfg.seed, std::string(stream_label) + ".pick", static_cast<uint64_t>(i));
        const int64_t class_id = pick.uniform_int(cfg.num_classes);
        auto [clip, cond] = make_clip(world, class_id, base + static_cast<uint64_t>(i));
        (void)cond;
        const std::string p = "clip" + std::to_string(i) + ".";
        tensors.push_back({p + "latents", {cfg.audio_frames, cfg.latent_channels}, clip.latents});
        tensors.push_back({p + "envelope", {cfg.audio_frames}, clip.envelope});
        classes.push_back(class_id);
    }
    nlohmann::json meta = {{"kind", "clips"},
                           {"world", world_config_to_json(cfg)},
                           {"clips", n_clips},
                           {"classes", classes}};
    write_container(path, kDatasetMagic, 1, meta, tensors);
}

std::vector<LatentClip> import_clean_clips(const std::filesystem::path& path) {
    Container c = read_container(path, kDatasetMagic);
    if (c.meta.value("kind", "") != "clips") throw IoError("not a clip set: " + path.string());
    const int64_t n = c.meta.at("clips").get<int64_t>();
    const auto& classes = c.meta.at("classes");
    std::vector<LatentClip> clips;
    for (int64_t i = 0; i < n; ++i) {
        const std::string p = "clip" + std::to_string(i) + ".";
        LatentClip clip;
        clip.latents = c.at(p + "latents").data;
        clip.envelope = c.at(p + "envelope").data;
        clip.class_id = classes[i].get<int64_t>();
        clips.push_back(std::move(clip));
    }
    return clips;
}

}  // namespace cfmsep

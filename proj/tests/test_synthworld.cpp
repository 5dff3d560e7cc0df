#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "cfmsep/io.hpp"
#include "cfmsep/synthworld.hpp"

using namespace cfmsep;
namespace fs = std::filesystem;

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double num = 0, va = 0, vb = 0;
    for (size_t i = 0; i < n; ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    return num / std::sqrt(va * vb + 1e-300);
}

double rms_of(const std::vector<float>& x) {
    double acc = 0;
    for (float v : x) acc += double(v) * v;
    return std::sqrt(acc / x.size());
}

// Solve A x = b for symmetric positive definite A via Gaussian elimination.
std::vector<double> solve_spd(std::vector<double> a, std::vector<double> b, int64_t d) {
    for (int64_t col = 0; col < d; ++col) {
        int64_t piv = col;
        for (int64_t r = col + 1; r < d; ++r)
            if (std::abs(a[r * d + col]) > std::abs(a[piv * d + col])) piv = r;
        if (piv != col) {
            for (int64_t j = 0; j < d; ++j) std::swap(a[col * d + j], a[piv * d + j]);
            std::swap(b[col], b[piv]);
        }
        const double p = a[col * d + col];
        for (int64_t r = col + 1; r < d; ++r) {
            const double f = a[r * d + col] / p;
            for (int64_t j = col; j < d; ++j) a[r * d + j] -= f * a[col * d + j];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(d);
    for (int64_t r = d - 1; r >= 0; --r) {
        double acc = b[r];
        for (int64_t j = r + 1; j < d; ++j) acc -= a[r * d + j] * x[j];
        x[r] = acc / a[r * d + r];
    }
    return x;
}

std::vector<double> resample_to(const std::vector<double>& x, int64_t t_to) {
    const int64_t t_from = static_cast<int64_t>(x.size());
    std::vector<double> out(t_to);
    for (int64_t i = 0; i < t_to; ++i) {
        const double p = static_cast<double>(i) * (t_from - 1) / (t_to - 1);
        const int64_t lo = static_cast<int64_t>(p);
        const int64_t hi = std::min(lo + 1, t_from - 1);
        out[i] = (1.0 - (p - lo)) * x[lo] + (p - lo) * x[hi];
    }
    return out;
}

}  // namespace

TEST_CASE("make_clip is deterministic and noise-free clips are bit-identical") {
    WorldConfig cfg;
    cfg.noise_latent = cfg.noise_video = cfg.noise_sync = 0.0;
    World w = World::make(cfg);
    auto [c1, b1] = make_clip(w, 3, 17);
    auto [c2, b2] = make_clip(w, 3, 17);
    CHECK(c1.latents == c2.latents);
    CHECK(c1.envelope == c2.envelope);
    CHECK(b1.video_tokens == b2.video_tokens);
    CHECK(b1.sync_tokens == b2.sync_tokens);
    CHECK(b1.text_tokens == b2.text_tokens);
    auto [c3, b3] = make_clip(w, 3, 18);
    CHECK(c1.latents != c3.latents);
}

TEST_CASE("envelope is a valid bump pattern") {
    WorldConfig cfg;
    World w = World::make(cfg);
    for (int i = 0; i < 50; ++i) {
        auto [clip, cond] = make_clip(w, i % cfg.num_classes, 1000 + i);
        float peak = 0;
        for (float e : clip.envelope) {
            CHECK(e >= 0.0f);
            CHECK(e <= 1.0f);
            peak = std::max(peak, e);
        }
        CHECK(peak > 0.5f);
    }
}

TEST_CASE("clip energy tracks the envelope when noise is off") {
    WorldConfig cfg;
    cfg.noise_latent = cfg.noise_video = cfg.noise_sync = 0.0;
    World w = World::make(cfg);
    const int64_t T = cfg.audio_frames, C = cfg.latent_channels;
    for (int i = 0; i < 100; ++i) {
        auto [clip, cond] = make_clip(w, i % cfg.num_classes, 5000 + i);
        std::vector<double> env(T), energy(T);
        for (int64_t t = 0; t < T; ++t) {
            env[t] = clip.envelope[t];
            double acc = 0;
            for (int64_t c = 0; c < C; ++c) acc += double(clip.latents[t * C + c]) * clip.latents[t * C + c];
            energy[t] = acc / C;
        }
        CHECK(pearson(env, energy) > 0.8);
    }
}

TEST_CASE("class text embeddings are nearly orthogonal on average") {
    WorldConfig cfg;
    World w = World::make(cfg);
    double acc = 0;
    int pairs = 0;
    for (int64_t a = 0; a < cfg.num_classes; ++a)
        for (int64_t b = a + 1; b < cfg.num_classes; ++b) {
            double dot = 0;
            for (int64_t d = 0; d < cfg.text_dim; ++d)
                dot += double(w.text_embed[a][d]) * w.text_embed[b][d];
            acc += std::abs(dot);
            ++pairs;
        }
    CHECK(acc / pairs < 0.5);
}

TEST_CASE("mix: equal-RMS inputs at 0 dB sum elementwise") {
    std::vector<float> a = {1.f, -1.f, 1.f, -1.f};
    std::vector<float> b = {-1.f, 1.f, 1.f, -1.f};
    CHECK(mix_gain(a, b, 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    auto m = mix(a, b, 0.0);
    for (size_t i = 0; i < a.size(); ++i) CHECK(m[i] == a[i] + b[i]);
}

TEST_CASE("mix: very high SNR leaves the target untouched") {
    WorldConfig cfg;
    World w = World::make(cfg);
    auto [t, ct] = make_clip(w, 0, 1);
    auto [n, cn] = make_clip(w, 1, 2);
    auto m = mix(t.latents, n.latents, 200.0);
    double max_d = 0;
    for (size_t i = 0; i < m.size(); ++i)
        max_d = std::max(max_d, std::abs(double(m[i]) - t.latents[i]));
    CHECK(max_d < 1e-6 * rms_of(t.latents));
}

TEST_CASE("mix: gain follows the closed form") {
    std::vector<float> a = {2.f, -2.f};
    std::vector<float> b = {1.f, 1.f};
    // equal RMS after scaling: rms(a)=2, rms(b)=1; snr = 20*log10(2) makes g = 1
    const double snr = 20.0 * std::log10(2.0);
    CHECK(mix_gain(a, b, snr) == doctest::Approx(1.0).epsilon(1e-9));
    std::vector<float> c = {1.f, -1.f};
    CHECK(mix_gain(c, b, snr) == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("mix: zero-energy interferer signals a resample error") {
    std::vector<float> a = {1.f, 2.f};
    std::vector<float> z = {0.f, 0.f};
    CHECK_THROWS_AS(mix(a, z, 0.0), ZeroEnergyError);
}

TEST_CASE("mixture linearity: mix(a,b,s) - a == g*b exactly") {
    WorldConfig cfg;
    World w = World::make(cfg);
    auto [t, ct] = make_clip(w, 2, 11);
    auto [n, cn] = make_clip(w, 5, 12);
    const double snr = -7.25;
    const float g = static_cast<float>(mix_gain(t.latents, n.latents, snr));
    auto m = mix(t.latents, n.latents, snr);
    for (size_t i = 0; i < m.size(); ++i) CHECK(m[i] == t.latents[i] + g * n.latents[i]);
}

TEST_CASE("training batches: snr statistics, class rule, determinism") {
    WorldConfig cfg;
    World w = World::make(cfg);
    double snr_sum = 0, snr_min = 1e9, snr_max = -1e9;
    int64_t count = 0;
    for (uint64_t step = 0; step < 100; ++step) {
        auto items = sample_training_batch(w, 100, step);
        for (const auto& it : items) {
            CHECK(it.sample.interferer_class != it.sample.target.class_id);
            snr_sum += it.sample.snr_db;
            snr_min = std::min(snr_min, double(it.sample.snr_db));
            snr_max = std::max(snr_max, double(it.sample.snr_db));
            ++count;
        }
    }
    CHECK(count == 10000);
    CHECK(std::abs(snr_sum / count) < 0.5);
    CHECK(snr_min >= -15.0);
    CHECK(snr_max <= 15.0);

    auto b1 = sample_training_batch(w, 8, 3);
    auto b2 = sample_training_batch(w, 8, 3);
    for (size_t i = 0; i < b1.size(); ++i) {
        CHECK(b1[i].sample.mixture == b2[i].sample.mixture);
        CHECK(b1[i].sample.target.latents == b2[i].sample.target.latents);
        CHECK(b1[i].cond.sync_tokens == b2[i].cond.sync_tokens);
    }
}

TEST_CASE("eval set: bit-exact round trip, 0 dB pairs, exact file size") {
    WorldConfig cfg;
    World w = World::make(cfg);
    fs::path path = fs::temp_directory_path() / "cfmsep_test_evalset.bin";
    export_eval_set(w, 12, path);
    EvalSet set = import_eval_set(path);
    REQUIRE(set.pairs.size() == 12);

    for (const auto& p : set.pairs) {
        CHECK(p.sample.snr_db == 0.0f);
        CHECK(p.sample.interferer_class != p.sample.target.class_id);
    }

    // bit-exact round trip against regeneration
    fs::path path2 = fs::temp_directory_path() / "cfmsep_test_evalset2.bin";
    export_eval_set(w, 12, path2);
    CHECK(file_hash_hex(path) == file_hash_hex(path2));

    // header + 4 bytes per float
    Container c = read_container(path, "CFMSEPDS");
    int64_t floats = 0;
    for (const auto& t : c.tensors) floats += static_cast<int64_t>(t.data.size());
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    const int64_t size = in.tellg();
    const int64_t header_len = [&] {
        std::ifstream h(path, std::ios::binary);
        char magic[8];
        uint16_t v;
        uint32_t hl;
        h.read(magic, 8);
        h.read(reinterpret_cast<char*>(&v), 2);
        h.read(reinterpret_cast<char*>(&hl), 4);
        return static_cast<int64_t>(hl);
    }();
    CHECK(size == 8 + 2 + 4 + header_len + 4 * floats);

    // import then re-import is identical in memory
    EvalSet set2 = import_eval_set(path2);
    CHECK(set2.pairs[3].sample.mixture == set.pairs[3].sample.mixture);
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("eval set rejects corrupt magic and truncated payloads") {
    WorldConfig cfg;
    World w = World::make(cfg);
    fs::path path = fs::temp_directory_path() / "cfmsep_test_corrupt.bin";
    export_eval_set(w, 2, path);

    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXXXXXX", 8);
    }
    CHECK_THROWS_AS(import_eval_set(path), IoError);

    export_eval_set(w, 2, path);
    const auto size = fs::file_size(path);
    fs::resize_file(path, size - 64);
    CHECK_THROWS_AS(import_eval_set(path), IoError);
    fs::remove(path);
}

TEST_CASE("a linear probe separates the classes at 95 percent or better") {
    // multinomial logistic regression, full-batch gradient descent
    WorldConfig cfg;
    World w = World::make(cfg);
    const int64_t T = cfg.audio_frames, C = cfg.latent_channels, K = cfg.num_classes;
    const int64_t dim = T * C, n_train = 500, n_test = 300;

    std::vector<std::vector<float>> xs;
    std::vector<int64_t> ys;
    for (int64_t i = 0; i < n_train + n_test; ++i) {
        RngStream pick(cfg.seed, "lineartest", i);
        const int64_t k = pick.uniform_int(K);
        auto [clip, cond] = make_clip(w, k, 900000 + i);
        xs.push_back(clip.latents);
        ys.push_back(k);
    }

    std::vector<double> weights(dim * K, 0.0), bias(K, 0.0);
    const double lr = 0.5 / n_train;
    for (int it = 0; it < 300; ++it) {
        std::vector<double> gw(dim * K, 0.0), gb(K, 0.0);
        for (int64_t i = 0; i < n_train; ++i) {
            std::vector<double> z(K);
            for (int64_t k = 0; k < K; ++k) z[k] = bias[k];
            for (int64_t a = 0; a < dim; ++a) {
                const double xa = xs[i][a];
                for (int64_t k = 0; k < K; ++k) z[k] += weights[a * K + k] * xa;
            }
            const double m = *std::max_element(z.begin(), z.end());
            double s = 0;
            for (auto& v : z) {
                v = std::exp(v - m);
                s += v;
            }
            for (auto& v : z) v /= s;
            z[ys[i]] -= 1.0;
            for (int64_t a = 0; a < dim; ++a) {
                const double xa = xs[i][a];
                for (int64_t k = 0; k < K; ++k) gw[a * K + k] += xa * z[k];
            }
            for (int64_t k = 0; k < K; ++k) gb[k] += z[k];
        }
        for (int64_t a = 0; a < dim * K; ++a) weights[a] -= lr * (gw[a] + 1e-3 * weights[a]);
        for (int64_t k = 0; k < K; ++k) bias[k] -= lr * gb[k];
    }

    int64_t correct = 0;
    for (int64_t i = n_train; i < n_train + n_test; ++i) {
        std::vector<double> z(K);
        for (int64_t k = 0; k < K; ++k) z[k] = bias[k];
        for (int64_t a = 0; a < dim; ++a)
            for (int64_t k = 0; k < K; ++k) z[k] += weights[a * K + k] * xs[i][a];
        const int64_t pred = std::max_element(z.begin(), z.end()) - z.begin();
        if (pred == ys[i]) ++correct;
    }
    CHECK(static_cast<double>(correct) / n_test >= 0.95);
}

TEST_CASE("sync tokens linearly encode the envelope") {
    WorldConfig cfg;
    World w = World::make(cfg);
    const int64_t Ts = cfg.sync_tokens, Ds = cfg.sync_dim, Ta = cfg.audio_frames;

    // least squares for a single decoding direction across 100 clips
    std::vector<double> ata(Ds * Ds, 0.0), atb(Ds, 0.0);
    std::vector<std::pair<LatentClip, ConditionBundle>> clips;
    for (int64_t i = 0; i < 100; ++i) {
        clips.push_back(make_clip(w, i % cfg.num_classes, 700000 + i));
        const auto& [clip, cond] = clips.back();
        std::vector<double> env_ds(Ts);
        {
            std::vector<double> env(clip.envelope.begin(), clip.envelope.end());
            env_ds = resample_to(env, Ts);
        }
        for (int64_t s = 0; s < Ts; ++s)
            for (int64_t a = 0; a < Ds; ++a) {
                const double xa = cond.sync_tokens[s * Ds + a];
                for (int64_t b = 0; b < Ds; ++b) ata[a * Ds + b] += xa * cond.sync_tokens[s * Ds + b];
                atb[a] += xa * env_ds[s];
            }
    }
    for (int64_t a = 0; a < Ds; ++a) ata[a * Ds + a] += 1e-9;
    auto wvec = solve_spd(ata, atb, Ds);

    double corr_sum = 0;
    for (const auto& [clip, cond] : clips) {
        std::vector<double> recon_ds(Ts, 0.0);
        for (int64_t s = 0; s < Ts; ++s)
            for (int64_t a = 0; a < Ds; ++a) recon_ds[s] += wvec[a] * cond.sync_tokens[s * Ds + a];
        auto recon = resample_to(recon_ds, Ta);
        std::vector<double> env(clip.envelope.begin(), clip.envelope.end());
        corr_sum += pearson(recon, env);
    }
    CHECK(corr_sum / clips.size() > 0.9);
}

TEST_CASE("world config validation") {
    WorldConfig cfg;
    cfg.num_classes = 1;
    CHECK_THROWS_AS(World::make(cfg), WorldError);
    WorldConfig cfg2;
    cfg2.video_dim = 0;
    CHECK_THROWS_AS(World::make(cfg2), WorldError);
    WorldConfig cfg3;
    CHECK_THROWS_AS(make_clip(World::make(cfg3), 99, 0), WorldError);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cfmsep/evalsuite.hpp"

using namespace cfmsep;
namespace fs = std::filesystem;

namespace {

std::vector<std::vector<double>> gaussian_cloud(int64_t n, const std::vector<double>& mu,
                                                const std::vector<double>& sigma, uint64_t salt) {
    RngStream rng(2468, "cloud", salt);
    std::vector<std::vector<double>> out(n, std::vector<double>(mu.size()));
    for (auto& row : out)
        for (size_t d = 0; d < mu.size(); ++d) row[d] = mu[d] + sigma[d] * rng.normal();
    return out;
}

ProbeModel tiny_probe(const World& world, int64_t n_train = 400, int64_t n_holdout = 150) {
    std::vector<LatentClip> train, holdout;
    for (int64_t i = 0; i < n_train + n_holdout; ++i) {
        RngStream pick(world.cfg.seed, "probetest", i);
        auto [clip, cond] = make_clip(world, pick.uniform_int(world.cfg.num_classes), 50000 + i);
        (clip.class_id >= 0 && i < n_train ? train : holdout).push_back(clip);
    }
    return train_probe(world, train, holdout, world.cfg.seed);
}

}  // namespace

TEST_CASE("frechet distance: zero on identical sets, symmetric") {
    auto a = gaussian_cloud(500, {0.0, 1.0, -2.0}, {1.0, 0.5, 2.0}, 1);
    auto b = gaussian_cloud(400, {0.5, 0.5, 0.0}, {1.5, 1.0, 0.7}, 2);
    CHECK(frechet_distance(a, a) == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(std::abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-6);
    CHECK(frechet_distance(a, b) > 0.0);
}

TEST_CASE("frechet distance matches the 1-D closed form") {
    // N(0,1) vs N(1,1): FD = (mu1-mu2)^2 + (s1-s2)^2 = 1
    auto a = gaussian_cloud(100000, {0.0}, {1.0}, 3);
    auto b = gaussian_cloud(100000, {1.0}, {1.0}, 4);
    CHECK(frechet_distance(a, b) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("frechet distance matches the diagonal-Gaussian closed form") {
    const std::vector<double> mu_a = {0.0, 1.0, -0.5}, sd_a = {1.0, 0.6, 1.5};
    const std::vector<double> mu_b = {0.4, 0.2, 0.5}, sd_b = {1.4, 1.0, 0.8};
    auto a = gaussian_cloud(50000, mu_a, sd_a, 5);
    auto b = gaussian_cloud(50000, mu_b, sd_b, 6);
    double expected = 0;
    for (int d = 0; d < 3; ++d) {
        expected += (mu_a[d] - mu_b[d]) * (mu_a[d] - mu_b[d]);
        expected += (sd_a[d] - sd_b[d]) * (sd_a[d] - sd_b[d]);
    }
    CHECK(frechet_distance(a, b) == doctest::Approx(expected).epsilon(0.05));
}

TEST_CASE("frechet distance validates its inputs") {
    auto a = gaussian_cloud(10, {0.0, 0.0}, {1.0, 1.0}, 7);
    auto b = gaussian_cloud(10, {0.0}, {1.0}, 8);
    CHECK_THROWS_AS(frechet_distance(a, b), MetricError);
    std::vector<std::vector<double>> single = {{1.0, 2.0}};
    CHECK_THROWS_AS(frechet_distance(single, a), MetricError);
}

TEST_CASE("inception analog: identical clips give exactly 1") {
    std::vector<std::vector<double>> p(16, {0.2, 0.5, 0.3});
    CHECK(inception_from_posteriors(p) == 1.0);
}

TEST_CASE("inception analog: one-hot per class with uniform marginal hits K") {
    const int64_t K = 8;
    std::vector<std::vector<double>> p;
    for (int64_t k = 0; k < K; ++k) {
        std::vector<double> row(K, 0.0);
        row[k] = 1.0;
        p.push_back(row);
    }
    CHECK(inception_from_posteriors(p) == doctest::Approx(double(K)).epsilon(1e-3));
}

TEST_CASE("inception analog stays within [1, K] on arbitrary posteriors") {
    RngStream rng(11, "ispost");
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::vector<double>> p;
        for (int i = 0; i < 30; ++i) {
            std::vector<double> row(8);
            double s = 0;
            for (auto& v : row) {
                v = std::exp(2.0 * rng.normal());
                s += v;
            }
            for (auto& v : row) v /= s;
            p.push_back(row);
        }
        const double is = inception_from_posteriors(p);
        CHECK(is >= 1.0);
        CHECK(is <= 8.0 + 1e-9);
    }
}

TEST_CASE("kl_paired: zero on identical sets, non-negative, floored one-hot value") {
    RngStream rng(12, "klpost");
    std::vector<std::vector<double>> p;
    for (int i = 0; i < 25; ++i) {
        std::vector<double> row(6);
        double s = 0;
        for (auto& v : row) {
            v = std::exp(rng.normal());
            s += v;
        }
        for (auto& v : row) v /= s;
        p.push_back(row);
    }
    CHECK(kl_paired_from_posteriors(p, p) == doctest::Approx(0.0).epsilon(1e-9));

    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::vector<double>> q;
        for (int i = 0; i < 25; ++i) {
            std::vector<double> row(6);
            double s = 0;
            for (auto& v : row) {
                v = std::exp(rng.normal());
                s += v;
            }
            for (auto& v : row) v /= s;
            q.push_back(row);
        }
        CHECK(kl_paired_from_posteriors(p, q) >= 0.0);
    }

    // one-hot a vs one-hot b with the 1e-8 floor
    std::vector<std::vector<double>> ra = {{1.0, 0.0, 0.0}}, rb = {{0.0, 1.0, 0.0}};
    CHECK(kl_paired_from_posteriors(ra, rb) == doctest::Approx(std::log(1e8)).epsilon(1e-4));
    CHECK(kl_paired_from_posteriors(ra, rb) == doctest::Approx(18.42).epsilon(1e-3));

    std::vector<std::vector<double>> wrong(2, std::vector<double>(3, 1.0 / 3));
    CHECK_THROWS_AS(kl_paired_from_posteriors(p, wrong), MetricError);
}

TEST_CASE("desync analog recovers circular shifts exactly") {
    WorldConfig cfg;
    World world = World::make(cfg);
    const int64_t T = cfg.audio_frames, C = cfg.latent_channels;
    auto [clip, cond] = make_clip(world, 1, 31337);

    CHECK(desync_analog(clip.latents, T, C, clip.envelope) == 0.0);

    for (int64_t shift : {4LL, -3LL, 7LL, -8LL}) {
        std::vector<float> shifted(T * C);
        for (int64_t t = 0; t < T; ++t) {
            const int64_t src = ((t - shift) % T + T) % T;
            for (int64_t c = 0; c < C; ++c) shifted[t * C + c] = clip.latents[src * C + c];
        }
        CHECK(desync_analog(shifted, T, C, clip.envelope) == double(std::abs(shift)));
    }

    std::vector<float> constant(T * C, 1.0f);
    CHECK_THROWS_AS(desync_analog(constant, T, C, clip.envelope), MetricError);
    std::vector<float> flat_env(T, 0.5f);
    CHECK_THROWS_AS(desync_analog(clip.latents, T, C, flat_env), MetricError);
}

TEST_CASE("si_snr: caps, scale invariance, orthogonal noise at 0 dB") {
    RngStream rng(13, "sisnr");
    std::vector<float> t(64);
    for (auto& v : t) v = static_cast<float>(rng.normal());

    CHECK(si_snr(t, t) == 60.0);
    std::vector<float> t2(t);
    for (auto& v : t2) v *= 2.0f;
    CHECK(si_snr(t2, t) == 60.0);

    // scale invariance on an imperfect estimate (pre-cap values)
    std::vector<float> e1(64), e3(64);
    for (int i = 0; i < 64; ++i) {
        e1[i] = t[i] + 0.3f * static_cast<float>(rng.normal());
        e3[i] = 4.0f * e1[i];  // power of two: exact in floating point
    }
    CHECK(si_snr(e3, t) == doctest::Approx(si_snr(e1, t)).epsilon(1e-9));

    // noise orthogonalized against t with matched energy: exactly 0 dB
    std::vector<float> n(64);
    for (auto& v : n) v = static_cast<float>(rng.normal());
    double dot = 0, tt = 0;
    for (int i = 0; i < 64; ++i) {
        dot += double(n[i]) * t[i];
        tt += double(t[i]) * t[i];
    }
    double nn = 0;
    for (int i = 0; i < 64; ++i) {
        n[i] -= static_cast<float>(dot / tt * t[i]);
        nn += double(n[i]) * n[i];
    }
    // re-orthogonalize in double to kill the float rounding residue
    dot = 0;
    for (int i = 0; i < 64; ++i) dot += double(n[i]) * t[i];
    std::vector<double> nd(64);
    nn = 0;
    for (int i = 0; i < 64; ++i) {
        nd[i] = n[i] - dot / tt * t[i];
        nn += nd[i] * nd[i];
    }
    const double gain = std::sqrt(tt / nn);
    std::vector<float> est(64);
    std::vector<float> target_d(64);
    std::vector<double> target_exact(t.begin(), t.end());
    // build estimate = target + orthogonal noise of equal energy in double, then verify
    {
        double d2 = 0, t2e = 0;
        std::vector<double> n2(64);
        for (int i = 0; i < 64; ++i) n2[i] = nd[i] * gain;
        for (int i = 0; i < 64; ++i) {
            d2 += n2[i] * target_exact[i];
            t2e += target_exact[i] * target_exact[i];
        }
        // assemble in float for the public interface
        for (int i = 0; i < 64; ++i) {
            est[i] = static_cast<float>(target_exact[i] + n2[i]);
            target_d[i] = static_cast<float>(target_exact[i]);
        }
    }
    CHECK(si_snr(est, target_d) == doctest::Approx(0.0).epsilon(1e-3));

    std::vector<float> zeros(64, 0.f);
    CHECK_THROWS_AS(si_snr(t, zeros), MetricError);
}

TEST_CASE("probe: high held-out accuracy, persisted round trip, aligned prototypes") {
    WorldConfig cfg;
    World world = World::make(cfg);
    ProbeModel probe = tiny_probe(world);
    CHECK(probe.heldout_accuracy >= 0.95);

    fs::path path = fs::temp_directory_path() / "cfmsep_test_probe.ckpt";
    save_probe(path, probe);
    ProbeModel loaded = load_probe(path);
    CHECK(loaded.heldout_accuracy == probe.heldout_accuracy);
    CHECK(loaded.fc1_w == probe.fc1_w);
    CHECK(loaded.prototypes == probe.prototypes);
    fs::remove(path);

    // alignment behaves like a class score: own prototype beats others >= 90%
    int64_t good = 0, total = 0;
    for (int64_t i = 0; i < 500; ++i) {
        RngStream pick(cfg.seed, "alignttest", i);
        const int64_t k = pick.uniform_int(cfg.num_classes);
        auto [clip, cond] = make_clip(world, k, 60000 + i);
        const auto f = probe.features(clip.latents);
        double own = -2, best_other = -2;
        for (int64_t c = 0; c < cfg.num_classes; ++c) {
            std::vector<double> proto(probe.hidden_dim);
            for (int64_t d = 0; d < probe.hidden_dim; ++d)
                proto[d] = probe.prototypes[c * probe.hidden_dim + d];
            const double cs = cosine_similarity(f, proto);
            if (c == k) own = cs;
            else best_other = std::max(best_other, cs);
        }
        if (own >= best_other) ++good;
        ++total;
    }
    CHECK(double(good) / total >= 0.90);
}

TEST_CASE("alignment scores: identity and symmetry") {
    WorldConfig cfg;
    World world = World::make(cfg);
    ProbeModel probe = tiny_probe(world, 200, 80);
    auto [clip, cond] = make_clip(world, 2, 777);
    auto [at, aa] = alignment_scores(probe, clip.latents, 2, clip.latents);
    CHECK(aa == doctest::Approx(1.0).epsilon(1e-9));

    auto [clip2, cond2] = make_clip(world, 4, 778);
    const auto f1 = probe.features(clip.latents);
    const auto f2 = probe.features(clip2.latents);
    CHECK(cosine_similarity(f1, f2) == doctest::Approx(cosine_similarity(f2, f1)).epsilon(1e-12));
}

TEST_CASE("compute_report on clean outputs is near-perfect") {
    WorldConfig cfg;
    World world = World::make(cfg);
    ProbeModel probe = tiny_probe(world, 200, 80);
    fs::path path = fs::temp_directory_path() / "cfmsep_test_report_set.bin";
    export_eval_set(world, 40, path);
    EvalSet set = import_eval_set(path);
    fs::remove(path);

    std::vector<std::vector<float>> clean;
    for (const auto& p : set.pairs) clean.push_back(p.sample.target.latents);
    MetricReport rep = compute_report(probe, clean, set);
    CHECK(rep.n == 40);
    CHECK(rep.fd == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(rep.kl_paired == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(rep.align_audio == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(rep.si_snr_db == 60.0);
    CHECK(rep.desync == 0.0);
    CHECK(rep.is_analog >= 1.0);

    auto j = rep.to_json();
    for (const char* key :
         {"fd", "is_analog", "align_text", "align_audio", "desync", "si_snr_db", "kl_paired", "n"})
        CHECK(j.contains(key));

    // the mixture baseline sits near 0 dB SI-SNR on the 0 dB eval set
    std::vector<std::vector<float>> mixtures;
    for (const auto& p : set.pairs) mixtures.push_back(p.sample.mixture);
    MetricReport mix = compute_report(probe, mixtures, set);
    CHECK(std::abs(mix.si_snr_db) < 0.75);
}

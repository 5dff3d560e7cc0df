#include <algorithm>
#include <cmath>

#include "cfmsep/evalsuite.hpp"
#include "cfmsep/ops.hpp"
#include "cfmsep/params.hpp"

namespace cfmsep {

namespace {
constexpr char kCheckpointMagic[9] = "CFMSEPCK";

std::vector<double> dense_forward(const std::vector<float>& x, const std::vector<float>& w,
                                  const std::vector<float>& b, int64_t in, int64_t out) {
    std::vector<double> y(out);
    for (int64_t o = 0; o < out; ++o) y[o] = b[o];
    for (int64_t i = 0; i < in; ++i) {
        const double xi = x[i];
        for (int64_t o = 0; o < out; ++o) y[o] += xi * w[i * out + o];
    }
    return y;
}

double gelu_d(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }

}  // namespace

std::vector<double> ProbeModel::features(const std::vector<float>& latents) const {
    if (static_cast<int64_t>(latents.size()) != input_dim)
        throw MetricError("probe: input size mismatch");
    auto h = dense_forward(latents, fc1_w, fc1_b, input_dim, hidden_dim);
    for (auto& v : h) v = gelu_d(v);
    return h;
}

std::vector<double> ProbeModel::posterior(const std::vector<float>& latents) const {
    auto h = features(latents);
    std::vector<double> logits(num_classes, 0.0);
    for (int64_t k = 0; k < num_classes; ++k) logits[k] = fc2_b[k];
    for (int64_t i = 0; i < hidden_dim; ++i)
        for (int64_t k = 0; k < num_classes; ++k) logits[k] += h[i] * fc2_w[i * num_classes + k];
    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0;
    for (auto& v : logits) {
        v = std::exp(v - m);
        sum += v;
    }
    for (auto& v : logits) v /= sum;
    return logits;
}

int64_t ProbeModel::predict(const std::vector<float>& latents) const {
    auto p = posterior(latents);
    return std::max_element(p.begin(), p.end()) - p.begin();
}

ProbeModel train_probe(const World& world, const std::vector<LatentClip>& train_clips,
                       const std::vector<LatentClip>& holdout_clips, uint64_t seed,
                       int64_t hidden_dim) {
    const WorldConfig& w = world.cfg;
    const int64_t in = w.audio_frames * w.latent_channels;
    const int64_t K = w.num_classes;
    const int64_t n_train = static_cast<int64_t>(train_clips.size());
    if (n_train < K) throw MetricError("train_probe: not enough training clips");

    ParamStore ps;
    {
        RngStream r1(seed, "probe.init.fc1");
        ps.add("fc1.weight", Tensor::randn({in, hidden_dim}, r1, 1.0 / std::sqrt(double(in))));
        ps.add("fc1.bias", Tensor::zeros({hidden_dim}));
        RngStream r2(seed, "probe.init.fc2");
        ps.add("fc2.weight",
               Tensor::randn({hidden_dim, K}, r2, 1.0 / std::sqrt(double(hidden_dim))));
        ps.add("fc2.bias", Tensor::zeros({K}));
    }
    OptimizerState opt;
    opt.hp.lr = 3e-3;
    opt.hp.warmup_steps = 50;
    FreezeMask none;

    const int64_t steps = 1500, batch = 64;
    for (int64_t step = 0; step < steps; ++step) {
        RngStream pick(seed, "probe.batch", static_cast<uint64_t>(step));
        std::vector<float> xb(batch * in), yb(batch * K, 0.f);
        for (int64_t b = 0; b < batch; ++b) {
            const auto& clip = train_clips[pick.uniform_int(n_train)];
            std::copy(clip.latents.begin(), clip.latents.end(), xb.begin() + b * in);
            yb[b * K + clip.class_id] = 1.f;
        }
        auto x = Tensor::from_data({batch, in}, std::move(xb));
        auto y = Tensor::from_data({batch, K}, std::move(yb));
        auto h = gelu(add(matmul(x, ps.at("fc1.weight")), ps.at("fc1.bias")));
        auto logits = add(matmul(h, ps.at("fc2.weight")), ps.at("fc2.bias"));
        // cross-entropy = -mean over batch of sum(onehot * log_softmax)
        auto loss = scale(mean_all(mul(y, log_softmax_lastdim(logits))), -float(K));
        backward(loss);
        adamw_step(ps, opt, none);
    }

    ProbeModel probe;
    probe.world = w;
    probe.input_dim = in;
    probe.hidden_dim = hidden_dim;
    probe.num_classes = K;
    probe.fc1_w = ps.at("fc1.weight").data();
    probe.fc1_b = ps.at("fc1.bias").data();
    probe.fc2_w = ps.at("fc2.weight").data();
    probe.fc2_b = ps.at("fc2.bias").data();

    // class prototypes: mean clean-clip feature per class
    std::vector<double> proto(K * hidden_dim, 0.0);
    std::vector<int64_t> counts(K, 0);
    for (const auto& clip : train_clips) {
        auto f = probe.features(clip.latents);
        for (int64_t i = 0; i < hidden_dim; ++i) proto[clip.class_id * hidden_dim + i] += f[i];
        counts[clip.class_id]++;
    }
    probe.prototypes.resize(K * hidden_dim);
    for (int64_t k = 0; k < K; ++k)
        for (int64_t i = 0; i < hidden_dim; ++i)
            probe.prototypes[k * hidden_dim + i] =
                counts[k] ? static_cast<float>(proto[k * hidden_dim + i] / counts[k]) : 0.f;

    int64_t correct = 0;
    for (const auto& clip : holdout_clips)
        if (probe.predict(clip.latents) == clip.class_id) ++correct;
    probe.heldout_accuracy =
        holdout_clips.empty() ? 0.0 : static_cast<double>(correct) / holdout_clips.size();
    return probe;
}

void save_probe(const std::filesystem::path& path, const ProbeModel& probe) {
    std::vector<NamedTensor> tensors = {
        {"fc1.weight", {probe.input_dim, probe.hidden_dim}, probe.fc1_w},
        {"fc1.bias", {probe.hidden_dim}, probe.fc1_b},
        {"fc2.weight", {probe.hidden_dim, probe.num_classes}, probe.fc2_w},
        {"fc2.bias", {probe.num_classes}, probe.fc2_b},
        {"prototypes", {probe.num_classes, probe.hidden_dim}, probe.prototypes},
    };
    nlohmann::json meta = {{"kind", "probe"},
                           {"world", world_config_to_json(probe.world)},
                           {"hidden_dim", probe.hidden_dim},
                           {"heldout_accuracy", probe.heldout_accuracy}};
    write_container(path, kCheckpointMagic, 1, meta, tensors);
}

ProbeModel load_probe(const std::filesystem::path& path) {
    Container c = read_container(path, kCheckpointMagic);
    if (c.meta.value("kind", "") != "probe") throw IoError("not a probe file: " + path.string());
    ProbeModel probe;
    probe.world = world_config_from_json(c.meta.at("world"));
    probe.hidden_dim = c.meta.at("hidden_dim").get<int64_t>();
    probe.heldout_accuracy = c.meta.at("heldout_accuracy").get<double>();
    probe.input_dim = probe.world.audio_frames * probe.world.latent_channels;
    probe.num_classes = probe.world.num_classes;
    probe.fc1_w = c.at("fc1.weight").data;
    probe.fc1_b = c.at("fc1.bias").data;
    probe.fc2_w = c.at("fc2.weight").data;
    probe.fc2_b = c.at("fc2.bias").data;
    probe.prototypes = c.at("prototypes").data;
    return probe;
}

}  // namespace cfmsep

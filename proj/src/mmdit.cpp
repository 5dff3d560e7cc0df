#include "cfmsep/mmdit.hpp"

#include <cstring>

namespace cfmsep {

namespace {
constexpr char kCheckpointMagic[9] = "CFMSEPCK";
}

ParamStore expand_in_proj(const ParamStore& pretrained, const ModelConfig& pretrained_cfg,
                          const ModelConfig& target_cfg) {
    if (pretrained_cfg.cond_channels != 1)
        throw TensorError("expand_in_proj: source checkpoint must be generation-only");
    if (target_cfg.cond_channels != 2)
        throw TensorError("expand_in_proj: target model must have cond_channels=2");
    const int64_t C = target_cfg.latent_channels, h = target_cfg.hidden;
    const auto& w_old = pretrained.at("audio_in_proj.weight");
    if (w_old.shape() != Shape{C, h})
        throw TensorError("expand_in_proj: pretrained projection shape " +
                          shape_str(w_old.shape()) + " does not match config");

    ParamStore out;
    for (const auto& name : pretrained.names) {
        if (name == "audio_in_proj.weight") {
            std::vector<float> w(2 * C * h, 0.f);
            std::memcpy(w.data(), w_old.data().data(), sizeof(float) * C * h);
            out.add(name, Tensor::from_data({2 * C, h}, std::move(w)));
        } else {
            out.add(name, pretrained.at(name).clone());
        }
    }
    return out;
}

FreezeMask freeze_sets(const std::string& config_name) {
    if (config_name == "scratch" || config_name == "pretrain_all") return FreezeMask{};
    if (config_name == "pretrain_frozen") {
        // updated set: audio projection layer + multimodal blocks; everything
        // else (modality/sync projections, positional embeddings, pooled-cond
        // MLP, audio-only blocks, final head) stays frozen
        return FreezeMask{{"video_proj", "text_proj", "sync_proj", "pos.", "cond.", "a_block.",
                           "head."}};
    }
    throw ConfigError("unknown train config '" + config_name +
                      "' (expected scratch | pretrain_all | pretrain_frozen)");
}

nlohmann::json model_config_to_json(const ModelConfig& m) {
    return {{"hidden", m.hidden},
            {"heads", m.heads},
            {"n_joint", m.n_joint},
            {"n_audio", m.n_audio},
            {"cond_channels", m.cond_channels},
            {"time_embed_dim", m.time_embed_dim},
            {"latent_channels", m.latent_channels},
            {"audio_frames", m.audio_frames},
            {"video_tokens", m.video_tokens},
            {"video_dim", m.video_dim},
            {"sync_tokens", m.sync_tokens},
            {"sync_dim", m.sync_dim},
            {"text_tokens", m.text_tokens},
            {"text_dim", m.text_dim}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig m;
    m.hidden = j.at("hidden").get<int64_t>();
    m.heads = j.at("heads").get<int64_t>();
    m.n_joint = j.at("n_joint").get<int64_t>();
    m.n_audio = j.at("n_audio").get<int64_t>();
    m.cond_channels = j.at("cond_channels").get<int64_t>();
    m.time_embed_dim = j.at("time_embed_dim").get<int64_t>();
    m.latent_channels = j.at("latent_channels").get<int64_t>();
    m.audio_frames = j.at("audio_frames").get<int64_t>();
    m.video_tokens = j.at("video_tokens").get<int64_t>();
    m.video_dim = j.at("video_dim").get<int64_t>();
    m.sync_tokens = j.at("sync_tokens").get<int64_t>();
    m.sync_dim = j.at("sync_dim").get<int64_t>();
    m.text_tokens = j.at("text_tokens").get<int64_t>();
    m.text_dim = j.at("text_dim").get<int64_t>();
    return m;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& model,
                     const WorldConfig& world, const std::string& train_config, int64_t step,
                     const ParamStore& params) {
    std::vector<NamedTensor> tensors;
    tensors.reserve(params.names.size());
    for (const auto& name : params.names) {
        const auto& t = params.at(name);
        tensors.push_back({name, t.shape(), t.data()});
    }
    nlohmann::json meta = {{"kind", "checkpoint"},
                           {"model", model_config_to_json(model)},
                           {"world", world_config_to_json(world)},
                           {"train_config", train_config},
                           {"step", step}};
    write_container(path, kCheckpointMagic, 1, meta, tensors);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    Container c = read_container(path, kCheckpointMagic);
    Checkpoint ck;
    ck.model = model_config_from_json(c.meta.at("model"));
    ck.world = world_config_from_json(c.meta.at("world"));
    ck.train_config = c.meta.value("train_config", "");
    ck.step = c.meta.value("step", int64_t(0));
    for (auto& t : c.tensors)
        ck.params.add(t.name, Tensor::from_data(t.shape, std::move(t.data)));
    return ck;
}

}  // namespace cfmsep

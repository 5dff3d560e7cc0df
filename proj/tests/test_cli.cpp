#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cfmsep/evalsuite.hpp"
#include "cfmsep/io.hpp"

using namespace cfmsep;
namespace fs = std::filesystem;

namespace {

int run_cmd(const std::string& args, const std::string& extra_env = "") {
    const std::string cmd = extra_env + " " + std::string(CFMSEP_BIN) + " " + args +
                            " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

fs::path workspace() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "cfmsep_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

// small geometry so CLI-driven training stays fast
fs::path small_config() {
    static fs::path path = [] {
        fs::path p = workspace() / "small.json";
        nlohmann::json j = {
            {"seed", 4321},
            {"world",
             {{"num_classes", 4},
              {"audio_frames", 12},
              {"latent_channels", 4},
              {"video_tokens", 3},
              {"video_dim", 6},
              {"sync_tokens", 6},
              {"sync_dim", 5},
              {"text_tokens", 2},
              {"text_dim", 6}}},
            {"model",
             {{"hidden", 24}, {"heads", 2}, {"n_joint", 2}, {"n_audio", 1},
              {"time_embed_dim", 8}}},
            {"run",
             {{"pretrain_steps", 10},
              {"finetune_steps", 8},
              {"batch", 8},
              {"eval_every", 0},
              {"warmup_steps", 5}}},
            {"sampler", {{"steps", 4}, {"guidance_scale", 4.5}}}};
        std::ofstream(p) << j.dump(2);
        return p;
    }();
    return path;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST_CASE("gen-data writes the requested pair count and is checksum-stable") {
    auto dir1 = workspace() / "gd1";
    auto dir2 = workspace() / "gd2";
    REQUIRE(run_cmd("gen-data --config " + q(small_config()) + " --out " + q(dir1) +
                    " --pairs 16") == 0);
    REQUIRE(run_cmd("gen-data --config " + q(small_config()) + " --out " + q(dir2) +
                    " --pairs 16") == 0);

    EvalSet set = import_eval_set(dir1 / "eval_set.bin");
    CHECK(set.pairs.size() == 16);
    for (const auto& p : set.pairs) CHECK(p.sample.snr_db == 0.0f);

    CHECK(file_hash_hex(dir1 / "eval_set.bin") == file_hash_hex(dir2 / "eval_set.bin"));
    CHECK(file_hash_hex(dir1 / "probe.ckpt") == file_hash_hex(dir2 / "probe.ckpt"));

    ProbeModel probe = load_probe(dir1 / "probe.ckpt");
    CHECK(probe.heldout_accuracy >= 0.95);

    // resolved.json echoes the resolved sampler settings
    auto resolved = nlohmann::json::parse(std::ifstream(dir1 / "resolved.json"));
    CHECK(resolved["sampler"]["steps"] == 4);
    CHECK(resolved["sampler"]["guidance_scale"] == 4.5);
    CHECK(resolved["run"]["pretrain_steps"] == 10);
}

TEST_CASE("config errors exit with code 3") {
    auto bad = workspace() / "bad.json";
    std::ofstream(bad) << R"({"world": {"nombre_de_classes": 8}})";
    CHECK(run_cmd("gen-data --config " + q(bad) + " --out " + q(workspace() / "nope")) == 3);

    auto bad2 = workspace() / "bad2.json";
    std::ofstream(bad2) << R"({"frobnicate": 1})";
    CHECK(run_cmd("pretrain --config " + q(bad2) + " --out " + q(workspace() / "nope2")) == 3);
}

TEST_CASE("finetune without --init exits 4 and names the flag") {
    const std::string cmd = std::string(CFMSEP_BIN) + " finetune --config " +
                            q(small_config()) + " --out " + q(workspace() / "ft_noinit") +
                            " --train-config pretrain_frozen 2> " +
                            q(workspace() / "stderr.txt");
    const int status = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(status) == 4);
    std::ifstream err(workspace() / "stderr.txt");
    std::string text((std::istreambuf_iterator<char>(err)), std::istreambuf_iterator<char>());
    CHECK(text.find("--init") != std::string::npos);

    CHECK(run_cmd("finetune --config " + q(small_config()) + " --out " +
                  q(workspace() / "ft_badname") + " --train-config bogus") == 3);
}

TEST_CASE("pretrain, finetune, separate, generate, eval round trip") {
    auto pre_dir = workspace() / "pre";
    REQUIRE(run_cmd("pretrain --config " + q(small_config()) + " --out " + q(pre_dir)) == 0);
    const fs::path pre_ckpt = pre_dir / "pretrain.ckpt";
    CHECK(fs::exists(pre_ckpt));
    CHECK(load_checkpoint(pre_ckpt).train_config == "pretrain");

    // scratch: header records the train config
    auto ft_scratch = workspace() / "ft_scratch";
    REQUIRE(run_cmd("finetune --config " + q(small_config()) + " --out " + q(ft_scratch) +
                    " --train-config scratch") == 0);
    CHECK(load_checkpoint(ft_scratch / "finetune_scratch.ckpt").train_config == "scratch");

    auto ft_dir = workspace() / "ft";
    REQUIRE(run_cmd("finetune --config " + q(small_config()) + " --out " + q(ft_dir) +
                    " --train-config pretrain_frozen --init " + q(pre_ckpt)) == 0);
    const fs::path sep_ckpt = ft_dir / "finetune_pretrain_frozen.ckpt";
    REQUIRE(fs::exists(sep_ckpt));

    auto gd = workspace() / "gd_full";
    REQUIRE(run_cmd("gen-data --config " + q(small_config()) + " --out " + q(gd) +
                    " --pairs 8") == 0);

    // separate with defaults: manifest echoes steps=25, cfg=4.5
    auto sep_out = workspace() / "sep";
    REQUIRE(run_cmd("separate --ckpt " + q(sep_ckpt) + " --eval-set " + q(gd / "eval_set.bin") +
                    " --out " + q(sep_out)) == 0);
    auto manifest = nlohmann::json::parse(std::ifstream(sep_out / "manifest.json"));
    CHECK(manifest["steps"] == 25);
    CHECK(manifest["cfg"] == 4.5);
    CHECK(manifest["query"] == "text+video");
    CHECK(manifest["n"] == 8);
    Container outs = read_container(sep_out / "outputs.bin", "CFMSEPDS");
    CHECK(outs.tensors.size() == 8);

    // --query text is accepted; --mixture-sub on separate is rejected
    auto sep_text = workspace() / "sep_text";
    CHECK(run_cmd("separate --ckpt " + q(sep_ckpt) + " --eval-set " + q(gd / "eval_set.bin") +
                  " --out " + q(sep_text) + " --query text --steps 4") == 0);
    CHECK(run_cmd("separate --ckpt " + q(sep_ckpt) + " --eval-set " + q(gd / "eval_set.bin") +
                  " --out " + q(workspace() / "sep_bad") + " --mixture-sub white_noise") == 3);
    CHECK(run_cmd("separate --ckpt " + q(sep_ckpt) + " --eval-set " + q(gd / "eval_set.bin") +
                  " --out " + q(workspace() / "sep_badq") + " --query video") == 3);

    // generate accepts the substitutes; a 1-channel checkpoint cannot separate
    auto gen_out = workspace() / "gen";
    CHECK(run_cmd("generate --ckpt " + q(sep_ckpt) + " --eval-set " + q(gd / "eval_set.bin") +
                  " --out " + q(gen_out) + " --mixture-sub zeros --steps 4") == 0);
    CHECK(run_cmd("separate --ckpt " + q(pre_ckpt) + " --eval-set " + q(gd / "eval_set.bin") +
                  " --out " + q(workspace() / "sep_1ch") + " --steps 4") == 3);

    // eval: full report with schema version and the mixture baseline row
    const fs::path report = workspace() / "report" / "report.json";
    REQUIRE(run_cmd("eval --ckpt " + q(sep_ckpt) + " --eval-set " + q(gd / "eval_set.bin") +
                    " --mode separation --out " + q(report)) == 0);
    auto j = nlohmann::json::parse(std::ifstream(report));
    CHECK(j["v"] == 1);
    for (const char* key :
         {"fd", "is_analog", "align_text", "align_audio", "desync", "si_snr_db", "kl_paired", "n"})
        CHECK(j.contains(key));
    CHECK(j["mixture"].contains("fd"));
    CHECK(j["n"] == 8);

    CHECK(run_cmd("eval --ckpt " + q(sep_ckpt) + " --eval-set " + q(gd / "eval_set.bin") +
                  " --mode nonsense --out " + q(workspace() / "r2.json")) == 3);

    // a probe below the accuracy bar voids evaluation: exit 5
    ProbeModel weak = load_probe(gd / "probe.ckpt");
    weak.heldout_accuracy = 0.5;
    save_probe(gd / "weak_probe.ckpt", weak);
    CHECK(run_cmd("eval --ckpt " + q(sep_ckpt) + " --eval-set " + q(gd / "eval_set.bin") +
                  " --mode separation --out " + q(workspace() / "r3.json") + " --probe " +
                  q(gd / "weak_probe.ckpt")) == 5);
}

TEST_CASE("CFMSEP_SEED overrides the config seed below flags") {
    auto d1 = workspace() / "env1";
    auto d2 = workspace() / "env2";
    REQUIRE(run_cmd("gen-data --config " + q(small_config()) + " --out " + q(d1) + " --pairs 4",
                    "CFMSEP_SEED=777") == 0);
    REQUIRE(run_cmd("gen-data --config " + q(small_config()) + " --out " + q(d2) + " --pairs 4") ==
            0);
    CHECK(file_hash_hex(d1 / "eval_set.bin") != file_hash_hex(d2 / "eval_set.bin"));
    auto resolved = nlohmann::json::parse(std::ifstream(d1 / "resolved.json"));
    CHECK(resolved["seed"] == 777);
}

TEST_CASE("grad-check command passes on a small config") {
    CHECK(run_cmd("grad-check --config " + q(small_config())) == 0);
}

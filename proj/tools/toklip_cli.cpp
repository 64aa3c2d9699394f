#include <CLI11.hpp>

#include <iostream>

#include "toklip/config.hpp"
#include "toklip/stages.hpp"

namespace {

using toklip::RunConfig;

// Registers a flag that overrides a config key when present on the command
// line. Values land in `holders` so they outlive parsing.
struct Overrides {
    std::vector<std::pair<std::string, std::string>> pairs;

    void apply_to(RunConfig& cfg) const {
        for (const auto& [k, v] : pairs) cfg.apply(k, v);
    }
};

void add_override(CLI::App* cmd, Overrides& ov, const std::string& flag, const std::string& key,
                  const std::string& desc) {
    auto opt = cmd->add_option_function<std::string>(
        flag, [&ov, key](const std::string& v) { ov.pairs.emplace_back(key, v); }, desc);
    opt->expected(1);
}

void add_common(CLI::App* cmd, Overrides& ov) {
    add_override(cmd, ov, "--seed", "seed", "root seed");
    add_override(cmd, ov, "--data", "data_dir", "dataset directory");
    add_override(cmd, ov, "--run-dir", "run_dir", "output/run directory");
    add_override(cmd, ov, "--threads", "threads", "worker cap (default TOKLIP_THREADS or hardware)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toklip: discrete-to-continuous visual tokenizer pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "TOML config file (flags override it)");

    Overrides ov;
    std::string stage;

    auto* gen = app.add_subcommand("gen-data", "render the synthetic captioned-shapes dataset");
    add_common(gen, ov);
    add_override(gen, ov, "--n-train", "n_train", "train sample count");
    add_override(gen, ov, "--n-test", "n_test", "test sample count");
    add_override(gen, ov, "--out", "data_dir", "output directory");

    auto* tvq = app.add_subcommand("train-vq", "train the VQ tokenizer");
    add_common(tvq, ov);
    add_override(tvq, ov, "--steps", "vq.steps", "training steps");
    add_override(tvq, ov, "--batch", "vq.batch", "batch size");
    add_override(tvq, ov, "--lr-scale", "vq.lr_scale", "LR multiplier");

    auto* tte = app.add_subcommand("train-teacher", "train the dual-encoder teacher");
    add_common(tte, ov);
    add_override(tte, ov, "--steps", "teacher.steps", "training steps");
    add_override(tte, ov, "--batch", "teacher.batch", "batch size");
    add_override(tte, ov, "--lr-scale", "teacher.lr_scale", "LR multiplier");

    auto* tto = app.add_subcommand("train-toklip", "train the token-encoder student");
    add_common(tto, ov);
    add_override(tto, ov, "--steps", "toklip.steps", "training steps");
    add_override(tto, ov, "--batch", "toklip.batch", "batch size");
    add_override(tto, ov, "--lr-scale", "toklip.lr_scale", "LR multiplier");
    add_override(tto, ov, "--attention", "toklip.attention", "causal | bidirectional");
    add_override(tto, ov, "--mapping", "toklip.mapping", "mlp | codebook");
    add_override(tto, ov, "--distill", "toklip.distill", "cls | all | none");
    add_override(tto, ov, "--init", "toklip.init", "teacher | scratch");
    add_override(tto, ov, "--vq", "vq_ckpt", "VQ checkpoint path");
    add_override(tto, ov, "--teacher", "teacher_ckpt", "teacher checkpoint path");

    auto* tar = app.add_subcommand("train-ar", "train the multimodal AR transformer");
    add_common(tar, ov);
    add_override(tar, ov, "--steps", "ar.steps", "training steps");
    add_override(tar, ov, "--batch", "ar.batch", "batch size");
    add_override(tar, ov, "--lr-scale", "ar.lr_scale", "LR multiplier");
    add_override(tar, ov, "--fusion", "ar.fusion", "sum | weighted_sum | concat | vq_only");
    add_override(tar, ov, "--vq", "vq_ckpt", "VQ checkpoint path");
    add_override(tar, ov, "--teacher", "teacher_ckpt", "teacher checkpoint path");
    add_override(tar, ov, "--toklip", "toklip_ckpt", "student checkpoint path");
    add_override(tar, ov, "--attention", "toklip.attention", "student attention mode (for loading)");
    add_override(tar, ov, "--mapping", "toklip.mapping", "student mapping mode (for loading)");
    add_override(tar, ov, "--distill", "toklip.distill", "student distill target (for loading)");
    add_override(tar, ov, "--init", "toklip.init", "student init mode (for loading)");

    auto* gen_img = app.add_subcommand("generate", "sample class-conditional images");
    add_common(gen_img, ov);
    add_override(gen_img, ov, "--class", "sampler.class_id", "class id (default cycles 0..15)");
    add_override(gen_img, ov, "--cfg", "sampler.cfg_scale", "guidance scale");
    add_override(gen_img, ov, "--top-k", "sampler.top_k", "top-k cutoff (0 = all)");
    add_override(gen_img, ov, "--top-p", "sampler.top_p", "nucleus mass");
    add_override(gen_img, ov, "--temperature", "sampler.temperature", "softmax temperature");
    add_override(gen_img, ov, "--greedy", "sampler.greedy", "argmax decoding");
    add_override(gen_img, ov, "--n", "sampler.n", "number of samples");
    add_override(gen_img, ov, "--vq", "vq_ckpt", "VQ checkpoint path");
    add_override(gen_img, ov, "--toklip", "toklip_ckpt", "student checkpoint path");
    add_override(gen_img, ov, "--ar", "ar_ckpt", "AR checkpoint path");
    add_override(gen_img, ov, "--fusion", "ar.fusion", "AR fusion mode (for loading)");
    add_override(gen_img, ov, "--attention", "toklip.attention", "student attention mode (for loading)");
    add_override(gen_img, ov, "--mapping", "toklip.mapping", "student mapping mode (for loading)");

    auto* ev = app.add_subcommand("eval", "evaluate frozen checkpoints");
    add_common(ev, ov);
    add_override(ev, ov, "--task", "eval.task", "zero-shot | retrieval | similarity | psnr | fid | all");
    add_override(ev, ov, "--vq", "vq_ckpt", "VQ checkpoint path");
    add_override(ev, ov, "--teacher", "teacher_ckpt", "teacher checkpoint path");
    add_override(ev, ov, "--toklip", "toklip_ckpt", "student checkpoint path");
    add_override(ev, ov, "--ar", "ar_ckpt", "AR checkpoint path");
    add_override(ev, ov, "--n", "sampler.n", "samples for the fid task");
    add_override(ev, ov, "--fusion", "ar.fusion", "AR fusion mode (for loading)");
    add_override(ev, ov, "--attention", "toklip.attention", "student attention mode (for loading)");
    add_override(ev, ov, "--mapping", "toklip.mapping", "student mapping mode (for loading)");
    add_override(ev, ov, "--distill", "toklip.distill", "student distill target (for loading)");
    add_override(ev, ov, "--init", "toklip.init", "student init mode (for loading)");

    auto* rep = app.add_subcommand("report", "aggregate run metrics into report.csv");
    add_common(rep, ov);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    for (auto* cmd : app.get_subcommands()) stage = cmd->get_name();

    try {
        RunConfig cfg;
        if (!config_path.empty()) cfg.apply_file(config_path);
        ov.apply_to(cfg);
        cfg.stage = stage;
        toklip::run_stage(cfg);
        return 0;
    } catch (const toklip::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "toklip/common.hpp"

namespace toklip {

// Full experiment description. Flat dotted keys; unknown keys are rejected.
// File format is a TOML subset: `key = value` lines, [section] headers that
// prefix the keys that follow, `#` comments, quoted strings, numbers, bools.
struct RunConfig {
    std::string stage;
    uint64_t seed = 0;
    std::vector<uint64_t> seeds = {0, 1, 2};  // ablation/report seeds
    std::string data_dir = "data";
    std::string run_dir = "runs/default";
    std::string vq_ckpt, teacher_ckpt, toklip_ckpt, ar_ckpt;
    int threads = 0;  // 0 = TOKLIP_THREADS env or hardware

    int n_train = 1600;
    int n_test = 400;

    // base LR and warmup follow the stock recipe (AdamW, 1e-5, 500 warmup
    // steps, cosine); the *_scale factors adapt both to desk scale
    double base_lr = 1e-5;
    int base_warmup = 500;

    int vq_steps = 600;
    int vq_batch = 32;
    double vq_lr_scale = 100.0;
    double vq_warmup_scale = 0.1;

    int teacher_steps = 350;
    int teacher_batch = 32;
    double teacher_lr_scale = 100.0;
    double teacher_warmup_scale = 0.1;

    int toklip_steps = 300;
    int toklip_batch = 32;
    double toklip_lr_scale = 100.0;
    double toklip_warmup_scale = 0.1;
    std::string toklip_attention = "causal";
    std::string toklip_mapping = "mlp";
    std::string toklip_distill = "cls";
    std::string toklip_init = "teacher";

    int ar_steps = 300;
    int ar_batch = 16;
    double ar_lr_scale = 100.0;
    double ar_warmup_scale = 0.1;
    std::string ar_fusion = "concat";

    double sampler_cfg_scale = 2.5;
    int sampler_top_k = 0;
    double sampler_top_p = 1.0;
    double sampler_temperature = 1.0;
    bool sampler_greedy = false;
    int sampler_n = 16;
    int sampler_class_id = -1;  // -1 cycles classes

    std::string eval_task = "all";

    void apply(const std::string& key, const std::string& value);
    static RunConfig from_file(const std::string& path);
    void apply_file(const std::string& path);

    std::string canonical() const;
    uint64_t hash() const { return fnv1a(canonical()); }

    int effective_threads() const;
};

}  // namespace toklip

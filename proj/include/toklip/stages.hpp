#pragma once

#include <optional>
#include <string>
#include <vector>

#include "toklip/armm.hpp"
#include "toklip/incremental.hpp"
#include "toklip/config.hpp"
#include "toklip/eval.hpp"
#include "toklip/metrics.hpp"
#include "toklip/synthdata.hpp"
#include "toklip/teacher.hpp"
#include "toklip/toklip.hpp"
#include "toklip/vq.hpp"

namespace toklip {

VqConfig make_vq_config();
TeacherConfig make_teacher_config();
ToklipConfig make_toklip_config(const RunConfig& cfg);
ArConfig make_ar_config(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// In-memory stage functions. Each returns the trained model already frozen
// (except the AR model, which stays trainable until saved). `curve`, when
// given, receives the per-step loss values.
// ---------------------------------------------------------------------------

VqModel<float> train_vq_stage(const RunConfig& cfg, const synth::Dataset& ds,
                              MetricsWriter* metrics = nullptr, std::vector<double>* curve = nullptr);

Teacher<float> train_teacher_stage(const RunConfig& cfg, const synth::Dataset& ds,
                                   MetricsWriter* metrics = nullptr,
                                   std::vector<double>* curve = nullptr);

ToklipModel<float> train_toklip_stage(const RunConfig& cfg, const synth::Dataset& ds,
                                      const VqModel<float>& vq, const Teacher<float>& teacher,
                                      MetricsWriter* metrics = nullptr,
                                      std::vector<double>* curve = nullptr, bool freeze_result = true);

ArModel<float> train_ar_stage(const RunConfig& cfg, const synth::Dataset& ds,
                              const ToklipModel<float>& toklip, const VqModel<float>& vq,
                              MetricsWriter* metrics = nullptr, std::vector<double>* curve = nullptr);

// ---------------------------------------------------------------------------
// Evaluation helpers shared by the eval runner and the acceptance suite.
// ---------------------------------------------------------------------------

std::vector<const std::vector<float>*> image_ptrs(const std::vector<synth::CaptionedImage>& split);

EmbedMatrix class_prompt_embeddings(const Teacher<float>& teacher);

ZeroShotResult zero_shot_toklip(const ToklipModel<float>& toklip, const VqModel<float>& vq,
                                const Teacher<float>& teacher,
                                const std::vector<synth::CaptionedImage>& split, int threads);
ZeroShotResult zero_shot_teacher(const Teacher<float>& teacher,
                                 const std::vector<synth::CaptionedImage>& split, int threads);

// One image per distinct (shape, color, background) triple found in the
// split, in ascending triple order; all 64 triples must be present.
std::vector<int> retrieval_pool_indices(const std::vector<synth::CaptionedImage>& split);

RetrievalResult retrieval_toklip(const ToklipModel<float>& toklip, const VqModel<float>& vq,
                                 const Teacher<float>& teacher,
                                 const std::vector<synth::CaptionedImage>& split, int threads);

SimilarityResult similarity_toklip(const ToklipModel<float>& toklip, const VqModel<float>& vq,
                                   const Teacher<float>& teacher,
                                   const std::vector<synth::CaptionedImage>& split, int threads,
                                   const std::string& export_csv = "");

// Generates `n` class-conditional samples (class = index % 16 unless fixed in
// the sampler config) in parallel and returns them; deterministic per
// (seed, sample index).
std::vector<SampleResult<float>> generate_samples(const ArModel<float>& ar,
                                                  const ToklipModel<float>& toklip,
                                                  const VqModel<float>& vq, const SamplerConfig& scfg,
                                                  int n, int fixed_class, int threads);

double fid_of_samples(const Teacher<float>& teacher, const std::vector<SampleResult<float>>& samples,
                      const std::vector<synth::CaptionedImage>& real, int threads);

// ---------------------------------------------------------------------------
// File-based stage runners (what the CLI calls).
// ---------------------------------------------------------------------------

void run_gen_data(const RunConfig& cfg);
void run_train_vq(const RunConfig& cfg);
void run_train_teacher(const RunConfig& cfg);
void run_train_toklip(const RunConfig& cfg);
void run_train_ar(const RunConfig& cfg);
void run_generate(const RunConfig& cfg);
void run_eval(const RunConfig& cfg);
void run_report(const RunConfig& cfg);
void run_stage(const RunConfig& cfg);  // dispatch on cfg.stage

// Checkpoint loaders: reconstruct the architecture, load weights, freeze.
VqModel<float> load_vq(const std::string& path);
Teacher<float> load_teacher(const std::string& path);
ToklipModel<float> load_toklip(const std::string& path, const RunConfig& cfg);
ArModel<float> load_ar(const std::string& path, const RunConfig& cfg);

std::string default_ckpt_path(const RunConfig& cfg, const std::string& name);

}  // namespace toklip

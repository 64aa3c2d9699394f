#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "toklip/synthdata.hpp"
#include "toklip/teacher.hpp"
#include "toklip/toklip.hpp"
#include "toklip/vq.hpp"

namespace toklip {

using EmbedMatrix = std::vector<std::vector<float>>;

// Shards [0, n) into `workers` contiguous ranges; results must be written by
// index so the reduction order is fixed no matter the worker count.
void parallel_shards(int n, int workers, const std::function<void(int begin, int end)>& fn);

EmbedMatrix teacher_pooled_embeddings(const Teacher<float>& teacher,
                                      const std::vector<const std::vector<float>*>& images,
                                      int threads, int batch = 32);
EmbedMatrix teacher_cls_embeddings(const Teacher<float>& teacher,
                                   const std::vector<const std::vector<float>*>& images,
                                   int threads, int batch = 32);
EmbedMatrix teacher_text_embeddings(const Teacher<float>& teacher,
                                    const std::vector<std::vector<int>>& token_lists, int batch = 64);
EmbedMatrix toklip_embeddings(const ToklipModel<float>& student, const VqModel<float>& vq,
                              const std::vector<const std::vector<float>*>& images, int threads,
                              int batch = 32);

struct ZeroShotResult {
    double top1 = 0, top5 = 0;
};

// argmax cosine(image embedding, prompt embedding); ties to the lowest class.
ZeroShotResult zero_shot_classify(const EmbedMatrix& image_embeds, const std::vector<int>& labels,
                                  const EmbedMatrix& prompt_embeds);

struct RetrievalResult {
    double tr1 = 0, ir1 = 0;
};

// One cosine matrix, argmax per row for TR@1 and per column (the transpose)
// for IR@1. Captions must be unique within the pool.
RetrievalResult retrieval_eval(const EmbedMatrix& image_embeds, const EmbedMatrix& text_embeds,
                               const std::vector<std::string>& captions);

struct SimilarityResult {
    double mean_cosine = 0;
    std::vector<double> per_image;
};

SimilarityResult feature_similarity(const EmbedMatrix& student_z, const EmbedMatrix& teacher_z);

struct PsnrResult {
    double mean_db = 0;  // finite entries only
    int infinite = 0;    // bit-perfect reconstructions, excluded from the mean
    int count = 0;
};

inline double psnr_db(double mse) { return 10.0 * std::log10(1.0 / mse); }

PsnrResult recon_psnr(const VqModel<float>& vq,
                      const std::vector<const std::vector<float>*>& images, int threads);

// Frechet distance between Gaussian fits of two feature sets:
// |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), matrix root via
// eigendecomposition of sqrt(S1) S2 sqrt(S1). Eigenvalues below -1e-6 are an
// error; small negatives clamp to zero.
double fid_proxy(const EmbedMatrix& feats_a, const EmbedMatrix& feats_b);

// Symmetric eigendecomposition (cyclic Jacobi); exposed for tests.
void jacobi_eigh(std::vector<double>& a, int n, std::vector<double>& eigenvalues,
                 std::vector<double>& eigenvectors);

void write_ppm(const std::string& path, const std::vector<float>& pixels, int width, int height);
void write_indices_csv(const std::string& path, const std::vector<std::vector<int>>& rows);
void write_features_csv(const std::string& path, const EmbedMatrix& rows);

}  // namespace toklip

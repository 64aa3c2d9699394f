#include "toklip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>
#include <unordered_set>

namespace toklip {

void parallel_shards(int n, int workers, const std::function<void(int, int)>& fn) {
    if (workers <= 1 || n <= 1) {
        fn(0, n);
        return;
    }
    workers = std::min(workers, n);
    std::vector<std::thread> pool;
    int chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; w++) {
        int begin = w * chunk;
        int end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back(fn, begin, end);
    }
    for (auto& t : pool) t.join();
}

namespace {

EmbedMatrix rows_to_matrix(const Tensor<float>& t) {
    EmbedMatrix out(static_cast<size_t>(t.rows()));
    for (int i = 0; i < t.rows(); i++)
        out[static_cast<size_t>(i)].assign(t.data() + static_cast<size_t>(i) * t.cols(),
                                           t.data() + static_cast<size_t>(i + 1) * t.cols());
    return out;
}

double dot_f(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); i++) s += static_cast<double>(a[i]) * b[i];
    return s;
}

}  // namespace

EmbedMatrix teacher_pooled_embeddings(const Teacher<float>& teacher,
                                      const std::vector<const std::vector<float>*>& images,
                                      int threads, int batch) {
    int n = static_cast<int>(images.size());
    EmbedMatrix out(static_cast<size_t>(n));
    parallel_shards(n, threads, [&](int begin, int end) {
        for (int i = begin; i < end; i += batch) {
            int stop = std::min(end, i + batch);
            std::vector<const std::vector<float>*> chunk(images.begin() + i, images.begin() + stop);
            Tensor<float> z = teacher.encode_images_pooled(nullptr, chunk);
            EmbedMatrix rows = rows_to_matrix(z);
            for (int j = i; j < stop; j++) out[static_cast<size_t>(j)] = std::move(rows[static_cast<size_t>(j - i)]);
        }
    });
    return out;
}

EmbedMatrix teacher_cls_embeddings(const Teacher<float>& teacher,
                                   const std::vector<const std::vector<float>*>& images, int threads,
                                   int batch) {
    int n = static_cast<int>(images.size());
    EmbedMatrix out(static_cast<size_t>(n));
    parallel_shards(n, threads, [&](int begin, int end) {
        for (int i = begin; i < end; i += batch) {
            int stop = std::min(end, i + batch);
            std::vector<const std::vector<float>*> chunk(images.begin() + i, images.begin() + stop);
            ImageEncoding<float> enc = teacher.encode_images(nullptr, chunk);
            EmbedMatrix rows = rows_to_matrix(enc.z);
            for (int j = i; j < stop; j++) out[static_cast<size_t>(j)] = std::move(rows[static_cast<size_t>(j - i)]);
        }
    });
    return out;
}

EmbedMatrix teacher_text_embeddings(const Teacher<float>& teacher,
                                    const std::vector<std::vector<int>>& token_lists, int batch) {
    int n = static_cast<int>(token_lists.size());
    EmbedMatrix out(static_cast<size_t>(n));
    for (int i = 0; i < n; i += batch) {
        int stop = std::min(n, i + batch);
        std::vector<std::vector<int>> chunk(token_lists.begin() + i, token_lists.begin() + stop);
        Tensor<float> z = teacher.encode_texts(nullptr, chunk);
        EmbedMatrix rows = rows_to_matrix(z);
        for (int j = i; j < stop; j++) out[static_cast<size_t>(j)] = std::move(rows[static_cast<size_t>(j - i)]);
    }
    return out;
}

EmbedMatrix toklip_embeddings(const ToklipModel<float>& student, const VqModel<float>& vq,
                              const std::vector<const std::vector<float>*>& images, int threads,
                              int batch) {
    int n = static_cast<int>(images.size());
    EmbedMatrix out(static_cast<size_t>(n));
    int t = vq.cfg.tokens(), dhat = vq.cfg.dhat;
    parallel_shards(n, threads, [&](int begin, int end) {
        for (int i = begin; i < end; i += batch) {
            int stop = std::min(end, i + batch);
            int b = stop - i;
            Tensor<float> codes = Tensor<float>::zeros({b * t, dhat});
            std::vector<int> indices;
            indices.reserve(static_cast<size_t>(b) * t);
            for (int j = 0; j < b; j++) {
                CodeGrid<float> grid = vq.encode_image(*images[static_cast<size_t>(i + j)]);
                std::memcpy(codes.data() + static_cast<size_t>(j) * t * dhat, grid.embeddings.data(),
                            sizeof(float) * grid.embeddings.v().size());
                indices.insert(indices.end(), grid.indices.begin(), grid.indices.end());
            }
            auto enc = student.encode(nullptr, codes, indices, b);
            EmbedMatrix rows = rows_to_matrix(enc.z);
            for (int j = i; j < stop; j++) out[static_cast<size_t>(j)] = std::move(rows[static_cast<size_t>(j - i)]);
        }
    });
    return out;
}

ZeroShotResult zero_shot_classify(const EmbedMatrix& image_embeds, const std::vector<int>& labels,
                                  const EmbedMatrix& prompt_embeds) {
    require(!image_embeds.empty(), "zero_shot: empty test set");
    require(image_embeds.size() == labels.size(), "zero_shot: label count mismatch");
    int n_class = static_cast<int>(prompt_embeds.size());
    int hit1 = 0, hit5 = 0;
    for (size_t i = 0; i < image_embeds.size(); i++) {
        int truth = labels[i];
        require(truth >= 0 && truth < n_class, "zero_shot: label out of range");
        std::vector<double> scores(static_cast<size_t>(n_class));
        for (int c = 0; c < n_class; c++) scores[static_cast<size_t>(c)] = dot_f(image_embeds[i], prompt_embeds[static_cast<size_t>(c)]);
        // rank of the true class with ties resolved toward the lowest id
        int rank = 0;
        for (int c = 0; c < n_class; c++) {
            if (c == truth) continue;
            if (scores[static_cast<size_t>(c)] > scores[static_cast<size_t>(truth)] ||
                (scores[static_cast<size_t>(c)] == scores[static_cast<size_t>(truth)] && c < truth))
                rank++;
        }
        if (rank < 1) hit1++;
        if (rank < 5) hit5++;
    }
    ZeroShotResult r;
    r.top1 = static_cast<double>(hit1) / static_cast<double>(image_embeds.size());
    r.top5 = static_cast<double>(hit5) / static_cast<double>(image_embeds.size());
    return r;
}

RetrievalResult retrieval_eval(const EmbedMatrix& image_embeds, const EmbedMatrix& text_embeds,
                               const std::vector<std::string>& captions) {
    require(image_embeds.size() == text_embeds.size() && image_embeds.size() == captions.size(),
            "retrieval: pool size mismatch");
    std::unordered_set<std::string> seen;
    for (const auto& c : captions)
        require(seen.insert(c).second, "retrieval: duplicate caption in pool: " + c);
    int n = static_cast<int>(image_embeds.size());
    std::vector<std::vector<double>> sim(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(n)));
    for (int i = 0; i < n; i++)
        for (int j = 0; j < n; j++) sim[static_cast<size_t>(i)][static_cast<size_t>(j)] = dot_f(image_embeds[static_cast<size_t>(i)], text_embeds[static_cast<size_t>(j)]);
    int tr = 0, ir = 0;
    for (int i = 0; i < n; i++) {
        int best = 0;
        for (int j = 1; j < n; j++)
            if (sim[static_cast<size_t>(i)][static_cast<size_t>(j)] > sim[static_cast<size_t>(i)][static_cast<size_t>(best)]) best = j;
        if (best == i) tr++;
    }
    for (int j = 0; j < n; j++) {
        int best = 0;
        for (int i = 1; i < n; i++)
            if (sim[static_cast<size_t>(i)][static_cast<size_t>(j)] > sim[static_cast<size_t>(best)][static_cast<size_t>(j)]) best = i;
        if (best == j) ir++;
    }
    RetrievalResult r;
    r.tr1 = static_cast<double>(tr) / n;
    r.ir1 = static_cast<double>(ir) / n;
    return r;
}

SimilarityResult feature_similarity(const EmbedMatrix& student_z, const EmbedMatrix& teacher_z) {
    require(student_z.size() == teacher_z.size(), "similarity: size mismatch");
    SimilarityResult r;
    r.per_image.reserve(student_z.size());
    double sum = 0;
    for (size_t i = 0; i < student_z.size(); i++) {
        double c = dot_f(student_z[i], teacher_z[i]);
        r.per_image.push_back(c);
        sum += c;
    }
    r.mean_cosine = student_z.empty() ? 0.0 : sum / static_cast<double>(student_z.size());
    return r;
}

PsnrResult recon_psnr(const VqModel<float>& vq, const std::vector<const std::vector<float>*>& images,
                      int threads) {
    int n = static_cast<int>(images.size());
    std::vector<double> mses(static_cast<size_t>(n));
    parallel_shards(n, threads, [&](int begin, int end) {
        for (int i = begin; i < end; i++) {
            std::vector<float> rec = vq.reconstruct(*images[static_cast<size_t>(i)]);
            const auto& orig = *images[static_cast<size_t>(i)];
            double mse = 0;
            for (size_t j = 0; j < orig.size(); j++) {
                double d = static_cast<double>(rec[j]) - orig[j];
                mse += d * d;
            }
            mses[static_cast<size_t>(i)] = mse / static_cast<double>(orig.size());
        }
    });
    PsnrResult r;
    r.count = n;
    double sum = 0;
    int finite = 0;
    for (double m : mses) {
        if (m == 0.0) {
            r.infinite++;
            continue;
        }
        sum += psnr_db(m);
        finite++;
    }
    r.mean_db = finite > 0 ? sum / finite : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// FID proxy
// ---------------------------------------------------------------------------

void jacobi_eigh(std::vector<double>& a, int n, std::vector<double>& eigenvalues,
                 std::vector<double>& eigenvectors) {
    eigenvectors.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; i++) eigenvectors[static_cast<size_t>(i) * n + i] = 1.0;
    auto at = [&](int i, int j) -> double& { return a[static_cast<size_t>(i) * n + j]; };
    auto vt = [&](int i, int j) -> double& { return eigenvectors[static_cast<size_t>(i) * n + j]; };
    for (int sweep = 0; sweep < 100; sweep++) {
        double off = 0;
        for (int i = 0; i < n; i++)
            for (int j = i + 1; j < n; j++) off += at(i, j) * at(i, j);
        if (off < 1e-24) break;
        for (int p = 0; p < n - 1; p++) {
            for (int q = p + 1; q < n; q++) {
                double apq = at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int k = 0; k < n; k++) {
                    double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; k++) {
                    double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; k++) {
                    double vkp = vt(k, p), vkq = vt(k, q);
                    vt(k, p) = c * vkp - s * vkq;
                    vt(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    eigenvalues.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; i++) eigenvalues[static_cast<size_t>(i)] = at(i, i);
}

namespace {

struct Gaussian {
    std::vector<double> mean;
    std::vector<double> cov;  // d x d
    int d = 0;
};

Gaussian fit_gaussian(const EmbedMatrix& feats) {
    int n = static_cast<int>(feats.size());
    int d = static_cast<int>(feats[0].size());
    Gaussian g;
    g.d = d;
    g.mean.assign(static_cast<size_t>(d), 0.0);
    for (const auto& row : feats)
        for (int j = 0; j < d; j++) g.mean[static_cast<size_t>(j)] += row[static_cast<size_t>(j)];
    for (auto& m : g.mean) m /= n;
    g.cov.assign(static_cast<size_t>(d) * d, 0.0);
    for (const auto& row : feats) {
        for (int i = 0; i < d; i++) {
            double di = row[static_cast<size_t>(i)] - g.mean[static_cast<size_t>(i)];
            for (int j = 0; j < d; j++)
                g.cov[static_cast<size_t>(i) * d + j] += di * (row[static_cast<size_t>(j)] - g.mean[static_cast<size_t>(j)]);
        }
    }
    for (auto& c : g.cov) c /= (n - 1);
    return g;
}

std::vector<double> sqrtm_psd(std::vector<double> m, int d) {
    std::vector<double> eigval, eigvec;
    jacobi_eigh(m, d, eigval, eigvec);
    for (auto& l : eigval) {
        if (l < -1e-6) throw NumericError("fid: matrix not PSD (eigenvalue " + std::to_string(l) + ")");
        l = l > 0 ? std::sqrt(l) : 0.0;
    }
    // V diag(sqrt l) V^T
    std::vector<double> out(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; i++)
        for (int j = 0; j < d; j++) {
            double s = 0;
            for (int k = 0; k < d; k++)
                s += eigvec[static_cast<size_t>(i) * d + k] * eigval[static_cast<size_t>(k)] *
                     eigvec[static_cast<size_t>(j) * d + k];
            out[static_cast<size_t>(i) * d + j] = s;
        }
    return out;
}

std::vector<double> matmul_d(const std::vector<double>& a, const std::vector<double>& b, int d) {
    std::vector<double> c(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; i++)
        for (int k = 0; k < d; k++) {
            double av = a[static_cast<size_t>(i) * d + k];
            for (int j = 0; j < d; j++) c[static_cast<size_t>(i) * d + j] += av * b[static_cast<size_t>(k) * d + j];
        }
    return c;
}

}  // namespace

double fid_proxy(const EmbedMatrix& feats_a, const EmbedMatrix& feats_b) {
    require(!feats_a.empty() && !feats_b.empty(), "fid: empty feature set");
    int d = static_cast<int>(feats_a[0].size());
    require(static_cast<int>(feats_b[0].size()) == d, "fid: feature dim mismatch");
    require(static_cast<int>(feats_a.size()) >= 2 * d && static_cast<int>(feats_b.size()) >= 2 * d,
            "fid: need at least 2x feature-dim samples per side");
    Gaussian ga = fit_gaussian(feats_a);
    Gaussian gb = fit_gaussian(feats_b);

    double mean_term = 0;
    for (int j = 0; j < d; j++) {
        double diff = ga.mean[static_cast<size_t>(j)] - gb.mean[static_cast<size_t>(j)];
        mean_term += diff * diff;
    }
    double tr_a = 0, tr_b = 0;
    for (int j = 0; j < d; j++) {
        tr_a += ga.cov[static_cast<size_t>(j) * d + j];
        tr_b += gb.cov[static_cast<size_t>(j) * d + j];
    }

    std::vector<double> root_a = sqrtm_psd(ga.cov, d);
    std::vector<double> inner = matmul_d(matmul_d(root_a, gb.cov, d), root_a, d);
    // symmetrize before the eigendecomposition
    for (int i = 0; i < d; i++)
        for (int j = i + 1; j < d; j++) {
            double avg = 0.5 * (inner[static_cast<size_t>(i) * d + j] + inner[static_cast<size_t>(j) * d + i]);
            inner[static_cast<size_t>(i) * d + j] = avg;
            inner[static_cast<size_t>(j) * d + i] = avg;
        }
    std::vector<double> eigval, eigvec;
    jacobi_eigh(inner, d, eigval, eigvec);
    double tr_root = 0;
    for (double l : eigval) {
        if (l < -1e-6) throw NumericError("fid: product matrix not PSD (eigenvalue " + std::to_string(l) + ")");
        tr_root += l > 0 ? std::sqrt(l) : 0.0;
    }
    return mean_term + tr_a + tr_b - 2.0 * tr_root;
}

// ---------------------------------------------------------------------------
// File emitters
// ---------------------------------------------------------------------------

void write_ppm(const std::string& path, const std::vector<float>& pixels, int width, int height) {
    require(static_cast<int>(pixels.size()) == width * height * 3, "ppm: wrong pixel count");
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "ppm: cannot open " + path);
    f << "P6\n" << width << " " << height << "\n255\n";
    std::vector<unsigned char> bytes(pixels.size());
    for (size_t i = 0; i < pixels.size(); i++) {
        float v = pixels[i];
        v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_indices_csv(const std::string& path, const std::vector<std::vector<int>>& rows) {
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream f(path);
    require(f.good(), "csv: cannot open " + path);
    for (size_t i = 0; i < rows.size(); i++) {
        f << i;
        for (int v : rows[i]) f << "," << v;
        f << "\n";
    }
}

void write_features_csv(const std::string& path, const EmbedMatrix& rows) {
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream f(path);
    require(f.good(), "csv: cannot open " + path);
    f.precision(8);
    for (size_t i = 0; i < rows.size(); i++) {
        f << i;
        for (float v : rows[i]) f << "," << v;
        f << "\n";
    }
}

}  // namespace toklip

#pragma once

#include <vector>

#include "toklip/armm.hpp"
#include "toklip/toklip.hpp"
#include "toklip/vq.hpp"

namespace toklip {

// Incremental evaluation of the causal transformers used at sampling time.
// Every per-row computation here follows the exact operation order of the
// batched ops in tensor.hpp (k-ascending accumulation, bias added after the
// accumulation, softmax with running max then one rescale), so extending a
// sequence token by token reproduces the batched forward bit for bit.
namespace incremental {

template <class S>
void linear_row(const Linear<S>& lin, const S* x, S* out) {
    int in = lin.w.rows(), n = lin.w.cols();
    for (int j = 0; j < n; j++) out[j] = S(0);
    for (int k = 0; k < in; k++) {
        S xv = x[k];
        const S* wk = lin.w.data() + static_cast<size_t>(k) * n;
        for (int j = 0; j < n; j++) out[j] += xv * wk[j];
    }
    for (int j = 0; j < n; j++) out[j] += lin.b.data()[j];
}

template <class S>
void layer_norm_row(const LayerNormParams<S>& ln, const S* x, S* out, int n) {
    S mu = S(0);
    for (int j = 0; j < n; j++) mu += x[j];
    mu /= static_cast<S>(n);
    S var = S(0);
    for (int j = 0; j < n; j++) {
        S d = x[j] - mu;
        var += d * d;
    }
    var /= static_cast<S>(n);
    S r = S(1) / std::sqrt(var + ln.eps);
    for (int j = 0; j < n; j++) out[j] = (x[j] - mu) * r * ln.gain.data()[j] + ln.bias.data()[j];
}

template <class S>
void gelu_row(const S* x, S* out, int n) {
    const S inv_sqrt2 = static_cast<S>(0.70710678118654752440);
    for (int j = 0; j < n; j++) out[j] = S(0.5) * x[j] * (S(1) + std::erf(x[j] * inv_sqrt2));
}

// KV-cached stack of pre-norm blocks plus the final layer norm.
template <class S>
class CausalCache {
  public:
    CausalCache(const std::vector<TransformerBlock<S>>* blocks, const LayerNormParams<S>* ln_final,
                int dim, int heads, int max_len)
        : blocks_(blocks), ln_final_(ln_final), dim_(dim), heads_(heads), max_len_(max_len) {
        k_cache_.assign(blocks->size(), std::vector<S>(static_cast<size_t>(max_len) * dim));
        v_cache_.assign(blocks->size(), std::vector<S>(static_cast<size_t>(max_len) * dim));
    }

    int length() const { return len_; }

    // Feeds one embedding row (positional term already added); returns the
    // post-final-norm output row.
    std::vector<S> step(std::vector<S> x) {
        require(static_cast<int>(x.size()) == dim_, "causal cache: bad row width");
        require(len_ < max_len_, "causal cache: sequence exceeds max length");
        int hd = dim_ / heads_;
        S scale = S(1) / std::sqrt(static_cast<S>(hd));
        std::vector<S> h(static_cast<size_t>(dim_)), q(h), att(h), tmp(h);
        std::vector<S> hidden(static_cast<size_t>(4) * dim_), hidden2(hidden);
        for (size_t bi = 0; bi < blocks_->size(); bi++) {
            const auto& blk = (*blocks_)[bi];
            layer_norm_row(blk.ln1, x.data(), h.data(), dim_);
            linear_row(blk.wq, h.data(), q.data());
            S* krow = k_cache_[bi].data() + static_cast<size_t>(len_) * dim_;
            S* vrow = v_cache_[bi].data() + static_cast<size_t>(len_) * dim_;
            {
                std::vector<S> kq(static_cast<size_t>(dim_)), vq_row(static_cast<size_t>(dim_));
                linear_row(blk.wk, h.data(), kq.data());
                linear_row(blk.wv, h.data(), vq_row.data());
                std::memcpy(krow, kq.data(), sizeof(S) * dim_);
                std::memcpy(vrow, vq_row.data(), sizeof(S) * dim_);
            }
            int lim = len_ + 1;
            for (int head = 0; head < heads_; head++) {
                const S* qh = q.data() + head * hd;
                // scores over the cached keys, ascending
                std::vector<S> sc(static_cast<size_t>(lim));
                for (int t = 0; t < lim; t++) {
                    const S* kt = k_cache_[bi].data() + static_cast<size_t>(t) * dim_ + head * hd;
                    S s = S(0);
                    for (int u = 0; u < hd; u++) s += qh[u] * kt[u];
                    sc[static_cast<size_t>(t)] = s;
                }
                S mx = sc[0] * scale;
                for (int t = 1; t < lim; t++) mx = std::max(mx, sc[static_cast<size_t>(t)] * scale);
                S sum = S(0);
                for (int t = 0; t < lim; t++) {
                    sc[static_cast<size_t>(t)] = std::exp(sc[static_cast<size_t>(t)] * scale - mx);
                    sum += sc[static_cast<size_t>(t)];
                }
                S inv = S(1) / sum;
                for (int t = 0; t < lim; t++) sc[static_cast<size_t>(t)] *= inv;
                S* out = att.data() + head * hd;
                for (int u = 0; u < hd; u++) out[u] = S(0);
                for (int t = 0; t < lim; t++) {
                    S p = sc[static_cast<size_t>(t)];
                    const S* vt = v_cache_[bi].data() + static_cast<size_t>(t) * dim_ + head * hd;
                    for (int u = 0; u < hd; u++) out[u] += p * vt[u];
                }
            }
            linear_row(blk.wo, att.data(), tmp.data());
            for (int j = 0; j < dim_; j++) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];
            layer_norm_row(blk.ln2, x.data(), h.data(), dim_);
            linear_row(blk.fc1, h.data(), hidden.data());
            gelu_row(hidden.data(), hidden2.data(), 4 * dim_);
            linear_row(blk.fc2, hidden2.data(), tmp.data());
            for (int j = 0; j < dim_; j++) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];
        }
        len_++;
        std::vector<S> out(static_cast<size_t>(dim_));
        layer_norm_row(*ln_final_, x.data(), out.data(), dim_);
        return out;
    }

  private:
    const std::vector<TransformerBlock<S>>* blocks_;
    const LayerNormParams<S>* ln_final_;
    int dim_, heads_, max_len_;
    int len_ = 0;
    std::vector<std::vector<S>> k_cache_, v_cache_;
};

// Grows the student token encoder over an emitted code prefix one code at a
// time, returning the semantic feature row for each new code.
template <class S>
class TokenEncoderCache {
  public:
    explicit TokenEncoderCache(const ToklipModel<S>* model)
        : model_(model),
          cache_(&model->encoder.blocks, &model->encoder.ln_final, model->cfg.d, model->cfg.heads,
                 model->cfg.tokens + 1) {
        require(model->causal(), "token encoder cache: model must be causal");
    }

    std::vector<S> step(const std::vector<S>& code_emb_row, int code_index, int grid_pos) {
        int d = model_->cfg.d;
        std::vector<S> projected(static_cast<size_t>(d));
        if (model_->cfg.mapping == MappingMode::kMlp) {
            std::vector<S> hid(static_cast<size_t>(4) * d), hid2(hid);
            linear_row(model_->map_fc1, code_emb_row.data(), hid.data());
            gelu_row(hid.data(), hid2.data(), 4 * d);
            linear_row(model_->map_fc2, hid2.data(), projected.data());
        } else {
            const S* row = model_->map_table.data() + static_cast<size_t>(code_index) * d;
            std::memcpy(projected.data(), row, sizeof(S) * d);
        }
        const S* pos = model_->encoder.pos.data() + static_cast<size_t>(grid_pos) * d;
        for (int j = 0; j < d; j++) projected[static_cast<size_t>(j)] += pos[j];
        return cache_.step(std::move(projected));
    }

  private:
    const ToklipModel<S>* model_;
    CausalCache<S> cache_;
};

// Incremental AR context: feeds token embeddings (table rows or fused image
// rows), returns next-token logits.
template <class S>
class ArRunner {
  public:
    explicit ArRunner(const ArModel<S>* model)
        : model_(model),
          cache_(&model->blocks, &model->ln_final, model->cfg.d_model, model->cfg.heads,
                 model->cfg.max_seq) {}

    std::vector<S> feed_table_token(int token_id) {
        int d = model_->cfg.d_model;
        std::vector<S> x(static_cast<size_t>(d));
        const S* row = model_->embed_table.data() + static_cast<size_t>(token_id) * d;
        std::memcpy(x.data(), row, sizeof(S) * d);
        return feed_embedding(std::move(x));
    }

    std::vector<S> feed_embedding(std::vector<S> x) {
        int d = model_->cfg.d_model;
        int p = cache_.length();
        const S* pos = model_->pos.data() + static_cast<size_t>(p) * d;
        for (int j = 0; j < d; j++) x[static_cast<size_t>(j)] += pos[j];
        std::vector<S> out = cache_.step(std::move(x));
        std::vector<S> logits(static_cast<size_t>(model_->cfg.vocab.total()));
        linear_row(model_->head, out.data(), logits.data());
        return logits;
    }

    int length() const { return cache_.length(); }

  private:
    const ArModel<S>* model_;
    CausalCache<S> cache_;
};

// Row-wise replica of FusionHead::fuse.
template <class S>
std::vector<S> fuse_row(const FusionHead<S>& f, const std::vector<S>& code_emb,
                        const std::vector<S>& semantic, int d_model) {
    std::vector<S> out(static_cast<size_t>(d_model));
    switch (f.mode) {
        case FusionMode::kSum: {
            std::vector<S> cp(semantic.size());
            linear_row(f.code_proj, code_emb.data(), cp.data());
            std::vector<S> mixed(semantic.size());
            for (size_t j = 0; j < semantic.size(); j++) mixed[j] = cp[j] + semantic[j];
            linear_row(f.to_model, mixed.data(), out.data());
            return out;
        }
        case FusionMode::kWeightedSum: {
            S a = S(1) / (S(1) + std::exp(-f.alpha_raw.item()));
            S om = S(1) - a;
            std::vector<S> cp(semantic.size());
            linear_row(f.code_proj, code_emb.data(), cp.data());
            std::vector<S> mixed(semantic.size());
            for (size_t j = 0; j < semantic.size(); j++) mixed[j] = semantic[j] * a + cp[j] * om;
            linear_row(f.to_model, mixed.data(), out.data());
            return out;
        }
        case FusionMode::kConcat: {
            std::vector<S> joined;
            joined.reserve(code_emb.size() + semantic.size());
            joined.insert(joined.end(), code_emb.begin(), code_emb.end());
            joined.insert(joined.end(), semantic.begin(), semantic.end());
            linear_row(f.to_model, joined.data(), out.data());
            return out;
        }
        case FusionMode::kVqOnly: {
            std::vector<S> cp(static_cast<size_t>(f.code_proj.w.cols()));
            linear_row(f.code_proj, code_emb.data(), cp.data());
            linear_row(f.to_model, cp.data(), out.data());
            return out;
        }
    }
    throw ValueError("fuse_row: bad mode");
}

}  // namespace incremental

template <class S>
struct SampleTrace {
    std::vector<std::vector<S>> semantic_rows;
    std::vector<std::vector<S>> fused_rows;
};

template <class S>
struct SampleResult {
    std::vector<int> codes;     // raw VQ ids, length image_tokens
    std::vector<float> image;   // decoded pixels
};

// Class-conditional generation. Runs the class-conditioned and the
// [NULL]-conditioned context side by side and combines their logits with CFG;
// `conditional_only` runs just the conditioned context (reference path for
// the cfg_scale == 1 identity). Each sample owns the RNG sub-stream derived
// from (seed, sample_index).
template <class S>
SampleResult<S> sample_image(const ArModel<S>& ar, const ToklipModel<S>& toklip, const VqModel<S>& vq,
                             int class_id, const SamplerConfig& cfg, uint64_t sample_index,
                             bool conditional_only = false, SampleTrace<S>* trace = nullptr) {
    cfg.validate();
    require(class_id >= 0 && class_id < synth::kNumClasses, "sample_image: bad class id");
    Rng rng = Rng::substream(cfg.seed, "sampling").derive(sample_index);

    incremental::ArRunner<S> cond(&ar);
    cond.feed_table_token(synth::TextVocab::kBos);
    cond.feed_table_token(synth::TextVocab::kFirstClassToken + class_id);
    std::vector<S> cond_logits = cond.feed_table_token(synth::TextVocab::kBoi);

    std::unique_ptr<incremental::ArRunner<S>> uncond;
    std::vector<S> uncond_logits;
    if (!conditional_only) {
        uncond = std::make_unique<incremental::ArRunner<S>>(&ar);
        uncond->feed_table_token(synth::TextVocab::kBos);
        uncond->feed_table_token(ar.cfg.vocab.null_token());
        uncond_logits = uncond->feed_table_token(synth::TextVocab::kBoi);
    }

    incremental::TokenEncoderCache<S> tok_cache(&toklip);
    int vq_base = ar.cfg.vocab.vq_base();
    int k = ar.cfg.vocab.codebook;
    int dhat = vq.cfg.dhat;

    SampleResult<S> result;
    result.codes.reserve(static_cast<size_t>(ar.cfg.image_tokens));
    for (int t = 0; t < ar.cfg.image_tokens; t++) {
        std::vector<S> cond_slice(cond_logits.begin() + vq_base, cond_logits.begin() + vq_base + k);
        std::vector<S> mixed;
        if (conditional_only) {
            mixed = std::move(cond_slice);
        } else {
            std::vector<S> uncond_slice(uncond_logits.begin() + vq_base,
                                        uncond_logits.begin() + vq_base + k);
            mixed = cfg_logits(cond_slice, uncond_slice, static_cast<S>(cfg.cfg_scale));
        }
        int code = sample_from_logits(mixed, cfg, rng);
        result.codes.push_back(code);

        std::vector<S> code_emb(static_cast<size_t>(dhat));
        std::memcpy(code_emb.data(), vq.codebook.data() + static_cast<size_t>(code) * dhat,
                    sizeof(S) * dhat);
        std::vector<S> semantic = tok_cache.step(code_emb, code, t);
        std::vector<S> fused = incremental::fuse_row(ar.fusion, code_emb, semantic, ar.cfg.d_model);
        if (trace) {
            trace->semantic_rows.push_back(semantic);
            trace->fused_rows.push_back(fused);
        }
        cond_logits = cond.feed_embedding(fused);
        if (!conditional_only) uncond_logits = uncond->feed_embedding(fused);
    }

    Tensor<S> codes_emb = gather_rows<S>(nullptr, vq.codebook, result.codes);
    result.image = vq.decode_reconstruct(codes_emb);
    return result;
}

// Greedy image-to-caption decoding: feed [BOS][BOI] v1..vT [EOI], then emit
// argmax tokens until [EOS] or the length cap.
template <class S>
std::vector<int> caption_image(const ArModel<S>& ar, const ToklipModel<S>& toklip, const VqModel<S>& vq,
                               const std::vector<float>& pixels) {
    CodeGrid<S> grid = vq.encode_image(pixels);
    incremental::ArRunner<S> runner(&ar);
    runner.feed_table_token(synth::TextVocab::kBos);
    runner.feed_table_token(synth::TextVocab::kBoi);
    incremental::TokenEncoderCache<S> tok_cache(&toklip);
    int dhat = vq.cfg.dhat;
    std::vector<S> logits;
    for (int t = 0; t < ar.cfg.image_tokens; t++) {
        int code = grid.indices[static_cast<size_t>(t)];
        std::vector<S> code_emb(static_cast<size_t>(dhat));
        std::memcpy(code_emb.data(), vq.codebook.data() + static_cast<size_t>(code) * dhat,
                    sizeof(S) * dhat);
        std::vector<S> semantic = tok_cache.step(code_emb, code, t);
        std::vector<S> fused = incremental::fuse_row(ar.fusion, code_emb, semantic, ar.cfg.d_model);
        runner.feed_embedding(std::move(fused));
    }
    logits = runner.feed_table_token(synth::TextVocab::kEoi);
    std::vector<int> words;
    for (int step = 0; step < ar.cfg.caption_cap; step++) {
        int best = 0;
        for (size_t i = 1; i < logits.size(); i++)
            if (logits[i] > logits[static_cast<size_t>(best)]) best = static_cast<int>(i);
        if (best == synth::TextVocab::kEos) break;
        words.push_back(best);
        logits = runner.feed_table_token(best);
    }
    return words;
}

}  // namespace toklip

#pragma once

#include <string>
#include <vector>

#include "toklip/nn.hpp"
#include "toklip/synthdata.hpp"
#include "toklip/toklip.hpp"
#include "toklip/vq.hpp"

namespace toklip {

enum class FusionMode { kSum, kWeightedSum, kConcat, kVqOnly };

inline std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::kSum: return "sum";
        case FusionMode::kWeightedSum: return "weighted_sum";
        case FusionMode::kConcat: return "concat";
        default: return "vq_only";
    }
}
inline FusionMode fusion_mode_from(const std::string& s) {
    if (s == "sum") return FusionMode::kSum;
    if (s == "weighted_sum") return FusionMode::kWeightedSum;
    if (s == "concat") return FusionMode::kConcat;
    if (s == "vq_only") return FusionMode::kVqOnly;
    throw ValueError("unknown fusion mode: " + s);
}

// One shared vocabulary: the text vocab (specials + class tokens + words),
// then the K VQ code ids, then the [NULL] token used for CFG class dropout.
struct ArVocab {
    int text_size = 0;
    int codebook = 0;

    int vq_base() const { return text_size; }
    int null_token() const { return text_size + codebook; }
    int total() const { return text_size + codebook + 1; }
    int vq_token(int code) const { return text_size + code; }
    bool is_vq(int token) const { return token >= text_size && token < text_size + codebook; }
    int code_of(int token) const { return token - text_size; }
};

struct ArConfig {
    int d_model = 128;
    int heads = 4;
    int blocks = 6;
    int max_seq = 80;
    int image_tokens = 64;
    int dhat = 8;
    int semantic_dim = 64;
    FusionMode fusion = FusionMode::kConcat;
    double class_drop_prob = 0.1;
    int caption_cap = 12;  // greedy caption length limit
    ArVocab vocab;

    uint64_t hash() const {
        uint64_t h = fnv1a("armm");
        int vals[] = {d_model, heads,  blocks,      max_seq,           image_tokens,
                      dhat,    semantic_dim, static_cast<int>(fusion), vocab.text_size, vocab.codebook};
        h = fnv1a(vals, sizeof(vals), h);
        return h;
    }
};

// ---------------------------------------------------------------------------
// Fusion of low-level code embeddings with high-level semantic features.
// sum / weighted_sum project the code embedding to the semantic width first;
// concat joins the raw (dhat + d) features. All modes end in a linear map to
// d_model. vq_only bypasses the semantic path entirely.
// ---------------------------------------------------------------------------
template <class S>
struct FusionHead {
    FusionMode mode = FusionMode::kConcat;
    Linear<S> code_proj;   // dhat -> semantic_dim (sum / weighted_sum / vq_only)
    Linear<S> to_model;    // semantic_dim or (dhat+semantic_dim) -> d_model
    Tensor<S> alpha_raw;   // weighted_sum only; alpha = sigmoid(alpha_raw)

    FusionHead() = default;
    FusionHead(Rng rng, FusionMode m, int dhat, int sem_dim, int d_model) : mode(m) {
        if (m == FusionMode::kConcat) {
            to_model = Linear<S>(rng.derive("to_model"), dhat + sem_dim, d_model);
        } else {
            code_proj = Linear<S>(rng.derive("code_proj"), dhat, sem_dim);
            to_model = Linear<S>(rng.derive("to_model"), sem_dim, d_model);
        }
        if (m == FusionMode::kWeightedSum)
            alpha_raw = Tensor<S>::zeros({1}, true);  // sigmoid(0) = 0.5
    }

    Tensor<S> fuse(Tape<S>* tp, const Tensor<S>& code_emb, const Tensor<S>& semantic) const {
        if (mode != FusionMode::kVqOnly)
            require(code_emb.rows() == semantic.rows(), "fuse: row mismatch");
        switch (mode) {
            case FusionMode::kSum:
                return to_model.forward(tp, add(tp, code_proj.forward(tp, code_emb), semantic));
            case FusionMode::kWeightedSum: {
                Tensor<S> a = sigmoid(tp, alpha_raw);
                Tensor<S> one_minus = sub(tp, Tensor<S>::scalar(S(1)), a);
                Tensor<S> mixed = add(tp, mul_scalar_t(tp, semantic, a),
                                      mul_scalar_t(tp, code_proj.forward(tp, code_emb), one_minus));
                return to_model.forward(tp, mixed);
            }
            case FusionMode::kConcat:
                return to_model.forward(tp, concat(tp, code_emb, semantic, 1));
            case FusionMode::kVqOnly:
                return to_model.forward(tp, code_proj.forward(tp, code_emb));
        }
        throw ValueError("fuse: bad mode");
    }

    S alpha() const {
        return mode == FusionMode::kWeightedSum ? S(1) / (S(1) + std::exp(-alpha_raw.item())) : S(0);
    }

    void params(ParamSet<S>& ps, const std::string& prefix) const {
        if (mode != FusionMode::kConcat) code_proj.params(ps, prefix + ".code_proj");
        to_model.params(ps, prefix + ".to_model");
        if (mode == FusionMode::kWeightedSum) ps.add(prefix + ".alpha", alpha_raw);
    }
};

// ---------------------------------------------------------------------------
// Sequence layouts
//   generate: [BOS][Ck][BOI] v1..vT [EOI][EOS],   loss on v1..vT and [EOI]
//   caption:  [BOS][BOI] v1..vT [EOI] w1..wm [EOS], loss on w1..wm and [EOS]
// loss_mask[j] scores the prediction of tokens[j+1] from position j.
// ---------------------------------------------------------------------------
struct SequenceLayout {
    enum class Task { kGenerate, kCaption };
    Task task = Task::kGenerate;
    std::vector<int> tokens;     // AR-vocab ids, full sequence
    std::vector<int> vq_codes;   // raw code ids, length image_tokens
    int image_start = 0;         // position of v1 in tokens
    std::vector<uint8_t> loss_mask;  // size tokens.size()-1
    int class_id = -1;
};

inline SequenceLayout make_generate_layout(const ArVocab& vocab, int class_token_id,
                                           const std::vector<int>& vq_codes) {
    SequenceLayout s;
    s.task = SequenceLayout::Task::kGenerate;
    s.vq_codes = vq_codes;
    s.tokens.push_back(synth::TextVocab::kBos);
    s.tokens.push_back(class_token_id);
    s.tokens.push_back(synth::TextVocab::kBoi);
    s.image_start = 3;
    for (int c : vq_codes) s.tokens.push_back(vocab.vq_token(c));
    s.tokens.push_back(synth::TextVocab::kEoi);
    s.tokens.push_back(synth::TextVocab::kEos);
    s.loss_mask.assign(s.tokens.size() - 1, 0);
    // predictions of v1..vT and [EOI]: positions 2 .. 2+T
    for (size_t j = 2; j < s.tokens.size() - 2; j++) s.loss_mask[j] = 1;
    return s;
}

inline SequenceLayout make_caption_layout(const ArVocab& vocab, const std::vector<int>& vq_codes,
                                          const std::vector<int>& caption_word_ids) {
    SequenceLayout s;
    s.task = SequenceLayout::Task::kCaption;
    s.vq_codes = vq_codes;
    s.tokens.push_back(synth::TextVocab::kBos);
    s.tokens.push_back(synth::TextVocab::kBoi);
    s.image_start = 2;
    for (int c : vq_codes) s.tokens.push_back(vocab.vq_token(c));
    s.tokens.push_back(synth::TextVocab::kEoi);
    size_t first_word_pos = s.tokens.size();
    for (int w : caption_word_ids) s.tokens.push_back(w);
    s.tokens.push_back(synth::TextVocab::kEos);
    s.loss_mask.assign(s.tokens.size() - 1, 0);
    // predictions of w1..wm and [EOS]
    for (size_t j = first_word_pos - 1; j < s.tokens.size() - 1; j++) s.loss_mask[j] = 1;
    return s;
}

// ---------------------------------------------------------------------------
// The single causal multimodal transformer. Image positions take fused
// embeddings of their own token (so position t sees v_<=t through the causal
// token encoder); text/special positions take rows of a learned table.
// ---------------------------------------------------------------------------
template <class S>
struct ArModel {
    ArConfig cfg;
    Tensor<S> embed_table;  // vocab.total() x d_model
    Tensor<S> pos;          // max_seq x d_model
    std::vector<TransformerBlock<S>> blocks;
    LayerNormParams<S> ln_final;
    Linear<S> head;
    FusionHead<S> fusion;

    ArModel() = default;
    ArModel(Rng rng, ArConfig c) : cfg(c), ln_final(c.d_model), head(rng.derive("head"), c.d_model, c.vocab.total()) {
        embed_table = Tensor<S>::randn(rng.derive("embed"), {c.vocab.total(), c.d_model}, S(0.02), true);
        pos = Tensor<S>::randn(rng.derive("pos"), {c.max_seq, c.d_model}, S(0.02), true);
        for (int i = 0; i < c.blocks; i++)
            blocks.emplace_back(rng.derive("block" + std::to_string(i)), c.d_model, c.heads);
        fusion = FusionHead<S>(rng.derive("fusion"), c.fusion, c.dhat, c.semantic_dim, c.d_model);
    }

    ParamSet<S> params() const {
        ParamSet<S> ps;
        ps.add("ar.embed", embed_table);
        ps.add("ar.pos", pos);
        for (size_t i = 0; i < blocks.size(); i++) blocks[i].params(ps, "ar.block" + std::to_string(i));
        ln_final.params(ps, "ar.ln_final");
        head.params(ps, "ar.head");
        fusion.params(ps, "ar.fusion");
        return ps;
    }
    uint64_t param_hash() const { return params().value_hash(); }

    // Logits over the full padded batch: layouts must share tokens.size().
    // `fused` holds the (B*image_tokens) x d_model fused image embeddings.
    Tensor<S> forward_batch(Tape<S>* tp, const std::vector<SequenceLayout>& layouts,
                            const Tensor<S>& fused) const {
        int b = static_cast<int>(layouts.size());
        int len = static_cast<int>(layouts[0].tokens.size());
        require(len <= cfg.max_seq, "ar forward: sequence exceeds max length");
        std::vector<int> flat;
        flat.reserve(static_cast<size_t>(b) * len);
        std::vector<int> image_positions;
        image_positions.reserve(static_cast<size_t>(b) * cfg.image_tokens);
        for (int i = 0; i < b; i++) {
            const auto& s = layouts[static_cast<size_t>(i)];
            require(static_cast<int>(s.tokens.size()) == len, "ar forward: ragged batch");
            for (int tok : s.tokens) flat.push_back(tok);
            for (int t = 0; t < cfg.image_tokens; t++)
                image_positions.push_back(i * len + s.image_start + t);
        }
        Tensor<S> x = gather_rows(tp, embed_table, flat);
        x = scatter_replace_rows(tp, x, fused, image_positions);
        x = add_tiled(tp, x, slice_rows(tp, pos, 0, len));
        for (const auto& blk : blocks) x = blk.forward(tp, x, b, len, /*causal=*/true);
        x = ln_final.forward(tp, x);
        return head.forward(tp, x);  // (b*len) x vocab
    }
};

// Frozen-upstream inputs for one AR batch: raw code embeddings plus the
// semantic token features from the frozen TokLIP forward pass.
template <class S>
struct ArBatchInputs {
    Tensor<S> code_emb;     // (B*T) x dhat
    Tensor<S> token_feats;  // (B*T) x semantic_dim
};

template <class S>
ArBatchInputs<S> make_ar_inputs(const ToklipModel<S>& toklip, const VqModel<S>& vq,
                                const std::vector<SequenceLayout>& layouts) {
    int b = static_cast<int>(layouts.size());
    int t = static_cast<int>(layouts[0].vq_codes.size());
    std::vector<int> all_codes;
    all_codes.reserve(static_cast<size_t>(b) * t);
    for (const auto& s : layouts) {
        require(static_cast<int>(s.vq_codes.size()) == t, "ar inputs: wrong code count");
        all_codes.insert(all_codes.end(), s.vq_codes.begin(), s.vq_codes.end());
    }
    ArBatchInputs<S> inputs;
    inputs.code_emb = gather_rows<S>(nullptr, vq.codebook, all_codes);
    inputs.token_feats = toklip.encode(nullptr, inputs.code_emb, all_codes, b).token_feats;
    return inputs;
}

// Cross-entropy on the masked next-token predictions; one AdamW step. The
// class token is dropped to [NULL] with cfg.class_drop_prob per generate
// sample (CFG training); `drop_rng` drives those draws.
template <class S>
S ar_train_step(ArModel<S>& ar, const ToklipModel<S>& toklip, uint64_t toklip_hash,
                const VqModel<S>& vq, uint64_t vq_hash, std::vector<SequenceLayout> layouts,
                const ArBatchInputs<S>& inputs, AdamW<S>& opt, Rng& drop_rng) {
    require(toklip.frozen && vq.frozen, "ar_train_step: upstream models must be frozen");
    if (toklip.param_hash() != toklip_hash || vq.param_hash() != vq_hash)
        throw ValueError("ar_train_step: upstream model changed while frozen");
    for (auto& s : layouts) {
        if (s.task == SequenceLayout::Task::kGenerate &&
            drop_rng.next_double() < ar.cfg.class_drop_prob)
            s.tokens[1] = ar.cfg.vocab.null_token();
    }
    Tape<S> tape;
    Tensor<S> fused = ar.fusion.fuse(&tape, inputs.code_emb, inputs.token_feats);
    Tensor<S> logits = ar.forward_batch(&tape, layouts, fused);

    int b = static_cast<int>(layouts.size());
    int len = static_cast<int>(layouts[0].tokens.size());
    // predictions at the final position of each sample have no target
    std::vector<int> targets(static_cast<size_t>(b) * len, 0);
    std::vector<S> weights(static_cast<size_t>(b) * len, S(0));
    for (int i = 0; i < b; i++) {
        const auto& s = layouts[static_cast<size_t>(i)];
        for (int j = 0; j + 1 < len; j++) {
            targets[static_cast<size_t>(i) * len + j] = s.tokens[static_cast<size_t>(j) + 1];
            weights[static_cast<size_t>(i) * len + j] = s.loss_mask[static_cast<size_t>(j)] ? S(1) : S(0);
        }
    }
    Tensor<S> loss = cross_entropy(&tape, logits, targets, &weights);
    backward(loss, tape);
    opt.step();
    return loss.item();
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct SamplerConfig {
    double cfg_scale = 2.5;
    int top_k = 0;          // 0 = all candidates
    double top_p = 1.0;     // nucleus mass, (0, 1]
    double temperature = 1.0;
    bool greedy = false;    // temperature -> 0 limit
    uint64_t seed = 0;

    void validate() const {
        require(temperature > 0.0, "sampler: temperature must be > 0");
        require(top_p > 0.0 && top_p <= 1.0, "sampler: top_p must be in (0, 1]");
        require(top_k >= 0, "sampler: top_k must be >= 0");
    }
};

// uncond + s * (cond - uncond); s == 1 returns cond bit-exactly.
template <class S>
std::vector<S> cfg_logits(const std::vector<S>& cond, const std::vector<S>& uncond, S s) {
    require(cond.size() == uncond.size(), "cfg_logits: shape mismatch");
    if (s == S(1)) return cond;
    std::vector<S> out(cond.size());
    for (size_t i = 0; i < cond.size(); i++) out[i] = uncond[i] + s * (cond[i] - uncond[i]);
    return out;
}

// Temperature, top-k, then top-p nucleus filtering, then an inverse-CDF draw
// walked in ascending index order. Greedy mode takes the argmax (lowest index
// on ties) and consumes no randomness.
template <class S>
int sample_from_logits(const std::vector<S>& logits, const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    int n = static_cast<int>(logits.size());
    if (cfg.greedy) {
        int best = 0;
        for (int i = 1; i < n; i++)
            if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
        return best;
    }
    std::vector<S> probs(static_cast<size_t>(n));
    S mx = logits[0];
    for (int i = 1; i < n; i++) mx = std::max(mx, logits[static_cast<size_t>(i)]);
    S sum = S(0);
    for (int i = 0; i < n; i++) {
        probs[static_cast<size_t>(i)] = std::exp((logits[static_cast<size_t>(i)] - mx) / static_cast<S>(cfg.temperature));
        sum += probs[static_cast<size_t>(i)];
    }
    for (auto& p : probs) p /= sum;

    std::vector<uint8_t> keep(static_cast<size_t>(n), 1);
    bool filter_k = cfg.top_k > 0 && cfg.top_k < n;
    bool filter_p = cfg.top_p < 1.0;
    if (filter_k || filter_p) {
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; i++) order[static_cast<size_t>(i)] = i;
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (probs[static_cast<size_t>(a)] != probs[static_cast<size_t>(b)])
                return probs[static_cast<size_t>(a)] > probs[static_cast<size_t>(b)];
            return a < b;
        });
        keep.assign(static_cast<size_t>(n), 0);
        int limit = filter_k ? cfg.top_k : n;
        S mass = S(0);
        for (int r = 0; r < limit; r++) {
            int idx = order[static_cast<size_t>(r)];
            keep[static_cast<size_t>(idx)] = 1;
            mass += probs[static_cast<size_t>(idx)];
            if (filter_p && mass >= static_cast<S>(cfg.top_p)) break;
        }
    }

    S total = S(0);
    for (int i = 0; i < n; i++)
        if (keep[static_cast<size_t>(i)]) total += probs[static_cast<size_t>(i)];
    S u = static_cast<S>(rng.next_double()) * total;
    S acc = S(0);
    int last_kept = 0;
    for (int i = 0; i < n; i++) {
        if (!keep[static_cast<size_t>(i)]) continue;
        acc += probs[static_cast<size_t>(i)];
        last_kept = i;
        if (u < acc) return i;
    }
    return last_kept;
}

}  // namespace toklip

#pragma once

#include <string>
#include <vector>

#include "toklip/nn.hpp"
#include "toklip/synthdata.hpp"
#include "toklip/tensor.hpp"

namespace toklip {

// image pixels -> (T x patch_dim) rows of non-overlapping patches
template <class S>
Tensor<S> patchify_image(const std::vector<float>& pixels, int image, int patch, int channels) {
    require(static_cast<int>(pixels.size()) == image * image * channels, "patchify: wrong image dims");
    int g = image / patch;
    int pd = patch * patch * channels;
    Tensor<S> out = Tensor<S>::zeros({g * g, pd});
    for (int gy = 0; gy < g; gy++)
        for (int gx = 0; gx < g; gx++) {
            S* row = out.data() + static_cast<size_t>(gy * g + gx) * pd;
            int k = 0;
            for (int py = 0; py < patch; py++)
                for (int px = 0; px < patch; px++)
                    for (int ch = 0; ch < channels; ch++)
                        row[k++] = static_cast<S>(
                            pixels[(static_cast<size_t>(gy * patch + py) * image + (gx * patch + px)) * channels +
                                   ch]);
        }
    return out;
}

struct TeacherConfig {
    int image = synth::kImageSize;
    int channels = synth::kChannels;
    int patch = 4;
    int d = 64;
    int heads = 4;
    int vision_blocks = 4;
    int text_blocks = 2;
    int embed = 64;
    int max_text_len = 12;
    double scale_init = 2.65926;  // ln(1/0.07)
    double scale_min = 0.69314718;  // ln 2
    double scale_max = 4.60517019;  // ln 100

    int grid() const { return image / patch; }
    int tokens() const { return grid() * grid(); }
    int patch_dim() const { return patch * patch * channels; }

    uint64_t hash() const {
        uint64_t h = fnv1a("teacher");
        int vals[] = {image, channels, patch, d, heads, vision_blocks, text_blocks, embed, max_text_len};
        h = fnv1a(vals, sizeof(vals), h);
        return h;
    }
};

template <class S>
struct ImageEncoding {
    Tensor<S> packed;       // (B*(T+1)) x d post-norm features
    Tensor<S> patch_feats;  // (B*T) x d, summary rows dropped
    Tensor<S> z;            // B x embed, unit rows (projected summary token)
};

// Dual encoder trained with symmetric InfoNCE. The vision branch is the
// TokenEncoder over patch embeddings; the text branch is a small causal
// transformer read out at the final token. An attention-pooling head provides
// the retrieval/classification image representation and is trained jointly
// with a second InfoNCE term against the same text embeddings.
template <class S>
struct Teacher {
    TeacherConfig cfg;
    Linear<S> patch_embed;
    TokenEncoder<S> vision;
    Linear<S> img_proj;

    Tensor<S> tok_embed;  // vocab x d
    Tensor<S> txt_pos;    // max_text_len x d
    std::vector<TransformerBlock<S>> txt_blocks;
    LayerNormParams<S> txt_ln;
    Linear<S> txt_proj;

    Tensor<S> logit_scale;  // 1 element, log space
    Tensor<S> pool_query;   // d x 1
    Linear<S> pool_proj;

    int vocab_size = 0;
    bool frozen = false;

    Teacher() = default;
    Teacher(Rng rng, TeacherConfig c, int n_vocab)
        : cfg(c),
          patch_embed(rng.derive("patch_embed"), c.patch_dim(), c.d),
          vision(rng.derive("vision"), c.d, c.heads, c.vision_blocks, c.tokens()),
          img_proj(rng.derive("img_proj"), c.d, c.embed),
          txt_ln(c.d),
          txt_proj(rng.derive("txt_proj"), c.d, c.embed),
          pool_proj(rng.derive("pool_proj"), c.d, c.embed),
          vocab_size(n_vocab) {
        tok_embed = Tensor<S>::randn(rng.derive("tok_embed"), {n_vocab, c.d}, S(0.02), true);
        txt_pos = Tensor<S>::randn(rng.derive("txt_pos"), {c.max_text_len, c.d}, S(0.02), true);
        for (int i = 0; i < c.text_blocks; i++)
            txt_blocks.emplace_back(rng.derive("txt_block" + std::to_string(i)), c.d, c.heads);
        logit_scale = Tensor<S>::from({1}, {static_cast<S>(c.scale_init)}, true);
        pool_query = Tensor<S>::randn(rng.derive("pool_query"), {c.d, 1}, S(0.02), true);
    }

    ParamSet<S> params() const {
        ParamSet<S> ps;
        patch_embed.params(ps, "teacher.patch_embed");
        vision.params(ps, "teacher.vision");
        img_proj.params(ps, "teacher.img_proj");
        ps.add("teacher.tok_embed", tok_embed);
        ps.add("teacher.txt_pos", txt_pos);
        for (size_t i = 0; i < txt_blocks.size(); i++)
            txt_blocks[i].params(ps, "teacher.txt_block" + std::to_string(i));
        txt_ln.params(ps, "teacher.txt_ln");
        txt_proj.params(ps, "teacher.txt_proj");
        ps.add("teacher.logit_scale", logit_scale);
        ps.add("teacher.pool_query", pool_query);
        pool_proj.params(ps, "teacher.pool_proj");
        return ps;
    }

    void freeze() {
        params().set_requires_grad(false);
        frozen = true;
    }
    uint64_t param_hash() const { return params().value_hash(); }
    S scale_value() const { return std::exp(logit_scale.item()); }

    ImageEncoding<S> encode_images(Tape<S>* tp, const std::vector<const std::vector<float>*>& images) const {
        int b = static_cast<int>(images.size());
        int t = cfg.tokens(), pd = cfg.patch_dim();
        Tensor<S> patches = Tensor<S>::zeros({b * t, pd});
        for (int i = 0; i < b; i++) {
            Tensor<S> p = patchify_image<S>(*images[static_cast<size_t>(i)], cfg.image, cfg.patch, cfg.channels);
            std::memcpy(patches.data() + static_cast<size_t>(i) * t * pd, p.data(), sizeof(S) * p.v().size());
        }
        Tensor<S> tokens = patch_embed.forward(tp, patches);
        ImageEncoding<S> out;
        out.packed = vision.forward(tp, tokens, b, /*causal=*/false);
        out.patch_feats = take_rows(tp, out.packed, vision.token_rows(b));
        Tensor<S> cls_out = take_rows(tp, out.packed, vision.cls_rows(b));
        out.z = l2_normalize_rows(tp, img_proj.forward(tp, cls_out));
        return out;
    }

    // All sequences in one call must share a length; [BOS]/[EOS] are added
    // here, and the representation is read at the final token.
    Tensor<S> encode_texts(Tape<S>* tp, const std::vector<std::vector<int>>& token_lists) const {
        int b = static_cast<int>(token_lists.size());
        require(b > 0, "encode_texts: empty batch");
        int len = static_cast<int>(token_lists[0].size()) + 2;
        require(len <= cfg.max_text_len, "encode_texts: sequence too long");
        std::vector<int> flat;
        flat.reserve(static_cast<size_t>(b) * len);
        for (const auto& ids : token_lists) {
            require(static_cast<int>(ids.size()) + 2 == len, "encode_texts: ragged batch");
            flat.push_back(synth::TextVocab::kBos);
            for (int id : ids) {
                require(id >= 0 && id < vocab_size, "encode_texts: unknown token id");
                flat.push_back(id);
            }
            flat.push_back(synth::TextVocab::kEos);
        }
        Tensor<S> x = gather_rows(tp, tok_embed, flat);
        x = add_tiled(tp, x, slice_rows(tp, txt_pos, 0, len));
        for (const auto& blk : txt_blocks) x = blk.forward(tp, x, b, len, /*causal=*/true);
        x = txt_ln.forward(tp, x);
        std::vector<int> last(static_cast<size_t>(b));
        for (int i = 0; i < b; i++) last[static_cast<size_t>(i)] = i * len + len - 1;
        Tensor<S> final_tok = take_rows(tp, x, last);
        return l2_normalize_rows(tp, txt_proj.forward(tp, final_tok));
    }

    // Single learned query attends over the patch features of each sample;
    // pooled vector is projected and unit-normalized.
    Tensor<S> attention_pool(Tape<S>* tp, const Tensor<S>& patch_feats, int batch) const {
        require(patch_feats.rows() % batch == 0, "attention_pool: rows not divisible by batch");
        int t = patch_feats.rows() / batch;
        Tensor<S> scores = matmul(tp, patch_feats, pool_query);
        scores = scale(tp, scores, S(1) / std::sqrt(static_cast<S>(cfg.d)));
        Tensor<S> alpha = softmax_rows(tp, reshape(tp, scores, {batch, t}), S(1));
        Tensor<S> pooled = mix_rows(tp, alpha, patch_feats);
        return l2_normalize_rows(tp, pool_proj.forward(tp, pooled));
    }

    Tensor<S> encode_images_pooled(Tape<S>* tp, const std::vector<const std::vector<float>*>& images) const {
        ImageEncoding<S> enc = encode_images(tp, images);
        return attention_pool(tp, enc.patch_feats, static_cast<int>(images.size()));
    }
};

// Symmetric InfoNCE over unit-normalized embedding rows: scaled cosine
// logits, cross entropy against the diagonal in both directions, averaged.
template <class S>
Tensor<S> clip_infonce_loss(Tape<S>* tp, const Tensor<S>& z_a, const Tensor<S>& z_b,
                            const Tensor<S>& scale_mult) {
    require(z_a.shape() == z_b.shape(), "infonce: embedding shape mismatch");
    int b = z_a.rows();
    require(b >= 1, "infonce: empty batch");
    if (finite_checks()) {
        for (int i = 0; i < b; i++) {
            S na = kernels::dot(z_a.cols(), z_a.data() + static_cast<size_t>(i) * z_a.cols(),
                                z_a.data() + static_cast<size_t>(i) * z_a.cols());
            S nb = kernels::dot(z_b.cols(), z_b.data() + static_cast<size_t>(i) * z_b.cols(),
                                z_b.data() + static_cast<size_t>(i) * z_b.cols());
            if (std::abs(na - S(1)) > S(1e-3) || std::abs(nb - S(1)) > S(1e-3))
                throw NumericError("infonce: rows are not unit-normalized");
        }
    }
    Tensor<S> logits = mul_scalar_t(tp, matmul_nt(tp, z_a, z_b), scale_mult);
    std::vector<int> diag(static_cast<size_t>(b));
    for (int i = 0; i < b; i++) diag[static_cast<size_t>(i)] = i;
    Tensor<S> loss_ab = cross_entropy(tp, logits, diag);
    Tensor<S> loss_ba = cross_entropy(tp, transpose2d(tp, logits), diag);
    return scale(tp, add(tp, loss_ab, loss_ba), S(0.5));
}

template <class S>
struct TeacherLoss {
    S total = 0, contrastive = 0, pool_contrastive = 0;
};

template <class S>
TeacherLoss<S> teacher_train_step(Teacher<S>& model, const std::vector<const std::vector<float>*>& images,
                                  const std::vector<std::vector<int>>& captions, AdamW<S>& opt) {
    require(!model.frozen, "teacher_train_step: model is frozen");
    Tape<S> tape;
    ImageEncoding<S> enc = model.encode_images(&tape, images);
    Tensor<S> z_txt = model.encode_texts(&tape, captions);
    Tensor<S> z_pool = model.attention_pool(&tape, enc.patch_feats, static_cast<int>(images.size()));
    Tensor<S> s = exp_ewise(&tape, model.logit_scale);
    Tensor<S> loss_cls = clip_infonce_loss(&tape, enc.z, z_txt, s);
    Tensor<S> loss_pool = clip_infonce_loss(&tape, z_pool, z_txt, s);
    Tensor<S> loss = add(&tape, loss_cls, loss_pool);
    backward(loss, tape);
    opt.step();
    // keep the learnable temperature inside its clamp range
    S lo = static_cast<S>(model.cfg.scale_min), hi = static_cast<S>(model.cfg.scale_max);
    if (model.logit_scale.at(0) < lo) model.logit_scale.at(0) = lo;
    if (model.logit_scale.at(0) > hi) model.logit_scale.at(0) = hi;

    TeacherLoss<S> out;
    out.total = loss.item();
    out.contrastive = loss_cls.item();
    out.pool_contrastive = loss_pool.item();
    return out;
}

}  // namespace toklip

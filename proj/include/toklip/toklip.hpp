#pragma once

#include <string>
#include <vector>

#include "toklip/nn.hpp"
#include "toklip/teacher.hpp"
#include "toklip/vq.hpp"

namespace toklip {

enum class AttnMode { kCausal, kBidirectional };
enum class MappingMode { kMlp, kCodebookEmbedding };
enum class DistillTarget { kCls, kAll, kNone };
enum class InitMode { kTeacher, kScratch };

inline std::string to_string(AttnMode m) {
    return m == AttnMode::kCausal ? "causal" : "bidirectional";
}
inline std::string to_string(MappingMode m) {
    return m == MappingMode::kMlp ? "mlp" : "codebook";
}
inline std::string to_string(DistillTarget m) {
    switch (m) {
        case DistillTarget::kCls: return "cls";
        case DistillTarget::kAll: return "all";
        default: return "none";
    }
}
inline std::string to_string(InitMode m) {
    return m == InitMode::kTeacher ? "teacher" : "scratch";
}
inline AttnMode attn_mode_from(const std::string& s) {
    if (s == "causal") return AttnMode::kCausal;
    if (s == "bidirectional") return AttnMode::kBidirectional;
    throw ValueError("unknown attention mode: " + s);
}
inline MappingMode mapping_mode_from(const std::string& s) {
    if (s == "mlp") return MappingMode::kMlp;
    if (s == "codebook") return MappingMode::kCodebookEmbedding;
    throw ValueError("unknown mapping mode: " + s);
}
inline DistillTarget distill_target_from(const std::string& s) {
    if (s == "cls") return DistillTarget::kCls;
    if (s == "all") return DistillTarget::kAll;
    if (s == "none") return DistillTarget::kNone;
    throw ValueError("unknown distill target: " + s);
}
inline InitMode init_mode_from(const std::string& s) {
    if (s == "teacher") return InitMode::kTeacher;
    if (s == "scratch") return InitMode::kScratch;
    throw ValueError("unknown init mode: " + s);
}

struct ToklipConfig {
    AttnMode attention = AttnMode::kCausal;
    MappingMode mapping = MappingMode::kMlp;
    DistillTarget distill = DistillTarget::kCls;
    InitMode init = InitMode::kTeacher;
    int d = 64;
    int heads = 4;
    int blocks = 4;
    int tokens = 64;
    int dhat = 8;
    int codebook = 256;
    int embed = 64;

    uint64_t hash() const {
        uint64_t h = fnv1a("toklip");
        int vals[] = {static_cast<int>(attention), static_cast<int>(mapping), static_cast<int>(distill),
                      static_cast<int>(init), d, heads, blocks, tokens, dhat, codebook, embed};
        h = fnv1a(vals, sizeof(vals), h);
        return h;
    }
};

// Continuous semantic view of one image's discrete codes.
template <class S>
struct SemanticGrid {
    Tensor<S> features;  // T x d token outputs
    Tensor<S> z;         // 1 x embed unit row (projected summary token)
};

// The student: maps frozen VQ code embeddings into the encoder width (MLP
// d_hat -> 4d -> GeLU -> d, or a learned per-code embedding table), then runs
// the token encoder with the configured attention mask. The summary token
// sits at the LAST position so it attends to every code even causally.
template <class S>
struct ToklipModel {
    ToklipConfig cfg;
    Linear<S> map_fc1, map_fc2;  // mlp mapping
    Tensor<S> map_table;         // codebook mapping
    TokenEncoder<S> encoder;
    Linear<S> proj;
    bool frozen = false;

    ToklipModel() = default;
    ToklipModel(Rng rng, ToklipConfig c)
        : cfg(c),
          encoder(rng.derive("encoder"), c.d, c.heads, c.blocks, c.tokens),
          proj(rng.derive("proj"), c.d, c.embed) {
        if (c.mapping == MappingMode::kMlp) {
            map_fc1 = Linear<S>(rng.derive("map_fc1"), c.dhat, 4 * c.d);
            map_fc2 = Linear<S>(rng.derive("map_fc2"), 4 * c.d, c.d);
        } else {
            map_table = Tensor<S>::randn(rng.derive("map_table"), {c.codebook, c.d}, S(0.02), true);
        }
    }

    ParamSet<S> params() const {
        ParamSet<S> ps;
        if (cfg.mapping == MappingMode::kMlp) {
            map_fc1.params(ps, "toklip.map_fc1");
            map_fc2.params(ps, "toklip.map_fc2");
        } else {
            ps.add("toklip.map_table", map_table);
        }
        encoder.params(ps, "toklip.encoder");
        proj.params(ps, "toklip.proj");
        return ps;
    }

    void freeze() {
        params().set_requires_grad(false);
        frozen = true;
    }
    uint64_t param_hash() const { return params().value_hash(); }
    bool causal() const { return cfg.attention == AttnMode::kCausal; }

    // code embeddings (N x dhat) + their indices -> N x d projected tokens
    Tensor<S> project_codes(Tape<S>* tp, const Tensor<S>& code_embeddings,
                            const std::vector<int>& indices) const {
        if (cfg.mapping == MappingMode::kMlp) {
            require(code_embeddings.cols() == cfg.dhat, "project_codes: dhat mismatch");
            return map_fc2.forward(tp, gelu(tp, map_fc1.forward(tp, code_embeddings)));
        }
        require(static_cast<int>(indices.size()) == code_embeddings.rows(),
                "project_codes: codebook mapping needs one index per row");
        return gather_rows(tp, map_table, indices);
    }

    // Batched forward over code grids. Returns the packed post-norm encoder
    // output plus the usual views.
    struct Encoded {
        Tensor<S> packed;       // (B*(T+1)) x d
        Tensor<S> token_feats;  // (B*T) x d
        Tensor<S> z;            // B x embed, unit rows
    };

    Encoded encode(Tape<S>* tp, const Tensor<S>& code_embeddings, const std::vector<int>& indices,
                   int batch) const {
        require(code_embeddings.rows() == batch * cfg.tokens, "toklip encode: length mismatch");
        Tensor<S> projected = project_codes(tp, code_embeddings, indices);
        Encoded out;
        out.packed = encoder.forward(tp, projected, batch, causal());
        out.token_feats = take_rows(tp, out.packed, encoder.token_rows(batch));
        Tensor<S> cls_out = take_rows(tp, out.packed, encoder.cls_rows(batch));
        out.z = l2_normalize_rows(tp, proj.forward(tp, cls_out));
        return out;
    }

    SemanticGrid<S> encode_one(const CodeGrid<S>& grid) const {
        Encoded enc = encode(nullptr, grid.embeddings, grid.indices, 1);
        return SemanticGrid<S>{enc.token_feats, enc.z};
    }
};

// Copies every vision-encoder weight (blocks, positional table, summary
// token, final norm) and the projection head bit-exactly from the teacher.
// The mapping stays freshly initialized: the teacher has no analogue.
template <class S>
void init_from_teacher(ToklipModel<S>& student, const Teacher<S>& teacher) {
    require(student.cfg.d == teacher.cfg.d && student.cfg.heads == teacher.cfg.heads &&
                student.cfg.blocks == teacher.cfg.vision_blocks &&
                student.cfg.tokens == teacher.cfg.tokens() && student.cfg.embed == teacher.cfg.embed,
            "init_from_teacher: architecture dims mismatch");
    ParamSet<S> src, dst;
    teacher.vision.params(src, "enc");
    student.encoder.params(dst, "enc");
    teacher.img_proj.params(src, "proj");
    student.proj.params(dst, "proj");
    copy_params(src, dst);
}

template <class S>
struct ToklipLoss {
    S total = 0, contrastive = 0, distill = 0;
};

// Frozen-upstream inputs for one batch: code grids from the VQ encoder plus
// teacher embeddings, all constants on the student's tape.
template <class S>
struct ToklipBatchContext {
    Tensor<S> code_embeddings;  // (B*T) x dhat
    std::vector<int> indices;   // B*T
    Tensor<S> z_text;           // B x embed
    Tensor<S> z_img;            // B x embed
    Tensor<S> teacher_patch_feats;  // (B*T) x d
    Tensor<S> teacher_scale;        // 1 (exp of the teacher's logit scale)
    int batch = 0;
};

template <class S>
ToklipBatchContext<S> make_toklip_batch(const VqModel<S>& vq, const Teacher<S>& teacher,
                                        const std::vector<const std::vector<float>*>& images,
                                        const std::vector<std::vector<int>>& captions) {
    require(vq.frozen, "toklip batch: VQ tokenizer must be frozen");
    require(teacher.frozen, "toklip batch: teacher must be frozen");
    int b = static_cast<int>(images.size());
    int t = vq.cfg.tokens(), dhat = vq.cfg.dhat;
    ToklipBatchContext<S> ctx;
    ctx.batch = b;
    ctx.code_embeddings = Tensor<S>::zeros({b * t, dhat});
    ctx.indices.reserve(static_cast<size_t>(b) * t);
    for (int i = 0; i < b; i++) {
        CodeGrid<S> grid = vq.encode_image(*images[static_cast<size_t>(i)]);
        std::memcpy(ctx.code_embeddings.data() + static_cast<size_t>(i) * t * dhat, grid.embeddings.data(),
                    sizeof(S) * grid.embeddings.v().size());
        ctx.indices.insert(ctx.indices.end(), grid.indices.begin(), grid.indices.end());
    }
    ImageEncoding<S> enc = teacher.encode_images(nullptr, images);
    ctx.z_img = enc.z;
    ctx.teacher_patch_feats = enc.patch_feats;
    ctx.z_text = teacher.encode_texts(nullptr, captions);
    ctx.teacher_scale = Tensor<S>::scalar(teacher.scale_value());
    return ctx;
}

// L = InfoNCE(z_toklip, z_text) + distillation MSE per the configured target.
// Distillation compares unit-normalized embeddings on both sides.
template <class S>
ToklipLoss<S> toklip_loss_graph(Tape<S>* tp, const ToklipModel<S>& student,
                                const ToklipBatchContext<S>& ctx, Tensor<S>* out_loss,
                                typename ToklipModel<S>::Encoded* out_enc = nullptr) {
    auto enc = student.encode(tp, ctx.code_embeddings, ctx.indices, ctx.batch);
    Tensor<S> l_contra = clip_infonce_loss(tp, enc.z, ctx.z_text, ctx.teacher_scale);
    Tensor<S> l_distill;
    switch (student.cfg.distill) {
        case DistillTarget::kCls:
            l_distill = mse(tp, enc.z, ctx.z_img);
            break;
        case DistillTarget::kAll: {
            require(enc.token_feats.rows() == ctx.teacher_patch_feats.rows(),
                    "distill all: token count mismatch");
            Tensor<S> student_n = l2_normalize_rows(tp, enc.token_feats);
            Tensor<S> teacher_n = l2_normalize_rows<S>(nullptr, ctx.teacher_patch_feats);
            l_distill = mse(tp, student_n, teacher_n);
            break;
        }
        case DistillTarget::kNone:
            l_distill = Tensor<S>::scalar(S(0));
            break;
    }
    Tensor<S> total = add(tp, l_contra, l_distill);
    if (out_loss) *out_loss = total;
    if (out_enc) *out_enc = enc;
    ToklipLoss<S> out;
    out.total = total.item();
    out.contrastive = l_contra.item();
    out.distill = l_distill.item();
    return out;
}

// One AdamW step over the mapping + token encoder + projection only. The
// frozen upstream hashes are re-checked every step.
template <class S>
ToklipLoss<S> toklip_train_step(ToklipModel<S>& student, const ToklipBatchContext<S>& ctx,
                                AdamW<S>& opt, const VqModel<S>& vq, uint64_t vq_hash,
                                const Teacher<S>& teacher, uint64_t teacher_hash) {
    require(!student.frozen, "toklip_train_step: student is frozen");
    if (vq.param_hash() != vq_hash || teacher.param_hash() != teacher_hash)
        throw ValueError("toklip_train_step: upstream model changed while frozen");
    Tape<S> tape;
    Tensor<S> loss;
    ToklipLoss<S> breakdown = toklip_loss_graph(&tape, student, ctx, &loss);
    backward(loss, tape);
    opt.step();
    return breakdown;
}

}  // namespace toklip

#include "toklip/stages.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <iostream>

#include "toklip/checkpoint.hpp"
#include "toklip/incremental.hpp"

namespace toklip {

namespace fs = std::filesystem;

VqConfig make_vq_config() { return VqConfig{}; }
TeacherConfig make_teacher_config() { return TeacherConfig{}; }

ToklipConfig make_toklip_config(const RunConfig& cfg) {
    ToklipConfig t;
    t.attention = attn_mode_from(cfg.toklip_attention);
    t.mapping = mapping_mode_from(cfg.toklip_mapping);
    t.distill = distill_target_from(cfg.toklip_distill);
    t.init = init_mode_from(cfg.toklip_init);
    return t;
}

ArConfig make_ar_config(const RunConfig& cfg) {
    ArConfig a;
    a.fusion = fusion_mode_from(cfg.ar_fusion);
    a.vocab.text_size = synth::TextVocab::standard().size();
    a.vocab.codebook = VqConfig{}.codebook;
    return a;
}

std::vector<const std::vector<float>*> image_ptrs(const std::vector<synth::CaptionedImage>& split) {
    std::vector<const std::vector<float>*> out;
    out.reserve(split.size());
    for (const auto& s : split) out.push_back(&s.pixels);
    return out;
}

namespace {

OptimConfig make_optim(const RunConfig& cfg, double lr_scale, double warmup_scale, int steps) {
    OptimConfig oc;
    oc.base_lr = cfg.base_lr;
    oc.lr_scale = lr_scale;
    oc.warmup_steps = std::max(1, static_cast<int>(cfg.base_warmup * warmup_scale));
    oc.total_steps = steps;
    return oc;
}

std::vector<int> draw_batch(Rng& rng, int n, int batch) {
    std::vector<int> idx(static_cast<size_t>(batch));
    for (auto& i : idx) i = static_cast<int>(rng.next_below(static_cast<uint64_t>(n)));
    return idx;
}

// Contrastive batches must not contain duplicate captions, so they are drawn
// without replacement over (shape, color, background) triples, then one image
// per chosen triple.
struct TripleBuckets {
    std::vector<std::vector<int>> by_triple;

    explicit TripleBuckets(const std::vector<synth::CaptionedImage>& split) {
        by_triple.resize(synth::kNumClasses * synth::kNumBackgrounds);
        for (size_t i = 0; i < split.size(); i++) {
            int t = split[i].class_id * synth::kNumBackgrounds + split[i].bg_id;
            by_triple[static_cast<size_t>(t)].push_back(static_cast<int>(i));
        }
        for (const auto& b : by_triple)
            require(!b.empty(), "contrastive batches need every caption triple present in the split");
    }

    std::vector<int> draw(Rng& rng, int batch) const {
        int n_triples = static_cast<int>(by_triple.size());
        require(batch <= n_triples, "contrastive batch larger than the number of distinct captions");
        std::vector<int> perm = rng.permutation(n_triples);
        std::vector<int> idx(static_cast<size_t>(batch));
        for (int j = 0; j < batch; j++) {
            const auto& bucket = by_triple[static_cast<size_t>(perm[static_cast<size_t>(j)])];
            idx[static_cast<size_t>(j)] =
                bucket[rng.next_below(static_cast<uint64_t>(bucket.size()))];
        }
        return idx;
    }
};

// Buckets per class id, for short-prompt contrastive batches (16 distinct
// classes per batch, any background).
struct ClassBuckets {
    std::vector<std::vector<int>> by_class;

    explicit ClassBuckets(const std::vector<synth::CaptionedImage>& split) {
        by_class.resize(synth::kNumClasses);
        for (size_t i = 0; i < split.size(); i++)
            by_class[static_cast<size_t>(split[i].class_id)].push_back(static_cast<int>(i));
        for (const auto& b : by_class)
            require(!b.empty(), "prompt batches need every class present in the split");
    }

    std::vector<int> draw(Rng& rng, std::vector<int>* classes_out) const {
        std::vector<int> perm = rng.permutation(synth::kNumClasses);
        std::vector<int> idx(static_cast<size_t>(synth::kNumClasses));
        classes_out->resize(static_cast<size_t>(synth::kNumClasses));
        for (int j = 0; j < synth::kNumClasses; j++) {
            int cls = perm[static_cast<size_t>(j)];
            const auto& bucket = by_class[static_cast<size_t>(cls)];
            idx[static_cast<size_t>(j)] = bucket[rng.next_below(static_cast<uint64_t>(bucket.size()))];
            (*classes_out)[static_cast<size_t>(j)] = cls;
        }
        return idx;
    }
};

// every third step trains against the short class prompts instead of captions
constexpr int kPromptEvery = 3;

}  // namespace

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

VqModel<float> train_vq_stage(const RunConfig& cfg, const synth::Dataset& ds, MetricsWriter* metrics,
                              std::vector<double>* curve) {
    VqModel<float> model(Rng::substream(cfg.seed, "init/vq"), make_vq_config());
    AdamW<float> opt(model.params(), make_optim(cfg, cfg.vq_lr_scale, cfg.vq_warmup_scale, cfg.vq_steps));
    Rng data = Rng::substream(cfg.seed, "data/vq");
    Rng reinit = Rng::substream(cfg.seed, "init/vq_reinit");
    int n = static_cast<int>(ds.train.size());
    for (int step = 0; step < cfg.vq_steps; step++) {
        std::vector<int> idx = draw_batch(data, n, cfg.vq_batch);
        std::vector<const std::vector<float>*> batch;
        batch.reserve(idx.size());
        for (int i : idx) batch.push_back(&ds.train[static_cast<size_t>(i)].pixels);
        Tensor<float> z_e;
        VqLoss<float> loss = vq_train_step(model, batch, opt, &z_e);
        codebook_reinit(model, z_e, reinit);
        if (curve) curve->push_back(loss.total);
        if (metrics && (step % 10 == 0 || step + 1 == cfg.vq_steps))
            metrics->row(step, {{"loss", loss.total},
                                {"recon", loss.reconstruction},
                                {"codebook", loss.codebook},
                                {"commit", loss.commitment}});
    }
    model.freeze();
    return model;
}

Teacher<float> train_teacher_stage(const RunConfig& cfg, const synth::Dataset& ds,
                                   MetricsWriter* metrics, std::vector<double>* curve) {
    Teacher<float> model(Rng::substream(cfg.seed, "init/teacher"), make_teacher_config(),
                         synth::TextVocab::standard().size());
    AdamW<float> opt(model.params(),
                     make_optim(cfg, cfg.teacher_lr_scale, cfg.teacher_warmup_scale, cfg.teacher_steps));
    Rng data = Rng::substream(cfg.seed, "data/teacher");
    TripleBuckets buckets(ds.train);
    ClassBuckets class_buckets(ds.train);
    synth::TextVocab vocab = synth::TextVocab::standard();
    for (int step = 0; step < cfg.teacher_steps; step++) {
        bool prompt_step = (step % kPromptEvery == kPromptEvery - 1);
        std::vector<const std::vector<float>*> images;
        std::vector<std::vector<int>> captions;
        if (prompt_step) {
            std::vector<int> classes;
            std::vector<int> idx = class_buckets.draw(data, &classes);
            for (size_t j = 0; j < idx.size(); j++) {
                images.push_back(&ds.train[static_cast<size_t>(idx[j])].pixels);
                captions.push_back(vocab.encode(synth::class_prompt(classes[j])));
            }
        } else {
            std::vector<int> idx = buckets.draw(data, cfg.teacher_batch);
            for (int i : idx) {
                images.push_back(&ds.train[static_cast<size_t>(i)].pixels);
                captions.push_back(ds.train[static_cast<size_t>(i)].caption_tokens);
            }
        }
        TeacherLoss<float> loss = teacher_train_step(model, images, captions, opt);
        if (curve) curve->push_back(loss.total);
        if (metrics && (step % 10 == 0 || step + 1 == cfg.teacher_steps))
            metrics->row(step, {{"loss", loss.total},
                                {"contrastive", loss.contrastive},
                                {"pool_contrastive", loss.pool_contrastive},
                                {"logit_scale", model.logit_scale.item()}});
    }
    model.freeze();
    return model;
}

namespace {

// Frozen VQ + teacher outputs cached over the train split so the student's
// inner loop never reruns them.
struct FrozenCaches {
    int tokens = 0, dhat = 0, d = 0, embed = 0;
    std::vector<std::vector<int>> indices;          // per image, T
    std::vector<std::vector<float>> code_emb;       // per image, T*dhat
    std::vector<std::vector<float>> z_img;          // per image, embed
    std::vector<std::vector<float>> patch_feats;    // per image, T*d (only if needed)
    std::vector<std::vector<float>> z_text;         // per image, embed
    float teacher_scale = 1.0f;
};

FrozenCaches build_frozen_caches(const VqModel<float>& vq, const Teacher<float>& teacher,
                                 const std::vector<synth::CaptionedImage>& split, bool need_patches,
                                 int threads) {
    int n = static_cast<int>(split.size());
    FrozenCaches c;
    c.tokens = vq.cfg.tokens();
    c.dhat = vq.cfg.dhat;
    c.d = teacher.cfg.d;
    c.embed = teacher.cfg.embed;
    c.indices.resize(static_cast<size_t>(n));
    c.code_emb.resize(static_cast<size_t>(n));
    c.z_img.resize(static_cast<size_t>(n));
    c.z_text.resize(static_cast<size_t>(n));
    if (need_patches) c.patch_feats.resize(static_cast<size_t>(n));
    c.teacher_scale = teacher.scale_value();
    parallel_shards(n, threads, [&](int begin, int end) {
        const int chunk = 32;
        for (int i = begin; i < end; i += chunk) {
            int stop = std::min(end, i + chunk);
            int b = stop - i;
            std::vector<const std::vector<float>*> images;
            std::vector<std::vector<int>> captions;
            for (int j = i; j < stop; j++) {
                images.push_back(&split[static_cast<size_t>(j)].pixels);
                captions.push_back(split[static_cast<size_t>(j)].caption_tokens);
            }
            ImageEncoding<float> enc = teacher.encode_images(nullptr, images);
            Tensor<float> z_txt = teacher.encode_texts(nullptr, captions);
            for (int j = 0; j < b; j++) {
                CodeGrid<float> grid = vq.encode_image(*images[static_cast<size_t>(j)]);
                c.indices[static_cast<size_t>(i + j)] = grid.indices;
                c.code_emb[static_cast<size_t>(i + j)] = grid.embeddings.v();
                c.z_img[static_cast<size_t>(i + j)].assign(
                    enc.z.data() + static_cast<size_t>(j) * c.embed,
                    enc.z.data() + static_cast<size_t>(j + 1) * c.embed);
                c.z_text[static_cast<size_t>(i + j)].assign(
                    z_txt.data() + static_cast<size_t>(j) * c.embed,
                    z_txt.data() + static_cast<size_t>(j + 1) * c.embed);
                if (need_patches)
                    c.patch_feats[static_cast<size_t>(i + j)].assign(
                        enc.patch_feats.data() + static_cast<size_t>(j) * c.tokens * c.d,
                        enc.patch_feats.data() + static_cast<size_t>(j + 1) * c.tokens * c.d);
            }
        }
    });
    return c;
}

ToklipBatchContext<float> assemble_batch(const FrozenCaches& c, const std::vector<int>& idx,
                                         bool need_patches) {
    int b = static_cast<int>(idx.size());
    ToklipBatchContext<float> ctx;
    ctx.batch = b;
    ctx.code_embeddings = Tensor<float>::zeros({b * c.tokens, c.dhat});
    ctx.z_text = Tensor<float>::zeros({b, c.embed});
    ctx.z_img = Tensor<float>::zeros({b, c.embed});
    if (need_patches) ctx.teacher_patch_feats = Tensor<float>::zeros({b * c.tokens, c.d});
    ctx.indices.reserve(static_cast<size_t>(b) * c.tokens);
    for (int j = 0; j < b; j++) {
        int i = idx[static_cast<size_t>(j)];
        std::memcpy(ctx.code_embeddings.data() + static_cast<size_t>(j) * c.tokens * c.dhat,
                    c.code_emb[static_cast<size_t>(i)].data(),
                    sizeof(float) * c.code_emb[static_cast<size_t>(i)].size());
        ctx.indices.insert(ctx.indices.end(), c.indices[static_cast<size_t>(i)].begin(),
                           c.indices[static_cast<size_t>(i)].end());
        std::memcpy(ctx.z_text.data() + static_cast<size_t>(j) * c.embed,
                    c.z_text[static_cast<size_t>(i)].data(), sizeof(float) * c.embed);
        std::memcpy(ctx.z_img.data() + static_cast<size_t>(j) * c.embed,
                    c.z_img[static_cast<size_t>(i)].data(), sizeof(float) * c.embed);
        if (need_patches)
            std::memcpy(ctx.teacher_patch_feats.data() + static_cast<size_t>(j) * c.tokens * c.d,
                        c.patch_feats[static_cast<size_t>(i)].data(),
                        sizeof(float) * c.patch_feats[static_cast<size_t>(i)].size());
    }
    ctx.teacher_scale = Tensor<float>::scalar(c.teacher_scale);
    return ctx;
}

}  // namespace

ToklipModel<float> train_toklip_stage(const RunConfig& cfg, const synth::Dataset& ds,
                                      const VqModel<float>& vq, const Teacher<float>& teacher,
                                      MetricsWriter* metrics, std::vector<double>* curve,
                                      bool freeze_result) {
    require(vq.frozen && teacher.frozen, "train_toklip: upstream stages must be trained and frozen");
    ToklipConfig tcfg = make_toklip_config(cfg);
    ToklipModel<float> student(Rng::substream(cfg.seed, "init/toklip"), tcfg);
    if (tcfg.init == InitMode::kTeacher) init_from_teacher(student, teacher);

    uint64_t vq_hash = vq.param_hash();
    uint64_t teacher_hash = teacher.param_hash();
    bool need_patches = tcfg.distill == DistillTarget::kAll;
    FrozenCaches caches =
        build_frozen_caches(vq, teacher, ds.train, need_patches, cfg.effective_threads());

    AdamW<float> opt(student.params(),
                     make_optim(cfg, cfg.toklip_lr_scale, cfg.toklip_warmup_scale, cfg.toklip_steps));
    Rng data = Rng::substream(cfg.seed, "data/toklip");
    TripleBuckets buckets(ds.train);
    for (int step = 0; step < cfg.toklip_steps; step++) {
        std::vector<int> idx = buckets.draw(data, cfg.toklip_batch);
        ToklipBatchContext<float> ctx = assemble_batch(caches, idx, need_patches);
        ToklipLoss<float> loss = toklip_train_step(student, ctx, opt, vq, vq_hash, teacher, teacher_hash);
        if (curve) curve->push_back(loss.total);
        if (metrics && (step % 10 == 0 || step + 1 == cfg.toklip_steps))
            metrics->row(step, {{"loss", loss.total},
                                {"contrastive", loss.contrastive},
                                {"distill", loss.distill}});
    }
    if (freeze_result) student.freeze();
    return student;
}

ArModel<float> train_ar_stage(const RunConfig& cfg, const synth::Dataset& ds,
                              const ToklipModel<float>& toklip, const VqModel<float>& vq,
                              MetricsWriter* metrics, std::vector<double>* curve) {
    require(vq.frozen && toklip.frozen, "train_ar: upstream stages must be trained and frozen");
    ArConfig acfg = make_ar_config(cfg);
    ArModel<float> ar(Rng::substream(cfg.seed, "init/ar"), acfg);
    uint64_t vq_hash = vq.param_hash();
    uint64_t toklip_hash = toklip.param_hash();

    // cache code grids and frozen student features over the train split
    int n = static_cast<int>(ds.train.size());
    int t = vq.cfg.tokens(), dhat = vq.cfg.dhat, d = toklip.cfg.d;
    std::vector<std::vector<int>> grid_indices(static_cast<size_t>(n));
    std::vector<std::vector<float>> code_emb(static_cast<size_t>(n));
    std::vector<std::vector<float>> sem_feats(static_cast<size_t>(n));
    parallel_shards(n, cfg.effective_threads(), [&](int begin, int end) {
        const int chunk = 32;
        for (int i = begin; i < end; i += chunk) {
            int stop = std::min(end, i + chunk);
            int b = stop - i;
            Tensor<float> codes = Tensor<float>::zeros({b * t, dhat});
            std::vector<int> flat;
            flat.reserve(static_cast<size_t>(b) * t);
            for (int j = 0; j < b; j++) {
                CodeGrid<float> grid = vq.encode_image(ds.train[static_cast<size_t>(i + j)].pixels);
                grid_indices[static_cast<size_t>(i + j)] = grid.indices;
                code_emb[static_cast<size_t>(i + j)] = grid.embeddings.v();
                std::memcpy(codes.data() + static_cast<size_t>(j) * t * dhat, grid.embeddings.data(),
                            sizeof(float) * grid.embeddings.v().size());
                flat.insert(flat.end(), grid.indices.begin(), grid.indices.end());
            }
            auto enc = toklip.encode(nullptr, codes, flat, b);
            for (int j = 0; j < b; j++)
                sem_feats[static_cast<size_t>(i + j)].assign(
                    enc.token_feats.data() + static_cast<size_t>(j) * t * d,
                    enc.token_feats.data() + static_cast<size_t>(j + 1) * t * d);
        }
    });

    AdamW<float> opt(ar.params(), make_optim(cfg, cfg.ar_lr_scale, cfg.ar_warmup_scale, cfg.ar_steps));
    Rng data = Rng::substream(cfg.seed, "data/ar");
    Rng drop = Rng::substream(cfg.seed, "dropout/ar");
    for (int step = 0; step < cfg.ar_steps; step++) {
        bool generate = (step % 2 == 0);
        std::vector<int> idx = draw_batch(data, n, cfg.ar_batch);
        std::vector<SequenceLayout> layouts;
        ArBatchInputs<float> inputs;
        int b = static_cast<int>(idx.size());
        inputs.code_emb = Tensor<float>::zeros({b * t, dhat});
        inputs.token_feats = Tensor<float>::zeros({b * t, d});
        for (int j = 0; j < b; j++) {
            const auto& img = ds.train[static_cast<size_t>(idx[static_cast<size_t>(j)])];
            const auto& codes = grid_indices[static_cast<size_t>(idx[static_cast<size_t>(j)])];
            if (generate) {
                SequenceLayout s = make_generate_layout(
                    acfg.vocab, synth::TextVocab::kFirstClassToken + img.class_id, codes);
                s.class_id = img.class_id;
                layouts.push_back(std::move(s));
            } else {
                layouts.push_back(make_caption_layout(acfg.vocab, codes, img.caption_tokens));
            }
            std::memcpy(inputs.code_emb.data() + static_cast<size_t>(j) * t * dhat,
                        code_emb[static_cast<size_t>(idx[static_cast<size_t>(j)])].data(),
                        sizeof(float) * code_emb[static_cast<size_t>(idx[static_cast<size_t>(j)])].size());
            std::memcpy(inputs.token_feats.data() + static_cast<size_t>(j) * t * d,
                        sem_feats[static_cast<size_t>(idx[static_cast<size_t>(j)])].data(),
                        sizeof(float) * sem_feats[static_cast<size_t>(idx[static_cast<size_t>(j)])].size());
        }
        float loss = ar_train_step(ar, toklip, toklip_hash, vq, vq_hash, layouts, inputs, opt, drop);
        if (curve) curve->push_back(loss);
        if (metrics && (step % 10 == 0 || step + 1 == cfg.ar_steps))
            metrics->row(step, {{"loss", static_cast<double>(loss)},
                                {"task_generate", generate ? 1.0 : 0.0}});
    }
    return ar;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

EmbedMatrix class_prompt_embeddings(const Teacher<float>& teacher) {
    synth::TextVocab vocab = synth::TextVocab::standard();
    std::vector<std::vector<int>> prompts;
    for (int c = 0; c < synth::kNumClasses; c++) prompts.push_back(vocab.encode(synth::class_prompt(c)));
    return teacher_text_embeddings(teacher, prompts);
}

ZeroShotResult zero_shot_toklip(const ToklipModel<float>& toklip, const VqModel<float>& vq,
                                const Teacher<float>& teacher,
                                const std::vector<synth::CaptionedImage>& split, int threads) {
    EmbedMatrix img = toklip_embeddings(toklip, vq, image_ptrs(split), threads);
    std::vector<int> labels;
    for (const auto& s : split) labels.push_back(s.class_id);
    return zero_shot_classify(img, labels, class_prompt_embeddings(teacher));
}

ZeroShotResult zero_shot_teacher(const Teacher<float>& teacher,
                                 const std::vector<synth::CaptionedImage>& split, int threads) {
    EmbedMatrix img = teacher_pooled_embeddings(teacher, image_ptrs(split), threads);
    std::vector<int> labels;
    for (const auto& s : split) labels.push_back(s.class_id);
    return zero_shot_classify(img, labels, class_prompt_embeddings(teacher));
}

std::vector<int> retrieval_pool_indices(const std::vector<synth::CaptionedImage>& split) {
    const int n_triples = synth::kNumClasses * synth::kNumBackgrounds;
    std::vector<int> pick(static_cast<size_t>(n_triples), -1);
    for (size_t i = 0; i < split.size(); i++) {
        int triple = split[i].class_id * synth::kNumBackgrounds + split[i].bg_id;
        if (pick[static_cast<size_t>(triple)] < 0) pick[static_cast<size_t>(triple)] = static_cast<int>(i);
    }
    std::vector<int> out;
    for (int i = 0; i < n_triples; i++) {
        require(pick[static_cast<size_t>(i)] >= 0, "retrieval pool: split is missing a (shape,color,bg) triple");
        out.push_back(pick[static_cast<size_t>(i)]);
    }
    return out;
}

RetrievalResult retrieval_toklip(const ToklipModel<float>& toklip, const VqModel<float>& vq,
                                 const Teacher<float>& teacher,
                                 const std::vector<synth::CaptionedImage>& split, int threads) {
    std::vector<int> pool = retrieval_pool_indices(split);
    std::vector<const std::vector<float>*> images;
    std::vector<std::vector<int>> captions;
    std::vector<std::string> texts;
    for (int i : pool) {
        images.push_back(&split[static_cast<size_t>(i)].pixels);
        captions.push_back(split[static_cast<size_t>(i)].caption_tokens);
        texts.push_back(split[static_cast<size_t>(i)].caption_text);
    }
    EmbedMatrix img = toklip_embeddings(toklip, vq, images, threads);
    EmbedMatrix txt = teacher_text_embeddings(teacher, captions);
    return retrieval_eval(img, txt, texts);
}

SimilarityResult similarity_toklip(const ToklipModel<float>& toklip, const VqModel<float>& vq,
                                   const Teacher<float>& teacher,
                                   const std::vector<synth::CaptionedImage>& split, int threads,
                                   const std::string& export_csv) {
    auto images = image_ptrs(split);
    EmbedMatrix student = toklip_embeddings(toklip, vq, images, threads);
    EmbedMatrix teacher_z = teacher_cls_embeddings(teacher, images, threads);
    SimilarityResult r = feature_similarity(student, teacher_z);
    if (!export_csv.empty()) {
        EmbedMatrix rows;
        for (size_t i = 0; i < r.per_image.size(); i++)
            rows.push_back({static_cast<float>(r.per_image[i])});
        write_features_csv(export_csv, rows);
    }
    return r;
}

std::vector<SampleResult<float>> generate_samples(const ArModel<float>& ar,
                                                  const ToklipModel<float>& toklip,
                                                  const VqModel<float>& vq, const SamplerConfig& scfg,
                                                  int n, int fixed_class, int threads) {
    std::vector<SampleResult<float>> out(static_cast<size_t>(n));
    parallel_shards(n, threads, [&](int begin, int end) {
        for (int i = begin; i < end; i++) {
            int cls = fixed_class >= 0 ? fixed_class : i % synth::kNumClasses;
            out[static_cast<size_t>(i)] =
                sample_image(ar, toklip, vq, cls, scfg, static_cast<uint64_t>(i));
        }
    });
    return out;
}

double fid_of_samples(const Teacher<float>& teacher, const std::vector<SampleResult<float>>& samples,
                      const std::vector<synth::CaptionedImage>& real, int threads) {
    std::vector<const std::vector<float>*> gen_ptrs;
    gen_ptrs.reserve(samples.size());
    for (const auto& s : samples) gen_ptrs.push_back(&s.image);
    EmbedMatrix gen_feats = teacher_pooled_embeddings(teacher, gen_ptrs, threads);
    EmbedMatrix real_feats = teacher_pooled_embeddings(teacher, image_ptrs(real), threads);
    return fid_proxy(gen_feats, real_feats);
}

// ---------------------------------------------------------------------------
// File-based runners
// ---------------------------------------------------------------------------

std::string default_ckpt_path(const RunConfig& cfg, const std::string& name) {
    return cfg.run_dir + "/" + name + ".tklp";
}

namespace {

std::string ckpt_or_default(const RunConfig& cfg, const std::string& explicit_path,
                            const std::string& name) {
    return explicit_path.empty() ? default_ckpt_path(cfg, name) : explicit_path;
}

void ensure_run_dir(const RunConfig& cfg) { fs::create_directories(cfg.run_dir); }

}  // namespace

VqModel<float> load_vq(const std::string& path) {
    VqModel<float> model(Rng(0), make_vq_config());
    ParamSet<float> ps = model.params();
    load_checkpoint(path, model.cfg.hash(), ps);
    model.freeze();
    return model;
}

Teacher<float> load_teacher(const std::string& path) {
    Teacher<float> model(Rng(0), make_teacher_config(), synth::TextVocab::standard().size());
    ParamSet<float> ps = model.params();
    load_checkpoint(path, model.cfg.hash(), ps);
    model.freeze();
    return model;
}

ToklipModel<float> load_toklip(const std::string& path, const RunConfig& cfg) {
    ToklipModel<float> model(Rng(0), make_toklip_config(cfg));
    ParamSet<float> ps = model.params();
    load_checkpoint(path, model.cfg.hash(), ps);
    model.freeze();
    return model;
}

ArModel<float> load_ar(const std::string& path, const RunConfig& cfg) {
    ArModel<float> model(Rng(0), make_ar_config(cfg));
    ParamSet<float> ps = model.params();
    load_checkpoint(path, model.cfg.hash(), ps);
    return model;
}

void run_gen_data(const RunConfig& cfg) {
    synth::Dataset ds = synth::build_dataset(cfg.seed, cfg.n_train, cfg.n_test);
    synth::save_dataset(ds, cfg.data_dir);
    std::cout << "gen-data: wrote " << ds.train.size() << " train / " << ds.test.size()
              << " test samples to " << cfg.data_dir << "\n";
}

void run_train_vq(const RunConfig& cfg) {
    ensure_run_dir(cfg);
    synth::Dataset ds = synth::load_dataset(cfg.data_dir);
    MetricsWriter mw(cfg.run_dir + "/metrics_vq.jsonl", "vq", cfg.hash());
    VqModel<float> model = train_vq_stage(cfg, ds, &mw);
    save_checkpoint(default_ckpt_path(cfg, "vq"), model.cfg.hash(), model.params());

    // codebook CSV for inspection
    std::ofstream csv(cfg.run_dir + "/codebook.csv");
    csv.precision(8);
    for (int k = 0; k < model.cfg.codebook; k++) {
        csv << k;
        for (int j = 0; j < model.cfg.dhat; j++) csv << "," << model.codebook.at(k, j);
        csv << "\n";
    }
    PsnrResult psnr = recon_psnr(model, image_ptrs(ds.test), cfg.effective_threads());
    write_summary_csv(cfg.run_dir + "/summary_vq.csv", cfg.hash(),
                      {{"psnr_db", psnr.mean_db}, {"psnr_inf_count", psnr.infinite}});
    std::cout << "train-vq: done, test PSNR " << psnr.mean_db << " dB\n";
}

void run_train_teacher(const RunConfig& cfg) {
    ensure_run_dir(cfg);
    synth::Dataset ds = synth::load_dataset(cfg.data_dir);
    MetricsWriter mw(cfg.run_dir + "/metrics_teacher.jsonl", "teacher", cfg.hash());
    Teacher<float> model = train_teacher_stage(cfg, ds, &mw);
    save_checkpoint(default_ckpt_path(cfg, "teacher"), model.cfg.hash(), model.params());
    ZeroShotResult zs = zero_shot_teacher(model, ds.test, cfg.effective_threads());
    write_summary_csv(cfg.run_dir + "/summary_teacher.csv", cfg.hash(),
                      {{"zero_shot_top1", zs.top1}, {"zero_shot_top5", zs.top5}});
    std::cout << "train-teacher: done, zero-shot top-1 " << zs.top1 << "\n";
}

void run_train_toklip(const RunConfig& cfg) {
    ensure_run_dir(cfg);
    synth::Dataset ds = synth::load_dataset(cfg.data_dir);
    VqModel<float> vq = load_vq(ckpt_or_default(cfg, cfg.vq_ckpt, "vq"));
    Teacher<float> teacher = load_teacher(ckpt_or_default(cfg, cfg.teacher_ckpt, "teacher"));
    MetricsWriter mw(cfg.run_dir + "/metrics_toklip.jsonl", "toklip", cfg.hash());
    ToklipModel<float> student = train_toklip_stage(cfg, ds, vq, teacher, &mw);
    save_checkpoint(default_ckpt_path(cfg, "toklip"), student.cfg.hash(), student.params());
    int threads = cfg.effective_threads();
    ZeroShotResult zs = zero_shot_toklip(student, vq, teacher, ds.test, threads);
    RetrievalResult rr = retrieval_toklip(student, vq, teacher, ds.test, threads);
    SimilarityResult sim = similarity_toklip(student, vq, teacher, ds.test, threads);
    write_summary_csv(cfg.run_dir + "/summary_toklip.csv", cfg.hash(),
                      {{"zero_shot_top1", zs.top1},
                       {"zero_shot_top5", zs.top5},
                       {"retrieval_tr1", rr.tr1},
                       {"retrieval_ir1", rr.ir1},
                       {"mean_cosine", sim.mean_cosine}});
    std::cout << "train-toklip: done, zero-shot top-1 " << zs.top1 << ", TR@1 " << rr.tr1
              << ", IR@1 " << rr.ir1 << ", cos " << sim.mean_cosine << "\n";
}

void run_train_ar(const RunConfig& cfg) {
    ensure_run_dir(cfg);
    synth::Dataset ds = synth::load_dataset(cfg.data_dir);
    VqModel<float> vq = load_vq(ckpt_or_default(cfg, cfg.vq_ckpt, "vq"));
    Teacher<float> teacher = load_teacher(ckpt_or_default(cfg, cfg.teacher_ckpt, "teacher"));
    ToklipModel<float> toklip = load_toklip(ckpt_or_default(cfg, cfg.toklip_ckpt, "toklip"), cfg);
    MetricsWriter mw(cfg.run_dir + "/metrics_ar.jsonl", "ar", cfg.hash());
    ArModel<float> ar = train_ar_stage(cfg, ds, toklip, vq, &mw);
    save_checkpoint(default_ckpt_path(cfg, "ar"), ar.cfg.hash(), ar.params());

    // quick caption probe on a few train images
    int probe = std::min<int>(32, static_cast<int>(ds.train.size()));
    int exact = 0;
    synth::TextVocab vocab = synth::TextVocab::standard();
    for (int i = 0; i < probe; i++) {
        std::vector<int> words = caption_image(ar, toklip, vq, ds.train[static_cast<size_t>(i)].pixels);
        const auto& truth = ds.train[static_cast<size_t>(i)];
        std::string color = synth::foreground_colors()[static_cast<size_t>(truth.class_id % 4)].name;
        std::string shape = synth::shape_names()[static_cast<size_t>(truth.class_id / 4)];
        bool has_color = false, has_shape = false;
        for (int w : words) {
            if (w < vocab.size()) {
                if (vocab.word(w) == color) has_color = true;
                if (vocab.word(w) == shape) has_shape = true;
            }
        }
        if (has_color && has_shape) exact++;
    }
    write_summary_csv(cfg.run_dir + "/summary_ar.csv", cfg.hash(),
                      {{"caption_probe_acc", static_cast<double>(exact) / probe}});
    std::cout << "train-ar: done, caption probe " << exact << "/" << probe << "\n";
    (void)teacher;
}

void run_generate(const RunConfig& cfg) {
    ensure_run_dir(cfg);
    VqModel<float> vq = load_vq(ckpt_or_default(cfg, cfg.vq_ckpt, "vq"));
    ToklipModel<float> toklip = load_toklip(ckpt_or_default(cfg, cfg.toklip_ckpt, "toklip"), cfg);
    ArModel<float> ar = load_ar(ckpt_or_default(cfg, cfg.ar_ckpt, "ar"), cfg);
    SamplerConfig scfg;
    scfg.cfg_scale = cfg.sampler_cfg_scale;
    scfg.top_k = cfg.sampler_top_k;
    scfg.top_p = cfg.sampler_top_p;
    scfg.temperature = cfg.sampler_temperature;
    scfg.greedy = cfg.sampler_greedy;
    scfg.seed = cfg.seed;
    scfg.validate();
    auto samples = generate_samples(ar, toklip, vq, scfg, cfg.sampler_n, cfg.sampler_class_id,
                                    cfg.effective_threads());
    std::vector<std::vector<int>> index_rows;
    for (size_t i = 0; i < samples.size(); i++) {
        int cls = cfg.sampler_class_id >= 0 ? cfg.sampler_class_id
                                            : static_cast<int>(i) % synth::kNumClasses;
        char name[64];
        std::snprintf(name, sizeof(name), "sample_%04zu_c%02d.ppm", i, cls);
        write_ppm(cfg.run_dir + "/samples/" + name, samples[i].image, synth::kImageSize,
                  synth::kImageSize);
        index_rows.push_back(samples[i].codes);
    }
    write_indices_csv(cfg.run_dir + "/samples/indices.csv", index_rows);
    std::cout << "generate: wrote " << samples.size() << " samples to " << cfg.run_dir << "/samples\n";
}

void run_eval(const RunConfig& cfg) {
    ensure_run_dir(cfg);
    synth::Dataset ds = synth::load_dataset(cfg.data_dir);
    int threads = cfg.effective_threads();
    std::vector<std::pair<std::string, double>> rows;
    const std::string& task = cfg.eval_task;

    if (task == "psnr" || task == "all") {
        VqModel<float> vq = load_vq(ckpt_or_default(cfg, cfg.vq_ckpt, "vq"));
        PsnrResult psnr = recon_psnr(vq, image_ptrs(ds.test), threads);
        rows.emplace_back("psnr_db", psnr.mean_db);
        rows.emplace_back("psnr_inf_count", psnr.infinite);
    }
    if (task == "zero-shot" || task == "retrieval" || task == "similarity" || task == "all") {
        VqModel<float> vq = load_vq(ckpt_or_default(cfg, cfg.vq_ckpt, "vq"));
        Teacher<float> teacher = load_teacher(ckpt_or_default(cfg, cfg.teacher_ckpt, "teacher"));
        ToklipModel<float> toklip = load_toklip(ckpt_or_default(cfg, cfg.toklip_ckpt, "toklip"), cfg);
        if (task == "zero-shot" || task == "all") {
            ZeroShotResult zs_t = zero_shot_teacher(teacher, ds.test, threads);
            ZeroShotResult zs_s = zero_shot_toklip(toklip, vq, teacher, ds.test, threads);
            rows.emplace_back("teacher_top1", zs_t.top1);
            rows.emplace_back("teacher_top5", zs_t.top5);
            rows.emplace_back("toklip_top1", zs_s.top1);
            rows.emplace_back("toklip_top5", zs_s.top5);
        }
        if (task == "retrieval" || task == "all") {
            RetrievalResult rr = retrieval_toklip(toklip, vq, teacher, ds.test, threads);
            rows.emplace_back("retrieval_tr1", rr.tr1);
            rows.emplace_back("retrieval_ir1", rr.ir1);
        }
        if (task == "similarity" || task == "all") {
            SimilarityResult sim = similarity_toklip(toklip, vq, teacher, ds.test, threads,
                                                     cfg.run_dir + "/similarity_per_image.csv");
            rows.emplace_back("mean_cosine", sim.mean_cosine);
        }
    }
    if (task == "fid") {
        VqModel<float> vq = load_vq(ckpt_or_default(cfg, cfg.vq_ckpt, "vq"));
        Teacher<float> teacher = load_teacher(ckpt_or_default(cfg, cfg.teacher_ckpt, "teacher"));
        ToklipModel<float> toklip = load_toklip(ckpt_or_default(cfg, cfg.toklip_ckpt, "toklip"), cfg);
        ArModel<float> ar = load_ar(ckpt_or_default(cfg, cfg.ar_ckpt, "ar"), cfg);
        SamplerConfig scfg;
        scfg.cfg_scale = cfg.sampler_cfg_scale;
        scfg.top_k = cfg.sampler_top_k;
        scfg.top_p = cfg.sampler_top_p;
        scfg.temperature = cfg.sampler_temperature;
        scfg.seed = cfg.seed;
        auto samples = generate_samples(ar, toklip, vq, scfg, cfg.sampler_n, -1, threads);
        rows.emplace_back("fid_proxy", fid_of_samples(teacher, samples, ds.test, threads));
    }
    require(!rows.empty(), "eval: unknown task '" + task + "'");
    write_summary_csv(cfg.run_dir + "/summary_eval.csv", cfg.hash(), rows);
    for (const auto& [k, v] : rows) std::cout << "eval: " << k << " = " << v << "\n";
}

void run_report(const RunConfig& cfg) {
    std::vector<std::pair<std::string, double>> rows;
    for (const auto& entry : fs::directory_iterator(cfg.run_dir)) {
        if (entry.path().extension() == ".jsonl") {
            auto metric_rows = read_metrics(entry.path().string());
            if (metric_rows.empty()) continue;
            const MetricsRow& last = metric_rows.back();
            std::string prefix = entry.path().stem().string();
            for (const auto& [k, v] : last.values) rows.emplace_back(prefix + "." + k, v);
        } else if (entry.path().extension() == ".csv" &&
                   entry.path().filename().string().rfind("summary_", 0) == 0) {
            std::string prefix = entry.path().stem().string();
            for (const auto& [k, v] : read_summary_csv(entry.path().string()))
                rows.emplace_back(prefix + "." + k, v);
        }
    }
    std::sort(rows.begin(), rows.end());
    write_summary_csv(cfg.run_dir + "/report.csv", cfg.hash(), rows);
    std::cout << "report: wrote " << rows.size() << " rows to " << cfg.run_dir << "/report.csv\n";
}

void run_stage(const RunConfig& cfg) {
    if (cfg.stage == "gen-data") run_gen_data(cfg);
    else if (cfg.stage == "train-vq") run_train_vq(cfg);
    else if (cfg.stage == "train-teacher") run_train_teacher(cfg);
    else if (cfg.stage == "train-toklip") run_train_toklip(cfg);
    else if (cfg.stage == "train-ar") run_train_ar(cfg);
    else if (cfg.stage == "generate") run_generate(cfg);
    else if (cfg.stage == "eval") run_eval(cfg);
    else if (cfg.stage == "report") run_report(cfg);
    else throw ConfigError("unknown stage: " + cfg.stage);
}

}  // namespace toklip

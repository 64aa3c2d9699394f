#include <doctest.h>

#include <cmath>

#include "toklip/gradcheck.hpp"
#include "toklip/synthdata.hpp"
#include "toklip/teacher.hpp"
#include "toklip/toklip.hpp"
#include "toklip/vq.hpp"

using namespace toklip;

namespace {

struct Fixture {
    VqModel<float> vq;
    Teacher<float> teacher;

    Fixture()
        : vq(Rng::substream(0, "init/vq"), VqConfig{}),
          teacher(Rng::substream(0, "init/teacher"), TeacherConfig{},
                  synth::TextVocab::standard().size()) {
        vq.freeze();
        teacher.freeze();
    }
};

ToklipBatchContext<float> make_ctx(Fixture& fx, int batch, uint64_t seed = 0) {
    synth::Dataset ds = synth::build_dataset(seed, batch, 1);
    std::vector<const std::vector<float>*> images;
    std::vector<std::vector<int>> captions;
    for (const auto& s : ds.train) {
        images.push_back(&s.pixels);
        captions.push_back(s.caption_tokens);
    }
    return make_toklip_batch(fx.vq, fx.teacher, images, captions);
}

}  // namespace

TEST_SUITE("toklip") {

TEST_CASE("mlp mapping with zero weights gives zero features") {
    ToklipConfig cfg;
    ToklipModel<float> m(Rng::substream(1, "init/toklip"), cfg);
    for (auto& v : m.map_fc1.w.v()) v = 0;
    for (auto& v : m.map_fc1.b.v()) v = 0;
    for (auto& v : m.map_fc2.w.v()) v = 0;
    for (auto& v : m.map_fc2.b.v()) v = 0;
    Rng rng(7);
    Tensor<float> codes = Tensor<float>::randn(rng, {64, 8}, 0.5f);
    Tensor<float> out = m.project_codes(nullptr, codes, {});
    for (float v : out.v()) CHECK(v == 0.0f);
}

TEST_CASE("codebook mapping gathers equal rows for equal indices") {
    ToklipConfig cfg;
    cfg.mapping = MappingMode::kCodebookEmbedding;
    ToklipModel<float> m(Rng::substream(2, "init/toklip"), cfg);
    Rng rng(8);
    Tensor<float> codes = Tensor<float>::randn(rng, {4, 8}, 0.5f);
    Tensor<float> out = m.project_codes(nullptr, codes, {5, 9, 5, 5});
    for (int j = 0; j < cfg.d; j++) {
        CHECK(out.at(0, j) == out.at(2, j));
        CHECK(out.at(0, j) == out.at(3, j));
        CHECK(out.at(0, j) == m.map_table.at(5, j));
    }
}

TEST_CASE("both mapping modes pass the finite-difference oracle in f64") {
    ToklipConfig cfg;
    cfg.d = 16;
    cfg.tokens = 4;
    Rng rng(3);
    {
        ToklipModel<double> m(Rng::substream(3, "init/toklip"), cfg);
        Tensor<double> target = Tensor<double>::randn(rng, {4, 16}, 1.0);
        auto f = [&](Tape<double>* tp, const Tensor<double>& x) {
            return mse(tp, m.project_codes(tp, x, {}), target);
        };
        CHECK(grad_check_fd<double>(f, Tensor<double>::randn(rng, {4, 8}, 0.5), 1e-5) < 1e-6);
    }
    {
        ToklipConfig ccfg = cfg;
        ccfg.mapping = MappingMode::kCodebookEmbedding;
        ToklipModel<double> m(Rng::substream(4, "init/toklip"), ccfg);
        Tensor<double> target = Tensor<double>::randn(rng, {3, 16}, 1.0);
        Tensor<double> dummy_codes = Tensor<double>::zeros({3, 8});
        std::vector<int> idx = {1, 7, 1};
        auto f = [&](Tape<double>* tp, const Tensor<double>& table) {
            ToklipModel<double> local = m;
            local.map_table = table;
            return mse(tp, local.project_codes(tp, dummy_codes, idx), target);
        };
        CHECK(grad_check_fd<double>(f, m.map_table.detach(), 1e-5) < 1e-6);
    }
}

TEST_CASE("causal prefix invariance is bit exact; summary token sees every code") {
    Fixture fx;
    ToklipConfig cfg;
    ToklipModel<float> m(Rng::substream(5, "init/toklip"), cfg);
    synth::CaptionedImage img = synth::render_sample(0, 0);
    CodeGrid<float> grid = fx.vq.encode_image(img.pixels);
    auto enc = m.encode(nullptr, grid.embeddings, grid.indices, 1);

    // perturb the code at grid position t+1.. and compare token features
    for (int t : {0, 13, 62}) {
        Tensor<float> pert = grid.embeddings.detach();
        for (int u = t + 1; u < 64; u++)
            for (int j = 0; j < 8; j++) pert.at(u, j) += 0.37f * static_cast<float>(u - t);
        auto enc_p = m.encode(nullptr, pert, grid.indices, 1);
        for (int u = 0; u <= t; u++)
            for (int j = 0; j < cfg.d; j++) CHECK(enc_p.token_feats.at(u, j) == enc.token_feats.at(u, j));
    }

    // the summary embedding must move when ANY token changes, including the
    // first: under the causal mask only a last-position summary sees them all
    for (int t : {0, 31, 63}) {
        Tensor<float> pert = grid.embeddings.detach();
        for (int j = 0; j < 8; j++) pert.at(t, j) += 1.0f;
        auto enc_p = m.encode(nullptr, pert, grid.indices, 1);
        bool changed = false;
        for (int j = 0; j < cfg.embed; j++)
            if (enc_p.z.at(0, j) != enc.z.at(0, j)) changed = true;
        CHECK(changed);
    }
}

TEST_CASE("bidirectional and causal outputs differ for T > 1 on random weights") {
    ToklipConfig causal_cfg;
    ToklipConfig bidir_cfg;
    bidir_cfg.attention = AttnMode::kBidirectional;
    ToklipModel<float> mc(Rng::substream(6, "init/toklip"), causal_cfg);
    ToklipModel<float> mb(Rng::substream(6, "init/toklip"), bidir_cfg);  // same weights

    Fixture fx;
    synth::CaptionedImage img = synth::render_sample(0, 2);
    CodeGrid<float> grid = fx.vq.encode_image(img.pixels);
    auto ec = mc.encode(nullptr, grid.embeddings, grid.indices, 1);
    auto eb = mb.encode(nullptr, grid.embeddings, grid.indices, 1);
    bool differ = false;
    for (size_t i = 0; i < ec.token_feats.v().size(); i++)
        if (ec.token_feats.v()[i] != eb.token_feats.v()[i]) differ = true;
    CHECK(differ);
}

TEST_CASE("loss identities") {
    Fixture fx;
    ToklipConfig cfg;
    ToklipModel<float> m(Rng::substream(9, "init/toklip"), cfg);
    ToklipBatchContext<float> ctx = make_ctx(fx, 6);

    // student output == teacher target -> zero distillation loss
    {
        auto enc = m.encode(nullptr, ctx.code_embeddings, ctx.indices, ctx.batch);
        ToklipBatchContext<float> ctx2 = ctx;
        ctx2.z_img = enc.z.detach();
        Tensor<float> loss;
        ToklipLoss<float> parts = toklip_loss_graph<float>(nullptr, m, ctx2, &loss);
        CHECK(parts.distill == 0.0f);
        CHECK(parts.total == parts.contrastive);
    }
    // distill none: L == L_contra exactly
    {
        ToklipConfig none_cfg;
        none_cfg.distill = DistillTarget::kNone;
        ToklipModel<float> mn(Rng::substream(9, "init/toklip"), none_cfg);
        Tensor<float> loss;
        ToklipLoss<float> parts = toklip_loss_graph<float>(nullptr, mn, ctx, &loss);
        CHECK(parts.distill == 0.0f);
        CHECK(parts.total == parts.contrastive);
    }
    // batch of one, distill none: degenerate InfoNCE, zero loss
    {
        ToklipConfig none_cfg;
        none_cfg.distill = DistillTarget::kNone;
        ToklipModel<float> mn(Rng::substream(10, "init/toklip"), none_cfg);
        ToklipBatchContext<float> ctx1 = make_ctx(fx, 1, 2);
        Tensor<float> loss;
        ToklipLoss<float> parts = toklip_loss_graph<float>(nullptr, mn, ctx1, &loss);
        CHECK(parts.total == doctest::Approx(0.0).epsilon(1e-6));
    }
    // total always equals the sum of the parts as f32 values
    {
        Tensor<float> loss;
        ToklipLoss<float> parts = toklip_loss_graph<float>(nullptr, m, ctx, &loss);
        CHECK(parts.total == parts.contrastive + parts.distill);
    }
}

TEST_CASE("init_from_teacher copies encoder weights bit exactly") {
    Fixture fx;
    ToklipConfig cfg;
    ToklipModel<float> m(Rng::substream(11, "init/toklip"), cfg);
    init_from_teacher(m, fx.teacher);

    ParamSet<float> src, dst;
    fx.teacher.vision.params(src, "x");
    m.encoder.params(dst, "x");
    fx.teacher.img_proj.params(src, "p");
    m.proj.params(dst, "p");
    CHECK(src.value_hash() == dst.value_hash());

    // scratch init is reproducible
    ToklipModel<float> s1(Rng::substream(12, "init/toklip"), cfg);
    ToklipModel<float> s2(Rng::substream(12, "init/toklip"), cfg);
    CHECK(s1.params().value_hash() == s2.params().value_hash());

    // dim mismatch is rejected
    ToklipConfig bad = cfg;
    bad.d = 32;
    bad.heads = 2;
    ToklipModel<float> mb(Rng::substream(13, "init/toklip"), bad);
    CHECK_THROWS_AS(init_from_teacher(mb, fx.teacher), ValueError);
}

TEST_CASE("teacher-init bidirectional student reproduces teacher block outputs bit exactly") {
    Fixture fx;
    ToklipConfig cfg;
    cfg.attention = AttnMode::kBidirectional;
    ToklipModel<float> m(Rng::substream(14, "init/toklip"), cfg);
    init_from_teacher(m, fx.teacher);

    synth::CaptionedImage img = synth::render_sample(0, 7);
    ImageEncoding<float> t_enc = fx.teacher.encode_images(nullptr, {&img.pixels});

    // bypass the projector: feed the teacher's own patch embeddings through
    // the student's encoder
    Tensor<float> patches = patchify_image<float>(img.pixels, fx.teacher.cfg.image,
                                                  fx.teacher.cfg.patch, fx.teacher.cfg.channels);
    Tensor<float> tokens = fx.teacher.patch_embed.forward(nullptr, patches);
    Tensor<float> packed = m.encoder.forward(nullptr, tokens, 1, /*causal=*/false);
    CHECK(packed.v() == t_enc.packed.v());
}

TEST_CASE("train step updates only the student; upstream hash check trips on tampering") {
    Fixture fx;
    ToklipConfig cfg;
    ToklipModel<float> m(Rng::substream(15, "init/toklip"), cfg);
    init_from_teacher(m, fx.teacher);
    ToklipBatchContext<float> ctx = make_ctx(fx, 8);
    OptimConfig oc;
    oc.lr_scale = 100.0;
    AdamW<float> opt(m.params(), oc);
    uint64_t vq_hash = fx.vq.param_hash();
    uint64_t teacher_hash = fx.teacher.param_hash();

    uint64_t vq_before = fx.vq.param_hash();
    uint64_t teacher_before = fx.teacher.param_hash();
    uint64_t student_before = m.param_hash();
    toklip_train_step(m, ctx, opt, fx.vq, vq_hash, fx.teacher, teacher_hash);
    CHECK(fx.vq.param_hash() == vq_before);
    CHECK(fx.teacher.param_hash() == teacher_before);
    CHECK(m.param_hash() != student_before);

    // frozen upstream params accumulate no gradient at all
    for (auto& [name, p] : fx.teacher.params().items) CHECK(p->g.empty());
    for (auto& [name, p] : fx.vq.params().items) CHECK(p->g.empty());

    // tamper with the teacher: the step must refuse
    fx.teacher.logit_scale.at(0) += 0.5f;
    CHECK_THROWS_AS(toklip_train_step(m, ctx, opt, fx.vq, vq_hash, fx.teacher, teacher_hash),
                    ValueError);
    fx.teacher.logit_scale.at(0) -= 0.5f;

    m.freeze();
    CHECK_THROWS_AS(toklip_train_step(m, ctx, opt, fx.vq, vq_hash, fx.teacher, teacher_hash),
                    ValueError);
}

TEST_CASE("student contrastive+distill loss passes the finite-difference oracle in f64") {
    // miniature student over random frozen inputs
    ToklipConfig cfg;
    cfg.d = 16;
    cfg.tokens = 6;
    cfg.embed = 16;
    cfg.blocks = 2;
    cfg.heads = 2;
    ToklipModel<double> m(Rng::substream(16, "init/toklip"), cfg);
    Rng rng(17);
    ToklipBatchContext<double> ctx;
    ctx.batch = 2;
    ctx.code_embeddings = Tensor<double>::randn(rng, {12, 8}, 0.3);
    ctx.indices.assign(12, 0);
    ctx.z_text = l2_normalize_rows<double>(nullptr, Tensor<double>::randn(rng, {2, 16}, 1.0));
    ctx.z_img = l2_normalize_rows<double>(nullptr, Tensor<double>::randn(rng, {2, 16}, 1.0));
    ctx.teacher_scale = Tensor<double>::scalar(10.0);

    // tiled probe + linear conditioning keeps every gradient coordinate out
    // of the FD roundoff band
    auto f = [&](Tape<double>* tp, const Tensor<double>& x) {
        ToklipBatchContext<double> local = ctx;
        local.code_embeddings = add_tiled(tp, ctx.code_embeddings, x);
        Tensor<double> loss;
        toklip_loss_graph(tp, m, local, &loss);
        return add(tp, loss, scale(tp, mean_all(tp, x), 12.0));
    };
    Tensor<double> x0 = Tensor<double>::zeros({1, 8});
    CHECK(grad_check_fd<double>(f, x0, 3e-5) < 1e-6);
}

}  // TEST_SUITE

#include <doctest.h>

#include <cmath>

#include "toklip/gradcheck.hpp"
#include "toklip/synthdata.hpp"
#include "toklip/teacher.hpp"

using namespace toklip;

namespace {

Teacher<float> small_teacher(uint64_t seed = 0) {
    return Teacher<float>(Rng::substream(seed, "init/teacher"), TeacherConfig{},
                          synth::TextVocab::standard().size());
}

double norm_of_row(const Tensor<float>& t, int row) {
    double s = 0;
    for (int j = 0; j < t.cols(); j++) s += static_cast<double>(t.at(row, j)) * t.at(row, j);
    return std::sqrt(s);
}

}  // namespace

TEST_SUITE("teacher") {

TEST_CASE("image embeddings are unit norm and deterministic") {
    Teacher<float> teacher = small_teacher();
    synth::CaptionedImage a = synth::render_sample(0, 0);
    synth::CaptionedImage b = synth::render_sample(0, 1);
    ImageEncoding<float> enc = teacher.encode_images(nullptr, {&a.pixels, &b.pixels, &a.pixels});
    for (int i = 0; i < 3; i++) CHECK(norm_of_row(enc.z, i) == doctest::Approx(1.0).epsilon(1e-6));
    // identical images -> identical embeddings
    for (int j = 0; j < 64; j++) CHECK(enc.z.at(0, j) == enc.z.at(2, j));
    CHECK(enc.patch_feats.rows() == 3 * 64);
}

TEST_CASE("permuting patches together with positions leaves the summary embedding unchanged") {
    // permutation equivariance of bidirectional attention, f64 to keep
    // reordered sums tight
    TeacherConfig cfg;
    Rng rng = Rng::substream(5, "init/teacher");
    Teacher<double> teacher(rng, cfg, synth::TextVocab::standard().size());
    synth::CaptionedImage img = synth::render_sample(1, 4);

    Tensor<double> patches = patchify_image<double>(img.pixels, cfg.image, cfg.patch, cfg.channels);
    Tensor<double> tokens = teacher.patch_embed.forward(nullptr, patches);

    Rng perm_rng(77);
    std::vector<int> perm = perm_rng.permutation(64);

    // run 1: vanilla
    Tensor<double> packed = teacher.vision.forward(nullptr, tokens, 1, false);
    // run 2: permute token rows AND the matching positional rows
    TokenEncoder<double> permuted = teacher.vision;
    permuted.pos = teacher.vision.pos.detach();
    for (int t = 0; t < 64; t++)
        for (int j = 0; j < cfg.d; j++) permuted.pos.at(t, j) = teacher.vision.pos.at(perm[static_cast<size_t>(t)], j);
    Tensor<double> tokens_p = Tensor<double>::zeros({64, cfg.d});
    for (int t = 0; t < 64; t++)
        for (int j = 0; j < cfg.d; j++) tokens_p.at(t, j) = tokens.at(perm[static_cast<size_t>(t)], j);
    Tensor<double> packed_p = permuted.forward(nullptr, tokens_p, 1, false);

    // summary row (last position) must match up to reordered-sum rounding
    for (int j = 0; j < cfg.d; j++)
        CHECK(packed_p.at(64, j) == doctest::Approx(packed.at(64, j)).epsilon(1e-10));
}

TEST_CASE("text embeddings are unit norm, deterministic, reject unknown ids") {
    Teacher<float> teacher = small_teacher(1);
    synth::TextVocab vocab = synth::TextVocab::standard();
    std::vector<std::vector<int>> caps = {vocab.encode("a red circle on a white background"),
                                          vocab.encode("a blue square on a gray background")};
    Tensor<float> z1 = teacher.encode_texts(nullptr, caps);
    Tensor<float> z2 = teacher.encode_texts(nullptr, caps);
    CHECK(z1.v() == z2.v());
    for (int i = 0; i < 2; i++) CHECK(norm_of_row(z1, i) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK_THROWS_AS(teacher.encode_texts(nullptr, {{9999}}), ValueError);
}

TEST_CASE("InfoNCE spot values") {
    Tensor<float> one = Tensor<float>::scalar(1.0f);
    // B = 1: single candidate, zero loss
    Tensor<float> za = Tensor<float>::from({1, 2}, {1, 0});
    Tensor<float> zb = Tensor<float>::from({1, 2}, {1, 0});
    CHECK(clip_infonce_loss<float>(nullptr, za, zb, one).item() == doctest::Approx(0.0).epsilon(1e-7));

    // B = 2, orthonormal matched pairs, scale 1: ln(1 + e^-1) = 0.31326
    Tensor<float> a2 = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
    Tensor<float> b2 = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
    CHECK(clip_infonce_loss<float>(nullptr, a2, b2, one).item() ==
          doctest::Approx(0.31326169).epsilon(1e-4));

    // simultaneous identical permutation of both batches leaves the loss unchanged
    Rng rng(9);
    Tensor<double> x = l2_normalize_rows<double>(nullptr, Tensor<double>::randn(rng, {5, 8}, 1.0));
    Tensor<double> y = l2_normalize_rows<double>(nullptr, Tensor<double>::randn(rng, {5, 8}, 1.0));
    Tensor<double> oned = Tensor<double>::scalar(3.7);
    double base = clip_infonce_loss<double>(nullptr, x, y, oned).item();
    std::vector<int> perm = {3, 0, 4, 1, 2};
    Tensor<double> xp = gather_rows<double>(nullptr, x, perm);
    Tensor<double> yp = gather_rows<double>(nullptr, y, perm);
    CHECK(clip_infonce_loss<double>(nullptr, xp, yp, oned).item() == doctest::Approx(base).epsilon(1e-12));

    // guard: non-normalized rows are rejected when finite checks are on
    bool saved = finite_checks();
    finite_checks() = true;
    Tensor<float> bad = Tensor<float>::from({1, 2}, {3, 4});
    CHECK_THROWS_AS(clip_infonce_loss<float>(nullptr, bad, za, one), NumericError);
    finite_checks() = saved;
}

TEST_CASE("attention pool properties") {
    Teacher<float> teacher = small_teacher(2);
    Rng rng(31);
    // T' = 1: output is exactly the projected single feature
    Tensor<float> f1 = Tensor<float>::randn(rng, {1, 64}, 0.5f);
    Tensor<float> pooled1 = teacher.attention_pool(nullptr, f1, 1);
    Tensor<float> expected = l2_normalize_rows<float>(nullptr, teacher.pool_proj.forward(nullptr, f1));
    CHECK(pooled1.v() == expected.v());
    CHECK(norm_of_row(pooled1, 0) == doctest::Approx(1.0).epsilon(1e-6));

    // duplicated-patch input pools to the same vector as the single patch
    Tensor<float> f3 = Tensor<float>::zeros({3, 64});
    for (int t = 0; t < 3; t++)
        for (int j = 0; j < 64; j++) f3.at(t, j) = f1.at(0, j);
    Tensor<float> pooled3 = teacher.attention_pool(nullptr, f3, 1);
    for (int j = 0; j < 64; j++)
        CHECK(pooled3.at(0, j) == doctest::Approx(pooled1.at(0, j)).epsilon(1e-6));
}

TEST_CASE("train step: init loss near ln(B), logit scale stays clamped") {
    Teacher<float> teacher = small_teacher(3);
    synth::Dataset ds = synth::build_dataset(3, 32, 8);
    std::vector<const std::vector<float>*> images;
    std::vector<std::vector<int>> captions;
    for (int i = 0; i < 16; i++) {
        images.push_back(&ds.train[static_cast<size_t>(i)].pixels);
        captions.push_back(ds.train[static_cast<size_t>(i)].caption_tokens);
    }
    OptimConfig oc;
    oc.lr_scale = 100.0;
    AdamW<float> opt(teacher.params(), oc);
    TeacherLoss<float> loss = teacher_train_step(teacher, images, captions, opt);
    double ln_b = std::log(16.0);
    CHECK(loss.contrastive <= ln_b * 1.1);
    CHECK(loss.contrastive >= ln_b * 0.5);
    CHECK(loss.pool_contrastive <= ln_b * 1.1);
    CHECK(loss.total == loss.contrastive + loss.pool_contrastive);

    // clamp: drive the scale out of range, one step pulls it back inside
    teacher.logit_scale.at(0) = 10.0f;
    teacher_train_step(teacher, images, captions, opt);
    CHECK(teacher.logit_scale.item() <= 4.60517019f);
    teacher.logit_scale.at(0) = 0.0f;
    teacher_train_step(teacher, images, captions, opt);
    CHECK(teacher.logit_scale.item() >= 0.69314718f);

    teacher.freeze();
    CHECK_THROWS_AS(teacher_train_step(teacher, images, captions, opt), ValueError);
}

TEST_CASE("teacher contrastive loss passes the finite-difference oracle in f64") {
    TeacherConfig cfg;
    cfg.image = 8;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.vision_blocks = 2;
    cfg.text_blocks = 1;
    cfg.embed = 16;
    Teacher<double> teacher(Rng::substream(4, "init/teacher"), cfg,
                            synth::TextVocab::standard().size());
    synth::TextVocab vocab = synth::TextVocab::standard();
    std::vector<std::vector<int>> caps = {vocab.encode("a red circle"), vocab.encode("a blue square")};
    Tensor<double> z_text = teacher.encode_texts(nullptr, caps).detach();

    Rng rng(55);
    std::vector<std::vector<float>> imgs(2, std::vector<float>(8 * 8 * 3));
    for (auto& img : imgs)
        for (auto& p : img) p = rng.next_float();
    Tensor<double> patches = Tensor<double>::zeros({2 * cfg.tokens(), cfg.patch_dim()});
    for (int i = 0; i < 2; i++) {
        Tensor<double> p = patchify_image<double>(imgs[static_cast<size_t>(i)], cfg.image, cfg.patch, cfg.channels);
        std::memcpy(patches.data() + static_cast<size_t>(i) * p.v().size(), p.data(),
                    sizeof(double) * p.v().size());
    }
    Tensor<double> scale_c = Tensor<double>::scalar(std::exp(teacher.logit_scale.item()));
    // tiled probe + linear conditioning keeps every gradient coordinate out
    // of the FD roundoff band
    auto f = [&](Tape<double>* tp, const Tensor<double>& x) {
        Tensor<double> tokens = teacher.patch_embed.forward(tp, add_tiled(tp, patches, x));
        Tensor<double> packed = teacher.vision.forward(tp, tokens, 2, false);
        Tensor<double> cls = take_rows(tp, packed, teacher.vision.cls_rows(2));
        Tensor<double> z = l2_normalize_rows(tp, teacher.img_proj.forward(tp, cls));
        Tensor<double> contra = clip_infonce_loss(tp, z, z_text, scale_c);
        Tensor<double> feats = take_rows(tp, packed, teacher.vision.token_rows(2));
        Tensor<double> pooled = teacher.attention_pool(tp, feats, 2);
        Tensor<double> loss = add(tp, contra, clip_infonce_loss(tp, pooled, z_text, scale_c));
        return add(tp, loss, scale(tp, mean_all(tp, x), 12.0));
    };
    Tensor<double> x0 = Tensor<double>::zeros({1, cfg.patch_dim()});
    CHECK(grad_check_fd<double>(f, x0, 3e-5) < 1e-6);
}

}  // TEST_SUITE

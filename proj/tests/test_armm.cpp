#include <doctest.h>

#include <cmath>

#include "toklip/gradcheck.hpp"
#include "toklip/incremental.hpp"
#include "toklip/stages.hpp"

using namespace toklip;

namespace {

struct ArFixture {
    VqModel<float> vq;
    ToklipModel<float> toklip;
    ArConfig acfg;
    ArModel<float> ar;

    explicit ArFixture(FusionMode fusion = FusionMode::kConcat, uint64_t seed = 0)
        : vq(Rng::substream(seed, "init/vq"), VqConfig{}),
          toklip(Rng::substream(seed, "init/toklip"), ToklipConfig{}) {
        vq.freeze();
        toklip.freeze();
        acfg.fusion = fusion;
        acfg.vocab.text_size = synth::TextVocab::standard().size();
        acfg.vocab.codebook = vq.cfg.codebook;
        ar = ArModel<float>(Rng::substream(seed, "init/ar"), acfg);
    }

    std::vector<int> codes_for(uint64_t index) const {
        synth::CaptionedImage img = synth::render_sample(0, index);
        return vq.encode_image(img.pixels).indices;
    }
};

}  // namespace

TEST_SUITE("armm") {

TEST_CASE("sequence layouts match the wire contract") {
    ArVocab vocab;
    vocab.text_size = 36;
    vocab.codebook = 256;
    std::vector<int> codes(64, 5);
    codes[0] = 17;

    SequenceLayout gen = make_generate_layout(vocab, synth::TextVocab::kFirstClassToken + 3, codes);
    CHECK(gen.tokens.size() == 69);
    CHECK(gen.tokens[0] == synth::TextVocab::kBos);
    CHECK(gen.tokens[1] == synth::TextVocab::kFirstClassToken + 3);
    CHECK(gen.tokens[2] == synth::TextVocab::kBoi);
    CHECK(gen.tokens[3] == vocab.vq_token(17));
    CHECK(gen.tokens[66] == vocab.vq_token(5));
    CHECK(gen.tokens[67] == synth::TextVocab::kEoi);
    CHECK(gen.tokens[68] == synth::TextVocab::kEos);
    CHECK(gen.image_start == 3);
    // loss on v1..v64 and [EOI], not on the class token or [EOS]
    CHECK(gen.loss_mask.size() == 68);
    CHECK(gen.loss_mask[0] == 0);
    CHECK(gen.loss_mask[1] == 0);
    CHECK(gen.loss_mask[2] == 1);   // predicts v1
    CHECK(gen.loss_mask[66] == 1);  // predicts [EOI]
    CHECK(gen.loss_mask[67] == 0);  // prediction of [EOS] is unscored
    int scored = 0;
    for (auto m : gen.loss_mask) scored += m;
    CHECK(scored == 65);

    std::vector<int> words = {21, 24, 28};
    SequenceLayout cap = make_caption_layout(vocab, codes, words);
    CHECK(cap.tokens.size() == 2 + 64 + 1 + 3 + 1);
    CHECK(cap.tokens[1] == synth::TextVocab::kBoi);
    CHECK(cap.image_start == 2);
    CHECK(cap.tokens[66] == synth::TextVocab::kEoi);
    CHECK(cap.tokens[67] == 21);
    CHECK(cap.tokens.back() == synth::TextVocab::kEos);
    scored = 0;
    for (auto m : cap.loss_mask) scored += m;
    CHECK(scored == 4);             // w1 w2 w3 and [EOS]
    CHECK(cap.loss_mask[65] == 0);  // prediction of [EOI] is unscored
    CHECK(cap.loss_mask[66] == 1);  // predicts w1
    CHECK(cap.loss_mask[69] == 1);  // predicts [EOS]
}

TEST_CASE("fusion identities") {
    Rng rng(3);
    int dhat = 8, sem = 64, dm = 128;
    Tensor<float> code = Tensor<float>::randn(rng, {5, dhat}, 0.5f);
    Tensor<float> semantic = Tensor<float>::randn(rng, {5, sem}, 0.5f);

    // weighted sum with alpha == 1 follows the pure semantic path before the
    // final projection
    FusionHead<float> wsum(Rng::substream(1, "fusion"), FusionMode::kWeightedSum, dhat, sem, dm);
    wsum.alpha_raw.at(0) = 50.0f;  // sigmoid saturates to exactly 1.0f
    CHECK(wsum.alpha() == 1.0f);
    Tensor<float> fused = wsum.fuse(nullptr, code, semantic);
    Tensor<float> pure = wsum.to_model.forward(nullptr, semantic);
    CHECK(fused.v() == pure.v());

    // alpha parameterization stays in [0,1]
    wsum.alpha_raw.at(0) = -50.0f;
    CHECK(wsum.alpha() >= 0.0f);
    CHECK(wsum.alpha() < 1e-20f);
    wsum.alpha_raw.at(0) = 0.0f;
    CHECK(wsum.alpha() == 0.5f);

    // concat joins (dhat + sem) features ahead of the final linear
    FusionHead<float> cat(Rng::substream(2, "fusion"), FusionMode::kConcat, dhat, sem, dm);
    CHECK(cat.to_model.w.rows() == dhat + sem);
    CHECK(cat.fuse(nullptr, code, semantic).cols() == dm);

    // vq_only ignores the semantic features entirely
    FusionHead<float> vqo(Rng::substream(3, "fusion"), FusionMode::kVqOnly, dhat, sem, dm);
    Tensor<float> a = vqo.fuse(nullptr, code, semantic);
    Tensor<float> b = vqo.fuse(nullptr, code, scale<float>(nullptr, semantic, 5.0f));
    CHECK(a.v() == b.v());

    CHECK_THROWS_AS(cat.fuse(nullptr, code, Tensor<float>::zeros({4, sem})), ValueError);
}

TEST_CASE("all fusion modes pass the finite-difference oracle in f64") {
    Rng rng(5);
    Tensor<double> code = Tensor<double>::randn(rng, {3, 8}, 0.4);
    Tensor<double> semantic = Tensor<double>::randn(rng, {3, 16}, 0.4);
    for (FusionMode mode : {FusionMode::kSum, FusionMode::kWeightedSum, FusionMode::kConcat,
                            FusionMode::kVqOnly}) {
        FusionHead<double> head(Rng::substream(9, "fusion"), mode, 8, 16, 12);
        auto f_code = [&](Tape<double>* tp, const Tensor<double>& x) {
            return mean_all(tp, head.fuse(tp, x, semantic));
        };
        INFO("mode " << to_string(mode));
        CHECK(grad_check_fd<double>(f_code, code.detach(), 1e-5) < 1e-6);
        if (mode != FusionMode::kVqOnly) {
            auto f_sem = [&](Tape<double>* tp, const Tensor<double>& x) {
                return mean_all(tp, head.fuse(tp, code, x));
            };
            CHECK(grad_check_fd<double>(f_sem, semantic.detach(), 1e-5) < 1e-6);
        }
    }
}

TEST_CASE("cfg_logits arithmetic") {
    std::vector<float> cond = {1.0f, 0.0f};
    std::vector<float> uncond = {0.0f, 0.0f};
    std::vector<float> s25 = cfg_logits(cond, uncond, 2.5f);
    CHECK(s25[0] == doctest::Approx(2.5).epsilon(1e-7));
    CHECK(s25[1] == 0.0f);

    std::vector<float> c = {0.3f, -1.7f, 2.2f};
    std::vector<float> u = {0.1f, 0.4f, -0.9f};
    CHECK(cfg_logits(c, u, 1.0f) == c);  // bit-exact identity at s = 1
    CHECK(cfg_logits(c, u, 0.0f) == u);  // s = 0 collapses to unconditional
}

TEST_CASE("sampling filters") {
    SamplerConfig cfg;
    cfg.seed = 4;
    Rng rng(1);
    std::vector<float> logits = {2.0f, 1.0f, 0.5f, -3.0f};

    // greedy = argmax, consumes no randomness, deterministic across runs
    SamplerConfig greedy = cfg;
    greedy.greedy = true;
    for (int i = 0; i < 4; i++) {
        Rng r(static_cast<uint64_t>(i));
        CHECK(sample_from_logits(logits, greedy, r) == 0);
    }

    // top_k = 1 is argmax regardless of the draw
    SamplerConfig k1 = cfg;
    k1.top_k = 1;
    for (int i = 0; i < 8; i++) CHECK(sample_from_logits(logits, k1, rng) == 0);

    // tiny top_p keeps only the head of the distribution
    SamplerConfig p_small = cfg;
    p_small.top_p = 0.05;
    for (int i = 0; i < 8; i++) CHECK(sample_from_logits(logits, p_small, rng) == 0);

    // top_k = 0 and top_p = 1: no filtering; every candidate is reachable
    std::vector<int> seen(4, 0);
    std::vector<float> flat = {0.0f, 0.0f, 0.0f, 0.0f};
    for (int i = 0; i < 400; i++) seen[static_cast<size_t>(sample_from_logits(flat, cfg, rng))]++;
    for (int s : seen) CHECK(s > 50);

    SamplerConfig bad = cfg;
    bad.temperature = 0.0;
    CHECK_THROWS_AS(sample_from_logits(logits, bad, rng), ValueError);
    bad = cfg;
    bad.top_p = 0.0;
    CHECK_THROWS_AS(sample_from_logits(logits, bad, rng), ValueError);
    bad = cfg;
    bad.top_k = -1;
    CHECK_THROWS_AS(sample_from_logits(logits, bad, rng), ValueError);
}

TEST_CASE("ar train step: init loss near ln(vocab), no gradient into frozen models") {
    ArFixture fx;
    std::vector<SequenceLayout> layouts;
    for (uint64_t i = 0; i < 4; i++) {
        std::vector<int> codes = fx.codes_for(i);
        if (i % 2 == 0) {
            layouts.push_back(make_generate_layout(fx.acfg.vocab,
                                                   synth::TextVocab::kFirstClassToken + static_cast<int>(i % 16),
                                                   codes));
        } else {
            synth::CaptionedImage img = synth::render_sample(0, i);
            layouts.push_back(make_caption_layout(fx.acfg.vocab, codes, img.caption_tokens));
        }
    }
    // homogeneous batches per step (layout lengths differ between tasks)
    std::vector<SequenceLayout> gen_batch = {layouts[0], layouts[2]};
    ArBatchInputs<float> inputs = make_ar_inputs(fx.toklip, fx.vq, gen_batch);
    OptimConfig oc;
    AdamW<float> opt(fx.ar.params(), oc);
    Rng drop = Rng::substream(0, "dropout/ar");
    uint64_t tok_hash = fx.toklip.param_hash(), vq_hash = fx.vq.param_hash();
    float loss = ar_train_step(fx.ar, fx.toklip, tok_hash, fx.vq, vq_hash, gen_batch, inputs, opt, drop);
    double ln_v = std::log(static_cast<double>(fx.acfg.vocab.total()));
    CHECK(loss >= 0.85 * ln_v);
    CHECK(loss <= 1.15 * ln_v);

    CHECK(fx.toklip.param_hash() == tok_hash);
    CHECK(fx.vq.param_hash() == vq_hash);
    for (auto& [name, p] : fx.toklip.params().items) CHECK(p->g.empty());
    for (auto& [name, p] : fx.vq.params().items) CHECK(p->g.empty());

    // tampering with the frozen student trips the hash check
    fx.toklip.proj.b.at(0) += 1.0f;
    CHECK_THROWS_AS(
        ar_train_step(fx.ar, fx.toklip, tok_hash, fx.vq, vq_hash, gen_batch, inputs, opt, drop),
        ValueError);
}

TEST_CASE("causal consistency: prefix logits are invariant to future tokens") {
    ArFixture fx;
    std::vector<int> codes = fx.codes_for(1);
    SequenceLayout a = make_generate_layout(fx.acfg.vocab, synth::TextVocab::kFirstClassToken + 2, codes);
    std::vector<int> codes_b = codes;
    for (int t = 40; t < 64; t++) codes_b[static_cast<size_t>(t)] = (codes_b[static_cast<size_t>(t)] + 31) % 256;
    SequenceLayout b = make_generate_layout(fx.acfg.vocab, synth::TextVocab::kFirstClassToken + 2, codes_b);

    ArBatchInputs<float> in_a = make_ar_inputs(fx.toklip, fx.vq, {a});
    ArBatchInputs<float> in_b = make_ar_inputs(fx.toklip, fx.vq, {b});
    Tensor<float> fused_a = fx.ar.fusion.fuse(nullptr, in_a.code_emb, in_a.token_feats);
    Tensor<float> fused_b = fx.ar.fusion.fuse(nullptr, in_b.code_emb, in_b.token_feats);
    Tensor<float> logits_a = fx.ar.forward_batch(nullptr, {a}, fused_a);
    Tensor<float> logits_b = fx.ar.forward_batch(nullptr, {b}, fused_b);
    // positions 0 .. 3+39 see identical prefixes (first divergent code is v41
    // at position 3+40)
    for (int pos = 0; pos < 43; pos++)
        for (int v = 0; v < fx.acfg.vocab.total(); v++)
            CHECK(logits_a.at(pos, v) == logits_b.at(pos, v));
}

TEST_CASE("incremental evaluation equals the batched forward bit for bit") {
    ArFixture fx(FusionMode::kConcat, 3);
    std::vector<int> codes = fx.codes_for(5);
    SequenceLayout layout =
        make_generate_layout(fx.acfg.vocab, synth::TextVocab::kFirstClassToken + 9, codes);

    // batched reference
    ArBatchInputs<float> inputs = make_ar_inputs(fx.toklip, fx.vq, {layout});
    Tensor<float> fused = fx.ar.fusion.fuse(nullptr, inputs.code_emb, inputs.token_feats);
    Tensor<float> logits = fx.ar.forward_batch(nullptr, {layout}, fused);

    // incremental: token encoder cache + AR runner
    incremental::TokenEncoderCache<float> tok_cache(&fx.toklip);
    incremental::ArRunner<float> runner(&fx.ar);
    std::vector<std::vector<float>> inc_logits;
    inc_logits.push_back(runner.feed_table_token(layout.tokens[0]));
    inc_logits.push_back(runner.feed_table_token(layout.tokens[1]));
    inc_logits.push_back(runner.feed_table_token(layout.tokens[2]));
    for (int t = 0; t < 64; t++) {
        int code = codes[static_cast<size_t>(t)];
        std::vector<float> emb(static_cast<size_t>(8));
        std::memcpy(emb.data(), fx.vq.codebook.data() + static_cast<size_t>(code) * 8, sizeof(float) * 8);
        std::vector<float> sem = tok_cache.step(emb, code, t);
        // fused row must equal the batched fusion row exactly
        std::vector<float> frow = incremental::fuse_row(fx.ar.fusion, emb, sem, fx.acfg.d_model);
        for (int j = 0; j < fx.acfg.d_model; j++) CHECK(frow[static_cast<size_t>(j)] == fused.at(t, j));
        // and the semantic row must equal the batched student features
        for (int j = 0; j < fx.toklip.cfg.d; j++)
            CHECK(sem[static_cast<size_t>(j)] == inputs.token_feats.at(t, j));
        inc_logits.push_back(runner.feed_embedding(std::move(frow)));
    }
    for (size_t pos = 0; pos < inc_logits.size(); pos++)
        for (int v = 0; v < fx.acfg.vocab.total(); v++)
            CHECK(inc_logits[pos][static_cast<size_t>(v)] == logits.at(static_cast<int>(pos), v));
}

TEST_CASE("cfg_scale=1 sampling is bit-identical to conditional-only sampling") {
    ArFixture fx(FusionMode::kSum, 7);
    SamplerConfig scfg;
    scfg.cfg_scale = 1.0;
    scfg.seed = 42;
    SampleResult<float> dual = sample_image(fx.ar, fx.toklip, fx.vq, 4, scfg, 11, false);
    SampleResult<float> cond_only = sample_image(fx.ar, fx.toklip, fx.vq, 4, scfg, 11, true);
    CHECK(dual.codes == cond_only.codes);
    CHECK(dual.image == cond_only.image);

    // different sample index: its own RNG stream, (almost surely) different codes
    SampleResult<float> other = sample_image(fx.ar, fx.toklip, fx.vq, 4, scfg, 12, false);
    CHECK(dual.codes != other.codes);
}

TEST_CASE("greedy sampling is deterministic; caption decoding terminates") {
    ArFixture fx(FusionMode::kWeightedSum, 9);
    SamplerConfig scfg;
    scfg.greedy = true;
    scfg.seed = 5;
    SampleResult<float> a = sample_image(fx.ar, fx.toklip, fx.vq, 2, scfg, 0);
    SampleResult<float> b = sample_image(fx.ar, fx.toklip, fx.vq, 2, scfg, 0);
    CHECK(a.codes == b.codes);
    CHECK(a.image == b.image);
    CHECK(a.codes.size() == 64);
    for (float px : a.image) {
        CHECK(px >= 0.0f);
        CHECK(px <= 1.0f);
    }

    synth::CaptionedImage img = synth::render_sample(0, 3);
    std::vector<int> words = caption_image(fx.ar, fx.toklip, fx.vq, img.pixels);
    CHECK(static_cast<int>(words.size()) <= fx.ar.cfg.caption_cap);
    std::vector<int> words2 = caption_image(fx.ar, fx.toklip, fx.vq, img.pixels);
    CHECK(words == words2);
}

TEST_CASE("incremental fused embeddings match a from-scratch recomputation") {
    ArFixture fx(FusionMode::kConcat, 13);
    SamplerConfig scfg;
    scfg.cfg_scale = 2.5;
    scfg.seed = 7;
    SampleTrace<float> trace;
    SampleResult<float> result = sample_image(fx.ar, fx.toklip, fx.vq, 8, scfg, 3, false, &trace);

    // full recomputation over the emitted sequence
    SequenceLayout layout = make_generate_layout(fx.acfg.vocab, synth::TextVocab::kFirstClassToken + 8,
                                                 result.codes);
    ArBatchInputs<float> inputs = make_ar_inputs(fx.toklip, fx.vq, {layout});
    Tensor<float> fused = fx.ar.fusion.fuse(nullptr, inputs.code_emb, inputs.token_feats);
    REQUIRE(trace.fused_rows.size() == 64);
    for (int t = 0; t < 64; t++)
        for (int j = 0; j < fx.acfg.d_model; j++)
            CHECK(trace.fused_rows[static_cast<size_t>(t)][static_cast<size_t>(j)] == fused.at(t, j));
}

TEST_CASE("full AR loss passes the finite-difference oracle in f64") {
    // miniature everything: 4 image tokens, small dims
    VqConfig vcfg;
    vcfg.image = 8;
    vcfg.hidden = 12;
    vcfg.codebook = 16;
    VqModel<double> vq(Rng::substream(1, "init/vq"), vcfg);
    vq.freeze();
    ToklipConfig tcfg;
    tcfg.d = 16;
    tcfg.heads = 2;
    tcfg.blocks = 1;
    tcfg.tokens = 4;
    tcfg.embed = 16;
    ToklipModel<double> toklip(Rng::substream(1, "init/toklip"), tcfg);
    toklip.freeze();
    ArConfig acfg;
    acfg.d_model = 24;
    acfg.heads = 2;
    acfg.blocks = 2;
    acfg.image_tokens = 4;
    acfg.semantic_dim = 16;
    acfg.vocab.text_size = synth::TextVocab::standard().size();
    acfg.vocab.codebook = 16;
    ArModel<double> ar(Rng::substream(1, "init/ar"), acfg);

    std::vector<int> codes = {3, 7, 1, 14};
    SequenceLayout layout = make_generate_layout(acfg.vocab, synth::TextVocab::kFirstClassToken + 1, codes);
    Tensor<double> code_emb = gather_rows<double>(nullptr, vq.codebook, codes);
    Tensor<double> sem = toklip.encode(nullptr, code_emb, codes, 1).token_feats;

    int len = static_cast<int>(layout.tokens.size());
    std::vector<int> targets(static_cast<size_t>(len), 0);
    std::vector<double> weights(static_cast<size_t>(len), 0.0);
    for (int j = 0; j + 1 < len; j++) {
        targets[static_cast<size_t>(j)] = layout.tokens[static_cast<size_t>(j) + 1];
        weights[static_cast<size_t>(j)] = layout.loss_mask[static_cast<size_t>(j)] ? 1.0 : 0.0;
    }
    auto f = [&](Tape<double>* tp, const Tensor<double>& x) {
        Tensor<double> fused = ar.fusion.fuse(tp, add(tp, code_emb, x), sem);
        Tensor<double> logits = ar.forward_batch(tp, {layout}, fused);
        return cross_entropy(tp, logits, targets, &weights);
    };
    Tensor<double> x0 = Tensor<double>::zeros({4, vcfg.dhat});
    CHECK(grad_check_fd<double>(f, x0, 1e-5) < 1e-6);
}

}  // TEST_SUITE

#include <doctest.h>

#include <cmath>

#include "toklip/gradcheck.hpp"
#include "toklip/synthdata.hpp"
#include "toklip/vq.hpp"

using namespace toklip;

namespace {

VqModel<float> small_vq(uint64_t seed = 0) {
    return VqModel<float>(Rng::substream(seed, "init/vq"), VqConfig{});
}

}  // namespace

TEST_SUITE("vq") {

TEST_CASE("patch encode shapes and determinism") {
    VqModel<float> vq = small_vq();
    synth::CaptionedImage img = synth::render_sample(0, 0);
    Tensor<float> z_a = vq.patch_encode(nullptr, img.pixels);
    Tensor<float> z_b = vq.patch_encode(nullptr, img.pixels);
    CHECK(z_a.rows() == 64);
    CHECK(z_a.cols() == 8);
    CHECK(z_a.v() == z_b.v());

    // zero image with zero bias -> zero code rows
    VqModel<float> zeroed = small_vq();
    for (auto& [name, p] : zeroed.params().items)
        for (auto& v : p->v) v = 0.0f;
    std::vector<float> black(static_cast<size_t>(synth::kPixels), 0.0f);
    Tensor<float> z = zeroed.patch_encode(nullptr, black);
    for (float v : z.v()) CHECK(v == 0.0f);

    std::vector<float> wrong(10, 0.0f);
    CHECK_THROWS_AS(vq.patch_encode(nullptr, wrong), ValueError);
}

TEST_CASE("quantizer matches the exhaustive argmin oracle") {
    VqModel<float> vq = small_vq(1);
    Rng rng(99);
    const int n = 1000;
    Tensor<float> z = Tensor<float>::randn(rng, {n, 8}, 0.3f);
    std::vector<int> got = vq.quantize_indices(z);
    for (int t = 0; t < n; t++) {
        // oracle: brute force in f64 over every codebook entry
        double best = 1e300;
        int best_k = -1;
        for (int k = 0; k < vq.cfg.codebook; k++) {
            double d = 0;
            for (int j = 0; j < 8; j++) {
                double diff = static_cast<double>(z.at(t, j)) - vq.codebook.at(k, j);
                d += diff * diff;
            }
            if (d < best - 1e-18 || (d == best && k < best_k)) {
                if (d < best) {
                    best = d;
                    best_k = k;
                }
            }
        }
        CHECK(got[static_cast<size_t>(t)] == best_k);
    }
}

TEST_CASE("quantize ties break to the lowest index and exact rows hit exactly") {
    VqModel<float> vq = small_vq(2);
    // duplicate row 7 at row 12: a z_e equal to both must pick 7
    for (int j = 0; j < 8; j++) vq.codebook.at(12, j) = vq.codebook.at(7, j);
    Tensor<float> z = Tensor<float>::zeros({1, 8});
    for (int j = 0; j < 8; j++) z.at(0, j) = vq.codebook.at(7, j);
    CodeGrid<float> grid = vq.quantize(z);
    CHECK(grid.indices[0] == 7);
    for (int j = 0; j < 8; j++) CHECK(grid.embeddings.at(0, j) == vq.codebook.at(7, j));

    VqModel<float> empty = small_vq(3);
    empty.codebook = Tensor<float>::zeros({0, 8});
    CHECK_THROWS_AS(empty.quantize_indices(z), ValueError);
}

TEST_CASE("straight-through estimator copies gradients to the encoder side") {
    VqModel<float> vq = small_vq(4);
    Rng rng(5);
    Tensor<float> z_e = Tensor<float>::randn(rng, {6, 8}, 0.5f, true);
    std::vector<int> idx = vq.quantize_indices(z_e);
    Tape<float> tape;
    Tensor<float> q = ste_lookup(&tape, z_e, vq.codebook, idx);
    Tensor<float> loss = sum_all(&tape, q);
    backward(loss, tape);
    for (float g : z_e.grad()) CHECK(g == 1.0f);
}

TEST_CASE("decode output stays in [0,1] and round trips deterministically") {
    VqModel<float> vq = small_vq(5);
    synth::CaptionedImage img = synth::render_sample(1, 10);
    std::vector<float> rec_a = vq.reconstruct(img.pixels);
    std::vector<float> rec_b = vq.reconstruct(img.pixels);
    CHECK(rec_a == rec_b);
    for (float v : rec_a) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("train step: beta=0 removes the commitment term exactly") {
    synth::CaptionedImage img = synth::render_sample(0, 3);
    std::vector<const std::vector<float>*> batch = {&img.pixels};

    VqModel<float> a(Rng::substream(7, "init/vq"), VqConfig{});
    VqConfig c0;
    c0.beta = 0.0;
    VqModel<float> b(Rng::substream(7, "init/vq"), c0);
    OptimConfig oc;
    AdamW<float> opt_a(a.params(), oc), opt_b(b.params(), oc);
    VqLoss<float> la = vq_train_step(a, batch, opt_a);
    VqLoss<float> lb = vq_train_step(b, batch, opt_b);
    CHECK(lb.commitment == 0.0f);
    CHECK(la.total == doctest::Approx(lb.total + la.commitment).epsilon(1e-6));
    CHECK(la.reconstruction == lb.reconstruction);
    CHECK(la.codebook == lb.codebook);

    a.freeze();
    CHECK_THROWS_AS(vq_train_step(a, batch, opt_a), ValueError);
}

TEST_CASE("perfect autoencoder with z_e == z_q gives zero loss") {
    // encoder output bit-equal to a codebook row and a decoder that
    // reproduces the input exactly: all three terms vanish
    VqConfig cfg;
    VqModel<float> vq(Rng::substream(11, "init/vq"), cfg);
    Tensor<float> z_e = Tensor<float>::zeros({4, 8});
    for (int t = 0; t < 4; t++)
        for (int j = 0; j < 8; j++) z_e.at(t, j) = vq.codebook.at(3, j);
    std::vector<int> idx = vq.quantize_indices(z_e);
    for (int i : idx) CHECK(i == 3);
    Tape<float> tape;
    Tensor<float> z_q = gather_rows(&tape, vq.codebook, idx);
    CHECK(mse<float>(nullptr, z_q, z_e).item() == 0.0f);
    float commit = mse<float>(nullptr, z_e, z_q.detach()).item();
    CHECK(commit == 0.0f);
}

TEST_CASE("codebook reinit revives dead entries without NaNs") {
    VqModel<float> vq = small_vq(8);
    Rng rng(13);
    Tensor<float> live = Tensor<float>::randn(rng, {32, 8}, 0.4f);

    // uniformly used codebook: nothing reinitialized
    Rng r1(1);
    CHECK(codebook_reinit(vq, live, r1) == 0);

    // synthetic dead entries
    vq.usage_ema[5] = 0.0;
    vq.usage_ema[17] = 0.0;
    std::vector<float> before5(vq.codebook.data() + 5 * 8, vq.codebook.data() + 6 * 8);
    int n = codebook_reinit(vq, live, r1);
    CHECK(n == 2);
    std::vector<float> after5(vq.codebook.data() + 5 * 8, vq.codebook.data() + 6 * 8);
    CHECK(before5 != after5);
    for (float v : vq.codebook.v()) CHECK(std::isfinite(v));
    CHECK(vq.usage_ema[5] == doctest::Approx(1.0 / 256));

    vq.freeze();
    CHECK_THROWS_AS(codebook_reinit(vq, live, r1), ValueError);
}

TEST_CASE("frozen model parameter hash is stable and code grids are exact lookups") {
    VqModel<float> vq = small_vq(21);
    synth::CaptionedImage img = synth::render_sample(2, 9);
    vq.freeze();
    uint64_t h0 = vq.param_hash();
    CodeGrid<float> grid = vq.encode_image(img.pixels);
    for (int t = 0; t < 64; t++)
        for (int j = 0; j < 8; j++)
            CHECK(grid.embeddings.at(t, j) == vq.codebook.at(grid.indices[static_cast<size_t>(t)], j));
    CHECK(vq.param_hash() == h0);
}

TEST_CASE("VQ autoencoder and codebook losses pass the finite-difference oracle in f64") {
    // The quantizer itself is non-differentiable by design (its backward is
    // the straight-through copy, checked above); the FD oracle covers the
    // differentiable composite: encoder -> decoder, plus the codebook /
    // commitment terms at fixed indices.
    VqConfig cfg;
    cfg.image = 8;
    cfg.hidden = 12;
    cfg.codebook = 16;
    VqModel<double> vq(Rng::substream(31, "init/vq"), cfg);
    // keep decoder outputs away from the [0,1] clamp boundaries
    for (auto& v : vq.dec_out.b.v()) v = 0.5;
    Rng rng(17);
    std::vector<float> img(static_cast<size_t>(cfg.image * cfg.image * 3));
    for (auto& p : img) p = rng.next_float();

    // the probe tiles over all patch rows and carries a linear conditioning
    // term, so no gradient coordinate sits in the FD roundoff band
    Tensor<double> patches = vq.patchify(img);
    std::vector<int> fixed_idx = vq.quantize_indices(vq.encode_patches(nullptr, patches));
    auto f = [&](Tape<double>* tp, const Tensor<double>& x) {
        Tensor<double> z_e = vq.encode_patches(tp, add_tiled(tp, patches, x));
        Tensor<double> recon = vq.decode_patches(tp, z_e);
        Tensor<double> rec = mse(tp, recon, patches);
        Tensor<double> z_q = gather_rows<double>(nullptr, vq.codebook, fixed_idx);
        Tensor<double> commit = mse(tp, z_e, z_q);
        Tensor<double> loss = add(tp, rec, scale(tp, commit, 0.25));
        return add(tp, loss, scale(tp, mean_all(tp, x), 3.0));
    };
    Tensor<double> x0 = Tensor<double>::zeros({1, cfg.patch_dim()});
    CHECK(grad_check_fd<double>(f, x0, 3e-5) < 1e-6);

    // codebook-loss gradient w.r.t. the table
    Tensor<double> z_e_const = vq.encode_patches(nullptr, patches);
    auto f_table = [&](Tape<double>* tp, const Tensor<double>& table) {
        return mse(tp, gather_rows(tp, table, fixed_idx), z_e_const);
    };
    CHECK(grad_check_fd<double>(f_table, vq.codebook.detach(), 1e-5) < 1e-6);
}

}  // TEST_SUITE

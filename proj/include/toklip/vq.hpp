#pragma once

#include <string>
#include <vector>

#include "toklip/nn.hpp"
#include "toklip/synthdata.hpp"
#include "toklip/tensor.hpp"

namespace toklip {

struct VqConfig {
    int image = synth::kImageSize;
    int channels = synth::kChannels;
    int patch = 4;
    int hidden = 64;
    int dhat = 8;       // codebook embedding dim
    int codebook = 256; // K
    double beta = 0.25; // commitment weight
    double usage_decay = 0.99;

    int grid() const { return image / patch; }
    int tokens() const { return grid() * grid(); }
    int patch_dim() const { return patch * patch * channels; }

    uint64_t hash() const {
        uint64_t h = fnv1a("vq");
        int vals[] = {image, channels, patch, hidden, dhat, codebook};
        h = fnv1a(vals, sizeof(vals), h);
        h = fnv1a(&beta, sizeof(beta), h);
        return h;
    }
};

// index grid + the exact codebook rows they map to
template <class S>
struct CodeGrid {
    std::vector<int> indices;   // T
    Tensor<S> embeddings;       // T x dhat, bit-equal table lookups
};

template <class S>
struct ResidualMlp {
    Linear<S> fc1, fc2;

    ResidualMlp() = default;
    ResidualMlp(Rng rng, int d) : fc1(rng.derive("fc1"), d, d), fc2(rng.derive("fc2"), d, d) {}

    Tensor<S> forward(Tape<S>* tp, const Tensor<S>& x) const {
        return add(tp, x, fc2.forward(tp, gelu(tp, fc1.forward(tp, x))));
    }
    void params(ParamSet<S>& ps, const std::string& prefix) const {
        fc1.params(ps, prefix + ".fc1");
        fc2.params(ps, prefix + ".fc2");
    }
};

// Patch-linear autoencoder with a nearest-neighbor codebook in the middle.
// Encoder: patchify -> linear -> 2 residual MLP blocks -> linear to dhat.
// Decoder mirrors it; output clamps to [0,1].
template <class S>
struct VqModel {
    VqConfig cfg;
    Linear<S> enc_in;
    ResidualMlp<S> enc_r1, enc_r2;
    Linear<S> enc_out;
    Linear<S> dec_in;
    ResidualMlp<S> dec_r1, dec_r2;
    Linear<S> dec_out;
    Tensor<S> codebook;  // K x dhat
    std::vector<double> usage_ema;
    bool frozen = false;

    VqModel() = default;
    VqModel(Rng rng, VqConfig c)
        : cfg(c),
          enc_in(rng.derive("enc_in"), c.patch_dim(), c.hidden),
          enc_r1(rng.derive("enc_r1"), c.hidden),
          enc_r2(rng.derive("enc_r2"), c.hidden),
          enc_out(rng.derive("enc_out"), c.hidden, c.dhat),
          dec_in(rng.derive("dec_in"), c.dhat, c.hidden),
          dec_r1(rng.derive("dec_r1"), c.hidden),
          dec_r2(rng.derive("dec_r2"), c.hidden),
          dec_out(rng.derive("dec_out"), c.hidden, c.patch_dim()) {
        codebook = Tensor<S>::randn(rng.derive("codebook"), {c.codebook, c.dhat}, S(0.1), true);
        usage_ema.assign(static_cast<size_t>(c.codebook), 1.0 / c.codebook);
    }

    ParamSet<S> params() const {
        ParamSet<S> ps;
        enc_in.params(ps, "vq.enc_in");
        enc_r1.params(ps, "vq.enc_r1");
        enc_r2.params(ps, "vq.enc_r2");
        enc_out.params(ps, "vq.enc_out");
        dec_in.params(ps, "vq.dec_in");
        dec_r1.params(ps, "vq.dec_r1");
        dec_r2.params(ps, "vq.dec_r2");
        dec_out.params(ps, "vq.dec_out");
        ps.add("vq.codebook", codebook);
        return ps;
    }

    void freeze() {
        params().set_requires_grad(false);
        frozen = true;
    }
    uint64_t param_hash() const { return params().value_hash(); }

    // image pixels (HWC floats) -> T x patch_dim rows, one per patch
    Tensor<S> patchify(const std::vector<float>& pixels) const {
        require(static_cast<int>(pixels.size()) == cfg.image * cfg.image * cfg.channels,
                "patchify: wrong image dims");
        int g = cfg.grid(), p = cfg.patch, c = cfg.channels;
        Tensor<S> out = Tensor<S>::zeros({cfg.tokens(), cfg.patch_dim()});
        for (int gy = 0; gy < g; gy++)
            for (int gx = 0; gx < g; gx++) {
                S* row = out.data() + static_cast<size_t>(gy * g + gx) * cfg.patch_dim();
                int k = 0;
                for (int py = 0; py < p; py++)
                    for (int px = 0; px < p; px++)
                        for (int ch = 0; ch < c; ch++)
                            row[k++] = static_cast<S>(
                                pixels[(static_cast<size_t>(gy * p + py) * cfg.image + (gx * p + px)) * c + ch]);
            }
        return out;
    }

    std::vector<float> unpatchify(const Tensor<S>& patches) const {
        int g = cfg.grid(), p = cfg.patch, c = cfg.channels;
        std::vector<float> pixels(static_cast<size_t>(cfg.image) * cfg.image * c);
        for (int gy = 0; gy < g; gy++)
            for (int gx = 0; gx < g; gx++) {
                const S* row = patches.data() + static_cast<size_t>(gy * g + gx) * cfg.patch_dim();
                int k = 0;
                for (int py = 0; py < p; py++)
                    for (int px = 0; px < p; px++)
                        for (int ch = 0; ch < c; ch++)
                            pixels[(static_cast<size_t>(gy * p + py) * cfg.image + (gx * p + px)) * c + ch] =
                                static_cast<float>(row[k++]);
            }
        return pixels;
    }

    // patches (N*T_or_T x patch_dim) -> z_e rows
    Tensor<S> encode_patches(Tape<S>* tp, const Tensor<S>& patches) const {
        Tensor<S> h = enc_in.forward(tp, patches);
        h = enc_r1.forward(tp, h);
        h = enc_r2.forward(tp, h);
        return enc_out.forward(tp, h);
    }

    Tensor<S> patch_encode(Tape<S>* tp, const std::vector<float>& pixels) const {
        return encode_patches(tp, patchify(pixels));
    }

    // Nearest codebook row per z_e row, squared euclidean, ties to lowest k.
    std::vector<int> quantize_indices(const Tensor<S>& z_e) const {
        require(codebook.rows() > 0, "quantize: empty codebook");
        require(z_e.cols() == cfg.dhat, "quantize: dim mismatch");
        int k = codebook.rows(), d = cfg.dhat;
        std::vector<int> idx(static_cast<size_t>(z_e.rows()));
        for (int t = 0; t < z_e.rows(); t++) {
            const S* z = z_e.data() + static_cast<size_t>(t) * d;
            S best = S(0);
            int best_k = 0;
            for (int j = 0; j < k; j++) {
                const S* e = codebook.data() + static_cast<size_t>(j) * d;
                S dist = S(0);
                for (int u = 0; u < d; u++) {
                    S diff = z[u] - e[u];
                    dist += diff * diff;
                }
                if (j == 0 || dist < best) {
                    best = dist;
                    best_k = j;
                }
            }
            idx[static_cast<size_t>(t)] = best_k;
        }
        return idx;
    }

    CodeGrid<S> quantize(const Tensor<S>& z_e) const {
        CodeGrid<S> grid;
        grid.indices = quantize_indices(z_e);
        grid.embeddings = gather_rows<S>(nullptr, codebook, grid.indices);
        return grid;
    }

    CodeGrid<S> encode_image(const std::vector<float>& pixels) const {
        return quantize(patch_encode(nullptr, pixels));
    }

    Tensor<S> decode_patches(Tape<S>* tp, const Tensor<S>& codes) const {
        Tensor<S> h = dec_in.forward(tp, codes);
        h = dec_r1.forward(tp, h);
        h = dec_r2.forward(tp, h);
        return clamp(tp, dec_out.forward(tp, h), S(0), S(1));
    }

    std::vector<float> decode_reconstruct(const Tensor<S>& code_embeddings) const {
        require(code_embeddings.rows() == cfg.tokens() && code_embeddings.cols() == cfg.dhat,
                "decode: expects T x dhat codes");
        return unpatchify(decode_patches(nullptr, code_embeddings));
    }

    std::vector<float> reconstruct(const std::vector<float>& pixels) const {
        return decode_reconstruct(encode_image(pixels).embeddings);
    }
};

template <class S>
struct VqLoss {
    S total = 0, reconstruction = 0, codebook = 0, commitment = 0;
};

// One training step over a batch of images: reconstruction + codebook +
// commitment losses, straight-through gradients into the encoder, one AdamW
// step, then the usage EMA update.
template <class S>
VqLoss<S> vq_train_step(VqModel<S>& model, const std::vector<const std::vector<float>*>& batch,
                        AdamW<S>& opt, Tensor<S>* out_z_e = nullptr) {
    require(!model.frozen, "vq_train_step: model is frozen");
    int b = static_cast<int>(batch.size());
    require(b > 0, "vq_train_step: empty batch");
    int t = model.cfg.tokens(), pd = model.cfg.patch_dim();

    Tensor<S> patches = Tensor<S>::zeros({b * t, pd});
    for (int i = 0; i < b; i++) {
        Tensor<S> p = model.patchify(*batch[static_cast<size_t>(i)]);
        std::memcpy(patches.data() + static_cast<size_t>(i) * t * pd, p.data(), sizeof(S) * p.v().size());
    }

    Tape<S> tape;
    Tensor<S> z_e = model.encode_patches(&tape, patches);
    std::vector<int> idx = model.quantize_indices(z_e);

    Tensor<S> z_q_st = ste_lookup(&tape, z_e, model.codebook, idx);
    Tensor<S> recon = model.decode_patches(&tape, z_q_st);
    Tensor<S> loss_rec = mse(&tape, recon, patches);

    Tensor<S> z_q_train = gather_rows(&tape, model.codebook, idx);
    Tensor<S> loss_cb = mse(&tape, z_q_train, z_e.detach());

    Tensor<S> loss_commit = mse(&tape, z_e, z_q_st.detach());
    Tensor<S> loss =
        add(&tape, loss_rec, add(&tape, loss_cb, scale(&tape, loss_commit, static_cast<S>(model.cfg.beta))));

    backward(loss, tape);
    opt.step();
    if (out_z_e) *out_z_e = z_e.detach();

    // usage EMA over this batch's selections
    std::vector<double> hist(static_cast<size_t>(model.cfg.codebook), 0.0);
    for (int i : idx) hist[static_cast<size_t>(i)] += 1.0 / static_cast<double>(idx.size());
    for (size_t k = 0; k < model.usage_ema.size(); k++)
        model.usage_ema[k] = model.cfg.usage_decay * model.usage_ema[k] +
                             (1.0 - model.cfg.usage_decay) * hist[k];

    VqLoss<S> out;
    out.total = loss.item();
    out.reconstruction = loss_rec.item();
    out.codebook = loss_cb.item();
    out.commitment = static_cast<S>(model.cfg.beta) * loss_commit.item();
    return out;
}

// Entries whose usage EMA fell below 1/(4K) are reset to encoder outputs from
// the live batch. Returns how many were reinitialized.
template <class S>
int codebook_reinit(VqModel<S>& model, const Tensor<S>& live_z_e, Rng& rng) {
    require(!model.frozen, "codebook_reinit: model is frozen");
    double threshold = 1.0 / (4.0 * model.cfg.codebook);
    int d = model.cfg.dhat;
    int n = live_z_e.rows();
    int count = 0;
    for (int k = 0; k < model.cfg.codebook; k++) {
        if (model.usage_ema[static_cast<size_t>(k)] >= threshold) continue;
        int pick = static_cast<int>(rng.next_below(static_cast<uint64_t>(n)));
        const S* src = live_z_e.data() + static_cast<size_t>(pick) * d;
        S* dst = model.codebook.data() + static_cast<size_t>(k) * d;
        for (int j = 0; j < d; j++) {
            require(std::isfinite(static_cast<double>(src[j])), "codebook_reinit: non-finite source");
            dst[j] = src[j];
        }
        model.usage_ema[static_cast<size_t>(k)] = 1.0 / model.cfg.codebook;
        count++;
    }
    return count;
}

}  // namespace toklip

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "toklip/tensor.hpp"

namespace toklip {

// Named parameter registry. Registration order is fixed by construction, so
// optimizer state, checkpoints and hashes all agree on a single ordering.
template <class S>
struct ParamSet {
    std::vector<std::pair<std::string, TensorPtr<S>>> items;

    void add(const std::string& name, const Tensor<S>& t) { items.emplace_back(name, t.ptr()); }

    void set_requires_grad(bool b) {
        for (auto& [name, p] : items) {
            p->needs_grad = b;
            if (b)
                p->ensure_grad();
            else
                p->g.clear();
        }
    }
    void zero_grad() {
        for (auto& [name, p] : items)
            for (auto& g : p->g) g = S(0);
    }
    int64_t count() const {
        int64_t n = 0;
        for (auto& [name, p] : items) n += p->numel();
        return n;
    }
    uint64_t value_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (auto& [name, p] : items) {
            h = fnv1a(name, h);
            h = fnv1a(p->v.data(), p->v.size() * sizeof(S), h);
        }
        return h;
    }
    const TensorPtr<S>& find(const std::string& name) const {
        for (auto& [n, p] : items)
            if (n == name) return p;
        throw ValueError("param not found: " + name);
    }
};

// ---------------------------------------------------------------------------
// AdamW with cosine LR schedule and linear warmup.
// ---------------------------------------------------------------------------

struct OptimConfig {
    double base_lr = 1e-5;
    double lr_scale = 1.0;  // toy-scale multiplier on the base LR
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.1;
    int warmup_steps = 50;  // 500 scaled down for desk-scale runs
    int total_steps = 1000;

    double lr_at(int step) const {
        double lr = base_lr * lr_scale;
        if (step < warmup_steps) return lr * static_cast<double>(step + 1) / warmup_steps;
        if (total_steps <= warmup_steps) return lr;
        double t = static_cast<double>(step - warmup_steps) / (total_steps - warmup_steps);
        if (t > 1.0) t = 1.0;
        return lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
    }
};

template <class S>
class AdamW {
  public:
    AdamW(ParamSet<S> params, OptimConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.items.size());
        v_.resize(params_.items.size());
        for (size_t i = 0; i < params_.items.size(); i++) {
            m_[i].assign(params_.items[i].second->v.size(), S(0));
            v_[i].assign(params_.items[i].second->v.size(), S(0));
        }
    }

    // One decoupled-weight-decay Adam step using accumulated grads; grads are
    // zeroed afterwards. Decay applies to matrices only, not gains/biases.
    void step() {
        step_count_++;
        double lr = cfg_.lr_at(step_count_ - 1);
        double bc1 = 1.0 - std::pow(cfg_.beta1, step_count_);
        double bc2 = 1.0 - std::pow(cfg_.beta2, step_count_);
        for (size_t i = 0; i < params_.items.size(); i++) {
            auto& p = params_.items[i].second;
            bool decay = p->shape.size() >= 2;
            for (size_t j = 0; j < p->v.size(); j++) {
                double g = static_cast<double>(p->g[j]);
                double m = cfg_.beta1 * static_cast<double>(m_[i][j]) + (1.0 - cfg_.beta1) * g;
                double v = cfg_.beta2 * static_cast<double>(v_[i][j]) + (1.0 - cfg_.beta2) * g * g;
                m_[i][j] = static_cast<S>(m);
                v_[i][j] = static_cast<S>(v);
                double upd = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
                if (decay) upd += cfg_.weight_decay * static_cast<double>(p->v[j]);
                p->v[j] = static_cast<S>(static_cast<double>(p->v[j]) - lr * upd);
                p->g[j] = S(0);
            }
        }
    }

    int step_count() const { return step_count_; }
    double current_lr() const { return cfg_.lr_at(step_count_ == 0 ? 0 : step_count_ - 1); }

  private:
    ParamSet<S> params_;
    OptimConfig cfg_;
    std::vector<std::vector<S>> m_, v_;
    int step_count_ = 0;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class S>
struct Linear {
    Tensor<S> w;  // in x out
    Tensor<S> b;  // out

    Linear() = default;
    // default init: normal with std 1/sqrt(fan_in)
    Linear(Rng rng, int in, int out, S std_dev = S(-1)) {
        if (std_dev < S(0)) std_dev = S(1) / std::sqrt(static_cast<S>(in));
        w = Tensor<S>::randn(rng, {in, out}, std_dev, true);
        b = Tensor<S>::zeros({out}, true);
    }

    Tensor<S> forward(Tape<S>* tp, const Tensor<S>& x) const {
        return add_bias(tp, matmul(tp, x, w), b);
    }

    void params(ParamSet<S>& ps, const std::string& prefix) const {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }
};

template <class S>
struct LayerNormParams {
    Tensor<S> gain;
    Tensor<S> bias;
    S eps = static_cast<S>(1e-5);

    LayerNormParams() = default;
    explicit LayerNormParams(int d) {
        gain = Tensor<S>::full({d}, S(1), true);
        bias = Tensor<S>::zeros({d}, true);
    }

    Tensor<S> forward(Tape<S>* tp, const Tensor<S>& x) const {
        return layer_norm(tp, x, gain, bias, eps);
    }

    void params(ParamSet<S>& ps, const std::string& prefix) const {
        ps.add(prefix + ".gain", gain);
        ps.add(prefix + ".bias", bias);
    }
};

// Pre-norm transformer block: x += MHA(LN(x)); x += MLP(LN(x)), GeLU MLP with
// hidden ratio 4.
template <class S>
struct TransformerBlock {
    int dim = 0;
    int heads = 0;
    LayerNormParams<S> ln1, ln2;
    Linear<S> wq, wk, wv, wo;
    Linear<S> fc1, fc2;

    TransformerBlock() = default;
    TransformerBlock(Rng rng, int d, int n_heads)
        : dim(d),
          heads(n_heads),
          ln1(d),
          ln2(d),
          wq(rng.derive("wq"), d, d),
          wk(rng.derive("wk"), d, d),
          wv(rng.derive("wv"), d, d),
          wo(rng.derive("wo"), d, d),
          fc1(rng.derive("fc1"), d, 4 * d),
          fc2(rng.derive("fc2"), 4 * d, d) {}

    Tensor<S> forward(Tape<S>* tp, const Tensor<S>& x, int batch, int seqlen, bool causal) const {
        Tensor<S> h = ln1.forward(tp, x);
        Tensor<S> q = wq.forward(tp, h);
        Tensor<S> k = wk.forward(tp, h);
        Tensor<S> v = wv.forward(tp, h);
        Tensor<S> att = multihead_attention(tp, q, k, v, batch, seqlen, heads, causal);
        Tensor<S> x1 = add(tp, x, wo.forward(tp, att));
        Tensor<S> h2 = ln2.forward(tp, x1);
        Tensor<S> m = fc2.forward(tp, gelu(tp, fc1.forward(tp, h2)));
        return add(tp, x1, m);
    }

    void params(ParamSet<S>& ps, const std::string& prefix) const {
        ln1.params(ps, prefix + ".ln1");
        ln2.params(ps, prefix + ".ln2");
        wq.params(ps, prefix + ".wq");
        wk.params(ps, prefix + ".wk");
        wv.params(ps, prefix + ".wv");
        wo.params(ps, prefix + ".wo");
        fc1.params(ps, prefix + ".fc1");
        fc2.params(ps, prefix + ".fc2");
    }
};

// Token-sequence encoder shared by the teacher vision branch and the student:
// learned positional embeddings, a learned summary token appended at the LAST
// position (so it sees every token even under a causal mask), N pre-norm
// blocks and a final layer norm.
//
// Input tokens are (batch*seq_tokens) x dim; output is the packed
// (batch*(seq_tokens+1)) x dim post-norm feature matrix.
template <class S>
struct TokenEncoder {
    int dim = 0;
    int heads = 0;
    int seq_tokens = 0;  // token count excluding the summary token
    Tensor<S> pos;       // (seq_tokens+1) x dim
    Tensor<S> cls;       // dim
    std::vector<TransformerBlock<S>> blocks;
    LayerNormParams<S> ln_final;

    TokenEncoder() = default;
    TokenEncoder(Rng rng, int d, int n_heads, int n_blocks, int n_tokens)
        : dim(d), heads(n_heads), seq_tokens(n_tokens), ln_final(d) {
        pos = Tensor<S>::randn(rng.derive("pos"), {n_tokens + 1, d}, S(0.02), true);
        cls = Tensor<S>::randn(rng.derive("cls"), {d}, S(0.02), true);
        blocks.reserve(static_cast<size_t>(n_blocks));
        for (int i = 0; i < n_blocks; i++)
            blocks.emplace_back(rng.derive("block" + std::to_string(i)), d, n_heads);
    }

    Tensor<S> forward(Tape<S>* tp, const Tensor<S>& tokens, int batch, bool causal) const {
        require(tokens.rows() == batch * seq_tokens, "token encoder: sequence length mismatch");
        Tensor<S> x = pack_with_cls(tp, tokens, cls, batch);
        x = add_tiled(tp, x, pos);
        int t = seq_tokens + 1;
        for (const auto& blk : blocks) x = blk.forward(tp, x, batch, t, causal);
        return ln_final.forward(tp, x);
    }

    // Row indices of the summary-token outputs in the packed output.
    std::vector<int> cls_rows(int batch) const {
        std::vector<int> idx(static_cast<size_t>(batch));
        for (int b = 0; b < batch; b++) idx[static_cast<size_t>(b)] = b * (seq_tokens + 1) + seq_tokens;
        return idx;
    }
    // Row indices of the plain token outputs (summary rows dropped).
    std::vector<int> token_rows(int batch) const {
        std::vector<int> idx;
        idx.reserve(static_cast<size_t>(batch) * seq_tokens);
        for (int b = 0; b < batch; b++)
            for (int t = 0; t < seq_tokens; t++) idx.push_back(b * (seq_tokens + 1) + t);
        return idx;
    }

    void params(ParamSet<S>& ps, const std::string& prefix) const {
        ps.add(prefix + ".pos", pos);
        ps.add(prefix + ".cls", cls);
        for (size_t i = 0; i < blocks.size(); i++)
            blocks[i].params(ps, prefix + ".block" + std::to_string(i));
        ln_final.params(ps, prefix + ".ln_final");
    }
};

// Bit-exact parameter copy between models with identical architecture.
template <class S>
void copy_params(const ParamSet<S>& src, ParamSet<S>& dst) {
    require(src.items.size() == dst.items.size(), "copy_params: parameter count mismatch");
    for (size_t i = 0; i < src.items.size(); i++) {
        require(src.items[i].second->shape == dst.items[i].second->shape,
                "copy_params: shape mismatch at " + src.items[i].first);
        dst.items[i].second->v = src.items[i].second->v;
    }
}

}  // namespace toklip

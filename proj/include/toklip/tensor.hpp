#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "toklip/common.hpp"
#include "toklip/rng.hpp"

namespace toklip {

// ---------------------------------------------------------------------------
// Raw kernels. Everything routes through gemm/transpose so summation order is
// fixed (k ascending) no matter which algebraic form an op needs.
// ---------------------------------------------------------------------------
namespace kernels {

// C[m x n] += A[m x k] * B[k x n]
template <class S>
void gemm_acc(int m, int k, int n, const S* __restrict a, const S* __restrict b, S* __restrict c) {
    for (int i = 0; i < m; i++) {
        S* ci = c + static_cast<size_t>(i) * n;
        const S* ai = a + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; kk++) {
            S av = ai[kk];
            const S* bk = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; j++) ci[j] += av * bk[j];
        }
    }
}

template <class S>
void transpose(int m, int n, const S* __restrict a, S* __restrict at) {
    for (int i = 0; i < m; i++)
        for (int j = 0; j < n; j++) at[static_cast<size_t>(j) * m + i] = a[static_cast<size_t>(i) * n + j];
}

// out[n] = M[n x k] * v[k]  (row-major matvec, k ascending per row)
template <class S>
void matvec(int n, int k, const S* __restrict mat, const S* __restrict v, S* __restrict out) {
    for (int i = 0; i < n; i++) {
        const S* row = mat + static_cast<size_t>(i) * k;
        S s = S(0);
        for (int kk = 0; kk < k; kk++) s += row[kk] * v[kk];
        out[i] = s;
    }
}

template <class S>
S dot(int n, const S* __restrict a, const S* __restrict b) {
    S s = S(0);
    for (int i = 0; i < n; i++) s += a[i] * b[i];
    return s;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Tensor storage + handle
// ---------------------------------------------------------------------------

template <class S>
struct TensorImpl {
    std::vector<int> shape;
    std::vector<S> v;  // row-major values
    std::vector<S> g;  // gradient accumulator, allocated iff needs_grad
    bool needs_grad = false;

    int64_t numel() const {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }
    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), S(0));
    }
};

template <class S>
using TensorPtr = std::shared_ptr<TensorImpl<S>>;

template <class S>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(TensorPtr<S> p) : p_(std::move(p)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl<S>>();
        impl->shape = std::move(shape);
        impl->v.assign(static_cast<size_t>(impl->numel()), S(0));
        impl->needs_grad = requires_grad;
        if (requires_grad) impl->ensure_grad();
        return Tensor(impl);
    }

    static Tensor full(std::vector<int> shape, S value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.v()) x = value;
        return t;
    }

    static Tensor from(std::vector<int> shape, std::vector<S> values, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl<S>>();
        impl->shape = std::move(shape);
        require(static_cast<int64_t>(values.size()) == impl->numel(),
                "tensor: value count does not match shape");
        impl->v = std::move(values);
        impl->needs_grad = requires_grad;
        if (requires_grad) impl->ensure_grad();
        return Tensor(impl);
    }

    static Tensor scalar(S value) { return from({1}, {value}); }

    static Tensor randn(Rng& rng, std::vector<int> shape, S stddev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.v()) x = static_cast<S>(rng.next_normal()) * stddev;
        return t;
    }
    static Tensor randn(Rng&& rng, std::vector<int> shape, S stddev, bool requires_grad = false) {
        return randn(rng, std::move(shape), stddev, requires_grad);
    }

    static Tensor uniform(Rng& rng, std::vector<int> shape, S lo, S hi, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.v()) x = static_cast<S>(rng.next_uniform(lo, hi));
        return t;
    }
    static Tensor uniform(Rng&& rng, std::vector<int> shape, S lo, S hi, bool requires_grad = false) {
        return uniform(rng, std::move(shape), lo, hi, requires_grad);
    }

    bool defined() const { return static_cast<bool>(p_); }
    const std::vector<int>& shape() const { return p_->shape; }
    int dim(int i) const { return p_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(p_->shape.size()); }
    int64_t numel() const { return p_->numel(); }
    int rows() const { return p_->shape[0]; }
    int cols() const {
        require(rank() == 2, "cols(): tensor is not 2-d");
        return p_->shape[1];
    }

    std::vector<S>& v() { return p_->v; }
    const std::vector<S>& v() const { return p_->v; }
    S* data() { return p_->v.data(); }
    const S* data() const { return p_->v.data(); }

    bool needs_grad() const { return p_->needs_grad; }
    void set_requires_grad(bool b) {
        p_->needs_grad = b;
        if (b) p_->ensure_grad();
    }
    std::vector<S>& grad() { return p_->g; }
    const std::vector<S>& grad() const { return p_->g; }
    void zero_grad() {
        for (auto& x : p_->g) x = S(0);
    }

    S item() const {
        require(numel() == 1, "item(): tensor is not scalar");
        return p_->v[0];
    }
    S at(int i) const { return p_->v[static_cast<size_t>(i)]; }
    S at(int i, int j) const { return p_->v[static_cast<size_t>(i) * cols() + j]; }
    S& at(int i) { return p_->v[static_cast<size_t>(i)]; }
    S& at(int i, int j) { return p_->v[static_cast<size_t>(i) * cols() + j]; }

    // Value copy that does not participate in any graph (stop-gradient).
    Tensor detach() const {
        auto impl = std::make_shared<TensorImpl<S>>();
        impl->shape = p_->shape;
        impl->v = p_->v;
        return Tensor(impl);
    }

    TensorPtr<S> ptr() const { return p_; }

  private:
    TensorPtr<S> p_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <class S>
class Tape {
  public:
    struct Node {
        const char* op;
        std::vector<TensorPtr<S>> inputs;
        TensorPtr<S> output;
        std::function<void()> backward;  // saved context lives in the closure
    };

    void record(const char* op, std::vector<TensorPtr<S>> inputs, TensorPtr<S> output,
                std::function<void()> backward) {
        output->needs_grad = true;
        output->ensure_grad();
        nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
    }

    bool contains(const TensorPtr<S>& t) const {
        for (const auto& n : nodes_)
            if (n.output == t) return true;
        return false;
    }

    const std::vector<Node>& nodes() const { return nodes_; }
    bool consumed() const { return consumed_; }
    void mark_consumed() { consumed_ = true; }
    size_t size() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

template <class S>
void backward(const Tensor<S>& loss, Tape<S>& tape) {
    require(loss.numel() == 1, "backward: loss must be scalar");
    require(!tape.consumed(), "backward: tape already consumed");
    require(tape.contains(loss.ptr()), "backward: loss is not on this tape");
    tape.mark_consumed();
    loss.ptr()->g[0] += S(1);
    const auto& nodes = tape.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) it->backward();
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void check_finite(const char* op, const Tensor<S>& t) {
    if (!finite_checks()) return;
    for (S x : t.v())
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value in output");
}

template <class S>
bool any_grad(std::initializer_list<const Tensor<S>*> ts) {
    for (const auto* t : ts)
        if (t->needs_grad()) return true;
    return false;
}

template <class S>
void accum(TensorPtr<S>& t, const std::vector<S>& delta) {
    if (!t->needs_grad) return;
    t->ensure_grad();
    for (size_t i = 0; i < delta.size(); i++) t->g[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / shape ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& b) {
    require(a.shape() == b.shape(), "add: shape mismatch");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t i = 0, n = a.numel(); i < n; i++) po[i] = pa[i] + pb[i];
    detail::check_finite("add", out);
    if (tp && detail::any_grad<S>({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        tp->record("add", {ai, bi}, oi, [ai, bi, oi]() {
            if (ai->needs_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < oi->g.size(); i++) ai->g[i] += oi->g[i];
            }
            if (bi->needs_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < oi->g.size(); i++) bi->g[i] += oi->g[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> sub(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t i = 0, n = a.numel(); i < n; i++) po[i] = pa[i] - pb[i];
    detail::check_finite("sub", out);
    if (tp && detail::any_grad<S>({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        tp->record("sub", {ai, bi}, oi, [ai, bi, oi]() {
            if (ai->needs_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < oi->g.size(); i++) ai->g[i] += oi->g[i];
            }
            if (bi->needs_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < oi->g.size(); i++) bi->g[i] -= oi->g[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> mul(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t i = 0, n = a.numel(); i < n; i++) po[i] = pa[i] * pb[i];
    detail::check_finite("mul", out);
    if (tp && detail::any_grad<S>({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        tp->record("mul", {ai, bi}, oi, [ai, bi, oi]() {
            if (ai->needs_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < oi->g.size(); i++) ai->g[i] += oi->g[i] * bi->v[i];
            }
            if (bi->needs_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < oi->g.size(); i++) bi->g[i] += oi->g[i] * ai->v[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> scale(Tape<S>* tp, const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t i = 0, n = a.numel(); i < n; i++) po[i] = pa[i] * c;
    detail::check_finite("scale", out);
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("scale", {ai}, oi, [ai, oi, c]() {
            ai->ensure_grad();
            for (size_t i = 0; i < oi->g.size(); i++) ai->g[i] += oi->g[i] * c;
        });
    }
    return out;
}

template <class S>
Tensor<S> gelu(Tape<S>* tp, const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    const S inv_sqrt2 = static_cast<S>(0.70710678118654752440);
    for (int64_t i = 0, n = a.numel(); i < n; i++) {
        S x = pa[i];
        po[i] = S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
    }
    detail::check_finite("gelu", out);
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("gelu", {ai}, oi, [ai, oi, inv_sqrt2]() {
            ai->ensure_grad();
            const S inv_sqrt2pi = static_cast<S>(0.39894228040143267794);
            for (size_t i = 0; i < oi->g.size(); i++) {
                S x = ai->v[i];
                S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
                S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
                ai->g[i] += oi->g[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> sigmoid(Tape<S>* tp, const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (int64_t i = 0, n = a.numel(); i < n; i++) out.data()[i] = S(1) / (S(1) + std::exp(-a.data()[i]));
    detail::check_finite("sigmoid", out);
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("sigmoid", {ai}, oi, [ai, oi]() {
            ai->ensure_grad();
            for (size_t i = 0; i < oi->g.size(); i++) ai->g[i] += oi->g[i] * oi->v[i] * (S(1) - oi->v[i]);
        });
    }
    return out;
}

// Copy of `base` with rows at `positions` replaced by the rows of `rows`.
// Gradients split accordingly: replaced rows feed `rows`, the rest feed
// `base`.
template <class S>
Tensor<S> scatter_replace_rows(Tape<S>* tp, const Tensor<S>& base, const Tensor<S>& rows,
                               const std::vector<int>& positions) {
    require(base.rank() == 2 && rows.rank() == 2, "scatter_replace_rows: expects 2-d");
    require(base.cols() == rows.cols(), "scatter_replace_rows: dim mismatch");
    require(static_cast<int>(positions.size()) == rows.rows(), "scatter_replace_rows: position count mismatch");
    int d = base.cols();
    Tensor<S> out = Tensor<S>::zeros(base.shape());
    std::memcpy(out.data(), base.data(), sizeof(S) * base.v().size());
    std::vector<uint8_t> replaced(static_cast<size_t>(base.rows()), 0);
    for (size_t r = 0; r < positions.size(); r++) {
        require(positions[r] >= 0 && positions[r] < base.rows(), "scatter_replace_rows: position out of range");
        require(!replaced[static_cast<size_t>(positions[r])], "scatter_replace_rows: duplicate position");
        replaced[static_cast<size_t>(positions[r])] = 1;
        std::memcpy(out.data() + static_cast<size_t>(positions[r]) * d, rows.data() + r * d, sizeof(S) * d);
    }
    if (tp && detail::any_grad<S>({&base, &rows})) {
        auto bi = base.ptr(), ri = rows.ptr(), oi = out.ptr();
        tp->record("scatter_replace_rows", {bi, ri}, oi, [bi, ri, oi, positions, replaced, d]() {
            if (bi->needs_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < replaced.size(); i++) {
                    if (replaced[i]) continue;
                    for (int j = 0; j < d; j++) bi->g[i * d + j] += oi->g[i * d + j];
                }
            }
            if (ri->needs_grad) {
                ri->ensure_grad();
                for (size_t r = 0; r < positions.size(); r++)
                    for (int j = 0; j < d; j++)
                        ri->g[r * d + j] += oi->g[static_cast<size_t>(positions[r]) * d + j];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> exp_ewise(Tape<S>* tp, const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (int64_t i = 0, n = a.numel(); i < n; i++) out.data()[i] = std::exp(a.data()[i]);
    detail::check_finite("exp", out);
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("exp", {ai}, oi, [ai, oi]() {
            ai->ensure_grad();
            for (size_t i = 0; i < oi->g.size(); i++) ai->g[i] += oi->g[i] * oi->v[i];
        });
    }
    return out;
}

// Exact-gradient clamp: derivative 1 strictly inside (lo, hi), 0 elsewhere.
template <class S>
Tensor<S> clamp(Tape<S>* tp, const Tensor<S>& a, S lo, S hi) {
    require(lo < hi, "clamp: lo must be < hi");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (int64_t i = 0, n = a.numel(); i < n; i++) {
        S x = a.data()[i];
        out.data()[i] = x < lo ? lo : (x > hi ? hi : x);
    }
    detail::check_finite("clamp", out);
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("clamp", {ai}, oi, [ai, oi, lo, hi]() {
            ai->ensure_grad();
            for (size_t i = 0; i < oi->g.size(); i++)
                if (ai->v[i] > lo && ai->v[i] < hi) ai->g[i] += oi->g[i];
        });
    }
    return out;
}

template <class S>
Tensor<S> concat(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& b, int axis) {
    require(a.rank() == 2 && b.rank() == 2, "concat: expects 2-d tensors");
    require(axis == 0 || axis == 1, "concat: axis out of range");
    int m, n;
    Tensor<S> out;
    if (axis == 0) {
        require(a.cols() == b.cols(), "concat: column mismatch");
        m = a.rows() + b.rows();
        n = a.cols();
        out = Tensor<S>::zeros({m, n});
        std::memcpy(out.data(), a.data(), sizeof(S) * a.v().size());
        std::memcpy(out.data() + a.v().size(), b.data(), sizeof(S) * b.v().size());
    } else {
        require(a.rows() == b.rows(), "concat: row mismatch");
        m = a.rows();
        n = a.cols() + b.cols();
        out = Tensor<S>::zeros({m, n});
        for (int i = 0; i < m; i++) {
            std::memcpy(out.data() + static_cast<size_t>(i) * n, a.data() + static_cast<size_t>(i) * a.cols(),
                        sizeof(S) * a.cols());
            std::memcpy(out.data() + static_cast<size_t>(i) * n + a.cols(),
                        b.data() + static_cast<size_t>(i) * b.cols(), sizeof(S) * b.cols());
        }
    }
    if (tp && detail::any_grad<S>({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        int ac = a.cols(), bc = b.cols(), ar = a.rows();
        tp->record("concat", {ai, bi}, oi, [ai, bi, oi, axis, ac, bc, ar]() {
            if (axis == 0) {
                if (ai->needs_grad) {
                    ai->ensure_grad();
                    for (size_t i = 0; i < ai->g.size(); i++) ai->g[i] += oi->g[i];
                }
                if (bi->needs_grad) {
                    bi->ensure_grad();
                    for (size_t i = 0; i < bi->g.size(); i++) bi->g[i] += oi->g[ai->v.size() + i];
                }
            } else {
                int n = ac + bc;
                if (ai->needs_grad) {
                    ai->ensure_grad();
                    for (int i = 0; i < ar; i++)
                        for (int j = 0; j < ac; j++)
                            ai->g[static_cast<size_t>(i) * ac + j] += oi->g[static_cast<size_t>(i) * n + j];
                }
                if (bi->needs_grad) {
                    bi->ensure_grad();
                    for (int i = 0; i < ar; i++)
                        for (int j = 0; j < bc; j++)
                            bi->g[static_cast<size_t>(i) * bc + j] += oi->g[static_cast<size_t>(i) * n + ac + j];
                }
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> slice_rows(Tape<S>* tp, const Tensor<S>& a, int r0, int r1) {
    require(a.rank() == 2, "slice_rows: expects 2-d");
    require(0 <= r0 && r0 < r1 && r1 <= a.rows(), "slice_rows: range out of bounds");
    int n = a.cols();
    Tensor<S> out = Tensor<S>::zeros({r1 - r0, n});
    std::memcpy(out.data(), a.data() + static_cast<size_t>(r0) * n, sizeof(S) * out.v().size());
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("slice_rows", {ai}, oi, [ai, oi, r0, n]() {
            ai->ensure_grad();
            for (size_t i = 0; i < oi->g.size(); i++) ai->g[static_cast<size_t>(r0) * n + i] += oi->g[i];
        });
    }
    return out;
}

template <class S>
Tensor<S> slice_cols(Tape<S>* tp, const Tensor<S>& a, int c0, int c1) {
    require(a.rank() == 2, "slice_cols: expects 2-d");
    require(0 <= c0 && c0 < c1 && c1 <= a.cols(), "slice_cols: range out of bounds");
    int m = a.rows(), n = a.cols(), w = c1 - c0;
    Tensor<S> out = Tensor<S>::zeros({m, w});
    for (int i = 0; i < m; i++)
        std::memcpy(out.data() + static_cast<size_t>(i) * w, a.data() + static_cast<size_t>(i) * n + c0,
                    sizeof(S) * w);
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("slice_cols", {ai}, oi, [ai, oi, c0, m, n, w]() {
            ai->ensure_grad();
            for (int i = 0; i < m; i++)
                for (int j = 0; j < w; j++)
                    ai->g[static_cast<size_t>(i) * n + c0 + j] += oi->g[static_cast<size_t>(i) * w + j];
        });
    }
    return out;
}

// out[r] = table[indices[r]]; gradient scatters back into the table.
template <class S>
Tensor<S> gather_rows(Tape<S>* tp, const Tensor<S>& table, const std::vector<int>& indices) {
    require(table.rank() == 2, "gather_rows: table must be 2-d");
    int k = table.rows(), d = table.cols();
    for (int idx : indices)
        require(idx >= 0 && idx < k, "gather_rows: index out of bounds");
    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(indices.size()), d});
    for (size_t r = 0; r < indices.size(); r++)
        std::memcpy(out.data() + r * d, table.data() + static_cast<size_t>(indices[r]) * d, sizeof(S) * d);
    if (tp && table.needs_grad()) {
        auto ti = table.ptr();
        auto oi = out.ptr();
        tp->record("gather_rows", {ti}, oi, [ti, oi, indices, d]() {
            ti->ensure_grad();
            for (size_t r = 0; r < indices.size(); r++)
                for (int j = 0; j < d; j++)
                    ti->g[static_cast<size_t>(indices[r]) * d + j] += oi->g[r * d + j];
        });
    }
    return out;
}

// Straight-through codebook lookup: forward is an exact table-row copy,
// backward copies the output gradient to z_e unchanged. The table never
// receives gradient through this op.
template <class S>
Tensor<S> ste_lookup(Tape<S>* tp, const Tensor<S>& z_e, const Tensor<S>& table,
                     const std::vector<int>& indices) {
    require(z_e.rank() == 2 && table.rank() == 2, "ste_lookup: expects 2-d");
    require(static_cast<int>(indices.size()) == z_e.rows(), "ste_lookup: index count mismatch");
    require(z_e.cols() == table.cols(), "ste_lookup: dim mismatch");
    int d = table.cols();
    Tensor<S> out = Tensor<S>::zeros({z_e.rows(), d});
    for (size_t r = 0; r < indices.size(); r++) {
        require(indices[r] >= 0 && indices[r] < table.rows(), "ste_lookup: index out of bounds");
        std::memcpy(out.data() + r * d, table.data() + static_cast<size_t>(indices[r]) * d, sizeof(S) * d);
    }
    if (tp && z_e.needs_grad()) {
        auto zi = z_e.ptr();
        auto oi = out.ptr();
        tp->record("ste_lookup", {zi}, oi, [zi, oi]() {
            zi->ensure_grad();
            for (size_t i = 0; i < oi->g.size(); i++) zi->g[i] += oi->g[i];
        });
    }
    return out;
}

// Gather arbitrary rows of a 2-d activation (not a parameter table) by index.
template <class S>
Tensor<S> take_rows(Tape<S>* tp, const Tensor<S>& a, const std::vector<int>& rows) {
    return gather_rows(tp, a, rows);
}

// tokens is (B*T) x d; returns (B*(T+1)) x d with `cls` appended as the last
// row of every sample.
template <class S>
Tensor<S> pack_with_cls(Tape<S>* tp, const Tensor<S>& tokens, const Tensor<S>& cls, int batch) {
    require(tokens.rank() == 2, "pack_with_cls: tokens must be 2-d");
    require(tokens.rows() % batch == 0, "pack_with_cls: rows not divisible by batch");
    int t = tokens.rows() / batch, d = tokens.cols();
    require(cls.numel() == d, "pack_with_cls: cls dim mismatch");
    Tensor<S> out = Tensor<S>::zeros({batch * (t + 1), d});
    for (int b = 0; b < batch; b++) {
        std::memcpy(out.data() + static_cast<size_t>(b) * (t + 1) * d,
                    tokens.data() + static_cast<size_t>(b) * t * d, sizeof(S) * t * d);
        std::memcpy(out.data() + (static_cast<size_t>(b) * (t + 1) + t) * d, cls.data(), sizeof(S) * d);
    }
    if (tp && detail::any_grad<S>({&tokens, &cls})) {
        auto ti = tokens.ptr(), ci = cls.ptr(), oi = out.ptr();
        tp->record("pack_with_cls", {ti, ci}, oi, [ti, ci, oi, batch, t, d]() {
            if (ti->needs_grad) {
                ti->ensure_grad();
                for (int b = 0; b < batch; b++)
                    for (int i = 0; i < t * d; i++)
                        ti->g[static_cast<size_t>(b) * t * d + i] +=
                            oi->g[static_cast<size_t>(b) * (t + 1) * d + i];
            }
            if (ci->needs_grad) {
                ci->ensure_grad();
                for (int b = 0; b < batch; b++)
                    for (int j = 0; j < d; j++)
                        ci->g[j] += oi->g[(static_cast<size_t>(b) * (t + 1) + t) * d + j];
            }
        });
    }
    return out;
}

// Identity on values, new shape. Backward is the mirrored copy.
template <class S>
Tensor<S> reshape(Tape<S>* tp, const Tensor<S>& a, std::vector<int> new_shape) {
    Tensor<S> out = Tensor<S>::zeros(std::move(new_shape));
    require(out.numel() == a.numel(), "reshape: element count mismatch");
    std::memcpy(out.data(), a.data(), sizeof(S) * a.v().size());
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("reshape", {ai}, oi, [ai, oi]() {
            ai->ensure_grad();
            for (size_t i = 0; i < oi->g.size(); i++) ai->g[i] += oi->g[i];
        });
    }
    return out;
}

template <class S>
Tensor<S> transpose2d(Tape<S>* tp, const Tensor<S>& a) {
    require(a.rank() == 2, "transpose: expects 2-d");
    int m = a.rows(), n = a.cols();
    Tensor<S> out = Tensor<S>::zeros({n, m});
    kernels::transpose(m, n, a.data(), out.data());
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("transpose", {ai}, oi, [ai, oi, m, n]() {
            ai->ensure_grad();
            for (int i = 0; i < m; i++)
                for (int j = 0; j < n; j++)
                    ai->g[static_cast<size_t>(i) * n + j] += oi->g[static_cast<size_t>(j) * m + i];
        });
    }
    return out;
}

// Multiply every element by a trainable 1-element tensor.
template <class S>
Tensor<S> mul_scalar_t(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& s) {
    require(s.numel() == 1, "mul_scalar_t: scale must be a 1-element tensor");
    S c = s.item();
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (int64_t i = 0, n = a.numel(); i < n; i++) out.data()[i] = a.data()[i] * c;
    detail::check_finite("mul_scalar_t", out);
    if (tp && detail::any_grad<S>({&a, &s})) {
        auto ai = a.ptr(), si = s.ptr(), oi = out.ptr();
        tp->record("mul_scalar_t", {ai, si}, oi, [ai, si, oi]() {
            if (ai->needs_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < oi->g.size(); i++) ai->g[i] += oi->g[i] * si->v[0];
            }
            if (si->needs_grad) {
                si->ensure_grad();
                S acc = S(0);
                for (size_t i = 0; i < oi->g.size(); i++) acc += oi->g[i] * ai->v[i];
                si->g[0] += acc;
            }
        });
    }
    return out;
}

// out[b] = sum_t weights[b,t] * feats[b*T+t]  (one mixing vector per sample).
template <class S>
Tensor<S> mix_rows(Tape<S>* tp, const Tensor<S>& weights, const Tensor<S>& feats) {
    require(weights.rank() == 2 && feats.rank() == 2, "mix_rows: expects 2-d");
    int b = weights.rows(), t = weights.cols(), d = feats.cols();
    require(feats.rows() == b * t, "mix_rows: feature rows != batch*T");
    Tensor<S> out = Tensor<S>::zeros({b, d});
    for (int i = 0; i < b; i++) {
        S* po = out.data() + static_cast<size_t>(i) * d;
        for (int u = 0; u < t; u++) {
            S w = weights.at(i, u);
            const S* pf = feats.data() + (static_cast<size_t>(i) * t + u) * d;
            for (int j = 0; j < d; j++) po[j] += w * pf[j];
        }
    }
    detail::check_finite("mix_rows", out);
    if (tp && detail::any_grad<S>({&weights, &feats})) {
        auto wi = weights.ptr(), fi = feats.ptr(), oi = out.ptr();
        tp->record("mix_rows", {wi, fi}, oi, [wi, fi, oi, b, t, d]() {
            for (int i = 0; i < b; i++) {
                const S* go = oi->g.data() + static_cast<size_t>(i) * d;
                if (wi->needs_grad) {
                    wi->ensure_grad();
                    for (int u = 0; u < t; u++)
                        wi->g[static_cast<size_t>(i) * t + u] +=
                            kernels::dot(d, go, fi->v.data() + (static_cast<size_t>(i) * t + u) * d);
                }
                if (fi->needs_grad) {
                    fi->ensure_grad();
                    for (int u = 0; u < t; u++) {
                        S w = wi->v[static_cast<size_t>(i) * t + u];
                        S* gf = fi->g.data() + (static_cast<size_t>(i) * t + u) * d;
                        for (int j = 0; j < d; j++) gf[j] += w * go[j];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matmul family
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: expects 2-d tensors");
    require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
    int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<S> out = Tensor<S>::zeros({m, n});
    kernels::gemm_acc(m, k, n, a.data(), b.data(), out.data());
    detail::check_finite("matmul", out);
    if (tp && detail::any_grad<S>({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        tp->record("matmul", {ai, bi}, oi, [ai, bi, oi, m, k, n]() {
            if (ai->needs_grad) {
                ai->ensure_grad();
                std::vector<S> bt(static_cast<size_t>(k) * n);
                kernels::transpose(k, n, bi->v.data(), bt.data());
                kernels::gemm_acc(m, n, k, oi->g.data(), bt.data(), ai->g.data());
            }
            if (bi->needs_grad) {
                bi->ensure_grad();
                std::vector<S> at(static_cast<size_t>(m) * k);
                kernels::transpose(m, k, ai->v.data(), at.data());
                kernels::gemm_acc(k, m, n, at.data(), oi->g.data(), bi->g.data());
            }
        });
    }
    return out;
}

// a[m x k] * b[n x k]^T -> [m x n]
template <class S>
Tensor<S> matmul_nt(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul_nt: expects 2-d tensors");
    require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
    int m = a.rows(), k = a.cols(), n = b.rows();
    Tensor<S> out = Tensor<S>::zeros({m, n});
    std::vector<S> bt(static_cast<size_t>(k) * n);
    kernels::transpose(n, k, b.data(), bt.data());
    kernels::gemm_acc(m, k, n, a.data(), bt.data(), out.data());
    detail::check_finite("matmul_nt", out);
    if (tp && detail::any_grad<S>({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        tp->record("matmul_nt", {ai, bi}, oi, [ai, bi, oi, m, k, n]() {
            if (ai->needs_grad) {
                ai->ensure_grad();
                kernels::gemm_acc(m, n, k, oi->g.data(), bi->v.data(), ai->g.data());
            }
            if (bi->needs_grad) {
                bi->ensure_grad();
                std::vector<S> gt(static_cast<size_t>(m) * n);
                kernels::transpose(m, n, oi->g.data(), gt.data());
                kernels::gemm_acc(n, m, k, gt.data(), ai->v.data(), bi->g.data());
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> add_bias(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& bias) {
    require(a.rank() == 2, "add_bias: expects 2-d input");
    require(bias.numel() == a.cols(), "add_bias: bias dim mismatch");
    int m = a.rows(), n = a.cols();
    Tensor<S> out = Tensor<S>::zeros({m, n});
    for (int i = 0; i < m; i++)
        for (int j = 0; j < n; j++)
            out.data()[static_cast<size_t>(i) * n + j] = a.data()[static_cast<size_t>(i) * n + j] + bias.data()[j];
    detail::check_finite("add_bias", out);
    if (tp && detail::any_grad<S>({&a, &bias})) {
        auto ai = a.ptr(), bi = bias.ptr(), oi = out.ptr();
        tp->record("add_bias", {ai, bi}, oi, [ai, bi, oi, m, n]() {
            if (ai->needs_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < oi->g.size(); i++) ai->g[i] += oi->g[i];
            }
            if (bi->needs_grad) {
                bi->ensure_grad();
                for (int i = 0; i < m; i++)
                    for (int j = 0; j < n; j++) bi->g[j] += oi->g[static_cast<size_t>(i) * n + j];
            }
        });
    }
    return out;
}

// x is (B*T) x d; p is T x d, added tile-wise to every sample.
template <class S>
Tensor<S> add_tiled(Tape<S>* tp, const Tensor<S>& x, const Tensor<S>& p) {
    require(x.rank() == 2 && p.rank() == 2, "add_tiled: expects 2-d");
    require(x.cols() == p.cols(), "add_tiled: dim mismatch");
    require(x.rows() % p.rows() == 0, "add_tiled: rows not divisible by tile");
    int t = p.rows(), d = p.cols(), m = x.rows();
    Tensor<S> out = Tensor<S>::zeros({m, d});
    for (int i = 0; i < m; i++) {
        const S* px = x.data() + static_cast<size_t>(i) * d;
        const S* pp = p.data() + static_cast<size_t>(i % t) * d;
        S* po = out.data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; j++) po[j] = px[j] + pp[j];
    }
    detail::check_finite("add_tiled", out);
    if (tp && detail::any_grad<S>({&x, &p})) {
        auto xi = x.ptr(), pi = p.ptr(), oi = out.ptr();
        tp->record("add_tiled", {xi, pi}, oi, [xi, pi, oi, t, d, m]() {
            if (xi->needs_grad) {
                xi->ensure_grad();
                for (size_t i = 0; i < oi->g.size(); i++) xi->g[i] += oi->g[i];
            }
            if (pi->needs_grad) {
                pi->ensure_grad();
                for (int i = 0; i < m; i++)
                    for (int j = 0; j < d; j++)
                        pi->g[static_cast<size_t>(i % t) * d + j] += oi->g[static_cast<size_t>(i) * d + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(Tape<S>* tp, const Tensor<S>& a) {
    S s = S(0);
    for (S x : a.v()) s += x;
    Tensor<S> out = Tensor<S>::from({1}, {s});
    detail::check_finite("sum", out);
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("sum", {ai}, oi, [ai, oi]() {
            ai->ensure_grad();
            for (auto& g : ai->g) g += oi->g[0];
        });
    }
    return out;
}

template <class S>
Tensor<S> mean_all(Tape<S>* tp, const Tensor<S>& a) {
    S s = S(0);
    for (S x : a.v()) s += x;
    S inv = S(1) / static_cast<S>(a.numel());
    Tensor<S> out = Tensor<S>::from({1}, {s * inv});
    detail::check_finite("mean", out);
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("mean", {ai}, oi, [ai, oi, inv]() {
            ai->ensure_grad();
            for (auto& g : ai->g) g += oi->g[0] * inv;
        });
    }
    return out;
}

template <class S>
Tensor<S> mse(Tape<S>* tp, const Tensor<S>& a, const Tensor<S>& b) {
    require(a.shape() == b.shape(), "mse: shape mismatch");
    S s = S(0);
    for (int64_t i = 0, n = a.numel(); i < n; i++) {
        S d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    S inv = S(1) / static_cast<S>(a.numel());
    Tensor<S> out = Tensor<S>::from({1}, {s * inv});
    detail::check_finite("mse", out);
    if (tp && detail::any_grad<S>({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        tp->record("mse", {ai, bi}, oi, [ai, bi, oi, inv]() {
            S go = oi->g[0];
            if (ai->needs_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < ai->v.size(); i++)
                    ai->g[i] += go * S(2) * (ai->v[i] - bi->v[i]) * inv;
            }
            if (bi->needs_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < bi->v.size(); i++)
                    bi->g[i] -= go * S(2) * (ai->v[i] - bi->v[i]) * inv;
            }
        });
    }
    return out;
}

// Unit-normalizes each row. Zero rows stay zero; the count of such rows is
// reported through `zero_rows` when given.
template <class S>
Tensor<S> l2_normalize_rows(Tape<S>* tp, const Tensor<S>& a, int* zero_rows = nullptr) {
    require(a.rank() == 2, "l2_normalize: expects 2-d");
    int m = a.rows(), n = a.cols();
    Tensor<S> out = Tensor<S>::zeros({m, n});
    std::vector<S> inv_norm(m, S(0));
    int zeros = 0;
    for (int i = 0; i < m; i++) {
        const S* pa = a.data() + static_cast<size_t>(i) * n;
        S s = kernels::dot(n, pa, pa);
        if (s == S(0)) {
            zeros++;
            continue;
        }
        S r = S(1) / std::sqrt(s);
        inv_norm[static_cast<size_t>(i)] = r;
        S* po = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; j++) po[j] = pa[j] * r;
    }
    if (zero_rows) *zero_rows = zeros;
    detail::check_finite("l2_normalize", out);
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("l2_normalize", {ai}, oi, [ai, oi, inv_norm, m, n]() {
            ai->ensure_grad();
            for (int i = 0; i < m; i++) {
                S r = inv_norm[static_cast<size_t>(i)];
                if (r == S(0)) continue;
                const S* y = oi->v.data() + static_cast<size_t>(i) * n;
                const S* gy = oi->g.data() + static_cast<size_t>(i) * n;
                S* gx = ai->g.data() + static_cast<size_t>(i) * n;
                S proj = kernels::dot(n, y, gy);
                for (int j = 0; j < n; j++) gx[j] += (gy[j] - y[j] * proj) * r;
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> softmax_rows(Tape<S>* tp, const Tensor<S>& a, S temperature) {
    require(a.rank() == 2, "softmax: expects 2-d");
    require(temperature > S(0), "softmax: temperature must be > 0");
    int m = a.rows(), n = a.cols();
    Tensor<S> out = Tensor<S>::zeros({m, n});
    for (int i = 0; i < m; i++) {
        const S* pa = a.data() + static_cast<size_t>(i) * n;
        S* po = out.data() + static_cast<size_t>(i) * n;
        S mx = pa[0];
        for (int j = 1; j < n; j++) mx = std::max(mx, pa[j]);
        S sum = S(0);
        for (int j = 0; j < n; j++) {
            po[j] = std::exp((pa[j] - mx) / temperature);
            sum += po[j];
        }
        S inv = S(1) / sum;
        for (int j = 0; j < n; j++) po[j] *= inv;
    }
    detail::check_finite("softmax", out);
    if (tp && a.needs_grad()) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tp->record("softmax", {ai}, oi, [ai, oi, m, n, temperature]() {
            ai->ensure_grad();
            for (int i = 0; i < m; i++) {
                const S* y = oi->v.data() + static_cast<size_t>(i) * n;
                const S* gy = oi->g.data() + static_cast<size_t>(i) * n;
                S* gx = ai->g.data() + static_cast<size_t>(i) * n;
                S dsum = kernels::dot(n, y, gy);
                for (int j = 0; j < n; j++) gx[j] += y[j] * (gy[j] - dsum) / temperature;
            }
        });
    }
    return out;
}

// Mean cross entropy over rows, computed from logits via a stable
// log-sum-exp. `weights`, when given, reweights rows and normalizes by the
// weight sum (used for masked next-token losses).
template <class S>
Tensor<S> cross_entropy(Tape<S>* tp, const Tensor<S>& logits, const std::vector<int>& targets,
                        const std::vector<S>* weights = nullptr) {
    require(logits.rank() == 2, "cross_entropy: logits must be 2-d");
    int m = logits.rows(), n = logits.cols();
    require(static_cast<int>(targets.size()) == m, "cross_entropy: target count mismatch");
    if (weights) require(static_cast<int>(weights->size()) == m, "cross_entropy: weight count mismatch");
    for (int t : targets)
        require(t >= 0 && t < n, "cross_entropy: target out of range");
    S wsum = S(0);
    if (weights) {
        for (S w : *weights) wsum += w;
        require(wsum > S(0), "cross_entropy: weight sum must be positive");
    } else {
        wsum = static_cast<S>(m);
    }
    std::vector<S> row_w(static_cast<size_t>(m));
    for (int i = 0; i < m; i++) row_w[static_cast<size_t>(i)] = (weights ? (*weights)[static_cast<size_t>(i)] : S(1)) / wsum;

    S loss = S(0);
    std::vector<S> lse(static_cast<size_t>(m));
    for (int i = 0; i < m; i++) {
        const S* pl = logits.data() + static_cast<size_t>(i) * n;
        S mx = pl[0];
        for (int j = 1; j < n; j++) mx = std::max(mx, pl[j]);
        S sum = S(0);
        for (int j = 0; j < n; j++) sum += std::exp(pl[j] - mx);
        lse[static_cast<size_t>(i)] = mx + std::log(sum);
        loss += row_w[static_cast<size_t>(i)] * (lse[static_cast<size_t>(i)] - pl[targets[static_cast<size_t>(i)]]);
    }
    Tensor<S> out = Tensor<S>::from({1}, {loss});
    detail::check_finite("cross_entropy", out);
    if (tp && logits.needs_grad()) {
        auto li = logits.ptr();
        auto oi = out.ptr();
        tp->record("cross_entropy", {li}, oi, [li, oi, targets, row_w, lse, m, n]() {
            li->ensure_grad();
            S go = oi->g[0];
            for (int i = 0; i < m; i++) {
                S w = row_w[static_cast<size_t>(i)];
                if (w == S(0)) continue;
                const S* pl = li->v.data() + static_cast<size_t>(i) * n;
                S* gl = li->g.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; j++) {
                    S p = std::exp(pl[j] - lse[static_cast<size_t>(i)]);
                    gl[j] += go * w * (p - (j == targets[static_cast<size_t>(i)] ? S(1) : S(0)));
                }
            }
        });
    }
    return out;
}

// Per-row zero-mean/unit-variance normalization followed by a learned affine.
template <class S>
Tensor<S> layer_norm(Tape<S>* tp, const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
    require(x.rank() == 2, "layer_norm: expects 2-d");
    require(eps > S(0), "layer_norm: eps must be > 0");
    int m = x.rows(), n = x.cols();
    require(gain.numel() == n && bias.numel() == n, "layer_norm: affine dim mismatch");
    Tensor<S> out = Tensor<S>::zeros({m, n});
    std::vector<S> mean(static_cast<size_t>(m)), rstd(static_cast<size_t>(m));
    std::vector<S> xhat(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; i++) {
        const S* px = x.data() + static_cast<size_t>(i) * n;
        S mu = S(0);
        for (int j = 0; j < n; j++) mu += px[j];
        mu /= static_cast<S>(n);
        S var = S(0);
        for (int j = 0; j < n; j++) {
            S d = px[j] - mu;
            var += d * d;
        }
        var /= static_cast<S>(n);
        S r = S(1) / std::sqrt(var + eps);
        mean[static_cast<size_t>(i)] = mu;
        rstd[static_cast<size_t>(i)] = r;
        S* po = out.data() + static_cast<size_t>(i) * n;
        S* ph = xhat.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; j++) {
            ph[j] = (px[j] - mu) * r;
            po[j] = ph[j] * gain.data()[j] + bias.data()[j];
        }
    }
    detail::check_finite("layer_norm", out);
    if (tp && detail::any_grad<S>({&x, &gain, &bias})) {
        auto xi = x.ptr(), gi = gain.ptr(), bi = bias.ptr(), oi = out.ptr();
        tp->record("layer_norm", {xi, gi, bi}, oi,
                   [xi, gi, bi, oi, mean, rstd, xhat, m, n]() {
                       for (int i = 0; i < m; i++) {
                           const S* gy = oi->g.data() + static_cast<size_t>(i) * n;
                           const S* ph = xhat.data() + static_cast<size_t>(i) * n;
                           if (gi->needs_grad) {
                               gi->ensure_grad();
                               for (int j = 0; j < n; j++) gi->g[j] += gy[j] * ph[j];
                           }
                           if (bi->needs_grad) {
                               bi->ensure_grad();
                               for (int j = 0; j < n; j++) bi->g[j] += gy[j];
                           }
                           if (xi->needs_grad) {
                               xi->ensure_grad();
                               S* gx = xi->g.data() + static_cast<size_t>(i) * n;
                               S sum1 = S(0), sum2 = S(0);
                               for (int j = 0; j < n; j++) {
                                   S gj = gy[j] * gi->v[j];
                                   sum1 += gj;
                                   sum2 += gj * ph[j];
                               }
                               sum1 /= static_cast<S>(n);
                               sum2 /= static_cast<S>(n);
                               for (int j = 0; j < n; j++) {
                                   S gj = gy[j] * gi->v[j];
                                   gx[j] += (gj - sum1 - ph[j] * sum2) * rstd[static_cast<size_t>(i)];
                               }
                           }
                       }
                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fused multi-head scaled dot-product attention over packed sequences.
// q/k/v are (batch*seqlen) x d with heads side by side along the feature
// axis. Row i of every per-head score matrix only ever reads keys 0..i when
// causal, so prefix outputs are bit-exact invariant to suffix changes.
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> multihead_attention(Tape<S>* tp, const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                              int batch, int seqlen, int heads, bool causal) {
    require(q.rank() == 2 && q.shape() == k.shape() && k.shape() == v.shape(),
            "attention: q/k/v shape mismatch");
    int d = q.cols();
    require(d % heads == 0, "attention: model dim not divisible by heads");
    require(q.rows() == batch * seqlen, "attention: rows != batch*seqlen");
    int hd = d / heads;
    S scale = S(1) / std::sqrt(static_cast<S>(hd));

    Tensor<S> out = Tensor<S>::zeros({batch * seqlen, d});
    bool rec = tp && detail::any_grad<S>({&q, &k, &v});
    // Saved softmax probabilities per (batch, head), for the backward pass.
    auto probs = std::make_shared<std::vector<S>>();
    if (rec) probs->assign(static_cast<size_t>(batch) * heads * seqlen * seqlen, S(0));

    std::vector<S> qh(static_cast<size_t>(seqlen) * hd), kh(qh.size()), vh(qh.size());
    std::vector<S> kt(static_cast<size_t>(hd) * seqlen);
    std::vector<S> sc(static_cast<size_t>(seqlen) * seqlen);
    for (int b = 0; b < batch; b++) {
        const S* qb = q.data() + static_cast<size_t>(b) * seqlen * d;
        const S* kb = k.data() + static_cast<size_t>(b) * seqlen * d;
        const S* vb = v.data() + static_cast<size_t>(b) * seqlen * d;
        S* ob = out.data() + static_cast<size_t>(b) * seqlen * d;
        for (int h = 0; h < heads; h++) {
            for (int t = 0; t < seqlen; t++) {
                std::memcpy(qh.data() + static_cast<size_t>(t) * hd, qb + static_cast<size_t>(t) * d + h * hd,
                            sizeof(S) * hd);
                std::memcpy(kh.data() + static_cast<size_t>(t) * hd, kb + static_cast<size_t>(t) * d + h * hd,
                            sizeof(S) * hd);
                std::memcpy(vh.data() + static_cast<size_t>(t) * hd, vb + static_cast<size_t>(t) * d + h * hd,
                            sizeof(S) * hd);
            }
            kernels::transpose(seqlen, hd, kh.data(), kt.data());
            std::fill(sc.begin(), sc.end(), S(0));
            kernels::gemm_acc(seqlen, hd, seqlen, qh.data(), kt.data(), sc.data());
            // Row-wise masked softmax; masked-out entries are exactly zero.
            for (int i = 0; i < seqlen; i++) {
                S* row = sc.data() + static_cast<size_t>(i) * seqlen;
                int lim = causal ? i + 1 : seqlen;
                S mx = row[0] * scale;
                for (int j = 1; j < lim; j++) mx = std::max(mx, row[j] * scale);
                S sum = S(0);
                for (int j = 0; j < lim; j++) {
                    row[j] = std::exp(row[j] * scale - mx);
                    sum += row[j];
                }
                S inv = S(1) / sum;
                for (int j = 0; j < lim; j++) row[j] *= inv;
                for (int j = lim; j < seqlen; j++) row[j] = S(0);
            }
            if (rec)
                std::memcpy(probs->data() + (static_cast<size_t>(b) * heads + h) * seqlen * seqlen, sc.data(),
                            sizeof(S) * sc.size());
            // context = P * V_h, written back into the packed layout
            for (int i = 0; i < seqlen; i++) {
                const S* pr = sc.data() + static_cast<size_t>(i) * seqlen;
                S* orow = ob + static_cast<size_t>(i) * d + h * hd;
                for (int j = 0; j < hd; j++) orow[j] = S(0);
                int lim = causal ? i + 1 : seqlen;
                for (int t = 0; t < lim; t++) {
                    S p = pr[t];
                    const S* vrow = vh.data() + static_cast<size_t>(t) * hd;
                    for (int j = 0; j < hd; j++) orow[j] += p * vrow[j];
                }
            }
        }
    }
    detail::check_finite("attention", out);

    if (rec) {
        auto qi = q.ptr(), ki = k.ptr(), vi = v.ptr(), oi = out.ptr();
        tp->record("attention", {qi, ki, vi}, oi,
                   [qi, ki, vi, oi, probs, batch, seqlen, heads, hd, d, scale, causal]() {
                       qi->ensure_grad();
                       ki->ensure_grad();
                       vi->ensure_grad();
                       std::vector<S> dp(static_cast<size_t>(seqlen) * seqlen);
                       std::vector<S> ds(static_cast<size_t>(seqlen) * seqlen);
                       std::vector<S> vh(static_cast<size_t>(seqlen) * hd), qh(vh.size()), kh(vh.size());
                       std::vector<S> goh(vh.size()), tmp(vh.size());
                       for (int b = 0; b < batch; b++) {
                           for (int h = 0; h < heads; h++) {
                               const S* pr = probs->data() + (static_cast<size_t>(b) * heads + h) * seqlen * seqlen;
                               for (int t = 0; t < seqlen; t++) {
                                   size_t src = (static_cast<size_t>(b) * seqlen + t) * d + h * hd;
                                   std::memcpy(qh.data() + static_cast<size_t>(t) * hd, &qi->v[src], sizeof(S) * hd);
                                   std::memcpy(kh.data() + static_cast<size_t>(t) * hd, &ki->v[src], sizeof(S) * hd);
                                   std::memcpy(vh.data() + static_cast<size_t>(t) * hd, &vi->v[src], sizeof(S) * hd);
                                   std::memcpy(goh.data() + static_cast<size_t>(t) * hd, &oi->g[src], sizeof(S) * hd);
                               }
                               // dV_h += P^T * dO_h
                               std::vector<S> pt(static_cast<size_t>(seqlen) * seqlen);
                               kernels::transpose(seqlen, seqlen, pr, pt.data());
                               std::fill(tmp.begin(), tmp.end(), S(0));
                               kernels::gemm_acc(seqlen, seqlen, hd, pt.data(), goh.data(), tmp.data());
                               for (int t = 0; t < seqlen; t++) {
                                   size_t dst = (static_cast<size_t>(b) * seqlen + t) * d + h * hd;
                                   for (int j = 0; j < hd; j++) vi->g[dst + j] += tmp[static_cast<size_t>(t) * hd + j];
                               }
                               // dP = dO_h * V_h^T
                               std::vector<S> vt(static_cast<size_t>(hd) * seqlen);
                               kernels::transpose(seqlen, hd, vh.data(), vt.data());
                               std::fill(dp.begin(), dp.end(), S(0));
                               kernels::gemm_acc(seqlen, hd, seqlen, goh.data(), vt.data(), dp.data());
                               // dS = P .* (dP - rowsum(dP .* P)), masked
                               for (int i = 0; i < seqlen; i++) {
                                   int lim = causal ? i + 1 : seqlen;
                                   const S* pri = pr + static_cast<size_t>(i) * seqlen;
                                   const S* dpi = dp.data() + static_cast<size_t>(i) * seqlen;
                                   S* dsi = ds.data() + static_cast<size_t>(i) * seqlen;
                                   S dsum = S(0);
                                   for (int j = 0; j < lim; j++) dsum += dpi[j] * pri[j];
                                   for (int j = 0; j < lim; j++) dsi[j] = pri[j] * (dpi[j] - dsum) * scale;
                                   for (int j = lim; j < seqlen; j++) dsi[j] = S(0);
                               }
                               // dQ_h += dS * K_h ; dK_h += dS^T * Q_h
                               std::fill(tmp.begin(), tmp.end(), S(0));
                               kernels::gemm_acc(seqlen, seqlen, hd, ds.data(), kh.data(), tmp.data());
                               for (int t = 0; t < seqlen; t++) {
                                   size_t dst = (static_cast<size_t>(b) * seqlen + t) * d + h * hd;
                                   for (int j = 0; j < hd; j++) qi->g[dst + j] += tmp[static_cast<size_t>(t) * hd + j];
                               }
                               std::vector<S> dst_m(static_cast<size_t>(seqlen) * seqlen);
                               kernels::transpose(seqlen, seqlen, ds.data(), dst_m.data());
                               std::fill(tmp.begin(), tmp.end(), S(0));
                               kernels::gemm_acc(seqlen, seqlen, hd, dst_m.data(), qh.data(), tmp.data());
                               for (int t = 0; t < seqlen; t++) {
                                   size_t dst = (static_cast<size_t>(b) * seqlen + t) * d + h * hd;
                                   for (int j = 0; j < hd; j++) ki->g[dst + j] += tmp[static_cast<size_t>(t) * hd + j];
                               }
                           }
                       }
                   });
    }
    return out;
}

}  // namespace toklip

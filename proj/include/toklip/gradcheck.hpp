#pragma once

#include <functional>

#include "toklip/tensor.hpp"

namespace toklip {

// Central-difference gradient oracle. `f` must be a pure, deterministic
// function of `x`; it is called once on a tape for the analytic gradient and
// twice per element for the finite differences (tape = nullptr, values only).
// Returns the max relative error with denominator max(|analytic|, |numeric|,
// 1e-8). Meant to run in f64.
template <class S>
S grad_check_fd(const std::function<Tensor<S>(Tape<S>*, const Tensor<S>&)>& f, Tensor<S> x, S eps) {
    x.set_requires_grad(true);
    x.zero_grad();
    Tape<S> tape;
    Tensor<S> loss = f(&tape, x);
    require(loss.numel() == 1, "grad_check_fd: f must return a scalar");
    backward(loss, tape);
    std::vector<S> analytic = x.grad();

    S max_rel = S(0);
    for (size_t i = 0; i < x.v().size(); i++) {
        S orig = x.v()[i];
        x.v()[i] = orig + eps;
        S fp = f(nullptr, x).item();
        x.v()[i] = orig - eps;
        S fm = f(nullptr, x).item();
        x.v()[i] = orig;
        S numeric = (fp - fm) / (S(2) * eps);
        S a = analytic[i];
        S denom = std::max(std::max(std::abs(a), std::abs(numeric)), static_cast<S>(1e-8));
        S rel = std::abs(a - numeric) / denom;
        if (rel > max_rel) max_rel = rel;
    }
    return max_rel;
}

}  // namespace toklip

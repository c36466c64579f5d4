// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 TailForge Contributors
#pragma once

// Central-difference verification harness for anything differentiable.

#include "tailforge/autodiff.hpp"

namespace tailforge::ad {

/// Checks the analytic gradient of a scalar-valued function against central
/// differences. `f` is called as f(tape, x_var) and must rebuild the graph
/// from scratch on every call. Returns the max over coordinates of
///   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <typename F>
double grad_check(F&& f, const Shape& shape, const std::vector<double>& x0,
                  double epsilon = 1e-5) {
    if (!(epsilon > 0.0)) throw Error("grad_check: epsilon must be positive");

    auto eval = [&](const std::vector<double>& x) {
        Tape tape;
        Var vx = tape.input(shape, x, false);
        Var y = f(tape, vx);
        double v = y.scalar();
        if (!std::isfinite(v)) throw NumericError("grad_check: f returned non-finite value");
        return v;
    };

    std::vector<double> analytic;
    {
        Tape tape;
        Var vx = tape.input(shape, x0, true);
        Var y = f(tape, vx);
        if (!std::isfinite(y.scalar()))
            throw NumericError("grad_check: f returned non-finite value");
        tape.backward(y);
        analytic = vx.grad();
    }

    double max_rel = 0.0;
    std::vector<double> x = x0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double keep = x[i];
        x[i] = keep + epsilon;
        double fp = eval(x);
        x[i] = keep - epsilon;
        double fm = eval(x);
        x[i] = keep;
        double numeric = (fp - fm) / (2.0 * epsilon);
        double rel = std::abs(analytic[i] - numeric) /
                     std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

} // namespace tailforge::ad

// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 TailForge Contributors
#pragma once

// Class-rebalancing machinery: weight schemes, the class-balanced sampler,
// the deferred re-weighting schedule, and mixup.

#include "tailforge/common.hpp"

namespace tailforge {

using ClassCounts = std::vector<std::size_t>;

/// Per-class loss weights, normalized to mean 1 so loss magnitudes stay
/// comparable across schemes.
using ClassWeights = std::vector<double>;

namespace detail {
inline ClassWeights normalize_mean_one(ClassWeights w) {
    double s = 0.0;
    for (double v : w) s += v;
    double scale = static_cast<double>(w.size()) / s;
    for (double& v : w) v *= scale;
    return w;
}
} // namespace detail

inline void check_counts(const ClassCounts& counts) {
    if (counts.empty()) throw Error("class counts: empty");
    for (std::size_t n : counts)
        if (n == 0) throw Error("class counts: zero count");
}

/// w_c proportional to 1/n_c.
inline ClassWeights inverse_frequency_weights(const ClassCounts& counts) {
    check_counts(counts);
    ClassWeights w(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) w[c] = 1.0 / static_cast<double>(counts[c]);
    return detail::normalize_mean_one(std::move(w));
}

/// w_c proportional to (1 - beta) / (1 - beta^n_c); beta = 0 gives uniform
/// weights, beta -> 1 approaches inverse frequency.
inline ClassWeights effective_number_weights(const ClassCounts& counts, double beta) {
    check_counts(counts);
    if (!(beta >= 0.0 && beta < 1.0)) throw Error("effective_number_weights: beta not in [0,1)");
    ClassWeights w(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) {
        double eff = (1.0 - std::pow(beta, static_cast<double>(counts[c]))) / (1.0 - beta);
        w[c] = 1.0 / eff;
    }
    return detail::normalize_mean_one(std::move(w));
}

inline ClassWeights uniform_weights(std::size_t k) { return ClassWeights(k, 1.0); }

/// Infinite stream of sample indices: each draw picks a class uniformly, then
/// a sample uniformly within that class, with replacement.
class ClassBalancedSampler {
public:
    ClassBalancedSampler(const std::vector<int>& labels, std::size_t num_classes,
                         std::uint64_t seed)
        : rng_(seed), by_class_(num_classes) {
        for (std::size_t i = 0; i < labels.size(); ++i) {
            int y = labels[i];
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
                throw Error("sampler: label " + std::to_string(y) + " out of range [0," +
                            std::to_string(num_classes) + ")");
            by_class_[static_cast<std::size_t>(y)].push_back(i);
        }
        for (std::size_t c = 0; c < by_class_.size(); ++c)
            if (by_class_[c].empty())
                throw Error("sampler: class " + std::to_string(c) + " has no samples");
    }

    std::size_t next() {
        std::size_t c = rng_.index(by_class_.size());
        return by_class_[c][rng_.index(by_class_[c].size())];
    }

    std::vector<std::size_t> draw(std::size_t n) {
        std::vector<std::size_t> out(n);
        for (auto& i : out) i = next();
        return out;
    }

private:
    Rng rng_;
    std::vector<std::vector<std::size_t>> by_class_;
};

/// Deferred re-weighting: uniform weights before the switch epoch, the target
/// weights from the switch epoch on (boundary inclusive).
struct DrwSchedule {
    std::size_t switch_epoch = 0;
    ClassWeights target;
};

inline ClassWeights drw_weights(const DrwSchedule& schedule, std::size_t epoch) {
    if (epoch < schedule.switch_epoch) return uniform_weights(schedule.target.size());
    return schedule.target;
}

/// Mixup: convex combination of the batch with a permuted copy of itself.
/// The caller's loss contract is lam * CE(y) + (1 - lam) * CE(y_perm).
struct MixedBatch {
    std::vector<std::vector<double>> samples;
    std::vector<int> labels;      // original
    std::vector<int> labels_perm; // mixed-in partner labels
    double lam = 1.0;
};

namespace detail {
/// Beta(alpha, alpha) via Johnk's algorithm (works for any alpha > 0).
inline double beta_symmetric(double alpha, Rng& rng) {
    for (;;) {
        double u = rng.uniform(), v = rng.uniform();
        double x = std::pow(u, 1.0 / alpha), y = std::pow(v, 1.0 / alpha);
        if (x + y <= 1.0 && x + y > 0.0) return x / (x + y);
    }
}
} // namespace detail

inline MixedBatch mixup_batch(const std::vector<std::vector<double>>& samples,
                              const std::vector<int>& labels, double alpha, Rng& rng) {
    if (!(alpha > 0.0)) throw Error("mixup: alpha must be positive");
    if (samples.size() != labels.size()) throw Error("mixup: samples/labels length mismatch");
    MixedBatch out;
    out.lam = detail::beta_symmetric(alpha, rng);
    auto perm = rng.permutation(samples.size());
    out.samples.resize(samples.size());
    out.labels = labels;
    out.labels_perm.resize(labels.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        out.labels_perm[i] = labels[perm[i]];
        const auto& a = samples[i];
        const auto& b = samples[perm[i]];
        out.samples[i].resize(a.size());
        for (std::size_t k = 0; k < a.size(); ++k)
            out.samples[i][k] = out.lam * a[k] + (1.0 - out.lam) * b[k];
    }
    return out;
}

inline MixedBatch mixup_batch(const std::vector<std::vector<double>>& samples,
                              const std::vector<int>& labels, double alpha,
                              std::uint64_t seed) {
    Rng rng(seed);
    return mixup_batch(samples, labels, alpha, rng);
}

} // namespace tailforge

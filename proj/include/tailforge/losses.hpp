// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 TailForge Contributors
#pragma once

// Training objectives: cross-entropy (optionally class-weighted), the three
// metric losses (center, triplet, supervised contrastive), focal / CB-focal,
// LDAM, and the stage-1 composite CE + lambda * L_M.
//
// Center and triplet operate on raw extractor features r (Euclidean
// distances); the supervised contrastive loss operates on the L2-normalized
// projection output z.

#include "tailforge/autodiff.hpp"
#include "tailforge/rebalance.hpp"

namespace tailforge {

enum class MetricKind { none, center, triplet, supcon };

inline const char* metric_kind_name(MetricKind k) {
    switch (k) {
        case MetricKind::none: return "none";
        case MetricKind::center: return "center";
        case MetricKind::triplet: return "triplet";
        default: return "supcon";
    }
}

struct MetricLossConfig {
    MetricKind kind = MetricKind::none;
    double lambda = 0.0; // coefficient of L_M; 0 degenerates to plain CE

    void validate() const {
        if (lambda < 0.0) throw ConfigError("stage1.metric.lambda", "must be non-negative");
    }
};

/// Default metric coefficients: 0.001 for the Euclidean-distance losses,
/// 1.0 for the normalized-feature contrastive loss.
inline double default_lambda(MetricKind k) {
    return k == MetricKind::supcon ? 1.0 : 0.001;
}

/// Learnable class centers, one row per class; initialized to zeros and
/// updated by the same optimizer as the network parameters.
struct CenterState {
    TensorValue centers;

    CenterState() = default;
    CenterState(std::size_t num_classes, std::size_t feature_dim)
        : centers(Shape{num_classes, feature_dim}) {}
};

enum class TripletMining { batch_hard, all_valid };

struct TripletConfig {
    double margin = 50.0;
    TripletMining mining = TripletMining::batch_hard;

    void validate() const {
        if (!(margin > 0.0)) throw ConfigError("stage1.metric.margin", "must be positive");
    }
};

struct SupConConfig {
    double temperature = 0.05;

    void validate() const {
        if (!(temperature > 0.0))
            throw ConfigError("stage1.metric.temperature", "must be positive");
    }
};

struct FocalConfig {
    double gamma = 2.0;
    bool class_balanced = false;
    double beta = 0.9999; // effective-number beta, used when class_balanced

    void validate() const {
        if (gamma < 0.0) throw ConfigError("stage1.focal.gamma", "must be non-negative");
        if (!(beta >= 0.0 && beta < 1.0))
            throw ConfigError("stage1.focal.beta", "must be in [0,1)");
    }
};

struct LdamConfig {
    double max_margin = 0.5;
    double scale = 30.0;
    bool drw = false;

    void validate() const {
        if (!(max_margin > 0.0)) throw ConfigError("stage1.ldam.max_margin", "must be positive");
        if (!(scale > 0.0)) throw ConfigError("stage1.ldam.scale", "must be positive");
    }
};

namespace detail {

inline void check_labels(const std::vector<int>& labels, std::size_t batch, std::size_t k,
                         const char* op) {
    if (labels.size() != batch)
        throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= k)
            throw Error(std::string(op) + ": label " + std::to_string(y) + " out of range [0," +
                        std::to_string(k) + ")");
}

/// Row-wise stable softmax and log-softmax of a [B,K] buffer.
inline void softmax_and_log(const std::vector<double>& logits, std::size_t B, std::size_t K,
                            std::vector<double>& p, std::vector<double>& logp) {
    p.resize(B * K);
    logp.resize(B * K);
    for (std::size_t r = 0; r < B; ++r) {
        const double* row = logits.data() + r * K;
        double mx = row[0];
        for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < K; ++j) z += std::exp(row[j] - mx);
        double lz = mx + std::log(z);
        for (std::size_t j = 0; j < K; ++j) {
            logp[r * K + j] = row[j] - lz;
            p[r * K + j] = std::exp(logp[r * K + j]);
        }
    }
}

} // namespace detail

/// Weighted mean of -log softmax at the true class: sum(w_i * l_i) / sum(w_i);
/// null weights mean all-ones.
inline ad::Var cross_entropy(const ad::Var& logits, const std::vector<int>& labels,
                             const ClassWeights* class_weights = nullptr) {
    require_shape(logits.shape().size() == 2, "cross_entropy", logits.shape(), Shape{0, 0});
    std::size_t B = logits.shape()[0], K = logits.shape()[1];
    detail::check_labels(labels, B, K, "cross_entropy");
    if (class_weights && class_weights->size() != K)
        throw ShapeError("cross_entropy: " + std::to_string(class_weights->size()) +
                         " class weights for K=" + std::to_string(K));

    auto n = ad::Tape::node_of(logits);
    ad::Tape& tape = *n->tape;

    auto p = std::make_shared<std::vector<double>>();
    std::vector<double> logp;
    detail::softmax_and_log(n->values, B, K, *p, logp);

    auto w = std::make_shared<std::vector<double>>(B);
    double wsum = 0.0, loss = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        (*w)[i] = class_weights ? (*class_weights)[static_cast<std::size_t>(labels[i])] : 1.0;
        wsum += (*w)[i];
        loss -= (*w)[i] * logp[i * K + static_cast<std::size_t>(labels[i])];
    }
    loss /= wsum;

    auto y = std::make_shared<std::vector<int>>(labels);
    bool req = logits.requires_grad();
    auto out = tape.make_node(Shape{1}, {loss}, req);
    tape.record("cross_entropy", {logits.node_id()}, out->id,
                !req ? std::function<void(ad::detail::Adjoints&)>()
                     : [n, out, p, w, y, B, K, wsum](ad::detail::Adjoints& adj) {
        double go = adj.at(out)[0];
        auto& g = adj.at(n);
        for (std::size_t i = 0; i < B; ++i) {
            double wi = (*w)[i] / wsum;
            for (std::size_t j = 0; j < K; ++j) {
                double delta = (static_cast<std::size_t>((*y)[i]) == j) ? 1.0 : 0.0;
                g[i * K + j] += go * wi * ((*p)[i * K + j] - delta);
            }
        }
    });
    return ad::Tape::wrap(out);
}

/// (1/2B) sum_i |r_i - c_{y_i}|^2; gradients flow to both the features and
/// the centers.
inline ad::Var center_loss(const ad::Var& r, const std::vector<int>& labels,
                           const ad::Var& centers) {
    require_shape(r.shape().size() == 2, "center_loss", r.shape(), Shape{0, 0});
    require_shape(centers.shape().size() == 2 && centers.shape()[1] == r.shape()[1],
                  "center_loss", centers.shape(), r.shape());
    std::size_t B = r.shape()[0];
    detail::check_labels(labels, B, centers.shape()[0], "center_loss");
    std::vector<std::size_t> idx(labels.begin(), labels.end());
    ad::Var gathered = ad::gather_rows(centers, idx);
    ad::Var diff = ad::sub(r, gathered);
    return ad::scale(ad::sum_all(ad::mul(diff, diff)), 0.5 / static_cast<double>(B));
}

/// Triplet loss on squared Euclidean distances in feature space.
/// batch_hard: per anchor, hardest positive vs hardest negative; anchors with
/// no positive or no negative are excluded. all_valid: mean hinge over every
/// valid (anchor, positive, negative) triple. A batch with no valid anchor or
/// triple yields 0 and raises `degenerate`.
inline ad::Var triplet_loss(const ad::Var& r, const std::vector<int>& labels,
                            const TripletConfig& cfg, bool* degenerate = nullptr) {
    cfg.validate();
    require_shape(r.shape().size() == 2, "triplet_loss", r.shape(), Shape{0, 0});
    std::size_t B = r.shape()[0];
    if (labels.size() != B)
        throw ShapeError("triplet_loss: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(B));
    if (degenerate) *degenerate = false;

    ad::Var dist = ad::pairwise_sqdist(r, r);
    auto nd = ad::Tape::node_of(dist);
    ad::Tape& tape = *nd->tape;
    const auto& D = nd->values;
    double m = cfg.margin;

    // (anchor, positive, negative) index triples with hinge active, plus the
    // averaging denominator.
    auto active = std::make_shared<std::vector<std::array<std::size_t, 3>>>();
    double denom = 0.0, loss = 0.0;

    if (cfg.mining == TripletMining::batch_hard) {
        for (std::size_t a = 0; a < B; ++a) {
            bool has_p = false, has_n = false;
            std::size_t hard_p = 0, hard_n = 0;
            double max_p = -1.0, min_n = 0.0;
            for (std::size_t j = 0; j < B; ++j) {
                if (j == a) continue;
                if (labels[j] == labels[a]) {
                    if (!has_p || D[a * B + j] > max_p) max_p = D[a * B + j], hard_p = j;
                    has_p = true;
                } else {
                    if (!has_n || D[a * B + j] < min_n) min_n = D[a * B + j], hard_n = j;
                    has_n = true;
                }
            }
            if (!has_p || !has_n) continue;
            denom += 1.0;
            double h = max_p - min_n + m;
            if (h > 0.0) {
                loss += h;
                active->push_back({a, hard_p, hard_n});
            }
        }
    } else {
        for (std::size_t a = 0; a < B; ++a)
            for (std::size_t p = 0; p < B; ++p) {
                if (p == a || labels[p] != labels[a]) continue;
                for (std::size_t nn = 0; nn < B; ++nn) {
                    if (labels[nn] == labels[a]) continue;
                    denom += 1.0;
                    double h = D[a * B + p] - D[a * B + nn] + m;
                    if (h > 0.0) {
                        loss += h;
                        active->push_back({a, p, nn});
                    }
                }
            }
    }

    if (denom == 0.0) {
        if (degenerate) *degenerate = true;
        return tape.constant_scalar(0.0);
    }
    loss /= denom;

    bool req = dist.requires_grad();
    auto out = tape.make_node(Shape{1}, {loss}, req);
    tape.record("triplet_hinge", {dist.node_id()}, out->id,
                !req ? std::function<void(ad::detail::Adjoints&)>()
                     : [nd, out, active, denom, B](ad::detail::Adjoints& adj) {
        double go = adj.at(out)[0] / denom;
        auto& g = adj.at(nd);
        for (const auto& t : *active) {
            g[t[0] * B + t[1]] += go;
            g[t[0] * B + t[2]] -= go;
        }
    });
    return ad::Tape::wrap(out);
}

/// Supervised contrastive loss on unit-norm projection rows. Positives are
/// distinct same-class samples; anchors without a positive are excluded from
/// the average (flagged). A batch with no anchor at all yields 0.
inline ad::Var supcon_loss(const ad::Var& z, const std::vector<int>& labels,
                           const SupConConfig& cfg, bool* flagged = nullptr) {
    cfg.validate();
    require_shape(z.shape().size() == 2, "supcon_loss", z.shape(), Shape{0, 0});
    std::size_t B = z.shape()[0], d = z.shape()[1];
    if (labels.size() != B)
        throw ShapeError("supcon_loss: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(B));
    if (flagged) *flagged = false;

    auto nz = ad::Tape::node_of(z);
    ad::Tape& tape = *nz->tape;
    const auto& Z = nz->values;

    for (std::size_t i = 0; i < B; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += Z[i * d + k] * Z[i * d + k];
        if (std::abs(std::sqrt(s) - 1.0) > 1e-6)
            throw NumericError("supcon_loss: row " + std::to_string(i) +
                               " is not unit-norm (norm " + std::to_string(std::sqrt(s)) + ")");
    }

    double inv_tau = 1.0 / cfg.temperature;
    std::vector<double> sim(B * B, 0.0); // scaled dot products
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < B; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += Z[i * d + k] * Z[j * d + k];
            sim[i * B + j] = s * inv_tau;
        }

    std::vector<std::size_t> pos_count(B, 0);
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < B; ++j)
            if (j != i && labels[j] == labels[i]) ++pos_count[i];

    std::size_t anchors = 0;
    for (std::size_t i = 0; i < B; ++i)
        if (pos_count[i] > 0) ++anchors;
    bool excluded = false;
    for (std::size_t i = 0; i < B; ++i)
        if (pos_count[i] == 0) excluded = true;
    if (flagged) *flagged = excluded;
    if (anchors == 0) return tape.constant_scalar(0.0);

    // q[i,j] = softmax over j != i of sim[i,j]
    auto q = std::make_shared<std::vector<double>>(B * B, 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < B; ++j)
            if (j != i) mx = std::max(mx, sim[i * B + j]);
        double zsum = 0.0;
        for (std::size_t j = 0; j < B; ++j)
            if (j != i) zsum += std::exp(sim[i * B + j] - mx);
        double lz = mx + std::log(zsum);
        for (std::size_t j = 0; j < B; ++j)
            if (j != i) (*q)[i * B + j] = std::exp(sim[i * B + j] - lz);
        if (pos_count[i] == 0) continue;
        double li = 0.0;
        for (std::size_t j = 0; j < B; ++j)
            if (j != i && labels[j] == labels[i]) li -= sim[i * B + j] - lz;
        loss += li / static_cast<double>(pos_count[i]);
    }
    loss /= static_cast<double>(anchors);

    auto y = std::make_shared<std::vector<int>>(labels);
    auto pc = std::make_shared<std::vector<std::size_t>>(pos_count);
    bool req = z.requires_grad();
    auto out = tape.make_node(Shape{1}, {loss}, req);
    tape.record("supcon_loss", {z.node_id()}, out->id,
                !req ? std::function<void(ad::detail::Adjoints&)>()
                     : [nz, out, q, y, pc, B, d, anchors, inv_tau](ad::detail::Adjoints& adj) {
        double go = adj.at(out)[0];
        auto& g = adj.at(nz);
        const auto& Zv = nz->values;
        double inv_a = 1.0 / static_cast<double>(anchors);
        for (std::size_t i = 0; i < B; ++i) {
            if ((*pc)[i] == 0) continue;
            double inv_p = 1.0 / static_cast<double>((*pc)[i]);
            for (std::size_t j = 0; j < B; ++j) {
                if (j == i) continue;
                double pos = ((*y)[j] == (*y)[i]) ? inv_p : 0.0;
                double ds = go * inv_a * inv_tau * ((*q)[i * B + j] - pos);
                if (ds == 0.0) continue;
                for (std::size_t k = 0; k < d; ++k) {
                    g[i * d + k] += ds * Zv[j * d + k];
                    g[j * d + k] += ds * Zv[i * d + k];
                }
            }
        }
    });
    return ad::Tape::wrap(out);
}

/// Mean over the batch of -w_y (1 - p_t)^gamma log p_t. With class_balanced
/// set, w comes from effective-number weighting of the class counts.
inline ad::Var focal_loss(const ad::Var& logits, const std::vector<int>& labels,
                          const FocalConfig& cfg, const ClassCounts* class_counts = nullptr) {
    cfg.validate();
    require_shape(logits.shape().size() == 2, "focal_loss", logits.shape(), Shape{0, 0});
    std::size_t B = logits.shape()[0], K = logits.shape()[1];
    detail::check_labels(labels, B, K, "focal_loss");

    ClassWeights w_class;
    if (cfg.class_balanced) {
        if (!class_counts)
            throw Error("focal_loss: class_balanced requires class counts");
        if (class_counts->size() != K)
            throw ShapeError("focal_loss: " + std::to_string(class_counts->size()) +
                             " class counts for K=" + std::to_string(K));
        w_class = effective_number_weights(*class_counts, cfg.beta);
    } else {
        w_class = uniform_weights(K);
    }

    auto n = ad::Tape::node_of(logits);
    ad::Tape& tape = *n->tape;
    auto p = std::make_shared<std::vector<double>>();
    auto logp = std::make_shared<std::vector<double>>();
    detail::softmax_and_log(n->values, B, K, *p, *logp);

    double gamma = cfg.gamma;
    double loss = 0.0;
    auto w = std::make_shared<std::vector<double>>(B);
    for (std::size_t i = 0; i < B; ++i) {
        std::size_t yi = static_cast<std::size_t>(labels[i]);
        (*w)[i] = w_class[yi];
        double pt = (*p)[i * K + yi];
        double om = 1.0 - pt;
        double mod = (om <= 0.0) ? (gamma == 0.0 ? 1.0 : 0.0) : std::pow(om, gamma);
        loss += (*w)[i] * mod * (-(*logp)[i * K + yi]);
    }
    loss /= static_cast<double>(B);

    auto y = std::make_shared<std::vector<int>>(labels);
    bool req = logits.requires_grad();
    auto out = tape.make_node(Shape{1}, {loss}, req);
    tape.record("focal_loss", {logits.node_id()}, out->id,
                !req ? std::function<void(ad::detail::Adjoints&)>()
                     : [n, out, p, logp, w, y, B, K, gamma](ad::detail::Adjoints& adj) {
        double go = adj.at(out)[0] / static_cast<double>(B);
        auto& g = adj.at(n);
        for (std::size_t i = 0; i < B; ++i) {
            std::size_t yi = static_cast<std::size_t>((*y)[i]);
            double pt = (*p)[i * K + yi];
            double lpt = (*logp)[i * K + yi];
            double om = 1.0 - pt;
            // d/dz_j of -w (1-p)^g log p  =  w [g (1-p)^{g-1} p log p - (1-p)^g]
            //                               * (delta_{j=y} - p_j)
            double fac;
            if (om <= 0.0)
                fac = (gamma == 0.0) ? -1.0 : 0.0;
            else if (gamma == 0.0)
                fac = -1.0;
            else
                fac = gamma * std::pow(om, gamma - 1.0) * pt * lpt - std::pow(om, gamma);
            for (std::size_t j = 0; j < K; ++j) {
                double delta = (j == yi) ? 1.0 : 0.0;
                g[i * K + j] += go * (*w)[i] * fac * (delta - (*p)[i * K + j]);
            }
        }
    });
    return ad::Tape::wrap(out);
}

/// Per-class margins for the label-distribution-aware margin loss:
/// delta_c = C * n_c^(-1/4), scaled so the largest margin (rarest class)
/// equals max_margin.
inline std::vector<double> ldam_margins(const ClassCounts& counts, double max_margin) {
    check_counts(counts);
    std::vector<double> m(counts.size());
    double mx = 0.0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        m[c] = std::pow(static_cast<double>(counts[c]), -0.25);
        mx = std::max(mx, m[c]);
    }
    for (double& v : m) v *= max_margin / mx;
    return m;
}

/// Cross-entropy on s * (logits - delta at the true class).
inline ad::Var ldam_loss(const ad::Var& logits, const std::vector<int>& labels,
                         const ClassCounts& counts, const LdamConfig& cfg,
                         const ClassWeights* class_weights = nullptr) {
    cfg.validate();
    require_shape(logits.shape().size() == 2, "ldam_loss", logits.shape(), Shape{0, 0});
    std::size_t B = logits.shape()[0], K = logits.shape()[1];
    detail::check_labels(labels, B, K, "ldam_loss");
    if (counts.size() != K)
        throw ShapeError("ldam_loss: " + std::to_string(counts.size()) + " class counts for K=" +
                         std::to_string(K));
    std::vector<double> margins = ldam_margins(counts, cfg.max_margin);

    ad::Tape& tape = *ad::Tape::node_of(logits)->tape;
    std::vector<double> m(B * K, 0.0);
    for (std::size_t i = 0; i < B; ++i)
        m[i * K + static_cast<std::size_t>(labels[i])] =
            margins[static_cast<std::size_t>(labels[i])];
    ad::Var margin_tensor = tape.constant({B, K}, std::move(m));
    ad::Var adjusted = ad::scale(ad::sub(logits, margin_tensor), cfg.scale);
    return cross_entropy(adjusted, labels, class_weights);
}

/// Stage-1 objective: L_CE + lambda * L_M (the CE term can be dropped to
/// train with the metric loss alone). Center and triplet read r, supcon
/// reads z.
struct CompositeInputs {
    const ad::Var* logits = nullptr;
    const ad::Var* r = nullptr;
    const ad::Var* z = nullptr;
    const ad::Var* centers = nullptr;
};

inline ad::Var composite_stage1_loss(const CompositeInputs& in, const std::vector<int>& labels,
                                     const MetricLossConfig& metric, const TripletConfig& triplet,
                                     const SupConConfig& supcon,
                                     const ClassWeights* class_weights = nullptr,
                                     bool include_ce = true, bool* degenerate = nullptr) {
    metric.validate();
    if (include_ce && (metric.kind == MetricKind::none || metric.lambda == 0.0)) {
        if (!in.logits) throw Error("composite_stage1_loss: cross-entropy requires logits");
        return cross_entropy(*in.logits, labels, class_weights);
    }
    ad::Var metric_term;
    switch (metric.kind) {
        case MetricKind::none:
            break;
        case MetricKind::center:
            if (!in.r || !in.centers)
                throw Error("composite_stage1_loss: center loss requires features and centers");
            metric_term = center_loss(*in.r, labels, *in.centers);
            break;
        case MetricKind::triplet:
            if (!in.r) throw Error("composite_stage1_loss: triplet loss requires features");
            metric_term = triplet_loss(*in.r, labels, triplet, degenerate);
            break;
        case MetricKind::supcon:
            if (!in.z)
                throw Error("composite_stage1_loss: supcon loss requires projection output");
            metric_term = supcon_loss(*in.z, labels, supcon, degenerate);
            break;
    }

    if (!include_ce) {
        if (metric.kind == MetricKind::none)
            throw Error("composite_stage1_loss: nothing to optimize (no CE, no metric loss)");
        return ad::scale(metric_term, metric.lambda);
    }
    if (!in.logits) throw Error("composite_stage1_loss: cross-entropy requires logits");
    ad::Var ce = cross_entropy(*in.logits, labels, class_weights);
    return ad::add(ce, ad::scale(metric_term, metric.lambda));
}

} // namespace tailforge

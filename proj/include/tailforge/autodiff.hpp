// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 TailForge Contributors
#pragma once

// Reverse-mode automatic differentiation over dense f64 tensors.
//
// A Tape owns a topologically ordered list of operation records (the order is
// creation order, which is already topological). Var is a cheap handle to a
// tape node. backward() sweeps the records in reverse using scratch adjoint
// buffers and then adds each node's adjoint into its grad field once, so
// calling backward twice without zeroing doubles every gradient.
//
// A tape and its tensors are confined to one thread during forward/backward;
// distinct tapes are independent.

#include <cassert>
#include <functional>
#include <memory>
#include <utility>

#include "tailforge/common.hpp"

namespace tailforge::ad {

class Tape;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // all zeros until backward runs
    bool requires_grad = false;
    int id = -1;
    Tape* tape = nullptr;
};

using NodePtr = std::shared_ptr<Node>;

/// Scratch adjoints for one backward sweep, indexed by node id.
struct Adjoints {
    std::vector<std::vector<double>> buf;

    std::vector<double>& at(const NodePtr& n) {
        auto& b = buf[static_cast<std::size_t>(n->id)];
        if (b.empty()) b.assign(n->values.size(), 0.0);
        return b;
    }
    bool has(const NodePtr& n) const {
        return !buf[static_cast<std::size_t>(n->id)].empty();
    }
};

struct OpRecord {
    const char* op;
    std::vector<int> inputs;
    int output;
    std::function<void(Adjoints&)> backward; // empty when no input needs grad
};

} // namespace detail

/// Handle to a differentiable tensor living on a Tape.
class Var {
public:
    Var() = default;

    const Shape& shape() const { return n_->shape; }
    const std::vector<double>& values() const { return n_->values; }
    const std::vector<double>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    int node_id() const { return n_->id; }
    std::size_t size() const { return n_->values.size(); }

    /// Value of a single-element tensor.
    double scalar() const {
        if (n_->values.size() != 1)
            throw ShapeError("scalar: tensor has " + std::to_string(n_->values.size()) +
                             " elements");
        return n_->values[0];
    }

    bool defined() const { return n_ != nullptr; }

private:
    friend class Tape;
    explicit Var(detail::NodePtr n) : n_(std::move(n)) {}
    detail::NodePtr n_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers a leaf tensor.
    Var input(Shape shape, std::vector<double> values, bool requires_grad) {
        if (values.size() != numel(shape))
            throw ShapeError("input: " + std::to_string(values.size()) + " values for shape " +
                             shape_str(shape));
        return Var(make_node(std::move(shape), std::move(values), requires_grad));
    }

    Var constant(Shape shape, std::vector<double> values) {
        return input(std::move(shape), std::move(values), false);
    }

    Var constant_scalar(double v) { return input({1}, {v}, false); }

    /// Leaf view of a TensorValue (copies the values onto the tape).
    Var input(const TensorValue& t, bool requires_grad) {
        return input(t.shape, t.data, requires_grad);
    }

    /// Propagates d(root)/d(node) into every node's grad field, additively.
    void backward(const Var& root) {
        if (root.size() != 1)
            throw ShapeError("backward: root must be scalar, got shape " +
                             shape_str(root.shape()));
        if (root.n_->tape != this) throw Error("backward: root belongs to another tape");

        detail::Adjoints adj;
        adj.buf.resize(nodes_.size());
        adj.at(root.n_)[0] = 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (it->backward && adj.buf[static_cast<std::size_t>(it->output)].size() > 0)
                it->backward(adj);
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            auto& n = nodes_[i];
            if (!n->requires_grad || adj.buf[i].empty()) continue;
            for (std::size_t k = 0; k < n->grad.size(); ++k) n->grad[k] += adj.buf[i][k];
        }
    }

    void zero_grad() {
        for (auto& n : nodes_)
            std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }

    std::size_t num_nodes() const { return nodes_.size(); }
    std::size_t num_records() const { return records_.size(); }

    // --- used by the op implementations ---

    detail::NodePtr make_node(Shape shape, std::vector<double> values, bool requires_grad) {
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->values = std::move(values);
        n->grad.assign(n->values.size(), 0.0);
        n->requires_grad = requires_grad;
        n->id = static_cast<int>(nodes_.size());
        n->tape = this;
        nodes_.push_back(n);
        return n;
    }

    void record(const char* op, std::vector<int> inputs, int output,
                std::function<void(detail::Adjoints&)> backward) {
        records_.push_back({op, std::move(inputs), output, std::move(backward)});
    }

    static detail::NodePtr node_of(const Var& v) { return v.n_; }
    static Var wrap(detail::NodePtr n) { return Var(std::move(n)); }

private:
    std::vector<detail::NodePtr> nodes_;
    std::vector<detail::OpRecord> records_;
};

namespace detail {

inline Tape& tape_of(const Var& v) {
    Tape* t = Tape::node_of(v)->tape;
    assert(t != nullptr);
    return *t;
}

inline void check_same_tape(const char* op, const Var& a, const Var& b) {
    if (Tape::node_of(a)->tape != Tape::node_of(b)->tape)
        throw Error(std::string(op) + ": operands live on different tapes");
}

/// Emits a node and its record in one go.
template <typename Backward>
Var emit(Tape& tape, const char* op, std::initializer_list<Var> ins, Shape out_shape,
         std::vector<double> out_values, Backward&& bw) {
    bool req = false;
    std::vector<int> ids;
    ids.reserve(ins.size());
    for (const auto& v : ins) {
        req = req || v.requires_grad();
        ids.push_back(v.node_id());
    }
    NodePtr out = tape.make_node(std::move(out_shape), std::move(out_values), req);
    if (req)
        tape.record(op, std::move(ids), out->id, std::forward<Backward>(bw)(out));
    else
        tape.record(op, std::move(ids), out->id, nullptr);
    return Tape::wrap(out);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

/// Element-wise addition; also broadcasts a [n] (or [1,n]) bias over the rows
/// of a [m,n] left operand.
inline Var add(const Var& a, const Var& b) {
    detail::check_same_tape("add", a, b);
    Tape& t = detail::tape_of(a);
    auto na = Tape::node_of(a);
    auto nb = Tape::node_of(b);

    bool same = a.shape() == b.shape();
    bool rowbcast = !same && a.shape().size() == 2 &&
                    ((b.shape().size() == 1 && b.shape()[0] == a.shape()[1]) ||
                     (b.shape().size() == 2 && b.shape()[0] == 1 && b.shape()[1] == a.shape()[1]));
    require_shape(same || rowbcast, "add", a.shape(), b.shape());

    std::vector<double> out(a.size());
    if (same) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->values[i] + nb->values[i];
    } else {
        std::size_t rows = a.shape()[0], cols = a.shape()[1];
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                out[r * cols + c] = na->values[r * cols + c] + nb->values[c];
    }
    return detail::emit(t, "add", {a, b}, a.shape(), std::move(out), [&](detail::NodePtr o) {
        return [na, nb, o, same](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            if (na->requires_grad) {
                auto& ga = adj.at(na);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (nb->requires_grad) {
                auto& gb = adj.at(nb);
                if (same) {
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                } else {
                    std::size_t cols = nb->values.size();
                    std::size_t rows = g.size() / cols;
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                }
            }
        };
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_same_tape("sub", a, b);
    Tape& t = detail::tape_of(a);
    require_shape(a.shape() == b.shape(), "sub", a.shape(), b.shape());
    auto na = Tape::node_of(a);
    auto nb = Tape::node_of(b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->values[i] - nb->values[i];
    return detail::emit(t, "sub", {a, b}, a.shape(), std::move(out), [&](detail::NodePtr o) {
        return [na, nb, o](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            if (na->requires_grad) {
                auto& ga = adj.at(na);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (nb->requires_grad) {
                auto& gb = adj.at(nb);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    });
}

/// Element-wise (Hadamard) product.
inline Var mul(const Var& a, const Var& b) {
    detail::check_same_tape("mul", a, b);
    Tape& t = detail::tape_of(a);
    require_shape(a.shape() == b.shape(), "mul", a.shape(), b.shape());
    auto na = Tape::node_of(a);
    auto nb = Tape::node_of(b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->values[i] * nb->values[i];
    return detail::emit(t, "mul", {a, b}, a.shape(), std::move(out), [&](detail::NodePtr o) {
        return [na, nb, o](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            if (na->requires_grad) {
                auto& ga = adj.at(na);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * nb->values[i];
            }
            if (nb->requires_grad) {
                auto& gb = adj.at(nb);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * na->values[i];
            }
        };
    });
}

/// Multiplication by a plain scalar constant.
inline Var scale(const Var& a, double c) {
    Tape& t = detail::tape_of(a);
    auto na = Tape::node_of(a);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * na->values[i];
    return detail::emit(t, "scale", {a}, a.shape(), std::move(out), [&](detail::NodePtr o) {
        return [na, o, c](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            auto& ga = adj.at(na);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        };
    });
}

inline Var matmul(const Var& a, const Var& b) {
    detail::check_same_tape("matmul", a, b);
    Tape& t = detail::tape_of(a);
    bool ok = a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[0];
    require_shape(ok, "matmul", a.shape(), b.shape());
    std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    auto na = Tape::node_of(a);
    auto nb = Tape::node_of(b);
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            double av = na->values[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * nb->values[p * n + j];
        }
    return detail::emit(t, "matmul", {a, b}, Shape{m, n}, std::move(out),
                        [&](detail::NodePtr o) {
        return [na, nb, o, m, k, n](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            if (na->requires_grad) {
                auto& ga = adj.at(na); // dA = G * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                            s += g[i * n + j] * nb->values[p * n + j];
                        ga[i * k + p] += s;
                    }
            }
            if (nb->requires_grad) {
                auto& gb = adj.at(nb); // dB = A^T * G
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < m; ++i)
                            s += na->values[i * k + p] * g[i * n + j];
                        gb[p * n + j] += s;
                    }
            }
        };
    });
}

/// Direct 2-D convolution, stride 1, zero padding. input [B,C,H,W],
/// kernel [F,C,kh,kw], optional bias [F].
inline Var conv2d(const Var& x, const Var& kernel, const Var* bias = nullptr,
                  std::size_t padding = 0) {
    detail::check_same_tape("conv2d", x, kernel);
    Tape& t = detail::tape_of(x);
    bool ok = x.shape().size() == 4 && kernel.shape().size() == 4 &&
              x.shape()[1] == kernel.shape()[1];
    require_shape(ok, "conv2d", x.shape(), kernel.shape());
    std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    std::size_t F = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
    if (H + 2 * padding < kh || W + 2 * padding < kw)
        throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
    std::size_t OH = H + 2 * padding - kh + 1, OW = W + 2 * padding - kw + 1;
    if (bias) {
        detail::check_same_tape("conv2d", x, *bias);
        require_shape(bias->shape() == Shape{F}, "conv2d bias", bias->shape(), Shape{F});
    }

    auto nx = Tape::node_of(x);
    auto nk = Tape::node_of(kernel);
    detail::NodePtr nb = bias ? Tape::node_of(*bias) : nullptr;

    std::vector<double> out(B * F * OH * OW, 0.0);
    auto xat = [&](std::size_t b, std::size_t c, std::ptrdiff_t i, std::ptrdiff_t j) -> double {
        if (i < 0 || j < 0 || i >= static_cast<std::ptrdiff_t>(H) ||
            j >= static_cast<std::ptrdiff_t>(W))
            return 0.0;
        return nx->values[((b * C + c) * H + static_cast<std::size_t>(i)) * W +
                          static_cast<std::size_t>(j)];
    };
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t oi = 0; oi < OH; ++oi)
                for (std::size_t oj = 0; oj < OW; ++oj) {
                    double s = nb ? nb->values[f] : 0.0;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t u = 0; u < kh; ++u)
                            for (std::size_t v = 0; v < kw; ++v)
                                s += xat(b, c,
                                         static_cast<std::ptrdiff_t>(oi + u) -
                                             static_cast<std::ptrdiff_t>(padding),
                                         static_cast<std::ptrdiff_t>(oj + v) -
                                             static_cast<std::ptrdiff_t>(padding)) *
                                     nk->values[((f * C + c) * kh + u) * kw + v];
                    out[((b * F + f) * OH + oi) * OW + oj] = s;
                }

    bool req = x.requires_grad() || kernel.requires_grad() || (bias && bias->requires_grad());
    detail::NodePtr no = t.make_node(Shape{B, F, OH, OW}, std::move(out), req);
    std::vector<int> ids{x.node_id(), kernel.node_id()};
    if (bias) ids.push_back(bias->node_id());
    if (!req) {
        t.record("conv2d", std::move(ids), no->id, nullptr);
        return Tape::wrap(no);
    }
    t.record("conv2d", std::move(ids), no->id,
             [nx, nk, nb, no, B, C, H, W, F, kh, kw, OH, OW, padding](detail::Adjoints& adj) {
        const auto& g = adj.at(no);
        const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(padding);
        auto in_bounds = [&](std::ptrdiff_t i, std::ptrdiff_t j) {
            return i >= 0 && j >= 0 && i < static_cast<std::ptrdiff_t>(H) &&
                   j < static_cast<std::ptrdiff_t>(W);
        };
        std::vector<double>* gx = nx->requires_grad ? &adj.at(nx) : nullptr;
        std::vector<double>* gk = nk->requires_grad ? &adj.at(nk) : nullptr;
        std::vector<double>* gb = (nb && nb->requires_grad) ? &adj.at(nb) : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t oi = 0; oi < OH; ++oi)
                    for (std::size_t oj = 0; oj < OW; ++oj) {
                        double go = g[((b * F + f) * OH + oi) * OW + oj];
                        if (go == 0.0) continue;
                        if (gb) (*gb)[f] += go;
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t u = 0; u < kh; ++u)
                                for (std::size_t v = 0; v < kw; ++v) {
                                    std::ptrdiff_t i = static_cast<std::ptrdiff_t>(oi + u) - pad;
                                    std::ptrdiff_t j = static_cast<std::ptrdiff_t>(oj + v) - pad;
                                    if (!in_bounds(i, j)) continue;
                                    std::size_t xi = ((b * C + c) * H +
                                                      static_cast<std::size_t>(i)) *
                                                         W +
                                                     static_cast<std::size_t>(j);
                                    std::size_t ki = ((f * C + c) * kh + u) * kw + v;
                                    if (gx) (*gx)[xi] += go * nk->values[ki];
                                    if (gk) (*gk)[ki] += go * nx->values[xi];
                                }
                    }
    });
    return Tape::wrap(no);
}

/// ReLU; the subgradient at 0 is 0.
inline Var relu(const Var& a) {
    Tape& t = detail::tape_of(a);
    auto na = Tape::node_of(a);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = na->values[i] > 0.0 ? na->values[i] : 0.0;
    return detail::emit(t, "relu", {a}, a.shape(), std::move(out), [&](detail::NodePtr o) {
        return [na, o](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            auto& ga = adj.at(na);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (na->values[i] > 0.0) ga[i] += g[i];
        };
    });
}

inline Var exp(const Var& a) {
    Tape& t = detail::tape_of(a);
    auto na = Tape::node_of(a);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(na->values[i]);
    return detail::emit(t, "exp", {a}, a.shape(), std::move(out), [&](detail::NodePtr o) {
        return [na, o](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            auto& ga = adj.at(na);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * o->values[i];
        };
    });
}

inline Var log(const Var& a) {
    Tape& t = detail::tape_of(a);
    auto na = Tape::node_of(a);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(na->values[i]);
    return detail::emit(t, "log", {a}, a.shape(), std::move(out), [&](detail::NodePtr o) {
        return [na, o](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            auto& ga = adj.at(na);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / na->values[i];
        };
    });
}

inline Var sum_all(const Var& a) {
    Tape& t = detail::tape_of(a);
    auto na = Tape::node_of(a);
    double s = 0.0;
    for (double v : na->values) s += v;
    return detail::emit(t, "sum", {a}, Shape{1}, {s}, [&](detail::NodePtr o) {
        return [na, o](detail::Adjoints& adj) {
            double g = adj.at(o)[0];
            auto& ga = adj.at(na);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        };
    });
}

inline Var mean_all(const Var& a) {
    Tape& t = detail::tape_of(a);
    auto na = Tape::node_of(a);
    double s = 0.0;
    for (double v : na->values) s += v;
    double inv = 1.0 / static_cast<double>(na->values.size());
    return detail::emit(t, "mean", {a}, Shape{1}, {s * inv}, [&](detail::NodePtr o) {
        return [na, o, inv](detail::Adjoints& adj) {
            double g = adj.at(o)[0] * inv;
            auto& ga = adj.at(na);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        };
    });
}

/// Spatial mean: [B,C,H,W] -> [B,C].
inline Var global_avg_pool(const Var& a) {
    Tape& t = detail::tape_of(a);
    require_shape(a.shape().size() == 4, "global_avg_pool", a.shape(), Shape{0, 0, 0, 0});
    auto na = Tape::node_of(a);
    std::size_t B = a.shape()[0], C = a.shape()[1], HW = a.shape()[2] * a.shape()[3];
    double inv = 1.0 / static_cast<double>(HW);
    std::vector<double> out(B * C, 0.0);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        double s = 0.0;
        for (std::size_t i = 0; i < HW; ++i) s += na->values[bc * HW + i];
        out[bc] = s * inv;
    }
    return detail::emit(t, "global_avg_pool", {a}, Shape{B, C}, std::move(out),
                        [&](detail::NodePtr o) {
        return [na, o, B, C, HW, inv](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            auto& ga = adj.at(na);
            for (std::size_t bc = 0; bc < B * C; ++bc) {
                double gv = g[bc] * inv;
                for (std::size_t i = 0; i < HW; ++i) ga[bc * HW + i] += gv;
            }
        };
    });
}

/// Row-wise softmax over the last axis of a [B,K] tensor.
inline Var softmax_rows(const Var& a) {
    Tape& t = detail::tape_of(a);
    require_shape(a.shape().size() == 2, "softmax_rows", a.shape(), Shape{0, 0});
    auto na = Tape::node_of(a);
    std::size_t B = a.shape()[0], K = a.shape()[1];
    std::vector<double> out(B * K);
    for (std::size_t r = 0; r < B; ++r) {
        const double* row = na->values.data() + r * K;
        double mx = row[0];
        for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < K; ++j) z += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < K; ++j) out[r * K + j] = std::exp(row[j] - mx) / z;
    }
    return detail::emit(t, "softmax_rows", {a}, a.shape(), std::move(out),
                        [&](detail::NodePtr o) {
        return [na, o, B, K](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            auto& ga = adj.at(na);
            for (std::size_t r = 0; r < B; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < K; ++j) dot += g[r * K + j] * o->values[r * K + j];
                for (std::size_t j = 0; j < K; ++j)
                    ga[r * K + j] += o->values[r * K + j] * (g[r * K + j] - dot);
            }
        };
    });
}

/// Row-wise log-softmax over the last axis of a [B,K] tensor.
inline Var log_softmax_rows(const Var& a) {
    Tape& t = detail::tape_of(a);
    require_shape(a.shape().size() == 2, "log_softmax_rows", a.shape(), Shape{0, 0});
    auto na = Tape::node_of(a);
    std::size_t B = a.shape()[0], K = a.shape()[1];
    std::vector<double> out(B * K);
    for (std::size_t r = 0; r < B; ++r) {
        const double* row = na->values.data() + r * K;
        double mx = row[0];
        for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < K; ++j) z += std::exp(row[j] - mx);
        double lz = mx + std::log(z);
        for (std::size_t j = 0; j < K; ++j) out[r * K + j] = row[j] - lz;
    }
    return detail::emit(t, "log_softmax_rows", {a}, a.shape(), std::move(out),
                        [&](detail::NodePtr o) {
        return [na, o, B, K](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            auto& ga = adj.at(na);
            for (std::size_t r = 0; r < B; ++r) {
                double gsum = 0.0;
                for (std::size_t j = 0; j < K; ++j) gsum += g[r * K + j];
                for (std::size_t j = 0; j < K; ++j)
                    ga[r * K + j] += g[r * K + j] - std::exp(o->values[r * K + j]) * gsum;
            }
        };
    });
}

/// Scales every row of a [B,D] tensor to unit Euclidean norm. Rows whose norm
/// is (numerically) zero signal a dead network and raise NumericError.
inline Var l2_normalize_rows(const Var& a) {
    Tape& t = detail::tape_of(a);
    require_shape(a.shape().size() == 2, "l2_normalize_rows", a.shape(), Shape{0, 0});
    auto na = Tape::node_of(a);
    std::size_t B = a.shape()[0], D = a.shape()[1];
    std::vector<double> out(B * D);
    auto norms = std::make_shared<std::vector<double>>(B);
    for (std::size_t r = 0; r < B; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < D; ++j) s += na->values[r * D + j] * na->values[r * D + j];
        double norm = std::sqrt(s);
        if (!(norm > 1e-12))
            throw NumericError("l2_normalize_rows: row " + std::to_string(r) +
                               " has zero norm");
        (*norms)[r] = norm;
        for (std::size_t j = 0; j < D; ++j) out[r * D + j] = na->values[r * D + j] / norm;
    }
    return detail::emit(t, "l2_normalize_rows", {a}, a.shape(), std::move(out),
                        [&](detail::NodePtr o) {
        return [na, o, norms, B, D](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            auto& ga = adj.at(na);
            for (std::size_t r = 0; r < B; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < D; ++j) dot += g[r * D + j] * o->values[r * D + j];
                double inv = 1.0 / (*norms)[r];
                for (std::size_t j = 0; j < D; ++j)
                    ga[r * D + j] += (g[r * D + j] - o->values[r * D + j] * dot) * inv;
            }
        };
    });
}

/// Pairwise squared Euclidean distances between the rows of a [m,d] and a
/// [n,d] tensor, computed as |a|^2 + |b|^2 - 2ab and clamped at 0 to suppress
/// negative round-off.
inline Var pairwise_sqdist(const Var& a, const Var& b) {
    detail::check_same_tape("pairwise_sqdist", a, b);
    Tape& t = detail::tape_of(a);
    bool ok = a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[1];
    require_shape(ok, "pairwise_sqdist", a.shape(), b.shape());
    auto na = Tape::node_of(a);
    auto nb = Tape::node_of(b);
    std::size_t m = a.shape()[0], n = b.shape()[0], d = a.shape()[1];
    std::vector<double> sa(m, 0.0), sb(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < d; ++k) sa[i] += na->values[i * d + k] * na->values[i * d + k];
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < d; ++k) sb[j] += nb->values[j * d + k] * nb->values[j * d + k];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k)
                dot += na->values[i * d + k] * nb->values[j * d + k];
            out[i * n + j] = std::max(0.0, sa[i] + sb[j] - 2.0 * dot);
        }
    return detail::emit(t, "pairwise_sqdist", {a, b}, Shape{m, n}, std::move(out),
                        [&](detail::NodePtr o) {
        return [na, nb, o, m, n, d](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            std::vector<double>* ga = na->requires_grad ? &adj.at(na) : nullptr;
            std::vector<double>* gb = nb->requires_grad ? &adj.at(nb) : nullptr;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    double gv = g[i * n + j];
                    if (gv == 0.0 || o->values[i * n + j] == 0.0) continue;
                    for (std::size_t k = 0; k < d; ++k) {
                        double diff = na->values[i * d + k] - nb->values[j * d + k];
                        if (ga) (*ga)[i * d + k] += 2.0 * gv * diff;
                        if (gb) (*gb)[j * d + k] -= 2.0 * gv * diff;
                    }
                }
        };
    });
}

/// Gathers rows of a [N,d] tensor by index; repeated indices accumulate
/// gradient additively.
inline Var gather_rows(const Var& a, const std::vector<std::size_t>& indices) {
    Tape& t = detail::tape_of(a);
    require_shape(a.shape().size() == 2, "gather_rows", a.shape(), Shape{0, 0});
    auto na = Tape::node_of(a);
    std::size_t N = a.shape()[0], d = a.shape()[1];
    for (std::size_t idx : indices)
        if (idx >= N)
            throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of range [0," +
                             std::to_string(N) + ")");
    std::size_t B = indices.size();
    std::vector<double> out(B * d);
    for (std::size_t i = 0; i < B; ++i)
        std::copy_n(na->values.data() + indices[i] * d, d, out.data() + i * d);
    auto idx = std::make_shared<std::vector<std::size_t>>(indices);
    return detail::emit(t, "gather_rows", {a}, Shape{B, d}, std::move(out),
                        [&](detail::NodePtr o) {
        return [na, o, idx, d](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            auto& ga = adj.at(na);
            for (std::size_t i = 0; i < idx->size(); ++i)
                for (std::size_t k = 0; k < d; ++k) ga[(*idx)[i] * d + k] += g[i * d + k];
        };
    });
}

/// Concatenates two tensors of equal rank along `axis`.
inline Var concat(const Var& a, const Var& b, std::size_t axis) {
    detail::check_same_tape("concat", a, b);
    Tape& t = detail::tape_of(a);
    bool ok = a.shape().size() == b.shape().size() && axis < a.shape().size();
    if (ok)
        for (std::size_t i = 0; i < a.shape().size(); ++i)
            if (i != axis && a.shape()[i] != b.shape()[i]) ok = false;
    require_shape(ok, "concat", a.shape(), b.shape());
    auto na = Tape::node_of(a);
    auto nb = Tape::node_of(b);

    Shape out_shape = a.shape();
    out_shape[axis] += b.shape()[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (std::size_t i = axis + 1; i < a.shape().size(); ++i) inner *= a.shape()[i];
    std::size_t wa = a.shape()[axis] * inner, wb = b.shape()[axis] * inner;

    std::vector<double> out(numel(out_shape));
    for (std::size_t r = 0; r < outer; ++r) {
        std::copy_n(na->values.data() + r * wa, wa, out.data() + r * (wa + wb));
        std::copy_n(nb->values.data() + r * wb, wb, out.data() + r * (wa + wb) + wa);
    }
    return detail::emit(t, "concat", {a, b}, std::move(out_shape), std::move(out),
                        [&](detail::NodePtr o) {
        return [na, nb, o, outer, wa, wb](detail::Adjoints& adj) {
            const auto& g = adj.at(o);
            if (na->requires_grad) {
                auto& ga = adj.at(na);
                for (std::size_t r = 0; r < outer; ++r)
                    for (std::size_t i = 0; i < wa; ++i) ga[r * wa + i] += g[r * (wa + wb) + i];
            }
            if (nb->requires_grad) {
                auto& gb = adj.at(nb);
                for (std::size_t r = 0; r < outer; ++r)
                    for (std::size_t i = 0; i < wb; ++i)
                        gb[r * wb + i] += g[r * (wa + wb) + wa + i];
            }
        };
    });
}

/// Affine map: x [B,in] * W [in,out] + bias [out].
inline Var affine(const Var& x, const Var& w, const Var& b) {
    return add(matmul(x, w), b);
}

} // namespace tailforge::ad

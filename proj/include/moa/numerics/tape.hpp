// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over dense row-major matrices.
//
// A Tape owns every intermediate value of one forward pass. Ops are free
// functions taking the tape and input node ids and returning the output id;
// each op that touches a gradient-tracking input records a backward closure.
// Ops are recorded in execution order, so replaying them in reverse is a
// valid topological order for backward().

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "moa/numerics/errors.hpp"

namespace moa {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixXd = Matrix<double>;

/// Finite stand-in for -inf in additive attention masks.
inline constexpr double kMaskSentinel = -1e30;

inline bool is_masked(double additive) { return additive <= kMaskSentinel * 0.5; }

struct NodeId {
    std::size_t index = 0;
    friend bool operator==(NodeId, NodeId) = default;
};

template <typename Scalar>
class Tape {
public:
    using Mat = Matrix<Scalar>;
    using BackwardFn = std::function<void(Tape&, const Mat& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) noexcept = default;
    Tape& operator=(Tape&&) noexcept = default;

    NodeId leaf(Mat value, bool requires_grad) {
        nodes_.push_back({std::move(value), Mat(), requires_grad});
        return NodeId{nodes_.size() - 1};
    }

    NodeId constant(Mat value) { return leaf(std::move(value), false); }

    /// Appends an op output. `backward` is dropped when no input tracks gradients.
    NodeId record(Mat value, std::span<const NodeId> inputs, BackwardFn backward) {
        // x * 0 is 0 for finite x and NaN otherwise; one vectorized pass
        if (!((value.array() * Scalar(0)).sum() == Scalar(0))) {
            throw NonFiniteError("non-finite value produced at tape node " +
                                 std::to_string(nodes_.size()));
        }
        bool tracked = false;
        for (NodeId in : inputs) tracked = tracked || nodes_.at(in.index).requires_grad;
        nodes_.push_back({std::move(value), Mat(), tracked});
        NodeId out{nodes_.size() - 1};
        if (tracked) ops_.push_back({out, std::move(backward)});
        return out;
    }

    const Mat& value(NodeId id) const { return nodes_.at(id.index).value; }
    bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
    bool has_grad(NodeId id) const { return nodes_.at(id.index).grad.size() != 0; }

    /// Gradient of the last backward() loss; zeros if the node was unreachable.
    Mat grad(NodeId id) const {
        const Node& n = nodes_.at(id.index);
        if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    template <typename Derived>
    void accumulate(NodeId id, const Eigen::MatrixBase<Derived>& g) {
        Node& n = nodes_[id.index];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    void backward(NodeId loss) {
        const Node& l = nodes_.at(loss.index);
        if (l.value.rows() != 1 || l.value.cols() != 1) {
            throw ContractError("backward requires a scalar (1x1) loss node");
        }
        for (Node& n : nodes_) n.grad.resize(0, 0);
        if (!l.requires_grad) return;
        nodes_[loss.index].grad = Mat::Ones(1, 1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            if (it->output.index > loss.index) continue;
            const Node& out = nodes_[it->output.index];
            if (out.grad.size() == 0) continue;
            // closures only accumulate into inputs, never the output, and nodes_ is not resized here
            it->backward(*this, out.grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad = false;
    };
    struct Op {
        NodeId output;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::vector<Op> ops_;
};

enum class Transpose { kNone, kRight };

/// a * b, or a * b^T with Transpose::kRight.
template <typename Scalar>
NodeId matmul(Tape<Scalar>& t, NodeId a, NodeId b, Transpose tb = Transpose::kNone) {
    using Mat = typename Tape<Scalar>::Mat;
    const Mat& av = t.value(a);
    const Mat& bv = t.value(b);
    const bool right_t = tb == Transpose::kRight;
    const auto inner_b = right_t ? bv.cols() : bv.rows();
    if (av.cols() != inner_b) {
        throw DimensionError("matmul: inner dimensions " + std::to_string(av.cols()) + " vs " +
                             std::to_string(inner_b));
    }
    Mat out = right_t ? Mat(av * bv.transpose()) : Mat(av * bv);
    const NodeId ins[] = {a, b};
    return t.record(std::move(out), ins, [a, b, right_t](Tape<Scalar>& tp, const Mat& g) {
        if (tp.requires_grad(a)) {
            const Mat& bv2 = tp.value(b);
            if (right_t) {
                tp.accumulate(a, g * bv2);
            } else {
                tp.accumulate(a, g * bv2.transpose());
            }
        }
        if (tp.requires_grad(b)) {
            const Mat& av2 = tp.value(a);
            if (right_t) {
                tp.accumulate(b, g.transpose() * av2);
            } else {
                tp.accumulate(b, av2.transpose() * g);
            }
        }
    });
}

template <typename Scalar>
NodeId add(Tape<Scalar>& t, NodeId a, NodeId b) {
    using Mat = typename Tape<Scalar>::Mat;
    const Mat& av = t.value(a);
    const Mat& bv = t.value(b);
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
        throw DimensionError("add: shape mismatch");
    }
    const NodeId ins[] = {a, b};
    return t.record(Mat(av + bv), ins, [a, b](Tape<Scalar>& tp, const Mat& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

template <typename Scalar>
NodeId scale(Tape<Scalar>& t, NodeId a, Scalar s) {
    using Mat = typename Tape<Scalar>::Mat;
    const NodeId ins[] = {a};
    return t.record(Mat(t.value(a) * s), ins,
                    [a, s](Tape<Scalar>& tp, const Mat& g) { tp.accumulate(a, g * s); });
}

/// Elementwise product.
template <typename Scalar>
NodeId hadamard(Tape<Scalar>& t, NodeId a, NodeId b) {
    using Mat = typename Tape<Scalar>::Mat;
    const Mat& av = t.value(a);
    const Mat& bv = t.value(b);
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
        throw DimensionError("hadamard: shape mismatch");
    }
    const NodeId ins[] = {a, b};
    return t.record(Mat(av.cwiseProduct(bv)), ins, [a, b](Tape<Scalar>& tp, const Mat& g) {
        if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
        if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
    });
}

/// Row softmax of (x + mask). Masked entries (mask <= kMaskSentinel/2) come out as exact zeros.
template <typename Scalar>
Matrix<Scalar> softmax_rows_value(const Matrix<Scalar>& x, const Matrix<Scalar>& mask) {
    if (x.rows() != mask.rows() || x.cols() != mask.cols()) {
        throw DimensionError("softmax_rows: x and mask shapes differ");
    }
    Matrix<Scalar> z = x + mask;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_max = z.rowwise().maxCoeff();
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        if (is_masked(static_cast<double>(row_max(i)))) {
            throw DegenerateRowError("softmax_rows: row " + std::to_string(i) + " is fully masked");
        }
    }
    z.colwise() -= row_max;
    // clamp keeps exp out of the subnormal range; masked entries are then zeroed exactly
    z = (mask.array() <= Scalar(kMaskSentinel * 0.5)).select(Scalar(0), z.array().max(Scalar(-700)).exp()).matrix();
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_sum = z.rowwise().sum().cwiseInverse();
    return inv_sum.asDiagonal() * z;
}

template <typename Scalar>
NodeId softmax_rows(Tape<Scalar>& t, NodeId x, const Matrix<Scalar>& mask) {
    using Mat = typename Tape<Scalar>::Mat;
    Mat out = softmax_rows_value<Scalar>(t.value(x), mask);
    const NodeId ins[] = {x};
    const std::size_t self = t.size();
    return t.record(std::move(out), ins, [x, self](Tape<Scalar>& tp, const Mat& g) {
        const Mat& p = tp.value(NodeId{self});
        // dS = P .* (dA - rowsum(dA .* P)); masked entries have P = 0.
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1> c = g.cwiseProduct(p).rowwise().sum();
        Mat dx = p.cwiseProduct(g - c.replicate(1, g.cols()));
        tp.accumulate(x, dx);
    });
}

/// y = x / rms(x) * gain, row-wise; gain is 1 x d.
template <typename Scalar>
NodeId rms_norm(Tape<Scalar>& t, NodeId x, NodeId gain, Scalar eps = Scalar(1e-6)) {
    using Mat = typename Tape<Scalar>::Mat;
    using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    const Mat& xv = t.value(x);
    const Mat& gv = t.value(gain);
    if (gv.rows() != 1 || gv.cols() != xv.cols()) throw DimensionError("rms_norm: gain shape");
    const Scalar d = static_cast<Scalar>(xv.cols());
    Vec inv_rms = ((xv.array().square().rowwise().sum() / d) + eps).sqrt().inverse().matrix();
    Mat normed = inv_rms.asDiagonal() * xv;
    Mat out = normed.array().rowwise() * gv.row(0).array();
    const NodeId ins[] = {x, gain};
    return t.record(std::move(out), ins,
                    [x, gain, normed = std::move(normed), inv_rms = std::move(inv_rms), d](
                        Tape<Scalar>& tp, const Mat& g) {
                        if (tp.requires_grad(gain)) {
                            tp.accumulate(gain, g.cwiseProduct(normed).colwise().sum());
                        }
                        if (tp.requires_grad(x)) {
                            const Mat& gv2 = tp.value(gain);
                            Mat dn = g.array().rowwise() * gv2.row(0).array();
                            Vec proj = dn.cwiseProduct(normed).rowwise().sum() / d;
                            Mat dx = inv_rms.asDiagonal() * Mat(dn - proj.asDiagonal() * normed);
                            tp.accumulate(x, dx);
                        }
                    });
}

/// Gathers rows of `table` (V x d) at `tokens`.
template <typename Scalar>
NodeId embedding(Tape<Scalar>& t, NodeId table, std::span<const int> tokens) {
    using Mat = typename Tape<Scalar>::Mat;
    const Mat& tv = t.value(table);
    Mat out(static_cast<Eigen::Index>(tokens.size()), tv.cols());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= tv.rows()) {
            throw InputError("embedding: token id " + std::to_string(tokens[i]) + " out of range");
        }
        out.row(static_cast<Eigen::Index>(i)) = tv.row(tokens[i]);
    }
    const NodeId ins[] = {table};
    std::vector<int> ids(tokens.begin(), tokens.end());
    return t.record(std::move(out), ins, [table, ids = std::move(ids)](Tape<Scalar>& tp, const Mat& g) {
        const Mat& tv2 = tp.value(table);
        Mat dt = Mat::Zero(tv2.rows(), tv2.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) dt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
        tp.accumulate(table, dt);
    });
}

/// Mean cross-entropy over rows with active[i] set; row i predicts targets[i].
template <typename Scalar>
NodeId cross_entropy(Tape<Scalar>& t, NodeId logits, std::span<const int> targets,
                     std::span<const bool> active) {
    using Mat = typename Tape<Scalar>::Mat;
    const Mat& lv = t.value(logits);
    if (static_cast<Eigen::Index>(targets.size()) != lv.rows() ||
        static_cast<Eigen::Index>(active.size()) != lv.rows()) {
        throw DimensionError("cross_entropy: targets/active length must equal logits rows");
    }
    std::size_t count = 0;
    for (bool a : active) count += a ? 1 : 0;
    if (count == 0) throw ContractError("cross_entropy: no active positions");
    Mat probs = Mat::Zero(lv.rows(), lv.cols());
    Scalar total = 0;
    for (Eigen::Index i = 0; i < lv.rows(); ++i) {
        if (!active[static_cast<std::size_t>(i)]) continue;
        const int y = targets[static_cast<std::size_t>(i)];
        if (y < 0 || y >= lv.cols()) throw InputError("cross_entropy: target out of range");
        const Scalar m = lv.row(i).maxCoeff();
        auto e = (lv.row(i).array() - m).exp();
        const Scalar z = e.sum();
        probs.row(i) = e / z;
        total += -(lv(i, y) - m - std::log(z));
    }
    const Scalar inv = Scalar(1) / static_cast<Scalar>(count);
    Mat out(1, 1);
    out(0, 0) = total * inv;
    const NodeId ins[] = {logits};
    std::vector<int> ys(targets.begin(), targets.end());
    std::vector<char> act(active.begin(), active.end());
    return t.record(std::move(out), ins,
                    [logits, probs = std::move(probs), ys = std::move(ys), act = std::move(act), inv](
                        Tape<Scalar>& tp, const Mat& g) {
                        Mat d = probs;
                        for (std::size_t i = 0; i < ys.size(); ++i) {
                            if (act[i]) d(static_cast<Eigen::Index>(i), ys[i]) -= 1;
                        }
                        tp.accumulate(logits, d * (g(0, 0) * inv));
                    });
}

/// Rotation angles for rotary position encoding: cos/sin tables of shape n x (dim/2).
template <typename Scalar>
std::pair<Matrix<Scalar>, Matrix<Scalar>> rotary_tables(std::span<const int> positions, Eigen::Index dim,
                                                         double base) {
    const Eigen::Index half = dim / 2;
    Matrix<Scalar> c(static_cast<Eigen::Index>(positions.size()), half);
    Matrix<Scalar> s(c.rows(), half);
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
        for (Eigen::Index k = 0; k < half; ++k) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
            const double angle = static_cast<double>(positions[static_cast<std::size_t>(i)]) * freq;
            c(i, k) = static_cast<Scalar>(std::cos(angle));
            s(i, k) = static_cast<Scalar>(std::sin(angle));
        }
    }
    return {std::move(c), std::move(s)};
}

/// Rotates consecutive pairs (2k, 2k+1) of row i by positions[i] * base^(-2k/dim).
template <typename Scalar>
Matrix<Scalar> apply_rotary(const Matrix<Scalar>& x, const Matrix<Scalar>& cos_t, const Matrix<Scalar>& sin_t,
                            bool inverse = false) {
    Matrix<Scalar> y(x.rows(), x.cols());
    const Scalar sign = inverse ? Scalar(-1) : Scalar(1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index k = 0; k < x.cols() / 2; ++k) {
            const Scalar c = cos_t(i, k);
            const Scalar s = sign * sin_t(i, k);
            const Scalar x0 = x(i, 2 * k);
            const Scalar x1 = x(i, 2 * k + 1);
            y(i, 2 * k) = x0 * c - x1 * s;
            y(i, 2 * k + 1) = x0 * s + x1 * c;
        }
    }
    return y;
}

template <typename Scalar>
NodeId rotary(Tape<Scalar>& t, NodeId x, std::span<const int> positions, double base) {
    using Mat = typename Tape<Scalar>::Mat;
    const Mat& xv = t.value(x);
    if (xv.cols() % 2 != 0) throw DimensionError("rotary: feature dimension must be even");
    if (static_cast<Eigen::Index>(positions.size()) != xv.rows()) {
        throw DimensionError("rotary: one position per row required");
    }
    auto [c, s] = rotary_tables<Scalar>(positions, xv.cols(), base);
    Mat out = apply_rotary<Scalar>(xv, c, s);
    const NodeId ins[] = {x};
    return t.record(std::move(out), ins, [x, c = std::move(c), s = std::move(s)](Tape<Scalar>& tp, const Mat& g) {
        tp.accumulate(x, apply_rotary<Scalar>(g, c, s, /*inverse=*/true));
    });
}

}  // namespace moa

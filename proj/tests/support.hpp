// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit tests.

#pragma once

#include <cmath>
#include <filesystem>
#include <algorithm>
#include <functional>
#include <span>
#include <string>

#include "moa/numerics/tape.hpp"
#include "moa/plan_optimizer.hpp"
#include "moa/toy_model.hpp"
#include "moa/util.hpp"

namespace moa::test {

inline MatrixXd random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
    MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

/// Random row-stochastic vector of length n with every entry in (0, 1).
inline std::vector<double> random_row(Rng& rng, int n) {
    std::vector<double> a(static_cast<std::size_t>(n));
    double s = 0.0;
    for (double& x : a) {
        x = std::exp(2.0 * rng.normal());
        s += x;
    }
    for (double& x : a) x /= s;
    return a;
}

/// Largest relative error between the tape gradient of `loss(x)` and central
/// differences with step `eps`, measured as |g - fd| / max(1, |g|, |fd|).
inline double fd_max_rel_error(const MatrixXd& x0, const std::function<NodeId(Tape<double>&, NodeId)>& loss,
                               double eps = 1e-6) {
    Tape<double> t;
    const NodeId x = t.leaf(x0, true);
    t.backward(loss(t, x));
    const MatrixXd g = t.grad(x);
    auto eval = [&](const MatrixXd& v) {
        Tape<double> u;
        const NodeId y = u.leaf(v, false);
        return u.value(loss(u, y))(0, 0);
    };
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x0.size(); ++i) {
        MatrixXd p = x0, m = x0;
        p.data()[i] += eps;
        m.data()[i] -= eps;
        const double fd = (eval(p) - eval(m)) / (2.0 * eps);
        const double gi = g.data()[i];
        worst = std::max(worst, std::abs(gi - fd) / std::max({1.0, std::abs(gi), std::abs(fd)}));
    }
    return worst;
}

/// sum of all entries as a 1x1 node.
inline NodeId sum_all(Tape<double>& t, NodeId x) {
    const MatrixXd& v = t.value(x);
    const NodeId left = t.constant(MatrixXd::Ones(1, v.rows()));
    const NodeId right = t.constant(MatrixXd::Ones(v.cols(), 1));
    return matmul(t, matmul(t, left, x), right);
}

/// Weighted sum <w, x> as a 1x1 node, so gradients are not all equal.
inline NodeId weighted_sum(Tape<double>& t, NodeId x, const MatrixXd& w) {
    return sum_all(t, hadamard(t, x, t.constant(w)));
}

inline ModelConfig small_config(int layers = 1, int heads = 2, int head_dim = 4, int vocab = 16) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.n_layers = layers;
    c.n_heads_per_layer = heads;
    c.head_dim = head_dim;
    c.d_model = heads * head_dim;
    c.mlp_hidden = 2 * c.d_model;
    c.max_context = 256;
    c.seed = 0;
    return c;
}

inline std::vector<int> random_tokens(Rng& rng, int n, int vocab, int lo = 1) {
    std::vector<int> t(static_cast<std::size_t>(n));
    for (int& x : t) x = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - lo)));
    return t;
}

/// Symmetric relative error |a - b| / max(floor, |a| + |b|).
inline double rel_error(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max(floor, std::abs(a) + std::abs(b));
}

/// Samples `coords` parameter coordinates uniformly over all scalars and
/// compares loss_and_param_grads with central differences of supervised_loss.
inline double model_grad_check(Model model, std::span<const int> tokens, const SupervisionMask& supervision,
                               int coords, std::uint64_t seed, double eps = 1e-6) {
    const ParamGradients g = loss_and_param_grads(model, tokens, supervision);
    std::vector<MatrixXd*> params;
    std::vector<const MatrixXd*> grads;
    model.params.visit([&](const std::string&, MatrixXd& x) { params.push_back(&x); });
    g.grads.visit([&](const std::string&, const MatrixXd& x) { grads.push_back(&x); });
    std::vector<std::size_t> offsets{0};
    for (auto* p : params) offsets.push_back(offsets.back() + static_cast<std::size_t>(p->size()));
    const HeadMasks masks = causal_masks(model.config, tokens);
    Rng rng(seed);
    double worst = 0.0;
    for (int c = 0; c < coords; ++c) {
        const std::size_t flat = rng.below(offsets.back());
        const std::size_t p = static_cast<std::size_t>(
            std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
        double& x = params[p]->data()[flat - offsets[p]];
        const double orig = x;
        x = orig + eps;
        const double lp = supervised_loss(model, tokens, supervision, masks);
        x = orig - eps;
        const double lm = supervised_loss(model, tokens, supervision, masks);
        x = orig;
        worst = std::max(worst, rel_error((lp - lm) / (2.0 * eps), grads[p]->data()[flat - offsets[p]]));
    }
    return worst;
}

/// Synthetic optimizer instance: arbitrary (possibly negative) losses and
/// densities that are whole token counts at each length.
inline OptimizationInstance random_instance(Rng& rng, int layers, int heads, int rules,
                                            const std::vector<int>& lengths, int limit = 2) {
    OptimizationInstance inst;
    RuleLossTable& t = inst.table;
    t.lengths = lengths;
    t.geometry = MaskGeometry{8, 1};
    t.n_layers = layers;
    t.heads_per_layer = heads;
    for (int r = 0; r < rules; ++r) t.rules.push_back(ElasticRule{static_cast<double>(8 * r), 0.0});
    for (int n : lengths) {
        std::vector<double> dens;
        for (int r = 0; r < rules; ++r) dens.push_back(static_cast<double>(1 + rng.below(n)) / n);
        t.density.push_back(dens);
        std::vector<std::vector<double>> loss(static_cast<std::size_t>(layers * heads));
        for (auto& row : loss) {
            for (int r = 0; r < rules; ++r) row.push_back(rng.normal());
        }
        t.loss.push_back(loss);
    }
    inst.layer_rule_limit = limit;
    for (int n : lengths) {
        if (rng.uniform() < 0.7) inst.density_constraints.push_back({n, 0.05 + 0.9 * rng.uniform()});
    }
    return inst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("moa_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace moa::test

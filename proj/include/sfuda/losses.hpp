#pragma once

#include <cmath>
#include <vector>

#include "sfuda/errors.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

// Log clamp shared by every probability-consuming loss.
constexpr double kLogEps = 1e-8;

template <typename S>
inline S clamped_log(S v) {
    return std::log(std::max(v, static_cast<S>(kLogEps)));
}

// KL(p || q) with epsilon-clamped logs.
template <typename S>
S kl_divergence(const VectorX<S>& p, const VectorX<S>& q) {
    if (p.size() != q.size()) throw InputError("kl: dimension mismatch");
    S acc = S(0);
    for (Eigen::Index c = 0; c < p.size(); ++c) {
        if (!std::isfinite(static_cast<double>(p(c))) || !std::isfinite(static_cast<double>(q(c))))
            throw NumericError("kl: non-finite input distribution");
        acc += p(c) * (clamped_log(p(c)) - clamped_log(q(c)));
    }
    return acc;
}

// Sum of KL(p_i || p_j') over the nearest-neighbor posteriors; the
// neighbors are stored snapshots and carry no gradient.
template <typename S>
S smoothness_loss(const VectorX<S>& posterior, const std::vector<VectorX<S>>& neighbor_posteriors) {
    S acc = S(0);
    for (const auto& q : neighbor_posteriors) acc += kl_divergence(posterior, q);
    return acc;
}

// Sum of inner products with the furthest-neighbor posteriors; small values
// mean divergent predictions.
template <typename S>
S far_loss(const VectorX<S>& posterior, const std::vector<VectorX<S>>& far_posteriors) {
    S acc = S(0);
    for (const auto& q : far_posteriors) {
        if (q.size() != posterior.size()) throw InputError("far_loss: dimension mismatch");
        acc += posterior.dot(q);
    }
    return acc;
}

// lambda0 * (1 + 10 * iter/max_iter)^-5
inline double lambda_schedule(int iter, int max_iter, double lambda0) {
    if (max_iter <= 0) throw ConfigError("lambda_schedule: max_iter must be positive");
    if (iter < 0 || iter > max_iter) throw InputError("lambda_schedule: iter out of [0, max_iter]");
    const double progress = static_cast<double>(iter) / static_cast<double>(max_iter);
    return lambda0 * std::pow(1.0 + 10.0 * progress, -5.0);
}

// d(loss)/d(logits) for a loss expressed through d(loss)/d(posterior) v:
// the softmax Jacobian-vector product p .* (v - p.v).
template <typename S>
VectorX<S> softmax_vjp(const VectorX<S>& posterior, const VectorX<S>& dposterior) {
    const S inner = posterior.dot(dposterior);
    return posterior.array() * (dposterior.array() - inner);
}

// Gradient of smoothness_loss w.r.t. the query logits.
template <typename S>
VectorX<S> smoothness_loss_dlogits(const VectorX<S>& posterior,
                                   const std::vector<VectorX<S>>& neighbor_posteriors) {
    VectorX<S> v = VectorX<S>::Zero(posterior.size());
    for (const auto& q : neighbor_posteriors)
        for (Eigen::Index c = 0; c < posterior.size(); ++c)
            v(c) += clamped_log(posterior(c)) - clamped_log(q(c)) + S(1);
    return softmax_vjp(posterior, v);
}

// Gradient of far_loss w.r.t. the query logits.
template <typename S>
VectorX<S> far_loss_dlogits(const VectorX<S>& posterior, const std::vector<VectorX<S>>& far_posteriors) {
    VectorX<S> v = VectorX<S>::Zero(posterior.size());
    for (const auto& q : far_posteriors) v += q;
    return softmax_vjp(posterior, v);
}

// Cross-entropy against a one-hot target, from the posterior row.
template <typename S>
S cross_entropy(const VectorX<S>& posterior, int target) {
    if (target < 0 || target >= posterior.size()) throw InputError("cross_entropy: target out of range");
    return -clamped_log(posterior(target));
}

// d(cross_entropy)/d(logits) = posterior - onehot(target).
template <typename S>
VectorX<S> cross_entropy_dlogits(const VectorX<S>& posterior, int target) {
    VectorX<S> d = posterior;
    d(target) -= S(1);
    return d;
}

template <typename S>
double entropy(const VectorX<S>& p) {
    double acc = 0.0;
    for (Eigen::Index c = 0; c < p.size(); ++c) {
        const double v = static_cast<double>(p(c));
        if (v > 0) acc -= v * std::log(v);
    }
    return acc;
}

}  // namespace sfuda

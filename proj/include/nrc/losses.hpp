#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "nrc/math.hpp"

namespace nrc {

// Term toggles for the ablation grid. use_affinity off means every neighbor,
// nearest or expanded, is weighted 1 instead of {1, r} / expanded_r.
struct LossConfig {
    bool use_neighbor = true;
    bool use_expanded = true;
    bool use_self = true;
    bool use_div = true;
    bool use_affinity = true;
    double expanded_r = 0.1;  // affinity of expanded neighbors; kept at 0.1
                              // even when the nRNN affinity r is swept
};

struct LossBreakdown {
    double l_n = 0.0;
    double l_e = 0.0;
    double l_self = 0.0;
    double l_div = 0.0;
    double total = 0.0;
    Matrix grad_logits;  // batch x C, rows sum to zero
};

// -(1/n) sum_i sum_k w_ik S_k^T p_i. Bank scores are constants; the gradient
// flows only through p_i. neighbors[b] and weights[b] describe batch row b.
inline double loss_neighbor(const Matrix& p_batch, const Matrix& scores,
                            const std::vector<std::vector<int>>& neighbors,
                            const std::vector<std::vector<double>>& weights,
                            Matrix* grad_p) {
    const std::size_t n = p_batch.rows();
    if (neighbors.size() != n || weights.size() != n)
        throw std::invalid_argument("loss_neighbor: per-sample list count mismatch");
    double loss = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
        if (neighbors[b].empty())
            throw std::invalid_argument("loss_neighbor: empty neighbor list for batch row " +
                                        std::to_string(b));
        if (neighbors[b].size() != weights[b].size())
            throw std::invalid_argument("loss_neighbor: weight count mismatch");
        for (std::size_t j = 0; j < neighbors[b].size(); ++j) {
            const auto s = scores.row(neighbors[b][j]);
            const double w = weights[b][j];
            loss -= w * dot(s, p_batch.row(b)) / static_cast<double>(n);
            if (grad_p)
                for (std::size_t cidx = 0; cidx < s.size(); ++cidx)
                    grad_p->at(b, cidx) -= w * s[cidx] / static_cast<double>(n);
        }
    }
    return loss;
}

// -(1/n) sum_i sum_{m in E_i} r S_m^T p_i. Duplicate members contribute once
// per occurrence.
inline double loss_expanded(const Matrix& p_batch, const Matrix& scores,
                            const std::vector<std::vector<int>>& expanded, double r,
                            Matrix* grad_p) {
    const std::size_t n = p_batch.rows();
    if (expanded.size() != n)
        throw std::invalid_argument("loss_expanded: per-sample list count mismatch");
    double loss = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
        for (int midx : expanded[b]) {
            const auto s = scores.row(midx);
            loss -= r * dot(s, p_batch.row(b)) / static_cast<double>(n);
            if (grad_p)
                for (std::size_t cidx = 0; cidx < s.size(); ++cidx)
                    grad_p->at(b, cidx) -= r * s[cidx] / static_cast<double>(n);
        }
    }
    return loss;
}

// -(1/n) sum_i S_i^T p_i with S_i the stored (constant) score of the sample
// itself, numerically equal to p_i right after the bank update. Gradient is
// -S_i/n, not -2 p_i/n: S_i is a constant.
inline double loss_self(const Matrix& p_batch, const Matrix& self_scores, Matrix* grad_p) {
    const std::size_t n = p_batch.rows();
    if (self_scores.rows() != n || self_scores.cols() != p_batch.cols())
        throw std::invalid_argument("loss_self: score shape mismatch");
    double loss = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
        loss -= dot(self_scores.row(b), p_batch.row(b)) / static_cast<double>(n);
        if (grad_p)
            for (std::size_t cidx = 0; cidx < p_batch.cols(); ++cidx)
                grad_p->at(b, cidx) -= self_scores.at(b, cidx) / static_cast<double>(n);
    }
    return loss;
}

// KL(mean prediction || uniform). Log arguments are floored at 1e-12 so
// one-hot means stay finite.
inline double loss_diversity(const Matrix& p_batch, Matrix* grad_p) {
    const std::size_t n = p_batch.rows();
    const std::size_t c = p_batch.cols();
    if (n == 0) throw std::invalid_argument("loss_diversity: empty batch");
    Vec mean(c, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < c; ++j) mean[j] += p_batch.at(b, j) / static_cast<double>(n);
    const double q = 1.0 / static_cast<double>(c);
    double loss = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        const double lg = std::log(std::max(mean[j], 1e-12) / q);
        loss += mean[j] * lg;
        if (grad_p) {
            const double g = (lg + 1.0) / static_cast<double>(n);
            for (std::size_t b = 0; b < n; ++b) grad_p->at(b, j) += g;
        }
    }
    return loss;
}

// d(loss)/d(logits) from d(loss)/d(p) through the softmax Jacobian:
// grad_logit = p .* (g - (g . p)).
inline Matrix chain_through_softmax(const Matrix& p_batch, const Matrix& grad_p) {
    Matrix out(p_batch.rows(), p_batch.cols());
    for (std::size_t b = 0; b < p_batch.rows(); ++b) {
        const double gp = dot(grad_p.row(b), p_batch.row(b));
        for (std::size_t j = 0; j < p_batch.cols(); ++j)
            out.at(b, j) = p_batch.at(b, j) * (grad_p.at(b, j) - gp);
    }
    return out;
}

// Unit-weight sum of the enabled terms plus the logit gradient. weights must
// already reflect use_affinity (the caller passes all-ones when it is off).
inline LossBreakdown total_loss(const Matrix& p_batch, const Matrix& scores,
                                const std::vector<std::vector<int>>& neighbors,
                                const std::vector<std::vector<double>>& weights,
                                const std::vector<std::vector<int>>& expanded,
                                const Matrix& self_scores, const LossConfig& cfg) {
    LossBreakdown out;
    Matrix grad_p(p_batch.rows(), p_batch.cols());
    if (cfg.use_neighbor) out.l_n = loss_neighbor(p_batch, scores, neighbors, weights, &grad_p);
    if (cfg.use_expanded) {
        const double r_e = cfg.use_affinity ? cfg.expanded_r : 1.0;
        out.l_e = loss_expanded(p_batch, scores, expanded, r_e, &grad_p);
    }
    if (cfg.use_self) out.l_self = loss_self(p_batch, self_scores, &grad_p);
    if (cfg.use_div) out.l_div = loss_diversity(p_batch, &grad_p);
    out.total = out.l_n + out.l_e + out.l_self + out.l_div;
    out.grad_logits = chain_through_softmax(p_batch, grad_p);
    return out;
}

}  // namespace nrc

// Independent reference implementations used only by the tests. These stay
// deliberately naive (selection scans, raw loops) so they share no code path
// with the library implementations they check.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "nrc/math.hpp"

namespace oracle {

inline double cosine(const nrc::Matrix& feats, std::size_t a, std::size_t b) {
    double dp = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < feats.cols(); ++j) {
        dp += feats.at(a, j) * feats.at(b, j);
        na += feats.at(a, j) * feats.at(a, j);
        nb += feats.at(b, j) * feats.at(b, j);
    }
    return dp / (std::sqrt(na) * std::sqrt(nb));
}

// O(n^2) brute-force k nearest rows by cosine, query excluded, ties broken by
// ascending index. Selection by repeated max scan, no sorting.
inline std::vector<int> knn_bruteforce(const nrc::Matrix& feats, std::size_t query, int k) {
    const std::size_t n = feats.rows();
    std::vector<bool> taken(n, false);
    taken[query] = true;
    std::vector<int> out;
    for (int round = 0; round < k; ++round) {
        int best = -1;
        double best_cos = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (taken[j]) continue;
            const double c = cosine(feats, query, j);
            if (best < 0 || c > best_cos) {
                best = static_cast<int>(j);
                best_cos = c;
            }
        }
        taken[best] = true;
        out.push_back(best);
    }
    return out;
}

// Pooled expanded neighborhood per the definition: for each of the query's K
// nearest rows, take that row's M nearest rows, drop the query, and keep or
// collapse duplicates.
inline std::vector<int> expanded_bruteforce(const nrc::Matrix& feats, std::size_t query,
                                            int k, int m, bool dedup) {
    std::vector<int> out;
    for (int j : knn_bruteforce(feats, query, k)) {
        for (int q : knn_bruteforce(feats, static_cast<std::size_t>(j), m)) {
            if (q == static_cast<int>(query)) continue;
            if (dedup) {
                bool seen = false;
                for (int prev : out)
                    if (prev == q) seen = true;
                if (seen) continue;
            }
            out.push_back(q);
        }
    }
    return out;
}

// Central finite differences of a scalar function of the logits.
inline nrc::Matrix fd_grad_logits(const std::function<double(const nrc::Matrix&)>& f,
                                  nrc::Matrix logits, double eps = 1e-5) {
    nrc::Matrix g(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            const double saved = logits.at(i, j);
            logits.at(i, j) = saved + eps;
            const double hi = f(logits);
            logits.at(i, j) = saved - eps;
            const double lo = f(logits);
            logits.at(i, j) = saved;
            g.at(i, j) = (hi - lo) / (2.0 * eps);
        }
    }
    return g;
}

// max over entries of |a-n| / max(1, |a|, |n|)
inline double max_rel_err(const nrc::Matrix& a, const nrc::Matrix& n) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double av = a.at(i, j), nv = n.at(i, j);
            const double denom = std::max({1.0, std::abs(av), std::abs(nv)});
            worst = std::max(worst, std::abs(av - nv) / denom);
        }
    return worst;
}

}  // namespace oracle

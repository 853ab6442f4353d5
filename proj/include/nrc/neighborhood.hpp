#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "nrc/math.hpp"
#include "nrc/memory_bank.hpp"

namespace nrc {

// K: nearest-neighbor count; M: count used both for the reciprocity test and
// for expansion (K and M may differ). r: affinity assigned to non-reciprocal
// neighbors. dedup_expanded collapses the expanded multiset to a set.
struct AffinityConfig {
    int k = 3;
    int m = 2;
    double r = 0.1;
    bool dedup_expanded = false;
};

inline void validate(const AffinityConfig& c) {
    if (c.k < 1) throw std::invalid_argument("AffinityConfig: K must be >= 1");
    if (c.m < 1) throw std::invalid_argument("AffinityConfig: M must be >= 1");
    if (!std::isfinite(c.r)) throw std::invalid_argument("AffinityConfig: r must be finite");
}

// Per query row: the K nearest rows by cosine (ego excluded, ties broken by
// ascending index), their cosines, their affinity in {1, r}, and the M
// nearest rows kept for reciprocity tests and expansion.
struct NeighborTable {
    std::vector<std::vector<int>> k_neighbors;
    std::vector<std::vector<double>> k_cosines;
    std::vector<std::vector<double>> affinities;
    std::vector<std::vector<int>> m_neighbors;

    std::size_t size() const { return k_neighbors.size(); }
};

// Pooled M-neighbors of each of the K neighbors, per query row. Ego
// occurrences are removed; duplicates are retained unless the table was
// built with dedup_expanded.
struct ExpandedTable {
    std::vector<std::vector<int>> members;

    std::size_t size() const { return members.size(); }
};

namespace detail {

// The top_count candidate rows for a query, ordered by descending cosine
// then ascending index. Rows sharing the query's sample id are excluded;
// with the identity id map that is just the query row itself.
inline std::vector<std::pair<double, int>> ranked_candidates(
    const Matrix& features, std::span<const double> inv_norms,
    std::span<const int> ids, std::size_t query,
    std::size_t top_count = static_cast<std::size_t>(-1)) {
    std::vector<std::pair<double, int>> cand;
    cand.reserve(features.rows() - 1);
    const auto q = features.row(query);
    const double qn = inv_norms[query];
    for (std::size_t j = 0; j < features.rows(); ++j) {
        if (ids[j] == ids[query]) continue;
        cand.emplace_back(dot(q, features.row(j)) * qn * inv_norms[j],
                          static_cast<int>(j));
    }
    const auto before = [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    };
    if (top_count < cand.size()) {
        std::partial_sort(cand.begin(), cand.begin() + top_count, cand.end(), before);
        cand.resize(top_count);
    } else {
        std::sort(cand.begin(), cand.end(), before);
    }
    return cand;
}

inline std::vector<double> inverse_norms(const Matrix& features) {
    std::vector<double> inv(features.rows());
    for (std::size_t i = 0; i < features.rows(); ++i) {
        const double n = l2_norm(features.row(i));
        if (n == 0.0)
            throw std::invalid_argument("neighborhood: zero-norm feature row " +
                                        std::to_string(i));
        inv[i] = 1.0 / n;
    }
    return inv;
}

inline std::vector<int> identity_ids(std::size_t n) {
    std::vector<int> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(i);
    return ids;
}

}  // namespace detail

// The K bank rows most cosine-similar to the query row, query excluded.
inline std::vector<int> knn(const Banks& bank, std::size_t query_index, int k) {
    const Matrix& f = bank.features();
    if (query_index >= f.rows()) throw std::out_of_range("knn: query index out of range");
    if (k < 1 || static_cast<std::size_t>(k) >= f.rows())
        throw std::invalid_argument("knn: K must satisfy 1 <= K < bank size");
    const auto inv = detail::inverse_norms(f);
    const auto ids = detail::identity_ids(f.rows());
    const auto cand =
        detail::ranked_candidates(f, inv, ids, query_index, static_cast<std::size_t>(k));
    std::vector<int> out(k);
    for (int i = 0; i < k; ++i) out[i] = cand[i].second;
    return out;
}

// N_K, N_M and affinities for every row. A neighbor j of i gets affinity 1
// when i is in turn among j's M nearest rows, r otherwise.
inline NeighborTable build_neighbor_table(const Matrix& features, std::span<const int> ids,
                                          const AffinityConfig& cfg) {
    validate(cfg);
    const std::size_t n = features.rows();
    if (ids.size() != n)
        throw std::invalid_argument("build_neighbor_table: id count mismatch");
    const std::size_t need = static_cast<std::size_t>(std::max(cfg.k, cfg.m));
    const auto inv = detail::inverse_norms(features);

    NeighborTable t;
    t.k_neighbors.resize(n);
    t.k_cosines.resize(n);
    t.affinities.resize(n);
    t.m_neighbors.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto cand = detail::ranked_candidates(features, inv, ids, i, need);
        if (cand.size() < need)
            throw std::invalid_argument(
                "build_neighbor_table: need " + std::to_string(need) +
                " candidates for row " + std::to_string(i) + ", have " +
                std::to_string(cand.size()));
        t.k_neighbors[i].reserve(cfg.k);
        t.k_cosines[i].reserve(cfg.k);
        for (int j = 0; j < cfg.k; ++j) {
            t.k_neighbors[i].push_back(cand[j].second);
            t.k_cosines[i].push_back(cand[j].first);
        }
        t.m_neighbors[i].reserve(cfg.m);
        for (int j = 0; j < cfg.m; ++j) t.m_neighbors[i].push_back(cand[j].second);
    }
    for (std::size_t i = 0; i < n; ++i) {
        t.affinities[i].reserve(cfg.k);
        for (int j : t.k_neighbors[i]) {
            bool reciprocal = false;
            for (int back : t.m_neighbors[j])
                if (ids[back] == ids[i]) {
                    reciprocal = true;
                    break;
                }
            t.affinities[i].push_back(reciprocal ? 1.0 : cfg.r);
        }
    }
    return t;
}

inline NeighborTable build_neighbor_table(const Banks& bank, const AffinityConfig& cfg) {
    const auto ids = detail::identity_ids(bank.size());
    return build_neighbor_table(bank.features(), ids, cfg);
}

// Concatenation over j in N_K(i) of N_M(j), with every occurrence of i
// removed. Duplicates are kept; they act as a larger affinity for members
// that several neighbors agree on. dedup_expanded collapses them instead.
inline ExpandedTable build_expanded_table(const NeighborTable& table,
                                          std::span<const int> ids,
                                          const AffinityConfig& cfg) {
    const std::size_t n = table.size();
    if (ids.size() != n)
        throw std::invalid_argument("build_expanded_table: id count mismatch");
    ExpandedTable e;
    e.members.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& out = e.members[i];
        out.reserve(table.k_neighbors[i].size() * cfg.m);
        for (int j : table.k_neighbors[i]) {
            for (int q : table.m_neighbors[j]) {
                if (ids[q] == ids[i]) continue;  // ego never supervises itself here
                if (cfg.dedup_expanded) {
                    bool seen = false;
                    for (int prev : out)
                        if (ids[prev] == ids[q]) {
                            seen = true;
                            break;
                        }
                    if (seen) continue;
                }
                out.push_back(q);
            }
        }
    }
    return e;
}

inline ExpandedTable build_expanded_table(const Banks& bank, const NeighborTable& table,
                                          const AffinityConfig& cfg) {
    if (bank.size() != table.size())
        throw std::invalid_argument("build_expanded_table: table/bank size mismatch");
    const auto ids = detail::identity_ids(bank.size());
    return build_expanded_table(table, ids, cfg);
}

}  // namespace nrc

#pragma once

#include <cstddef>
#include <deque>
#include <span>
#include <stdexcept>
#include <vector>

#include "nrc/math.hpp"
#include "nrc/model.hpp"

namespace nrc {

// Row-indexed stores over the whole target set: features() row i holds the
// unit-normalized embedding of sample i, scores() row i the matching
// prediction. Indexes are shared with the dataset.
class Banks {
public:
    Banks() = default;
    Banks(std::size_t n, std::size_t feat_dim, std::size_t n_classes)
        : features_(n, feat_dim), scores_(n, n_classes) {}

    std::size_t size() const { return features_.rows(); }
    const Matrix& features() const { return features_; }
    const Matrix& scores() const { return scores_; }

    // Replaces the rows named by indices with current-model outputs. Stored
    // values are plain numbers; nothing flows back through them.
    void update(std::span<const std::size_t> indices, const Matrix& z_batch,
                const Matrix& p_batch) {
        if (indices.size() != z_batch.rows() || indices.size() != p_batch.rows())
            throw std::invalid_argument("Banks::update: batch row count mismatch");
        if (z_batch.cols() != features_.cols() || p_batch.cols() != scores_.cols())
            throw std::invalid_argument("Banks::update: width mismatch");
        for (std::size_t b = 0; b < indices.size(); ++b) {
            const std::size_t i = indices[b];
            if (i >= size())
                throw std::out_of_range("Banks::update: index " + std::to_string(i) +
                                        " out of range");
            const Vec zn = l2_normalize(z_batch.row(b));
            std::copy(zn.begin(), zn.end(), features_.row_mut(i).begin());
            std::copy(p_batch.row(b).begin(), p_batch.row(b).end(),
                      scores_.row_mut(i).begin());
        }
    }

private:
    Matrix features_;
    Matrix scores_;
};

// One full evaluation pass over the target set, before the adaptation loop
// starts; row i holds normalized z_i and p_i for sample i.
inline Banks init_banks(const MlpModel& model, const Matrix& target_features) {
    if (target_features.rows() == 0)
        throw std::invalid_argument("init_banks: empty dataset");
    const ForwardResult r = forward(model, target_features);
    Banks banks(target_features.rows(), model.feature_dim(), model.n_classes());
    std::vector<std::size_t> all(target_features.rows());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    banks.update(all, r.z, r.p);
    return banks;
}

// Fixed-capacity variant: keeps only the most recent rows, oldest evicted
// first. Rows carry their sample id so retrieval can exclude self-matches.
class FifoBank {
public:
    explicit FifoBank(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw std::invalid_argument("FifoBank: zero capacity");
    }

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return ids_.size(); }
    const std::vector<int>& ids() const { return ids_; }
    std::span<const double> feature(std::size_t row) const { return features_[row]; }
    std::span<const double> score(std::size_t row) const { return scores_[row]; }

    void push(std::span<const std::size_t> sample_ids, const Matrix& z_batch,
              const Matrix& p_batch) {
        if (sample_ids.size() != z_batch.rows() || sample_ids.size() != p_batch.rows())
            throw std::invalid_argument("FifoBank::push: batch row count mismatch");
        if (sample_ids.size() > capacity_)
            throw std::invalid_argument("FifoBank::push: batch larger than capacity");
        for (std::size_t b = 0; b < sample_ids.size(); ++b) {
            features_.push_back(l2_normalize(z_batch.row(b)));
            scores_.push_back(Vec(p_batch.row(b).begin(), p_batch.row(b).end()));
            ids_.push_back(static_cast<int>(sample_ids[b]));
        }
        while (ids_.size() > capacity_) {
            features_.pop_front();
            scores_.pop_front();
            ids_.erase(ids_.begin());
        }
    }

    Matrix feature_matrix() const {
        if (features_.empty()) return Matrix();
        Matrix m(features_.size(), features_.front().size());
        for (std::size_t i = 0; i < features_.size(); ++i)
            std::copy(features_[i].begin(), features_[i].end(), m.row_mut(i).begin());
        return m;
    }

    Matrix score_matrix() const {
        if (scores_.empty()) return Matrix();
        Matrix m(scores_.size(), scores_.front().size());
        for (std::size_t i = 0; i < scores_.size(); ++i)
            std::copy(scores_[i].begin(), scores_[i].end(), m.row_mut(i).begin());
        return m;
    }

private:
    std::size_t capacity_;
    std::deque<Vec> features_;
    std::deque<Vec> scores_;
    std::vector<int> ids_;
};

}  // namespace nrc

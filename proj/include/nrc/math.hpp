#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nrc {

using Vec = std::vector<double>;

// Dense row-major matrix. All numeric work in this library is double
// precision; accumulation headroom matters for the finite-difference
// gradient checks.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw std::invalid_argument("Matrix: rows*cols != data length");
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_.data() + r * cols_, cols_);
    }
    std::span<double> row_mut(std::size_t r) {
        return std::span<double>(data_.data() + r * cols_, cols_);
    }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline void ensure_finite(std::span<const double> v, const char* what) {
    if (!all_finite(v))
        throw std::invalid_argument(std::string(what) + ": non-finite entry");
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> v) {
    return std::sqrt(dot(v, v));
}

// Unit-normalizes v. A zero-norm input signals a degenerate feature and is
// rejected rather than silently propagated.
inline Vec l2_normalize(std::span<const double> v) {
    ensure_finite(v, "l2_normalize");
    const double n = l2_norm(v);
    if (n == 0.0)
        throw std::invalid_argument("l2_normalize: zero-norm vector");
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
    ensure_finite(a, "cosine_sim");
    ensure_finite(b, "cosine_sim");
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0)
        throw std::invalid_argument("cosine_sim: zero-norm operand");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// Max-shifted softmax: logits from an untrained classifier can be large, so
// exponentials are taken relative to the row maximum.
inline Vec softmax(std::span<const double> logits) {
    ensure_finite(logits, "softmax");
    if (logits.empty())
        throw std::invalid_argument("softmax: empty input");
    const double m = *std::max_element(logits.begin(), logits.end());
    Vec out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        sum += out[i];
    }
    for (double& x : out) x /= sum;
    return out;
}

// Row-wise softmax of a logits matrix.
inline Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        Vec p = softmax(logits.row(i));
        std::copy(p.begin(), p.end(), out.row_mut(i).begin());
    }
    return out;
}

inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(
        std::max_element(v.begin(), v.end()) - v.begin());
}

// C = A * B^T,  A: n x k,  B: m x k  ->  n x m
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j)
            c.at(i, j) = dot(a.row(i), b.row(j));
    return c;
}

// C = A^T * B,  A: n x k,  B: n x m  ->  k x m
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw std::invalid_argument("matmul_tn: row count mismatch");
    Matrix c(a.cols(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto ar = a.row(i);
        const auto br = b.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double av = ar[k];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c.at(k, j) += av * br[j];
        }
    }
    return c;
}

// C = A * B,  A: n x k,  B: k x m  ->  n x m
inline Matrix matmul_nn(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul_nn: inner dimension mismatch");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto ar = a.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double av = ar[k];
            if (av == 0.0) continue;
            const auto br = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) c.at(i, j) += av * br[j];
        }
    }
    return c;
}

}  // namespace nrc

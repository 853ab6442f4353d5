#pragma once

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nrc/math.hpp"
#include "nrc/rng.hpp"

namespace nrc {

enum class Domain { source, target };

// Labeled feature set. The adaptation engine never sees this type directly;
// it receives the label-stripped UnlabeledView below.
struct Dataset {
    Matrix features;          // n x d
    std::vector<int> labels;  // class index in [0, C); empty when unlabeled
    bool labeled = false;
    Domain domain = Domain::source;

    std::size_t size() const { return features.rows(); }
    std::size_t dim() const { return features.cols(); }

    int label(std::size_t i) const {
        if (!labeled)
            throw std::logic_error("Dataset::label: dataset is unlabeled");
        return labels[i];
    }

    int num_classes() const {
        int c = 0;
        for (int l : labels) c = std::max(c, l + 1);
        return c;
    }
};

// Feature-only view handed to the adaptation loop. Labels are structurally
// out of reach: the view holds no label storage and no label accessor.
struct UnlabeledView {
    const Matrix* features = nullptr;

    std::size_t size() const { return features->rows(); }
    std::size_t dim() const { return features->cols(); }
    std::span<const double> feature(std::size_t i) const { return features->row(i); }
};

inline UnlabeledView unlabeled_view(const Dataset& d) { return UnlabeledView{&d.features}; }

// Synthetic covariate-shift recipe: Gaussian class blobs, with the target
// domain drawn from the same blobs pushed through rotate -> scale -> translate.
struct ShiftSpec {
    int n_classes = 3;
    int dim = 2;
    int samples_per_class = 64;
    double class_separation = 4.0;  // pairwise centroid distance, feature units
    double rotation_angle = 0.0;    // radians, applied in the (0,1) plane
    Vec translation;                // defaults to zero
    double scale = 1.0;
    double noise_sigma = 1.0;
    double layout_offset = 0.0;     // constellation center at (offset, 0); a
                                    // nonzero offset makes a rotation displace
                                    // the whole constellation
    Vec label_prior;                // defaults to uniform
    std::uint64_t seed = 0;
};

namespace detail {

inline void validate(const ShiftSpec& s) {
    if (s.n_classes < 1) throw std::invalid_argument("ShiftSpec: n_classes must be >= 1");
    if (s.dim < 1) throw std::invalid_argument("ShiftSpec: dim must be >= 1");
    if (s.samples_per_class < 1) throw std::invalid_argument("ShiftSpec: samples_per_class must be >= 1");
    if (!(s.scale > 0.0)) throw std::invalid_argument("ShiftSpec: scale must be > 0");
    if (s.noise_sigma < 0.0) throw std::invalid_argument("ShiftSpec: noise_sigma must be >= 0");
    if (s.rotation_angle != 0.0 && s.dim < 2)
        throw std::invalid_argument("ShiftSpec: rotation needs dim >= 2");
    if (!s.translation.empty() && s.translation.size() != static_cast<std::size_t>(s.dim))
        throw std::invalid_argument("ShiftSpec: translation length != dim");
    if (!s.label_prior.empty()) {
        if (s.label_prior.size() != static_cast<std::size_t>(s.n_classes))
            throw std::invalid_argument("ShiftSpec: label_prior length != n_classes");
        double sum = 0.0;
        for (double w : s.label_prior) {
            if (w < 0.0) throw std::invalid_argument("ShiftSpec: negative label_prior weight");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("ShiftSpec: label_prior must sum to 1");
    }
}

// Class centroids around (layout_offset, 0): two classes sit on a line,
// three or more sit on a circle in the (0,1) plane with adjacent chord
// length equal to class_separation.
inline std::vector<Vec> centroids(const ShiftSpec& s) {
    std::vector<Vec> c(s.n_classes, Vec(s.dim, 0.0));
    for (auto& v : c) v[0] = s.layout_offset;
    if (s.n_classes == 1) return c;
    if (s.n_classes == 2 || s.dim < 2) {
        for (int k = 0; k < s.n_classes; ++k)
            c[k][0] += (k - (s.n_classes - 1) / 2.0) * s.class_separation;
        return c;
    }
    const double radius =
        s.class_separation / (2.0 * std::sin(std::numbers::pi / s.n_classes));
    for (int k = 0; k < s.n_classes; ++k) {
        const double phi = 2.0 * std::numbers::pi * k / s.n_classes;
        c[k][0] += radius * std::cos(phi);
        c[k][1] += radius * std::sin(phi);
    }
    return c;
}

// Largest-remainder apportionment of the total sample count over label_prior.
inline std::vector<int> class_counts(const ShiftSpec& s) {
    const int total = s.samples_per_class * s.n_classes;
    if (s.label_prior.empty()) return std::vector<int>(s.n_classes, s.samples_per_class);
    std::vector<int> counts(s.n_classes);
    std::vector<std::pair<double, int>> rem(s.n_classes);
    int assigned = 0;
    for (int k = 0; k < s.n_classes; ++k) {
        const double exact = total * s.label_prior[k];
        counts[k] = static_cast<int>(std::floor(exact));
        rem[k] = {exact - counts[k], k};
        assigned += counts[k];
    }
    std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (int i = 0; assigned < total; ++i, ++assigned) counts[rem[i].second] += 1;
    return counts;
}

inline Vec apply_shift(const ShiftSpec& s, std::span<const double> x) {
    Vec y(x.begin(), x.end());
    if (s.rotation_angle != 0.0) {
        const double c = std::cos(s.rotation_angle);
        const double sn = std::sin(s.rotation_angle);
        const double x0 = y[0], x1 = y[1];
        y[0] = c * x0 - sn * x1;
        y[1] = sn * x0 + c * x1;
    }
    for (double& v : y) v *= s.scale;
    if (!s.translation.empty())
        for (int k = 0; k < s.dim; ++k) y[k] += s.translation[k];
    return y;
}

inline Dataset sample_domain(const ShiftSpec& s, Rng& rng, Domain domain) {
    const auto cents = centroids(s);
    const auto counts = class_counts(s);
    int total = 0;
    for (int n : counts) total += n;

    Dataset d;
    d.features = Matrix(total, s.dim);
    d.labels.reserve(total);
    d.labeled = true;
    d.domain = domain;

    std::size_t row = 0;
    for (int k = 0; k < s.n_classes; ++k) {
        for (int i = 0; i < counts[k]; ++i, ++row) {
            Vec x(s.dim);
            for (int j = 0; j < s.dim; ++j)
                x[j] = cents[k][j] + gaussian(rng, 0.0, s.noise_sigma);
            if (domain == Domain::target) x = apply_shift(s, x);
            std::copy(x.begin(), x.end(), d.features.row_mut(row).begin());
            d.labels.push_back(k);
        }
    }
    return d;
}

}  // namespace detail

// Source blobs plus a transformed fresh draw from the same blobs as the
// target. Class identity is preserved per point; target labels are kept in
// the Dataset for evaluation only.
inline std::pair<Dataset, Dataset> generate_pair(const ShiftSpec& spec) {
    detail::validate(spec);
    Rng rng(mix_seed(spec.seed, seed_stream::data));
    Dataset source = detail::sample_domain(spec, rng, Domain::source);
    Dataset target = detail::sample_domain(spec, rng, Domain::target);
    return {std::move(source), std::move(target)};
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    cells.push_back(cur);
    return cells;
}

inline void parse_error(const std::string& path, std::size_t line_no, const std::string& what) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace detail

// CSV schema: header "f0,...,f{d-1},label"; one row per sample; label is an
// integer class index, or empty in every row for an unlabeled set.
inline void save_csv(const Dataset& d, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_csv: cannot open " + path);
    for (std::size_t j = 0; j < d.dim(); ++j) out << "f" << j << ",";
    out << "label\n";
    char buf[64];
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (std::size_t j = 0; j < d.dim(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", d.features.at(i, j));
            out << buf << ",";
        }
        if (d.labeled) out << d.labels[i];
        out << "\n";
    }
    if (!out) throw std::runtime_error("save_csv: write failed for " + path);
}

// expected_classes > 0 turns on label range validation against a known C.
inline Dataset load_csv(const std::string& path, int expected_classes = 0) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_csv: cannot open " + path);

    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("load_csv: " + path + " is empty");
    const auto header = detail::split_csv_line(line);
    if (header.size() < 2 || header.back() != "label")
        detail::parse_error(path, 1, "header must be f0,...,label");
    const std::size_t dim = header.size() - 1;

    std::vector<double> values;
    std::vector<int> labels;
    bool any_label = false, any_unlabeled = false;
    std::size_t n = 0, line_no = 1;

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != dim + 1)
            detail::parse_error(path, line_no,
                                "expected " + std::to_string(dim + 1) + " cells, got " +
                                    std::to_string(cells.size()));
        for (std::size_t j = 0; j < dim; ++j) {
            const std::string& cell = cells[j];
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (cell.empty() || end != cell.c_str() + cell.size() || !std::isfinite(v))
                detail::parse_error(path, line_no, "non-numeric cell '" + cell + "'");
            values.push_back(v);
        }
        const std::string& lab = cells[dim];
        if (lab.empty()) {
            any_unlabeled = true;
            labels.push_back(-1);
        } else {
            char* end = nullptr;
            const long v = std::strtol(lab.c_str(), &end, 10);
            if (end != lab.c_str() + lab.size() || v < 0)
                detail::parse_error(path, line_no, "bad label '" + lab + "'");
            if (expected_classes > 0 && v >= expected_classes)
                detail::parse_error(path, line_no,
                                    "label " + std::to_string(v) + " >= " +
                                        std::to_string(expected_classes) + " classes");
            any_label = true;
            labels.push_back(static_cast<int>(v));
        }
        ++n;
    }
    if (any_label && any_unlabeled)
        throw std::runtime_error("load_csv: " + path + " mixes labeled and unlabeled rows");

    Dataset d;
    d.features = Matrix(n, dim, std::move(values));
    d.labeled = any_label;
    if (d.labeled)
        d.labels = std::move(labels);
    else
        d.labels.clear();
    return d;
}

}  // namespace nrc

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "nrc/math.hpp"
#include "nrc/rng.hpp"

namespace nrc {

struct Linear {
    Matrix weight;  // out x in
    Vec bias;       // out
};

// Feature extractor (linear layers with ReLU between them, none after the
// last) followed by a classifier that is optionally weight-normalized:
// effective weight row j = scale[j] * direction[j] / ||direction[j]||.
struct MlpModel {
    std::vector<Linear> extractor;  // empty extractor means z = x
    bool weight_norm = true;
    Matrix cls_direction;  // C x feature_dim
    Vec cls_scale;         // C; unused when weight_norm is false
    Vec cls_bias;          // C

    std::size_t input_dim() const {
        return extractor.empty() ? cls_direction.cols() : extractor.front().weight.cols();
    }
    std::size_t feature_dim() const { return cls_direction.cols(); }
    std::size_t n_classes() const { return cls_direction.rows(); }

    Matrix effective_classifier() const {
        if (!weight_norm) return cls_direction;
        Matrix w(cls_direction.rows(), cls_direction.cols());
        for (std::size_t j = 0; j < cls_direction.rows(); ++j) {
            const double n = l2_norm(cls_direction.row(j));
            if (n == 0.0)
                throw std::runtime_error("weight norm: zero-norm direction row");
            const double f = cls_scale[j] / n;
            for (std::size_t k = 0; k < cls_direction.cols(); ++k)
                w.at(j, k) = f * cls_direction.at(j, k);
        }
        return w;
    }
};

namespace detail {

inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline Matrix init_weight(std::size_t out, std::size_t in, Rng& rng) {
    const double b = xavier_bound(in, out);
    Matrix w(out, in);
    for (std::size_t i = 0; i < out; ++i)
        for (std::size_t j = 0; j < in; ++j) w.at(i, j) = uniform_in(rng, -b, b);
    return w;
}

// nonzero bias init keeps dead-ReLU rows from producing an exactly zero
// feature vector, which the banks would reject
inline Vec init_bias(std::size_t out, std::size_t fan_in, Rng& rng) {
    const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Vec v(out);
    for (double& x : v) x = uniform_in(rng, -b, b);
    return v;
}

}  // namespace detail

inline MlpModel make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                         std::size_t feature_dim, std::size_t n_classes,
                         bool weight_norm, std::uint64_t seed) {
    if (input_dim == 0 || feature_dim == 0 || n_classes == 0)
        throw std::invalid_argument("make_mlp: zero dimension");
    Rng rng(mix_seed(seed, seed_stream::init));
    MlpModel m;
    m.weight_norm = weight_norm;
    std::size_t prev = input_dim;
    for (std::size_t h : hidden) {
        m.extractor.push_back({detail::init_weight(h, prev, rng), detail::init_bias(h, prev, rng)});
        prev = h;
    }
    m.extractor.push_back(
        {detail::init_weight(feature_dim, prev, rng), detail::init_bias(feature_dim, prev, rng)});
    m.cls_direction = detail::init_weight(n_classes, feature_dim, rng);
    m.cls_bias = detail::init_bias(n_classes, feature_dim, rng);
    if (weight_norm) {
        m.cls_scale = Vec(n_classes);
        for (std::size_t j = 0; j < n_classes; ++j)
            m.cls_scale[j] = l2_norm(m.cls_direction.row(j));
    }
    return m;
}

// Classifier directly on the raw features (empty extractor, plain linear).
inline MlpModel make_linear_probe(std::size_t input_dim, std::size_t n_classes,
                                  std::uint64_t seed) {
    Rng rng(mix_seed(seed, seed_stream::init));
    MlpModel m;
    m.weight_norm = false;
    m.cls_direction = detail::init_weight(n_classes, input_dim, rng);
    m.cls_bias = detail::init_bias(n_classes, input_dim, rng);
    return m;
}

// Activations cached by forward(); required input to backward().
struct ForwardCache {
    std::vector<Matrix> xs;  // xs[0] = input, xs[l+1] = output of extractor layer l
    Matrix z;                // alias of xs.back()
    Matrix p;                // softmax rows, needed for the classifier gradient
};

struct ForwardResult {
    Matrix z;       // batch x feature_dim
    Matrix logits;  // batch x C
    Matrix p;       // batch x C
};

inline ForwardResult forward(const MlpModel& m, const Matrix& x, ForwardCache* cache = nullptr) {
    if (x.cols() != m.input_dim())
        throw std::invalid_argument("forward: input width " + std::to_string(x.cols()) +
                                    " != model input dim " + std::to_string(m.input_dim()));
    std::vector<Matrix> xs;
    xs.reserve(m.extractor.size() + 1);
    xs.push_back(x);
    for (std::size_t l = 0; l < m.extractor.size(); ++l) {
        const Linear& lay = m.extractor[l];
        Matrix out = matmul_nt(xs.back(), lay.weight);
        for (std::size_t i = 0; i < out.rows(); ++i)
            for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) += lay.bias[j];
        if (l + 1 < m.extractor.size())
            for (double& v : out.data()) v = v > 0.0 ? v : 0.0;  // ReLU between layers
        xs.push_back(std::move(out));
    }

    ForwardResult r;
    r.z = xs.back();
    const Matrix w_eff = m.effective_classifier();
    r.logits = matmul_nt(r.z, w_eff);
    for (std::size_t i = 0; i < r.logits.rows(); ++i)
        for (std::size_t j = 0; j < r.logits.cols(); ++j) r.logits.at(i, j) += m.cls_bias[j];
    r.p = softmax_rows(r.logits);

    if (cache) {
        cache->xs = std::move(xs);
        cache->z = r.z;
        cache->p = r.p;
    }
    return r;
}

struct Gradients {
    std::vector<Linear> extractor;  // same shapes as the model's layers
    Matrix cls_direction;
    Vec cls_scale;
    Vec cls_bias;
};

inline Gradients zero_gradients(const MlpModel& m) {
    Gradients g;
    for (const Linear& lay : m.extractor)
        g.extractor.push_back({Matrix(lay.weight.rows(), lay.weight.cols()), Vec(lay.bias.size(), 0.0)});
    g.cls_direction = Matrix(m.cls_direction.rows(), m.cls_direction.cols());
    g.cls_scale = Vec(m.cls_scale.size(), 0.0);
    g.cls_bias = Vec(m.cls_bias.size(), 0.0);
    return g;
}

// Backpropagates d(loss)/d(logits) through the classifier and extractor.
// ReLU gates come from the cached post-activation values; the weight-norm
// gradient is split into direction and scale components.
inline Gradients backward(const MlpModel& m, const ForwardCache& cache, const Matrix& grad_logits) {
    if (cache.xs.empty())
        throw std::invalid_argument("backward: forward cache is empty");
    if (grad_logits.rows() != cache.xs[0].rows() || grad_logits.cols() != m.n_classes())
        throw std::invalid_argument("backward: grad_logits shape mismatch with cached batch");

    Gradients g = zero_gradients(m);
    const Matrix& z = cache.xs.back();

    // classifier
    const Matrix dw_eff = matmul_tn(grad_logits, z);  // C x feature_dim
    for (std::size_t i = 0; i < grad_logits.rows(); ++i)
        for (std::size_t j = 0; j < grad_logits.cols(); ++j)
            g.cls_bias[j] += grad_logits.at(i, j);
    if (m.weight_norm) {
        for (std::size_t j = 0; j < m.cls_direction.rows(); ++j) {
            const auto v = m.cls_direction.row(j);
            const auto u = dw_eff.row(j);
            const double n = l2_norm(v);
            const double u_dot_vhat = dot(u, v) / n;
            g.cls_scale[j] = u_dot_vhat;
            const double f = m.cls_scale[j] / n;
            for (std::size_t k = 0; k < v.size(); ++k)
                g.cls_direction.at(j, k) = f * (u[k] - u_dot_vhat * v[k] / n);
        }
    } else {
        g.cls_direction = dw_eff;
    }

    // extractor
    Matrix delta = matmul_nn(grad_logits, m.effective_classifier());  // d/dz
    for (std::size_t li = m.extractor.size(); li-- > 0;) {
        if (li + 1 < m.extractor.size()) {
            const Matrix& post = cache.xs[li + 1];
            for (std::size_t i = 0; i < delta.rows(); ++i)
                for (std::size_t j = 0; j < delta.cols(); ++j)
                    if (post.at(i, j) <= 0.0) delta.at(i, j) = 0.0;
        }
        g.extractor[li].weight = matmul_tn(delta, cache.xs[li]);
        for (std::size_t i = 0; i < delta.rows(); ++i)
            for (std::size_t j = 0; j < delta.cols(); ++j)
                g.extractor[li].bias[j] += delta.at(i, j);
        if (li > 0) delta = matmul_nn(delta, m.extractor[li].weight);
    }
    return g;
}

// SGD with momentum: buffer <- momentum * buffer + grad; param <- param - lr * buffer.
struct OptimizerState {
    double learning_rate = 1e-2;
    double momentum = 0.9;
    std::vector<Linear> buf_extractor;
    Matrix buf_direction;
    Vec buf_scale;
    Vec buf_bias;
};

inline OptimizerState make_optimizer(const MlpModel& m, double lr, double momentum = 0.9) {
    OptimizerState s;
    s.learning_rate = lr;
    s.momentum = momentum;
    Gradients z = zero_gradients(m);
    s.buf_extractor = std::move(z.extractor);
    s.buf_direction = std::move(z.cls_direction);
    s.buf_scale = std::move(z.cls_scale);
    s.buf_bias = std::move(z.cls_bias);
    return s;
}

namespace detail {

inline void sgd_tensor(std::vector<double>& param, std::vector<double>& buf,
                       const std::vector<double>& grad, double lr, double mom) {
    if (param.size() != grad.size() || param.size() != buf.size())
        throw std::invalid_argument("sgd_step: shape mismatch");
    for (std::size_t i = 0; i < param.size(); ++i) {
        buf[i] = mom * buf[i] + grad[i];
        param[i] -= lr * buf[i];
    }
}

}  // namespace detail

inline void sgd_step(MlpModel& m, const Gradients& g, OptimizerState& s) {
    if (g.extractor.size() != m.extractor.size())
        throw std::invalid_argument("sgd_step: layer count mismatch");
    for (std::size_t l = 0; l < m.extractor.size(); ++l) {
        detail::sgd_tensor(m.extractor[l].weight.data(), s.buf_extractor[l].weight.data(),
                           g.extractor[l].weight.data(), s.learning_rate, s.momentum);
        detail::sgd_tensor(m.extractor[l].bias, s.buf_extractor[l].bias, g.extractor[l].bias,
                           s.learning_rate, s.momentum);
    }
    detail::sgd_tensor(m.cls_direction.data(), s.buf_direction.data(), g.cls_direction.data(),
                       s.learning_rate, s.momentum);
    if (m.weight_norm)
        detail::sgd_tensor(m.cls_scale, s.buf_scale, g.cls_scale, s.learning_rate, s.momentum);
    detail::sgd_tensor(m.cls_bias, s.buf_bias, g.cls_bias, s.learning_rate, s.momentum);
}

struct PretrainConfig {
    int epochs = 50;
    double smoothing = 0.1;  // label smoothing epsilon, < 1
    double learning_rate = 5e-2;
    double momentum = 0.9;
    int batch_size = 64;
    std::uint64_t seed = 0;
};

struct PretrainEpoch {
    double loss = 0.0;      // mean smoothed cross-entropy over the epoch's batches
    double accuracy = 0.0;  // full-pass train accuracy after the epoch
};

inline double accuracy(const MlpModel& m, const Matrix& x, const std::vector<int>& labels) {
    const ForwardResult r = forward(m, x);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < x.rows(); ++i)
        if (static_cast<int>(argmax(r.p.row(i))) == labels[i]) ++hits;
    return x.rows() == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(x.rows());
}

// Cross-entropy against smoothed targets (1-eps)*onehot + eps/C. Shuffled
// batches, last partial batch kept.
inline std::vector<PretrainEpoch> pretrain_source(MlpModel& m, const Matrix& x,
                                                  const std::vector<int>& labels,
                                                  const PretrainConfig& cfg) {
    const std::size_t n = x.rows();
    const std::size_t c = m.n_classes();
    if (n == 0) throw std::invalid_argument("pretrain_source: empty dataset");
    if (labels.size() != n) throw std::invalid_argument("pretrain_source: label count mismatch");
    if (cfg.smoothing < 0.0 || cfg.smoothing >= 1.0)
        throw std::invalid_argument("pretrain_source: smoothing must be in [0,1)");
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= c)
            throw std::invalid_argument("pretrain_source: label out of range");

    OptimizerState opt = make_optimizer(m, cfg.learning_rate, cfg.momentum);
    Rng shuffle_rng(mix_seed(cfg.seed, seed_stream::shuffle));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    const double off = cfg.smoothing / static_cast<double>(c);
    const double on = 1.0 - cfg.smoothing + off;

    std::vector<PretrainEpoch> history;
    history.reserve(cfg.epochs);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t bn = std::min<std::size_t>(cfg.batch_size, n - start);
            Matrix xb(bn, x.cols());
            for (std::size_t i = 0; i < bn; ++i)
                std::copy(x.row(order[start + i]).begin(), x.row(order[start + i]).end(),
                          xb.row_mut(i).begin());
            ForwardCache cache;
            const ForwardResult r = forward(m, xb, &cache);

            Matrix grad_logits(bn, c);
            for (std::size_t i = 0; i < bn; ++i) {
                const int y = labels[order[start + i]];
                for (std::size_t j = 0; j < c; ++j) {
                    const double t = (static_cast<int>(j) == y) ? on : off;
                    loss_sum -= t * std::log(std::max(r.p.at(i, j), 1e-12));
                    grad_logits.at(i, j) = (r.p.at(i, j) - t) / static_cast<double>(bn);
                }
            }
            const Gradients g = backward(m, cache, grad_logits);
            sgd_step(m, g, opt);
        }
        history.push_back({loss_sum / static_cast<double>(n), accuracy(m, x, labels)});
    }
    return history;
}

// Checkpoint: "NRCM", version byte, uint32 tensor count, then per tensor
// uint32 rows, uint32 cols (little-endian) and row-major float64 data.
// Tensor order: extractor (weight, bias)* then classifier direction,
// [scale,] bias; an odd count marks a weight-normalized classifier.
namespace detail {

inline void write_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_tensor(std::ofstream& out, std::size_t rows, std::size_t cols,
                         const std::vector<double>& data) {
    write_u32(out, static_cast<std::uint32_t>(rows));
    write_u32(out, static_cast<std::uint32_t>(cols));
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
}

inline Matrix read_tensor(std::ifstream& in, const std::string& path) {
    const std::uint32_t rows = read_u32(in);
    const std::uint32_t cols = read_u32(in);
    if (!in) throw std::runtime_error("load_model: truncated header in " + path);
    std::vector<double> data(static_cast<std::size_t>(rows) * cols);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_model: truncated tensor in " + path);
    return Matrix(rows, cols, std::move(data));
}

}  // namespace detail

inline void save_model(const MlpModel& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_model: cannot open " + path);
    out.write("NRCM", 4);
    const char version = 1;
    out.write(&version, 1);
    const std::uint32_t count =
        static_cast<std::uint32_t>(2 * m.extractor.size() + (m.weight_norm ? 3 : 2));
    detail::write_u32(out, count);
    for (const Linear& lay : m.extractor) {
        detail::write_tensor(out, lay.weight.rows(), lay.weight.cols(), lay.weight.data());
        detail::write_tensor(out, 1, lay.bias.size(), lay.bias);
    }
    detail::write_tensor(out, m.cls_direction.rows(), m.cls_direction.cols(),
                         m.cls_direction.data());
    if (m.weight_norm) detail::write_tensor(out, 1, m.cls_scale.size(), m.cls_scale);
    detail::write_tensor(out, 1, m.cls_bias.size(), m.cls_bias);
    if (!out) throw std::runtime_error("save_model: write failed for " + path);
}

inline MlpModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_model: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "NRCM", 4) != 0)
        throw std::runtime_error("load_model: bad magic in " + path);
    char version = 0;
    in.read(&version, 1);
    if (version != 1)
        throw std::runtime_error("load_model: unsupported version in " + path);
    const std::uint32_t count = detail::read_u32(in);
    if (count < 2) throw std::runtime_error("load_model: tensor count too small in " + path);

    MlpModel m;
    m.weight_norm = (count % 2) == 1;
    const std::uint32_t n_layers = (count - (m.weight_norm ? 3 : 2)) / 2;
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        Matrix w = detail::read_tensor(in, path);
        Matrix b = detail::read_tensor(in, path);
        if (b.rows() != 1 || b.cols() != w.rows())
            throw std::runtime_error("load_model: bias shape mismatch in " + path);
        m.extractor.push_back({std::move(w), b.data()});
    }
    m.cls_direction = detail::read_tensor(in, path);
    if (m.weight_norm) {
        Matrix s = detail::read_tensor(in, path);
        if (s.rows() != 1 || s.cols() != m.cls_direction.rows())
            throw std::runtime_error("load_model: scale shape mismatch in " + path);
        m.cls_scale = s.data();
    }
    Matrix b = detail::read_tensor(in, path);
    if (b.rows() != 1 || b.cols() != m.cls_direction.rows())
        throw std::runtime_error("load_model: classifier bias shape mismatch in " + path);
    m.cls_bias = b.data();

    // shape chain must be consistent
    for (std::size_t l = 0; l + 1 < m.extractor.size(); ++l)
        if (m.extractor[l + 1].weight.cols() != m.extractor[l].weight.rows())
            throw std::runtime_error("load_model: layer shape chain broken in " + path);
    if (!m.extractor.empty() && m.cls_direction.cols() != m.extractor.back().weight.rows())
        throw std::runtime_error("load_model: classifier width mismatch in " + path);
    return m;
}

}  // namespace nrc

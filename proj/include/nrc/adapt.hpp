#pragma once

#include <atomic>
#include <cassert>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "nrc/data_io.hpp"
#include "nrc/losses.hpp"
#include "nrc/math.hpp"
#include "nrc/memory_bank.hpp"
#include "nrc/model.hpp"
#include "nrc/neighborhood.hpp"
#include "nrc/rng.hpp"

namespace nrc {

struct AdaptConfig {
    AffinityConfig affinity;   // K, M, r, dedup_expanded
    double expanded_r = 0.1;   // affinity of expanded neighbors
    int batch_size = 64;
    int epochs = 30;
    double learning_rate = 5e-2;
    double momentum = 0.9;
    std::uint64_t seed = 0;
    bool use_neighbor = true;
    bool use_expanded = true;
    bool use_self = true;
    bool use_div = true;
    bool use_affinity = true;
    std::size_t fifo_capacity = 0;  // 0 = full bank over all n_t samples
    int purity_k = 5;
};

// Per-epoch diagnostics. Label-dependent fields are NaN when no labeled
// evaluation view was supplied.
struct EpochRecord {
    int epoch = 0;
    double acc_target = 0.0;
    double l_n = 0.0, l_e = 0.0, l_self = 0.0, l_div = 0.0, total = 0.0;
    double shared_ratio = 0.0;          // purity_k-NN all share one predicted label
    double shared_correct_ratio = 0.0;  // ... and that label is the ground truth
    double rnn_correct = 0.0;           // correct-prediction ratio of reciprocal neighbors
    double nrnn_correct = 0.0;
    double seconds = 0.0;
};

struct RunHistory {
    std::vector<EpochRecord> epochs;

    double final_accuracy() const {
        return epochs.empty() ? std::numeric_limits<double>::quiet_NaN()
                              : epochs.back().acc_target;
    }
};

// Correct-prediction ratios of neighbors pooled over ranks 1..k, split into
// all / reciprocal / non-reciprocal. "Correct" means the neighbor's predicted
// label equals the query's ground-truth label.
struct QualityReport {
    std::vector<double> all_ratio, rnn_ratio, nrnn_ratio;     // index k-1
    std::vector<std::size_t> all_count, rnn_count, nrnn_count;
    std::vector<std::size_t> all_correct, rnn_correct, nrnn_correct;
};

inline QualityReport neighbor_quality(const Matrix& features, const Matrix& scores,
                                      const std::vector<int>& labels, int k, int m) {
    const std::size_t n = features.rows();
    if (labels.size() != n)
        throw std::invalid_argument("neighbor_quality: label count mismatch");
    AffinityConfig cfg{k, m, 0.0, false};
    const NeighborTable t =
        build_neighbor_table(features, detail::identity_ids(n), cfg);

    QualityReport q;
    q.all_count.assign(k, 0);
    q.rnn_count.assign(k, 0);
    q.nrnn_count.assign(k, 0);
    q.all_correct.assign(k, 0);
    q.rnn_correct.assign(k, 0);
    q.nrnn_correct.assign(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (int pos = 0; pos < k; ++pos) {
            const int j = t.k_neighbors[i][pos];
            const bool reciprocal = t.affinities[i][pos] == 1.0;
            const bool correct = static_cast<int>(argmax(scores.row(j))) == labels[i];
            q.all_count[pos] += 1;
            q.all_correct[pos] += correct;
            if (reciprocal) {
                q.rnn_count[pos] += 1;
                q.rnn_correct[pos] += correct;
            } else {
                q.nrnn_count[pos] += 1;
                q.nrnn_correct[pos] += correct;
            }
        }
    }
    // pool rank-wise tallies into cumulative "k nearest" tallies
    for (int pos = 1; pos < k; ++pos) {
        q.all_count[pos] += q.all_count[pos - 1];
        q.rnn_count[pos] += q.rnn_count[pos - 1];
        q.nrnn_count[pos] += q.nrnn_count[pos - 1];
        q.all_correct[pos] += q.all_correct[pos - 1];
        q.rnn_correct[pos] += q.rnn_correct[pos - 1];
        q.nrnn_correct[pos] += q.nrnn_correct[pos - 1];
    }
    auto ratio = [](std::size_t c, std::size_t t2) {
        return t2 == 0 ? 0.0 : static_cast<double>(c) / static_cast<double>(t2);
    };
    q.all_ratio.resize(k);
    q.rnn_ratio.resize(k);
    q.nrnn_ratio.resize(k);
    for (int pos = 0; pos < k; ++pos) {
        q.all_ratio[pos] = ratio(q.all_correct[pos], q.all_count[pos]);
        q.rnn_ratio[pos] = ratio(q.rnn_correct[pos], q.rnn_count[pos]);
        q.nrnn_ratio[pos] = ratio(q.nrnn_correct[pos], q.nrnn_count[pos]);
    }
    return q;
}

inline QualityReport neighbor_quality(const MlpModel& model, const Dataset& data, int k, int m) {
    if (!data.labeled)
        throw std::invalid_argument("neighbor_quality: labels required");
    const ForwardResult r = forward(model, data.features);
    return neighbor_quality(r.z, r.p, data.labels, k, m);
}

struct PurityStats {
    double shared_ratio = 0.0;
    double shared_correct_ratio = 0.0;  // NaN when labels are absent
};

// Fraction of samples whose k nearest neighbors all carry one predicted
// label, and additionally carry the sample's true label.
inline PurityStats purity_curve(const Matrix& features, const Matrix& scores,
                                const std::vector<int>* labels, int k = 5) {
    const std::size_t n = features.rows();
    if (k < 1 || static_cast<std::size_t>(k) >= n)
        throw std::invalid_argument("purity_curve: k must satisfy 1 <= k < n");
    if (labels && labels->size() != n)
        throw std::invalid_argument("purity_curve: label count mismatch");
    const auto inv = detail::inverse_norms(features);
    const auto ids = detail::identity_ids(n);
    std::size_t shared = 0, shared_correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto cand = detail::ranked_candidates(features, inv, ids, i,
                                                    static_cast<std::size_t>(k));
        const int first = static_cast<int>(argmax(scores.row(cand[0].second)));
        bool all_same = true;
        for (int pos = 1; pos < k && all_same; ++pos)
            all_same = static_cast<int>(argmax(scores.row(cand[pos].second))) == first;
        if (all_same) {
            ++shared;
            if (labels && (*labels)[i] == first) ++shared_correct;
        }
    }
    PurityStats s;
    s.shared_ratio = static_cast<double>(shared) / static_cast<double>(n);
    s.shared_correct_ratio = labels
        ? static_cast<double>(shared_correct) / static_cast<double>(n)
        : std::numeric_limits<double>::quiet_NaN();
    return s;
}

inline PurityStats purity_curve(const Banks& banks, const Dataset& data, int k = 5) {
    if (!data.labeled) throw std::invalid_argument("purity_curve: labels required");
    return purity_curve(banks.features(), banks.scores(), &data.labels, k);
}

namespace detail {

// Alg. 1 ordering guard: bank update must precede retrieval, retrieval must
// precede the loss/step. Active in debug builds only.
struct IterationPhase {
    enum Step { start = 0, forwarded, banks_updated, retrieved, stepped };
    Step step = start;
    void advance([[maybe_unused]] Step to) {
        assert(static_cast<int>(to) == static_cast<int>(step) + 1 &&
               "iteration phase out of order");
        step = to;
    }
};

inline void validate_adapt(const MlpModel& model, const UnlabeledView& target,
                           const AdaptConfig& cfg, const Dataset* eval_data) {
    validate(cfg.affinity);
    const std::size_t n = target.size();
    if (n < 2) throw std::invalid_argument("adapt: need at least 2 target samples");
    if (target.dim() != model.input_dim())
        throw std::invalid_argument("adapt: target dim != model input dim");
    if (cfg.batch_size < 1 || static_cast<std::size_t>(cfg.batch_size) > n)
        throw std::invalid_argument("adapt: batch_size must be in [1, n_t]");
    if (cfg.epochs < 0) throw std::invalid_argument("adapt: negative epochs");
    if (!std::isfinite(cfg.expanded_r))
        throw std::invalid_argument("adapt: expanded_r must be finite");
    const std::size_t need = static_cast<std::size_t>(std::max(cfg.affinity.k, cfg.affinity.m));
    if (cfg.fifo_capacity == 0) {
        if (need >= n)
            throw std::invalid_argument("adapt: K and M must be < n_t");
    } else {
        if (cfg.fifo_capacity < static_cast<std::size_t>(cfg.batch_size))
            throw std::invalid_argument("adapt: fifo capacity smaller than batch");
        if (need >= static_cast<std::size_t>(cfg.batch_size))
            throw std::invalid_argument("adapt: K and M must be < batch_size in fifo mode");
    }
    if (cfg.purity_k < 1 || static_cast<std::size_t>(cfg.purity_k) >= n)
        throw std::invalid_argument("adapt: purity_k must be in [1, n_t)");
    if (eval_data) {
        if (!eval_data->labeled)
            throw std::invalid_argument("adapt: evaluation view must be labeled");
        if (eval_data->size() != n)
            throw std::invalid_argument("adapt: evaluation view size mismatch");
    }
}

}  // namespace detail

// One pass of the adaptation loop: per iteration, sample a batch, forward,
// write the batch rows into the banks, retrieve nearest / reciprocal /
// expanded neighbors from the bank snapshot, take one SGD step on the
// combined objective. Per epoch, evaluate with a fresh full forward pass.
inline RunHistory adapt(MlpModel& model, const UnlabeledView& target, const AdaptConfig& cfg,
                        const Dataset* eval_data = nullptr) {
    detail::validate_adapt(model, target, cfg, eval_data);
    const std::size_t n = target.size();
    const bool fifo_mode = cfg.fifo_capacity > 0;
    const LossConfig loss_cfg{cfg.use_neighbor, cfg.use_expanded, cfg.use_self,
                              cfg.use_div, cfg.use_affinity, cfg.expanded_r};

    Banks banks;
    std::optional<FifoBank> fifo;
    if (fifo_mode)
        fifo.emplace(cfg.fifo_capacity);
    else
        banks = init_banks(model, *target.features);

    OptimizerState opt = make_optimizer(model, cfg.learning_rate, cfg.momentum);
    Rng shuffle_rng(mix_seed(cfg.seed, seed_stream::shuffle));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    RunHistory hist;
    hist.epochs.reserve(cfg.epochs);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double sum_n = 0, sum_e = 0, sum_self = 0, sum_div = 0, sum_total = 0;
        int iterations = 0;

        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t bn = std::min<std::size_t>(cfg.batch_size, n - start);
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + start + bn);
            Matrix xb(bn, target.dim());
            for (std::size_t b = 0; b < bn; ++b)
                std::copy(target.feature(idx[b]).begin(), target.feature(idx[b]).end(),
                          xb.row_mut(b).begin());

            detail::IterationPhase phase;
            ForwardCache cache;
            const ForwardResult fr = forward(model, xb, &cache);
            phase.advance(detail::IterationPhase::forwarded);

            if (fifo_mode)
                fifo->push(idx, fr.z, fr.p);
            else
                banks.update(idx, fr.z, fr.p);
            phase.advance(detail::IterationPhase::banks_updated);

            Matrix fifo_feats, fifo_scores;
            std::vector<int> fifo_ids;
            const Matrix* feats;
            const Matrix* scores;
            std::span<const int> row_ids;
            std::vector<std::size_t> query_rows(bn);
            if (fifo_mode) {
                fifo_feats = fifo->feature_matrix();
                fifo_scores = fifo->score_matrix();
                fifo_ids = fifo->ids();
                feats = &fifo_feats;
                scores = &fifo_scores;
                row_ids = fifo_ids;
                for (std::size_t b = 0; b < bn; ++b)
                    query_rows[b] = fifo->size() - bn + b;  // the rows just pushed
            } else {
                feats = &banks.features();
                scores = &banks.scores();
                fifo_ids = detail::identity_ids(n);
                row_ids = fifo_ids;
                query_rows = idx;
            }

            const NeighborTable table = build_neighbor_table(*feats, row_ids, cfg.affinity);
            const ExpandedTable etab = build_expanded_table(table, row_ids, cfg.affinity);
            phase.advance(detail::IterationPhase::retrieved);

            std::vector<std::vector<int>> neighbors(bn);
            std::vector<std::vector<double>> weights(bn);
            std::vector<std::vector<int>> expanded(bn);
            Matrix self_scores(bn, model.n_classes());
            for (std::size_t b = 0; b < bn; ++b) {
                const std::size_t q = query_rows[b];
                neighbors[b] = table.k_neighbors[q];
                weights[b] = cfg.use_affinity
                                 ? table.affinities[q]
                                 : std::vector<double>(table.k_neighbors[q].size(), 1.0);
                expanded[b] = etab.members[q];
                std::copy(scores->row(q).begin(), scores->row(q).end(),
                          self_scores.row_mut(b).begin());
            }

            const LossBreakdown lb = total_loss(fr.p, *scores, neighbors, weights,
                                                expanded, self_scores, loss_cfg);
            const Gradients g = backward(model, cache, lb.grad_logits);
            sgd_step(model, g, opt);
            phase.advance(detail::IterationPhase::stepped);

            sum_n += lb.l_n;
            sum_e += lb.l_e;
            sum_self += lb.l_self;
            sum_div += lb.l_div;
            sum_total += lb.total;
            ++iterations;
        }

        // fresh full pass; bank rows for non-recent batches are stale by now
        const ForwardResult ev = forward(model, *target.features);
        EpochRecord rec;
        rec.epoch = epoch;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        rec.acc_target = nan;
        rec.rnn_correct = nan;
        rec.nrnn_correct = nan;
        if (eval_data) {
            std::size_t hits = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (static_cast<int>(argmax(ev.p.row(i))) == eval_data->labels[i]) ++hits;
            rec.acc_target = static_cast<double>(hits) / static_cast<double>(n);
            const QualityReport q =
                neighbor_quality(ev.z, ev.p, eval_data->labels, cfg.affinity.k, cfg.affinity.m);
            rec.rnn_correct = q.rnn_ratio.back();
            rec.nrnn_correct = q.nrnn_ratio.back();
        }
        const PurityStats ps = purity_curve(ev.z, ev.p,
                                            eval_data ? &eval_data->labels : nullptr,
                                            cfg.purity_k);
        rec.shared_ratio = ps.shared_ratio;
        rec.shared_correct_ratio = ps.shared_correct_ratio;
        const double inv_it = iterations > 0 ? 1.0 / iterations : 0.0;
        rec.l_n = sum_n * inv_it;
        rec.l_e = sum_e * inv_it;
        rec.l_self = sum_self * inv_it;
        rec.l_div = sum_div * inv_it;
        rec.total = sum_total * inv_it;
        rec.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        hist.epochs.push_back(rec);
    }
    return hist;
}

// --- metrics / ablation CSV ---------------------------------------------

namespace detail {

inline std::string fmt_g(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace detail

inline std::string resolved_config_string(const AdaptConfig& c) {
    std::string s;
    s += "k=" + std::to_string(c.affinity.k);
    s += " m=" + std::to_string(c.affinity.m);
    s += " r=" + detail::fmt_g(c.affinity.r);
    s += " expanded_r=" + detail::fmt_g(c.expanded_r);
    s += " dedup_expanded=" + std::to_string(c.affinity.dedup_expanded ? 1 : 0);
    s += " epochs=" + std::to_string(c.epochs);
    s += " batch=" + std::to_string(c.batch_size);
    s += " lr=" + detail::fmt_g(c.learning_rate);
    s += " momentum=" + detail::fmt_g(c.momentum);
    s += " seed=" + std::to_string(c.seed);
    s += " bank=" + (c.fifo_capacity == 0 ? std::string("full")
                                          : "fifo:" + std::to_string(c.fifo_capacity));
    s += " use_neighbor=" + std::to_string(c.use_neighbor ? 1 : 0);
    s += " use_expanded=" + std::to_string(c.use_expanded ? 1 : 0);
    s += " use_self=" + std::to_string(c.use_self ? 1 : 0);
    s += " use_div=" + std::to_string(c.use_div ? 1 : 0);
    s += " use_affinity=" + std::to_string(c.use_affinity ? 1 : 0);
    s += " purity_k=" + std::to_string(c.purity_k);
    return s;
}

inline void write_metrics_csv(const std::string& path, const std::string& config_line,
                              const RunHistory& hist) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    out << "# " << config_line << "\n";
    out << "epoch,acc_target,l_n,l_e,l_self,l_div,total,shared_ratio,"
           "shared_correct_ratio,rnn_correct,nrnn_correct,seconds\n";
    char sec[32];
    for (const EpochRecord& r : hist.epochs) {
        std::snprintf(sec, sizeof(sec), "%.3f", r.seconds);
        out << r.epoch << ',' << detail::fmt_g(r.acc_target) << ',' << detail::fmt_g(r.l_n)
            << ',' << detail::fmt_g(r.l_e) << ',' << detail::fmt_g(r.l_self) << ','
            << detail::fmt_g(r.l_div) << ',' << detail::fmt_g(r.total) << ','
            << detail::fmt_g(r.shared_ratio) << ',' << detail::fmt_g(r.shared_correct_ratio)
            << ',' << detail::fmt_g(r.rnn_correct) << ',' << detail::fmt_g(r.nrnn_correct)
            << ',' << sec << "\n";
    }
    if (!out) throw std::runtime_error("write_metrics_csv: write failed for " + path);
}

// --- ablation grid --------------------------------------------------------

struct AblationRow {
    std::string config_id;
    std::string toggles;
    int k = 0;
    int m = 0;
    double r = 0.0;
    std::uint64_t seed = 0;
    double final_acc = 0.0;
};

struct AblationOptions {
    PretrainConfig pretrain;
    std::vector<std::size_t> hidden{64, 64};
    std::size_t feature_dim = 32;
    bool weight_norm = true;
    int n_seeds = 5;
    int jobs = 1;
};

struct AblationCell {
    std::string config_id;
    std::string toggles;
    AdaptConfig config;
};

// The grid rows: diversity alone, then nearest neighbors with and without
// affinity, expanded neighborhoods with and without affinity, the
// deduplicated expanded variant, and a no-expansion run whose K is enlarged
// to K + K*M so the consulted-neighbor budget matches the expanded run.
inline std::vector<AblationCell> ablation_cells(const AdaptConfig& base) {
    auto make = [&base](bool use_n, bool use_e, bool use_a, bool use_self, bool dedup,
                        int k_override) {
        AdaptConfig c = base;
        c.use_neighbor = use_n;
        c.use_expanded = use_e;
        c.use_affinity = use_a;
        c.use_self = use_self;
        c.use_div = true;
        c.affinity.dedup_expanded = dedup;
        if (k_override > 0) c.affinity.k = k_override;
        return c;
    };
    const int larger_k = base.affinity.k + base.affinity.k * base.affinity.m;
    return {
        {"div_only", "div", make(false, false, false, false, false, 0)},
        {"div_N", "div+N", make(true, false, false, true, false, 0)},
        {"div_N_A", "div+N+A", make(true, false, true, true, false, 0)},
        {"div_N_E", "div+N+E", make(true, true, false, true, false, 0)},
        {"div_N_E_A", "div+N+E+A", make(true, true, true, true, false, 0)},
        {"div_N_Ehat_A", "div+N+Ehat+A", make(true, true, true, true, true, 0)},
        {"larger_K", "div+N+A(K+K*M)", make(true, false, true, true, false, larger_k)},
    };
}

// Runs the seven-cell grid for n_seeds master seeds. Within one seed every
// cell shares the pretrained model and batch order; across seeds init and
// shuffling vary while the dataset pair stays fixed.
inline std::vector<AblationRow> run_ablation_grid(const AdaptConfig& base,
                                                  const Dataset& source,
                                                  const Dataset& target,
                                                  const AblationOptions& opt) {
    if (!source.labeled) throw std::invalid_argument("run_ablation_grid: source must be labeled");
    if (!target.labeled)
        throw std::invalid_argument("run_ablation_grid: target labels required for evaluation");
    const int n_classes = source.num_classes();
    const auto cells = ablation_cells(base);

    std::vector<MlpModel> pretrained(opt.n_seeds);
    for (int s = 0; s < opt.n_seeds; ++s) {
        const std::uint64_t master = base.seed + static_cast<std::uint64_t>(s);
        MlpModel m = make_mlp(source.dim(), opt.hidden, opt.feature_dim, n_classes,
                              opt.weight_norm, master);
        PretrainConfig pc = opt.pretrain;
        pc.seed = master;
        pretrain_source(m, source.features, source.labels, pc);
        pretrained[s] = std::move(m);
    }

    struct Task {
        std::size_t cell;
        int seed_index;
    };
    std::vector<Task> tasks;
    for (std::size_t c = 0; c < cells.size(); ++c)
        for (int s = 0; s < opt.n_seeds; ++s) tasks.push_back({c, s});

    std::vector<AblationRow> rows(tasks.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t t = next.fetch_add(1);
            if (t >= tasks.size()) return;
            const Task& task = tasks[t];
            const AblationCell& cell = cells[task.cell];
            AdaptConfig cfg = cell.config;
            cfg.seed = base.seed + static_cast<std::uint64_t>(task.seed_index);
            MlpModel model = pretrained[task.seed_index];
            const RunHistory h = adapt(model, unlabeled_view(target), cfg, &target);
            rows[t] = {cell.config_id, cell.toggles,       cfg.affinity.k, cfg.affinity.m,
                       cfg.affinity.r, cfg.seed,           h.final_accuracy()};
        }
    };
    const int jobs = std::max(1, opt.jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return rows;
}

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_ablation_csv: cannot open " + path);
    out << "config_id,toggles,k,m,r,seed,final_acc\n";
    for (const AblationRow& r : rows)
        out << r.config_id << ',' << r.toggles << ',' << r.k << ',' << r.m << ','
            << detail::fmt_g(r.r) << ',' << r.seed << ',' << detail::fmt_g(r.final_acc)
            << "\n";
    if (!out) throw std::runtime_error("write_ablation_csv: write failed for " + path);
}

}  // namespace nrc

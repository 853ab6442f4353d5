#include <catch2/catch.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "nrc/adapt.hpp"

using namespace nrc;

namespace {

// The pinned synthetic scenario used by the golden tests: shifted, class-
// imbalanced 3-class blobs. Kept in sync with the acceptance suite.
ShiftSpec golden_spec(std::uint64_t seed) {
    ShiftSpec spec;
    spec.n_classes = 3;
    spec.dim = 2;
    spec.samples_per_class = 64;
    spec.class_separation = 4.0;
    spec.noise_sigma = 1.0;
    spec.rotation_angle = 15.0 * std::numbers::pi / 180.0;
    spec.layout_offset = 4.0;
    spec.label_prior = {0.5, 0.3, 0.2};
    spec.seed = seed;
    return spec;
}

MlpModel golden_pretrained(const Dataset& src, std::uint64_t seed) {
    MlpModel m = make_mlp(src.dim(), {64, 64}, 32, src.num_classes(), true, seed);
    PretrainConfig pc;
    pc.epochs = 50;
    pc.smoothing = 0.1;
    pc.learning_rate = 0.05;
    pc.batch_size = 16;
    pc.seed = seed;
    pretrain_source(m, src.features, src.labels, pc);
    return m;
}

AdaptConfig golden_adapt_config(std::uint64_t seed) {
    AdaptConfig cfg;
    cfg.affinity = {3, 2, 0.1, false};
    cfg.batch_size = 16;
    cfg.epochs = 30;
    cfg.learning_rate = 0.002;
    cfg.seed = seed;
    return cfg;
}

bool same_history_ignoring_time(const RunHistory& a, const RunHistory& b) {
    if (a.epochs.size() != b.epochs.size()) return false;
    for (std::size_t i = 0; i < a.epochs.size(); ++i) {
        const EpochRecord& x = a.epochs[i];
        const EpochRecord& y = b.epochs[i];
        auto eq = [](double p, double q) {
            return (std::isnan(p) && std::isnan(q)) || p == q;
        };
        if (x.epoch != y.epoch || !eq(x.acc_target, y.acc_target) || !eq(x.l_n, y.l_n) ||
            !eq(x.l_e, y.l_e) || !eq(x.l_self, y.l_self) || !eq(x.l_div, y.l_div) ||
            !eq(x.total, y.total) || !eq(x.shared_ratio, y.shared_ratio) ||
            !eq(x.shared_correct_ratio, y.shared_correct_ratio) ||
            !eq(x.rnn_correct, y.rnn_correct) || !eq(x.nrnn_correct, y.nrnn_correct))
            return false;
    }
    return true;
}

bool same_model(const MlpModel& a, const MlpModel& b) {
    if (a.extractor.size() != b.extractor.size()) return false;
    for (std::size_t l = 0; l < a.extractor.size(); ++l)
        if (!(a.extractor[l].weight == b.extractor[l].weight &&
              a.extractor[l].bias == b.extractor[l].bias))
            return false;
    return a.cls_direction == b.cls_direction && a.cls_scale == b.cls_scale &&
           a.cls_bias == b.cls_bias;
}

}  // namespace

TEST_CASE("zero epochs leaves the model untouched") {
    const auto [src, tgt] = generate_pair(golden_spec(3));
    MlpModel m = golden_pretrained(src, 3);
    const MlpModel before = m;
    AdaptConfig cfg = golden_adapt_config(3);
    cfg.epochs = 0;
    const RunHistory h = adapt(m, unlabeled_view(tgt), cfg, &tgt);
    CHECK(h.epochs.empty());
    CHECK(same_model(m, before));
    CHECK(std::isnan(h.final_accuracy()));
}

TEST_CASE("adapt is deterministic under a fixed seed") {
    const auto [src, tgt] = generate_pair(golden_spec(4));
    AdaptConfig cfg = golden_adapt_config(4);
    cfg.epochs = 4;
    MlpModel m1 = golden_pretrained(src, 4);
    MlpModel m2 = m1;
    const RunHistory h1 = adapt(m1, unlabeled_view(tgt), cfg, &tgt);
    const RunHistory h2 = adapt(m2, unlabeled_view(tgt), cfg, &tgt);
    CHECK(same_history_ignoring_time(h1, h2));
    CHECK(same_model(m1, m2));
}

TEST_CASE("all loss toggles off is a no-op on the parameters") {
    const auto [src, tgt] = generate_pair(golden_spec(5));
    MlpModel m = golden_pretrained(src, 5);
    const MlpModel before = m;
    AdaptConfig cfg = golden_adapt_config(5);
    cfg.epochs = 2;
    cfg.use_neighbor = cfg.use_expanded = cfg.use_self = cfg.use_div = false;
    const RunHistory h = adapt(m, unlabeled_view(tgt), cfg, &tgt);
    CHECK(h.epochs.size() == 2);
    CHECK(same_model(m, before));
}

// The loop sees only the feature view; flipping every label in the dataset it
// was built from must not change one bit of the run.
TEST_CASE("adaptation never reads target labels") {
    const auto [src, tgt] = generate_pair(golden_spec(6));
    const Dataset eval_copy = tgt;  // pristine labels for evaluation only

    Dataset poisoned = tgt;
    for (int& label : poisoned.labels) label = 0;  // sentinel garbage

    AdaptConfig cfg = golden_adapt_config(6);
    cfg.epochs = 3;
    MlpModel m1 = golden_pretrained(src, 6);
    MlpModel m2 = m1;
    const RunHistory h1 = adapt(m1, unlabeled_view(tgt), cfg, &eval_copy);
    const RunHistory h2 = adapt(m2, unlabeled_view(poisoned), cfg, &eval_copy);
    CHECK(same_history_ignoring_time(h1, h2));
    CHECK(same_model(m1, m2));
}

TEST_CASE("golden scenario: adaptation beats the source model on the target") {
    const auto [src, tgt] = generate_pair(golden_spec(1));
    MlpModel m = golden_pretrained(src, 1);
    const double before = accuracy(m, tgt.features, tgt.labels);

    ForwardResult pre = forward(m, tgt.features);
    const PurityStats pre_purity = purity_curve(pre.z, pre.p, &tgt.labels, 5);

    const RunHistory h = adapt(m, unlabeled_view(tgt), golden_adapt_config(1), &tgt);
    const double after = h.final_accuracy();
    CHECK(after > before);

    // golden values from the pinned seed, 1% replay tolerance
    CHECK(before == Approx(0.875).margin(0.015));
    CHECK(after == Approx(0.90625).margin(0.015));

    // clusters tighten: the 5-NN shared-prediction ratio rises
    CHECK(h.epochs.back().shared_ratio > pre_purity.shared_ratio);
    CHECK(pre_purity.shared_ratio == Approx(0.9635416667).margin(0.02));
    CHECK(h.epochs.back().shared_ratio == Approx(0.9739583333).margin(0.02));
}

TEST_CASE("fifo mode runs and uplift survives the truncated bank") {
    const auto [src, tgt] = generate_pair(golden_spec(2));
    MlpModel m = golden_pretrained(src, 2);
    const double before = accuracy(m, tgt.features, tgt.labels);
    AdaptConfig cfg = golden_adapt_config(2);
    cfg.fifo_capacity = 38;  // 20% of n_t
    const RunHistory h = adapt(m, unlabeled_view(tgt), cfg, &tgt);
    REQUIRE(h.epochs.size() == 30);
    CHECK(h.final_accuracy() > before);
}

TEST_CASE("partial final batches are processed, not dropped") {
    ShiftSpec spec = golden_spec(7);
    spec.samples_per_class = 17;  // n_t = 51, batch 16 -> 3 full + 1 partial
    spec.label_prior.clear();
    const auto [src, tgt] = generate_pair(spec);
    MlpModel m = golden_pretrained(src, 7);
    AdaptConfig cfg = golden_adapt_config(7);
    cfg.epochs = 2;
    const RunHistory h = adapt(m, unlabeled_view(tgt), cfg, &tgt);
    CHECK(h.epochs.size() == 2);
    CHECK(h.epochs.back().acc_target >= 0.0);
}

TEST_CASE("adapt validates configuration against the dataset") {
    const auto [src, tgt] = generate_pair(golden_spec(8));
    MlpModel m = golden_pretrained(src, 8);
    const UnlabeledView view = unlabeled_view(tgt);

    AdaptConfig cfg = golden_adapt_config(8);
    cfg.batch_size = static_cast<int>(tgt.size()) + 1;
    CHECK_THROWS_AS(adapt(m, view, cfg, &tgt), std::invalid_argument);

    cfg = golden_adapt_config(8);
    cfg.affinity.k = static_cast<int>(tgt.size());
    CHECK_THROWS_AS(adapt(m, view, cfg, &tgt), std::invalid_argument);

    cfg = golden_adapt_config(8);
    cfg.fifo_capacity = 8;  // smaller than the batch
    CHECK_THROWS_AS(adapt(m, view, cfg, &tgt), std::invalid_argument);

    cfg = golden_adapt_config(8);
    cfg.fifo_capacity = 64;
    cfg.affinity.k = 16;  // K must stay below the batch in fifo mode
    CHECK_THROWS_AS(adapt(m, view, cfg, &tgt), std::invalid_argument);

    cfg = golden_adapt_config(8);
    Dataset short_eval = tgt;
    short_eval.features = Matrix(4, 2);
    short_eval.labels.resize(4);
    CHECK_THROWS_AS(adapt(m, view, cfg, &short_eval), std::invalid_argument);

    Dataset unlabeled = tgt;
    unlabeled.labeled = false;
    CHECK_THROWS_AS(adapt(m, view, cfg, &unlabeled), std::invalid_argument);
}

TEST_CASE("neighbor quality on a perfectly clustered, perfectly classified set") {
    // two chains of points, far apart; predictions equal the labels
    const std::vector<double> degrees{0, 3, 7, 12, 180, 183, 187, 192};
    Matrix feats(8, 2);
    Matrix scores(8, 2);
    std::vector<int> labels;
    for (std::size_t i = 0; i < 8; ++i) {
        const double rad = degrees[i] * std::numbers::pi / 180.0;
        feats.at(i, 0) = std::cos(rad);
        feats.at(i, 1) = std::sin(rad);
        const int cls = i < 4 ? 0 : 1;
        labels.push_back(cls);
        scores.at(i, cls) = 1.0;
    }
    const QualityReport q = neighbor_quality(feats, scores, labels, 2, 1);
    for (int k = 0; k < 2; ++k) {
        CHECK(q.all_count[k] == q.rnn_count[k] + q.nrnn_count[k]);
        CHECK(q.rnn_count[k] > 0);
        CHECK(q.nrnn_count[k] > 0);
        CHECK(q.all_ratio[k] == 1.0);
        CHECK(q.rnn_ratio[k] == 1.0);
        CHECK(q.nrnn_ratio[k] == 1.0);
    }

    Dataset unlabeled;
    unlabeled.features = feats;
    unlabeled.labeled = false;
    const MlpModel m = make_mlp(2, {4}, 3, 2, true, 9);
    CHECK_THROWS_AS(neighbor_quality(m, unlabeled, 2, 1), std::invalid_argument);
}

TEST_CASE("purity curve basics") {
    Rng rng(10);
    Matrix feats(12, 3);
    for (double& v : feats.data()) v = uniform_in(rng, -1.0, 1.0);
    Matrix scores(12, 2);
    for (std::size_t i = 0; i < 12; ++i) scores.at(i, 0) = 1.0;  // all predict class 0
    std::vector<int> labels(12, 0);
    labels[3] = 1;

    const PurityStats ps = purity_curve(feats, scores, &labels, 5);
    CHECK(ps.shared_ratio == 1.0);
    CHECK(ps.shared_correct_ratio == Approx(11.0 / 12.0));
    CHECK(ps.shared_correct_ratio <= ps.shared_ratio);

    const PurityStats no_labels = purity_curve(feats, scores, nullptr, 5);
    CHECK(no_labels.shared_ratio == 1.0);
    CHECK(std::isnan(no_labels.shared_correct_ratio));

    CHECK_THROWS_AS(purity_curve(feats, scores, &labels, 12), std::invalid_argument);
}

TEST_CASE("metrics csv carries the resolved config and one row per epoch") {
    const auto [src, tgt] = generate_pair(golden_spec(11));
    MlpModel m = golden_pretrained(src, 11);
    AdaptConfig cfg = golden_adapt_config(11);
    cfg.epochs = 3;
    const RunHistory h = adapt(m, unlabeled_view(tgt), cfg, &tgt);

    const std::string path =
        (std::filesystem::temp_directory_path() / "nrc_metrics_test.csv").string();
    write_metrics_csv(path, resolved_config_string(cfg), h);
    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line.rfind("# ", 0) == 0);
    CHECK(line.find("k=3") != std::string::npos);
    CHECK(line.find("m=2") != std::string::npos);
    CHECK(line.find("r=0.1") != std::string::npos);
    CHECK(line.find("lr=0.002") != std::string::npos);
    REQUIRE(std::getline(in, line));
    CHECK(line.rfind("epoch,acc_target", 0) == 0);
    int rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);
    std::remove(path.c_str());
}

TEST_CASE("ablation grid cells and a tiny grid run") {
    AdaptConfig base = golden_adapt_config(12);
    const auto cells = ablation_cells(base);
    REQUIRE(cells.size() == 7);
    CHECK(cells[0].config_id == "div_only");
    CHECK(cells[4].config_id == "div_N_E_A");
    CHECK(cells[6].config_id == "larger_K");
    CHECK(cells[6].config.affinity.k == 3 + 3 * 2);  // matched neighbor budget
    CHECK_FALSE(cells[6].config.use_expanded);
    CHECK(cells[5].config.affinity.dedup_expanded);

    ShiftSpec spec = golden_spec(12);
    spec.samples_per_class = 20;
    spec.label_prior.clear();
    const auto [src, tgt] = generate_pair(spec);
    base.epochs = 2;
    base.batch_size = 12;
    AblationOptions opt;
    opt.pretrain.epochs = 10;
    opt.pretrain.batch_size = 12;
    opt.n_seeds = 2;
    opt.jobs = 1;
    const auto rows = run_ablation_grid(base, src, tgt, opt);
    REQUIRE(rows.size() == 7 * 2);
    for (const AblationRow& r : rows) {
        CHECK(std::isfinite(r.final_acc));
        CHECK(r.final_acc >= 0.0);
        CHECK(r.final_acc <= 1.0);
    }

    // results do not depend on the worker count
    opt.jobs = 3;
    const auto rows_parallel = run_ablation_grid(base, src, tgt, opt);
    REQUIRE(rows_parallel.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows_parallel[i].config_id == rows[i].config_id);
        CHECK(rows_parallel[i].final_acc == rows[i].final_acc);
    }

    const std::string path =
        (std::filesystem::temp_directory_path() / "nrc_grid_test.csv").string();
    write_ablation_csv(path, rows);
    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "config_id,toggles,k,m,r,seed,final_acc");
    std::remove(path.c_str());
}

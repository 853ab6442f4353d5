// nrc: neighborhood-reciprocity clustering for source-free domain adaptation.
// Subcommands: datagen, pretrain, adapt, analyze, ablate. Exit codes:
// 0 success, 1 usage error, 2 runtime error.

#include <cstdio>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nrc/adapt.hpp"
#include "nrc/data_io.hpp"
#include "nrc/math.hpp"
#include "nrc/model.hpp"
#include "nrc/neighborhood.hpp"

namespace {

std::vector<double> parse_doubles(const std::string& csv) {
    std::vector<double> out;
    std::string cur;
    std::istringstream in(csv);
    while (std::getline(in, cur, ',')) {
        if (cur.empty()) continue;
        out.push_back(std::stod(cur));
    }
    return out;
}

std::vector<std::size_t> parse_sizes(const std::string& csv) {
    std::vector<std::size_t> out;
    std::string cur;
    std::istringstream in(csv);
    while (std::getline(in, cur, ',')) {
        if (cur.empty()) continue;
        out.push_back(static_cast<std::size_t>(std::stoul(cur)));
    }
    return out;
}

struct DatagenArgs {
    int classes = 3, dim = 2, per_class = 64;
    double separation = 4.0, rotation_deg = 0.0, scale = 1.0, sigma = 1.0;
    double offset = 0.0;
    std::string translate, prior;
    std::uint64_t seed = 0;
    std::string out_src, out_tgt;
};

void run_datagen(const DatagenArgs& a) {
    nrc::ShiftSpec spec;
    spec.n_classes = a.classes;
    spec.dim = a.dim;
    spec.samples_per_class = a.per_class;
    spec.class_separation = a.separation;
    spec.rotation_angle = a.rotation_deg * std::numbers::pi / 180.0;
    spec.scale = a.scale;
    spec.noise_sigma = a.sigma;
    spec.layout_offset = a.offset;
    spec.seed = a.seed;
    if (!a.translate.empty()) spec.translation = parse_doubles(a.translate);
    if (!a.prior.empty()) spec.label_prior = parse_doubles(a.prior);
    const auto [src, tgt] = nrc::generate_pair(spec);
    nrc::save_csv(src, a.out_src);
    nrc::save_csv(tgt, a.out_tgt);
    std::cout << "wrote " << src.size() << " source rows to " << a.out_src << ", "
              << tgt.size() << " target rows to " << a.out_tgt << "\n";
}

struct PretrainArgs {
    std::string data, out;
    int epochs = 50, batch = 64;
    double smoothing = 0.1, lr = 5e-2, momentum = 0.9;
    std::string hidden = "64,64";
    int feature_dim = 32;
    bool no_weight_norm = false;
    std::uint64_t seed = 0;
};

void run_pretrain(const PretrainArgs& a) {
    const nrc::Dataset data = nrc::load_csv(a.data);
    if (!data.labeled)
        throw std::runtime_error("pretrain: " + a.data + " has no labels");
    const int n_classes = data.num_classes();
    nrc::MlpModel model =
        nrc::make_mlp(data.dim(), parse_sizes(a.hidden), a.feature_dim, n_classes,
                      !a.no_weight_norm, a.seed);
    nrc::PretrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.smoothing = a.smoothing;
    cfg.learning_rate = a.lr;
    cfg.momentum = a.momentum;
    cfg.batch_size = a.batch;
    cfg.seed = a.seed;
    const auto history = nrc::pretrain_source(model, data.features, data.labels, cfg);
    nrc::save_model(model, a.out);
    if (!history.empty())
        std::cout << "pretrained " << a.epochs << " epochs: loss="
                  << history.back().loss << " train_acc=" << history.back().accuracy
                  << "\n";
    std::cout << "saved model to " << a.out << "\n";
}

struct AdaptArgs {
    std::string model, target, metrics, out_model;
    int k = 3, m = 2, epochs = 30, batch = 64, purity_k = 5;
    double r = 0.1, expanded_r = 0.1, lr = 5e-2, momentum = 0.9;
    std::uint64_t seed = 0;
    std::size_t fifo_capacity = 0;
    bool no_affinity = false, no_expanded = false, dedup_expanded = false;
    bool no_self = false, no_div = false, no_neighbor = false;
};

nrc::AdaptConfig to_config(const AdaptArgs& a) {
    nrc::AdaptConfig cfg;
    cfg.affinity = {a.k, a.m, a.r, a.dedup_expanded};
    cfg.expanded_r = a.expanded_r;
    cfg.batch_size = a.batch;
    cfg.epochs = a.epochs;
    cfg.learning_rate = a.lr;
    cfg.momentum = a.momentum;
    cfg.seed = a.seed;
    cfg.use_neighbor = !a.no_neighbor;
    cfg.use_expanded = !a.no_expanded;
    cfg.use_self = !a.no_self;
    cfg.use_div = !a.no_div;
    cfg.use_affinity = !a.no_affinity;
    cfg.fifo_capacity = a.fifo_capacity;
    cfg.purity_k = a.purity_k;
    return cfg;
}

void run_adapt(const AdaptArgs& a) {
    nrc::MlpModel model = nrc::load_model(a.model);
    const nrc::Dataset target =
        nrc::load_csv(a.target, static_cast<int>(model.n_classes()));
    const nrc::AdaptConfig cfg = to_config(a);
    const std::string config_line = nrc::resolved_config_string(cfg) +
                                    " model=" + a.model + " target=" + a.target;
    std::cout << "# " << config_line << "\n";
    const nrc::Dataset* eval = target.labeled ? &target : nullptr;
    const nrc::RunHistory hist = nrc::adapt(model, nrc::unlabeled_view(target), cfg, eval);
    if (!a.metrics.empty()) nrc::write_metrics_csv(a.metrics, config_line, hist);
    if (!a.out_model.empty()) nrc::save_model(model, a.out_model);
    if (!hist.epochs.empty()) {
        std::cout << "final: acc_target=" << nrc::detail::fmt_g(hist.final_accuracy())
                  << " total_loss=" << nrc::detail::fmt_g(hist.epochs.back().total)
                  << " shared_ratio=" << nrc::detail::fmt_g(hist.epochs.back().shared_ratio)
                  << "\n";
    }
}

struct AnalyzeArgs {
    std::string model, data, out, dump_features, dump_expanded;
    int k = 5, m = 2;
    double r = 0.1, expanded_r = 0.1;
};

void run_analyze(const AnalyzeArgs& a) {
    const nrc::MlpModel model = nrc::load_model(a.model);
    const nrc::Dataset data = nrc::load_csv(a.data, static_cast<int>(model.n_classes()));
    const nrc::Banks banks = nrc::init_banks(model, data.features);
    const nrc::AffinityConfig aff{a.k, a.m, a.r, false};
    const nrc::NeighborTable table = nrc::build_neighbor_table(banks, aff);

    std::ofstream out(a.out);
    if (!out) throw std::runtime_error("analyze: cannot open " + a.out);
    out << "query_id,rank,neighbor_id,cosine,affinity\n";
    for (std::size_t i = 0; i < table.size(); ++i)
        for (std::size_t pos = 0; pos < table.k_neighbors[i].size(); ++pos)
            out << i << ',' << pos + 1 << ',' << table.k_neighbors[i][pos] << ','
                << nrc::detail::fmt_g(table.k_cosines[i][pos]) << ','
                << nrc::detail::fmt_g(table.affinities[i][pos]) << "\n";
    std::cout << "wrote neighbor table (" << table.size() << " queries, k=" << a.k
              << ") to " << a.out << "\n";

    if (!a.dump_expanded.empty()) {
        const nrc::ExpandedTable etab = nrc::build_expanded_table(banks, table, aff);
        std::ofstream eout(a.dump_expanded);
        if (!eout) throw std::runtime_error("analyze: cannot open " + a.dump_expanded);
        eout << "query_id,rank,neighbor_id,cosine,affinity\n";
        for (std::size_t i = 0; i < etab.size(); ++i)
            for (std::size_t pos = 0; pos < etab.members[i].size(); ++pos) {
                const int j = etab.members[i][pos];
                eout << i << ',' << pos + 1 << ',' << j << ','
                     << nrc::detail::fmt_g(nrc::cosine_sim(banks.features().row(i),
                                                           banks.features().row(j)))
                     << ',' << nrc::detail::fmt_g(a.expanded_r) << "\n";
            }
        std::cout << "wrote expanded table to " << a.dump_expanded << "\n";
    }

    if (!a.dump_features.empty()) {
        // feature dump for external visualization; label column carries the
        // model's predicted class
        nrc::Dataset dump;
        dump.features = banks.features();
        dump.labeled = true;
        dump.labels.reserve(banks.size());
        for (std::size_t i = 0; i < banks.size(); ++i)
            dump.labels.push_back(static_cast<int>(nrc::argmax(banks.scores().row(i))));
        nrc::save_csv(dump, a.dump_features);
        std::cout << "wrote feature dump to " << a.dump_features << "\n";
    }

    if (data.labeled) {
        const nrc::QualityReport q =
            nrc::neighbor_quality(banks.features(), banks.scores(), data.labels, a.k, a.m);
        std::cout << "k,all_nn,rnn,nrnn\n";
        for (int pos = 0; pos < a.k; ++pos)
            std::cout << pos + 1 << ',' << nrc::detail::fmt_g(q.all_ratio[pos]) << ','
                      << nrc::detail::fmt_g(q.rnn_ratio[pos]) << ','
                      << nrc::detail::fmt_g(q.nrnn_ratio[pos]) << "\n";
        const nrc::PurityStats ps = nrc::purity_curve(banks, data, a.k);
        std::cout << "purity: shared=" << nrc::detail::fmt_g(ps.shared_ratio)
                  << " shared_correct=" << nrc::detail::fmt_g(ps.shared_correct_ratio)
                  << "\n";
    } else {
        std::cout << "(labels unavailable; skipping quality ratios)\n";
    }
}

struct AblateArgs {
    std::string source, target, out;
    int k = 3, m = 2, epochs = 30, batch = 64;
    double r = 0.1, expanded_r = 0.1, lr = 5e-2, momentum = 0.9;
    std::uint64_t seed = 0;
    int seeds = 5, jobs = 1;
    int pretrain_epochs = 50, pretrain_batch = 64;
    double smoothing = 0.1, pretrain_lr = 5e-2;
    std::string hidden = "64,64";
    int feature_dim = 32;
};

void run_ablate(const AblateArgs& a) {
    const nrc::Dataset source = nrc::load_csv(a.source);
    const nrc::Dataset target = nrc::load_csv(a.target);
    nrc::AdaptConfig base;
    base.affinity = {a.k, a.m, a.r, false};
    base.expanded_r = a.expanded_r;
    base.batch_size = a.batch;
    base.epochs = a.epochs;
    base.learning_rate = a.lr;
    base.momentum = a.momentum;
    base.seed = a.seed;
    nrc::AblationOptions opt;
    opt.pretrain.epochs = a.pretrain_epochs;
    opt.pretrain.smoothing = a.smoothing;
    opt.pretrain.learning_rate = a.pretrain_lr;
    opt.pretrain.batch_size = a.pretrain_batch;
    opt.hidden = parse_sizes(a.hidden);
    opt.feature_dim = a.feature_dim;
    opt.n_seeds = a.seeds;
    opt.jobs = a.jobs;
    const auto rows = nrc::run_ablation_grid(base, source, target, opt);
    nrc::write_ablation_csv(a.out, rows);

    // seed-averaged summary per cell, in grid order
    std::cout << "config_id,mean_final_acc\n";
    for (const auto& cell : nrc::ablation_cells(base)) {
        double sum = 0.0;
        int count = 0;
        for (const auto& row : rows)
            if (row.config_id == cell.config_id) {
                sum += row.final_acc;
                ++count;
            }
        if (count > 0)
            std::cout << cell.config_id << ',' << nrc::detail::fmt_g(sum / count) << "\n";
    }
    std::cout << "wrote " << rows.size() << " rows to " << a.out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neighborhood-reciprocity clustering for source-free domain adaptation"};
    app.require_subcommand(1);
    app.set_config("--spec", "",
                   "flat key=value config file (keys like adapt.k or an [adapt] section), "
                   "merged under flags");

    DatagenArgs dg;
    auto* datagen = app.add_subcommand("datagen", "generate a synthetic source/target pair");
    datagen->fallthrough();
    datagen->add_option("--classes", dg.classes)->check(CLI::PositiveNumber)
        ->capture_default_str();
    datagen->add_option("--dim", dg.dim)->check(CLI::PositiveNumber)->capture_default_str();
    datagen->add_option("--per-class", dg.per_class)->check(CLI::PositiveNumber)
        ->capture_default_str();
    datagen->add_option("--separation", dg.separation)->capture_default_str();
    datagen->add_option("--rotation-deg", dg.rotation_deg)->capture_default_str();
    datagen->add_option("--scale", dg.scale)->capture_default_str();
    datagen->add_option("--sigma", dg.sigma)->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    datagen->add_option("--offset", dg.offset,
                        "constellation center offset from the rotation origin")
        ->capture_default_str();
    datagen->add_option("--translate", dg.translate, "comma-separated offsets");
    datagen->add_option("--prior", dg.prior, "comma-separated class weights");
    datagen->add_option("--seed", dg.seed)->capture_default_str();
    datagen->add_option("--out-src", dg.out_src)->required();
    datagen->add_option("--out-tgt", dg.out_tgt)->required();

    PretrainArgs pt;
    auto* pretrain = app.add_subcommand("pretrain", "train the source model");
    pretrain->fallthrough();
    pretrain->add_option("--data", pt.data)->required();
    pretrain->add_option("--out", pt.out)->required();
    pretrain->add_option("--epochs", pt.epochs)->check(CLI::PositiveNumber)
        ->capture_default_str();
    pretrain->add_option("--smoothing", pt.smoothing)->check(CLI::Range(0.0, 0.999))
        ->capture_default_str();
    pretrain->add_option("--lr", pt.lr)->check(CLI::PositiveNumber)->capture_default_str();
    pretrain->add_option("--momentum", pt.momentum)->capture_default_str();
    pretrain->add_option("--batch", pt.batch)->check(CLI::PositiveNumber)
        ->capture_default_str();
    pretrain->add_option("--hidden", pt.hidden, "comma-separated hidden widths")
        ->capture_default_str();
    pretrain->add_option("--feature-dim", pt.feature_dim)->check(CLI::PositiveNumber)
        ->capture_default_str();
    pretrain->add_flag("--no-weight-norm", pt.no_weight_norm);
    pretrain->add_option("--seed", pt.seed)->capture_default_str();

    AdaptArgs ad;
    auto* adapt = app.add_subcommand("adapt", "adapt a source model to unlabeled targets");
    adapt->fallthrough();
    adapt->add_option("--model", ad.model)->required();
    adapt->add_option("--target", ad.target)->required();
    adapt->add_option("--k", ad.k)->check(CLI::PositiveNumber)->capture_default_str();
    adapt->add_option("--m", ad.m)->check(CLI::PositiveNumber)->capture_default_str();
    adapt->add_option("--r", ad.r)->capture_default_str();
    adapt->add_option("--expanded-r", ad.expanded_r)->capture_default_str();
    adapt->add_option("--epochs", ad.epochs)->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    adapt->add_option("--batch", ad.batch)->check(CLI::PositiveNumber)->capture_default_str();
    adapt->add_option("--lr", ad.lr)->check(CLI::PositiveNumber)->capture_default_str();
    adapt->add_option("--momentum", ad.momentum)->capture_default_str();
    adapt->add_option("--seed", ad.seed)->capture_default_str();
    adapt->add_option("--metrics", ad.metrics, "per-epoch metrics CSV");
    adapt->add_option("--out", ad.out_model, "save the adapted model here");
    adapt->add_option("--fifo-capacity", ad.fifo_capacity,
                      "fixed-capacity bank instead of the full bank");
    adapt->add_option("--purity-k", ad.purity_k)->check(CLI::PositiveNumber)
        ->capture_default_str();
    adapt->add_flag("--no-affinity", ad.no_affinity);
    adapt->add_flag("--no-expanded", ad.no_expanded);
    adapt->add_flag("--dedup-expanded", ad.dedup_expanded);
    adapt->add_flag("--no-self", ad.no_self);
    adapt->add_flag("--no-div", ad.no_div);
    adapt->add_flag("--no-neighbor", ad.no_neighbor);

    AnalyzeArgs an;
    auto* analyze = app.add_subcommand("analyze", "dump neighbor tables and quality stats");
    analyze->fallthrough();
    analyze->add_option("--model", an.model)->required();
    analyze->add_option("--data", an.data)->required();
    analyze->add_option("--k", an.k)->check(CLI::PositiveNumber)->capture_default_str();
    analyze->add_option("--m", an.m)->check(CLI::PositiveNumber)->capture_default_str();
    analyze->add_option("--r", an.r)->capture_default_str();
    analyze->add_option("--expanded-r", an.expanded_r)->capture_default_str();
    analyze->add_option("--out", an.out)->required();
    analyze->add_option("--dump-features", an.dump_features);
    analyze->add_option("--dump-expanded", an.dump_expanded);

    AblateArgs ab;
    auto* ablate = app.add_subcommand("ablate", "run the loss-term ablation grid");
    ablate->fallthrough();
    ablate->add_option("--source", ab.source)->required();
    ablate->add_option("--target", ab.target)->required();
    ablate->add_option("--out", ab.out)->required();
    ablate->add_option("--k", ab.k)->check(CLI::PositiveNumber)->capture_default_str();
    ablate->add_option("--m", ab.m)->check(CLI::PositiveNumber)->capture_default_str();
    ablate->add_option("--r", ab.r)->capture_default_str();
    ablate->add_option("--expanded-r", ab.expanded_r)->capture_default_str();
    ablate->add_option("--epochs", ab.epochs)->check(CLI::PositiveNumber)
        ->capture_default_str();
    ablate->add_option("--batch", ab.batch)->check(CLI::PositiveNumber)
        ->capture_default_str();
    ablate->add_option("--lr", ab.lr)->check(CLI::PositiveNumber)->capture_default_str();
    ablate->add_option("--momentum", ab.momentum)->capture_default_str();
    ablate->add_option("--seed", ab.seed)->capture_default_str();
    ablate->add_option("--seeds", ab.seeds)->check(CLI::PositiveNumber)
        ->capture_default_str();
    ablate->add_option("--jobs", ab.jobs)->check(CLI::PositiveNumber)->capture_default_str();
    ablate->add_option("--pretrain-epochs", ab.pretrain_epochs)->check(CLI::PositiveNumber)
        ->capture_default_str();
    ablate->add_option("--pretrain-lr", ab.pretrain_lr)->check(CLI::PositiveNumber)
        ->capture_default_str();
    ablate->add_option("--pretrain-batch", ab.pretrain_batch)->check(CLI::PositiveNumber)
        ->capture_default_str();
    ablate->add_option("--smoothing", ab.smoothing)->check(CLI::Range(0.0, 0.999))
        ->capture_default_str();
    ablate->add_option("--hidden", ab.hidden)->capture_default_str();
    ablate->add_option("--feature-dim", ab.feature_dim)->check(CLI::PositiveNumber)
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        std::cerr << app.help() << "\n";
        return 1;
    }

    try {
        if (datagen->parsed()) run_datagen(dg);
        if (pretrain->parsed()) run_pretrain(pt);
        if (adapt->parsed()) run_adapt(ad);
        if (analyze->parsed()) run_analyze(an);
        if (ablate->parsed()) run_ablate(ab);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

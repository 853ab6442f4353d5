#include <catch2/catch.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#ifndef NRC_CLI_PATH
#error "NRC_CLI_PATH must point at the built cli binary"
#endif

namespace {

namespace fs = std::filesystem;

struct CliResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

fs::path work_dir() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "nrc_cli_tests";
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

CliResult run_cli(const std::string& args) {
    const fs::path out_file = work_dir() / "last_output.txt";
    const std::string cmd =
        std::string(NRC_CLI_PATH) + " " + args + " > " + out_file.string() + " 2>&1";
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::ifstream in(out_file);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// metrics CSVs are identical up to the wall-clock column
std::string mask_seconds(const std::string& csv) {
    std::istringstream in(csv);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] != '#' && line.find("epoch,") != 0) {
            const auto cut = line.rfind(',');
            if (cut != std::string::npos) line = line.substr(0, cut);
        }
        out << line << "\n";
    }
    return out.str();
}

}  // namespace

TEST_CASE("cli exit code contract") {
    CHECK(run_cli("").exit_code == 1);           // no subcommand -> usage
    CHECK(run_cli("frobnicate").exit_code == 1); // unknown subcommand

    const CliResult bad_flag = run_cli("adapt --model x --target y --bogus-flag 1");
    CHECK(bad_flag.exit_code == 1);

    const CliResult bad_k =
        run_cli("adapt --model x.nrcm --target y.csv --k 0");
    CHECK(bad_k.exit_code == 1);
    CHECK(bad_k.output.find("--k") != std::string::npos);

    const CliResult missing =
        run_cli("pretrain --data /nonexistent/input.csv --out " +
                (work_dir() / "m.nrcm").string());
    CHECK(missing.exit_code == 2);

    CHECK(run_cli("--help").exit_code == 0);
}

TEST_CASE("cli pipeline: datagen, pretrain, adapt, analyze, ablate") {
    const fs::path dir = work_dir();
    const std::string src = (dir / "src.csv").string();
    const std::string tgt = (dir / "tgt.csv").string();
    const std::string model = (dir / "model.nrcm").string();
    const std::string metrics1 = (dir / "run1.csv").string();
    const std::string metrics2 = (dir / "run2.csv").string();
    const std::string stats = (dir / "stats.csv").string();
    const std::string grid = (dir / "grid.csv").string();

    const CliResult gen = run_cli(
        "datagen --classes 3 --dim 2 --per-class 24 --separation 4 --sigma 1 "
        "--rotation-deg 15 --seed 7 --out-src " + src + " --out-tgt " + tgt);
    REQUIRE(gen.exit_code == 0);
    REQUIRE(fs::exists(src));
    REQUIRE(fs::exists(tgt));

    const CliResult pre = run_cli(
        "pretrain --data " + src + " --epochs 15 --smoothing 0.1 --lr 0.05 --batch 16 "
        "--seed 7 --out " + model);
    REQUIRE(pre.exit_code == 0);
    REQUIRE(fs::exists(model));

    const std::string adapt_args =
        "adapt --model " + model + " --target " + tgt +
        " --k 3 --m 2 --r 0.1 --epochs 3 --batch 16 --lr 0.005 --seed 7 --metrics ";
    const CliResult ad1 = run_cli(adapt_args + metrics1);
    REQUIRE(ad1.exit_code == 0);
    const CliResult ad2 = run_cli(adapt_args + metrics2);
    REQUIRE(ad2.exit_code == 0);

    const std::string csv1 = slurp(metrics1);
    CHECK(csv1.rfind("# ", 0) == 0);  // resolved config is the first line
    CHECK(csv1.find("k=3") != std::string::npos);
    CHECK(csv1.find("batch=16") != std::string::npos);
    // identical seed, config and data -> identical metrics (timing aside)
    CHECK(mask_seconds(csv1) == mask_seconds(slurp(metrics2)));

    const CliResult an = run_cli("analyze --model " + model + " --data " + tgt +
                                 " --k 5 --m 2 --out " + stats);
    REQUIRE(an.exit_code == 0);
    const std::string stats_csv = slurp(stats);
    CHECK(stats_csv.rfind("query_id,rank,neighbor_id,cosine,affinity", 0) == 0);
    CHECK(an.output.find("purity:") != std::string::npos);

    const CliResult ab = run_cli(
        "ablate --source " + src + " --target " + tgt +
        " --k 3 --m 2 --epochs 2 --batch 16 --lr 0.005 --pretrain-epochs 5 "
        "--seeds 2 --jobs 2 --seed 3 --out " + grid);
    REQUIRE(ab.exit_code == 0);
    std::ifstream gin(grid);
    std::string line;
    REQUIRE(std::getline(gin, line));
    CHECK(line == "config_id,toggles,k,m,r,seed,final_acc");
    int rows = 0;
    while (std::getline(gin, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 7 * 2);
}

TEST_CASE("cli merges a key=value config file under explicit flags") {
    const fs::path dir = work_dir();
    const std::string conf = (dir / "gen.conf").string();
    {
        std::ofstream out(conf);
        out << "[datagen]\nclasses=4\nper-class=10\nseed=9\n";
    }
    const std::string src = (dir / "conf_src.csv").string();
    const std::string tgt = (dir / "conf_tgt.csv").string();
    const CliResult from_file = run_cli("datagen --spec " + conf + " --out-src " + src +
                                        " --out-tgt " + tgt);
    REQUIRE(from_file.exit_code == 0);
    CHECK(from_file.output.find("wrote 40 source rows") != std::string::npos);

    // an explicit flag wins over the file value
    const CliResult overridden = run_cli("datagen --spec " + conf +
                                         " --per-class 6 --out-src " + src +
                                         " --out-tgt " + tgt);
    REQUIRE(overridden.exit_code == 0);
    CHECK(overridden.output.find("wrote 24 source rows") != std::string::npos);
}

TEST_CASE("cli rejects an unreadable model and a mismatched dataset") {
    const fs::path dir = work_dir();
    const std::string junk = (dir / "junk.nrcm").string();
    {
        std::ofstream out(junk, std::ios::binary);
        out << "not a model";
    }
    const CliResult r = run_cli("analyze --model " + junk + " --data " + junk +
                                " --out " + (dir / "s.csv").string());
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("error:") != std::string::npos);
}

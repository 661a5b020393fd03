#include <gtest/gtest.h>
#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "upl/upl.hpp"

namespace fs = std::filesystem;
using namespace upl;

namespace {

const fs::path& work() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "upl_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

int run(const std::string& args) {
    const std::string cmd = std::string(UPL_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (line.back() == ',') f.emplace_back();
        rows.push_back(f);
    }
    return rows;
}

fs::path w(const std::string& rel) { return work() / rel; }
std::string q(const std::string& rel) { return "'" + w(rel).string() + "'"; }

// Tiny data set and a two-epoch source model shared by the tests.
struct Shared {
    Shared() {
        std::ofstream(w("small.cfg")) << "# tiny run\n[data]\nseed = 42\n[pretrain]\nepochs = 2\nbase_channels = 4\n"
                                         "[adapt]\nK = 2\nepochs = 1\nlr = 0.001\n";
        ok = run("gen-data --out " + q("data") + " --seed 42 --cases 10") == 0 &&
             run("pretrain --data " + q("data") + " --config " + q("small.cfg") + " --out " + q("pre")) == 0;
    }
    bool ok = false;
};

const Shared& shared() {
    static const Shared s;
    return s;
}

}  // namespace

TEST(CliGenData, WritesSixFilesAndIsIdempotent) {
    ASSERT_TRUE(shared().ok);
    ASSERT_EQ(run("gen-data --out " + q("data2") + " --seed 42 --cases 10"), 0);
    int files = 0;
    for (const char* dom : {"source", "target"})
        for (const char* split : {"train", "val", "test"}) {
            const std::string name = std::string(dom) + "_" + split + ".upld";
            const std::string a = slurp(w("data") / name);
            ASSERT_FALSE(a.empty()) << name;
            EXPECT_EQ(a, slurp(w("data2") / name)) << name;
            const SliceSet s = dataset_load(std::vector<std::uint8_t>(a.begin(), a.end()));
            const std::size_t n = static_cast<std::size_t>(s.size());
            EXPECT_EQ(a.size(), 22 + 4 * n + 5 * n * 64 * 64);
            ++files;
        }
    EXPECT_EQ(files, 6);
    const auto m = nlohmann::json::parse(slurp(w("data/manifest.json")));
    EXPECT_EQ(m["outputs"].size(), 6u);
    EXPECT_EQ(m["content_hash"].get<std::string>().size(), 40u);
    EXPECT_EQ(slurp(w("data/manifest.json")), slurp(w("data2/manifest.json")));
    EXPECT_EQ(run("gen-data --out " + q("x") + " --benchmark nope"), 2);
}

TEST(CliPretrain, LogsEveryEpochAndReportsMissingData) {
    ASSERT_TRUE(shared().ok);
    std::istringstream log(slurp(w("pre/train_log.jsonl")));
    std::string line;
    int epochs = 0;
    while (std::getline(log, line))
        if (nlohmann::json::parse(line).contains("epoch")) ++epochs;
    EXPECT_EQ(epochs, 2);
    const Checkpoint ck = checkpoint_load(read_file(w("pre/model.uplc").string()));
    EXPECT_EQ(ck.model.head_count(), 1);
    EXPECT_EQ(ck.meta.seed, 42u);
    EXPECT_EQ(run("pretrain --data " + q("missing") + " --out " + q("x")), 3);
}

TEST(CliPretrain, ConfigErrorsExitWithUsageCode) {
    std::ofstream(w("bad.cfg")) << "[adapt]\nK = 2\nbogus = 3\n";
    EXPECT_EQ(run("pretrain --data " + q("data") + " --config " + q("bad.cfg") + " --out " + q("x")), 2);
}

TEST(CliPretrain, NonFiniteLossExitsWithDiagnostic) {
    ASSERT_TRUE(shared().ok);
    std::ofstream(w("nan.cfg")) << "[pretrain]\nepochs = 2\nbase_channels = 4\nlr = 1e30\n";
    EXPECT_EQ(run("pretrain --data " + q("data") + " --config " + q("nan.cfg") + " --out " + q("nan")), 4);
    const auto d = nlohmann::json::parse(slurp(w("nan/diagnostic.json")));
    EXPECT_NE(d["error"].get<std::string>().find("non-finite"), std::string::npos);
}

TEST(CliAdapt, MethodsAndAblationFlags) {
    ASSERT_TRUE(shared().ok);
    const std::string common = " --checkpoint " + q("pre/model.uplc") + " --data " + q("data") + " --config " +
                               q("small.cfg");
    ASSERT_EQ(run("adapt --method ptbn" + common + " --out " + q("ptbn")), 0);
    const Checkpoint pt = checkpoint_load(read_file(w("ptbn/model.uplc").string()));
    EXPECT_EQ(pt.optimizer.step, 0u);
    EXPECT_TRUE(pt.optimizer.empty());

    ASSERT_EQ(run("adapt --method upl --ablate TFS --dump-pgm 1" + common + " --out " + q("noTFS")), 0);
    const auto m = nlohmann::json::parse(slurp(w("noTFS/manifest.json")));
    const auto& ab = m["config"]["ablation"];
    EXPECT_FALSE(ab["TFS"].get<bool>());
    EXPECT_TRUE(ab["M"].get<bool>() && ab["TDG"].get<bool>() && ab["T"].get<bool>() && ab["LMENT"].get<bool>());
    // Without TFS there are no bundles to dump.
    EXPECT_FALSE(fs::exists(w("noTFS/pgm")));

    ASSERT_EQ(run("adapt --method upl --dump-pgm 1" + common + " --out " + q("upl")), 0);
    const std::string pgm = slurp(w("upl/pgm/epoch0_reliability.pgm"));
    EXPECT_EQ(pgm.rfind("P5\n64 64\n255\n", 0), 0u);
    EXPECT_EQ(pgm.size(), 13u + 64 * 64);
    EXPECT_EQ(csv_rows(w("upl/reliability.csv")).size(), 1u);

    for (const char* method : {"tent", "selftrain", "finetune-train", "finetune-valid", "target-only"})
        EXPECT_EQ(run(std::string("adapt --method ") + method + common + " --out " + q(std::string("m_") + method)), 0)
            << method;
    EXPECT_EQ(run("adapt --method tent --ablate TFS" + common + " --out " + q("x")), 2);
    EXPECT_EQ(run("adapt --method upl --ablate XYZ" + common + " --out " + q("x")), 2);
    EXPECT_EQ(run("adapt --method nope" + common + " --out " + q("x")), 2);
}

TEST(CliEval, DeterministicSummaryAndTTest) {
    ASSERT_TRUE(shared().ok);
    const std::string base = "eval --checkpoint " + q("pre/model.uplc") + " --data " + q("data/target_test.upld");
    ASSERT_EQ(run(base + " --mode single --method source --out " + q("ev/a.csv")), 0);
    ASSERT_EQ(run(base + " --mode single --method source --out " + q("ev/b.csv")), 0);
    EXPECT_EQ(slurp(w("ev/a.csv")), slurp(w("ev/b.csv")));
    EXPECT_EQ(slurp(w("ev/a_summary.csv")), slurp(w("ev/b_summary.csv")));

    // Summary means against a hand aggregation of the per-case rows.
    std::map<int, std::pair<double, int>> by_class;
    for (const auto& r : csv_rows(w("ev/a.csv"))) {
        ASSERT_EQ(r.size(), 6u);
        auto& [sum, n] = by_class[std::stoi(r[2])];
        sum += std::stod(r[3]);
        ++n;
        EXPECT_EQ(r[4].empty(), r[5] == "assd_undefined");
    }
    for (const auto& r : csv_rows(w("ev/a_summary.csv"))) {
        const auto& [sum, n] = by_class.at(std::stoi(r[1]));
        EXPECT_EQ(std::stoi(r[2]), n);
        EXPECT_NEAR(std::stod(r[3]), sum / n, 1e-8);
    }

    // Against itself every difference is zero.
    EXPECT_EQ(run(base + " --mode single --out " + q("ev/c.csv") + " --baseline " + q("ev/a.csv")), 3);
    ASSERT_EQ(run("eval --checkpoint " + q("upl/model.uplc") + " --data " + q("data/target_test.upld") +
                  " --out " + q("ev/u.csv") + " --baseline " + q("ev/a.csv")),
              0);
    const auto t = nlohmann::json::parse(slurp(w("ev/u_ttest.json")));
    EXPECT_EQ(t["n"].get<int>(), static_cast<int>(csv_rows(w("ev/a.csv")).size()) / 2);

    ASSERT_EQ(run("gen-data --out " + q("c2") + " --benchmark SYN-A2B-C2 --cases 10"), 0);
    EXPECT_EQ(run("eval --checkpoint " + q("pre/model.uplc") + " --data " + q("c2/target_test.upld") + " --out " +
                  q("x.csv")),
              3);
    EXPECT_EQ(run(base + " --mode both --out " + q("x.csv")), 2);
}

TEST(CliAblate, GridRowsAndSinglePointMatchesAdapt) {
    ASSERT_TRUE(shared().ok);
    const std::string common = " --checkpoint " + q("pre/model.uplc") + " --data " + q("data") + " --config " +
                               q("small.cfg");
    ASSERT_EQ(run("ablate" + common + " --out " + q("abl/grid.csv") + " --grid K=1..2 tau=0.9,0.95"), 0);
    EXPECT_EQ(csv_rows(w("abl/grid.csv")).size(), 4u);
    EXPECT_EQ(run("ablate" + common + " --out " + q("abl/none.csv")), 2);
    EXPECT_EQ(run("ablate" + common + " --out " + q("abl/none.csv") + " --grid K="), 2);

    // One grid point: same number as adapt followed by eval on the val split.
    ASSERT_EQ(run("ablate" + common + " --out " + q("abl/one.csv") + " --grid K=2"), 0);
    const auto rows = csv_rows(w("abl/one.csv"));
    ASSERT_EQ(rows.size(), 1u);
    ASSERT_EQ(run("eval --checkpoint " + q("upl/model.uplc") + " --data " + q("data/target_val.upld") + " --config " +
                  q("small.cfg") + " --out " + q("abl/val.csv")),
              0);
    double sum = 0;
    const auto per = csv_rows(w("abl/val.csv"));
    for (const auto& r : per) sum += std::stod(r[3]);
    EXPECT_NEAR(std::stod(rows[0][3]), sum / static_cast<double>(per.size()), 1e-8);
}

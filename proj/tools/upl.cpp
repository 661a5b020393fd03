// Command-line driver: data generation, pretraining, adaptation, evaluation
// and hyper-parameter sweeps. Exit codes: 0 ok, 2 usage/config, 3 data or
// file format, 4 non-finite loss.

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "upl/upl.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace upl;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

struct CliError : std::runtime_error {
    int code;
    CliError(int c, const std::string& m) : std::runtime_error(m), code(c) {}
};

[[noreturn]] void usage_error(const std::string& m) { throw CliError(kUsage, m); }
[[noreturn]] void data_error(const std::string& m) { throw CliError(kData, m); }

// Non-finite loss, with whatever was logged before it.
struct NumericFailure : std::runtime_error {
    json diagnostic;
    NumericFailure(const std::string& m, json d) : std::runtime_error(m), diagnostic(std::move(d)) {}
};

// ---------------------------------------------------------------------------
// Files and hashes

std::string hex(const unsigned char* p, unsigned n) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (unsigned i = 0; i < n; ++i) {
        s += digits[p[i] >> 4];
        s += digits[p[i] & 15];
    }
    return s;
}

// SHA-1 over "blob <size>\0<content>", as git hashes a file.
std::string git_hash(const std::vector<std::uint8_t>& bytes) {
    const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
    EVP_DigestUpdate(ctx, header.data(), header.size());
    EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    return hex(md, len);
}

std::string git_hash(const std::string& s) { return git_hash(std::vector<std::uint8_t>(s.begin(), s.end())); }

std::vector<std::uint8_t> read_input(const fs::path& p) {
    if (!fs::is_regular_file(p)) data_error("missing input file " + p.string());
    return read_file(p.string());
}

void write_output(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    try {
        write_file(p.string(), bytes);
    } catch (const std::exception& e) {
        data_error(e.what());
    }
}

void write_text(const fs::path& p, const std::string& s) { write_output(p, std::vector<std::uint8_t>(s.begin(), s.end())); }

void make_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec || !fs::is_directory(p)) data_error("cannot create directory " + p.string());
}

SliceSet load_dataset(const fs::path& p) {
    try {
        return dataset_load(read_input(p), p.stem().string());
    } catch (const FormatError& e) {
        data_error(p.string() + ": " + e.what());
    }
}

Checkpoint load_checkpoint(const fs::path& p) {
    try {
        return checkpoint_load(read_input(p));
    } catch (const FormatError& e) {
        data_error(p.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Manifests and logs

// Shortest decimal that round-trips the float, so 0.95f prints as 0.95.
double tidy(float v) {
    char buf[32];
    for (int prec = 1; prec <= 9; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtof(buf, nullptr) == v) break;
    }
    return std::strtod(buf, nullptr);
}

json config_json(const AdaptConfig& c) {
    const Ablation& a = c.ablation;
    return {{"levels", c.arch.levels},
            {"base_channels", c.arch.base_channels},
            {"dropout", tidy(c.arch.dropout_rate)},
            {"K", c.K},
            {"tau", tidy(c.tau)},
            {"lambda", tidy(c.lambda)},
            {"lr_adapt", tidy(c.lr_adapt)},
            {"adapt_epochs", c.adapt_epochs},
            {"pretrain_epochs", c.pretrain_epochs},
            {"lr_pretrain", tidy(c.lr_pretrain)},
            {"lr_decay", tidy(c.lr_decay)},
            {"lr_decay_every", c.lr_decay_every},
            {"batch", c.batch_size},
            {"cleanup", c.cleanup},
            {"seed", c.seed},
            {"ablation",
             {{"M", a.use_M}, {"TDG", a.use_TDG_dropout}, {"T", a.use_T}, {"TFS", a.use_TFS}, {"LMENT", a.use_Lment}}}};
}

json seeds_json(std::uint64_t root) {
    const SeedStreams s(root);
    json streams;
    for (const char* name : {"data", "dropout", "transforms", "init", "infer"}) streams[name] = s.seed_for(name);
    return {{"root", root}, {"streams", streams}};
}

class Manifest {
   public:
    Manifest(std::string command, json config, json seeds)
        : command_(std::move(command)), config_(std::move(config)), seeds_(std::move(seeds)) {}

    void input(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
        inputs_.push_back({{"path", p.string()}, {"hash", git_hash(bytes)}});
    }
    void input(const fs::path& p) { input(p, read_input(p)); }

    // Writes the artifact and records it.
    void output(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
        write_output(p, bytes);
        outputs_.push_back({{"path", p.filename().string()}, {"hash", git_hash(bytes)}});
    }
    void output(const fs::path& p, const std::string& s) { output(p, std::vector<std::uint8_t>(s.begin(), s.end())); }

    void write(const fs::path& p) const {
        json key = {{"command", command_}, {"config", config_}, {"seeds", seeds_}, {"inputs", json::array()}};
        for (const auto& i : inputs_) key["inputs"].push_back(i["hash"]);
        json m = {{"command", command_},
                  {"content_hash", git_hash(key.dump())},
                  {"config", config_},
                  {"seeds", seeds_},
                  {"inputs", inputs_},
                  {"outputs", outputs_}};
        write_text(p, m.dump(2) + "\n");
    }

   private:
    std::string command_;
    json config_, seeds_;
    json inputs_ = json::array(), outputs_ = json::array();
};

json epoch_json(const EpochRecord& r) {
    return {{"epoch", r.epoch},          {"lr", tidy(r.lr)},
            {"loss", r.loss},            {"loss_sup", r.loss_sup},
            {"loss_ent", r.loss_ent},    {"reliability", r.reliability},
            {"val_dice", r.val_dice},    {"val_score", r.val_score}};
}

// One JSON object per epoch, then a summary line. No wall-clock fields, so
// reruns are byte-identical.
std::string log_jsonl(const TrainLog& log) {
    std::string out;
    for (const auto& r : log.epochs) out += epoch_json(r).dump() + "\n";
    out += json{{"best_epoch", log.best_epoch}, {"best_score", log.best_score}}.dump() + "\n";
    return out;
}

std::string reliability_csv(const TrainLog& log) {
    std::string out = "epoch,reliability\n";
    char buf[64];
    for (const auto& r : log.epochs) {
        std::snprintf(buf, sizeof buf, "%d,%.9g\n", r.epoch, r.reliability);
        out += buf;
    }
    return out;
}

std::vector<std::uint8_t> checkpoint_bytes(SegModel& model, const AdamState* opt, const TrainLog& log,
                                           std::uint64_t seed) {
    CheckpointMeta meta;
    meta.epoch = static_cast<std::uint32_t>(std::max(0, log.best_epoch));
    meta.seed = seed;
    meta.score = static_cast<float>(log.best_score);
    return checkpoint_save(model, opt, meta);
}

// Collects epoch records so a numeric failure can report progress.
struct Progress {
    std::vector<json> epochs;
    TrainHooks hooks() {
        TrainHooks h;
        h.on_epoch = [this](const EpochRecord& r) {
            epochs.push_back(epoch_json(r));
            std::fprintf(stderr, "epoch %d  loss %.5f  val %.4f\n", r.epoch, r.loss, r.val_score);
        };
        return h;
    }
    template <class F>
    auto run(const std::string& what, const AdaptConfig& cfg, F&& f) {
        try {
            return f();
        } catch (const NumericError& e) {
            throw NumericFailure(e.what(), {{"stage", what}, {"error", e.what()}, {"config", config_json(cfg)},
                                            {"completed_epochs", epochs}});
        }
    }
};

// ---------------------------------------------------------------------------
// Config and dataset layout

AdaptConfig load_cfg(const std::string& path, int classes) {
    if (path.empty()) {
        AdaptConfig c;
        c.validate(classes);
        return c;
    }
    if (!fs::is_regular_file(path)) usage_error("missing config file " + path);
    return load_config(path, {}, classes);
}

fs::path split_file(const fs::path& dir, const std::string& domain, const std::string& split) {
    return dir / (domain + "_" + split + ".upld");
}

const std::map<std::string, std::string> kMethods = {
    {"upl", "upl"},          {"tent", "tent"},
    {"ptbn", "ptbn"},        {"selftrain", "selftrain"},
    {"finetune-train", "ft"}, {"finetune-valid", "ft"},
    {"target-only", "to"},
};

Ablation parse_ablation(const std::string& list) {
    Ablation a;
    std::stringstream ss(list);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok == "M") a.use_M = false;
        else if (tok == "TDG") a.use_TDG_dropout = false;
        else if (tok == "T") a.use_T = false;
        else if (tok == "TFS") a.use_TFS = false;
        else if (tok == "LMENT") a.use_Lment = false;
        else usage_error("unknown ablation '" + tok + "' (expected M, TDG, T, TFS, LMENT)");
    }
    return a;
}

// ---------------------------------------------------------------------------
// Commands

struct GenArgs {
    std::string out, benchmark = "SYN-A2B";
    std::uint64_t seed = 42;
    int cases = 0;
};

int cmd_gen_data(const GenArgs& a) {
    Benchmark b;
    try {
        b = find_benchmark(a.benchmark);
    } catch (const std::invalid_argument& e) {
        usage_error(e.what());
    }
    make_dir(a.out);
    const BenchmarkData d = generate_benchmark(b, a.seed, a.cases);
    Manifest m("gen-data",
               {{"benchmark", b.name}, {"cases", a.cases > 0 ? a.cases : b.n_cases}, {"classes", b.classes}},
               {{"root", a.seed}});
    const std::pair<const char*, const DomainSplits*> domains[] = {{"source", &d.source}, {"target", &d.target}};
    for (const auto& [name, splits] : domains) {
        m.output(split_file(a.out, name, "train"), dataset_save(splits->train));
        m.output(split_file(a.out, name, "val"), dataset_save(splits->val));
        m.output(split_file(a.out, name, "test"), dataset_save(splits->test));
    }
    m.write(fs::path(a.out) / "manifest.json");
    return kOk;
}

struct TrainArgs {
    std::string data, config, out, checkpoint, method = "upl", ablate;
    std::optional<std::uint64_t> seed;
    int dump_pgm = 0;
};

int cmd_pretrain(const TrainArgs& a) {
    const SliceSet train = load_dataset(split_file(a.data, "source", "train"));
    const SliceSet val = load_dataset(split_file(a.data, "source", "val"));
    AdaptConfig cfg = load_cfg(a.config, train.classes);
    if (a.seed) cfg.seed = *a.seed;
    make_dir(a.out);
    Manifest m("pretrain", config_json(cfg), seeds_json(cfg.seed));
    m.input(split_file(a.data, "source", "train"));
    m.input(split_file(a.data, "source", "val"));
    if (!a.config.empty()) m.input(a.config);

    Progress progress;
    auto r = progress.run("pretrain", cfg, [&] { return pretrain(train, val, cfg, progress.hooks()); });
    m.output(fs::path(a.out) / "model.uplc", checkpoint_bytes(r.model, &r.optimizer, r.log, cfg.seed));
    m.output(fs::path(a.out) / "train_log.jsonl", log_jsonl(r.log));
    m.write(fs::path(a.out) / "manifest.json");
    return kOk;
}

int cmd_adapt(const TrainArgs& a) {
    const auto method = kMethods.find(a.method);
    if (method == kMethods.end()) usage_error("unknown method '" + a.method + "'");
    if (!a.ablate.empty() && a.method != "upl") usage_error("--ablate only applies to --method upl");
    if (a.dump_pgm > 0 && a.method != "upl") usage_error("--dump-pgm only applies to --method upl");

    const fs::path train_path = split_file(a.data, "target", "train"), val_path = split_file(a.data, "target", "val");
    const SliceSet labeled = load_dataset(train_path);
    const SliceSet val = load_dataset(val_path);
    const SliceSet unlabeled = labeled.without_labels();
    Checkpoint ck = load_checkpoint(a.checkpoint);
    if (ck.model.classes() != labeled.classes) {
        data_error("class count mismatch: checkpoint has " + std::to_string(ck.model.classes()) + ", data has " +
                   std::to_string(labeled.classes));
    }
    AdaptConfig cfg = load_cfg(a.config, labeled.classes);
    if (a.seed) cfg.seed = *a.seed;
    if (!a.ablate.empty()) cfg.ablation = parse_ablation(a.ablate);
    make_dir(a.out);

    json conf = config_json(cfg);
    conf["method"] = a.method;
    Manifest m("adapt", conf, seeds_json(cfg.seed));
    m.input(a.checkpoint);
    m.input(train_path);
    m.input(val_path);
    if (!a.config.empty()) m.input(a.config);

    Progress progress;
    TrainHooks hooks = progress.hooks();
    std::vector<std::pair<fs::path, std::vector<std::uint8_t>>> dumps;
    if (a.dump_pgm > 0) {
        hooks.on_bundle = [&](int epoch, int batch, const PseudoLabelBundle& b) {
            if (batch != 0 || epoch >= a.dump_pgm) return;
            const std::string stem = "epoch" + std::to_string(epoch);
            const fs::path dir = fs::path(a.out) / "pgm";
            dumps.push_back({dir / (stem + "_label.pgm"), label_pgm(b.labels, 0, labeled.classes)});
            dumps.push_back({dir / (stem + "_reliability.pgm"), reliability_pgm(b, 0)});
        };
    }

    const fs::path model_path = fs::path(a.out) / "model.uplc";
    if (a.method == "ptbn") {
        SegModel model = baseline_ptbn(ck.model, unlabeled, cfg);
        m.output(model_path, checkpoint_bytes(model, nullptr, TrainLog{}, cfg.seed));
        m.output(fs::path(a.out) / "train_log.jsonl", log_jsonl(TrainLog{}));
        m.write(fs::path(a.out) / "manifest.json");
        return kOk;
    }
    auto r = progress.run(a.method, cfg, [&] {
        if (a.method == "upl") return adapt_upl(ck.model, unlabeled, val, cfg, hooks);
        if (a.method == "tent") return baseline_tent(ck.model, unlabeled, val, cfg, hooks);
        if (a.method == "selftrain") return baseline_selftrain(ck.model, unlabeled, val, cfg, hooks);
        if (a.method == "finetune-train") return baseline_finetune(ck.model, labeled, val, cfg, hooks);
        if (a.method == "finetune-valid") return baseline_finetune(ck.model, val, val, cfg, hooks);
        return baseline_target_only(labeled, val, cfg, hooks);
    });
    m.output(model_path, checkpoint_bytes(r.model, &r.optimizer, r.log, cfg.seed));
    m.output(fs::path(a.out) / "train_log.jsonl", log_jsonl(r.log));
    m.output(fs::path(a.out) / "reliability.csv", reliability_csv(r.log));
    if (!dumps.empty()) make_dir(fs::path(a.out) / "pgm");
    for (const auto& [p, bytes] : dumps) m.output(p, bytes);
    m.write(fs::path(a.out) / "manifest.json");
    return kOk;
}

struct EvalArgs {
    std::string checkpoint, data, out, mode = "ensemble", method = "model", baseline, config;
    std::optional<std::uint64_t> seed;
};

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string results_csv(const std::vector<CaseResult>& rs) {
    std::string out = "method,case_id,class,dice,assd,flags\n";
    for (const auto& r : rs)
        for (std::size_t k = 0; k < r.dice.size(); ++k) {
            const auto& s = r.assd[k];
            out += r.method + "," + std::to_string(r.case_id) + "," + std::to_string(k + 1) + "," + fmt(r.dice[k]) +
                   "," + (s ? fmt(*s) : "") + "," + (s ? "" : "assd_undefined") + "\n";
        }
    return out;
}

std::string summary_csv(const std::vector<ClassSummary>& ss) {
    std::string out = "method,class,cases,dice_mean,dice_sd,assd_mean,assd_sd,assd_undefined\n";
    for (const auto& s : ss) {
        out += s.method + "," + std::to_string(s.cls) + "," + std::to_string(s.cases) + "," + fmt(s.dice_mean) + "," +
               fmt(s.dice_sd) + "," + fmt(s.assd_mean) + "," + fmt(s.assd_sd) + "," + std::to_string(s.assd_empty) +
               "\n";
    }
    return out;
}

// Mean foreground Dice per case from a results CSV.
std::map<int, double> case_scores(const std::string& text, const std::string& source) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("method,case_id,class,dice", 0) != 0) {
        data_error(source + ": not a results CSV");
    }
    std::map<int, std::pair<double, int>> acc;
    int n = 1;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        try {
            if (f.size() < 4) throw std::invalid_argument("short row");
            auto& [sum, count] = acc[std::stoi(f[1])];
            sum += std::stod(f[3]);
            ++count;
        } catch (const std::exception&) {
            data_error(source + ":" + std::to_string(n) + ": malformed row");
        }
    }
    std::map<int, double> out;
    for (const auto& [id, sc] : acc) out[id] = sc.first / sc.second;
    return out;
}

int cmd_eval(const EvalArgs& a) {
    if (a.mode != "ensemble" && a.mode != "single") usage_error("--mode must be ensemble or single");
    Checkpoint ck = load_checkpoint(a.checkpoint);
    const SliceSet data = load_dataset(a.data);
    if (!data.labeled()) data_error(a.data + " has no labels");
    if (ck.model.classes() != data.classes) {
        data_error("class count mismatch: checkpoint has " + std::to_string(ck.model.classes()) + ", data has " +
                   std::to_string(data.classes));
    }
    const AdaptConfig cfg = load_cfg(a.config, data.classes);
    const std::uint64_t root = a.seed ? *a.seed : ck.meta.seed;
    EvalOptions opt;
    opt.mode = a.mode == "single" ? InferMode::single : InferMode::ensemble;
    opt.cleanup = cfg.cleanup;
    opt.tau = cfg.tau;
    opt.seed = SeedStreams(root).seed_for("infer");
    opt.method = a.method;

    const fs::path out(a.out);
    if (out.has_parent_path()) make_dir(out.parent_path());
    const fs::path stem = out.parent_path() / out.stem();
    Manifest m("eval", {{"mode", a.mode}, {"method", a.method}, {"tau", tidy(cfg.tau)}, {"cleanup", cfg.cleanup}},
               {{"root", root}, {"infer", opt.seed}});
    m.input(a.checkpoint);
    m.input(a.data);

    const auto results = evaluate(ck.model, data, opt);
    const std::string csv = results_csv(results);
    const auto summary = aggregate(results);
    std::optional<std::string> ttest;
    if (!a.baseline.empty()) {
        const auto base_bytes = read_input(a.baseline);
        m.input(a.baseline, base_bytes);
        const auto mine = case_scores(csv, a.out);
        const auto theirs = case_scores(std::string(base_bytes.begin(), base_bytes.end()), a.baseline);
        std::vector<double> x, y;
        for (const auto& [id, s] : mine) {
            const auto it = theirs.find(id);
            if (it == theirs.end()) data_error("baseline has no case " + std::to_string(id));
            x.push_back(s);
            y.push_back(it->second);
        }
        if (theirs.size() != mine.size()) data_error("baseline covers different cases");
        TTestResult t;
        try {
            t = paired_t_test(x, y);
        } catch (const std::domain_error& e) {
            data_error(std::string("t-test: ") + e.what());
        }
        ttest = json{{"n", x.size()}, {"t", t.t}, {"p", t.p}}.dump(2) + "\n";
        std::cout << "paired t-test vs baseline: t " << fmt(t.t) << "  p " << fmt(t.p) << "\n";
    }
    m.output(out, csv);
    m.output(stem.string() + "_summary.csv", summary_csv(summary));
    if (ttest) m.output(stem.string() + "_ttest.json", *ttest);
    std::cout << summary_csv(summary);
    std::cout << "mean foreground dice " << fmt(mean_foreground_dice(results)) << "\n";
    m.write(stem.string() + "_manifest.json");
    return kOk;
}

struct AblateArgs {
    std::string checkpoint, data, config, out;
    std::vector<std::string> grid;
    std::optional<std::uint64_t> seed;
};

// "K=1..5", "tau=0.8,0.9" or "lambda=1".
std::pair<std::string, std::vector<double>> parse_axis(const std::string& tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) usage_error("grid entry '" + tok + "' is not name=values");
    const std::string name = tok.substr(0, eq), vals = tok.substr(eq + 1);
    if (name != "K" && name != "tau" && name != "lambda") usage_error("unknown grid axis '" + name + "'");
    std::vector<double> out;
    try {
        if (const auto dots = vals.find(".."); dots != std::string::npos) {
            const int lo = std::stoi(vals.substr(0, dots)), hi = std::stoi(vals.substr(dots + 2));
            for (int v = lo; v <= hi; ++v) out.push_back(v);
        } else {
            std::stringstream ss(vals);
            std::string v;
            while (std::getline(ss, v, ','))
                if (!v.empty()) out.push_back(std::stod(v));
        }
    } catch (const std::exception&) {
        usage_error("grid entry '" + tok + "' has a malformed value");
    }
    if (out.empty()) usage_error("grid axis '" + name + "' is empty");
    return {name, out};
}

int cmd_ablate(const AblateArgs& a) {
    if (a.grid.empty()) usage_error("empty grid");
    std::map<std::string, std::vector<double>> axes;
    for (const auto& tok : a.grid) {
        auto [name, vals] = parse_axis(tok);
        if (axes.count(name)) usage_error("grid axis '" + name + "' given twice");
        axes[name] = vals;
    }
    const fs::path train_path = split_file(a.data, "target", "train"), val_path = split_file(a.data, "target", "val");
    const SliceSet unlabeled = load_dataset(train_path).without_labels();
    const SliceSet val = load_dataset(val_path);
    Checkpoint ck = load_checkpoint(a.checkpoint);
    if (ck.model.classes() != val.classes) data_error("class count mismatch between checkpoint and data");
    AdaptConfig base = load_cfg(a.config, val.classes);
    if (a.seed) base.seed = *a.seed;
    auto axis = [&](const std::string& n, double dflt) { return axes.count(n) ? axes[n] : std::vector<double>{dflt}; };
    const auto ks = axis("K", base.K), taus = axis("tau", base.tau), lambdas = axis("lambda", base.lambda);

    json conf = config_json(base);
    conf["grid"] = a.grid;
    Manifest m("ablate", conf, seeds_json(base.seed));
    m.input(a.checkpoint);
    m.input(train_path);
    m.input(val_path);
    if (!a.config.empty()) m.input(a.config);

    std::string csv = "K,tau,lambda,val_dice,best_epoch\n";
    Progress progress;
    for (double k : ks)
        for (double tau : taus)
            for (double lambda : lambdas) {
                AdaptConfig cfg = base;
                cfg.K = static_cast<int>(k);
                cfg.tau = static_cast<float>(tau);
                cfg.lambda = static_cast<float>(lambda);
                try {
                    cfg.validate(val.classes);
                } catch (const std::invalid_argument& e) {
                    usage_error(std::string("grid point: ") + e.what());
                }
                std::fprintf(stderr, "K=%d tau=%g lambda=%g\n", cfg.K, cfg.tau, cfg.lambda);
                const auto r = progress.run("ablate", cfg, [&] { return adapt_upl(ck.model, unlabeled, val, cfg); });
                csv += std::to_string(cfg.K) + "," + fmt(cfg.tau) + "," + fmt(cfg.lambda) + "," +
                       fmt(r.log.best_score) + "," + std::to_string(r.log.best_epoch) + "\n";
            }
    const fs::path out(a.out);
    if (out.has_parent_path()) make_dir(out.parent_path());
    m.output(out, csv);
    m.write((out.parent_path() / out.stem()).string() + "_manifest.json");
    return kOk;
}

void dump_diagnostic(const std::string& where, const json& d) {
    if (where.empty()) return;
    fs::path p(where);
    if (!fs::is_directory(p)) p = p.parent_path() / (p.stem().string() + "_diagnostic.json");
    else p /= "diagnostic.json";
    try {
        write_text(p, d.dump(2) + "\n");
        std::cerr << "diagnostic written to " << p.string() << "\n";
    } catch (const std::exception&) {
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Uncertainty-aware pseudo-label adaptation for segmentation"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen-data", "Generate a synthetic source/target benchmark");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--benchmark", gen.benchmark, "Benchmark name")->capture_default_str();
    g->add_option("--seed", gen.seed, "Root seed")->capture_default_str();
    g->add_option("--cases", gen.cases, "Cases per domain (0: benchmark default)")->check(CLI::NonNegativeNumber);

    TrainArgs pre;
    auto* p = app.add_subcommand("pretrain", "Supervised training on the source domain");
    p->add_option("--data", pre.data, "Dataset directory")->required();
    p->add_option("--config", pre.config, "Config file");
    p->add_option("--out", pre.out, "Output directory")->required();
    p->add_option("--seed", pre.seed, "Override the config seed");

    TrainArgs ad;
    auto* d = app.add_subcommand("adapt", "Adapt a source checkpoint to the target domain");
    d->add_option("--method", ad.method, "upl|tent|ptbn|selftrain|finetune-train|finetune-valid|target-only")
        ->capture_default_str();
    d->add_option("--checkpoint", ad.checkpoint, "Source checkpoint")->required();
    d->add_option("--data", ad.data, "Dataset directory")->required();
    d->add_option("--config", ad.config, "Config file");
    d->add_option("--out", ad.out, "Output directory")->required();
    d->add_option("--ablate", ad.ablate, "Components to disable: M,TDG,T,TFS,LMENT");
    d->add_option("--dump-pgm", ad.dump_pgm, "Dump pseudo labels of the first batch for this many epochs");
    d->add_option("--seed", ad.seed, "Override the config seed");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Per-case Dice and ASSD on a labeled dataset file");
    e->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required();
    e->add_option("--data", ev.data, "Dataset file")->required();
    e->add_option("--mode", ev.mode, "ensemble|single")->capture_default_str();
    e->add_option("--out", ev.out, "Results CSV")->required();
    e->add_option("--method", ev.method, "Method label written to the CSV")->capture_default_str();
    e->add_option("--baseline", ev.baseline, "Results CSV for a paired t-test");
    e->add_option("--config", ev.config, "Config file (tau, cleanup)");
    e->add_option("--seed", ev.seed, "Root seed for ensemble transforms (default: checkpoint seed)");

    AblateArgs ab;
    auto* s = app.add_subcommand("ablate", "Hyper-parameter sweep scored on the target val split");
    s->add_option("--checkpoint", ab.checkpoint, "Source checkpoint")->required();
    s->add_option("--data", ab.data, "Dataset directory")->required();
    s->add_option("--config", ab.config, "Config file");
    s->add_option("--out", ab.out, "Sweep CSV")->required();
    s->add_option("--grid", ab.grid, "Axes such as K=1..5 tau=0.8,0.9 lambda=0.5,1");
    s->add_option("--seed", ab.seed, "Override the config seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? kOk : kUsage;
    }

    const auto t0 = std::chrono::steady_clock::now();
    std::string out_hint;
    int rc = kOk;
    try {
        if (*g) rc = cmd_gen_data(gen);
        else if (*p) out_hint = pre.out, rc = cmd_pretrain(pre);
        else if (*d) out_hint = ad.out, rc = cmd_adapt(ad);
        else if (*e) rc = cmd_eval(ev);
        else out_hint = ab.out, rc = cmd_ablate(ab);
    } catch (const CliError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return err.code;
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return kUsage;
    } catch (const NumericFailure& err) {
        std::cerr << "numeric failure: " << err.what() << "\n";
        dump_diagnostic(out_hint, err.diagnostic);
        return kNumeric;
    } catch (const FormatError& err) {
        std::cerr << "format error: " << err.what() << "\n";
        return kData;
    } catch (const std::invalid_argument& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kUsage;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kData;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "done in %.1f s\n", secs);
    return rc;
}

#pragma once

#include <CLI11.hpp>
#include <json.hpp>
#include <spawn.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "leakgan/config.hpp"
#include "leakgan/evaluation.hpp"
#include "leakgan/synth.hpp"
#include "leakgan/trainer.hpp"

extern char** environ;

#ifndef LEAKGAN_VERSION
#define LEAKGAN_VERSION "0.0.0"
#endif
#ifndef LEAKGAN_GIT_COMMIT
#define LEAKGAN_GIT_COMMIT "unknown"
#endif

namespace leakgan::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string code_version() { return std::string(LEAKGAN_VERSION) + "+" + LEAKGAN_GIT_COMMIT; }

inline std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Temp-then-rename so readers never see a half-written file.
inline void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write " + tmp.string());
        os << text;
        os.flush();
        if (!os) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline json read_json_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

/// FNV-1a 64 over the relative path and bytes of every regular file under
/// `root`, visited in sorted path order.
inline std::string directory_checksum(const fs::path& root) {
    if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root.string());
    std::vector<fs::path> files;
    std::error_code ec;
    for (auto it = fs::recursive_directory_iterator(root, ec); !ec && it != fs::recursive_directory_iterator();
         it.increment(ec)) {
        if (it->is_regular_file()) files.push_back(it->path());
    }
    if (ec) throw IoError("cannot list " + root.string() + ": " + ec.message());
    std::sort(files.begin(), files.end());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(p[i]);
            h *= 0x100000001b3ULL;
        }
    };
    std::vector<char> buf(1 << 16);
    for (const auto& f : files) {
        const auto rel = fs::relative(f, root).generic_string();
        feed(rel.c_str(), rel.size() + 1);  // the terminator keeps names and contents from aliasing
        std::ifstream is(f, std::ios::binary);
        if (!is) throw IoError("cannot read " + f.string());
        while (is) {
            is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
            feed(buf.data(), static_cast<std::size_t>(is.gcount()));
        }
    }
    char out[17];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
    return std::string("fnv1a64:") + out;
}

inline json dataset_records(const ExperimentConfig& c) {
    json out = json::array();
    auto add = [&](const std::string& role, const std::string& root, DatasetLayout layout) {
        if (root.empty()) return;
        out.push_back({{"role", role}, {"root", root}, {"layout", to_string(layout)}, {"checksum", directory_checksum(root)}});
    };
    if (c.data.root.empty() && c.data.layout == DatasetLayout::synthetic) {
        out.push_back({{"role", "source"},
                       {"generated", "in-memory synthetic corpus"},
                       {"count", c.data.synthetic_count},
                       {"seed", derive_seed(c.seed, {stream::synth})}});
    } else {
        add("source", c.data.root, c.data.layout);
    }
    add("test", c.data.test_root, c.cross_domain_enabled() ? c.cross_domain.target_layout : c.data.layout);
    add("target", c.cross_domain.target_root, c.cross_domain.target_layout);
    return out;
}

inline json seed_record(std::uint64_t seed) {
    return {{"base", seed},
            {"init_discriminator", derive_seed(seed, {stream::init_discriminator})},
            {"init_generator", derive_seed(seed, {stream::init_generator})},
            {"init_leak", derive_seed(seed, {stream::init_leak})},
            {"split", derive_seed(seed, {stream::split})},
            {"per_step", "derive_seed(base, {stream, step[, sub_step]})"}};
}

/// Provenance of one run directory. Written before work starts and
/// rewritten with the outcome; `config` alone reproduces a training run.
struct RunManifest {
    static constexpr int kSchemaVersion = 1;
    std::string command;
    std::vector<std::string> argv;
    std::string code_version = cli::code_version();
    json config;  // null for commands without a training config
    json seeds;
    json datasets = json::array();
    std::string started_at = utc_now();
    std::optional<std::string> finished_at;
    std::string status = "running";
    std::vector<std::string> outputs;
    json resumes = json::array();
};

inline json to_json(const RunManifest& m) {
    return {{"schema_version", RunManifest::kSchemaVersion},
            {"command", m.command},
            {"argv", m.argv},
            {"code_version", m.code_version},
            {"config", m.config},
            {"seeds", m.seeds},
            {"datasets", m.datasets},
            {"started_at", m.started_at},
            {"finished_at", m.finished_at ? json(*m.finished_at) : json(nullptr)},
            {"status", m.status},
            {"outputs", m.outputs},
            {"resumes", m.resumes}};
}

inline RunManifest manifest_from_json(const json& j) {
    try {
        if (j.at("schema_version").get<int>() != RunManifest::kSchemaVersion) {
            throw DataError("unsupported manifest schema version " + j.at("schema_version").dump());
        }
        RunManifest m;
        m.command = j.at("command").get<std::string>();
        m.argv = j.at("argv").get<std::vector<std::string>>();
        m.code_version = j.at("code_version").get<std::string>();
        m.config = j.at("config");
        m.seeds = j.at("seeds");
        m.datasets = j.at("datasets");
        m.started_at = j.at("started_at").get<std::string>();
        if (!j.at("finished_at").is_null()) m.finished_at = j.at("finished_at").get<std::string>();
        m.status = j.at("status").get<std::string>();
        m.outputs = j.at("outputs").get<std::vector<std::string>>();
        m.resumes = j.value("resumes", json::array());
        return m;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed run manifest: ") + e.what());
    }
}

inline void write_manifest(const fs::path& dir, const RunManifest& m) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    write_text_atomic(dir / "manifest.json", to_json(m).dump(2) + "\n");
}

inline RunManifest read_manifest(const fs::path& path) { return manifest_from_json(read_json_file(path)); }

/// Short flag spellings for documented keys.
struct Alias {
    const char* flag;
    const char* key;
    bool list;  // "1,2" becomes [1,2]
};

inline const std::vector<Alias>& aliases() {
    static const std::vector<Alias> a = {
        {"data-root", "data.root", false},
        {"layout", "data.layout", false},
        {"n-labelled", "data.n_labelled", false},
        {"n-unlabelled", "data.n_unlabelled", false},
        {"patches-per-epoch", "data.patches_per_epoch", false},
        {"test-root", "data.test_root", false},
        {"leak-layers", "leak.layers", true},
        {"leak-alpha", "leak.alpha", true},
        {"leak-beta", "leak.beta", true},
        {"lambda1", "loss.lambda1", false},
        {"lambda2", "loss.lambda2", false},
        {"lambda3", "loss.lambda3", false},
        {"focal-alpha-t", "loss.focal_alpha_t", false},
        {"focal-rho", "loss.focal_rho", false},
        {"consistency", "loss.consistency", false},
        {"gen-loss", "loss.gen_loss", false},
        {"iterations", "optim.iterations", false},
        {"lr-d", "optim.lr_d", false},
        {"lr-g", "optim.lr_g", false},
        {"ema-alpha", "ema.alpha", false},
        {"noise-lambda", "ema.noise_lambda", false},
        {"gen-base-width", "model.gen_width", false},
        {"disc-width", "model.disc_width", false},
        {"target-root", "cross_domain.target_root", false},
        {"target-layout", "cross_domain.target_layout", false},
        {"mix-ratio", "cross_domain.mix_ratio", false},
        {"out", "run.out_dir", false},
        {"stride", "run.eval_stride", false},
        {"threshold", "run.threshold", false},
        {"fov", "run.fov", false},
        {"precision", "run.precision", false},
    };
    return a;
}

/// --config, --from-manifest, one --<dotted.key> per documented key and the
/// aliases, registered on a subcommand.
class ConfigOptions {
public:
    explicit ConfigOptions(CLI::App& app) {
        app.add_option("--config", file_, "JSON configuration file (nested sections or dotted keys)");
        app.add_option("--from-manifest", manifest_, "reuse the configuration recorded in a run manifest.json");
        const ExperimentConfig defaults;
        for (const auto& k : config_keys()) {
            app.add_option("--" + k.name, by_key_[k.name], k.help + " [default: " + k.get(defaults).dump() + "]")
                ->expected(1)
                ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
                ->type_name("VALUE")
                ->group("Configuration keys");
        }
        for (const auto& a : aliases()) {
            app.add_option(std::string("--") + a.flag, by_alias_[a.flag], std::string("same as --") + a.key)
                ->expected(1)
                ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
                ->type_name("VALUE")
                ->group("Aliases");
        }
        app.add_option("--leak-enabled", leak_enabled_,
                       "assert the leak state; it follows the ablation (only 'full' enables it)")
            ->group("Aliases");
        app.add_option("--z-len", z_len_, "noise length; fixed at 100, other values are ignored with a warning")
            ->group("Aliases");
    }

    bool has_base() const { return file_.has_value() || manifest_.has_value(); }

    ConfigSource source(const std::optional<json>& fallback_document = std::nullopt) const {
        ConfigSource src;
        if (file_) src.file = *file_;
        if (manifest_) {
            src.document = read_manifest(*manifest_).config;
            if (src.document->is_null()) throw ConfigError(*manifest_ + ": manifest records no training config");
        } else if (!file_ && fallback_document) {
            src.document = fallback_document;
        }
        for (const auto& [key, values] : by_key_) {
            for (const auto& v : values) src.overrides.emplace_back(key, v);
        }
        for (const auto& a : aliases()) {
            for (auto v : by_alias_.at(a.flag)) {
                if (a.list && !v.empty() && v.front() != '[') v = "[" + v + "]";
                src.overrides.emplace_back(a.key, v);
            }
        }
        return src;
    }

    ExperimentConfig parse(std::ostream& err, const std::optional<json>& fallback_document = std::nullopt) const {
        if (z_len_ && *z_len_ != static_cast<long long>(kNoiseLength)) {
            err << "warning: --z-len is fixed at " << kNoiseLength << "; ignoring " << *z_len_ << "\n";
        }
        auto cfg = parse_config(source(fallback_document));
        if (leak_enabled_) {
            const std::string v = *leak_enabled_;
            const bool on = v == "true" || v == "1" || v == "on";
            if (!on && v != "false" && v != "0" && v != "off") {
                throw ConfigError("config key 'leak.enabled': expected true or false (got '" + v + "')");
            }
            if (on != cfg.leak.enabled) {
                throw ConfigError("config key 'leak.enabled': the leak follows the ablation; ablation=" +
                                  to_string(cfg.ablation) + (cfg.leak.enabled ? " enables" : " disables") +
                                  " it (use --ablation full or unet_gan_mt)");
            }
        }
        return cfg;
    }

    const std::optional<std::string>& manifest_path() const { return manifest_; }

private:
    std::optional<std::string> file_;
    std::optional<std::string> manifest_;
    std::map<std::string, std::vector<std::string>> by_key_;
    std::map<std::string, std::vector<std::string>> by_alias_;
    std::optional<std::string> leak_enabled_;
    std::optional<long long> z_len_;
};

/// Re-invokes this executable; one process per run keeps runs independent.
inline int spawn_self(const std::vector<std::string>& args) {
    std::vector<char*> argv;
    const std::string exe = fs::read_symlink("/proc/self/exe").string();
    argv.push_back(const_cast<char*>(exe.c_str()));
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (const int rc = posix_spawn(&pid, exe.c_str(), nullptr, nullptr, argv.data(), environ); rc != 0) {
        throw IoError("cannot spawn " + exe + ": " + std::strerror(rc));
    }
    int status = 0;
    if (waitpid(pid, &status, 0) < 0) throw IoError("waitpid failed for child run");
    if (WIFEXITED(status)) return WEXITSTATUS(status);
    return 1;
}

inline std::vector<std::string> relative_outputs(const fs::path& dir, const RunArtifacts& a) {
    std::vector<std::string> out;
    auto rel = [&](const fs::path& p) { out.push_back(fs::relative(p, dir).generic_string()); };
    rel(a.curves);
    for (const auto& c : a.checkpoints) {
        if (fs::exists(c)) rel(c);
    }
    if (a.report) {
        rel(dir / "report.json");
        rel(dir / "report.txt");
    }
    return out;
}

template <typename T>
RunArtifacts run_training(const ExperimentConfig& cfg, const std::optional<fs::path>& resume, bool cross) {
    return cross ? train_cross_domain<T>(cfg, resume) : train<T>(cfg, resume);
}

/// train / cross-train: manifest, training, manifest update.
inline int cmd_train(const ExperimentConfig& cfg, const std::optional<fs::path>& resume, bool cross,
                     const std::string& command, const std::vector<std::string>& argv, std::ostream& out) {
    if (cross && !cfg.cross_domain_enabled()) {
        throw ConfigError("config key 'cross_domain.target_root': required for cross-train");
    }
    const fs::path dir = cfg.run.out_dir;
    RunManifest m;
    const bool continuing = resume && fs::exists(dir / "manifest.json");
    if (continuing) {
        m = read_manifest(dir / "manifest.json");
        m.resumes.push_back({{"from", resume->string()}, {"argv", argv}, {"started_at", utc_now()}});
    }
    m.command = command;
    if (!continuing) m.argv = argv;
    m.config = config_to_json(cfg);
    m.seeds = seed_record(cfg.seed);
    m.datasets = dataset_records(cfg);
    m.status = "running";
    m.finished_at.reset();
    write_manifest(dir, m);
    try {
        const auto a = cfg.run.precision == Precision::double_ ? run_training<double>(cfg, resume, cross)
                                                               : run_training<float>(cfg, resume, cross);
        m.outputs = relative_outputs(dir, a);
        m.status = "ok";
        m.finished_at = utc_now();
        write_manifest(dir, m);
        out << "trained " << a.steps << " iterations into " << dir.string() << "\n";
        if (a.report) out << format_table(*a.report);
        return 0;
    } catch (const Error& e) {
        m.status = std::string("failed: ") + e.what();
        m.finished_at = utc_now();
        try {
            write_manifest(dir, m);
        } catch (const Error&) {
        }
        throw;
    }
}

/// One child run of ablate / sweep.
struct PlannedRun {
    std::string name;
    ExperimentConfig cfg;
};

inline std::string format_number(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

/// Runs each planned configuration in its own process, then tabulates the
/// reports found under the run directories.
inline int run_plan(const std::string& command, const std::vector<PlannedRun>& plan, const fs::path& base,
                    const std::vector<std::string>& argv, const json& grid, std::ostream& out) {
    RunManifest m;
    m.command = command;
    m.argv = argv;
    m.config = grid;
    write_manifest(base, m);
    int status = 0;
    for (const auto& run : plan) {
        const fs::path dir = base / run.name;
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
        write_text_atomic(dir / "config.json", config_to_json(run.cfg).dump(2) + "\n");
        out << "== " << run.name << "\n" << std::flush;
        const int rc = spawn_self({"train", "--config", (dir / "config.json").string()});
        if (rc != 0) {
            status = rc;
            m.status = "failed: run " + run.name + " exited with " + std::to_string(rc);
            break;
        }
        m.outputs.push_back(run.name);
    }
    std::ostringstream table;
    char head[96];
    std::snprintf(head, sizeof head, "%-20s %s\n", "run", "Acc / Sp / Se (pooled)");
    table << head;
    for (const auto& run : plan) {
        const auto report = base / run.name / "report.json";
        if (!fs::exists(report)) continue;
        const auto r = report_from_json(read_json_file(report));
        char line[128];
        std::snprintf(line, sizeof line, "%-20s %s\n", run.name.c_str(), format_row(r.pooled).c_str());
        table << line;
    }
    write_text_atomic(base / "summary.txt", table.str());
    m.outputs.push_back("summary.txt");
    if (status == 0) m.status = "ok";
    m.finished_at = utc_now();
    write_manifest(base, m);
    out << table.str();
    return status;
}

inline std::vector<PlannedRun> ablation_plan(const ExperimentConfig& cfg) {
    std::vector<PlannedRun> plan;
    for (auto a : {Ablation::unet_only, Ablation::unet_gan, Ablation::unet_gan_mt, Ablation::full}) {
        PlannedRun r{to_string(a), cfg};
        r.cfg.ablation = a;
        r.cfg.leak.enabled = uses_leak(a);
        r.cfg.run.out_dir = (fs::path(cfg.run.out_dir) / r.name).string();
        plan.push_back(std::move(r));
    }
    return plan;
}

/// Named sweep grids: leak levels, leak scale, focal parameters and the
/// labelled/unlabelled budget.
inline std::vector<PlannedRun> sweep_plan(const std::string& grid, const ExperimentConfig& cfg) {
    std::vector<PlannedRun> plan;
    auto add = [&](std::string name, auto&& edit) {
        PlannedRun r{std::move(name), cfg};
        edit(r.cfg);
        r.cfg.run.out_dir = (fs::path(cfg.run.out_dir) / r.name).string();
        validate(r.cfg);
        plan.push_back(std::move(r));
    };
    if (grid == "leak-layers") {
        const std::vector<std::vector<int>> sets = {{1}, {2}, {3}, {1, 2}, {1, 3}, {2, 3}, {1, 2, 3}};
        for (const auto& s : sets) {
            std::string name = "layers";
            for (int l : s) name += "_" + std::to_string(l);
            add(name, [&](ExperimentConfig& c) {
                c.ablation = Ablation::full;
                c.leak.enabled = true;
                c.leak.layers = s;
                c.leak.alpha.assign(s.size(), 1.0);
                c.leak.beta.assign(s.size(), 1.0);
            });
        }
    } else if (grid == "leak-alpha") {
        for (double a : {0.1, 0.5, 1.0, 1.1, 1.5}) {
            add("alpha_" + format_number(a), [&](ExperimentConfig& c) {
                c.ablation = Ablation::full;
                c.leak.enabled = true;
                c.leak.alpha.assign(c.leak.layers.size(), a);
            });
        }
    } else if (grid == "focal") {
        for (double at : {1.0, 2.0, 5.0}) {
            add("focal_a" + format_number(at) + "_r0.25", [&](ExperimentConfig& c) {
                c.loss.consistency = ConsistencyKind::focal;
                c.loss.weights.focal_alpha_t = at;
                c.loss.weights.focal_rho = 0.25;
            });
        }
        add("mse", [](ExperimentConfig& c) { c.loss.consistency = ConsistencyKind::mse; });
    } else if (grid == "labelled") {
        for (auto [l, ul] : std::vector<std::pair<std::size_t, std::size_t>>{{2, 5}, {5, 5}, {2, 6}, {2, 8}}) {
            add("L" + std::to_string(l) + "_UL" + std::to_string(ul), [&](ExperimentConfig& c) {
                c.data.n_labelled = l;
                c.data.n_unlabelled = ul;
            });
        }
    } else {
        throw ConfigError("sweep grid must be one of leak-layers, leak-alpha, focal, labelled (got '" + grid + "')");
    }
    return plan;
}

inline Precision checkpoint_precision(const fs::path& ckpt) { return checkpoint_config(ckpt).run.precision; }

template <typename T>
const UNet<T>& pick_network(const TrainerState<T>& st, const std::string& which) {
    if (which == "student") return st.student();
    if (which == "teacher") {
        if (!st.has_teacher()) {
            throw ConfigError("--eval-net teacher: ablation " + to_string(st.config().ablation) + " has no teacher");
        }
        return st.teacher().net;
    }
    throw ConfigError("--eval-net must be student or teacher (got '" + which + "')");
}

struct EvalArgs {
    std::string checkpoint;
    std::string net = "student";
    std::optional<std::string> data_root;
    std::string layout = "generic";
    std::optional<std::size_t> stride;
    std::optional<double> threshold;
    std::optional<std::string> fov;
    std::optional<std::string> out;
    std::vector<double> sweep;
    bool sweep_flag = false;
};

inline std::vector<double> default_sweep_thresholds() {
    std::vector<double> t;
    for (int i = 1; i <= 19; ++i) t.push_back(i * 0.05);
    return t;
}

template <typename T>
int run_eval(const EvalArgs& args, std::ostream& out) {
    const auto st = load_trainer<T>(args.checkpoint);
    const auto& cfg = st->config();
    const auto& net = pick_network(*st, args.net);

    DatasetIndex owned;
    const DatasetIndex* index = nullptr;
    std::vector<std::size_t> ids;
    std::string train_name;
    std::optional<TrainingData> data;
    if (args.data_root) {
        owned = load_dataset(*args.data_root, parse_layout(args.layout));
        index = &owned;
        train_name = cfg.data.root.empty() ? to_string(cfg.data.layout) : fs::path(cfg.data.root).filename().string();
    } else {
        data = load_training_data(cfg);
        index = data->test ? &*data->test : &data->source;
        if (!data->test) ids = data->test_ids;
        train_name = data->source.name;
    }

    EvalOptions opt;
    opt.stride = args.stride.value_or(cfg.run.eval_stride);
    opt.threshold = args.threshold.value_or(cfg.run.threshold);
    opt.fov = parse_fov_policy(args.fov.value_or(cfg.run.fov));
    if (!(opt.threshold > 0 && opt.threshold < 1)) throw ConfigError("--threshold must lie in (0, 1)");
    if (args.out) opt.output_dir = fs::path(*args.out);
    bool fov_used = false;
    auto images = evaluate_images(net, *index, ids, opt, &fov_used);
    EvalSetting s{train_name, index->name, to_string(cfg.ablation), cfg.data.n_labelled, args.net,
                  opt.stride, opt.threshold, fov_used};
    const auto report = build_report(s, std::move(images));
    if (args.out) emit_report(report, *args.out);
    out << format_table(report);

    if (args.sweep_flag || !args.sweep.empty()) {
        const auto thresholds = args.sweep.empty() ? default_sweep_thresholds() : args.sweep;
        if (ids.empty()) {
            ids.resize(index->size());
            for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
        }
        std::vector<ProbabilityMap> maps;
        std::vector<const BinaryMask*> gts, fovs;
        for (auto id : ids) {
            maps.push_back(predict_probability(net, index->images[id], opt.stride));
            gts.push_back(&index->masks[id]);
            fovs.push_back(fov_used ? &index->fovs[id] : nullptr);
        }
        std::ostringstream csv;
        csv << "threshold,tp,fp,tn,fn,acc,sp,se\n";
        auto opt_str = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
        for (const auto& p : threshold_sweep(maps, gts, fovs, thresholds)) {
            csv << format_number(p.threshold) << ',' << p.counts.tp << ',' << p.counts.fp << ',' << p.counts.tn << ','
                << p.counts.fn << ',' << format_number(p.metrics.acc) << ',' << opt_str(p.metrics.sp) << ','
                << opt_str(p.metrics.se) << '\n';
        }
        if (args.out) write_text_atomic(fs::path(*args.out) / "threshold_sweep.csv", csv.str());
        out << csv.str();
    }
    return 0;
}

struct PredictArgs {
    std::string checkpoint;
    std::string input;
    std::string out;
    std::string net = "student";
    std::optional<std::size_t> stride;
    std::optional<double> threshold;
};

template <typename T>
std::vector<std::string> run_predict(const PredictArgs& args, std::ostream& out) {
    const auto st = load_trainer<T>(args.checkpoint);
    const auto& net = pick_network(*st, args.net);
    const std::size_t stride = args.stride.value_or(st->config().run.eval_stride);
    const double threshold = args.threshold.value_or(st->config().run.threshold);
    std::vector<fs::path> inputs;
    if (fs::is_directory(args.input)) {
        inputs = detail::list_images(args.input);
        if (inputs.empty()) throw DataError("no images in " + args.input);
    } else {
        inputs.push_back(args.input);
    }
    std::vector<std::string> written;
    for (const auto& p : inputs) {
        const auto pred = predict_full_image(net, read_image(p), stride, threshold);
        const auto name = p.stem().string() + ".png";
        write_probability_map(fs::path(args.out) / "prob" / name, pred.probability);
        write_mask(fs::path(args.out) / "mask" / name, pred.mask);
        written.push_back("prob/" + name);
        written.push_back("mask/" + name);
        out << p.string() << " -> " << (fs::path(args.out) / "mask" / name).string() << "\n";
    }
    return written;
}

inline void print_usage_hint(std::ostream& err, const CLI::App& app) {
    err << app.help("", CLI::AppFormatMode::Normal);
}

/// Entry point; returns the process exit code (0 ok, 2 config, 3 data,
/// 4 numeric, 5 io, 1 anything unexpected).
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"Semi-supervised retinal vessel segmentation with a leaking GAN discriminator", "leakgan"};
    app.set_version_flag("--version", code_version());
    app.require_subcommand(1);
    app.footer("Configuration keys may come from --config FILE (JSON) and --<key> VALUE flags;\n"
               "flags win over the file. LEAKGAN_DATA_ROOT supplies data.root when unset.\n"
               "Exit codes: 2 config, 3 data, 4 numeric, 5 io.");

    auto* train_cmd = app.add_subcommand("train", "train one model (within-dataset)");
    ConfigOptions train_opts(*train_cmd);
    std::optional<std::string> resume;
    train_cmd->add_option("--resume", resume, "continue from a checkpoint of this run (its config is the default)");

    auto* cross_cmd = app.add_subcommand("cross-train", "train with unlabelled target-domain patches mixed in");
    ConfigOptions cross_opts(*cross_cmd);
    std::optional<std::string> cross_resume;
    cross_cmd->add_option("--resume", cross_resume, "continue from a checkpoint of this run");

    auto* ablate_cmd = app.add_subcommand("ablate", "run unet, unet_gan, unet_gan_mt and full under run.out_dir");
    ConfigOptions ablate_opts(*ablate_cmd);

    auto* sweep_cmd = app.add_subcommand("sweep", "run a named grid under run.out_dir");
    ConfigOptions sweep_opts(*sweep_cmd);
    std::string grid;
    sweep_cmd->add_option("--grid", grid, "leak-layers | leak-alpha | focal | labelled")->required();

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    EvalArgs eval_args;
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "trainer checkpoint")->required();
    eval_cmd->add_option("--eval-net", eval_args.net, "student | teacher")->capture_default_str();
    eval_cmd->add_option("--data-root", eval_args.data_root, "test set (default: the run's own test images)");
    eval_cmd->add_option("--layout", eval_args.layout, "layout of --data-root")->capture_default_str();
    eval_cmd->add_option("--stride", eval_args.stride, "sliding-window stride (default: run.eval_stride)");
    eval_cmd->add_option("--threshold", eval_args.threshold, "posterior threshold (default: run.threshold)");
    eval_cmd->add_option("--fov", eval_args.fov, "auto | on | off (default: run.fov)");
    eval_cmd->add_option("--out", eval_args.out, "directory for maps, report.json and report.txt");
    eval_cmd->add_flag("--sweep-threshold", eval_args.sweep_flag, "also tabulate Se/Sp over thresholds 0.05..0.95");
    eval_cmd->add_option("--thresholds", eval_args.sweep, "explicit thresholds for the sweep")->delimiter(',');

    auto* predict_cmd = app.add_subcommand("predict", "probability maps and masks for new images");
    PredictArgs predict_args;
    predict_cmd->add_option("--checkpoint", predict_args.checkpoint, "trainer checkpoint")->required();
    predict_cmd->add_option("--input", predict_args.input, "image file or directory")->required();
    predict_cmd->add_option("--out", predict_args.out, "output directory")->required();
    predict_cmd->add_option("--eval-net", predict_args.net, "student | teacher")->capture_default_str();
    predict_cmd->add_option("--stride", predict_args.stride, "sliding-window stride");
    predict_cmd->add_option("--threshold", predict_args.threshold, "posterior threshold");

    auto* diff_cmd = app.add_subcommand("diff-map", "colour-coded comparison of a predicted and a true mask");
    std::string diff_pred, diff_gt, diff_out;
    std::optional<std::string> diff_fov;
    diff_cmd->add_option("--pred", diff_pred, "predicted mask")->required();
    diff_cmd->add_option("--gt", diff_gt, "ground-truth mask")->required();
    diff_cmd->add_option("--fov", diff_fov, "field-of-view mask restricting the counts");
    diff_cmd->add_option("--out", diff_out, "output PNG (TP white, FP blue, FN yellow)")->required();

    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic vessel corpus");
    std::string synth_out;
    std::size_t synth_count = 10;
    std::uint64_t synth_seed = 0;
    std::optional<std::string> synth_params;
    std::optional<double> synth_shift;
    std::optional<std::size_t> synth_size;
    synth_cmd->add_option("--out", synth_out, "corpus directory")->required();
    synth_cmd->add_option("--count", synth_count, "number of images")->capture_default_str();
    synth_cmd->add_option("--seed", synth_seed, "corpus seed")->capture_default_str();
    synth_cmd->add_option("--params", synth_params, "generator parameters as a JSON object");
    synth_cmd->add_option("--intensity-shift", synth_shift, "added to every pixel (domain shift)");
    synth_cmd->add_option("--size", synth_size, "square canvas side in pixels");

    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::CallForHelp& e) {
            return app.exit(e, out, err);
        } catch (const CLI::CallForAllHelp& e) {
            return app.exit(e, out, err);
        } catch (const CLI::CallForVersion& e) {
            return app.exit(e, out, err);
        } catch (const CLI::ParseError& e) {
            err << "error: " << e.what() << "\n\n";
            print_usage_hint(err, app);
            return static_cast<int>(ErrorKind::config);
        }

        if (*train_cmd || *cross_cmd) {
            const bool cross = static_cast<bool>(*cross_cmd);
            const auto& opts = cross ? cross_opts : train_opts;
            const auto& res = cross ? cross_resume : resume;
            std::optional<json> fallback;
            if (res && !opts.has_base()) fallback = checkpoint_config_json(*res);
            const auto cfg = opts.parse(err, fallback);
            if (opts.manifest_path()) {
                // the recorded datasets must still be the ones on disk
                const auto recorded = read_manifest(*opts.manifest_path()).datasets;
                const auto now = dataset_records(cfg);
                if (recorded != now) {
                    throw DataError("datasets differ from those recorded in " + *opts.manifest_path());
                }
            }
            return cmd_train(cfg, res ? std::optional<fs::path>(*res) : std::nullopt, cross,
                             cross ? "cross-train" : "train", args, out);
        }
        if (*ablate_cmd) {
            const auto cfg = ablate_opts.parse(err);
            return run_plan("ablate", ablation_plan(cfg), cfg.run.out_dir, args,
                            {{"ablations", {"unet", "unet_gan", "unet_gan_mt", "full"}}, {"base", config_to_json(cfg)}},
                            out);
        }
        if (*sweep_cmd) {
            const auto cfg = sweep_opts.parse(err);
            return run_plan("sweep", sweep_plan(grid, cfg), cfg.run.out_dir, args,
                            {{"grid", grid}, {"base", config_to_json(cfg)}}, out);
        }
        if (*eval_cmd) {
            std::optional<RunManifest> m;
            if (eval_args.out) {
                m.emplace();
                m->command = "eval";
                m->argv = args;
                write_manifest(*eval_args.out, *m);
            }
            const int rc = checkpoint_precision(eval_args.checkpoint) == Precision::double_
                               ? run_eval<double>(eval_args, out)
                               : run_eval<float>(eval_args, out);
            if (m) {
                m->status = "ok";
                m->finished_at = utc_now();
                m->outputs = {"report.json", "report.txt", "prob/", "mask/", "diff/"};
                if (eval_args.sweep_flag || !eval_args.sweep.empty()) m->outputs.push_back("threshold_sweep.csv");
                write_manifest(*eval_args.out, *m);
            }
            return rc;
        }
        if (*predict_cmd) {
            RunManifest m;
            m.command = "predict";
            m.argv = args;
            write_manifest(predict_args.out, m);
            m.outputs = checkpoint_precision(predict_args.checkpoint) == Precision::double_
                            ? run_predict<double>(predict_args, out)
                            : run_predict<float>(predict_args, out);
            m.status = "ok";
            m.finished_at = utc_now();
            write_manifest(predict_args.out, m);
            return 0;
        }
        if (*diff_cmd) {
            const auto pred = read_mask(diff_pred);
            const auto gt = read_mask(diff_gt);
            std::optional<BinaryMask> fov;
            if (diff_fov) fov = read_mask(*diff_fov);
            const auto counts = confusion_counts(pred, gt, fov ? &*fov : nullptr);
            write_image(diff_out, difference_map(pred, gt));
            out << "tp=" << counts.tp << " fp=" << counts.fp << " tn=" << counts.tn << " fn=" << counts.fn << "\n"
                << "Acc / Sp / Se: " << format_row(metrics(counts)) << "\n";
            return 0;
        }
        if (*synth_cmd) {
            SynthParams p;
            if (synth_params) {
                const auto j = override_value(*synth_params);
                if (!j.is_object()) throw ConfigError("--params: expected a JSON object");
                p = j.get<SynthParams>();
            }
            if (synth_shift) p.intensity_shift = *synth_shift;
            if (synth_size) p.height = p.width = *synth_size;
            p.validate();
            write_synthetic_corpus(synth_out, p, synth_count, synth_seed);
            out << "wrote " << synth_count << " synthetic images to " << synth_out << "\n";
            return 0;
        }
        return static_cast<int>(ErrorKind::config);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const json::exception& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ErrorKind::config);
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ErrorKind::io);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace leakgan::cli

#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "leakgan/data.hpp"
#include "leakgan/discriminator.hpp"
#include "leakgan/error.hpp"
#include "leakgan/evaluation.hpp"
#include "leakgan/losses.hpp"
#include "leakgan/mean_teacher.hpp"
#include "leakgan/synth.hpp"

namespace leakgan {

/// Ablation ladder; each level adds one component to the previous one.
enum class Ablation { unet_only, unet_gan, unet_gan_mt, full };

inline Ablation parse_ablation(const std::string& s) {
    if (s == "unet" || s == "unet_only") return Ablation::unet_only;
    if (s == "unet_gan") return Ablation::unet_gan;
    if (s == "unet_gan_mt") return Ablation::unet_gan_mt;
    if (s == "full") return Ablation::full;
    throw ConfigError("ablation must be one of unet, unet_gan, unet_gan_mt, full (got '" + s + "')");
}

/// Also the run-directory name used by `ablate`.
inline std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::unet_only: return "unet";
        case Ablation::unet_gan: return "unet_gan";
        case Ablation::unet_gan_mt: return "unet_gan_mt";
        case Ablation::full: return "full";
    }
    return "full";
}

constexpr bool uses_generator(Ablation a) noexcept { return a != Ablation::unet_only; }
constexpr bool uses_teacher(Ablation a) noexcept { return a == Ablation::unet_gan_mt || a == Ablation::full; }
constexpr bool uses_leak(Ablation a) noexcept { return a == Ablation::full; }

enum class ConsistencyKind { focal, mse };
enum class GeneratorObjective { adversarial, feature_matching };
enum class Precision { single, double_ };

struct ExperimentConfig {
    struct Data {
        std::string root;
        DatasetLayout layout = DatasetLayout::generic;
        std::size_t n_labelled = 8;
        std::size_t n_unlabelled = 0;  // 0: every image not labelled
        std::string test_root;  // empty: unlabelled training images (or a fresh synthetic corpus)
        std::size_t patches_per_epoch = 2048;
        std::size_t synthetic_count = 8;  // in-memory corpus size when layout=synthetic and root is empty
        SynthParams synth;
    } data;

    Ablation ablation = Ablation::full;
    LeakConfig leak;  // `enabled` follows the ablation

    struct Loss {
        LossWeights weights;
        ConsistencyKind consistency = ConsistencyKind::focal;
        GeneratorObjective generator = GeneratorObjective::adversarial;
        bool supervised_focal = true;
        double lambda3_rampup = 0.1;  // fraction of iterations for the linear ramp
    } loss;

    struct Optim {
        double lr_d = 2e-4;
        double lr_g = 2e-4;
        double beta1 = 0.5;
        double beta2 = 0.999;
        std::size_t batch_labelled = 16;
        std::size_t batch_unlabelled = 16;
        std::size_t batch_fake = 16;
        std::size_t iterations = 20000;
        std::size_t d_steps = 1;
        std::size_t g_steps = 1;
    } optim;

    struct Ema {
        double alpha = 0.99;
        double noise_lambda = 0.1;
    } ema;

    struct Model {
        std::size_t disc_width = 64;
        std::size_t gen_width = 512;
        std::size_t num_classes = 2;
    } model;

    struct CrossDomain {
        std::string target_root;  // empty: within-dataset training
        DatasetLayout target_layout = DatasetLayout::generic;
        double mix_ratio = 0.5;  // share of unlabelled slots drawn from the target
    } cross_domain;

    struct Run {
        std::string out_dir = "runs/leakgan";
        std::size_t checkpoint_every = 1000;
        std::size_t probe_every = 1;
        std::size_t eval_stride = 32;
        double threshold = 0.5;
        std::string fov = "auto";
        Precision precision = Precision::single;
        bool evaluate = true;
    } run;

    std::uint64_t seed = 0;

    bool cross_domain_enabled() const { return !cross_domain.target_root.empty(); }
};

/// One documented configuration key: dotted name, help text and accessors
/// over the JSON echo.
struct ConfigKey {
    std::string name;
    std::string help;
    std::function<nlohmann::json(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const nlohmann::json&)> set;
};

namespace detail {

template <typename V>
V as(const nlohmann::json& j, const std::string& key) {
    try {
        if constexpr (std::is_same_v<V, std::size_t> || std::is_same_v<V, std::uint64_t>) {
            if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) throw 0;
            return j.get<V>();
        } else if constexpr (std::is_same_v<V, double>) {
            if (!j.is_number()) throw 0;
            return j.get<double>();
        } else if constexpr (std::is_same_v<V, bool>) {
            if (!j.is_boolean()) throw 0;
            return j.get<bool>();
        } else {
            if (!j.is_string()) throw 0;
            return j.get<std::string>();
        }
    } catch (int) {
        throw ConfigError("config key '" + key + "': wrong type (" + std::string(j.type_name()) + ")");
    }
}

template <typename V>
std::vector<V> as_list(const nlohmann::json& j, const std::string& key) {
    if (!j.is_array()) throw ConfigError("config key '" + key + "': expected a list");
    std::vector<V> out;
    for (const auto& e : j) out.push_back(as<V>(e, key));
    return out;
}

inline ConsistencyKind parse_consistency(const std::string& s) {
    if (s == "focal") return ConsistencyKind::focal;
    if (s == "mse") return ConsistencyKind::mse;
    throw ConfigError("config key 'loss.consistency': must be focal or mse (got '" + s + "')");
}

inline GeneratorObjective parse_generator_objective(const std::string& s) {
    if (s == "adv" || s == "adversarial") return GeneratorObjective::adversarial;
    if (s == "feature-matching" || s == "feature_matching") return GeneratorObjective::feature_matching;
    throw ConfigError("config key 'loss.gen_loss': must be adv or feature-matching (got '" + s + "')");
}

inline Precision parse_precision(const std::string& s) {
    if (s == "float") return Precision::single;
    if (s == "double") return Precision::double_;
    throw ConfigError("config key 'run.precision': must be float or double (got '" + s + "')");
}

}  // namespace detail

/// Every key the configuration accepts, in echo order.
inline const std::vector<ConfigKey>& config_keys() {
    using detail::as;
    using detail::as_list;
    using J = nlohmann::json;
    using C = ExperimentConfig;
#define LEAKGAN_KEY(name, help, type, field)                                                   \
    ConfigKey {                                                                                \
        name, help, [](const C& c) { return J(c.field); },                                     \
            [](C& c, const J& j) { c.field = as<type>(j, name); }                              \
    }
    static const std::vector<ConfigKey> keys = {
        {"data.root", "dataset root with images/, masks/, fov/ (default: $LEAKGAN_DATA_ROOT)",
         [](const C& c) { return J(c.data.root); }, [](C& c, const J& j) { c.data.root = as<std::string>(j, "data.root"); }},
        {"data.layout", "drive | stare | chase_db1 | synthetic | generic",
         [](const C& c) { return J(to_string(c.data.layout)); },
         [](C& c, const J& j) { c.data.layout = parse_layout(as<std::string>(j, "data.layout")); }},
        LEAKGAN_KEY("data.n_labelled", "labelled training images (e.g. 8 for the 8-label setting)", std::size_t,
                    data.n_labelled),
        LEAKGAN_KEY("data.n_unlabelled", "unlabelled training images (0: all images not labelled)", std::size_t,
                    data.n_unlabelled),
        LEAKGAN_KEY("data.test_root", "held-out test set root; empty evaluates on the unlabelled training images (in-memory synthetic: a disjoint corpus)",
                    std::string, data.test_root),
        LEAKGAN_KEY("data.patches_per_epoch", "random 64x64 crops per epoch (reporting only)", std::size_t,
                    data.patches_per_epoch),
        LEAKGAN_KEY("data.synthetic_count", "images in the in-memory synthetic corpus (layout=synthetic, no root)",
                    std::size_t, data.synthetic_count),
        {"data.synth", "synthetic generator parameters (object)", [](const C& c) { return J(c.data.synth); },
         [](C& c, const J& j) {
             if (!j.is_object()) throw ConfigError("config key 'data.synth': expected an object");
             c.data.synth = j.get<SynthParams>();
         }},
        {"ablation", "unet | unet_gan | unet_gan_mt | full (leak module only in full)",
         [](const C& c) { return J(to_string(c.ablation)); },
         [](C& c, const J& j) { c.ablation = parse_ablation(as<std::string>(j, "ablation")); }},
        {"leak.layers", "decoder levels receiving the leak, subset of {1,2,3,4}; 1 is the 8x8 level",
         [](const C& c) { return J(c.leak.layers); },
         [](C& c, const J& j) {
             c.leak.layers.clear();
             for (auto v : as_list<std::size_t>(j, "leak.layers")) c.leak.layers.push_back(static_cast<int>(v));
         }},
        {"leak.alpha", "per-layer scale of the generator map in the leak input (one value: every layer)",
         [](const C& c) { return J(c.leak.alpha); },
         [](C& c, const J& j) {
             c.leak.alpha = j.is_number() ? std::vector<double>{as<double>(j, "leak.alpha")}
                                          : as_list<double>(j, "leak.alpha");
         }},
        {"leak.beta", "per-layer scale of the contracting-path map in the leak input (one value: every layer)",
         [](const C& c) { return J(c.leak.beta); },
         [](C& c, const J& j) {
             c.leak.beta = j.is_number() ? std::vector<double>{as<double>(j, "leak.beta")}
                                         : as_list<double>(j, "leak.beta");
         }},
        LEAKGAN_KEY("loss.lambda1", "weight of the supervised term", double, loss.weights.lambda1),
        LEAKGAN_KEY("loss.lambda2", "weight of the unsupervised GAN term", double, loss.weights.lambda2),
        LEAKGAN_KEY("loss.lambda3", "weight of the consistency term (ramped up linearly)", double,
                    loss.weights.lambda3),
        LEAKGAN_KEY("loss.focal_alpha_t", "focal weighting factor alpha_t", double, loss.weights.focal_alpha_t),
        LEAKGAN_KEY("loss.focal_rho", "focal focusing parameter rho", double, loss.weights.focal_rho),
        {"loss.consistency", "focal | mse", [](const C& c) {
             return J(c.loss.consistency == ConsistencyKind::focal ? "focal" : "mse");
         },
         [](C& c, const J& j) { c.loss.consistency = detail::parse_consistency(as<std::string>(j, "loss.consistency")); }},
        {"loss.gen_loss", "adv | feature-matching (generator objective)",
         [](const C& c) {
             return J(c.loss.generator == GeneratorObjective::adversarial ? "adv" : "feature-matching");
         },
         [](C& c, const J& j) {
             c.loss.generator = detail::parse_generator_objective(as<std::string>(j, "loss.gen_loss"));
         }},
        LEAKGAN_KEY("loss.supervised_focal", "apply the focal weighting to the supervised term", bool,
                    loss.supervised_focal),
        LEAKGAN_KEY("loss.lambda3_rampup", "fraction of iterations over which lambda3 ramps from 0", double,
                    loss.lambda3_rampup),
        LEAKGAN_KEY("optim.lr_d", "discriminator learning rate", double, optim.lr_d),
        LEAKGAN_KEY("optim.lr_g", "generator learning rate", double, optim.lr_g),
        LEAKGAN_KEY("optim.beta1", "Adam first-moment decay", double, optim.beta1),
        LEAKGAN_KEY("optim.beta2", "Adam second-moment decay", double, optim.beta2),
        LEAKGAN_KEY("optim.batch_labelled", "labelled patches per step", std::size_t, optim.batch_labelled),
        LEAKGAN_KEY("optim.batch_unlabelled", "unlabelled patches per step", std::size_t, optim.batch_unlabelled),
        LEAKGAN_KEY("optim.batch_fake", "generated patches per step", std::size_t, optim.batch_fake),
        LEAKGAN_KEY("optim.iterations", "outer iterations (default 20000; 2000 for layout=synthetic)", std::size_t,
                    optim.iterations),
        LEAKGAN_KEY("optim.d_steps", "discriminator sub-steps per iteration", std::size_t, optim.d_steps),
        LEAKGAN_KEY("optim.g_steps", "generator sub-steps per iteration", std::size_t, optim.g_steps),
        LEAKGAN_KEY("ema.alpha", "teacher EMA decay, in [0.9, 0.999]", double, ema.alpha),
        LEAKGAN_KEY("ema.noise_lambda", "teacher input-noise scale, in (0, 1)", double, ema.noise_lambda),
        LEAKGAN_KEY("model.disc_width", "U-Net base width W (encoder widths W, 2W, 4W, 8W)", std::size_t,
                    model.disc_width),
        LEAKGAN_KEY("model.gen_width", "generator 8x8 channel count (multiple of 8)", std::size_t, model.gen_width),
        LEAKGAN_KEY("model.num_classes", "real classes K (2: background, vessel)", std::size_t, model.num_classes),
        LEAKGAN_KEY("cross_domain.target_root", "unlabelled target-domain root (enables cross-domain training)",
                    std::string, cross_domain.target_root),
        {"cross_domain.target_layout", "layout of the target dataset",
         [](const C& c) { return J(to_string(c.cross_domain.target_layout)); },
         [](C& c, const J& j) {
             c.cross_domain.target_layout = parse_layout(as<std::string>(j, "cross_domain.target_layout"));
         }},
        LEAKGAN_KEY("cross_domain.mix_ratio", "share of unlabelled slots drawn from the target, in [0, 1]", double,
                    cross_domain.mix_ratio),
        LEAKGAN_KEY("run.out_dir", "run directory", std::string, run.out_dir),
        LEAKGAN_KEY("run.checkpoint_every", "checkpoint cadence in iterations (0: final only)", std::size_t,
                    run.checkpoint_every),
        LEAKGAN_KEY("run.probe_every", "diagnostics cadence in iterations", std::size_t, run.probe_every),
        LEAKGAN_KEY("run.eval_stride", "sliding-window stride for whole-image prediction, in [1, 64]", std::size_t,
                    run.eval_stride),
        LEAKGAN_KEY("run.threshold", "vessel threshold on the posterior, in (0, 1)", double, run.threshold),
        LEAKGAN_KEY("run.fov", "auto | on | off (restrict metrics to the field of view)", std::string, run.fov),
        {"run.precision", "float | double (network arithmetic)",
         [](const C& c) { return J(c.run.precision == Precision::single ? "float" : "double"); },
         [](C& c, const J& j) { c.run.precision = detail::parse_precision(as<std::string>(j, "run.precision")); }},
        LEAKGAN_KEY("run.evaluate", "evaluate the student on the test images after training", bool, run.evaluate),
        LEAKGAN_KEY("seed", "base seed for every random stream", std::uint64_t, seed),
    };
#undef LEAKGAN_KEY
    return keys;
}

inline const ConfigKey* find_config_key(const std::string& name) {
    for (const auto& k : config_keys()) {
        if (k.name == name) return &k;
    }
    return nullptr;
}

/// Constraint checks; messages name the offending key.
inline void validate(const ExperimentConfig& c) {
    auto need = [](bool ok, const std::string& key, const std::string& what) {
        if (!ok) throw ConfigError("config key '" + key + "': " + what);
    };
    need(c.data.n_labelled >= 1, "data.n_labelled", "must be >= 1");
    need(c.data.patches_per_epoch >= 1, "data.patches_per_epoch", "must be >= 1");
    need(c.data.synthetic_count >= 2, "data.synthetic_count", "must be >= 2");
    c.data.synth.validate();
    try {
        c.leak.validate();
    } catch (const ConfigError& e) {
        throw ConfigError("config key 'leak': " + std::string(e.what()));
    }
    try {
        c.loss.weights.validate();
    } catch (const ConfigError& e) {
        throw ConfigError("config key 'loss': " + std::string(e.what()));
    }
    need(c.loss.lambda3_rampup >= 0 && c.loss.lambda3_rampup <= 1, "loss.lambda3_rampup", "must lie in [0, 1]");
    need(c.optim.lr_d > 0, "optim.lr_d", "must be > 0");
    need(c.optim.lr_g > 0, "optim.lr_g", "must be > 0");
    need(c.optim.beta1 >= 0 && c.optim.beta1 < 1, "optim.beta1", "must lie in [0, 1)");
    need(c.optim.beta2 >= 0 && c.optim.beta2 < 1, "optim.beta2", "must lie in [0, 1)");
    need(c.optim.batch_labelled >= 1, "optim.batch_labelled", "must be >= 1");
    need(c.optim.batch_unlabelled >= 1, "optim.batch_unlabelled", "must be >= 1");
    need(c.optim.batch_fake >= 1, "optim.batch_fake", "must be >= 1");
    need(c.optim.d_steps >= 1, "optim.d_steps", "must be >= 1");
    need(c.optim.g_steps >= 1, "optim.g_steps", "must be >= 1");
    need(c.ema.alpha >= 0.9 && c.ema.alpha <= 0.999, "ema.alpha", "must lie in [0.9, 0.999]");
    need(c.ema.noise_lambda > 0 && c.ema.noise_lambda < 1, "ema.noise_lambda", "must lie in (0, 1)");
    need(c.model.disc_width >= 1, "model.disc_width", "must be >= 1");
    need(c.model.gen_width >= 8 && c.model.gen_width % 8 == 0, "model.gen_width", "must be a positive multiple of 8");
    need(c.model.num_classes >= 2, "model.num_classes", "must be >= 2");
    need(c.cross_domain.mix_ratio >= 0 && c.cross_domain.mix_ratio <= 1, "cross_domain.mix_ratio",
         "must lie in [0, 1]");
    need(c.run.probe_every >= 1, "run.probe_every", "must be >= 1");
    need(c.run.eval_stride >= 1 && c.run.eval_stride <= kPatchSize, "run.eval_stride", "must lie in [1, 64]");
    need(c.run.threshold > 0 && c.run.threshold < 1, "run.threshold", "must lie in (0, 1)");
    try {
        parse_fov_policy(c.run.fov);
    } catch (const ConfigError& e) {
        throw ConfigError("config key 'run.fov': " + std::string(e.what()));
    }
}

/// Full echo of a config: every key, nested by section.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& k : config_keys()) j[nlohmann::json::json_pointer("/" + [&] {
        std::string p = k.name;
        for (auto& ch : p) if (ch == '.') ch = '/';
        return p;
    }())] = k.get(c);
    return j;
}

namespace detail {

/// Flatten {"a": {"b": 1}} to {"a.b": 1}, stopping at documented keys so
/// object-valued keys (data.synth) stay whole.
inline void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<std::pair<std::string, nlohmann::json>>& out) {
    for (const auto& [key, value] : j.items()) {
        const std::string name = prefix.empty() ? key : prefix + "." + key;
        if (value.is_object() && !find_config_key(name)) {
            flatten(value, name, out);
        } else {
            out.emplace_back(name, value);
        }
    }
}

/// Parse JSON text rejecting duplicate keys at any depth.
inline nlohmann::json parse_strict(const std::string& text, const std::string& origin) {
    std::vector<std::set<std::string>> seen;
    std::string duplicate;
    auto cb = [&](int, nlohmann::json::parse_event_t ev, nlohmann::json& parsed) {
        using E = nlohmann::json::parse_event_t;
        if (ev == E::object_start) seen.emplace_back();
        else if (ev == E::object_end) seen.pop_back();
        else if (ev == E::key) {
            const auto k = parsed.get<std::string>();
            if (!seen.back().insert(k).second && duplicate.empty()) duplicate = k;
        }
        return true;
    };
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text, cb);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    if (!duplicate.empty()) throw ConfigError("config key '" + duplicate + "': duplicate key in " + origin);
    if (!j.is_object()) throw ConfigError(origin + ": top level must be an object");
    return j;
}

}  // namespace detail

/// Apply a JSON object (nested sections or dotted keys) onto `c`.
inline void apply_json(ExperimentConfig& c, const nlohmann::json& j) {
    std::vector<std::pair<std::string, nlohmann::json>> flat;
    detail::flatten(j, "", flat);
    for (const auto& [name, value] : flat) {
        const auto* key = find_config_key(name);
        if (!key) throw ConfigError("config key '" + name + "': unknown key");
        key->set(c, value);
    }
}

/// Value of a command-line override: JSON when it parses as such
/// (numbers, booleans, lists, objects), otherwise a bare string.
inline nlohmann::json override_value(const std::string& text) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
        return nlohmann::json(text);
    }
}

struct ConfigSource {
    std::optional<std::filesystem::path> file;
    std::vector<std::pair<std::string, std::string>> overrides;  // dotted key, raw value
    std::optional<nlohmann::json> document{};                    // e.g. a manifest's config echo
};

/// Defaults <- config file <- document <- overrides, then layout-dependent defaults and
/// validation. Duplicate keys (in the file or among overrides) are errors.
inline ExperimentConfig parse_config(const ConfigSource& src) {
    ExperimentConfig c;
    std::set<std::string> given;
    auto apply_document = [&](const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("configuration document must be an object");
        std::vector<std::pair<std::string, nlohmann::json>> flat;
        detail::flatten(j, "", flat);
        for (const auto& [k, v] : flat) given.insert(k);
        apply_json(c, j);
    };
    if (src.file) {
        std::ifstream is(*src.file);
        if (!is) throw ConfigError("cannot read config file " + src.file->string());
        std::stringstream ss;
        ss << is.rdbuf();
        apply_document(detail::parse_strict(ss.str(), src.file->string()));
    }
    if (src.document) apply_document(*src.document);
    std::set<std::string> overridden;
    for (const auto& [name, raw] : src.overrides) {
        if (!overridden.insert(name).second) throw ConfigError("config key '" + name + "': given more than once");
        const auto* key = find_config_key(name);
        if (!key) throw ConfigError("config key '" + name + "': unknown key");
        key->set(c, override_value(raw));
        given.insert(name);
    }
    if (!given.count("data.root")) {
        if (const char* env = std::getenv("LEAKGAN_DATA_ROOT")) c.data.root = env;
    }
    if (!given.count("optim.iterations") && c.data.layout == DatasetLayout::synthetic) c.optim.iterations = 2000;
    // leak.alpha/beta default to 1 per selected layer; a single value applies to every layer
    for (auto* scales : {&c.leak.alpha, &c.leak.beta}) {
        const bool explicit_scale = given.count(scales == &c.leak.alpha ? "leak.alpha" : "leak.beta") > 0;
        if (!explicit_scale && given.count("leak.layers")) scales->assign(c.leak.layers.size(), 1.0);
        if (scales->size() == 1) scales->assign(c.leak.layers.size(), scales->front());
    }
    c.leak.enabled = uses_leak(c.ablation);
    validate(c);
    return c;
}

/// Help text listing every key with its default.
inline std::string config_help() {
    const ExperimentConfig defaults;
    std::ostringstream os;
    os << "Configuration keys (JSON file sections or --<key> <value>):\n";
    for (const auto& k : config_keys()) {
        os << "  " << k.name << " = " << k.get(defaults).dump() << "\n      " << k.help << "\n";
    }
    return os.str();
}

}  // namespace leakgan

#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "leakgan/checkpoint.hpp"
#include "leakgan/config.hpp"
#include "leakgan/data.hpp"
#include "leakgan/discriminator.hpp"
#include "leakgan/evaluation.hpp"
#include "leakgan/generator.hpp"
#include "leakgan/losses.hpp"
#include "leakgan/mean_teacher.hpp"
#include "leakgan/optim.hpp"
#include "leakgan/synth.hpp"

namespace leakgan {

namespace stream {
inline constexpr std::uint64_t test_corpus = 31;
}  // namespace stream

/// Observable proxies for how the discriminator treats real-unlabelled and
/// generated patches. All entries are probabilities.
struct TrainingDiagnostics {
    bool valid = false;
    double p_fake_on_unlabelled = 0;  // mean p(y = K+1 | x_ul)
    double maxclass_p_on_fake = 0;    // mean max_{i <= K} p(y = i | x_f)
    double d_real = 0;                // mean D(x_ul)
    double d_fake = 0;                // mean D(x_f)
};

namespace detail {

template <typename T>
double mean_of(const Tensor<T>& t) {
    double s = 0;
    for (const auto& v : t.values()) s += static_cast<double>(v);
    return s / static_cast<double>(t.size());
}

/// Mean of p(y = K+1) and of max_{i <= K} p(y = i) over all pixels.
template <typename T>
std::pair<double, double> fake_and_maxclass(const Tensor<T>& probs) {
    const std::size_t k1 = probs.c(), plane = probs.plane_size();
    double fake = 0, maxc = 0;
    for (std::size_t i = 0; i < probs.n(); ++i) {
        const T* p = probs.data() + i * k1 * plane;
        for (std::size_t px = 0; px < plane; ++px) {
            fake += static_cast<double>(p[(k1 - 1) * plane + px]);
            T m = p[px];
            for (std::size_t c = 1; c + 1 < k1; ++c) m = std::max(m, p[c * plane + px]);
            maxc += static_cast<double>(m);
        }
    }
    const double n = static_cast<double>(probs.n() * plane);
    return {fake / n, maxc / n};
}

}  // namespace detail

template <typename T>
TrainingDiagnostics diagnostics_from(const SegLogits<T>& unlabelled, const SegLogits<T>& fake) {
    TrainingDiagnostics d;
    d.valid = true;
    d.p_fake_on_unlabelled = detail::fake_and_maxclass(class_probabilities(unlabelled)).first;
    d.maxclass_p_on_fake = detail::fake_and_maxclass(class_probabilities(fake)).second;
    d.d_real = detail::mean_of(realness_score(unlabelled));
    d.d_fake = detail::mean_of(realness_score(fake));
    return d;
}

/// Forward x_ul and x_f through `net` (with the leak when `cfg.enabled`)
/// and summarize the class probabilities.
template <typename T>
TrainingDiagnostics probe_diagnostics(const UNet<T>& net, const PatchBatch<T>& x_ul, const PatchBatch<T>& x_f,
                                      const LeakInputs<T>* leak, const LeakConfig& cfg) {
    const auto pu = net.forward(x_ul.pixels, leak, cfg);
    const auto pf = net.forward(x_f.pixels, leak, cfg);
    return diagnostics_from(pu.out, pf.out);
}

/// Everything the training loop reads. Target images never carry masks.
struct TrainingData {
    DatasetIndex source;
    SemiSplit split;
    std::vector<std::size_t> unlabelled_pool;  // source images usable as x_ul
    std::optional<DatasetIndex> target;
    std::optional<DatasetIndex> test;       // evaluation set; nullopt = source images `test_ids`
    std::vector<std::size_t> test_ids;
};

/// Guard for the no-label-leakage rule on cross-domain targets.
inline const DatasetIndex& require_unlabelled(const DatasetIndex& index) {
    if (index.has_masks() || !index.mask_paths.empty()) {
        throw ConfigError("target dataset " + index.name + " reached training with masks attached");
    }
    return index;
}

inline TrainingData load_training_data(const ExperimentConfig& cfg) {
    TrainingData d;
    const bool in_memory = cfg.data.layout == DatasetLayout::synthetic && cfg.data.root.empty();
    if (in_memory) {
        d.source = make_synthetic_index(cfg.data.synth, cfg.data.synthetic_count,
                                        derive_seed(cfg.seed, {stream::synth}), "synthetic");
    } else {
        if (cfg.data.root.empty()) throw ConfigError("config key 'data.root': no dataset root given");
        d.source = load_dataset(cfg.data.root, cfg.data.layout);
    }
    if (!d.source.has_masks()) throw DataError("training set " + d.source.name + " has no masks");
    d.split = split_semi(d.source, cfg.data.n_labelled, cfg.seed);
    // with every image labelled, the labelled images double as unlabelled ones
    d.unlabelled_pool = d.split.unlabelled.empty() ? d.split.labelled : d.split.unlabelled;
    if (cfg.data.n_unlabelled > 0) {
        if (cfg.data.n_unlabelled > d.split.unlabelled.size()) {
            throw ConfigError("config key 'data.n_unlabelled': " + std::to_string(cfg.data.n_unlabelled) +
                              " requested but only " + std::to_string(d.split.unlabelled.size()) +
                              " images are not labelled");
        }
        d.unlabelled_pool.resize(cfg.data.n_unlabelled);
    }

    if (cfg.cross_domain_enabled()) {
        d.target = without_masks(load_dataset(cfg.cross_domain.target_root, cfg.cross_domain.target_layout));
        if (d.target->channels() != d.source.channels()) {
            throw DataError("target images have " + std::to_string(d.target->channels()) +
                            " channels, source images " + std::to_string(d.source.channels()));
        }
    }

    if (!cfg.data.test_root.empty()) {
        d.test = load_dataset(cfg.data.test_root, cfg.cross_domain_enabled() ? cfg.cross_domain.target_layout
                                                                            : cfg.data.layout);
    } else if (cfg.cross_domain_enabled()) {
        // evaluation only: reload the target with its masks, if it has any
        auto t = load_dataset(cfg.cross_domain.target_root, cfg.cross_domain.target_layout);
        if (t.has_masks()) d.test = std::move(t);
    } else if (in_memory) {
        d.test = make_synthetic_index(cfg.data.synth, std::max<std::size_t>(2, cfg.data.synthetic_count / 2),
                                      derive_seed(cfg.seed, {stream::test_corpus}), "synthetic-test");
    } else {
        d.test_ids = d.split.unlabelled.empty() ? d.split.labelled : d.split.unlabelled;
    }
    return d;
}

template <typename T>
struct StepBatch {
    PatchBatch<T> labelled;
    LabelMaskBatch labels;
    PatchBatch<T> unlabelled;  // empty for unet_only
};

/// Batches for outer iteration `step`. Every draw is keyed on (seed, stream,
/// step), so the batch is a pure function of the config and the step.
template <typename T>
StepBatch<T> sample_step_batch(const ExperimentConfig& cfg, const TrainingData& data, std::uint64_t step) {
    StepBatch<T> b;
    auto lab = extract_patches<T>(data.source, data.split.labelled, cfg.optim.batch_labelled,
                                  derive_seed(cfg.seed, {stream::labelled_batch, step}));
    if (!lab.labels) throw ConfigError("labelled batch has no masks");
    b.labelled = std::move(lab.patches);
    b.labels = std::move(*lab.labels);
    if (!uses_generator(cfg.ablation)) return b;

    const std::size_t n = cfg.optim.batch_unlabelled;
    const std::size_t n_target =
        data.target ? static_cast<std::size_t>(std::lround(cfg.cross_domain.mix_ratio * static_cast<double>(n))) : 0;
    const std::size_t n_source = n - n_target;
    std::vector<PatchBatch<T>> parts;
    if (n_source > 0) {
        parts.push_back(extract_patches<T>(data.source, data.unlabelled_pool, n_source,
                                           derive_seed(cfg.seed, {stream::unlabelled_batch, step}))
                            .patches);
    }
    if (n_target > 0) {
        const auto& target = require_unlabelled(*data.target);
        std::vector<std::size_t> all(target.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        parts.push_back(
            extract_patches<T>(target, all, n_target, derive_seed(cfg.seed, {stream::target_batch, step})).patches);
    }
    if (parts.size() == 1) {
        b.unlabelled = std::move(parts.front());
    } else {
        b.unlabelled.pixels = concat_batch(parts[0].pixels, parts[1].pixels);
        for (auto& p : parts) {
            b.unlabelled.source_ids.insert(b.unlabelled.source_ids.end(), p.source_ids.begin(), p.source_ids.end());
            b.unlabelled.crop_origins.insert(b.unlabelled.crop_origins.end(), p.crop_origins.begin(),
                                             p.crop_origins.end());
        }
    }
    return b;
}

/// Models and optimizer state of one run. Optimizers hold pointers into the
/// networks, so the state is pinned in place (create with make_unique).
template <typename T>
class TrainerState {
public:
    TrainerState(const ExperimentConfig& cfg, std::size_t image_channels) : cfg_(cfg) {
        validate(cfg_);
        cfg_.leak.enabled = uses_leak(cfg_.ablation);
        if (cfg_.leak.enabled && cfg_.optim.batch_unlabelled != cfg_.optim.batch_fake) {
            throw ConfigError(
                "config key 'optim.batch_unlabelled': must equal optim.batch_fake when the leak is enabled");
        }
        std::array<std::size_t, kLadderLevels> leak_ch{0, 0, 0, 0};
        if (uses_generator(cfg_.ablation)) {
            generator_.emplace(cfg_.model.gen_width, image_channels);
            generator_->init(derive_seed(cfg_.seed, {stream::init_generator}));
            if (cfg_.leak.enabled) {
                const auto ladder = generator_->ladder_channels();
                for (int l : cfg_.leak.layers) leak_ch[l - 1] = ladder[l - 1];
            }
        }
        student_ = UNet<T>(image_channels, cfg_.model.disc_width, cfg_.model.num_classes, leak_ch);
        student_.init(derive_seed(cfg_.seed, {stream::init_discriminator}), derive_seed(cfg_.seed, {stream::init_leak}));
        if (uses_teacher(cfg_.ablation)) teacher_ = make_teacher(student_, cfg_.ema.alpha, cfg_.ema.noise_lambda);
        opt_d_ = Adam<T>("adam_d", student_.parameters(), {cfg_.optim.lr_d, cfg_.optim.beta1, cfg_.optim.beta2});
        if (generator_) {
            opt_g_.emplace("adam_g", generator_->parameters(),
                           AdamConfig{cfg_.optim.lr_g, cfg_.optim.beta1, cfg_.optim.beta2});
        }
    }
    TrainerState(const TrainerState&) = delete;
    TrainerState& operator=(const TrainerState&) = delete;

    const ExperimentConfig& config() const noexcept { return cfg_; }
    UNet<T>& student() noexcept { return student_; }
    const UNet<T>& student() const noexcept { return student_; }
    bool has_generator() const noexcept { return generator_.has_value(); }
    bool has_teacher() const noexcept { return teacher_.has_value(); }
    Generator<T>& generator() { return *generator_; }
    TeacherState<T>& teacher() { return *teacher_; }
    const TeacherState<T>& teacher() const { return *teacher_; }
    Adam<T>& opt_d() noexcept { return opt_d_; }
    Adam<T>& opt_g() { return *opt_g_; }
    std::uint64_t step() const noexcept { return step_; }
    void advance() noexcept { ++step_; }

    /// Linear ramp of lambda3 over the first `lambda3_rampup` of training.
    double lambda3_scale() const {
        const double ramp = cfg_.loss.lambda3_rampup * static_cast<double>(cfg_.optim.iterations);
        return ramp <= 0 ? 1.0 : std::min(1.0, static_cast<double>(step_) / ramp);
    }

    Checkpoint to_checkpoint() {
        Checkpoint ck;
        nlohmann::json meta{{"format", "leakgan-trainer"},
                            {"step", step_},
                            {"ablation", to_string(cfg_.ablation)},
                            {"opt_d_steps", opt_d_.steps()},
                            {"config", config_to_json(cfg_)}};
        put(ck, "student/", student_.parameters());
        put(ck, "", opt_d_.state());
        if (teacher_) {
            put(ck, "teacher/", teacher_->net.parameters());
            meta["teacher_step"] = teacher_->step;
        }
        if (generator_) {
            put(ck, "generator/", generator_->parameters());
            put(ck, "generator/", generator_->buffers());
            put(ck, "", opt_g_->state());
            meta["opt_g_steps"] = opt_g_->steps();
        }
        ck.metadata = meta.dump();
        return ck;
    }

    void load(const Checkpoint& ck) {
        nlohmann::json meta;
        try {
            meta = nlohmann::json::parse(ck.metadata);
        } catch (const nlohmann::json::parse_error&) {
            throw DataError("checkpoint metadata is not valid JSON");
        }
        if (meta.value("format", "") != "leakgan-trainer") throw DataError("not a trainer checkpoint");
        if (meta.at("ablation").get<std::string>() != to_string(cfg_.ablation)) {
            throw ConfigError("checkpoint was written for ablation '" + meta.at("ablation").get<std::string>() +
                              "', config asks for '" + to_string(cfg_.ablation) + "'");
        }
        get(ck, "student/", student_.parameters());
        get(ck, "", opt_d_.state());
        opt_d_.set_steps(meta.at("opt_d_steps").get<std::uint64_t>());
        if (teacher_) {
            get(ck, "teacher/", teacher_->net.parameters());
            teacher_->step = meta.at("teacher_step").get<std::uint64_t>();
        }
        if (generator_) {
            get(ck, "generator/", generator_->parameters());
            get(ck, "generator/", generator_->buffers());
            get(ck, "", opt_g_->state());
            opt_g_->set_steps(meta.at("opt_g_steps").get<std::uint64_t>());
        }
        step_ = meta.at("step").get<std::uint64_t>();
    }

private:
    static void put(Checkpoint& ck, const std::string& prefix, const std::vector<Param<T>*>& ps) {
        for (auto* p : ps) ck.put(prefix + p->name, p->value);
    }
    static void put(Checkpoint& ck, const std::string& prefix, const std::vector<Buffer<T>>& bs) {
        for (const auto& b : bs) ck.put(prefix + b.name, *b.tensor);
    }
    static void get(const Checkpoint& ck, const std::string& prefix, const std::vector<Param<T>*>& ps) {
        for (auto* p : ps) ck.get(prefix + p->name, p->value);
    }
    static void get(const Checkpoint& ck, const std::string& prefix, const std::vector<Buffer<T>>& bs) {
        for (const auto& b : bs) ck.get(prefix + b.name, *b.tensor);
    }

    ExperimentConfig cfg_;
    UNet<T> student_;
    std::optional<Generator<T>> generator_;
    std::optional<TeacherState<T>> teacher_;
    Adam<T> opt_d_;
    std::optional<Adam<T>> opt_g_;
    std::uint64_t step_ = 0;
};

struct StepResult {
    LossBundle losses;
    TrainingDiagnostics diagnostics;
};

/// The discriminator objective L* on one batch against fixed fakes.
/// With `accumulate`, scaled dL*/dtheta is added to the student's gradients.
template <typename T>
StepResult discriminator_objective(TrainerState<T>& st, const StepBatch<T>& batch,
                                   const typename Generator<T>::Pass* gen, std::uint64_t teacher_seed,
                                   bool accumulate) {
    const auto& cfg = st.config();
    const auto& w = cfg.loss.weights;
    const LeakConfig off{};
    auto& net = st.student();
    StepResult r;

    auto pl = net.forward(batch.labelled.pixels, nullptr, off);
    Tensor<T> g_l;
    const double sup = supervised_loss(pl.out, batch.labels, w, cfg.loss.supervised_focal, accumulate ? &g_l : nullptr);
    if (!gen) {
        r.losses = total_discriminator_loss(sup, 0.0, 0.0, w, st.lambda3_scale());
        if (accumulate) {
            g_l *= static_cast<T>(w.lambda1);
            net.backward(pl, g_l);
        }
        return r;
    }

    const auto ladder = leak_inputs(gen->acts);
    const LeakInputs<T>* leak = cfg.leak.enabled ? &ladder : nullptr;
    auto pu = net.forward(batch.unlabelled.pixels, leak, cfg.leak);
    auto pf = net.forward(gen->acts.fake_image.pixels, leak, cfg.leak);
    Tensor<T> g_u, g_f;
    const double unsup = unsupervised_loss(pu.out, pf.out, accumulate ? &g_u : nullptr, accumulate ? &g_f : nullptr);

    double cons = 0.0;
    Tensor<T> g_cons;
    if (st.has_teacher()) {
        const auto pt = teacher_predict(st.teacher(), batch.unlabelled, teacher_seed);
        const auto ps = class_probabilities(pu.out);
        Tensor<T> d_ps;
        cons = cfg.loss.consistency == ConsistencyKind::focal
                   ? focal_consistency(ps, pt, w, accumulate ? &d_ps : nullptr)
                   : mse_consistency(ps, pt, accumulate ? &d_ps : nullptr);
        if (accumulate) posterior_backward(ps, d_ps, g_cons);
    }
    const double ramp = st.lambda3_scale();
    r.losses = total_discriminator_loss(sup, unsup, cons, w, ramp);
    r.diagnostics = diagnostics_from(pu.out, pf.out);
    if (accumulate) {
        g_l *= static_cast<T>(w.lambda1);
        g_u *= static_cast<T>(w.lambda2);
        g_f *= static_cast<T>(w.lambda2);
        if (!g_cons.empty()) {
            g_cons *= static_cast<T>(w.lambda3 * ramp);
            g_u += g_cons;
        }
        net.backward(pl, g_l);
        net.backward(pu, g_u);
        net.backward(pf, g_f);
    }
    return r;
}

/// One generator update on L_adv- (or feature matching) through the current
/// discriminator. Returns the generator objective.
template <typename T>
double generator_step(TrainerState<T>& st, const StepBatch<T>& batch, const typename Generator<T>::Pass& gp) {
    const auto& cfg = st.config();
    auto& net = st.student();
    auto& gen = st.generator();
    const auto ladder = leak_inputs(gp.acts);
    const LeakInputs<T>* leak = cfg.leak.enabled ? &ladder : nullptr;
    auto pf = net.forward(gp.acts.fake_image.pixels, leak, cfg.leak);
    double value = 0.0;
    typename UNet<T>::Gradients grads;
    if (cfg.loss.generator == GeneratorObjective::adversarial) {
        Tensor<T> d;
        value = generator_adversarial_loss(pf.out, &d);
        grads = net.backward(pf, d, nullptr, true, cfg.leak.enabled);
    } else {
        const LeakConfig off{};
        const auto pu = net.forward(batch.unlabelled.pixels, nullptr, off);
        Tensor<T> d_bn;
        value = feature_matching_loss(pu.features, pf.features, &d_bn);
        grads = net.backward(pf, Tensor<T>(pf.out.logits.shape()), &d_bn, true, false);
    }
    if (!std::isfinite(value)) throw NumericError("non-finite loss term: gen_adv");
    st.opt_g().zero_grad();
    gen.backward(gp, grads.d_input, std::span<const Tensor<T>>(grads.d_leak));
    st.opt_g().step();
    return value;
}

/// One outer iteration: sample z, run the discriminator sub-steps on L*
/// (each followed by the teacher EMA update), then the generator sub-steps.
/// Reported losses and diagnostics are those of the first D sub-step.
template <typename T>
StepResult train_step(TrainerState<T>& st, const StepBatch<T>& batch) {
    const auto& cfg = st.config();
    const std::uint64_t step = st.step();
    if (batch.labels.batch == 0) throw ConfigError("train_step: empty labelled batch");
    std::optional<typename Generator<T>::Pass> gp;
    if (st.has_generator()) {
        if (batch.unlabelled.pixels.empty()) throw ConfigError("train_step: GAN ablations need an unlabelled batch");
        const auto z = sample_noise<T>(cfg.optim.batch_fake, derive_seed(cfg.seed, {stream::noise_z, step}));
        gp = st.generator().forward(z, true, true);
    }
    StepResult first;
    for (std::size_t k = 0; k < cfg.optim.d_steps; ++k) {
        st.opt_d().zero_grad();
        auto r = discriminator_objective(st, batch, gp ? &*gp : nullptr,
                                         derive_seed(cfg.seed, {stream::teacher_noise, step, k}), true);
        if (k == 0) first = std::move(r);
        st.opt_d().step();
        if (st.has_teacher()) ema_update(st.teacher(), st.student());
    }
    if (gp) {
        for (std::size_t k = 0; k < cfg.optim.g_steps; ++k) {
            // the first sub-step reuses the pass above: same z, same weights
            if (k > 0) gp = st.generator().forward(gp->z, true, false);
            const double v = generator_step(st, batch, *gp);
            if (k == 0) first.losses.gen_adv = v;
        }
    }
    first.losses.diagnostics["lambda3_scale"] = st.lambda3_scale();
    st.advance();
    return first;
}

/// Column order of curves.csv.
inline std::string curves_header() {
    return "step,sup,unsup,cons,total,gen_adv,lambda3_scale,p_fake_unlabelled,maxclass_p_fake,d_real,d_fake";
}

inline std::string curves_row(std::uint64_t step, const StepResult& r, bool with_diagnostics) {
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    const auto& l = r.losses;
    std::string row = std::to_string(step) + "," + num(l.sup) + "," + num(l.unsup) + "," + num(l.cons) + "," +
                      num(l.total) + "," + num(l.gen_adv) + "," + num(l.diagnostics.at("lambda3_scale"));
    const auto& d = r.diagnostics;
    if (with_diagnostics && d.valid) {
        row += "," + num(d.p_fake_on_unlabelled) + "," + num(d.maxclass_p_on_fake) + "," + num(d.d_real) + "," +
               num(d.d_fake);
    } else {
        row += ",,,,";
    }
    return row;
}

namespace detail {

/// Keep the header and rows whose step is <= `last`.
inline void truncate_curves(const std::filesystem::path& path, std::uint64_t last) {
    std::ifstream is(path);
    std::vector<std::string> keep;
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (header) {
            keep.push_back(line);
            header = false;
            continue;
        }
        if (std::stoull(line.substr(0, line.find(','))) <= last) keep.push_back(line);
    }
    is.close();
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot rewrite " + path.string());
    for (const auto& l : keep) os << l << '\n';
}

inline std::string checkpoint_name(std::uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%08llu.ckpt", static_cast<unsigned long long>(step));
    return buf;
}

}  // namespace detail

struct RunArtifacts {
    std::filesystem::path out_dir;
    std::filesystem::path curves;
    std::vector<std::filesystem::path> checkpoints;
    std::optional<MetricsReport> report;
    std::uint64_t steps = 0;
};

/// Student metrics on the test images of `data`.
template <typename T>
MetricsReport evaluate_student(const UNet<T>& net, const ExperimentConfig& cfg, const TrainingData& data) {
    EvalOptions opt;
    opt.stride = cfg.run.eval_stride;
    opt.threshold = cfg.run.threshold;
    opt.fov = parse_fov_policy(cfg.run.fov);
    const DatasetIndex& test = data.test ? *data.test : data.source;
    bool fov_used = false;
    auto images = evaluate_images(net, test, data.test ? std::vector<std::size_t>{} : data.test_ids, opt, &fov_used);
    EvalSetting s{data.source.name, test.name, to_string(cfg.ablation), cfg.data.n_labelled, "student",
                  opt.stride, opt.threshold, fov_used};
    return build_report(s, std::move(images));
}

/// Full training run into cfg.run.out_dir: curves.csv, checkpoints/ and,
/// when evaluation is on and test masks exist, report.json / report.txt.
/// `resume_from` continues a run from one of its checkpoints.
template <typename T>
RunArtifacts train(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& resume_from = {}) {
    validate(cfg);
    const TrainingData data = load_training_data(cfg);
    auto st = std::make_unique<TrainerState<T>>(cfg, data.source.channels());

    RunArtifacts out;
    out.out_dir = cfg.run.out_dir;
    out.curves = out.out_dir / "curves.csv";
    const auto ckpt_dir = out.out_dir / "checkpoints";
    std::error_code ec;
    std::filesystem::create_directories(ckpt_dir, ec);
    if (ec) throw IoError("cannot create " + ckpt_dir.string() + ": " + ec.message());

    auto save = [&] {
        const auto path = ckpt_dir / detail::checkpoint_name(st->step());
        st->to_checkpoint().save(path);
        out.checkpoints.push_back(path);
    };

    if (resume_from) {
        st->load(Checkpoint::load(*resume_from));
        out.checkpoints.push_back(*resume_from);
        if (std::filesystem::exists(out.curves)) {
            detail::truncate_curves(out.curves, st->step());
        } else {
            std::ofstream(out.curves) << curves_header() << '\n';
        }
    } else {
        std::ofstream os(out.curves, std::ios::trunc);
        if (!os) throw IoError("cannot write " + out.curves.string());
        os << curves_header() << '\n';
        os.close();
        save();
    }

    std::ofstream curves(out.curves, std::ios::app);
    if (!curves) throw IoError("cannot append to " + out.curves.string());
    while (st->step() < cfg.optim.iterations) {
        const auto batch = sample_step_batch<T>(cfg, data, st->step());
        StepResult r;
        try {
            r = train_step(*st, batch);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at step " + std::to_string(st->step()) +
                               "; last good checkpoint: " + out.checkpoints.back().string());
        }
        const std::uint64_t done = st->step();
        curves << curves_row(done, r, (done - 1) % cfg.run.probe_every == 0) << '\n';
        curves.flush();
        if (!curves) throw IoError("write failed for " + out.curves.string());
        if (cfg.run.checkpoint_every > 0 && done % cfg.run.checkpoint_every == 0) save();
    }
    curves.close();
    if (out.checkpoints.empty() || out.checkpoints.back().filename() != detail::checkpoint_name(st->step())) save();
    out.steps = st->step();

    const bool has_test_masks = data.test ? data.test->has_masks() : data.source.has_masks();
    if (cfg.run.evaluate && has_test_masks) {
        out.report = evaluate_student(st->student(), cfg, data);
        emit_report(*out.report, out.out_dir);
    }
    return out;
}

/// Cross-domain variant: unlabelled batches mix in target-domain patches
/// and evaluation runs on the target test images.
template <typename T>
RunArtifacts train_cross_domain(const ExperimentConfig& cfg,
                                const std::optional<std::filesystem::path>& resume_from = {}) {
    if (!cfg.cross_domain_enabled()) throw ConfigError("config key 'cross_domain.target_root': required for cross-train");
    if (!uses_generator(cfg.ablation)) {
        throw ConfigError("config key 'ablation': cross-domain training needs unlabelled batches (not unet)");
    }
    return train<T>(cfg, resume_from);
}

namespace detail {

inline nlohmann::json config_from_metadata(const std::string& metadata, const std::filesystem::path& path) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(metadata);
    } catch (const nlohmann::json::parse_error&) {
        throw DataError("checkpoint metadata is not valid JSON: " + path.string());
    }
    if (!meta.is_object() || !meta.contains("config")) {
        throw DataError("checkpoint has no config snapshot: " + path.string());
    }
    return meta.at("config");
}

}  // namespace detail

/// Config echo stored in a trainer checkpoint.
inline nlohmann::json checkpoint_config_json(const std::filesystem::path& path) {
    return detail::config_from_metadata(Checkpoint::load_metadata(path), path);
}

inline ExperimentConfig checkpoint_config(const std::filesystem::path& path) {
    ExperimentConfig cfg;
    apply_json(cfg, checkpoint_config_json(path));
    cfg.leak.enabled = uses_leak(cfg.ablation);
    return cfg;
}

/// Rebuild a trained student from a trainer checkpoint.
template <typename T>
std::unique_ptr<TrainerState<T>> load_trainer(const std::filesystem::path& path) {
    const auto ck = Checkpoint::load(path);
    const auto first = ck.entries.find("student/disc.enc1.conv1.weight");
    if (first == ck.entries.end()) throw DataError("checkpoint has no student network: " + path.string());
    const auto image_channels = static_cast<std::size_t>(first->second.dims[1]);
    ExperimentConfig cfg;
    apply_json(cfg, detail::config_from_metadata(ck.metadata, path));
    cfg.leak.enabled = uses_leak(cfg.ablation);
    auto st = std::make_unique<TrainerState<T>>(cfg, image_channels);
    st->load(ck);
    return st;
}

}  // namespace leakgan

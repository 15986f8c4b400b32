// Acceptance gate: one PASS/FAIL line per criterion. Tolerances, seeds and
// experiment scales are pinned here; a criterion passes only if its check
// holds and it finishes inside its runtime limit.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "leakgan/leakgan.hpp"

namespace fs = std::filesystem;
using namespace leakgan;

namespace {

struct Outcome {
    bool ok = false;
    std::string detail;
};

struct Criterion {
    int id;
    const char* name;
    double limit_seconds;
    std::function<Outcome(const fs::path& scratch)> run;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

using Td = Tensor<double>;

template <typename T>
void fill_normal(Tensor<T>& t, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, scale);
    for (auto& v : t.values()) v = static_cast<T>(d(rng));
}

template <typename T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// Running record of named checks; the first failure is kept for the report.
struct Checks {
    bool ok = true;
    std::string first_failure;
    int count = 0;

    void expect(bool cond, const std::string& what) {
        ++count;
        if (!cond && ok) first_failure = what;
        ok = ok && cond;
    }
    void near(double got, double want, double tol, const std::string& what) {
        expect(std::abs(got - want) <= tol, what + ": got " + fmt("%.10g", got) + ", want " + fmt("%.10g", want));
    }
    Outcome outcome(const std::string& summary) const {
        return {ok, ok ? summary : "first failure: " + first_failure};
    }
};

// ---------------------------------------------------------------------------
// 1. Loss oracles

Outcome loss_oracles(const fs::path&) {
    Checks c;
    const LossWeights w;  // alpha_t = 2, rho = 0.25
    const double ln2 = std::log(2.0);

    // focal point value at p_t = 1/2 (two equal free logits)
    {
        SegLogits<double> s{Td(1, 2, 1, 1)};
        const LabelMaskBatch y{1, 1, 1, 2, {1}};
        const double oracle = 2.0 * std::pow(0.5, 0.25) * ln2;
        c.near(oracle, 1.1657, 5e-5, "focal oracle value");
        c.near(supervised_loss(s, y, w, true), oracle, 1e-12, "focal supervised loss at p_t = 0.5");
    }
    // softmax over (ln2, ln2, 0) and the realness score at zero logits
    {
        SegLogits<double> s{Td(1, 2, 1, 1)};
        s.logits.values() = {ln2, ln2};
        const auto p = class_probabilities(s);
        c.near(p[0], 0.4, 1e-15, "posterior class 0");
        c.near(p[1], 0.4, 1e-15, "posterior class 1");
        c.near(p[2], 0.2, 1e-15, "posterior fake class");
        SegLogits<double> z{Td(1, 2, 1, 1)};
        c.near(realness_score(z)[0], 2.0 / 3.0, 1e-15, "realness at zero logits");
    }
    // D = 1/2 everywhere: both logits -ln2 make Z = 1
    {
        SegLogits<double> half{Td(2, 2, 3, 3)};
        for (auto& v : half.logits.values()) v = -ln2;
        c.near(unsupervised_loss(half, half), 2.0 * ln2, 1e-12, "unsupervised loss at D = 1/2");
        c.near(generator_adversarial_loss(half), -ln2, 1e-12, "generator loss at D = 1/2");
    }
    // direct realness form against the log-sum-exp form on random logits
    {
        double worst = 0;
        for (std::uint64_t trial = 0; trial < 50; ++trial) {
            SegLogits<double> real{Td(2, 2, 4, 4)}, fake{Td(2, 2, 4, 4)};
            fill_normal(real.logits, 100 + trial, 2.0);
            fill_normal(fake.logits, 200 + trial, 2.0);
            auto direct = [](const SegLogits<double>& s, bool is_real) {
                const auto& l = s.logits;
                const std::size_t plane = l.plane_size();
                double acc = 0;
                for (std::size_t i = 0; i < l.n(); ++i) {
                    for (std::size_t px = 0; px < plane; ++px) {
                        double z = 0;
                        for (std::size_t k = 0; k < l.c(); ++k) z += std::exp(l[(i * l.c() + k) * plane + px]);
                        const double d = z / (z + 1.0);
                        acc += -std::log(is_real ? d : 1.0 - d);
                    }
                }
                return acc / static_cast<double>(l.n() * plane);
            };
            const double oracle = direct(real, true) + direct(fake, false);
            worst = std::max(worst, std::abs(oracle - unsupervised_loss(real, fake)));
        }
        c.expect(worst < 1e-5, "dual-form disagreement " + fmt("%.3g", worst));
    }
    // consistency terms
    {
        Td p(1, 3, 1, 1), q(1, 3, 1, 1);
        p.values() = {1, 0, 0};
        q.values() = {0, 1, 0};
        c.near(mse_consistency(p, q), 2.0 / 3.0, 1e-15, "mse consistency one-hot pair");
        Td a(1, 1, 1, 1), b(1, 1, 1, 1);
        a[0] = 0.9;
        b[0] = 0.5;
        const double oracle = 2.0 * std::pow(0.4, 0.25) * std::abs(std::log(0.9) - std::log(0.5));
        c.near(oracle, 0.9350, 5e-4, "focal consistency oracle value");
        c.near(focal_consistency(a, b, w), oracle, 1e-12, "focal consistency single channel");
        double prev = -1;
        for (double v = 0.5; v <= 0.99 + 1e-12; v += 0.01) {
            a[0] = v;
            const double cur = focal_consistency(a, b, w);
            c.expect(cur >= prev, "focal consistency not monotone at p = " + fmt("%.2f", v));
            prev = cur;
        }
    }
    // feature matching on a constant offset
    {
        EncoderFeatures<double> real, fake;
        real.bottleneck = Td(3, 4, 2, 2);
        fill_normal(real.bottleneck, 5);
        fake.bottleneck = real.bottleneck;
        for (auto& v : fake.bottleneck.values()) v += 1.0;
        c.near(feature_matching_loss(real, fake), 16.0, 1e-9, "feature matching offset");
    }
    return c.outcome(std::to_string(c.count) + " oracle checks");
}

// ---------------------------------------------------------------------------
// 2. Gradients against central finite differences

double relative_error(const Td& a, const Td& b) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        diff += (a[k] - b[k]) * (a[k] - b[k]);
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
}

Td numeric_gradient(Td& x, const std::function<double()>& f, double h = 1e-6) {
    Td g(x.shape());
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double saved = x[k];
        x[k] = saved + h;
        const double up = f();
        x[k] = saved - h;
        const double down = f();
        x[k] = saved;
        g[k] = (up - down) / (2 * h);
    }
    return g;
}

/// Five pixels of posteriors over three channels, bounded away from 0.
Td toy_posteriors(std::uint64_t seed) {
    Td p(1, 3, 1, 5);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    for (std::size_t px = 0; px < 5; ++px) {
        double s = 0;
        for (std::size_t k = 0; k < 3; ++k) s += (p[k * 5 + px] = u(rng));
        for (std::size_t k = 0; k < 3; ++k) p[k * 5 + px] /= s;
    }
    return p;
}

Outcome gradients(const fs::path&) {
    constexpr double kTol = 1e-4;
    const LossWeights w;
    std::vector<std::pair<std::string, double>> errs;
    const LabelMaskBatch y{1, 1, 5, 2, {0, 1, 1, 0, 1}};

    for (bool focal : {false, true}) {
        SegLogits<double> s{Td(1, 2, 1, 5)};
        fill_normal(s.logits, 1, 1.5);
        Td g;
        supervised_loss(s, y, w, focal, &g);
        const auto n = numeric_gradient(s.logits, [&] { return supervised_loss(s, y, w, focal); });
        errs.emplace_back(focal ? "supervised focal" : "supervised plain", relative_error(g, n));
    }
    {
        SegLogits<double> real{Td(1, 2, 1, 5)}, fake{Td(1, 2, 1, 5)};
        fill_normal(real.logits, 2, 1.5);
        fill_normal(fake.logits, 3, 1.5);
        Td gr, gf;
        unsupervised_loss(real, fake, &gr, &gf);
        const auto nr = numeric_gradient(real.logits, [&] { return unsupervised_loss(real, fake); });
        const auto nf = numeric_gradient(fake.logits, [&] { return unsupervised_loss(real, fake); });
        errs.emplace_back("unsupervised real", relative_error(gr, nr));
        errs.emplace_back("unsupervised fake", relative_error(gf, nf));
    }
    {
        auto p = toy_posteriors(4);
        const auto q = toy_posteriors(5);
        Td g;
        focal_consistency(p, q, w, &g);
        errs.emplace_back("focal consistency",
                          relative_error(g, numeric_gradient(p, [&] { return focal_consistency(p, q, w); })));
        Td gm;
        mse_consistency(p, q, &gm);
        errs.emplace_back("mse consistency",
                          relative_error(gm, numeric_gradient(p, [&] { return mse_consistency(p, q); })));
    }
    {
        SegLogits<double> fake{Td(1, 2, 1, 5)};
        fill_normal(fake.logits, 6, 1.5);
        Td g;
        generator_adversarial_loss(fake, &g);
        errs.emplace_back("generator adversarial",
                          relative_error(g, numeric_gradient(fake.logits, [&] { return generator_adversarial_loss(fake); })));
        EncoderFeatures<double> r, f;
        r.bottleneck = Td(2, 5, 1, 1);
        f.bottleneck = Td(2, 5, 1, 1);
        fill_normal(r.bottleneck, 7);
        fill_normal(f.bottleneck, 8);
        Td gf;
        feature_matching_loss(r, f, &gf);
        errs.emplace_back("generator feature matching",
                          relative_error(gf, numeric_gradient(f.bottleneck, [&] { return feature_matching_loss(r, f); })));
    }
    Checks c;
    double worst = 0;
    for (const auto& [name, e] : errs) {
        c.expect(e < kTol, name + " relative error " + fmt("%.3g", e));
        worst = std::max(worst, e);
    }
    return c.outcome(std::to_string(errs.size()) + " gradients, worst relative error " + fmt("%.2e", worst));
}

// ---------------------------------------------------------------------------
// 3. Leak switch

Outcome leak_switch(const fs::path&) {
    std::mt19937_64 rng(2024);
    auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    std::uniform_real_distribution<double> scale(0.0, 2.0);
    constexpr int kTrials = 100;
    for (int trial = 0; trial < kTrials; ++trial) {
        const std::size_t width = pick(1, 3), channels = pick(0, 1) ? 3 : 1, batch = pick(1, 2);
        LeakConfig cfg;
        cfg.layers.clear();
        cfg.alpha.clear();
        cfg.beta.clear();
        std::array<std::size_t, kLadderLevels> leak_ch{0, 0, 0, 0};
        while (cfg.layers.empty()) {
            for (int l = 1; l <= 4; ++l) {
                if (pick(0, 1)) {
                    cfg.layers.push_back(l);
                    leak_ch[l - 1] = pick(1, 4);
                }
            }
        }
        for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
            cfg.alpha.push_back(scale(rng));
            cfg.beta.push_back(scale(rng));
        }
        cfg.enabled = false;

        const std::uint64_t s = rng();
        UNet<float> leaky(channels, width, 2, leak_ch);
        leaky.init(s, s + 1);
        UNet<float> plain(channels, width, 2, {0, 0, 0, 0});
        plain.init(s, s + 1);

        Tensor<float> x(batch, channels, 64, 64);
        fill_normal(x, rng(), 0.7);
        std::array<Tensor<float>, kLadderLevels> ladder;
        for (std::size_t l = 0; l < kLadderLevels; ++l) {
            ladder[l] = Tensor<float>(batch, std::max<std::size_t>(leak_ch[l], 1), 8u << l, 8u << l);
            fill_normal(ladder[l], rng());
        }
        const LeakInputs<float> ptrs{&ladder[0], &ladder[1], &ladder[2], &ladder[3]};
        const auto off = leaky.forward(x, &ptrs, cfg);
        const auto never = plain.forward(x, nullptr, LeakConfig{});
        if (!bit_identical(off.out.logits, never.out.logits)) {
            return {false, "trial " + std::to_string(trial) + " differs"};
        }
    }
    return {true, std::to_string(kTrials) + " triples bit-identical"};
}

// ---------------------------------------------------------------------------
// 4. EMA closed form

Outcome ema_closed_form(const fs::path&) {
    constexpr double kTol = 1e-6;
    constexpr int kSteps = 100;
    Checks c;
    double worst = 0;
    for (double alpha : {0.9, 0.99, 0.999}) {
        UNet<double> student(1, 2, 2, {0, 0, 0, 0});
        student.init(1, 2);
        UNet<double> start(1, 2, 2, {0, 0, 0, 0});
        start.init(3, 4);
        auto teacher = make_teacher(student, alpha, 0.1);
        teacher.net.copy_weights_from(start);
        for (int k = 0; k < kSteps; ++k) ema_update(teacher, student);
        const double decay = std::pow(alpha, kSteps);
        auto tp = teacher.net.parameters(), sp = student.parameters(), ip = start.parameters();
        for (std::size_t i = 0; i < tp.size(); ++i) {
            for (std::size_t k = 0; k < tp[i]->value.size(); ++k) {
                const double gap = tp[i]->value[k] - sp[i]->value[k];
                const double want = decay * (ip[i]->value[k] - sp[i]->value[k]);
                worst = std::max(worst, std::abs(gap - want));
            }
        }
        c.expect(worst <= kTol, "alpha " + fmt("%.3f", alpha) + " gap error " + fmt("%.3g", worst));
    }
    return c.outcome("worst elementwise gap error " + fmt("%.2e", worst));
}

// ---------------------------------------------------------------------------
// 5. Metric oracle

Outcome metric_oracle(const fs::path&) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Checks c;
    for (int trial = 0; trial < 1000; ++trial) {
        const double dp = u(rng), dg = u(rng);
        BinaryMask pred(32, 32), gt(32, 32), fov(32, 32);
        for (std::size_t k = 0; k < 1024; ++k) {
            pred.data[k] = u(rng) < dp;
            gt.data[k] = u(rng) < dg;
            fov.data[k] = u(rng) < 0.8;
        }
        const bool use_fov = trial % 2 == 1;
        std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
        std::uint64_t white = 0, blue = 0, yellow = 0, black = 0;
        for (std::size_t y = 0; y < 32; ++y) {
            for (std::size_t x = 0; x < 32; ++x) {
                const bool p = pred.at(y, x), g = gt.at(y, x);
                white += p && g;
                blue += p && !g;
                yellow += !p && g;
                black += !p && !g;
                if (use_fov && !fov.at(y, x)) continue;
                tp += p && g;
                fp += p && !g;
                fn += !p && g;
                tn += !p && !g;
            }
        }
        const auto counts = confusion_counts(pred, gt, use_fov ? &fov : nullptr);
        const std::string at = "trial " + std::to_string(trial);
        c.expect(counts == ConfusionCounts{tp, fp, tn, fn}, at + " confusion counts");
        const auto m = metrics(counts);
        const double total = static_cast<double>(tp + fp + tn + fn);
        c.expect(m.acc == static_cast<double>(tp + tn) / total, at + " accuracy");
        c.expect(m.se.has_value() == (tp + fn > 0) && (!m.se || *m.se == static_cast<double>(tp) / (tp + fn)),
                 at + " sensitivity");
        c.expect(m.sp.has_value() == (tn + fp > 0) && (!m.sp || *m.sp == static_cast<double>(tn) / (tn + fp)),
                 at + " specificity");
        const auto tally = tally_difference_map(difference_map(pred, gt));
        c.expect(tally == ConfusionCounts{white, blue, black, yellow}, at + " difference map tally");
        if (!c.ok) break;
    }
    const Metrics table{0.9574, 0.8672, 0.9750};
    const std::string row = format_row(table, "/");
    c.expect(row == "95.74/86.72/97.50", "formatter gave " + row);
    return c.outcome("1000 mask pairs exact; row " + row);
}

// ---------------------------------------------------------------------------
// Shared training setup for 6 and 7. Scale: U-Net width 8, generator width
// 64, batch 8, float, single-threaded.

constexpr std::array<std::uint64_t, 3> kSeeds{1, 2, 3};

ExperimentConfig scaled_config(Ablation a, std::uint64_t seed, const fs::path& out, std::uint64_t iterations) {
    ExperimentConfig c;
    c.ablation = a;
    c.leak.enabled = uses_leak(a);
    c.seed = seed;
    c.data.layout = DatasetLayout::synthetic;
    c.data.synthetic_count = 8;
    c.data.n_labelled = 2;
    c.data.n_unlabelled = 6;
    c.model.disc_width = 8;
    c.model.gen_width = 64;
    c.optim.batch_labelled = c.optim.batch_unlabelled = c.optim.batch_fake = 8;
    c.optim.iterations = iterations;
    c.run.out_dir = out.string();
    c.run.evaluate = false;
    c.run.checkpoint_every = 0;
    return c;
}

struct Trained {
    std::unique_ptr<TrainerState<float>> state;
    TrainingData data;
};

Trained train_and_load(const ExperimentConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto run = train<float>(cfg);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "  trained " << cfg.run.out_dir << " (" << run.steps << " steps, " << fmt("%.0f", secs) << " s)\n";
    return {load_trainer<float>(run.checkpoints.back()), load_training_data(cfg)};
}

EvalOptions eval_options(const ExperimentConfig& cfg) {
    EvalOptions o;
    o.stride = cfg.run.eval_stride;
    o.threshold = cfg.run.threshold;
    o.fov = parse_fov_policy(cfg.run.fov);
    return o;
}

// ---------------------------------------------------------------------------
// 6. Overfit sanity

Outcome overfit_sanity(const fs::path& scratch) {
    constexpr std::uint64_t kIterations = 2000;
    constexpr double kMinTrainSeSp = 0.9;
    Checks c;
    int wins = 0;
    std::string summary;
    for (auto seed : kSeeds) {
        const auto tag = "seed" + std::to_string(seed);
        const auto full_cfg = scaled_config(Ablation::full, seed, scratch / ("overfit_full_" + tag), kIterations);
        const auto unet_cfg = scaled_config(Ablation::unet_only, seed, scratch / ("overfit_unet_" + tag), kIterations);
        const auto full = train_and_load(full_cfg);
        const auto unet = train_and_load(unet_cfg);

        ConfusionCounts train_counts;
        for (const auto& r : evaluate_images(full.state->student(), full.data.source, full.data.split.labelled,
                                             eval_options(full_cfg))) {
            train_counts += r.counts;
        }
        const auto tm = metrics(train_counts);
        const double se = tm.se.value_or(0), sp = tm.sp.value_or(0);
        c.expect(se > kMinTrainSeSp && sp > kMinTrainSeSp,
                 tag + " training-patch Se " + fmt("%.4f", se) + " Sp " + fmt("%.4f", sp));

        const double acc_full = evaluate_student(full.state->student(), full_cfg, full.data).pooled.acc;
        const double acc_unet = evaluate_student(unet.state->student(), unet_cfg, unet.data).pooled.acc;
        wins += acc_full >= acc_unet;
        summary += tag + ": Se " + fmt("%.3f", se) + " Sp " + fmt("%.3f", sp) + " held-out Acc full " +
                   fmt("%.4f", acc_full) + " unet " + fmt("%.4f", acc_unet) + "; ";
        std::cerr << "  " << summary.substr(summary.rfind(tag)) << '\n';
    }
    c.expect(wins >= 2, "full >= unet held-out Acc in " + std::to_string(wins) + " of 3 seeds");
    const auto o = c.outcome("");
    return {o.ok, summary + "full >= unet in " + std::to_string(wins) + "/3" + (o.ok ? "" : "; " + o.detail)};
}

// ---------------------------------------------------------------------------
// 7. Cross-domain smoke: source A, target B = A shifted by kShift grey levels.
// The shift is sized so the source-only model keeps some vessel
// sensitivity on B; past about +35 it predicts background everywhere and
// every comparison degenerates to a tie.

Outcome cross_domain(const fs::path& scratch) {
    constexpr std::uint64_t kIterations = 600;
    constexpr double kShift = 25.0;
    SynthParams a;
    SynthParams b = a;
    b.intensity_shift = kShift;
    const auto src = scratch / "domain_a", tgt = scratch / "domain_b", tgt_test = scratch / "domain_b_test";
    write_synthetic_corpus(src, a, 8, 701);
    write_synthetic_corpus(tgt, b, 6, 702);
    write_synthetic_corpus(tgt_test, b, 4, 703);

    int wins = 0;
    std::string summary;
    for (auto seed : kSeeds) {
        const auto tag = "seed" + std::to_string(seed);
        auto base = scaled_config(Ablation::full, seed, scratch / ("source_only_" + tag), kIterations);
        base.data.root = src.string();
        base.data.test_root = tgt_test.string();
        auto adapted = base;
        adapted.run.out_dir = (scratch / ("adapted_" + tag)).string();
        adapted.cross_domain.target_root = tgt.string();
        adapted.cross_domain.target_layout = DatasetLayout::synthetic;

        const auto b0 = train_and_load(base);
        const auto b1 = train_and_load(adapted);
        const auto r0 = evaluate_student(b0.state->student(), base, b0.data);
        const auto r1 = evaluate_student(b1.state->student(), adapted, b1.data);
        const auto correct = [](const MetricsReport& r) {
            return static_cast<long long>(r.pooled_counts.tp + r.pooled_counts.tn);
        };
        wins += r1.pooled.acc > r0.pooled.acc;
        summary += tag + ": target Acc/Se adapted " + fmt("%.5f", r1.pooled.acc) + "/" +
                   fmt("%.3f", r1.pooled.se.value_or(0)) + " source-only " + fmt("%.5f", r0.pooled.acc) + "/" +
                   fmt("%.3f", r0.pooled.se.value_or(0)) + " (" +
                   fmt("%+.0f", static_cast<double>(correct(r1) - correct(r0))) + " px); ";
        std::cerr << "  " << summary.substr(summary.rfind(tag)) << '\n';
    }
    return {wins >= 2, summary + "adapted > source-only in " + std::to_string(wins) + "/3"};
}

// ---------------------------------------------------------------------------
// 8. Leak probe at initialization

Outcome leak_probe(const fs::path& scratch) {
    constexpr double kMinGap = 1e-4;
    const auto cfg = scaled_config(Ablation::full, kSeeds[0], scratch / "probe", 0);
    const auto data = load_training_data(cfg);
    TrainerState<double> st(cfg, data.source.channels());
    const auto batch = sample_step_batch<double>(cfg, data, 0);
    const auto gp = st.generator().forward(sample_noise<double>(cfg.optim.batch_fake, 9), true, false);
    const auto ladder = leak_inputs(gp.acts);
    const auto on = probe_diagnostics(st.student(), batch.unlabelled, gp.acts.fake_image, &ladder, st.config().leak);
    const auto off = probe_diagnostics(st.student(), batch.unlabelled, gp.acts.fake_image,
                                       static_cast<const LeakInputs<double>*>(nullptr), LeakConfig{});
    const double gap = std::abs(on.p_fake_on_unlabelled - off.p_fake_on_unlabelled);
    return {gap > kMinGap, "mean p(fake|x_ul) leak on " + fmt("%.6f", on.p_fake_on_unlabelled) + " off " +
                               fmt("%.6f", off.p_fake_on_unlabelled) + " gap " + fmt("%.2e", gap)};
}

// ---------------------------------------------------------------------------
// 9. Determinism and resume, in double precision

Outcome determinism(const fs::path& scratch) {
    constexpr std::uint64_t kResumeAt = 4;
    auto cfg_at = [&](const std::string& name, std::uint64_t iterations) {
        auto c = scaled_config(Ablation::full, 9, scratch / name, iterations);
        c.data.synth.height = c.data.synth.width = 96;
        c.model.disc_width = 4;
        c.model.gen_width = 16;
        c.optim.batch_labelled = c.optim.batch_unlabelled = c.optim.batch_fake = 4;
        c.run.precision = Precision::double_;
        return c;
    };
    Checks c;
    const auto a = train<double>(cfg_at("det_a", kResumeAt + 1));
    const auto b = train<double>(cfg_at("det_b", kResumeAt + 1));
    const auto curves = slurp(a.curves);
    c.expect(std::count(curves.begin(), curves.end(), '\n') == kResumeAt + 2, "curves.csv row count");
    c.expect(curves == slurp(b.curves), "identical runs wrote different curves.csv");

    auto part_cfg = cfg_at("det_resume", kResumeAt);
    const auto part = train<double>(part_cfg);
    part_cfg.optim.iterations = kResumeAt + 1;
    const auto resumed = train<double>(part_cfg, part.checkpoints.back());
    c.expect(slurp(resumed.curves) == curves, "resumed curves.csv differs from the uninterrupted run");
    const auto whole = Checkpoint::load(a.checkpoints.back());
    const auto cont = Checkpoint::load(resumed.checkpoints.back());
    c.expect(whole.entries.size() == cont.entries.size(), "checkpoint entry count");
    for (const auto& [name, e] : whole.entries) {
        const auto it = cont.entries.find(name);
        c.expect(it != cont.entries.end() && it->second.values == e.values, "checkpoint array " + name);
    }
    return c.outcome("curves byte-identical; resume at " + std::to_string(kResumeAt) + " matches " +
                     std::to_string(whole.entries.size()) + " checkpoint arrays");
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all = {
        {1, "loss oracles", 10, loss_oracles},
        {2, "gradient finite differences", 60, gradients},
        {3, "leak-switch invariance", 30, leak_switch},
        {4, "EMA closed form", 10, ema_closed_form},
        {5, "metric oracle", 30, metric_oracle},
        {6, "overfit sanity", 3 * 3600, overfit_sanity},
        {7, "cross-domain smoke", 45 * 60, cross_domain},
        {8, "leak probe", 10, leak_probe},
        {9, "determinism and resume", 5 * 60, determinism},
    };

    CLI::App app{"Acceptance gate"};
    std::vector<int> selected;
    std::string scratch_arg;
    app.add_option("--criterion", selected, "criteria to run (default: all)")->check(CLI::Range(1, 9));
    app.add_option("--scratch", scratch_arg, "working directory for training runs (default: a fresh temp dir)");
    CLI11_PARSE(app, argc, argv);
    if (selected.empty()) {
        for (const auto& k : all) selected.push_back(k.id);
    }

    const fs::path scratch = scratch_arg.empty()
                                 ? fs::temp_directory_path() /
                                       ("leakgan_acceptance_" +
                                        std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()))
                                 : fs::path(scratch_arg);
    const bool own_scratch = scratch_arg.empty();

    bool all_ok = true;
    for (int id : selected) {
        const auto& k = all[static_cast<std::size_t>(id - 1)];
        const auto dir = scratch / ("criterion_" + std::to_string(id));
        fs::create_directories(dir);
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = k.run(dir);
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs < k.limit_seconds;
        const bool ok = o.ok && in_time;
        all_ok = all_ok && ok;
        std::cout << "criterion " << id << ' ' << (ok ? "PASS" : "FAIL") << ' ' << k.name << ": " << o.detail << " ["
                  << fmt("%.1f", secs) << " s, limit " << fmt("%.0f", k.limit_seconds) << " s"
                  << (in_time ? "" : ", over limit") << "]" << std::endl;
    }
    if (own_scratch) {
        std::error_code ec;
        fs::remove_all(scratch, ec);
    }
    return all_ok ? 0 : 1;
}

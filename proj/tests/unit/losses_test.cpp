#include <gtest/gtest.h>

#include <cmath>

#include "grad_check.hpp"
#include "leakgan/generator.hpp"
#include "leakgan/losses.hpp"

namespace {

using leakgan::LabelMaskBatch;
using leakgan::LossWeights;
using leakgan::SegLogits;
using leakgan::Tensor;
using leakgan::testing::fill_normal;
using leakgan::testing::numeric_gradient;
using leakgan::testing::relative_error;
using Td = Tensor<double>;

/// K logits on a 1x1xN strip of pixels.
SegLogits<double> strip(std::size_t k, std::size_t n, std::uint64_t seed, double scale = 1.5) {
    SegLogits<double> s{Td(1, k, 1, n)};
    fill_normal(s.logits, seed, scale);
    return s;
}

LabelMaskBatch strip_labels(std::vector<std::uint8_t> y, std::size_t k = 2) {
    return LabelMaskBatch{1, 1, y.size(), k, std::move(y)};
}

/// Per-pixel posterior vectors p over C channels on a 1xN strip.
Td posteriors(std::size_t c, std::size_t n, std::uint64_t seed) {
    Td p(1, c, 1, n);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    for (std::size_t px = 0; px < n; ++px) {
        double s = 0;
        for (std::size_t k = 0; k < c; ++k) s += (p[k * n + px] = u(rng));
        for (std::size_t k = 0; k < c; ++k) p[k * n + px] /= s;
    }
    return p;
}

// -- supervised ------------------------------------------------------------

TEST(SupervisedLoss, PerfectLogitsGiveZero) {
    SegLogits<double> s{Td(1, 2, 1, 3)};
    s.logits.values() = {-50, 50, -50, 50, -50, 50};  // classes 1, 0, 1
    const auto y = strip_labels({1, 0, 1});
    EXPECT_NEAR(leakgan::supervised_loss(s, y, LossWeights{}, false), 0.0, 1e-20);
    EXPECT_NEAR(leakgan::supervised_loss(s, y, LossWeights{}, true), 0.0, 1e-20);
}

TEST(SupervisedLoss, FocalWithZeroRhoIsScaledCrossEntropy) {
    const auto s = strip(2, 7, 1);
    const auto y = strip_labels({0, 1, 1, 0, 1, 0, 0});
    LossWeights w;
    w.focal_rho = 0;
    w.focal_alpha_t = 2.0;
    const double ce = leakgan::supervised_loss(s, y, w, false);
    EXPECT_DOUBLE_EQ(leakgan::supervised_loss(s, y, w, true), 2.0 * ce);
    w.focal_alpha_t = 1.0;
    EXPECT_NEAR(leakgan::supervised_loss(s, y, w, true), ce, 1e-7);
}

TEST(SupervisedLoss, FocalHalfProbabilityPixel) {
    // p_t = 0.5: 2 * 0.5^0.25 * ln 2
    SegLogits<double> s{Td(1, 2, 1, 1)};
    const auto y = strip_labels({1});
    const double expected = 2.0 * std::pow(0.5, 0.25) * std::log(2.0);
    EXPECT_NEAR(expected, 1.1657, 5e-5);
    EXPECT_NEAR(leakgan::supervised_loss(s, y, LossWeights{}, true), expected, 1e-12);
}

TEST(SupervisedLoss, MatchesHandWrittenCrossEntropy) {
    const auto s = strip(3, 5, 2);
    const auto y = strip_labels({0, 2, 1, 1, 0}, 3);
    double ref = 0;
    for (std::size_t px = 0; px < 5; ++px) {
        double z = 0;
        for (std::size_t c = 0; c < 3; ++c) z += std::exp(s.logits[c * 5 + px]);
        ref += -std::log(std::exp(s.logits[y.classes[px] * 5 + px]) / z);
    }
    EXPECT_NEAR(leakgan::supervised_loss(s, y, LossWeights{}, false), ref / 5, 1e-12);
}

TEST(SupervisedLoss, RejectsLabelsOutOfRange) {
    const auto s = strip(2, 3, 1);
    EXPECT_THROW(leakgan::supervised_loss(s, strip_labels({0, 2, 1}), LossWeights{}, false), leakgan::DataError);
    EXPECT_THROW(leakgan::supervised_loss(s, strip_labels({0, 1}), LossWeights{}, false), leakgan::DataError);
}

TEST(SupervisedLoss, GradientsMatchFiniteDifferences) {
    for (bool focal : {false, true}) {
        auto s = strip(2, 5, 3);
        const auto y = strip_labels({1, 0, 0, 1, 1});
        Td g;
        leakgan::supervised_loss(s, y, LossWeights{}, focal, &g);
        const auto num = numeric_gradient(s.logits, [&] { return leakgan::supervised_loss(s, y, LossWeights{}, focal); }, 1e-4);
        EXPECT_LT(relative_error(g, num), 1e-4) << "focal=" << focal;
    }
}

// -- unsupervised ----------------------------------------------------------

TEST(UnsupervisedLoss, PerfectDiscriminationGivesZero) {
    SegLogits<double> real{Td(1, 2, 1, 2, 60.0)}, fake{Td(1, 2, 1, 2, -60.0)};
    EXPECT_NEAR(leakgan::unsupervised_loss(real, fake), 0.0, 1e-20);
}

TEST(UnsupervisedLoss, HalfRealnessGivesTwoLogTwo) {
    // D = 1/2 when sum exp(l_i) = 1: l = (-ln 2, -ln 2)
    SegLogits<double> s{Td(2, 2, 1, 3, -std::log(2.0))};
    EXPECT_NEAR(leakgan::unsupervised_loss(s, s), 2.0 * std::log(2.0), 1e-12);
}

TEST(UnsupervisedLoss, AgreesWithDirectRealnessForm) {
    const auto real = strip(2, 9, 4, 3.0), fake = strip(2, 9, 5, 3.0);
    double direct = 0;
    for (std::size_t px = 0; px < 9; ++px) {
        const double zr = std::exp(real.logits[px]) + std::exp(real.logits[9 + px]);
        const double zf = std::exp(fake.logits[px]) + std::exp(fake.logits[9 + px]);
        direct += -std::log(zr / (zr + 1)) / 9 - std::log(1 - zf / (zf + 1)) / 9;
    }
    EXPECT_NEAR(leakgan::unsupervised_loss(real, fake), direct, 1e-5);
}

TEST(UnsupervisedLoss, GradientsMatchFiniteDifferences) {
    auto real = strip(2, 5, 6), fake = strip(2, 5, 7);
    Td gr, gf;
    leakgan::unsupervised_loss(real, fake, &gr, &gf);
    auto f = [&] { return leakgan::unsupervised_loss(real, fake); };
    EXPECT_LT(relative_error(gr, numeric_gradient(real.logits, f, 1e-4)), 1e-4);
    EXPECT_LT(relative_error(gf, numeric_gradient(fake.logits, f, 1e-4)), 1e-4);
}

TEST(UnsupervisedLoss, SaturatedLogitsStayFinite) {
    SegLogits<double> real{Td(1, 2, 1, 1, -1e5)}, fake{Td(1, 2, 1, 1, 1e5)};
    const double v = leakgan::unsupervised_loss(real, fake);
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, -2 * std::log(leakgan::kProbEpsilon), 1e-9);
}

// -- generator adversarial ---------------------------------------------------

TEST(GeneratorAdversarialLoss, Endpoints) {
    EXPECT_NEAR(leakgan::generator_adversarial_loss(SegLogits<double>{Td(1, 2, 1, 4, -60.0)}), 0.0, 1e-20);
    EXPECT_NEAR(leakgan::generator_adversarial_loss(SegLogits<double>{Td(1, 2, 1, 4, -std::log(2.0))}),
                std::log(0.5), 1e-12);
}

TEST(GeneratorAdversarialLoss, GradientMatchesFiniteDifferences) {
    auto s = strip(2, 5, 8);
    Td g;
    leakgan::generator_adversarial_loss(s, &g);
    EXPECT_LT(relative_error(g, numeric_gradient(s.logits, [&] { return leakgan::generator_adversarial_loss(s); }, 1e-4)),
              1e-4);
}

TEST(GeneratorAdversarialLoss, OneGeneratorStepRaisesRealnessOfFakes) {
    leakgan::Generator<double> gen(8, 1);
    gen.init(1);
    leakgan::UNet<double> disc(1, 1, 2);
    disc.init(2, 3);
    const auto z = leakgan::sample_noise<double>(2, 4);
    const leakgan::LeakConfig off{};
    auto mean_realness = [&] {
        const auto p = gen.forward(z, true, false);
        return leakgan::sum(leakgan::realness_score(disc.forward(p.acts.fake_image.pixels, nullptr, off).out)) /
               static_cast<double>(2 * 64 * 64);
    };
    const double before = mean_realness();
    const auto gp = gen.forward(z, true, false);
    auto dp = disc.forward(gp.acts.fake_image.pixels, nullptr, off);
    Td d_logits;
    leakgan::generator_adversarial_loss(dp.out, &d_logits);
    const auto grads = disc.backward(dp, d_logits, nullptr, true);
    gen.zero_grad();
    gen.backward(gp, grads.d_input);
    for (auto* p : gen.parameters()) {
        for (std::size_t k = 0; k < p->value.size(); ++k) p->value[k] -= 0.05 * p->grad[k];
    }
    EXPECT_GT(mean_realness(), before);
}

// -- consistency -----------------------------------------------------------

TEST(MseConsistency, Examples) {
    const auto a = posteriors(3, 6, 1), b = posteriors(3, 6, 2);
    EXPECT_EQ(leakgan::mse_consistency(a, a), 0.0);
    EXPECT_DOUBLE_EQ(leakgan::mse_consistency(a, b), leakgan::mse_consistency(b, a));
    Td p(1, 3, 1, 1), q(1, 3, 1, 1);
    p.values() = {1, 0, 0};
    q.values() = {0, 1, 0};
    EXPECT_NEAR(leakgan::mse_consistency(p, q), 2.0 / 3.0, 1e-15);
    EXPECT_THROW(leakgan::mse_consistency(p, Td(1, 2, 1, 1)), leakgan::NumericError);
}

TEST(MseConsistency, GradientMatchesFiniteDifferences) {
    auto a = posteriors(3, 5, 3);
    const auto b = posteriors(3, 5, 4);
    Td g;
    leakgan::mse_consistency(a, b, &g);
    EXPECT_LT(relative_error(g, numeric_gradient(a, [&] { return leakgan::mse_consistency(a, b); }, 1e-4)), 1e-4);
}

TEST(FocalConsistency, IdenticalPosteriorsGiveZero) {
    const auto a = posteriors(3, 8, 5);
    EXPECT_EQ(leakgan::focal_consistency(a, a, LossWeights{}), 0.0);
}

TEST(FocalConsistency, SingleChannelExample) {
    Td p(1, 1, 1, 1, 0.9), q(1, 1, 1, 1, 0.5);
    const double expected = 2.0 * std::pow(0.4, 0.25) * std::abs(std::log(0.9) - std::log(0.5));
    EXPECT_NEAR(expected, 0.9350, 5e-4);
    EXPECT_NEAR(leakgan::focal_consistency(p, q, LossWeights{}), expected, 1e-12);
}

TEST(FocalConsistency, SymmetricAndNonNegative) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto a = posteriors(3, 16, s), b = posteriors(3, 16, s + 100);
        const double ab = leakgan::focal_consistency(a, b, LossWeights{});
        EXPECT_GT(ab, 0.0);
        EXPECT_NEAR(ab, leakgan::focal_consistency(b, a, LossWeights{}), 1e-12);
    }
}

TEST(FocalConsistency, NondecreasingInGap) {
    const double q = 0.5;
    double prev = -1;
    for (double p = 0.5; p <= 0.99 + 1e-12; p += 0.01) {
        Td a(1, 1, 1, 1, p), b(1, 1, 1, 1, q);
        const double v = leakgan::focal_consistency(a, b, LossWeights{});
        EXPECT_GE(v, prev) << "p=" << p;
        prev = v;
    }
}

TEST(FocalConsistency, GradientMatchesFiniteDifferences) {
    auto a = posteriors(3, 5, 6);
    const auto b = posteriors(3, 5, 7);
    Td g;
    leakgan::focal_consistency(a, b, LossWeights{}, &g);
    const auto num = numeric_gradient(a, [&] { return leakgan::focal_consistency(a, b, LossWeights{}); }, 1e-6);
    EXPECT_LT(relative_error(g, num), 1e-4);
}

TEST(PosteriorBackward, ChainsThroughSoftmaxWithClampedFakeLogit) {
    auto s = strip(2, 5, 9);
    const auto q = posteriors(3, 5, 10);
    const auto probs = leakgan::class_probabilities(s);
    Td dp, dl;
    leakgan::focal_consistency(probs, q, LossWeights{}, &dp);
    leakgan::posterior_backward(probs, dp, dl);
    const auto num = numeric_gradient(
        s.logits, [&] { return leakgan::focal_consistency(leakgan::class_probabilities(s), q, LossWeights{}); }, 1e-6);
    EXPECT_LT(relative_error(dl, num), 1e-4);
}

// -- feature matching --------------------------------------------------------

leakgan::EncoderFeatures<double> features(std::size_t b, std::uint64_t seed) {
    leakgan::EncoderFeatures<double> f;
    f.bottleneck = Td(b, 4, 2, 2);
    fill_normal(f.bottleneck, seed);
    return f;
}

TEST(FeatureMatching, Examples) {
    const auto a = features(3, 1), b = features(2, 2);
    EXPECT_EQ(leakgan::feature_matching_loss(a, a), 0.0);
    EXPECT_NEAR(leakgan::feature_matching_loss(a, b), leakgan::feature_matching_loss(b, a), 1e-12);
    auto shifted = a;
    for (auto& v : shifted.bottleneck.values()) v += 1.0;
    EXPECT_NEAR(leakgan::feature_matching_loss(a, shifted), 16.0, 1e-12);  // dimensionality 4*2*2
    auto bad = features(2, 3);
    bad.bottleneck = Td(2, 3, 2, 2);
    EXPECT_THROW(leakgan::feature_matching_loss(a, bad), leakgan::NumericError);
}

TEST(FeatureMatching, GradientMatchesFiniteDifferences) {
    const auto a = features(3, 4);
    auto b = features(2, 5);
    Td g;
    leakgan::feature_matching_loss(a, b, &g);
    EXPECT_LT(relative_error(g, numeric_gradient(b.bottleneck, [&] { return leakgan::feature_matching_loss(a, b); }, 1e-4)),
              1e-4);
}

// -- totals ----------------------------------------------------------------

TEST(TotalLoss, WeightedSum) {
    LossWeights w;
    w.lambda1 = 1;
    w.lambda2 = 0;
    w.lambda3 = 0;
    EXPECT_DOUBLE_EQ(leakgan::total_discriminator_loss(0.5, 1.0, 0.25, w).total, 0.5);
    w.lambda2 = w.lambda3 = 1;
    EXPECT_DOUBLE_EQ(leakgan::total_discriminator_loss(0.5, 1.0, 0.25, w).total, 1.75);
    w.lambda1 = w.lambda2 = w.lambda3 = 0;
    EXPECT_DOUBLE_EQ(leakgan::total_discriminator_loss(0.5, 1.0, 0.25, w).total, 0.0);
    const auto b = leakgan::total_discriminator_loss(0.3, 0.7, 0.2, LossWeights{});
    EXPECT_NEAR(b.total, 0.3 + 0.7 + 0.1 * 0.2, 1e-12);
}

TEST(TotalLoss, NonFiniteTermIsNamed) {
    try {
        leakgan::total_discriminator_loss(0.5, std::nan(""), 0.1, LossWeights{});
        FAIL();
    } catch (const leakgan::NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("unsup"), std::string::npos);
        EXPECT_EQ(e.exit_code(), 4);
    }
    EXPECT_THROW(leakgan::total_discriminator_loss(0.5, 0.1, INFINITY, LossWeights{}), leakgan::NumericError);
}

TEST(LossWeights, Validation) {
    LossWeights w;
    EXPECT_NO_THROW(w.validate());
    w.lambda2 = -1;
    EXPECT_THROW(w.validate(), leakgan::ConfigError);
    w = LossWeights{};
    w.focal_rho = -0.1;
    EXPECT_THROW(w.validate(), leakgan::ConfigError);
}

TEST(Losses, NonNegativeOnRandomInputs) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto a = strip(2, 6, s, 5.0), b = strip(2, 6, s + 50, 5.0);
        const auto y = strip_labels({0, 1, 1, 0, 0, 1});
        EXPECT_GE(leakgan::supervised_loss(a, y, LossWeights{}, true), 0.0);
        EXPECT_GE(leakgan::supervised_loss(a, y, LossWeights{}, false), 0.0);
        EXPECT_GE(leakgan::unsupervised_loss(a, b), 0.0);
        const auto pa = leakgan::class_probabilities(a), pb = leakgan::class_probabilities(b);
        EXPECT_GE(leakgan::mse_consistency(pa, pb), 0.0);
        EXPECT_GE(leakgan::focal_consistency(pa, pb, LossWeights{}), 0.0);
    }
}

}  // namespace

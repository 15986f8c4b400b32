#include <gtest/gtest.h>

#include "grad_check.hpp"
#include "leakgan/layers.hpp"

namespace {

using leakgan::Tensor;
using leakgan::testing::fill_normal;
using leakgan::testing::numeric_gradient;
using leakgan::testing::project;
using leakgan::testing::relative_error;
using Td = Tensor<double>;

constexpr double kGradTol = 1e-6;

/// Direct-loop "same" convolution, stride 1.
Td naive_conv(const Td& x, const Td& w, const Td& b) {
    const std::size_t out = w.n(), k = w.h(), pad = k / 2;
    Td y(x.n(), out, x.h(), x.w());
    for (std::size_t i = 0; i < x.n(); ++i)
        for (std::size_t o = 0; o < out; ++o)
            for (std::size_t py = 0; py < x.h(); ++py)
                for (std::size_t px = 0; px < x.w(); ++px) {
                    double s = b.empty() ? 0.0 : b[o];
                    for (std::size_t c = 0; c < x.c(); ++c)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long sy = long(py + ky) - long(pad), sx = long(px + kx) - long(pad);
                                if (sy < 0 || sx < 0 || sy >= long(x.h()) || sx >= long(x.w())) continue;
                                s += w(o, c, ky, kx) * x(i, c, std::size_t(sy), std::size_t(sx));
                            }
                    y(i, o, py, px) = s;
                }
    return y;
}

/// Direct scatter form of a transposed convolution.
Td naive_tconv(const Td& x, const Td& w, const Td& b, std::size_t stride, std::size_t pad) {
    const std::size_t out = w.c(), k = w.h();
    const std::size_t oh = (x.h() - 1) * stride + k - 2 * pad, ow = (x.w() - 1) * stride + k - 2 * pad;
    Td y(x.n(), out, oh, ow);
    for (std::size_t i = 0; i < x.n(); ++i) {
        for (std::size_t o = 0; o < out; ++o)
            for (std::size_t k2 = 0; k2 < oh * ow; ++k2) y.sample(i).data()[o * oh * ow + k2] = b.empty() ? 0.0 : b[o];
        for (std::size_t c = 0; c < x.c(); ++c)
            for (std::size_t iy = 0; iy < x.h(); ++iy)
                for (std::size_t ix = 0; ix < x.w(); ++ix)
                    for (std::size_t o = 0; o < out; ++o)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long ty = long(iy * stride + ky) - long(pad), tx = long(ix * stride + kx) - long(pad);
                                if (ty < 0 || tx < 0 || ty >= long(oh) || tx >= long(ow)) continue;
                                y(i, o, std::size_t(ty), std::size_t(tx)) += x(i, c, iy, ix) * w(c, o, ky, kx);
                            }
    }
    return y;
}


TEST(Conv2d, MatchesDirectLoops) {
    for (std::size_t k : {1u, 3u}) {
        leakgan::Conv2d<double> conv("c", 3, 4, k);
        auto rng = leakgan::make_engine(1);
        conv.init(0.5, rng);
        std::vector<leakgan::Param<double>*> ps;
        conv.collect(ps);
        fill_normal(ps[1]->value, 9);
        Td x(2, 3, 7, 6);
        fill_normal(x, 2);
        EXPECT_LT(leakgan::max_abs_diff(conv.forward(x), naive_conv(x, ps[0]->value, ps[1]->value)), 1e-12);
    }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
    leakgan::Conv2d<double> conv("c", 2, 3, 3);
    auto rng = leakgan::make_engine(3);
    conv.init(0.4, rng);
    Td x(2, 2, 5, 4), r(2, 3, 5, 4);
    fill_normal(x, 4);
    fill_normal(r, 5);
    std::vector<leakgan::Param<double>*> ps;
    conv.collect(ps);
    fill_normal(ps[1]->value, 6);
    for (auto* p : ps) p->zero_grad();
    const Td dx = conv.backward(x, r);
    auto f = [&] { return project(conv.forward(x), r); };
    EXPECT_LT(relative_error(dx, numeric_gradient(x, f)), kGradTol);
    for (auto* p : ps) EXPECT_LT(relative_error(p->grad, numeric_gradient(p->value, f)), kGradTol) << p->name;
}

TEST(ConvTranspose2d, MatchesScatterOracle) {
    struct Case {
        std::size_t k, s, p;
    };
    for (auto c : {Case{4, 2, 1}, Case{2, 2, 0}, Case{3, 1, 1}}) {
        leakgan::ConvTranspose2d<double> up("u", 3, 2, c.k, c.s, c.p);
        auto rng = leakgan::make_engine(7);
        up.init(0.5, rng);
        std::vector<leakgan::Param<double>*> ps;
        up.collect(ps);
        fill_normal(ps[1]->value, 8);
        Td x(2, 3, 4, 5);
        fill_normal(x, 9);
        const Td y = up.forward(x);
        const Td ref = naive_tconv(x, ps[0]->value, ps[1]->value, c.s, c.p);
        ASSERT_EQ(y.shape(), ref.shape());
        EXPECT_LT(leakgan::max_abs_diff(y, ref), 1e-12);
    }
}

TEST(ConvTranspose2d, DoublesSpatialSize) {
    leakgan::ConvTranspose2d<float> up("u", 4, 2, 4, 2, 1);
    auto rng = leakgan::make_engine(1);
    up.init(0.02, rng);
    EXPECT_EQ(up.forward(Tensor<float>(1, 4, 8, 8)).shape(), (Tensor<float>::Shape{1, 2, 16, 16}));
}

TEST(ConvTranspose2d, GradientsMatchFiniteDifferences) {
    leakgan::ConvTranspose2d<double> up("u", 2, 3, 4, 2, 1);
    auto rng = leakgan::make_engine(3);
    up.init(0.4, rng);
    Td x(2, 2, 3, 3), r(2, 3, 6, 6);
    fill_normal(x, 4);
    fill_normal(r, 5);
    std::vector<leakgan::Param<double>*> ps;
    up.collect(ps);
    for (auto* p : ps) p->zero_grad();
    const Td dx = up.backward(x, r);
    auto f = [&] { return project(up.forward(x), r); };
    EXPECT_LT(relative_error(dx, numeric_gradient(x, f)), kGradTol);
    for (auto* p : ps) EXPECT_LT(relative_error(p->grad, numeric_gradient(p->value, f)), kGradTol) << p->name;
}

TEST(Linear, GradientsMatchFiniteDifferences) {
    leakgan::Linear<double> fc("fc", 5, 4);
    auto rng = leakgan::make_engine(2);
    fc.init(0.5, rng);
    Td x(3, 5, 1, 1), r(3, 4, 1, 1);
    fill_normal(x, 1);
    fill_normal(r, 2);
    std::vector<leakgan::Param<double>*> ps;
    fc.collect(ps);
    fill_normal(ps[1]->value, 3);
    for (auto* p : ps) p->zero_grad();
    const Td dx = fc.backward(x, r);
    auto f = [&] { return project(fc.forward(x), r); };
    EXPECT_LT(relative_error(dx, numeric_gradient(x, f)), kGradTol);
    for (auto* p : ps) EXPECT_LT(relative_error(p->grad, numeric_gradient(p->value, f)), kGradTol) << p->name;
}

TEST(BatchNorm2d, TrainingModeNormalizesPerChannel) {
    leakgan::BatchNorm2d<double> bn("bn", 3);
    Td x(4, 3, 5, 5);
    fill_normal(x, 1, 3.0);
    for (auto& v : x.values()) v += 2.0;
    leakgan::BatchNorm2d<double>::Cache cache;
    const Td y = bn.forward(x, true, cache);
    for (std::size_t c = 0; c < 3; ++c) {
        double s = 0, ss = 0;
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t k = 0; k < 25; ++k) s += y.sample(i).data()[c * 25 + k];
        const double mean = s / 100;
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t k = 0; k < 25; ++k) ss += std::pow(y.sample(i).data()[c * 25 + k] - mean, 2);
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(ss / 100, 1.0, 1e-4);  // eps = 1e-5 shrinks it slightly
    }
}

TEST(BatchNorm2d, GradientsMatchFiniteDifferencesInBothModes) {
    for (bool training : {true, false}) {
        leakgan::BatchNorm2d<double> bn("bn", 2);
        std::vector<leakgan::Param<double>*> ps;
        bn.collect(ps);
        fill_normal(ps[0]->value, 1);
        fill_normal(ps[1]->value, 2);
        std::vector<leakgan::Buffer<double>> bufs;
        bn.collect_buffers(bufs);
        fill_normal(*bufs[0].tensor, 3);
        for (auto& v : bufs[1].tensor->values()) v = 0.5;
        Td x(3, 2, 3, 2), r(3, 2, 3, 2);
        fill_normal(x, 4, 2.0);
        fill_normal(r, 5);
        leakgan::BatchNorm2d<double>::Cache cache;
        bn.forward(x, training, cache, false);
        for (auto* p : ps) p->zero_grad();
        const Td dx = bn.backward(cache, r);
        auto f = [&] {
            leakgan::BatchNorm2d<double>::Cache c;
            return project(bn.forward(x, training, c, false), r);
        };
        EXPECT_LT(relative_error(dx, numeric_gradient(x, f)), kGradTol) << "training=" << training;
        for (auto* p : ps) EXPECT_LT(relative_error(p->grad, numeric_gradient(p->value, f)), kGradTol) << p->name;
    }
}

TEST(BatchNorm2d, RunningStatsFollowMomentum) {
    leakgan::BatchNorm2d<double> bn("bn", 1, 0.1);
    Td x(1, 1, 1, 4);
    x.values() = {1, 2, 3, 4};
    leakgan::BatchNorm2d<double>::Cache cache;
    bn.forward(x, true, cache);
    std::vector<leakgan::Buffer<double>> bufs;
    bn.collect_buffers(bufs);
    EXPECT_NEAR((*bufs[0].tensor)[0], 0.1 * 2.5, 1e-12);
    EXPECT_NEAR((*bufs[1].tensor)[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);  // unbiased variance
    bn.forward(x, true, cache, false);
    EXPECT_NEAR((*bufs[0].tensor)[0], 0.25, 1e-12);
}

TEST(Activations, LeakyReluAndTanhGradients) {
    Td x(2, 3, 4, 4), r(2, 3, 4, 4);
    fill_normal(x, 1);
    fill_normal(r, 2);
    const Td dl = leakgan::leaky_relu_backward(x, r, 0.2);
    EXPECT_LT(relative_error(dl, numeric_gradient(x, [&] { return project(leakgan::leaky_relu(x, 0.2), r); })), kGradTol);
    const Td y = leakgan::tanh_forward(x);
    const Td dt = leakgan::tanh_backward(y, r);
    EXPECT_LT(relative_error(dt, numeric_gradient(x, [&] { return project(leakgan::tanh_forward(x), r); })), kGradTol);
    for (double v : y.values()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(MaxPool, ForwardPicksMaximaAndRoutesGradient) {
    Td x(1, 1, 2, 4);
    x.values() = {1, 5, 2, 0, 3, 4, 7, 6};
    std::vector<std::uint32_t> idx;
    const Td y = leakgan::max_pool2(x, idx);
    ASSERT_EQ(y.shape(), (Td::Shape{1, 1, 1, 2}));
    EXPECT_EQ(y[0], 5);
    EXPECT_EQ(y[1], 7);
    Td dy(1, 1, 1, 2);
    dy.values() = {10, 20};
    const Td dx = leakgan::max_pool2_backward<double>(x.shape(), idx, dy);
    EXPECT_EQ(std::vector<double>(dx.values().begin(), dx.values().end()),
              (std::vector<double>{0, 10, 0, 0, 0, 0, 20, 0}));
}

TEST(MaxPool, GradientMatchesFiniteDifferences) {
    Td x(2, 2, 4, 6), r(2, 2, 2, 3);
    fill_normal(x, 11);
    fill_normal(r, 12);
    std::vector<std::uint32_t> idx;
    leakgan::max_pool2(x, idx);
    const Td dx = leakgan::max_pool2_backward<double>(x.shape(), idx, r);
    auto f = [&] {
        std::vector<std::uint32_t> i2;
        return project(leakgan::max_pool2(x, i2), r);
    };
    EXPECT_LT(relative_error(dx, numeric_gradient(x, f)), kGradTol);
}

}  // namespace

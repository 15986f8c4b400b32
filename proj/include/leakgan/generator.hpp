#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "leakgan/layers.hpp"
#include "leakgan/types.hpp"

namespace leakgan {

/// Noise input z, shaped (batch, 100, 1, 1).
template <typename T>
struct NoiseBatch {
    Tensor<T> z;
    std::size_t size() const noexcept { return z.n(); }
};

template <typename T>
NoiseBatch<T> sample_noise(std::size_t batch, std::uint64_t seed) {
    if (batch < 1) throw ConfigError("sample_noise: batch must be >= 1");
    Engine rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    NoiseBatch<T> out{Tensor<T>(batch, kNoiseLength, 1, 1)};
    for (auto& v : out.z.values()) v = static_cast<T>(dist(rng));
    return out;
}

/// The fake image and the ladder of activations exposed to the leaking module.
template <typename T>
struct GeneratorActivations {
    std::array<Tensor<T>, kLadderLevels> intermediates;
    PatchBatch<T> fake_image;
};

/// DCGAN-style generator: FC to an 8x8 grid, then six convolutions
/// (3x3 conv, up, 3x3 conv, up, up, 3x3 conv to image channels).
///
/// Ladder: level 0 is the first conv (8x8, W channels), level 1 the 16x16
/// conv (W/2), level 2 and 3 the 32x32 and 64x64 upsampling outputs (W/4,
/// W/8). Every ladder map is taken after batch norm and LeakyReLU.
template <typename T>
class Generator {
public:
    static constexpr T kSlope = T(0.2);

    struct Pass {
        GeneratorActivations<T> acts;
        NoiseBatch<T> z;
        // Per hidden stage: BN input, post-BN value, BN cache.
        std::array<Tensor<T>, 6> pre;
        std::array<Tensor<T>, 6> bn_in;
        std::array<typename BatchNorm2d<T>::Cache, 6> bn;
        Tensor<T> h0;  // reshaped FC output activation (input of conv1)
        Tensor<T> up2_act;  // 16x16 upsampling output (input of conv3)
    };

    Generator() = default;

    /// `width` is the 8x8 channel count (512 for the reference model).
    Generator(std::size_t width, std::size_t image_channels)
        : width_(width), channels_(image_channels) {
        if (width < 8 || width % 8 != 0) throw ConfigError("generator width must be a positive multiple of 8");
        const std::size_t w1 = width, w2 = width / 2, w3 = width / 4, w4 = width / 8;
        fc_ = Linear<T>("gen.fc", kNoiseLength, w1 * 64);
        bn_[0] = BatchNorm2d<T>("gen.bn0", w1);
        conv1_ = Conv2d<T>("gen.conv1", w1, w1, 3);
        bn_[1] = BatchNorm2d<T>("gen.bn1", w1);
        up2_ = ConvTranspose2d<T>("gen.up2", w1, w2, 4, 2, 1);
        bn_[2] = BatchNorm2d<T>("gen.bn2", w2);
        conv3_ = Conv2d<T>("gen.conv3", w2, w2, 3);
        bn_[3] = BatchNorm2d<T>("gen.bn3", w2);
        up4_ = ConvTranspose2d<T>("gen.up4", w2, w3, 4, 2, 1);
        bn_[4] = BatchNorm2d<T>("gen.bn4", w3);
        up5_ = ConvTranspose2d<T>("gen.up5", w3, w4, 4, 2, 1);
        bn_[5] = BatchNorm2d<T>("gen.bn5", w4);
        out_ = Conv2d<T>("gen.out", w4, image_channels, 3);
    }

    std::size_t width() const noexcept { return width_; }
    std::size_t image_channels() const noexcept { return channels_; }
    bool initialized() const noexcept { return initialized_; }
    void mark_initialized() noexcept { initialized_ = true; }

    /// Ladder channel counts, level 0..3.
    std::array<std::size_t, kLadderLevels> ladder_channels() const {
        return {width_, width_ / 2, width_ / 4, width_ / 8};
    }

    /// Normal(0, 0.02) weights, unit BN scale.
    void init(std::uint64_t seed) {
        Engine rng(seed);
        fc_.init(0.02, rng);
        conv1_.init(0.02, rng);
        up2_.init(0.02, rng);
        conv3_.init(0.02, rng);
        up4_.init(0.02, rng);
        up5_.init(0.02, rng);
        out_.init(0.02, rng);
        initialized_ = true;
    }

    std::vector<Param<T>*> parameters() {
        std::vector<Param<T>*> p;
        fc_.collect(p);
        bn_[0].collect(p);
        conv1_.collect(p);
        bn_[1].collect(p);
        up2_.collect(p);
        bn_[2].collect(p);
        conv3_.collect(p);
        bn_[3].collect(p);
        up4_.collect(p);
        bn_[4].collect(p);
        up5_.collect(p);
        bn_[5].collect(p);
        out_.collect(p);
        return p;
    }

    std::vector<Buffer<T>> buffers() {
        std::vector<Buffer<T>> b;
        for (auto& bn : bn_) bn.collect_buffers(b);
        return b;
    }

    void zero_grad() {
        for (auto* p : parameters()) p->zero_grad();
    }

    /// `training` selects batch statistics; `update_running` controls whether
    /// those statistics feed the running averages.
    Pass forward(const NoiseBatch<T>& z, bool training, bool update_running = true) {
        if (!initialized_) throw NumericError("generator: weights are not initialized");
        if (z.z.sample_size() != kNoiseLength) {
            throw ConfigError("generator: noise length must be " + std::to_string(kNoiseLength));
        }
        Pass p;
        p.z = z;
        const std::size_t n = z.size();
        // FC -> (N, W, 8, 8)
        Tensor<T> fc = fc_.forward(z.z);
        Tensor<T> grid(n, width_, 8, 8);
        grid.values() = std::move(fc.values());
        p.bn_in[0] = std::move(grid);
        p.h0 = stage(0, p.bn_in[0], training, update_running, p);

        p.bn_in[1] = conv1_.forward(p.h0);
        auto g1 = stage(1, p.bn_in[1], training, update_running, p);
        p.bn_in[2] = up2_.forward(g1);
        p.acts.intermediates[0] = std::move(g1);

        auto u2 = stage(2, p.bn_in[2], training, update_running, p);
        p.bn_in[3] = conv3_.forward(u2);
        p.up2_act = std::move(u2);
        auto g2 = stage(3, p.bn_in[3], training, update_running, p);
        p.bn_in[4] = up4_.forward(g2);
        p.acts.intermediates[1] = std::move(g2);

        auto g3 = stage(4, p.bn_in[4], training, update_running, p);
        p.bn_in[5] = up5_.forward(g3);
        p.acts.intermediates[2] = std::move(g3);

        auto g4 = stage(5, p.bn_in[5], training, update_running, p);
        Tensor<T> logits = out_.forward(g4);
        p.acts.intermediates[3] = std::move(g4);
        p.acts.fake_image.pixels = tanh_forward(logits);
        return p;
    }

    /// Backpropagate gradients arriving at the fake image and (optionally)
    /// at ladder maps. Accumulates parameter gradients; returns dL/dz.
    Tensor<T> backward(const Pass& p, const Tensor<T>& d_fake,
                       std::span<const Tensor<T>> d_ladder = {}) {
        auto ladder_grad = [&](std::size_t level, Tensor<T>& g) {
            if (level < d_ladder.size() && !d_ladder[level].empty()) g += d_ladder[level];
        };
        const auto& L = p.acts.intermediates;
        Tensor<T> d = tanh_backward(p.acts.fake_image.pixels, d_fake);
        Tensor<T> dg4 = out_.backward(L[3], d);
        ladder_grad(3, dg4);
        Tensor<T> dg3 = up5_.backward(L[2], unstage(5, p, dg4));
        ladder_grad(2, dg3);
        Tensor<T> dg2 = up4_.backward(L[1], unstage(4, p, dg3));
        ladder_grad(1, dg2);
        Tensor<T> du2 = conv3_.backward(p.up2_act, unstage(3, p, dg2));
        Tensor<T> dg1 = up2_.backward(L[0], unstage(2, p, du2));
        ladder_grad(0, dg1);
        Tensor<T> dh0 = conv1_.backward(p.h0, unstage(1, p, dg1));
        Tensor<T> dgrid = unstage(0, p, dh0);
        Tensor<T> dfc(p.z.size(), width_ * 64, 1, 1);
        dfc.values() = std::move(dgrid.values());
        return fc_.backward(p.z.z, dfc);
    }

private:
    // BN followed by LeakyReLU; records the post-BN value for the backward pass.
    Tensor<T> stage(std::size_t k, const Tensor<T>& x, bool training, bool update_running, Pass& p) {
        p.pre[k] = bn_[k].forward(x, training, p.bn[k], update_running);
        return leaky_relu(p.pre[k], kSlope);
    }

    Tensor<T> unstage(std::size_t k, const Pass& p, const Tensor<T>& dy) {
        return bn_[k].backward(p.bn[k], leaky_relu_backward(p.pre[k], dy, kSlope));
    }

    std::size_t width_ = 0, channels_ = 1;
    bool initialized_ = false;
    Linear<T> fc_;
    std::array<BatchNorm2d<T>, 6> bn_;
    Conv2d<T> conv1_;
    ConvTranspose2d<T> up2_;
    Conv2d<T> conv3_;
    ConvTranspose2d<T> up4_;
    ConvTranspose2d<T> up5_;
    Conv2d<T> out_;
};

}  // namespace leakgan

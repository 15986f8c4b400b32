#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "leakgan/generator.hpp"
#include "leakgan/layers.hpp"
#include "leakgan/types.hpp"

namespace leakgan {

/// Switch and scaling for the information-leaking module. `layers` holds
/// 1-based ladder levels (1 = 8x8 ... 4 = 64x64); `alpha`/`beta` have one
/// entry per selected level.
struct LeakConfig {
    bool enabled = false;
    std::vector<int> layers{1};
    std::vector<double> alpha{1.0};
    std::vector<double> beta{1.0};

    void validate() const {
        if (layers.empty()) throw ConfigError("leak.layers must select at least one level");
        for (int l : layers) {
            if (l < 1 || l > static_cast<int>(kLadderLevels)) {
                throw ConfigError("leak.layers entries must be in {1,2,3,4}, got " + std::to_string(l));
            }
        }
        if (alpha.size() != layers.size() || beta.size() != layers.size()) {
            throw ConfigError("leak.alpha and leak.beta need one entry per selected layer");
        }
        for (double a : alpha) if (!(a >= 0)) throw ConfigError("leak.alpha must be >= 0");
        for (double b : beta) if (!(b >= 0)) throw ConfigError("leak.beta must be >= 0");
    }

    /// Index into layers/alpha/beta for a 0-based decoder level, if selected.
    std::optional<std::size_t> slot(std::size_t level) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i] == static_cast<int>(level) + 1) return i;
        }
        return std::nullopt;
    }
};

/// K free logits per pixel; the fake-class logit is structurally zero.
template <typename T>
struct SegLogits {
    Tensor<T> logits;
    std::size_t num_classes() const noexcept { return logits.c(); }
};

template <typename T>
struct EncoderFeatures {
    Tensor<T> bottleneck;                       // (B, 8W, 4, 4)
    std::array<Tensor<T>, kLadderLevels> skips; // contracting-path outputs, 8x8 first
};

/// Generator ladder as seen by the discriminator: one map per level, or
/// null for levels the caller does not provide.
template <typename T>
using LeakInputs = std::array<const Tensor<T>*, kLadderLevels>;

template <typename T>
LeakInputs<T> leak_inputs(const GeneratorActivations<T>& acts) {
    return {&acts.intermediates[0], &acts.intermediates[1], &acts.intermediates[2], &acts.intermediates[3]};
}

/// U-Net discriminator emitting K logits per pixel.
///
/// Contracting path: four blocks of two 3x3 convs (W, 2W, 4W, 8W) each
/// followed by 2x2 max pooling, giving a (8W, 4, 4) bottleneck. The
/// expanding path mirrors it: 2x2 transposed-conv upsampling, concatenation
/// with the matching contracting output, two 3x3 convs.
///
/// A decoder level with a leak conv reads L = [alpha*G, beta*U_c] (generator
/// map and contracting output) and adds its response to the level's first
/// pre-activation. This is the same as one conv over [up, U_c, L]; keeping
/// the leak weights separate makes the disabled path a plain U-Net.
template <typename T>
class UNet {
public:
    static constexpr T kSlope = T(0.2);

    struct Pass {
        SegLogits<T> out;
        EncoderFeatures<T> features;
        // conv inputs and pre-activations, in execution order
        std::vector<Tensor<T>> conv_in;
        std::vector<Tensor<T>> pre;
        std::array<std::vector<std::uint32_t>, kLadderLevels> pool_idx;
        std::array<Tensor<T>, kLadderLevels> up_in;      // decoder upsampling inputs
        std::array<Tensor<T>, kLadderLevels> leak_in;    // [alpha*G, beta*U_c], empty if unused
        std::array<T, kLadderLevels> alpha{};
        std::array<T, kLadderLevels> beta{};
        Tensor<T> head_in;
        bool leak_active = false;
    };

    struct Gradients {
        Tensor<T> d_input;
        std::array<Tensor<T>, kLadderLevels> d_leak;
    };

    UNet() = default;

    /// `leak_channels[l]` > 0 constructs a leak conv at decoder level l.
    UNet(std::size_t in_channels, std::size_t width, std::size_t num_classes,
         std::array<std::size_t, kLadderLevels> leak_channels = {0, 0, 0, 0})
        : in_(in_channels), width_(width), classes_(num_classes), leak_channels_(leak_channels) {
        if (num_classes < 2) throw ConfigError("discriminator needs K >= 2 classes");
        if (width < 1) throw ConfigError("discriminator width must be >= 1");
        const std::array<std::size_t, 4> w{width, 2 * width, 4 * width, 8 * width};
        std::size_t prev = in_channels;
        for (std::size_t b = 0; b < 4; ++b) {
            const auto tag = "disc.enc" + std::to_string(b + 1);
            enc_[b][0] = Conv2d<T>(tag + ".conv1", prev, w[b], 3);
            enc_[b][1] = Conv2d<T>(tag + ".conv2", w[b], w[b], 3);
            prev = w[b];
        }
        mid_[0] = Conv2d<T>("disc.mid.conv1", w[3], w[3], 3);
        mid_[1] = Conv2d<T>("disc.mid.conv2", w[3], w[3], 3);
        // decoder level l works at 8 << l and mirrors encoder block 3 - l
        std::size_t below = w[3];
        for (std::size_t l = 0; l < kLadderLevels; ++l) {
            const std::size_t skip = w[3 - l];
            const auto tag = "disc.dec" + std::to_string(l + 1);
            up_[l] = ConvTranspose2d<T>(tag + ".up", below, skip, 2, 2, 0);
            dec_[l][0] = Conv2d<T>(tag + ".conv1", 2 * skip, skip, 3);
            dec_[l][1] = Conv2d<T>(tag + ".conv2", skip, skip, 3);
            if (leak_channels[l] > 0) {
                leak_[l] = Conv2d<T>(tag + ".leak", leak_channels[l] + skip, skip, 3, false);
            }
            below = skip;
        }
        head_ = Conv2d<T>("disc.head", w[0], num_classes, 1);
    }

    std::size_t in_channels() const noexcept { return in_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t num_classes() const noexcept { return classes_; }
    const std::array<std::size_t, kLadderLevels>& leak_channels() const noexcept { return leak_channels_; }
    bool has_leak(std::size_t level) const noexcept { return leak_channels_[level] > 0; }
    bool initialized() const noexcept { return initialized_; }
    void mark_initialized() noexcept { initialized_ = true; }

    /// He-normal weights. Leak convs draw from a separate stream so the
    /// shared weights do not depend on which levels leak.
    void init(std::uint64_t seed, std::uint64_t leak_seed) {
        Engine rng(seed);
        for (auto& blk : enc_) for (auto& c : blk) c.init_he(kSlope, rng);
        for (auto& c : mid_) c.init_he(kSlope, rng);
        for (std::size_t l = 0; l < kLadderLevels; ++l) {
            up_[l].init_he(kSlope, rng);
            for (auto& c : dec_[l]) c.init_he(kSlope, rng);
        }
        head_.init(std::sqrt(1.0 / static_cast<double>(width_)), rng);
        for (std::size_t l = 0; l < kLadderLevels; ++l) {
            if (!has_leak(l)) continue;
            Engine lrng(derive_seed(leak_seed, {l}));
            leak_[l].init_he(kSlope, lrng);
        }
        initialized_ = true;
    }

    /// Parameters shared with a leak-free U-Net, followed by leak convs.
    std::vector<Param<T>*> parameters() {
        std::vector<Param<T>*> p;
        for (auto& blk : enc_) for (auto& c : blk) c.collect(p);
        for (auto& c : mid_) c.collect(p);
        for (std::size_t l = 0; l < kLadderLevels; ++l) {
            up_[l].collect(p);
            for (auto& c : dec_[l]) c.collect(p);
        }
        head_.collect(p);
        for (std::size_t l = 0; l < kLadderLevels; ++l) {
            if (has_leak(l)) leak_[l].collect(p);
        }
        return p;
    }

    void zero_grad() {
        for (auto* p : parameters()) p->zero_grad();
    }

    Conv2d<T>& head() noexcept { return head_; }

    /// Forward pass. With `cfg.enabled` false the leak argument is ignored
    /// and the computation is exactly that of a plain U-Net.
    Pass forward(const Tensor<T>& x, const LeakInputs<T>* leak, const LeakConfig& cfg) const {
        if (!initialized_) throw NumericError("discriminator: weights are not initialized");
        if (x.h() != kPatchSize || x.w() != kPatchSize) {
            throw NumericError("discriminator: input must be 64x64, got " + x.shape_string());
        }
        if (x.c() != in_) {
            throw NumericError("discriminator: expected " + std::to_string(in_) + " channels, got " +
                               x.shape_string());
        }
        Pass p;
        p.leak_active = cfg.enabled;
        if (cfg.enabled) check_leak(x, leak, cfg);

        Tensor<T> h = x;
        for (std::size_t b = 0; b < 4; ++b) {
            h = conv_act(enc_[b][0], h, p);
            h = conv_act(enc_[b][1], h, p);
            p.features.skips[3 - b] = h;
            h = max_pool2(h, p.pool_idx[b]);
        }
        p.features.bottleneck = h;
        h = conv_act(mid_[0], h, p);
        h = conv_act(mid_[1], h, p);

        for (std::size_t l = 0; l < kLadderLevels; ++l) {
            p.up_in[l] = h;
            Tensor<T> up = up_[l].forward(h);
            const Tensor<T>& skip = p.features.skips[l];
            const Tensor<T>* parts[] = {&up, &skip};
            p.conv_in.push_back(concat_channels<T>(parts));
            Tensor<T> pre = dec_[l][0].forward(p.conv_in.back());
            const auto slot = cfg.enabled ? cfg.slot(l) : std::nullopt;
            if (slot) {
                // L = [alpha * G, beta * U_c], added to the level's pre-activation
                p.alpha[l] = static_cast<T>(cfg.alpha[*slot]);
                p.beta[l] = static_cast<T>(cfg.beta[*slot]);
                Tensor<T> g = *(*leak)[l];
                g *= p.alpha[l];
                Tensor<T> u = skip;
                u *= p.beta[l];
                const Tensor<T>* lparts[] = {&g, &u};
                p.leak_in[l] = concat_channels<T>(lparts);
                pre += leak_[l].forward(p.leak_in[l]);
            }
            p.pre.push_back(pre);
            h = leaky_relu(pre, kSlope);
            h = conv_act(dec_[l][1], h, p);
        }
        p.head_in = h;
        p.out.logits = head_.forward(h);
        return p;
    }

    /// Backpropagate dL/dlogits (and optionally dL/dbottleneck). Parameter
    /// gradients accumulate; input and leak gradients are returned on request.
    Gradients backward(const Pass& p, const Tensor<T>& d_logits, const Tensor<T>* d_bottleneck = nullptr,
                       bool need_input_grad = false, bool need_leak_grad = false) {
        Gradients out;
        std::size_t k = p.pre.size();  // walks conv_in/pre backwards
        Tensor<T> d = head_.backward(p.head_in, d_logits);
        std::array<Tensor<T>, kLadderLevels> d_skip;
        for (std::size_t li = kLadderLevels; li-- > 0;) {
            d = back_conv_act(dec_[li][1], p, --k, d);
            --k;
            Tensor<T> dpre = leaky_relu_backward(p.pre[k], d, kSlope);
            Tensor<T> dcat = dec_[li][0].backward(p.conv_in[k], dpre);
            const std::size_t skip_ch = p.features.skips[li].c();
            const std::size_t chans[] = {dcat.c() - skip_ch, skip_ch};
            auto parts = split_channels<T>(dcat, chans);
            d_skip[li] = std::move(parts[1]);
            if (!p.leak_in[li].empty()) {
                Tensor<T> dleak = leak_[li].backward(p.leak_in[li], dpre);
                const std::size_t lchans[] = {leak_channels_[li], skip_ch};
                auto lparts = split_channels<T>(dleak, lchans);
                lparts[1] *= p.beta[li];
                d_skip[li] += lparts[1];
                if (need_leak_grad) {
                    lparts[0] *= p.alpha[li];
                    out.d_leak[li] = std::move(lparts[0]);
                }
            }
            d = up_[li].backward(p.up_in[li], parts[0]);
        }
        d = back_conv_act(mid_[1], p, --k, d);
        d = back_conv_act(mid_[0], p, --k, d);
        if (d_bottleneck) d += *d_bottleneck;
        for (std::size_t b = 4; b-- > 0;) {
            const Tensor<T>& skip = p.features.skips[3 - b];
            d = max_pool2_backward<T>(skip.shape(), p.pool_idx[b], d);
            d += d_skip[3 - b];
            d = back_conv_act(enc_[b][1], p, --k, d);
            const bool first = b == 0;
            d = back_conv_act(enc_[b][0], p, --k, d, !first || need_input_grad);
        }
        if (need_input_grad) out.d_input = std::move(d);
        return out;
    }

    /// Copy weights from another network of identical architecture.
    void copy_weights_from(UNet& other) {
        auto dst = parameters();
        auto src = other.parameters();
        if (dst.size() != src.size()) throw NumericError("copy_weights_from: parameter count mismatch");
        for (std::size_t i = 0; i < dst.size(); ++i) {
            src[i]->value.require_same_shape(dst[i]->value, "copy_weights_from");
            dst[i]->value = src[i]->value;
        }
        initialized_ = other.initialized_;
    }

private:
    Tensor<T> conv_act(const Conv2d<T>& conv, const Tensor<T>& x, Pass& p) const {
        p.conv_in.push_back(x);
        p.pre.push_back(conv.forward(x));
        return leaky_relu(p.pre.back(), kSlope);
    }

    Tensor<T> back_conv_act(Conv2d<T>& conv, const Pass& p, std::size_t k, const Tensor<T>& dy,
                            bool need_dx = true) {
        return conv.backward(p.conv_in[k], leaky_relu_backward(p.pre[k], dy, kSlope), need_dx);
    }

    void check_leak(const Tensor<T>& x, const LeakInputs<T>* leak, const LeakConfig& cfg) const {
        cfg.validate();
        if (!leak) throw NumericError("discriminator: leak enabled but no generator activations given");
        for (int layer : cfg.layers) {
            const auto l = static_cast<std::size_t>(layer - 1);
            const Tensor<T>* g = (*leak)[l];
            if (!has_leak(l)) {
                throw NumericError("discriminator: leak level " + std::to_string(layer) +
                                   " was not constructed");
            }
            if (!g || g->empty()) {
                throw NumericError("discriminator: missing generator activation for leak level " +
                                   std::to_string(layer));
            }
            const std::size_t s = ladder_size(l);
            if (g->n() != x.n() || g->h() != s || g->w() != s || g->c() != leak_channels_[l]) {
                throw NumericError("discriminator: leak level " + std::to_string(layer) + " has shape " +
                                   g->shape_string() + ", expected (" + std::to_string(x.n()) + "," +
                                   std::to_string(leak_channels_[l]) + "," + std::to_string(s) + "," +
                                   std::to_string(s) + ")");
            }
        }
    }

    std::size_t in_ = 1, width_ = 1, classes_ = 2;
    std::array<std::size_t, kLadderLevels> leak_channels_{};
    bool initialized_ = false;
    std::array<std::array<Conv2d<T>, 2>, 4> enc_;
    std::array<Conv2d<T>, 2> mid_;
    std::array<ConvTranspose2d<T>, kLadderLevels> up_;
    std::array<std::array<Conv2d<T>, 2>, kLadderLevels> dec_;
    std::array<Conv2d<T>, kLadderLevels> leak_;
    Conv2d<T> head_;
};

/// log(sum_i exp(v_i)) over a short array.
template <typename T>
T log_sum_exp(const T* v, std::size_t n, std::size_t stride = 1) {
    T m = v[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, v[i * stride]);
    if (!std::isfinite(m)) return m;
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i * stride] - m);
    return m + std::log(s);
}

/// Numerically stable logistic function.
template <typename T>
T sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

/// Per-pixel softmax over [l_1, ..., l_K, 0]; shape (B, K+1, H, W). The
/// last channel is p(y = K+1 | x), the fake class.
template <typename T>
Tensor<T> class_probabilities(const SegLogits<T>& s) {
    const auto& l = s.logits;
    const std::size_t k = l.c(), plane = l.plane_size();
    Tensor<T> out(l.n(), k + 1, l.h(), l.w());
    std::vector<T> v(k + 1);
    for (std::size_t i = 0; i < l.n(); ++i) {
        const T* src = l.data() + i * k * plane;
        T* dst = out.data() + i * (k + 1) * plane;
        for (std::size_t px = 0; px < plane; ++px) {
            for (std::size_t c = 0; c < k; ++c) v[c] = src[c * plane + px];
            v[k] = T(0);
            const T lse = log_sum_exp(v.data(), k + 1);
            for (std::size_t c = 0; c <= k; ++c) dst[c * plane + px] = std::exp(v[c] - lse);
        }
    }
    return out;
}

/// Per-pixel D(x) = Z / (Z + 1) with Z = sum_i exp(l_i); shape (B, 1, H, W).
template <typename T>
Tensor<T> realness_score(const SegLogits<T>& s) {
    const auto& l = s.logits;
    const std::size_t k = l.c(), plane = l.plane_size();
    Tensor<T> out(l.n(), 1, l.h(), l.w());
    for (std::size_t i = 0; i < l.n(); ++i) {
        const T* src = l.data() + i * k * plane;
        for (std::size_t px = 0; px < plane; ++px) {
            out[i * plane + px] = sigmoid(log_sum_exp(src + px, k, plane));
        }
    }
    return out;
}

/// K-class posterior p(y = c | x, y < K+1) for one class; shape (B, 1, H, W).
template <typename T>
Tensor<T> class_posterior(const SegLogits<T>& s, std::size_t cls) {
    const auto& l = s.logits;
    const std::size_t k = l.c(), plane = l.plane_size();
    Tensor<T> out(l.n(), 1, l.h(), l.w());
    for (std::size_t i = 0; i < l.n(); ++i) {
        const T* src = l.data() + i * k * plane;
        for (std::size_t px = 0; px < plane; ++px) {
            out[i * plane + px] = std::exp(src[cls * plane + px] - log_sum_exp(src + px, k, plane));
        }
    }
    return out;
}

inline constexpr std::size_t kVesselClass = 1;

/// Binarize a posterior map: vessel iff p > threshold (ties go to background).
template <typename T>
LabelMaskBatch threshold_posterior(const Tensor<T>& posterior, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ConfigError("threshold must lie in (0, 1), got " + std::to_string(threshold));
    }
    LabelMaskBatch m{posterior.n(), posterior.h(), posterior.w(), 2, {}};
    m.classes.resize(posterior.size());
    for (std::size_t k = 0; k < posterior.size(); ++k) {
        m.classes[k] = static_cast<double>(posterior[k]) > threshold ? 1 : 0;
    }
    return m;
}

template <typename T>
LabelMaskBatch predict_mask(const SegLogits<T>& s, double threshold) {
    return threshold_posterior(class_posterior(s, kVesselClass), threshold);
}

}  // namespace leakgan

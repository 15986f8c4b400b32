#pragma once

#include <Eigen/Core>

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "leakgan/rng.hpp"
#include "leakgan/tensor.hpp"

namespace leakgan {

/// A trainable array and its gradient accumulator.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string n, typename Tensor<T>::Shape shape)
        : name(std::move(n)), value(shape), grad(shape) {}

    void zero_grad() { grad.zero(); }
};

/// Non-trainable state that still belongs in checkpoints (batch-norm running stats).
template <typename T>
struct Buffer {
    std::string name;
    Tensor<T>* tensor;
};

template <typename T>
void init_normal(Tensor<T>& t, double stddev, Engine& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct Geometry {
    std::size_t channels, in_h, in_w, kernel, stride, pad, out_h, out_w;
};

/// Output positions [lo, hi) whose tap o * stride + k - pad lands inside
/// [0, in); every other position reads padding.
inline std::pair<std::size_t, std::size_t> valid_taps(std::size_t out, std::size_t in, std::size_t stride,
                                                      std::size_t k, std::size_t pad) {
    const auto s = static_cast<std::ptrdiff_t>(stride);
    const std::ptrdiff_t first = static_cast<std::ptrdiff_t>(pad) - static_cast<std::ptrdiff_t>(k);
    const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(in) - 1 + first;
    const std::size_t lo = first <= 0 ? 0 : static_cast<std::size_t>((first + s - 1) / s);
    const std::size_t hi = last < 0 ? 0 : static_cast<std::size_t>(last / s) + 1;
    const std::size_t l = std::min(lo, out);
    return {l, std::max(l, std::min(hi, out))};
}

/// Unfold one (C,H,W) sample into (C*k*k, out_h*out_w) columns; zero padding.
template <typename T>
void im2col(const T* src, const Geometry& g, T* cols) {
    const std::size_t k = g.kernel;
    const std::size_t npos = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
        const T* plane = src + c * g.in_h * g.in_w;
        for (std::size_t ky = 0; ky < k; ++ky) {
            const auto [ylo, yhi] = valid_taps(g.out_h, g.in_h, g.stride, ky, g.pad);
            for (std::size_t kx = 0; kx < k; ++kx) {
                const auto [xlo, xhi] = valid_taps(g.out_w, g.in_w, g.stride, kx, g.pad);
                T* row = cols + ((c * k + ky) * k + kx) * npos;
                std::fill_n(row, ylo * g.out_w, T(0));
                std::fill(row + yhi * g.out_w, row + npos, T(0));
                for (std::size_t oy = ylo; oy < yhi; ++oy) {
                    const T* line = plane + (oy * g.stride + ky - g.pad) * g.in_w;
                    T* out = row + oy * g.out_w;
                    std::fill_n(out, xlo, T(0));
                    std::fill(out + xhi, out + g.out_w, T(0));
                    if (xhi == xlo) continue;
                    const T* in = line + xlo * g.stride + kx - g.pad;
                    if (g.stride == 1) {
                        std::copy(in, in + (xhi - xlo), out + xlo);
                    } else {
                        for (std::size_t ox = xlo; ox < xhi; ++ox) out[ox] = in[(ox - xlo) * g.stride];
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add columns back into a zeroed (C,H,W) buffer.
/// Accumulation order per element is fixed by the loop nest.
template <typename T>
void col2im(const T* cols, const Geometry& g, T* dst) {
    const std::size_t k = g.kernel;
    const std::size_t npos = g.out_h * g.out_w;
    std::fill_n(dst, g.channels * g.in_h * g.in_w, T(0));
    for (std::size_t c = 0; c < g.channels; ++c) {
        T* plane = dst + c * g.in_h * g.in_w;
        for (std::size_t ky = 0; ky < k; ++ky) {
            const auto [ylo, yhi] = valid_taps(g.out_h, g.in_h, g.stride, ky, g.pad);
            for (std::size_t kx = 0; kx < k; ++kx) {
                const auto [xlo, xhi] = valid_taps(g.out_w, g.in_w, g.stride, kx, g.pad);
                if (xhi == xlo) continue;
                const T* row = cols + ((c * k + ky) * k + kx) * npos;
                for (std::size_t oy = ylo; oy < yhi; ++oy) {
                    T* line = plane + (oy * g.stride + ky - g.pad) * g.in_w + xlo * g.stride + kx - g.pad;
                    const T* in = row + oy * g.out_w + xlo;
                    const std::size_t n = xhi - xlo;
                    if (g.stride == 1) {
                        for (std::size_t i = 0; i < n; ++i) line[i] += in[i];
                    } else {
                        for (std::size_t i = 0; i < n; ++i) line[i * g.stride] += in[i];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// Square-kernel convolution, stride 1, "same" padding.
template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, bool bias = true)
        : in_(in_ch), out_(out_ch), k_(kernel), has_bias_(bias),
          weight_(name + ".weight", {out_ch, in_ch, kernel, kernel}),
          bias_(name + ".bias", {bias ? out_ch : 0, 1, 1, 1}) {}

    std::size_t in_channels() const noexcept { return in_; }
    std::size_t out_channels() const noexcept { return out_; }

    Param<T>& weight() noexcept { return weight_; }
    const Param<T>& weight() const noexcept { return weight_; }

    void init(double stddev, Engine& rng) {
        init_normal(weight_.value, stddev, rng);
        bias_.value.zero();
    }

    /// He initialization for a LeakyReLU with the given negative slope.
    void init_he(double slope, Engine& rng) {
        const double fan_in = static_cast<double>(in_ * k_ * k_);
        init(std::sqrt(2.0 / ((1.0 + slope * slope) * fan_in)), rng);
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&weight_);
        if (has_bias_) out.push_back(&bias_);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        check_input(x);
        const auto g = geometry(x);
        const std::size_t npos = g.out_h * g.out_w;
        Tensor<T> y(x.n(), out_, g.out_h, g.out_w);
        AlignedVector<T> cols(in_ * k_ * k_ * npos);
        detail::CMapMat<T> w(weight_.value.data(), out_, in_ * k_ * k_);
        for (std::size_t i = 0; i < x.n(); ++i) {
            detail::im2col(x.sample(i).data(), g, cols.data());
            detail::CMapMat<T> c(cols.data(), in_ * k_ * k_, npos);
            detail::MapMat<T> out(y.sample(i).data(), out_, npos);
            out.noalias() = w * c;
            if (has_bias_) {
                for (std::size_t o = 0; o < out_; ++o) out.row(o).array() += bias_.value[o];
            }
        }
        return y;
    }

    /// Accumulates parameter gradients and returns dL/dx (empty when need_dx is false).
    Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool need_dx = true) {
        const auto g = geometry(x);
        const std::size_t npos = g.out_h * g.out_w;
        const std::size_t rows = in_ * k_ * k_;
        Tensor<T> dx;
        if (need_dx) dx = Tensor<T>(x.shape());
        AlignedVector<T> cols(rows * npos);
        detail::MapMat<T> dw(weight_.grad.data(), out_, rows);
        detail::CMapMat<T> w(weight_.value.data(), out_, rows);
        for (std::size_t i = 0; i < x.n(); ++i) {
            detail::CMapMat<T> d(dy.sample(i).data(), out_, npos);
            detail::im2col(x.sample(i).data(), g, cols.data());
            detail::CMapMat<T> c(cols.data(), rows, npos);
            dw.noalias() += d * c.transpose();
            if (has_bias_) {
                for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += d.row(o).sum();
            }
            if (need_dx) {
                detail::MapMat<T> dc(cols.data(), rows, npos);
                dc.noalias() = w.transpose() * d;
                detail::col2im(cols.data(), g, dx.sample(i).data());
            }
        }
        return dx;
    }

private:
    detail::Geometry geometry(const Tensor<T>& x) const {
        return {in_, x.h(), x.w(), k_, 1, k_ / 2, x.h(), x.w()};
    }

    void check_input(const Tensor<T>& x) const {
        if (x.c() != in_) {
            throw NumericError(weight_.name + ": expected " + std::to_string(in_) +
                               " input channels, got " + x.shape_string());
        }
    }

    std::size_t in_ = 0, out_ = 0, k_ = 1;
    bool has_bias_ = true;
    Param<T> weight_;
    Param<T> bias_;
};

/// Transposed convolution (fractionally strided). Output size is
/// (in - 1) * stride - 2 * pad + kernel.
template <typename T>
class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                    std::size_t stride, std::size_t pad, bool bias = true)
        : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(pad), has_bias_(bias),
          weight_(name + ".weight", {in_ch, out_ch, kernel, kernel}),
          bias_(name + ".bias", {bias ? out_ch : 0, 1, 1, 1}) {}

    void init(double stddev, Engine& rng) {
        init_normal(weight_.value, stddev, rng);
        bias_.value.zero();
    }

    void init_he(double slope, Engine& rng) {
        // Each output pixel sees in_ * (k/stride)^2 taps on average.
        const double taps = static_cast<double>(in_ * k_ * k_) / static_cast<double>(stride_ * stride_);
        init(std::sqrt(2.0 / ((1.0 + slope * slope) * taps)), rng);
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&weight_);
        if (has_bias_) out.push_back(&bias_);
    }

    std::size_t out_size(std::size_t in) const { return (in - 1) * stride_ + k_ - 2 * pad_; }

    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.c() != in_) {
            throw NumericError(weight_.name + ": expected " + std::to_string(in_) +
                               " input channels, got " + x.shape_string());
        }
        const auto g = geometry(x);
        const std::size_t npos = x.h() * x.w();
        const std::size_t rows = out_ * k_ * k_;
        Tensor<T> y(x.n(), out_, g.in_h, g.in_w);
        AlignedVector<T> cols(rows * npos);
        detail::CMapMat<T> w(weight_.value.data(), in_, rows);
        for (std::size_t i = 0; i < x.n(); ++i) {
            detail::CMapMat<T> xs(x.sample(i).data(), in_, npos);
            detail::MapMat<T> c(cols.data(), rows, npos);
            c.noalias() = w.transpose() * xs;
            detail::col2im(cols.data(), g, y.sample(i).data());
            if (has_bias_) {
                T* ys = y.sample(i).data();
                for (std::size_t o = 0; o < out_; ++o) {
                    T* plane = ys + o * y.plane_size();
                    for (std::size_t p = 0; p < y.plane_size(); ++p) plane[p] += bias_.value[o];
                }
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool need_dx = true) {
        const auto g = geometry(x);
        const std::size_t npos = x.h() * x.w();
        const std::size_t rows = out_ * k_ * k_;
        Tensor<T> dx;
        if (need_dx) dx = Tensor<T>(x.shape());
        AlignedVector<T> cols(rows * npos);
        detail::MapMat<T> dw(weight_.grad.data(), in_, rows);
        detail::CMapMat<T> w(weight_.value.data(), in_, rows);
        for (std::size_t i = 0; i < x.n(); ++i) {
            detail::im2col(dy.sample(i).data(), g, cols.data());
            detail::CMapMat<T> c(cols.data(), rows, npos);
            detail::CMapMat<T> xs(x.sample(i).data(), in_, npos);
            dw.noalias() += xs * c.transpose();
            if (need_dx) {
                detail::MapMat<T> dxs(dx.sample(i).data(), in_, npos);
                dxs.noalias() = w * c;
            }
            if (has_bias_) {
                const T* ds = dy.sample(i).data();
                for (std::size_t o = 0; o < out_; ++o) {
                    const T* plane = ds + o * dy.plane_size();
                    T acc = T(0);
                    for (std::size_t p = 0; p < dy.plane_size(); ++p) acc += plane[p];
                    bias_.grad[o] += acc;
                }
            }
        }
        return dx;
    }

private:
    // Geometry of the equivalent forward convolution, which maps the
    // transposed conv's output back onto its input grid.
    detail::Geometry geometry(const Tensor<T>& x) const {
        return {out_, out_size(x.h()), out_size(x.w()), k_, stride_, pad_, x.h(), x.w()};
    }

    std::size_t in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
    bool has_bias_ = true;
    Param<T> weight_;
    Param<T> bias_;
};

/// Fully connected layer on flattened samples; output shaped (N, out, 1, 1).
template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out)
        : in_(in), out_(out), weight_(name + ".weight", {out, in, 1, 1}), bias_(name + ".bias", {out, 1, 1, 1}) {}

    void init(double stddev, Engine& rng) {
        init_normal(weight_.value, stddev, rng);
        bias_.value.zero();
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.sample_size() != in_) {
            throw NumericError(weight_.name + ": expected " + std::to_string(in_) + " features, got " +
                               x.shape_string());
        }
        Tensor<T> y(x.n(), out_, 1, 1);
        detail::CMapMat<T> xs(x.data(), x.n(), in_);
        detail::CMapMat<T> w(weight_.value.data(), out_, in_);
        detail::MapMat<T> ys(y.data(), x.n(), out_);
        ys.noalias() = xs * w.transpose();
        for (std::size_t i = 0; i < x.n(); ++i) {
            for (std::size_t o = 0; o < out_; ++o) ys(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(o)) += bias_.value[o];
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
        detail::CMapMat<T> xs(x.data(), x.n(), in_);
        detail::CMapMat<T> d(dy.data(), x.n(), out_);
        detail::CMapMat<T> w(weight_.value.data(), out_, in_);
        detail::MapMat<T> dw(weight_.grad.data(), out_, in_);
        dw.noalias() += d.transpose() * xs;
        for (std::size_t i = 0; i < x.n(); ++i) {
            for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(o));
        }
        Tensor<T> dx(x.shape());
        detail::MapMat<T> dxs(dx.data(), x.n(), in_);
        dxs.noalias() = d * w;
        return dx;
    }

private:
    std::size_t in_ = 0, out_ = 0;
    Param<T> weight_;
    Param<T> bias_;
};

/// Per-channel batch normalization. Training mode normalizes with batch
/// statistics and updates the running averages; inference mode uses them.
template <typename T>
class BatchNorm2d {
public:
    struct Cache {
        Tensor<T> xhat;
        std::vector<T> inv_std;
        bool training = true;
    };

    BatchNorm2d() = default;
    BatchNorm2d(const std::string& name, std::size_t channels, double momentum = 0.1, double eps = 1e-5)
        : channels_(channels), momentum_(momentum), eps_(eps),
          gamma_(name + ".gamma", {channels, 1, 1, 1}), beta_(name + ".beta", {channels, 1, 1, 1}),
          running_mean_(channels, 1, 1, 1), running_var_(channels, 1, 1, 1, T(1)), name_(name) {
        gamma_.value.fill(T(1));
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

    void collect_buffers(std::vector<Buffer<T>>& out) {
        out.push_back({name_ + ".running_mean", &running_mean_});
        out.push_back({name_ + ".running_var", &running_var_});
    }

    /// `update_running` is false when a training-mode pass is repeated on the same batch.
    Tensor<T> forward(const Tensor<T>& x, bool training, Cache& cache, bool update_running = true) {
        const std::size_t n = x.n(), plane = x.plane_size();
        const double count = static_cast<double>(n * plane);
        Tensor<T> y(x.shape());
        cache.xhat = Tensor<T>(x.shape());
        cache.inv_std.assign(channels_, T(0));
        cache.training = training;
        for (std::size_t c = 0; c < channels_; ++c) {
            double mean, var;
            if (training) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const T* p = x.data() + (i * channels_ + c) * plane;
                    for (std::size_t k = 0; k < plane; ++k) s += static_cast<double>(p[k]);
                }
                mean = s / count;
                double ss = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const T* p = x.data() + (i * channels_ + c) * plane;
                    for (std::size_t k = 0; k < plane; ++k) {
                        const double d = static_cast<double>(p[k]) - mean;
                        ss += d * d;
                    }
                }
                var = ss / count;
                if (update_running) {
                    const double unbiased = count > 1 ? ss / (count - 1) : var;
                    running_mean_[c] = static_cast<T>((1 - momentum_) * static_cast<double>(running_mean_[c]) + momentum_ * mean);
                    running_var_[c] = static_cast<T>((1 - momentum_) * static_cast<double>(running_var_[c]) + momentum_ * unbiased);
                }
            } else {
                mean = static_cast<double>(running_mean_[c]);
                var = static_cast<double>(running_var_[c]);
            }
            const T inv = static_cast<T>(1.0 / std::sqrt(var + eps_));
            const T m = static_cast<T>(mean);
            cache.inv_std[c] = inv;
            const T g = gamma_.value[c], b = beta_.value[c];
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t off = (i * channels_ + c) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    const T xh = (x[off + k] - m) * inv;
                    cache.xhat[off + k] = xh;
                    y[off + k] = g * xh + b;
                }
            }
        }
        return y;
    }

    Tensor<T> backward(const Cache& cache, const Tensor<T>& dy) {
        const std::size_t n = dy.n(), plane = dy.plane_size();
        const T count = static_cast<T>(n * plane);
        Tensor<T> dx(dy.shape());
        for (std::size_t c = 0; c < channels_; ++c) {
            T sum_dy = T(0), sum_dy_xhat = T(0);
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t off = (i * channels_ + c) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    sum_dy += dy[off + k];
                    sum_dy_xhat += dy[off + k] * cache.xhat[off + k];
                }
            }
            gamma_.grad[c] += sum_dy_xhat;
            beta_.grad[c] += sum_dy;
            const T g = gamma_.value[c], inv = cache.inv_std[c];
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t off = (i * channels_ + c) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    if (cache.training) {
                        dx[off + k] = g * inv / count *
                                      (count * dy[off + k] - sum_dy - cache.xhat[off + k] * sum_dy_xhat);
                    } else {
                        dx[off + k] = g * inv * dy[off + k];
                    }
                }
            }
        }
        return dx;
    }

private:
    std::size_t channels_ = 0;
    double momentum_ = 0.1, eps_ = 1e-5;
    Param<T> gamma_, beta_;
    Tensor<T> running_mean_, running_var_;
    std::string name_;
};

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    Tensor<T> y(x.shape());
    const T* in = x.data();
    T* out = y.data();
    for (std::size_t k = 0, n = x.size(); k < n; ++k) out[k] = in[k] > T(0) ? in[k] : slope * in[k];
    return y;
}

/// Gradient of leaky_relu given its input.
template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& dy, T slope) {
    Tensor<T> dx(x.shape());
    const T* in = x.data();
    const T* g = dy.data();
    T* out = dx.data();
    for (std::size_t k = 0, n = x.size(); k < n; ++k) out[k] = in[k] > T(0) ? g[k] : slope * g[k];
    return dx;
}

template <typename T>
Tensor<T> tanh_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t k = 0; k < x.size(); ++k) y[k] = std::tanh(x[k]);
    return y;
}

/// Gradient of tanh given its output.
template <typename T>
Tensor<T> tanh_backward(const Tensor<T>& y, const Tensor<T>& dy) {
    Tensor<T> dx(y.shape());
    for (std::size_t k = 0; k < y.size(); ++k) dx[k] = dy[k] * (T(1) - y[k] * y[k]);
    return dx;
}

/// 2x2 max pooling, stride 2. Records the flat argmax of each window.
template <typename T>
Tensor<T> max_pool2(const Tensor<T>& x, std::vector<std::uint32_t>& argmax) {
    const std::size_t oh = x.h() / 2, ow = x.w() / 2;
    Tensor<T> y(x.n(), x.c(), oh, ow);
    argmax.resize(y.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < x.n(); ++i) {
        for (std::size_t c = 0; c < x.c(); ++c) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox, ++k) {
                    std::size_t best = 0;
                    T bv = T(0);
                    bool first = true;
                    for (std::size_t dy = 0; dy < 2; ++dy) {
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t idx = ((i * x.c() + c) * x.h() + 2 * oy + dy) * x.w() + 2 * ox + dx;
                            if (first || x[idx] > bv) {
                                bv = x[idx];
                                best = idx;
                                first = false;
                            }
                        }
                    }
                    y[k] = bv;
                    argmax[k] = static_cast<std::uint32_t>(best);
                }
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> max_pool2_backward(const typename Tensor<T>::Shape& in_shape, const std::vector<std::uint32_t>& argmax,
                             const Tensor<T>& dy) {
    Tensor<T> dx(in_shape);
    for (std::size_t k = 0; k < dy.size(); ++k) dx[argmax[k]] += dy[k];
    return dx;
}

}  // namespace leakgan

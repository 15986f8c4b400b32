#pragma once

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <new>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "leakgan/error.hpp"

namespace leakgan {

/// 64-byte aligned storage. Eigen's vectorised reductions peel scalars until
/// the pointer is packet-aligned, so summation order (and therefore the last
/// bits of every gradient) would otherwise depend on where malloc lands.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), alignment));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense rank-4 array in NCHW order. Lower-rank data (noise vectors,
/// bottleneck features flattened by the caller) uses trailing unit dims.
template <typename T>
class Tensor {
public:
    using value_type = T;
    using Shape = std::array<std::size_t, 4>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(shape), data_(shape[0] * shape[1] * shape[2] * shape[3], fill) {}

    Tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
        : Tensor(Shape{n, c, h, w}, fill) {}

    const Shape& shape() const noexcept { return shape_; }
    std::size_t n() const noexcept { return shape_[0]; }
    std::size_t c() const noexcept { return shape_[1]; }
    std::size_t h() const noexcept { return shape_[2]; }
    std::size_t w() const noexcept { return shape_[3]; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    /// Elements per sample (C*H*W).
    std::size_t sample_size() const noexcept { return shape_[1] * shape_[2] * shape_[3]; }
    std::size_t plane_size() const noexcept { return shape_[2] * shape_[3]; }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    AlignedVector<T>& values() noexcept { return data_; }
    const AlignedVector<T>& values() const noexcept { return data_; }

    std::span<T> sample(std::size_t i) {
        return {data_.data() + i * sample_size(), sample_size()};
    }
    std::span<const T> sample(std::size_t i) const {
        return {data_.data() + i * sample_size(), sample_size()};
    }

    T& operator()(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) noexcept {
        return data_[((i * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x];
    }
    const T& operator()(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) const noexcept {
        return data_[((i * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x];
    }

    T& operator[](std::size_t k) noexcept { return data_[k]; }
    const T& operator[](std::size_t k) const noexcept { return data_[k]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(T(0)); }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(o, "operator+=");
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
        return *this;
    }

    Tensor& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

    void require_same_shape(const Tensor& o, const char* where) const {
        if (!same_shape(o)) {
            throw NumericError(std::string(where) + ": shape mismatch " + shape_string() +
                               " vs " + o.shape_string());
        }
    }

    std::string shape_string() const {
        std::ostringstream os;
        os << '(' << shape_[0] << ',' << shape_[1] << ',' << shape_[2] << ',' << shape_[3] << ')';
        return os.str();
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    /// Samples [begin, begin+count) as a new tensor.
    Tensor slice(std::size_t begin, std::size_t count) const {
        assert(begin + count <= n());
        Tensor out(count, shape_[1], shape_[2], shape_[3]);
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(begin * sample_size()),
                    count * sample_size(), out.data_.begin());
        return out;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        std::transform(data_.begin(), data_.end(), out.values().begin(),
                       [](T v) { return static_cast<U>(v); });
        return out;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_{0, 0, 0, 0};
    AlignedVector<T> data_;
};

/// Stack tensors along the batch axis. All inputs must share C, H, W.
template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>* const> parts) {
    if (parts.empty()) return {};
    const auto& s0 = parts.front()->shape();
    std::size_t n = 0;
    for (const auto* p : parts) {
        const auto& s = p->shape();
        if (s[1] != s0[1] || s[2] != s0[2] || s[3] != s0[3]) {
            throw NumericError("concat_batch: incompatible shapes " + p->shape_string() + " vs " +
                               parts.front()->shape_string());
        }
        n += s[0];
    }
    Tensor<T> out(n, s0[1], s0[2], s0[3]);
    auto it = out.values().begin();
    for (const auto* p : parts) it = std::copy(p->values().begin(), p->values().end(), it);
    return out;
}

template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
    const Tensor<T>* parts[] = {&a, &b};
    return concat_batch<T>(parts);
}

/// Concatenate along the channel axis. All inputs must share N, H, W.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
    const auto& s0 = parts.front()->shape();
    std::size_t c = 0;
    for (const auto* p : parts) {
        const auto& s = p->shape();
        if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
            throw NumericError("concat_channels: incompatible shapes " + p->shape_string() +
                               " vs " + parts.front()->shape_string());
        }
        c += s[1];
    }
    Tensor<T> out(s0[0], c, s0[2], s0[3]);
    const std::size_t plane = s0[2] * s0[3];
    T* dst = out.data();
    for (std::size_t i = 0; i < s0[0]; ++i) {
        for (const auto* p : parts) {
            const std::size_t chunk = p->c() * plane;
            std::copy_n(p->data() + i * chunk, chunk, dst);
            dst += chunk;
        }
    }
    return out;
}

/// Inverse of concat_channels: split `t` into pieces with the given channel counts.
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& t, std::span<const std::size_t> channels) {
    std::vector<Tensor<T>> out;
    out.reserve(channels.size());
    for (auto c : channels) out.emplace_back(t.n(), c, t.h(), t.w());
    const std::size_t plane = t.plane_size();
    const T* src = t.data();
    for (std::size_t i = 0; i < t.n(); ++i) {
        for (std::size_t k = 0; k < channels.size(); ++k) {
            const std::size_t chunk = channels[k] * plane;
            std::copy_n(src, chunk, out[k].data() + i * chunk);
            src += chunk;
        }
    }
    return out;
}

template <typename T>
T sum(const Tensor<T>& t) {
    T s = T(0);
    for (auto v : t.values()) s += v;
    return s;
}

template <typename T>
T max_abs(const Tensor<T>& t) {
    T m = T(0);
    for (auto v : t.values()) m = std::max(m, std::abs(v));
    return m;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    a.require_same_shape(b, "max_abs_diff");
    T m = T(0);
    for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
    return m;
}

}  // namespace leakgan

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>

#include "leakgan/error.hpp"
#include "leakgan/rng.hpp"
#include "leakgan/types.hpp"

namespace leakgan {

/// 8-bit intensity to [-1, 1].
template <typename T>
constexpr T normalize_pixel(std::uint8_t v) noexcept {
    return static_cast<T>(v) / T(127.5) - T(1);
}

/// Inverse of normalize_pixel, rounded and clamped to [0, 255].
template <typename T>
std::uint8_t denormalize_pixel(T v) noexcept {
    const double x = std::round((static_cast<double>(v) + 1.0) * 127.5);
    return static_cast<std::uint8_t>(std::clamp(x, 0.0, 255.0));
}

/// x + lambda * eps with eps ~ N(0, I), one draw per element. The result is
/// not clipped back to [-1, 1].
template <typename T>
PatchBatch<T> add_input_noise(const PatchBatch<T>& batch, double lambda, std::uint64_t seed) {
    if (!(lambda > 0.0 && lambda < 1.0)) {
        throw ConfigError("noise lambda must lie in (0, 1), got " + std::to_string(lambda));
    }
    PatchBatch<T> out = batch;
    Engine rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : out.pixels.values()) v = static_cast<T>(static_cast<double>(v) + lambda * dist(rng));
    return out;
}

}  // namespace leakgan

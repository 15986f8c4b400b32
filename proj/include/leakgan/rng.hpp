#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace leakgan {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derive an independent seed from a base seed and a list of keys
/// (stream tag, step index, ...). Every random draw in training is keyed
/// this way so runs can resume at any step without serializing engine state.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) noexcept {
    std::uint64_t h = splitmix64(base);
    for (auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
    return h;
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t base, std::initializer_list<std::uint64_t> keys = {}) {
    return Engine(derive_seed(base, keys));
}

/// Stream tags for derive_seed.
namespace stream {
inline constexpr std::uint64_t init_discriminator = 1;
inline constexpr std::uint64_t init_generator = 2;
inline constexpr std::uint64_t init_leak = 3;
inline constexpr std::uint64_t labelled_batch = 10;
inline constexpr std::uint64_t unlabelled_batch = 11;
inline constexpr std::uint64_t target_batch = 12;
inline constexpr std::uint64_t noise_z = 13;
inline constexpr std::uint64_t teacher_noise = 14;
inline constexpr std::uint64_t split = 20;
inline constexpr std::uint64_t synth = 30;
}  // namespace stream

}  // namespace leakgan

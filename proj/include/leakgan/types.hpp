#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "leakgan/tensor.hpp"

namespace leakgan {

inline constexpr std::size_t kPatchSize = 64;
inline constexpr std::size_t kNoiseLength = 100;
/// Generator ladder / decoder levels: 8x8, 16x16, 32x32, 64x64.
inline constexpr std::size_t kLadderLevels = 4;
inline constexpr std::size_t kLadderBase = 8;

constexpr std::size_t ladder_size(std::size_t level) { return kLadderBase << level; }

/// Batch of image patches with pixels normalized to [-1, 1]. The leading
/// dimension is the patch index; fake patches carry no provenance.
template <typename T>
struct PatchBatch {
    Tensor<T> pixels;
    std::vector<std::size_t> source_ids;
    std::vector<std::pair<std::size_t, std::size_t>> crop_origins;

    std::size_t size() const noexcept { return pixels.n(); }
    std::size_t channels() const noexcept { return pixels.c(); }
};

/// Per-pixel class indices in {0, ..., K-1}; class 1 is "vessel" when K = 2.
struct LabelMaskBatch {
    std::size_t batch = 0, height = 0, width = 0;
    std::size_t num_classes = 2;
    std::vector<std::uint8_t> classes;

    std::uint8_t operator()(std::size_t i, std::size_t y, std::size_t x) const noexcept {
        return classes[(i * height + y) * width + x];
    }
    std::size_t pixels_per_sample() const noexcept { return height * width; }
};

}  // namespace leakgan

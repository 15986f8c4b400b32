#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "leakgan/image_io.hpp"
#include "leakgan/patch_ops.hpp"
#include "leakgan/rng.hpp"
#include "leakgan/types.hpp"

namespace leakgan {

enum class DatasetLayout { drive, stare, chase_db1, synthetic, generic };

inline DatasetLayout parse_layout(const std::string& s) {
    if (s == "drive") return DatasetLayout::drive;
    if (s == "stare") return DatasetLayout::stare;
    if (s == "chase_db1" || s == "chase") return DatasetLayout::chase_db1;
    if (s == "synthetic") return DatasetLayout::synthetic;
    if (s == "generic") return DatasetLayout::generic;
    throw ConfigError("unknown dataset layout '" + s + "' (drive, stare, chase_db1, synthetic, generic)");
}

inline std::string to_string(DatasetLayout l) {
    switch (l) {
        case DatasetLayout::drive: return "drive";
        case DatasetLayout::stare: return "stare";
        case DatasetLayout::chase_db1: return "chase_db1";
        case DatasetLayout::synthetic: return "synthetic";
        case DatasetLayout::generic: return "generic";
    }
    return "generic";
}

/// Native (height, width) of the public fundus datasets.
inline std::optional<std::pair<std::size_t, std::size_t>> layout_resolution(DatasetLayout l) {
    switch (l) {
        case DatasetLayout::drive: return std::pair<std::size_t, std::size_t>{584, 565};
        case DatasetLayout::stare: return std::pair<std::size_t, std::size_t>{605, 700};
        case DatasetLayout::chase_db1: return std::pair<std::size_t, std::size_t>{960, 999};
        default: return std::nullopt;
    }
}

/// A dataset on disk (or synthesized in memory), decoded and validated.
/// Immutable after construction.
struct DatasetIndex {
    std::string name;
    std::vector<std::filesystem::path> image_paths;
    std::vector<std::filesystem::path> mask_paths;  // empty when masks are absent
    std::vector<std::filesystem::path> fov_paths;   // empty when absent
    std::pair<std::size_t, std::size_t> resolution{0, 0};
    int bit_depth = 8;

    std::vector<Image> images;
    std::vector<BinaryMask> masks;
    std::vector<BinaryMask> fovs;

    std::size_t size() const noexcept { return images.size(); }
    bool has_masks() const noexcept { return !masks.empty(); }
    bool has_fov() const noexcept { return !fovs.empty(); }
    std::size_t channels() const noexcept { return images.empty() ? 0 : images.front().channels; }
};

/// Copy of `index` with ground truth removed, for data that must never
/// reach a supervised loss (cross-domain targets).
inline DatasetIndex without_masks(DatasetIndex index) {
    index.mask_paths.clear();
    index.masks.clear();
    return index;
}

namespace detail {

inline bool is_image_file(const std::filesystem::path& p) {
    static const std::set<std::string> exts{".png", ".tif", ".tiff", ".gif", ".jpg", ".jpeg", ".ppm", ".pgm", ".bmp"};
    auto e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return exts.count(e) > 0;
}

inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> out;
    if (!std::filesystem::is_directory(dir)) return out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline std::string count_mismatch(const std::string& what, const std::vector<std::filesystem::path>& images,
                                  const std::vector<std::filesystem::path>& other) {
    std::string msg = what + " count " + std::to_string(other.size()) + " does not match image count " +
                      std::to_string(images.size()) + "; unpaired:";
    const auto& longer = images.size() > other.size() ? images : other;
    for (std::size_t i = std::min(images.size(), other.size()); i < longer.size(); ++i) {
        msg += " " + longer[i].filename().string();
    }
    return msg;
}

}  // namespace detail

/// Load `root/images`, `root/masks`, `root/fov` (files paired by sorted name).
inline DatasetIndex load_dataset(const std::filesystem::path& root, DatasetLayout layout) {
    if (!std::filesystem::is_directory(root)) throw ConfigError("dataset root is not a directory: " + root.string());
    DatasetIndex idx;
    idx.name = to_string(layout);
    idx.image_paths = detail::list_images(root / "images");
    if (idx.image_paths.empty()) throw ConfigError("no images found under " + (root / "images").string());
    idx.mask_paths = detail::list_images(root / "masks");
    idx.fov_paths = detail::list_images(root / "fov");
    if (!idx.mask_paths.empty() && idx.mask_paths.size() != idx.image_paths.size()) {
        throw DataError(detail::count_mismatch("mask", idx.image_paths, idx.mask_paths));
    }
    if (!idx.fov_paths.empty() && idx.fov_paths.size() != idx.image_paths.size()) {
        throw DataError(detail::count_mismatch("fov", idx.image_paths, idx.fov_paths));
    }

    for (const auto& p : idx.image_paths) idx.images.push_back(read_image(p));
    const auto expected = layout_resolution(layout);
    idx.resolution = expected ? *expected
                              : std::pair<std::size_t, std::size_t>{idx.images.front().height, idx.images.front().width};
    const std::size_t channels = idx.images.front().channels;
    auto check = [&](std::size_t h, std::size_t w, const std::filesystem::path& p) {
        if (h != idx.resolution.first || w != idx.resolution.second) {
            throw DataError(p.string() + " is " + std::to_string(h) + "x" + std::to_string(w) + ", expected " +
                            std::to_string(idx.resolution.first) + "x" + std::to_string(idx.resolution.second));
        }
    };
    for (std::size_t i = 0; i < idx.images.size(); ++i) {
        check(idx.images[i].height, idx.images[i].width, idx.image_paths[i]);
        if (idx.images[i].channels != channels) {
            throw DataError(idx.image_paths[i].string() + " has a different channel count than the first image");
        }
    }
    for (const auto& p : idx.mask_paths) {
        idx.masks.push_back(read_mask(p));
        check(idx.masks.back().height, idx.masks.back().width, p);
    }
    for (const auto& p : idx.fov_paths) {
        idx.fovs.push_back(read_mask(p));
        check(idx.fovs.back().height, idx.fovs.back().width, p);
    }
    return idx;
}

/// Labelled/unlabelled partition of a training set.
struct SemiSplit {
    std::vector<std::size_t> labelled;
    std::vector<std::size_t> unlabelled;
    std::size_t n_labelled = 0;
};

/// Pick `n_labelled` images with masks at random; everything else is unlabelled.
inline SemiSplit split_semi(const DatasetIndex& index, std::size_t n_labelled, std::uint64_t seed) {
    if (n_labelled < 1) throw ConfigError("n_labelled must be >= 1");
    if (!index.has_masks() || n_labelled > index.masks.size()) {
        throw ConfigError("n_labelled=" + std::to_string(n_labelled) + " exceeds the " +
                          std::to_string(index.masks.size()) + " images with masks in " + index.name);
    }
    std::vector<std::size_t> order(index.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Engine rng(derive_seed(seed, {stream::split}));
    std::shuffle(order.begin(), order.end(), rng);
    SemiSplit s;
    s.n_labelled = n_labelled;
    s.labelled.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_labelled));
    s.unlabelled.assign(order.begin() + static_cast<std::ptrdiff_t>(n_labelled), order.end());
    std::sort(s.labelled.begin(), s.labelled.end());
    std::sort(s.unlabelled.begin(), s.unlabelled.end());
    return s;
}

template <typename T>
struct PatchSample {
    PatchBatch<T> patches;
    std::optional<LabelMaskBatch> labels;
};

/// Copy one 64x64 window of image `id` at (row, col) into slot `k`.
template <typename T>
void copy_patch(const DatasetIndex& index, std::size_t id, std::size_t row, std::size_t col, std::size_t k,
                PatchBatch<T>& out, LabelMaskBatch* labels) {
    const Image& img = index.images[id];
    const std::size_t c = img.channels;
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < kPatchSize; ++y) {
            for (std::size_t x = 0; x < kPatchSize; ++x) {
                out.pixels(k, ch, y, x) = normalize_pixel<T>(img.at(row + y, col + x, ch));
            }
        }
    }
    if (labels) {
        const BinaryMask& m = index.masks[id];
        for (std::size_t y = 0; y < kPatchSize; ++y) {
            for (std::size_t x = 0; x < kPatchSize; ++x) {
                labels->classes[(k * kPatchSize + y) * kPatchSize + x] = m.at(row + y, col + x);
            }
        }
    }
}

/// `count` random 64x64 crops from the images in `which`. Labels are
/// returned iff every selected image has a mask.
template <typename T>
PatchSample<T> extract_patches(const DatasetIndex& index, const std::vector<std::size_t>& which, std::size_t count,
                               std::uint64_t seed) {
    if (count < 1) throw ConfigError("extract_patches: count must be >= 1");
    if (which.empty()) throw ConfigError("extract_patches: no source images selected");
    for (auto id : which) {
        if (id >= index.size()) throw ConfigError("extract_patches: image index out of range");
        const auto& img = index.images[id];
        if (img.height < kPatchSize || img.width < kPatchSize) {
            throw DataError("image " + std::to_string(id) + " is smaller than 64x64");
        }
    }
    const bool with_labels = index.has_masks();
    PatchSample<T> out;
    out.patches.pixels = Tensor<T>(count, index.channels(), kPatchSize, kPatchSize);
    if (with_labels) out.labels = LabelMaskBatch{count, kPatchSize, kPatchSize, 2, std::vector<std::uint8_t>(count * kPatchSize * kPatchSize)};
    Engine rng(seed);
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t id = which[std::uniform_int_distribution<std::size_t>(0, which.size() - 1)(rng)];
        const auto& img = index.images[id];
        const std::size_t row = std::uniform_int_distribution<std::size_t>(0, img.height - kPatchSize)(rng);
        const std::size_t col = std::uniform_int_distribution<std::size_t>(0, img.width - kPatchSize)(rng);
        copy_patch(index, id, row, col, k, out.patches, with_labels ? &*out.labels : nullptr);
        out.patches.source_ids.push_back(id);
        out.patches.crop_origins.emplace_back(row, col);
    }
    return out;
}

}  // namespace leakgan

#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "leakgan/data.hpp"
#include "leakgan/discriminator.hpp"
#include "leakgan/error.hpp"
#include "leakgan/image_io.hpp"
#include "leakgan/patch_ops.hpp"

namespace leakgan {

/// Per-pixel vessel posterior of a whole image, row-major.
struct ProbabilityMap {
    std::size_t height = 0, width = 0;
    std::vector<double> values;

    double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

struct FullPrediction {
    ProbabilityMap probability;
    BinaryMask mask;
};

/// Window origins along one axis: 0, stride, 2*stride, ... plus a final
/// window flush with the far border.
inline std::vector<std::size_t> window_origins(std::size_t extent, std::size_t stride) {
    std::vector<std::size_t> out;
    for (std::size_t o = 0; o + kPatchSize <= extent; o += stride) out.push_back(o);
    if (out.back() + kPatchSize < extent) out.push_back(extent - kPatchSize);
    return out;
}

/// Vessel posterior of a whole image: 64x64 windows at `stride` (edge
/// windows aligned to the border), overlapping posteriors averaged. The leak
/// module is never used at inference.
template <typename T>
ProbabilityMap predict_probability(const UNet<T>& net, const Image& image, std::size_t stride,
                                   std::size_t windows_per_batch = 16) {
    if (image.height < kPatchSize || image.width < kPatchSize) {
        throw DataError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                        " is smaller than a 64x64 patch");
    }
    if (stride < 1 || stride > kPatchSize) throw ConfigError("stride must lie in [1, 64]");
    if (image.channels != net.in_channels()) {
        throw DataError("image has " + std::to_string(image.channels) + " channels, model expects " +
                        std::to_string(net.in_channels()));
    }
    std::vector<std::pair<std::size_t, std::size_t>> windows;
    for (auto r : window_origins(image.height, stride)) {
        for (auto c : window_origins(image.width, stride)) windows.emplace_back(r, c);
    }
    std::vector<double> sum(image.pixels(), 0.0);
    std::vector<std::uint32_t> hits(image.pixels(), 0);
    const LeakConfig off{};
    for (std::size_t start = 0; start < windows.size(); start += windows_per_batch) {
        const std::size_t count = std::min(windows_per_batch, windows.size() - start);
        Tensor<T> x(count, image.channels, kPatchSize, kPatchSize);
        for (std::size_t k = 0; k < count; ++k) {
            const auto [row, col] = windows[start + k];
            for (std::size_t ch = 0; ch < image.channels; ++ch)
                for (std::size_t y = 0; y < kPatchSize; ++y)
                    for (std::size_t xx = 0; xx < kPatchSize; ++xx)
                        x(k, ch, y, xx) = normalize_pixel<T>(image.at(row + y, col + xx, ch));
        }
        const auto post = class_posterior(net.forward(x, nullptr, off).out, kVesselClass);
        for (std::size_t k = 0; k < count; ++k) {
            const auto [row, col] = windows[start + k];
            for (std::size_t y = 0; y < kPatchSize; ++y) {
                for (std::size_t xx = 0; xx < kPatchSize; ++xx) {
                    const std::size_t idx = (row + y) * image.width + col + xx;
                    sum[idx] += static_cast<double>(post(k, 0, y, xx));
                    ++hits[idx];
                }
            }
        }
    }
    ProbabilityMap out{image.height, image.width, std::vector<double>(image.pixels())};
    for (std::size_t k = 0; k < sum.size(); ++k) out.values[k] = sum[k] / hits[k];
    return out;
}

/// Vessel iff posterior > threshold (ties go to background).
inline BinaryMask threshold_map(const ProbabilityMap& p, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ConfigError("threshold must lie in (0, 1), got " + std::to_string(threshold));
    }
    BinaryMask m(p.height, p.width);
    for (std::size_t k = 0; k < p.values.size(); ++k) m.data[k] = p.values[k] > threshold ? 1 : 0;
    return m;
}

template <typename T>
FullPrediction predict_full_image(const UNet<T>& net, const Image& image, std::size_t stride, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ConfigError("threshold must lie in (0, 1), got " + std::to_string(threshold));
    }
    FullPrediction out;
    out.probability = predict_probability(net, image, stride);
    out.mask = threshold_map(out.probability, threshold);
    return out;
}

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
    bool operator==(const ConfusionCounts&) const = default;
};

namespace detail {
inline void require_same_size(const BinaryMask& a, const BinaryMask& b, const char* what) {
    if (a.height != b.height || a.width != b.width) {
        throw DataError(std::string(what) + ": mask sizes differ (" + std::to_string(a.height) + "x" +
                        std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) +
                        ")");
    }
}
}  // namespace detail

/// Vessel is the positive class. Only pixels with fov = 1 count when a FOV
/// mask is given.
inline ConfusionCounts confusion_counts(const BinaryMask& pred, const BinaryMask& gt, const BinaryMask* fov = nullptr) {
    detail::require_same_size(pred, gt, "confusion_counts");
    if (fov) detail::require_same_size(pred, *fov, "confusion_counts (fov)");
    ConfusionCounts c;
    for (std::size_t k = 0; k < pred.pixels(); ++k) {
        if (fov && !fov->data[k]) continue;
        const bool p = pred.data[k] != 0, g = gt.data[k] != 0;
        if (p && g) ++c.tp;
        else if (p) ++c.fp;
        else if (g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

/// Se and Sp are null when their denominator is zero (no positives or no
/// negatives in the ground truth).
struct Metrics {
    double acc = 0;
    std::optional<double> sp;
    std::optional<double> se;
};

inline Metrics metrics(const ConfusionCounts& c) {
    if (c.total() == 0) throw DataError("metrics: no pixels were evaluated");
    Metrics m;
    m.acc = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    if (c.tn + c.fp > 0) m.sp = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
    if (c.tp + c.fn > 0) m.se = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    return m;
}

/// "Acc / Sp / Se" in percent with two decimals; null entries print as n/a.
inline std::string format_row(const Metrics& m, std::string_view sep = " / ") {
    auto pct = [](std::optional<double> v) {
        if (!v) return std::string("n/a");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *v);
        return std::string(buf);
    };
    std::string out = pct(m.acc);
    (out += sep) += pct(m.sp);
    (out += sep) += pct(m.se);
    return out;
}

/// TP white, TN black, FP blue (#0000FF), FN yellow (#FFFF00); RGB.
inline Image difference_map(const BinaryMask& pred, const BinaryMask& gt) {
    detail::require_same_size(pred, gt, "difference_map");
    Image out(pred.height, pred.width, 3);
    for (std::size_t k = 0; k < pred.pixels(); ++k) {
        const bool p = pred.data[k] != 0, g = gt.data[k] != 0;
        std::uint8_t r = 0, gr = 0, b = 0;
        if (p && g) r = gr = b = 255;
        else if (p) b = 255;
        else if (g) r = gr = 255;
        out.data[3 * k] = r;
        out.data[3 * k + 1] = gr;
        out.data[3 * k + 2] = b;
    }
    return out;
}

/// Tallies of the four difference-map colours.
inline ConfusionCounts tally_difference_map(const Image& diff) {
    ConfusionCounts c;
    for (std::size_t k = 0; k < diff.pixels(); ++k) {
        const std::uint8_t r = diff.data[3 * k], g = diff.data[3 * k + 1], b = diff.data[3 * k + 2];
        if (r == 255 && g == 255 && b == 255) ++c.tp;
        else if (r == 0 && g == 0 && b == 255) ++c.fp;
        else if (r == 255 && g == 255 && b == 0) ++c.fn;
        else if (r == 0 && g == 0 && b == 0) ++c.tn;
        else throw DataError("difference map contains a colour outside the palette");
    }
    return c;
}

enum class FovPolicy { automatic, on, off };

inline FovPolicy parse_fov_policy(const std::string& s) {
    if (s == "auto") return FovPolicy::automatic;
    if (s == "on") return FovPolicy::on;
    if (s == "off") return FovPolicy::off;
    throw ConfigError("fov must be one of auto, on, off (got '" + s + "')");
}

struct EvalSetting {
    std::string train_dataset;
    std::string test_dataset;
    std::string ablation;
    std::size_t n_labelled = 0;
    std::string network = "student";
    std::size_t stride = 32;
    double threshold = 0.5;
    bool fov_used = false;
};

struct ImageResult {
    std::string name;
    ConfusionCounts counts;
    Metrics metrics;
};

/// Pooled metrics are computed from summed counts; per-image means skip
/// null entries.
struct MetricsReport {
    static constexpr int kSchemaVersion = 1;

    EvalSetting setting;
    std::vector<ImageResult> per_image;
    ConfusionCounts pooled_counts;
    Metrics pooled;
    Metrics per_image_mean;
};

inline MetricsReport build_report(EvalSetting setting, std::vector<ImageResult> images) {
    if (images.empty()) throw ConfigError("report needs at least one evaluated image");
    MetricsReport r;
    r.setting = std::move(setting);
    r.per_image = std::move(images);
    for (const auto& im : r.per_image) r.pooled_counts += im.counts;
    r.pooled = metrics(r.pooled_counts);
    double acc = 0, sp = 0, se = 0;
    std::size_t n_sp = 0, n_se = 0;
    for (const auto& im : r.per_image) {
        acc += im.metrics.acc;
        if (im.metrics.sp) sp += *im.metrics.sp, ++n_sp;
        if (im.metrics.se) se += *im.metrics.se, ++n_se;
    }
    r.per_image_mean.acc = acc / static_cast<double>(r.per_image.size());
    if (n_sp) r.per_image_mean.sp = sp / static_cast<double>(n_sp);
    if (n_se) r.per_image_mean.se = se / static_cast<double>(n_se);
    return r;
}

inline nlohmann::json to_json(const Metrics& m) {
    auto opt = [](std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"acc", m.acc}, {"sp", opt(m.sp)}, {"se", opt(m.se)}};
}

inline Metrics metrics_from_json(const nlohmann::json& j) {
    Metrics m;
    m.acc = j.at("acc").get<double>();
    if (!j.at("sp").is_null()) m.sp = j.at("sp").get<double>();
    if (!j.at("se").is_null()) m.se = j.at("se").get<double>();
    return m;
}

inline nlohmann::json to_json(const ConfusionCounts& c) {
    return {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}

inline ConfusionCounts counts_from_json(const nlohmann::json& j) {
    return {j.at("tp").get<std::uint64_t>(), j.at("fp").get<std::uint64_t>(), j.at("tn").get<std::uint64_t>(),
            j.at("fn").get<std::uint64_t>()};
}

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json images = nlohmann::json::array();
    for (const auto& im : r.per_image) {
        images.push_back({{"name", im.name}, {"counts", to_json(im.counts)}, {"metrics", to_json(im.metrics)}});
    }
    const auto& s = r.setting;
    return {{"schema_version", MetricsReport::kSchemaVersion},
            {"setting",
             {{"train_dataset", s.train_dataset},
              {"test_dataset", s.test_dataset},
              {"ablation", s.ablation},
              {"n_labelled", s.n_labelled},
              {"network", s.network},
              {"stride", s.stride},
              {"threshold", s.threshold},
              {"stitching", "posterior-average"},
              {"region", s.fov_used ? "fov" : "full-frame"}}},
            {"pooled", {{"counts", to_json(r.pooled_counts)}, {"metrics", to_json(r.pooled)}}},
            {"per_image_mean", to_json(r.per_image_mean)},
            {"per_image", images}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    if (j.at("schema_version").get<int>() != MetricsReport::kSchemaVersion) {
        throw DataError("unsupported report schema version");
    }
    MetricsReport r;
    const auto& s = j.at("setting");
    r.setting.train_dataset = s.at("train_dataset").get<std::string>();
    r.setting.test_dataset = s.at("test_dataset").get<std::string>();
    r.setting.ablation = s.at("ablation").get<std::string>();
    r.setting.n_labelled = s.at("n_labelled").get<std::size_t>();
    r.setting.network = s.at("network").get<std::string>();
    r.setting.stride = s.at("stride").get<std::size_t>();
    r.setting.threshold = s.at("threshold").get<double>();
    r.setting.fov_used = s.at("region").get<std::string>() == "fov";
    r.pooled_counts = counts_from_json(j.at("pooled").at("counts"));
    r.pooled = metrics_from_json(j.at("pooled").at("metrics"));
    r.per_image_mean = metrics_from_json(j.at("per_image_mean"));
    for (const auto& im : j.at("per_image")) {
        r.per_image.push_back({im.at("name").get<std::string>(), counts_from_json(im.at("counts")),
                               metrics_from_json(im.at("metrics"))});
    }
    return r;
}

/// Human-readable table, Acc / Sp / Se in percent.
inline std::string format_table(const MetricsReport& r) {
    std::ostringstream os;
    os << "test set: " << r.setting.test_dataset << "  (region: " << (r.setting.fov_used ? "FOV" : "full frame")
       << ", network: " << r.setting.network << ", stride " << r.setting.stride << ", threshold " << r.setting.threshold
       << ")\n";
    os << "Acc / Sp / Se (%)\n";
    std::size_t w = 16;  // fits "per-image mean"
    for (const auto& im : r.per_image) w = std::max(w, im.name.size() + 2);
    auto row = [&](const std::string& label, const Metrics& m) {
        os << label << std::string(w - std::min(w, label.size()), ' ') << format_row(m) << '\n';
    };
    for (const auto& im : r.per_image) row(im.name, im.metrics);
    row("pooled", r.pooled);
    row("per-image mean", r.per_image_mean);
    return os.str();
}

/// Writes `report.json` and `report.txt` into `dir`.
inline void emit_report(const MetricsReport& r, const std::filesystem::path& dir) {
    if (r.per_image.empty()) throw ConfigError("report needs at least one evaluated image");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    auto write = [](const std::filesystem::path& p, const std::string& text) {
        std::ofstream os(p);
        if (!os) throw IoError("cannot write " + p.string());
        os << text;
        if (!os) throw IoError("write failed for " + p.string());
    };
    write(dir / "report.json", to_json(r).dump(2) + "\n");
    write(dir / "report.txt", format_table(r));
}

/// Store a probability map as 16-bit PNG (0..65535).
inline void write_probability_map(const std::filesystem::path& path, const ProbabilityMap& p) {
    std::vector<std::uint16_t> v(p.values.size());
    for (std::size_t k = 0; k < v.size(); ++k) {
        v[k] = static_cast<std::uint16_t>(std::lround(std::clamp(p.values[k], 0.0, 1.0) * 65535.0));
    }
    write_png16(path, p.height, p.width, v);
}

struct EvalOptions {
    std::size_t stride = 32;
    double threshold = 0.5;
    FovPolicy fov = FovPolicy::automatic;
    std::optional<std::filesystem::path> output_dir;  // per-image maps when set
};

/// Evaluate `net` on images `which` of `index` (all when empty).
template <typename T>
std::vector<ImageResult> evaluate_images(const UNet<T>& net, const DatasetIndex& index,
                                         const std::vector<std::size_t>& which, const EvalOptions& opt,
                                         bool* fov_used = nullptr) {
    if (!index.has_masks()) throw DataError("evaluation needs ground-truth masks for " + index.name);
    const bool use_fov = opt.fov == FovPolicy::on || (opt.fov == FovPolicy::automatic && index.has_fov());
    if (use_fov && !index.has_fov()) throw DataError("--fov=on but " + index.name + " has no FOV masks");
    if (fov_used) *fov_used = use_fov;
    std::vector<std::size_t> ids = which;
    if (ids.empty()) {
        ids.resize(index.size());
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    }
    std::vector<ImageResult> out;
    for (auto id : ids) {
        const auto pred = predict_full_image(net, index.images[id], opt.stride, opt.threshold);
        const auto counts = confusion_counts(pred.mask, index.masks[id], use_fov ? &index.fovs[id] : nullptr);
        std::string name = id < index.image_paths.size() ? index.image_paths[id].stem().string()
                                                         : index.name + "_" + std::to_string(id);
        if (opt.output_dir) {
            write_probability_map(*opt.output_dir / "prob" / (name + ".png"), pred.probability);
            write_mask(*opt.output_dir / "mask" / (name + ".png"), pred.mask);
            write_image(*opt.output_dir / "diff" / (name + ".png"), difference_map(pred.mask, index.masks[id]));
        }
        out.push_back({name, counts, metrics(counts)});
    }
    return out;
}

struct SweepPoint {
    double threshold;
    ConfusionCounts counts;
    Metrics metrics;
};

/// Pooled metrics across thresholds for precomputed probability maps.
inline std::vector<SweepPoint> threshold_sweep(const std::vector<ProbabilityMap>& maps,
                                               const std::vector<const BinaryMask*>& gts,
                                               const std::vector<const BinaryMask*>& fovs,
                                               const std::vector<double>& thresholds) {
    std::vector<SweepPoint> out;
    for (double t : thresholds) {
        ConfusionCounts c;
        for (std::size_t i = 0; i < maps.size(); ++i) {
            c += confusion_counts(threshold_map(maps[i], t), *gts[i], i < fovs.size() ? fovs[i] : nullptr);
        }
        out.push_back({t, c, metrics(c)});
    }
    return out;
}

}  // namespace leakgan

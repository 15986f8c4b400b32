#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "leakgan/data.hpp"
#include "leakgan/error.hpp"
#include "leakgan/image_io.hpp"
#include "leakgan/rng.hpp"

namespace leakgan {

/// Parameters of the synthetic vessel generator. Intensities are in 8-bit units.
struct SynthParams {
    std::size_t height = 128;
    std::size_t width = 128;
    std::size_t depth = 3;       // branching generations; 1 = a single curve
    double width_min = 1.0;      // vessel diameter range in pixels
    double width_max = 4.0;
    double background = 150.0;
    double contrast = -70.0;     // vessel minus background; negative = dark vessels
    double texture = 12.0;       // amplitude of low-frequency background variation
    double noise = 6.0;          // std of additive pixel noise
    double intensity_shift = 0.0;

    void validate() const {
        if (height < 64 || width < 64) throw ConfigError("synthetic canvas must be at least 64x64");
        if (depth < 1) throw ConfigError("synthetic branch depth must be >= 1");
        if (width_min < 1.0 || width_max < width_min) {
            throw ConfigError("synthetic vessel width range must satisfy 1 <= min <= max");
        }
        if (noise < 0.0 || texture < 0.0) throw ConfigError("synthetic noise and texture must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const SynthParams& p) {
    j = {{"height", p.height},       {"width", p.width},           {"depth", p.depth},
         {"width_min", p.width_min}, {"width_max", p.width_max},   {"background", p.background},
         {"contrast", p.contrast},   {"texture", p.texture},       {"noise", p.noise},
         {"intensity_shift", p.intensity_shift}};
}

inline void from_json(const nlohmann::json& j, SynthParams& p) {
    for (const auto& [key, value] : j.items()) {
        if (key == "height") p.height = value.get<std::size_t>();
        else if (key == "width") p.width = value.get<std::size_t>();
        else if (key == "depth") p.depth = value.get<std::size_t>();
        else if (key == "width_min") p.width_min = value.get<double>();
        else if (key == "width_max") p.width_max = value.get<double>();
        else if (key == "background") p.background = value.get<double>();
        else if (key == "contrast") p.contrast = value.get<double>();
        else if (key == "texture") p.texture = value.get<double>();
        else if (key == "noise") p.noise = value.get<double>();
        else if (key == "intensity_shift") p.intensity_shift = value.get<double>();
        else throw ConfigError("unknown synthetic parameter '" + key + "'");
    }
}

struct SynthSample {
    Image image;
    BinaryMask mask;
};

namespace detail {

struct VesselSeed {
    double y, x, angle, diameter, length;
    std::size_t generation;
};

/// Stamp a disc of the given diameter centred on the pixel nearest (y, x).
inline void stamp(BinaryMask& m, double y, double x, double diameter) {
    const long cy = std::lround(y), cx = std::lround(x);
    const double r2 = 0.25 * diameter * diameter;
    const long reach = static_cast<long>(std::ceil(diameter / 2.0));
    for (long dy = -reach; dy <= reach; ++dy) {
        for (long dx = -reach; dx <= reach; ++dx) {
            if (static_cast<double>(dy * dy + dx * dx) > r2) continue;
            const long py = cy + dy, px = cx + dx;
            if (py < 0 || px < 0 || py >= static_cast<long>(m.height) || px >= static_cast<long>(m.width)) continue;
            m.at(static_cast<std::size_t>(py), static_cast<std::size_t>(px)) = 1;
        }
    }
}

inline double heading(const std::vector<std::pair<double, double>>& path, std::size_t at) {
    const std::size_t a = at == 0 ? 0 : at - 1, b = std::min(at + 1, path.size() - 1);
    return std::atan2(path[b].first - path[a].first, path[b].second - path[a].second);
}

}  // namespace detail

/// Random branching vessel tree rendered exactly into the mask, then
/// composited (with a one-pixel soft rim) onto a textured, noisy background.
inline SynthSample synth_vessel_image(const SynthParams& params, std::uint64_t seed) {
    params.validate();
    Engine rng(derive_seed(seed, {stream::synth}));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double H = static_cast<double>(params.height), W = static_cast<double>(params.width);

    SynthSample out{Image(params.height, params.width, 1), BinaryMask(params.height, params.width)};

    // Root enters from a random border point, heading roughly at the centre.
    const double t = unit(rng);
    double y0 = 0, x0 = 0;
    switch (std::uniform_int_distribution<int>(0, 3)(rng)) {
        case 0: y0 = 0; x0 = t * (W - 1); break;
        case 1: y0 = H - 1; x0 = t * (W - 1); break;
        case 2: y0 = t * (H - 1); x0 = 0; break;
        default: y0 = t * (H - 1); x0 = W - 1; break;
    }
    const double to_centre = std::atan2(H / 2 - y0, W / 2 - x0);
    std::vector<detail::VesselSeed> pending{
        {y0, x0, to_centre + 0.4 * (unit(rng) - 0.5), params.width_max, 1.2 * std::max(H, W), 1}};

    constexpr double kStep = 0.5;
    while (!pending.empty()) {
        const auto v = pending.back();
        pending.pop_back();
        std::vector<std::pair<double, double>> path;
        double y = v.y, x = v.x, angle = v.angle;
        for (double walked = 0; walked < v.length; walked += kStep) {
            if (y < -0.5 || x < -0.5 || y > H - 0.5 || x > W - 0.5) break;
            detail::stamp(out.mask, y, x, v.diameter);
            path.emplace_back(y, x);
            angle += 0.03 * gauss(rng);
            y += kStep * std::sin(angle);
            x += kStep * std::cos(angle);
        }
        if (v.generation >= params.depth || path.size() < 8) continue;
        const double child_d = params.width_min + 0.6 * (v.diameter - params.width_min);
        for (int side : {-1, 1}) {
            const auto at = static_cast<std::size_t>((0.2 + 0.6 * unit(rng)) * static_cast<double>(path.size() - 1));
            const double turn = side * (0.4 + 0.6 * unit(rng));
            pending.push_back({path[at].first, path[at].second, detail::heading(path, at) + turn, child_d, 0.6 * v.length,
                               v.generation + 1});
        }
    }

    // Smooth, low-frequency background texture.
    struct Wave {
        double fy, fx, phase;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < 3; ++k) {
        waves.push_back({(0.5 + 2.0 * unit(rng)) / H, (0.5 + 2.0 * unit(rng)) / W, 2 * std::numbers::pi * unit(rng)});
    }

    for (std::size_t py = 0; py < params.height; ++py) {
        for (std::size_t px = 0; px < params.width; ++px) {
            double bg = params.background;
            for (const auto& w : waves) {
                bg += params.texture / 3.0 *
                      std::cos(2 * std::numbers::pi * (w.fy * static_cast<double>(py) + w.fx * static_cast<double>(px)) +
                               w.phase);
            }
            double fg = out.mask.at(py, px);
            if (fg == 0.0) {
                int hits = 0;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const long qy = static_cast<long>(py) + dy, qx = static_cast<long>(px) + dx;
                        if (qy < 0 || qx < 0 || qy >= static_cast<long>(params.height) ||
                            qx >= static_cast<long>(params.width))
                            continue;
                        hits += out.mask.at(static_cast<std::size_t>(qy), static_cast<std::size_t>(qx));
                    }
                }
                fg = 0.5 * hits / 9.0;
            }
            double v = bg + params.contrast * fg + params.intensity_shift;
            if (params.noise > 0) v += params.noise * gauss(rng);
            out.image.at(py, px) = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
        }
    }
    return out;
}

/// In-memory synthetic dataset of `count` images with masks.
inline DatasetIndex make_synthetic_index(const SynthParams& params, std::size_t count, std::uint64_t seed,
                                         std::string name = "synthetic") {
    if (count < 1) throw ConfigError("synthetic corpus needs at least one image");
    DatasetIndex idx;
    idx.name = std::move(name);
    idx.resolution = {params.height, params.width};
    for (std::size_t i = 0; i < count; ++i) {
        auto s = synth_vessel_image(params, derive_seed(seed, {stream::synth, i}));
        idx.images.push_back(std::move(s.image));
        idx.masks.push_back(std::move(s.mask));
    }
    return idx;
}

/// Writes images/, masks/ and manifest.json under `dir`; loadable with the
/// synthetic layout.
inline void write_synthetic_corpus(const std::filesystem::path& dir, const SynthParams& params, std::size_t count,
                                   std::uint64_t seed) {
    if (count < 1) throw ConfigError("synthetic corpus needs at least one image");
    nlohmann::json manifest{{"layout", "synthetic"}, {"seed", seed}, {"params", params}, {"entries", nlohmann::json::array()}};
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t s = derive_seed(seed, {stream::synth, i});
        const auto sample = synth_vessel_image(params, s);
        char name[32];
        std::snprintf(name, sizeof name, "syn_%04zu.png", i);
        write_image(dir / "images" / name, sample.image);
        write_mask(dir / "masks" / name, sample.mask);
        manifest["entries"].push_back({{"image", std::string("images/") + name},
                                       {"mask", std::string("masks/") + name},
                                       {"seed", s},
                                       {"params", params}});
    }
    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
    os << manifest.dump(2) << '\n';
}

}  // namespace leakgan

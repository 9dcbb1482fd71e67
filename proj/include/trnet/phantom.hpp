#pragma once

#include "trnet/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace trnet {

enum class PlaqueKind { calcified, non_calcified };
enum class PlaqueProfile { rectangular, smooth };

struct PlaqueSpec {
    Index start = 0;          // first centerline voxel covered
    Index length = 0;         // voxels along the centerline
    double max_narrowing = 0; // peak lumen-radius reduction, fraction in [0,1]
    PlaqueKind kind = PlaqueKind::non_calcified;
    PlaqueProfile profile = PlaqueProfile::rectangular;
};

struct PhantomConfig {
    Index centerline_length = 150;
    Index cross_section_size = 31;   // odd, so a central axis voxel exists
    double lumen_radius = 6.0;
    double lumen_intensity = 350.0;
    double wall_intensity = 50.0;
    double background_intensity = -50.0;
    double calcified_intensity = 900.0;
    double noise_std = 0.0;
    std::vector<PlaqueSpec> plaques;
    std::uint64_t seed = 0;
    std::string id;  // optional centerline identifier
};

/// Straightened vessel with exact ground truth along the central axis.
template <class S>
struct MPRImage {
    Volume<S> intensities;               // (centerline_length, S, S)
    std::vector<double> narrowing;       // per centerline voxel, in [0,1]
    std::vector<std::uint8_t> labels;    // narrowing > 0.5
    S background = S(0);                 // pad value for cube extraction
    std::string id;

    Index centerline_length() const { return intensities.n0; }
    Index cross_section_size() const { return intensities.n1; }
    Index axis_center() const { return intensities.n1 / 2; }
};

inline std::uint8_t narrowing_to_label(double narrowing) {
    if (!(narrowing >= 0.0 && narrowing <= 1.0))
        throw std::domain_error("narrowing_to_label: narrowing must lie in [0,1], got " +
                                std::to_string(narrowing));
    return narrowing > 0.5 ? 1 : 0;
}

inline void validate(const PhantomConfig& cfg) {
    if (cfg.centerline_length < 1)
        throw config_error("phantom: centerline_length must be >= 1");
    if (cfg.cross_section_size % 2 == 0)
        throw config_error("phantom: cross_section_size must be odd");
    if (static_cast<double>(cfg.cross_section_size) < 2.0 * cfg.lumen_radius + 3.0)
        throw config_error("phantom: cross_section_size must be >= 2*lumen_radius+3");
    if (cfg.noise_std < 0.0)
        throw config_error("phantom: noise_std must be >= 0");
    for (std::size_t i = 0; i < cfg.plaques.size(); ++i) {
        const auto& p = cfg.plaques[i];
        if (p.start < 0 || p.length < 0 || p.start + p.length > cfg.centerline_length)
            throw config_error("phantom: plaque " + std::to_string(i) +
                               " span outside the centerline");
        if (p.max_narrowing < 0.0 || p.max_narrowing > 1.0)
            throw config_error("phantom: plaque " + std::to_string(i) +
                               " max_narrowing must lie in [0,1]");
    }
    for (std::size_t i = 0; i < cfg.plaques.size(); ++i)
        for (std::size_t j = i + 1; j < cfg.plaques.size(); ++j) {
            const auto& a = cfg.plaques[i];
            const auto& b = cfg.plaques[j];
            if (a.start < b.start + b.length && b.start < a.start + a.length)
                throw config_error("phantom: plaques " + std::to_string(i) + " and " +
                                   std::to_string(j) + " overlap (ambiguous ground truth)");
        }
}

/// Narrowing fraction contributed by one plaque at centerline voxel z.
inline double plaque_narrowing_at(const PlaqueSpec& p, Index z) {
    if (z < p.start || z >= p.start + p.length || p.length == 0) return 0.0;
    if (p.profile == PlaqueProfile::rectangular) return p.max_narrowing;
    // Raised-cosine taper: 0 at the span edges, peak in the middle.
    const double t = (static_cast<double>(z - p.start) + 0.5) / static_cast<double>(p.length);
    const double s = std::sin(M_PI * t);
    return p.max_narrowing * s * s;
}

template <class S = float>
MPRImage<S> generate_phantom(const PhantomConfig& cfg) {
    validate(cfg);

    MPRImage<S> img;
    img.id = cfg.id;
    img.background = static_cast<S>(cfg.background_intensity);
    img.intensities = Volume<S>(cfg.centerline_length, cfg.cross_section_size,
                                cfg.cross_section_size);
    img.narrowing.assign(static_cast<std::size_t>(cfg.centerline_length), 0.0);
    img.labels.assign(static_cast<std::size_t>(cfg.centerline_length), 0);

    std::vector<const PlaqueSpec*> plaque_at(static_cast<std::size_t>(cfg.centerline_length),
                                             nullptr);
    for (const auto& p : cfg.plaques)
        for (Index z = p.start; z < p.start + p.length; ++z) {
            img.narrowing[static_cast<std::size_t>(z)] = plaque_narrowing_at(p, z);
            plaque_at[static_cast<std::size_t>(z)] = &p;
        }
    for (Index z = 0; z < cfg.centerline_length; ++z)
        img.labels[static_cast<std::size_t>(z)] =
            narrowing_to_label(img.narrowing[static_cast<std::size_t>(z)]);

    std::mt19937_64 rng(cfg.seed);
    // Per-plaque intensity of non-calcified material, within +-8% of the wall.
    std::vector<double> plaque_intensity(cfg.plaques.size());
    {
        std::uniform_real_distribution<double> u(-0.08, 0.08);
        for (std::size_t i = 0; i < cfg.plaques.size(); ++i)
            plaque_intensity[i] = cfg.plaques[i].kind == PlaqueKind::calcified
                                      ? cfg.calcified_intensity
                                      : cfg.wall_intensity * (1.0 + u(rng));
    }

    const double c = static_cast<double>(cfg.cross_section_size / 2);
    const double wall_outer = cfg.lumen_radius + 2.0;
    for (Index z = 0; z < cfg.centerline_length; ++z) {
        const double r_eff =
            cfg.lumen_radius * (1.0 - img.narrowing[static_cast<std::size_t>(z)]);
        const PlaqueSpec* p = plaque_at[static_cast<std::size_t>(z)];
        double material = cfg.wall_intensity;
        if (p != nullptr)
            material = plaque_intensity[static_cast<std::size_t>(p - cfg.plaques.data())];
        for (Index y = 0; y < cfg.cross_section_size; ++y)
            for (Index x = 0; x < cfg.cross_section_size; ++x) {
                const double dy = static_cast<double>(y) - c;
                const double dx = static_cast<double>(x) - c;
                const double r = std::sqrt(dy * dy + dx * dx);
                double v;
                if (r <= r_eff)
                    v = cfg.lumen_intensity;
                else if (r <= cfg.lumen_radius && p != nullptr)
                    v = material;  // plaque fills the narrowed part of the lumen
                else if (r <= wall_outer)
                    v = cfg.wall_intensity;
                else
                    v = cfg.background_intensity;
                img.intensities.at(z, y, x) = static_cast<S>(v);
            }
    }

    if (cfg.noise_std > 0.0) {
        std::normal_distribution<double> n(0.0, cfg.noise_std);
        for (Index i = 0; i < img.intensities.size(); ++i)
            img.intensities.data[i] += static_cast<S>(n(rng));
    }
    return img;
}

template <class S = float>
std::vector<MPRImage<S>> generate_dataset(const std::vector<PhantomConfig>& configs,
                                          std::vector<std::string>* warnings = nullptr) {
    for (std::size_t i = 0; i < configs.size(); ++i)
        for (std::size_t j = i + 1; j < configs.size(); ++j)
            if (configs[i].seed == configs[j].seed && warnings != nullptr)
                warnings->push_back("duplicate seed " + std::to_string(configs[i].seed) +
                                    " in configs " + std::to_string(i) + " and " +
                                    std::to_string(j) + "; samples will be identical");
    std::vector<MPRImage<S>> out;
    out.reserve(configs.size());
    for (const auto& cfg : configs) out.push_back(generate_phantom<S>(cfg));
    return out;
}

}  // namespace trnet

#pragma once

#include "trnet/common.hpp"
#include "trnet/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace trnet {

struct SamplingConfig {
    Index stride = 5;
    Index cube_side = 29;       // N, odd
    Index max_seq_len = 30;     // L
    Index jitter_max = 3;       // voxels, single-axis
    bool rotate = true;
    bool balance_trim = true;
    Index trim_margin = 10;     // centers, not voxels
    double balance_target = 0.08;
    std::uint64_t seed = 0;
};

inline void validate(const SamplingConfig& cfg) {
    if (cfg.stride < 1) throw config_error("sampling: stride must be >= 1");
    if (cfg.cube_side < 3 || cfg.cube_side % 2 == 0)
        throw config_error("sampling: cube_side must be odd and >= 3");
    if (cfg.max_seq_len < 1) throw config_error("sampling: max_seq_len must be >= 1");
    if (cfg.jitter_max < 0) throw config_error("sampling: jitter_max must be >= 0");
}

/// One model input unit: ordered cubes along a centerline with aligned labels.
template <class S>
struct VolumeSequence {
    std::vector<Volume<S>> cubes;            // each cube_side^3
    std::vector<Index> center_indices;       // strictly increasing centerline positions
    std::vector<std::uint8_t> labels;        // from the un-jittered centerline voxels
    std::string source_id;

    Index length() const { return static_cast<Index>(cubes.size()); }
};

inline std::vector<Index> select_centers(Index centerline_length, Index stride) {
    if (stride < 1) throw config_error("select_centers: stride must be >= 1");
    std::vector<Index> centers;
    for (Index z = 0; z < centerline_length; z += stride) centers.push_back(z);
    return centers;
}

template <class S>
std::vector<Index> select_centers(const MPRImage<S>& image, Index stride) {
    return select_centers(image.centerline_length(), stride);
}

struct Voxel {
    Index z = 0, y = 0, x = 0;
};

/// Cube of side N centered at `center`; voxels outside the image are pad_value.
template <class S>
Volume<S> extract_cube(const Volume<S>& image, Voxel center, Index side, S pad_value) {
    if (side % 2 == 0)
        throw config_error("extract_cube: cube side must be odd, got " + std::to_string(side));
    const Index h = side / 2;
    Volume<S> cube(side, side, side);
    for (Index i = 0; i < side; ++i) {
        const Index z = center.z - h + i;
        if (z < 0 || z >= image.n0) {
            cube.data.segment(i * side * side, side * side).setConstant(pad_value);
            continue;
        }
        for (Index j = 0; j < side; ++j) {
            const Index y = center.y - h + j;
            for (Index k = 0; k < side; ++k) {
                const Index x = center.x - h + k;
                cube.at(i, j, k) = (y < 0 || y >= image.n1 || x < 0 || x >= image.n2)
                                       ? pad_value
                                       : image.at(z, y, x);
            }
        }
    }
    return cube;
}

template <class S>
Volume<S> extract_cube(const MPRImage<S>& image, Voxel center, Index side) {
    return extract_cube(image.intensities, center, side, image.background);
}

/// Random displacement of up to jitter_max voxels along one of the 6 axis
/// directions, clamped to the image bounds.
template <class Rng>
Voxel jitter_center(Voxel center, Index jitter_max, Rng& rng, Index n0, Index n1, Index n2) {
    if (jitter_max == 0) return center;
    std::uniform_int_distribution<int> dir(0, 5);
    std::uniform_int_distribution<Index> mag(0, jitter_max);
    const int d = dir(rng);
    const Index m = mag(rng);
    Voxel out = center;
    switch (d) {
        case 0: out.z += m; break;
        case 1: out.z -= m; break;
        case 2: out.y += m; break;
        case 3: out.y -= m; break;
        case 4: out.x += m; break;
        case 5: out.x -= m; break;
    }
    out.z = std::clamp<Index>(out.z, 0, n0 - 1);
    out.y = std::clamp<Index>(out.y, 0, n1 - 1);
    out.x = std::clamp<Index>(out.x, 0, n2 - 1);
    return out;
}

/// Rotates every cross-sectional slice (plane perpendicular to axis 0) by the
/// same angle about the cube's central axis. Bilinear interpolation; source
/// coordinates clamped to the slice edge.
template <class S>
Volume<S> rotate_cube(const Volume<S>& cube, double angle_rad) {
    const Index n = cube.n1;
    Volume<S> out(cube.n0, cube.n1, cube.n2);
    const double c = static_cast<double>(n - 1) / 2.0;
    const double ca = std::cos(angle_rad);
    const double sa = std::sin(angle_rad);
    for (Index z = 0; z < cube.n0; ++z)
        for (Index j = 0; j < n; ++j)
            for (Index k = 0; k < cube.n2; ++k) {
                // inverse rotation of the destination point
                const double dy = static_cast<double>(j) - c;
                const double dx = static_cast<double>(k) - c;
                double sy = c + ca * dy + sa * dx;
                double sx = c - sa * dy + ca * dx;
                sy = std::clamp(sy, 0.0, static_cast<double>(n - 1));
                sx = std::clamp(sx, 0.0, static_cast<double>(cube.n2 - 1));
                const Index y0 = static_cast<Index>(std::floor(sy));
                const Index x0 = static_cast<Index>(std::floor(sx));
                const Index y1 = std::min<Index>(y0 + 1, n - 1);
                const Index x1 = std::min<Index>(x0 + 1, cube.n2 - 1);
                const double ty = sy - static_cast<double>(y0);
                const double tx = sx - static_cast<double>(x0);
                const double v =
                    (1 - ty) * ((1 - tx) * cube.at(z, y0, x0) + tx * cube.at(z, y0, x1)) +
                    ty * ((1 - tx) * cube.at(z, y1, x0) + tx * cube.at(z, y1, x1));
                out.at(z, j, k) = static_cast<S>(v);
            }
    return out;
}

template <class Rng>
double draw_rotation_angle(Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 2.0 * M_PI);
    return u(rng);
}

/// Balance trimming: greedily drops the center farthest (in centers) from any
/// significant center, among those at least trim_margin away, until the
/// positive fraction reaches the target. Centerlines without any significant
/// center are left untouched.
inline std::vector<Index> trim_centers(const std::vector<Index>& centers,
                                       const std::vector<std::uint8_t>& labels,
                                       Index trim_margin, double target) {
    const std::size_t n = centers.size();
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < n; ++i)
        if (labels[i]) pos.push_back(i);
    if (pos.empty() || n == 0) {
        std::vector<Index> keep(centers);
        return keep;
    }
    std::vector<Index> dist(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        Index best = std::numeric_limits<Index>::max();
        for (std::size_t p : pos)
            best = std::min<Index>(best, std::abs(static_cast<Index>(i) - static_cast<Index>(p)));
        dist[i] = best;
    }
    std::vector<bool> kept(n, true);
    std::size_t n_kept = n;
    const auto fraction = [&] {
        return static_cast<double>(pos.size()) / static_cast<double>(n_kept);
    };
    while (fraction() < target) {
        std::size_t victim = n;
        Index best = trim_margin - 1;
        for (std::size_t i = 0; i < n; ++i)
            if (kept[i] && !labels[i] && dist[i] >= trim_margin && dist[i] >= best) {
                best = dist[i];
                victim = i;  // ties resolve to the largest index
            }
        if (victim == n) break;
        kept[victim] = false;
        --n_kept;
    }
    std::vector<Index> out;
    for (std::size_t i = 0; i < n; ++i)
        if (kept[i]) out.push_back(centers[i]);
    return out;
}

/// Full sampling procedure: stride selection, optional balance trimming,
/// optional jitter/rotation augmentation, order-preserving chunking into
/// sequences of length <= max_seq_len. Labels always come from the original
/// un-jittered centerline voxels.
template <class S>
std::vector<VolumeSequence<S>> build_sequences(const MPRImage<S>& image,
                                               const SamplingConfig& cfg) {
    validate(cfg);
    std::vector<VolumeSequence<S>> out;
    if (image.centerline_length() < 1) return out;

    std::vector<Index> centers = select_centers(image, cfg.stride);
    std::vector<std::uint8_t> labels;
    labels.reserve(centers.size());
    for (Index z : centers) labels.push_back(image.labels[static_cast<std::size_t>(z)]);

    if (cfg.balance_trim) {
        centers = trim_centers(centers, labels, cfg.trim_margin, cfg.balance_target);
        labels.clear();
        for (Index z : centers) labels.push_back(image.labels[static_cast<std::size_t>(z)]);
    }

    std::mt19937_64 rng(cfg.seed);
    const Index axis = image.axis_center();
    const bool jitter = cfg.jitter_max > 0;

    VolumeSequence<S> seq;
    seq.source_id = image.id;
    for (std::size_t i = 0; i < centers.size(); ++i) {
        Voxel center{centers[i], axis, axis};
        if (jitter)
            center = jitter_center(center, cfg.jitter_max, rng, image.intensities.n0,
                                   image.intensities.n1, image.intensities.n2);
        Volume<S> cube = extract_cube(image, center, cfg.cube_side);
        if (cfg.rotate) cube = rotate_cube(cube, draw_rotation_angle(rng));
        seq.cubes.push_back(std::move(cube));
        seq.center_indices.push_back(centers[i]);
        seq.labels.push_back(labels[i]);
        if (seq.length() == cfg.max_seq_len) {
            out.push_back(std::move(seq));
            seq = VolumeSequence<S>{};
            seq.source_id = image.id;
        }
    }
    if (seq.length() > 0) out.push_back(std::move(seq));
    return out;
}

}  // namespace trnet

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace trnet {

template <class S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

/// Invalid configuration (maps to CLI exit code 2).
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Failure at run time: divergence, bad files, incompatible shapes.
class runtime_failure : public std::runtime_error {
public:
    explicit runtime_failure(const std::string& msg) : std::runtime_error(msg) {}
};

/// splitmix64 step; used to derive independent seeds from a root seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Deterministic sub-seed: stream `index` of root seed `root`.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
    std::uint64_t s = root ^ (0xa076'1d64'78bd'642full * (index + 1));
    return splitmix64(s);
}

/// Dense 3D grid, row-major over (n0, n1, n2). Axis 0 is the centerline axis.
template <class S>
struct Volume {
    Index n0 = 0, n1 = 0, n2 = 0;
    VectorX<S> data;

    Volume() = default;
    Volume(Index a, Index b, Index c) : n0(a), n1(b), n2(c), data(VectorX<S>::Zero(a * b * c)) {}

    Index size() const { return n0 * n1 * n2; }
    S& at(Index i, Index j, Index k) { return data[(i * n1 + j) * n2 + k]; }
    const S& at(Index i, Index j, Index k) const { return data[(i * n1 + j) * n2 + k]; }
};

}  // namespace trnet

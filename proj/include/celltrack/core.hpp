#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace celltrack {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using PointCloud = std::vector<Vec3>;

// Error taxonomy. The CLI maps each family to a distinct exit code.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Bad argument to an operation (k out of range, empty cloud, ...).
struct ArgumentError : Error {
    using Error::Error;
};
// Malformed on-disk data (sidecar mismatch, truncated payload, ...).
struct FormatError : Error {
    using Error::Error;
};
// Invalid configuration value or combination.
struct ConfigError : Error {
    using Error::Error;
};
// Required model checkpoint absent or unreadable.
struct CheckpointError : ConfigError {
    using ConfigError::ConfigError;
};
// Tensor shape mismatch; message names the offending primitive.
struct DimensionError : ArgumentError {
    using ArgumentError::ArgumentError;
};
// Training aborted (non-finite loss or gradient).
struct TrainingError : Error {
    using Error::Error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent, reproducible RNG stream derived from a master seed.
// Streams with distinct tags are decorrelated regardless of call order.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag) {
    return splitmix64(splitmix64(master) ^ splitmix64(tag ^ 0xa5a5a5a5a5a5a5a5ULL));
}
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag_a, std::uint64_t tag_b) {
    return derive_seed(derive_seed(master, tag_a), tag_b);
}

// Deterministic choice of m distinct indices out of n (partial Fisher-Yates),
// independent of the standard library's std::sample implementation.
template <typename Rng>
std::vector<std::uint32_t> sample_indices(std::uint32_t n, std::uint32_t m, Rng& rng) {
    if (m > n) throw ArgumentError("sample_indices: m > n");
    std::vector<std::uint32_t> idx(n);
    for (std::uint32_t i = 0; i < n; ++i) idx[i] = i;
    for (std::uint32_t i = 0; i < m; ++i) {
        const std::uint32_t j = i + static_cast<std::uint32_t>(rng() % (n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    return idx;
}

}  // namespace celltrack

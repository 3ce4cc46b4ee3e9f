#pragma once

#include <cstdint>
#include <string>

namespace dfd {

/// CPU model, logical core count and Eigen SIMD set, e.g.
/// "Intel Xeon ... | 1 logical cores | AVX512".
std::string hardware_descriptor();

/// Source revision the library was built from, or "unknown".
std::string git_hash();

/// splitmix64 finalizer; combines seeds into independent stream seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace dfd

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace trajdistill {

using Rng = std::mt19937_64;

/// Seed for a named substream of `root`. Streams with different names or
/// indices are decorrelated, so e.g. eval seeds never perturb distillation.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t root, std::string_view stream, std::uint64_t index = 0) {
  return Rng(derive_seed(root, stream, index));
}

}  // namespace trajdistill

#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace vimq {

/// Comparison of a test vector against a reference (accumulated in double).
struct ErrorStats {
  double max_abs = 0.0;
  double relative = 0.0;  // ||a - ref||_2 / ||ref||_2 (0 when both are zero)
  double cosine = 1.0;
};

ErrorStats compare(std::span<const float> a, std::span<const float> ref);
double cosine_similarity(std::span<const float> a, std::span<const float> b);
double relative_error(std::span<const float> a, std::span<const float> ref);

/// FNV-1a over the raw little-endian bytes, as 16 hex digits.
std::string hash_floats(std::span<const float> v);
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ull);

}  // namespace vimq

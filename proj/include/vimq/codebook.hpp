#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace vimq {

/// Exponent pair for one APoT level: level = 2^-coarse_k + 2^-fine_k, where an
/// exponent of 0 marks an absent term.
struct ShiftPair {
  int coarse_k = 0;
  int fine_k = 0;
  bool operator==(const ShiftPair&) const = default;
};

/// Additive power-of-two level set {c + f | c in coarse basis, f in fine basis}.
/// Each basis implicitly contains 0. Weight codes are sign-magnitude:
/// bit `magnitude_bits` is the sign (1 = negative), the low bits index `levels`.
struct ApotCodebook {
  std::vector<int> coarse_exponents;
  std::vector<int> fine_exponents;
  std::vector<double> levels;  // ascending, levels[0] == 0
  std::vector<ShiftPair> shifts;
  int magnitude_bits = 0;

  int code_bits() const { return magnitude_bits + 1; }
  std::size_t size() const { return levels.size(); }
  int max_exponent() const;
  double max_level() const { return levels.back(); }

  std::uint8_t encode(bool negative, std::size_t index) const {
    return static_cast<std::uint8_t>((negative ? 1u : 0u) << magnitude_bits | index);
  }
  std::size_t magnitude_index(std::uint8_t code) const { return code & ((1u << magnitude_bits) - 1); }
  bool is_negative(std::uint8_t code) const { return (code >> magnitude_bits) & 1u; }
  /// Signed level value of a code; throws on codes outside the codebook.
  double value(std::uint8_t code) const;
};

/// Builds the level set. Rejects exponents < 1, colliding sums, and level
/// counts that are not a power of two.
ApotCodebook build_codebook(std::span<const int> coarse_exponents, std::span<const int> fine_exponents);

/// The 4-bit basis: coarse {2^-1, 2^-2, 2^-4}, fine {2^-3}.
ApotCodebook default_codebook();

/// Nested default bases for the bit-width sweep: 3 -> ({1},{3}),
/// 4 -> ({1,2,4},{3}), 5 -> ({1,2,4},{3,5,6}). Each is a subset of the next.
ApotCodebook codebook_for_bits(int weight_bits);

}  // namespace vimq

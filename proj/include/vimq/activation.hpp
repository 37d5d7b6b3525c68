#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace vimq {

enum class Activation : std::uint8_t { none = 0, relu = 1, silu = 2, softplus = 3 };

std::string_view activation_name(Activation a);
Activation parse_activation(std::string_view name);

/// Reference (float path) activation.
float activation_exact(Activation a, float x);

/// Half-domain table of d(|x|) = f(x) - ReLU(x) for functions whose offset
/// from ReLU is even (SiLU, SoftPlus). Entry k samples |x| = k * range / (E - 1).
struct ActOffsetLut {
  Activation fn = Activation::silu;
  float range = 8.0f;
  std::vector<float> entries;

  static ActOffsetLut build(Activation fn, std::size_t entry_count = 128, float range = 8.0f);
  /// d(|y|), linearly interpolated between neighbouring entries; clamps to the
  /// last entry for |y| >= range.
  float offset(float y) const;
};

/// ReLU(y) + d(|y|).
float apply_activation_lut(float y, const ActOffsetLut& lut);

/// Shared default tables (E = 128, R = 8).
const ActOffsetLut& default_offset_lut(Activation fn);

/// Activation as the quantized datapath applies it: identity and ReLU are
/// exact, SiLU and SoftPlus go through the offset table.
float activation_hw(Activation a, float y);

}  // namespace vimq

#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "vimq/codebook.hpp"
#include "vimq/common.hpp"

namespace vimq {

// ---------------------------------------------------------------------------
// Per-channel smoothing
// ---------------------------------------------------------------------------

struct SmoothingScales {
  std::vector<float> s;
  float alpha = 0.5f;
};

/// s_j = act_j^alpha / w_j^(1 - alpha); s_j = 1 when either max is zero.
SmoothingScales compute_smoothing(std::span<const float> act_absmax, std::span<const float> w_absmax,
                                  float alpha = 0.5f);

/// Per input channel max |W[:, j]| of a [out, in] weight.
std::vector<float> input_channel_absmax(const MatrixF& w);

/// Moves a smoothing vector between two adjacent [out, in] layers sharing
/// channel j: upstream output row j is divided by s_j and downstream input
/// column j multiplied by s_j.
std::pair<MatrixF, MatrixF> fuse_smoothing(const MatrixF& upstream, const MatrixF& downstream,
                                           const SmoothingScales& s);

/// Individual halves of fuse_smoothing, for layers whose partner is not a
/// plain matrix (norm affine, bias vectors, depthwise conv).
void divide_rows(MatrixF& w, std::span<const float> s, std::size_t row_offset = 0);
void multiply_columns(MatrixF& w, std::span<const float> s);

// ---------------------------------------------------------------------------
// APoT weight quantization
// ---------------------------------------------------------------------------

struct QuantizedWeights {
  CodeMatrix codes;           // [out, in], sign-magnitude codes
  std::vector<float> scales;  // one per block of `block_size` flattened weights
  std::uint32_t block_size = 32;

  std::size_t block_of(std::size_t row, std::size_t col) const { return (row * codes.cols + col) / block_size; }
};

/// Per-block scale = block absmax (1.0 for an all-zero block); each
/// normalised magnitude, clamped to [0, 1], snaps to the nearest level with
/// ties going to the smaller level. Zero is encoded with a positive sign.
QuantizedWeights quantize_weights(const MatrixF& w, std::uint32_t block_size, const ApotCodebook& codebook);

MatrixF dequantize_weights(const QuantizedWeights& qw, const ApotCodebook& codebook);

// ---------------------------------------------------------------------------
// INT8 activation quantization
// ---------------------------------------------------------------------------

struct TokenQuant {
  std::vector<std::int8_t> q;
  float scale = 1.0f;
};

/// scale = absmax / 127 (1 for absmax == 0).
float act_scale_from_absmax(float absmax);

/// q = round_half_away_from_zero(x / scale) clamped to [-127, 127]. The
/// quotient is formed in double so the rounding decision is exact for every
/// pair of f32 operands.
TokenQuant quantize_with_scale(std::span<const float> x, float scale);

/// Dynamic per-token quantization from the token's own absmax.
TokenQuant quantize_token(std::span<const float> x);

float absmax(std::span<const float> x);

/// Activation quantizer policy for one layer input.
enum class ActGranularity : std::uint8_t { per_token, per_tensor };

struct ActQuantPolicy {
  bool dynamic = true;
  ActGranularity granularity = ActGranularity::per_token;
  /// Static mode only: absmax from calibration, one value for per_tensor or one
  /// per token position for per_token.
  std::vector<float> static_absmax;
};

/// Quantizes every row of x under `policy`.
std::vector<TokenQuant> quantize_activations(const MatrixF& x, const ActQuantPolicy& policy);

}  // namespace vimq

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vimq/activation.hpp"
#include "vimq/aux_engines.hpp"
#include "vimq/codebook.hpp"
#include "vimq/common.hpp"
#include "vimq/linear_engine.hpp"
#include "vimq/quantizer.hpp"

// Independent reference implementations. None of these touch the LUT bank,
// the packed words or the PE model; they recompute products from level values.

namespace vimq {

/// x * level * 2^F computed in 64-bit integer arithmetic from the level value.
std::int64_t exact_preshift_product(int x, std::uint8_t code, const ApotCodebook& codebook, std::uint32_t pre_shift);

/// Staged oracle of the quantized linear path: token quantization, then per
/// output row the exact integer sum of each (block x input tile) segment, each
/// scaled by its block scale and accumulated in f32 in ascending column
/// order, then act_scale * 2^-F, bias and the activation table.
MatrixF staged_linear_oracle(const MatrixF& x, const QuantizedWeights& qw, std::span<const float> bias, Activation act,
                             const ActQuantPolicy& policy, const ApotCodebook& codebook, std::uint32_t tile,
                             std::uint32_t pre_shift);

/// Direct causal depthwise convolution: y[t, c] = sum_j w[c, j] x[t + j - K + 1, c] + b[c].
MatrixF naive_causal_conv(const MatrixF& x, const MatrixF& w, std::span<const float> bias);

/// Quantized causal conv from dequantized operands: per tap the exact
/// integer product q * level * 2^F, scaled by its token's act_scale * 2^-F.
MatrixF staged_conv_oracle(const MatrixF& x, const QuantizedConv& conv, const ApotCodebook& codebook,
                           std::uint32_t pre_shift);

/// Plain y = x W^T + b in double, rounded once to f32.
MatrixF naive_gemm(const MatrixF& x, const MatrixF& w, std::span<const float> bias);

struct Mismatch {
  bool found = false;
  std::size_t row = 0, col = 0;
  float got = 0.0f, want = 0.0f;
};

/// First element whose bit pattern differs.
Mismatch first_bit_mismatch(const MatrixF& got, const MatrixF& want);

// Self-test ------------------------------------------------------------------

struct SelftestOptions {
  std::uint64_t seed = 1234;
  std::size_t linear_layers = 12;
  /// Flip one nibble in the packed blob of this LUT-GEMM layer (-1: none).
  int corrupt_layer = -1;
};

struct SelftestCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<SelftestCheck> run_selftest(const SelftestOptions& opts);

}  // namespace vimq

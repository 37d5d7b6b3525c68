#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "vimq/codebook.hpp"
#include "vimq/common.hpp"
#include "vimq/counters.hpp"
#include "vimq/linear_engine.hpp"
#include "vimq/quantizer.hpp"

namespace vimq {

/// Raw image tensor [channels, height, width].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
};

// Patch embedding ------------------------------------------------------------

struct PatchEmbedConfig {
  std::uint32_t patch = 16;
  std::uint32_t in_channels = 3;
  std::uint32_t embed_dim = 192;
};

/// Non-overlapping patches in row-major patch order; each row is the patch
/// flattened as (channel, dy, dx). Throws if H or W is not a multiple of `patch`.
MatrixF im2col(const Image& image, std::uint32_t patch);

/// Stride-P convolution as im2col followed by the float linear path.
MatrixF patch_embed(const Image& image, const PatchEmbedConfig& cfg, const MatrixF& weight,
                    std::span<const float> bias);
/// Same through the quantized linear engine.
LinearResult patch_embed(const Image& image, const PatchEmbedConfig& cfg, const QuantizedLinear& layer,
                         const ApotCodebook& codebook, const TileConfig& tile);

// Sequence manipulation ------------------------------------------------------

MatrixF insert_cls(const MatrixF& tokens, std::span<const float> cls, std::size_t position);
/// Inverse of insert_cls: returns (cls, remaining tokens).
std::pair<std::vector<float>, MatrixF> extract_cls(const MatrixF& tokens, std::size_t position);
MatrixF flip_sequence(const MatrixF& tokens);

// Causal depthwise convolution -------------------------------------------------

/// Window stage output: window[(t * E + c) * K + j] = x[t + j - (K - 1), c]
/// (zero before the sequence start), so tap K-1 is the current token.
template <class V>
struct ConvWindow {
  std::size_t length = 0, channels = 0, kernel = 0;
  std::vector<V> taps;
  V at(std::size_t t, std::size_t c, std::size_t j) const { return taps[(t * channels + c) * kernel + j]; }
};

ConvWindow<float> extract_windows(const MatrixF& x, std::size_t kernel);
/// Filtering stage: y[t, c] = sum_j w[c, j] * window[t, c, j] (ascending j) + bias[c].
MatrixF filter_windows(const ConvWindow<float>& win, const MatrixF& weight, std::span<const float> bias);

/// Full-precision causal conv: window stage feeding the filter stage.
MatrixF causal_conv(const MatrixF& x, const MatrixF& weight, std::span<const float> bias);

/// Depthwise conv weights quantized per channel (block = the K taps of a channel).
struct QuantizedConv {
  std::string name;
  CodeMatrix codes;           // [E, K]
  std::vector<float> scales;  // [E]
  std::vector<float> bias;    // empty or [E]
  ActQuantPolicy act_policy;

  std::size_t channels() const { return codes.rows; }
  std::size_t kernel() const { return codes.cols; }
};

QuantizedConv make_quantized_conv(std::string name, const MatrixF& weight, std::vector<float> bias,
                                  const ApotCodebook& codebook);

/// Quantized causal conv. Activations are quantized per token, windowed as
/// int8 together with their token scales, then each tap's shift-add product
/// x * level * 2^F is dequantized with its own token scale:
///   y[t, c] = (sum_j float(p_j) * (s_tok(t_j) * 2^-F)) * s_w[c] + bias[c].
MatrixF causal_conv_quantized(const MatrixF& x, const QuantizedConv& conv, const ApotCodebook& codebook,
                              std::uint32_t pre_shift, EngineCounters* counters = nullptr);

// Normalisation and residual ---------------------------------------------------

enum class NormKind : std::uint8_t { rms, layer };

/// Per-token RMSNorm (x / rms * gamma [+ beta]) or LayerNorm
/// ((x - mean) / std * gamma + beta). Statistics accumulate in double.
/// `beta` may be empty.
MatrixF normalize(const MatrixF& x, NormKind kind, std::span<const float> gamma, std::span<const float> beta,
                  float eps);

MatrixF residual_add(const MatrixF& a, const MatrixF& b);

}  // namespace vimq

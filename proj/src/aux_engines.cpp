#include "vimq/aux_engines.hpp"

#include <cmath>
#include <string>

namespace vimq {

MatrixF im2col(const Image& image, std::uint32_t patch) {
  if (patch == 0) throw ValidationError("patch size must be >= 1");
  if (image.data.size() != image.channels * image.height * image.width)
    throw ValidationError("image buffer does not match its shape");
  if (image.height % patch || image.width % patch || image.height == 0 || image.width == 0)
    throw ValidationError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                          " is not divisible by patch size " + std::to_string(patch));
  const std::size_t ph = image.height / patch, pw = image.width / patch;
  MatrixF cols(ph * pw, image.channels * patch * patch);
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px) {
      auto row = cols.row(py * pw + px);
      std::size_t k = 0;
      for (std::size_t c = 0; c < image.channels; ++c)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx) row[k++] = image.at(c, py * patch + dy, px * patch + dx);
    }
  return cols;
}

namespace {

void check_patch_cfg(const Image& image, const PatchEmbedConfig& cfg) {
  if (image.channels != cfg.in_channels)
    throw ValidationError("image has " + std::to_string(image.channels) + " channels, patch embed expects " +
                          std::to_string(cfg.in_channels));
}

}  // namespace

MatrixF patch_embed(const Image& image, const PatchEmbedConfig& cfg, const MatrixF& weight,
                    std::span<const float> bias) {
  check_patch_cfg(image, cfg);
  if (weight.rows != cfg.embed_dim) throw ValidationError("patch embed weight does not match embed_dim");
  return linear_forward_reference(im2col(image, cfg.patch), weight, bias, Activation::none);
}

LinearResult patch_embed(const Image& image, const PatchEmbedConfig& cfg, const QuantizedLinear& layer,
                         const ApotCodebook& codebook, const TileConfig& tile) {
  check_patch_cfg(image, cfg);
  if (layer.out_dim() != cfg.embed_dim) throw ValidationError("patch embed weight does not match embed_dim");
  return linear_forward_quantized(im2col(image, cfg.patch), layer, codebook, tile);
}

MatrixF insert_cls(const MatrixF& tokens, std::span<const float> cls, std::size_t position) {
  if (position > tokens.rows)
    throw ValidationError("CLS position " + std::to_string(position) + " outside [0, " +
                          std::to_string(tokens.rows) + "]");
  const std::size_t width = tokens.rows ? tokens.cols : cls.size();
  if (cls.size() != width) throw ValidationError("CLS token width does not match the sequence");
  MatrixF out(tokens.rows + 1, width);
  for (std::size_t t = 0, src = 0; t < out.rows; ++t) {
    auto dst = out.row(t);
    if (t == position) {
      std::copy(cls.begin(), cls.end(), dst.begin());
    } else {
      auto s = tokens.row(src++);
      std::copy(s.begin(), s.end(), dst.begin());
    }
  }
  return out;
}

std::pair<std::vector<float>, MatrixF> extract_cls(const MatrixF& tokens, std::size_t position) {
  if (position >= tokens.rows)
    throw ValidationError("CLS position " + std::to_string(position) + " outside a sequence of " +
                          std::to_string(tokens.rows));
  auto c = tokens.row(position);
  std::vector<float> cls(c.begin(), c.end());
  MatrixF rest(tokens.rows - 1, tokens.cols);
  for (std::size_t t = 0, dst = 0; t < tokens.rows; ++t) {
    if (t == position) continue;
    auto s = tokens.row(t);
    std::copy(s.begin(), s.end(), rest.row(dst++).begin());
  }
  return {std::move(cls), std::move(rest)};
}

MatrixF flip_sequence(const MatrixF& tokens) {
  MatrixF out(tokens.rows, tokens.cols);
  for (std::size_t t = 0; t < tokens.rows; ++t) {
    auto s = tokens.row(tokens.rows - 1 - t);
    std::copy(s.begin(), s.end(), out.row(t).begin());
  }
  return out;
}

ConvWindow<float> extract_windows(const MatrixF& x, std::size_t kernel) {
  if (kernel == 0) throw ValidationError("conv kernel size must be >= 1");
  ConvWindow<float> win{x.rows, x.cols, kernel, std::vector<float>(x.rows * x.cols * kernel, 0.0f)};
  for (std::size_t t = 0; t < x.rows; ++t)
    for (std::size_t j = 0; j < kernel; ++j) {
      if (t + j < kernel - 1) continue;
      const std::size_t src = t + j - (kernel - 1);
      for (std::size_t c = 0; c < x.cols; ++c) win.taps[(t * x.cols + c) * kernel + j] = x(src, c);
    }
  return win;
}

MatrixF filter_windows(const ConvWindow<float>& win, const MatrixF& weight, std::span<const float> bias) {
  if (weight.rows != win.channels || weight.cols != win.kernel)
    throw ValidationError("conv weight must be [channels, kernel]");
  if (!bias.empty() && bias.size() != win.channels) throw ValidationError("conv bias must have one entry per channel");
  MatrixF y(win.length, win.channels);
  for (std::size_t t = 0; t < win.length; ++t)
    for (std::size_t c = 0; c < win.channels; ++c) {
      float acc = 0.0f;
      for (std::size_t j = 0; j < win.kernel; ++j) acc += weight(c, j) * win.at(t, c, j);
      y(t, c) = bias.empty() ? acc : acc + bias[c];
    }
  return y;
}

MatrixF causal_conv(const MatrixF& x, const MatrixF& weight, std::span<const float> bias) {
  return filter_windows(extract_windows(x, weight.cols), weight, bias);
}

QuantizedConv make_quantized_conv(std::string name, const MatrixF& weight, std::vector<float> bias,
                                  const ApotCodebook& codebook) {
  if (weight.cols == 0) throw ValidationError("conv kernel size must be >= 1");
  auto qw = quantize_weights(weight, static_cast<std::uint32_t>(weight.cols), codebook);
  QuantizedConv q;
  q.name = std::move(name);
  q.codes = std::move(qw.codes);
  q.scales = std::move(qw.scales);
  q.bias = std::move(bias);
  return q;
}

MatrixF causal_conv_quantized(const MatrixF& x, const QuantizedConv& conv, const ApotCodebook& codebook,
                              std::uint32_t pre_shift, EngineCounters* counters) {
  const std::size_t L = x.rows, E = x.cols, K = conv.kernel();
  if (conv.channels() != E) throw ValidationError("conv '" + conv.name + "' expects " +
                                                  std::to_string(conv.channels()) + " channels, got " +
                                                  std::to_string(E));
  if (K == 0) throw ValidationError("conv kernel size must be >= 1");
  if (conv.scales.size() != E) throw ValidationError("conv needs one weight scale per channel");
  if (!conv.bias.empty() && conv.bias.size() != E) throw ValidationError("conv bias must have one entry per channel");
  if (static_cast<int>(pre_shift) < codebook.max_exponent())
    throw ValidationError("pre-shift F is below the largest basis exponent");

  const auto tq = quantize_activations(x, conv.act_policy);

  // Window stage over int8 activations plus the per-tap dequant multiplier.
  struct Tap {
    std::int8_t q;
    float mult;
  };
  ConvWindow<Tap> win{L, E, K, std::vector<Tap>(L * E * K, Tap{0, 0.0f})};
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t j = 0; j < K; ++j) {
      if (t + j < K - 1) continue;
      const std::size_t src = t + j - (K - 1);
      const float mult = dequant_multiplier(tq[src].scale, pre_shift);
      for (std::size_t c = 0; c < E; ++c) win.taps[(t * E + c) * K + j] = {tq[src].q[c], mult};
    }

  // Filter stage.
  MatrixF y(L, E);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < E; ++c) {
      float acc = 0.0f;
      for (std::size_t j = 0; j < K; ++j) {
        const Tap tap = win.at(t, c, j);
        if (tap.mult == 0.0f) continue;  // left padding
        acc += static_cast<float>(shift_add_product(tap.q, conv.codes(c, j), codebook, pre_shift)) * tap.mult;
      }
      const float v = acc * conv.scales[c];
      y(t, c) = conv.bias.empty() ? v : v + conv.bias[c];
    }
  if (counters) {
    EngineCounters cnt;
    cnt.tokens = L;
    cnt.macs = L * E * K;
    cnt.pe_selects = L * E * K;
    *counters += cnt;
  }
  return y;
}

MatrixF normalize(const MatrixF& x, NormKind kind, std::span<const float> gamma, std::span<const float> beta,
                  float eps) {
  if (!(eps > 0.0f)) throw ValidationError("norm epsilon must be > 0");
  if (gamma.size() != x.cols || (!beta.empty() && beta.size() != x.cols))
    throw ValidationError("norm parameters do not match the feature width");
  MatrixF y(x.rows, x.cols);
  const double n = static_cast<double>(x.cols);
  for (std::size_t t = 0; t < x.rows; ++t) {
    const auto r = x.row(t);
    double mean = 0.0;
    if (kind == NormKind::layer) {
      for (float v : r) mean += v;
      mean /= n;
    }
    double sq = 0.0;
    for (float v : r) sq += (v - mean) * (v - mean);
    const double inv = 1.0 / std::sqrt(sq / n + static_cast<double>(eps));
    auto out = y.row(t);
    for (std::size_t c = 0; c < x.cols; ++c) {
      float v = static_cast<float>((r[c] - mean) * inv) * gamma[c];
      if (!beta.empty()) v += beta[c];
      out[c] = v;
    }
  }
  return y;
}

MatrixF residual_add(const MatrixF& a, const MatrixF& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw ValidationError("residual operands differ in shape");
  MatrixF out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

}  // namespace vimq

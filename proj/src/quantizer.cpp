#include "vimq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace vimq {

SmoothingScales compute_smoothing(std::span<const float> act_absmax, std::span<const float> w_absmax, float alpha) {
  if (act_absmax.size() != w_absmax.size())
    throw ValidationError("smoothing statistics have mismatched channel counts");
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw ValidationError("smoothing alpha must lie in [0, 1]");
  SmoothingScales out;
  out.alpha = alpha;
  out.s.resize(act_absmax.size());
  for (std::size_t j = 0; j < act_absmax.size(); ++j) {
    const double a = act_absmax[j], w = w_absmax[j];
    if (!(a >= 0.0) || !(w >= 0.0) || !std::isfinite(a) || !std::isfinite(w))
      throw ValidationError("smoothing statistics must be finite and non-negative");
    if (a == 0.0 || w == 0.0) {
      out.s[j] = 1.0f;
      continue;
    }
    const float s = static_cast<float>(std::pow(a, alpha) / std::pow(w, 1.0 - alpha));
    out.s[j] = (std::isfinite(s) && s > 0.0f) ? s : 1.0f;
  }
  return out;
}

std::vector<float> input_channel_absmax(const MatrixF& w) {
  std::vector<float> out(w.cols, 0.0f);
  for (std::size_t r = 0; r < w.rows; ++r)
    for (std::size_t c = 0; c < w.cols; ++c) out[c] = std::max(out[c], std::fabs(w(r, c)));
  return out;
}

void divide_rows(MatrixF& w, std::span<const float> s, std::size_t row_offset) {
  if (row_offset + s.size() > w.rows) throw ValidationError("smoothing vector longer than upstream rows");
  for (std::size_t j = 0; j < s.size(); ++j)
    for (auto& v : w.row(row_offset + j)) v /= s[j];
}

void multiply_columns(MatrixF& w, std::span<const float> s) {
  if (s.size() != w.cols) throw ValidationError("smoothing vector does not match downstream columns");
  for (std::size_t r = 0; r < w.rows; ++r)
    for (std::size_t c = 0; c < w.cols; ++c) w(r, c) *= s[c];
}

std::pair<MatrixF, MatrixF> fuse_smoothing(const MatrixF& upstream, const MatrixF& downstream,
                                           const SmoothingScales& s) {
  if (upstream.rows != s.s.size() || downstream.cols != s.s.size())
    throw ValidationError("smoothing dimension mismatch: upstream rows " + std::to_string(upstream.rows) +
                          ", downstream cols " + std::to_string(downstream.cols) + ", scales " +
                          std::to_string(s.s.size()));
  MatrixF up = upstream, down = downstream;
  divide_rows(up, s.s);
  multiply_columns(down, s.s);
  return {std::move(up), std::move(down)};
}

QuantizedWeights quantize_weights(const MatrixF& w, std::uint32_t block_size, const ApotCodebook& codebook) {
  if (block_size == 0) throw ValidationError("block size must be >= 1");
  QuantizedWeights qw;
  qw.block_size = block_size;
  qw.codes = CodeMatrix(w.rows, w.cols, std::uint8_t{0});
  const std::size_t n = w.size();
  const std::size_t blocks = ceil_div(n, block_size);
  qw.scales.assign(blocks, 1.0f);
  const auto& levels = codebook.levels;

  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t begin = b * block_size, end = std::min(n, begin + block_size);
    float scale = 0.0f;
    for (std::size_t i = begin; i < end; ++i) {
      if (!std::isfinite(w.data[i])) throw ValidationError("non-finite weight at flat index " + std::to_string(i));
      scale = std::max(scale, std::fabs(w.data[i]));
    }
    if (scale == 0.0f) continue;  // scale stays 1.0, codes stay at level 0
    qw.scales[b] = scale;
    for (std::size_t i = begin; i < end; ++i) {
      const double mag = std::min(1.0, static_cast<double>(std::fabs(w.data[i])) / scale);
      std::size_t best = 0;
      double best_err = mag;
      for (std::size_t m = 1; m < levels.size(); ++m) {
        const double err = std::fabs(mag - levels[m]);
        if (err < best_err) {
          best_err = err;
          best = m;
        }
      }
      qw.codes.data[i] = codebook.encode(best != 0 && w.data[i] < 0.0f, best);
    }
  }
  return qw;
}

MatrixF dequantize_weights(const QuantizedWeights& qw, const ApotCodebook& codebook) {
  MatrixF out(qw.codes.rows, qw.codes.cols);
  if (qw.block_size == 0 || qw.scales.size() != ceil_div(qw.codes.size(), qw.block_size))
    throw ValidationError("scale count does not match block layout");
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<float>(codebook.value(qw.codes.data[i]) * qw.scales[i / qw.block_size]);
  return out;
}

float absmax(std::span<const float> x) {
  float m = 0.0f;
  for (float v : x) {
    if (!std::isfinite(v)) throw ValidationError("non-finite activation");
    m = std::max(m, std::fabs(v));
  }
  return m;
}

float act_scale_from_absmax(float a) { return a > 0.0f ? a / 127.0f : 1.0f; }

TokenQuant quantize_with_scale(std::span<const float> x, float scale) {
  if (!(scale > 0.0f) || !std::isfinite(scale)) throw ValidationError("activation scale must be positive");
  TokenQuant out;
  out.scale = scale;
  out.q.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw ValidationError("non-finite activation");
    const double r = std::round(static_cast<double>(x[i]) / static_cast<double>(scale));
    out.q[i] = static_cast<std::int8_t>(std::clamp(r, -127.0, 127.0));
  }
  return out;
}

TokenQuant quantize_token(std::span<const float> x) { return quantize_with_scale(x, act_scale_from_absmax(absmax(x))); }

std::vector<TokenQuant> quantize_activations(const MatrixF& x, const ActQuantPolicy& policy) {
  std::vector<TokenQuant> out(x.rows);
  if (policy.dynamic) {
    if (policy.granularity == ActGranularity::per_token) {
      for (std::size_t t = 0; t < x.rows; ++t) out[t] = quantize_token(x.row(t));
    } else {
      const float scale = act_scale_from_absmax(absmax(x.data));
      for (std::size_t t = 0; t < x.rows; ++t) out[t] = quantize_with_scale(x.row(t), scale);
    }
    return out;
  }
  if (policy.granularity == ActGranularity::per_tensor) {
    if (policy.static_absmax.size() != 1) throw ValidationError("static per-tensor quantization needs one absmax");
    const float scale = act_scale_from_absmax(policy.static_absmax[0]);
    for (std::size_t t = 0; t < x.rows; ++t) out[t] = quantize_with_scale(x.row(t), scale);
  } else {
    if (policy.static_absmax.size() != x.rows)
      throw ValidationError("static per-token quantization was calibrated for " +
                            std::to_string(policy.static_absmax.size()) + " tokens, got " +
                            std::to_string(x.rows));
    for (std::size_t t = 0; t < x.rows; ++t)
      out[t] = quantize_with_scale(x.row(t), act_scale_from_absmax(policy.static_absmax[t]));
  }
  return out;
}

}  // namespace vimq

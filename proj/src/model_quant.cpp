#include <algorithm>
#include <cmath>

#include "vimq/model.hpp"

namespace vimq {

namespace {

class AbsmaxRecorder final : public ForwardObserver {
 public:
  explicit AbsmaxRecorder(CalibrationStats& stats) : stats_(stats) {}

  void layer_input(const std::string& layer, const MatrixF& x) override {
    auto [it, fresh] = stats_.absmax.try_emplace(layer, x.rows, x.cols, 0.0f);
    MatrixF& m = it->second;
    if (m.rows != x.rows || m.cols != x.cols)
      throw ValidationError("calibration inputs must share one resolution (layer '" + layer + "' saw " +
                            std::to_string(x.rows) + " tokens, earlier " + std::to_string(m.rows) + ")");
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      const float a = std::fabs(x.data[i]);
      if (!std::isfinite(a)) throw NumericalError("non-finite calibration activation in '" + layer + "'");
      m.data[i] = std::max(m.data[i], a);
    }
  }

 private:
  CalibrationStats& stats_;
};

std::vector<float> elementwise_max(std::vector<float> a, std::span<const float> b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::max(a[i], b[i]);
  return a;
}

void divide_affine(std::vector<float>& gamma, std::vector<float>& beta, std::span<const float> s) {
  for (std::size_t c = 0; c < gamma.size(); ++c) gamma[c] /= s[c];
  for (std::size_t c = 0; c < beta.size(); ++c) beta[c] /= s[c];
}

/// Explicit smoothing composes with any divisor already in place.
void compose_pre_scale(std::vector<float>& pre, std::span<const float> s) {
  if (pre.empty()) {
    pre.assign(s.begin(), s.end());
    return;
  }
  for (std::size_t c = 0; c < pre.size(); ++c) pre[c] *= s[c];
}

std::string dir_prefix(std::size_t block, int d) {
  return "blocks." + std::to_string(block) + (d ? ".bwd" : ".fwd");
}

}  // namespace

const MatrixF& CalibrationStats::at(const std::string& layer) const {
  auto it = absmax.find(layer);
  if (it == absmax.end()) throw ValidationError("missing calibration stats for layer '" + layer + "'");
  return it->second;
}

std::vector<float> CalibrationStats::channel_absmax(const std::string& layer) const {
  const MatrixF& m = at(layer);
  std::vector<float> out(m.cols, 0.0f);
  for (std::size_t t = 0; t < m.rows; ++t)
    for (std::size_t c = 0; c < m.cols; ++c) out[c] = std::max(out[c], m(t, c));
  return out;
}

CalibrationStats calibrate(const FloatModel& model, const std::vector<Image>& images) {
  if (images.empty()) throw ValidationError("calibration needs at least one sample");
  model.validate();
  CalibrationStats stats;
  AbsmaxRecorder rec(stats);
  ForwardOptions opts;
  opts.observer = &rec;
  for (const auto& img : images) model_forward(img, model, opts);
  stats.samples = images.size();
  return stats;
}

std::vector<NamedTensor> calibration_to_tensors(const CalibrationStats& stats) {
  std::vector<NamedTensor> out;
  const std::int32_t n = static_cast<std::int32_t>(stats.samples);
  out.push_back({"calib.samples", Tensor::i32({1}, std::span<const std::int32_t>(&n, 1))});
  for (const auto& [name, m] : stats.absmax) out.push_back({"calib." + name, Tensor::from_matrix(m)});
  return out;
}

CalibrationStats calibration_from_tensors(const TensorMap& map) {
  CalibrationStats stats;
  const Tensor* n = map.find("calib.samples");
  if (!n || n->dtype() != DType::i32 || n->numel() != 1) throw ValidationError("not a calibration container");
  stats.samples = static_cast<std::size_t>(std::max(0, n->to_i32()[0]));
  for (const auto& e : map.entries()) {
    if (e.name == "calib.samples" || e.name.rfind("calib.", 0) != 0) continue;
    MatrixF m = e.tensor.to_matrix();
    for (float v : m.data)
      if (!(v >= 0.0f) || !std::isfinite(v)) throw ValidationError("calibration absmax must be finite and >= 0");
    stats.absmax.emplace(e.name.substr(6), std::move(m));
  }
  return stats;
}

FloatModel smooth_model(const FloatModel& model, const CalibrationStats& calib, float alpha, SmoothingMap* applied) {
  model.validate();
  FloatModel m = model;
  SmoothingMap sm;
  auto scales = [&](std::span<const float> act, std::span<const float> w) {
    return compute_smoothing(act, w, alpha).s;
  };
  const std::size_t E = m.cfg.inner();

  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i);

    // norm affine -> in_proj
    {
      const auto s = scales(calib.channel_absmax(p + ".in_proj"), input_channel_absmax(b.in_proj_w));
      divide_affine(b.norm_gamma, b.norm_beta, s);
      multiply_columns(b.in_proj_w, s);
      sm[p + ".in_proj"] = s;
    }
    // in_proj x rows -> both depthwise convs (one vector serves both directions)
    {
      const auto act = elementwise_max(calib.channel_absmax(p + ".fwd.conv"), calib.channel_absmax(p + ".bwd.conv"));
      std::vector<float> w(E, 0.0f);
      for (const auto& dir : b.dir)
        for (std::size_t c = 0; c < E; ++c)
          for (float v : dir.conv_w.row(c)) w[c] = std::max(w[c], std::fabs(v));
      const auto s = scales(act, w);
      divide_rows(b.in_proj_w, s, 0);
      for (auto& dir : b.dir)
        for (std::size_t c = 0; c < E; ++c)
          for (float& v : dir.conv_w.row(c)) v *= s[c];
      sm[p + ".fwd.conv"] = s;
      sm[p + ".bwd.conv"] = s;
    }
    for (int d = 0; d < 2; ++d) {
      auto& dir = b.dir[d];
      const std::string q = dir_prefix(i, d);
      // SiLU sits between the conv and x_proj: explicit divisor.
      {
        const auto s = scales(calib.channel_absmax(q + ".x_proj"), input_channel_absmax(dir.x_proj_w));
        compose_pre_scale(dir.x_proj_pre, s);
        multiply_columns(dir.x_proj_w, s);
        sm[q + ".x_proj"] = s;
      }
      // x_proj dt rows -> dt_proj
      {
        const auto s = scales(calib.channel_absmax(q + ".dt_proj"), input_channel_absmax(dir.dt_proj_w));
        divide_rows(dir.x_proj_w, s, 0);
        multiply_columns(dir.dt_proj_w, s);
        sm[q + ".dt_proj"] = s;
      }
    }
    // The gate sits before out_proj: explicit divisor.
    {
      const auto s = scales(calib.channel_absmax(p + ".out_proj"), input_channel_absmax(b.out_proj_w));
      compose_pre_scale(b.out_proj_pre, s);
      multiply_columns(b.out_proj_w, s);
      sm[p + ".out_proj"] = s;
    }
  }
  // final norm -> head
  {
    const auto s = scales(calib.channel_absmax("head"), input_channel_absmax(m.head_w));
    divide_affine(m.final_gamma, m.final_beta, s);
    multiply_columns(m.head_w, s);
    sm["head"] = s;
  }
  if (applied) *applied = std::move(sm);
  return m;
}

ApotCodebook QuantSettings::codebook() const {
  if (coarse.empty() && fine.empty()) return codebook_for_bits(weight_bits);
  auto cb = build_codebook(coarse, fine);
  if (cb.code_bits() != weight_bits)
    throw ValidationError("basis gives " + std::to_string(cb.code_bits()) + "-bit codes but weight bits is " +
                          std::to_string(weight_bits));
  return cb;
}

void QuantSettings::validate() const {
  if (block == 0) throw ValidationError("block size must be >= 1");
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw ValidationError("smoothing alpha must lie in [0, 1]");
  tile.validate(codebook(), block);
}

QuantModel quantize_model(const FloatModel& model, const CalibrationStats* calib, const QuantSettings& qs) {
  qs.validate();
  model.validate();
  if ((qs.smooth || qs.static_act) && !calib)
    throw ValidationError("missing calibration stats: smoothing and static activation scales need a calibration set");

  SmoothingMap sm;
  const FloatModel m = qs.smooth ? smooth_model(model, *calib, qs.alpha, &sm) : model;

  QuantModel out;
  out.cfg = m.cfg;
  out.qs = qs;
  out.codebook = qs.codebook();
  const auto& cb = out.codebook;

  auto policy = [&](const std::string& name) {
    ActQuantPolicy pol;
    pol.dynamic = !qs.static_act;
    pol.granularity = qs.per_tensor_act ? ActGranularity::per_tensor : ActGranularity::per_token;
    if (!qs.static_act) return pol;
    const MatrixF& map = calib->at(name);
    auto it = sm.find(name);
    const std::vector<float>* s = it == sm.end() ? nullptr : &it->second;
    std::vector<float> per_token(map.rows, 0.0f);
    for (std::size_t t = 0; t < map.rows; ++t)
      for (std::size_t c = 0; c < map.cols; ++c)
        per_token[t] = std::max(per_token[t], s ? map(t, c) / (*s)[c] : map(t, c));
    if (qs.per_tensor_act)
      pol.static_absmax = {per_token.empty() ? 0.0f : *std::max_element(per_token.begin(), per_token.end())};
    else
      pol.static_absmax = std::move(per_token);
    return pol;
  };
  auto linear = [&](const std::string& name, const MatrixF& w, std::vector<float> bias, Activation act) {
    auto ql = make_quantized_linear(name, quantize_weights(w, qs.block, cb), std::move(bias), act, qs.tile, cb);
    ql.act_policy = policy(name);
    return ql;
  };

  out.patch = linear("patch_embed", m.patch_w, m.patch_b, Activation::none);
  out.cls = m.cls;
  out.blocks.resize(m.blocks.size());
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const auto& fb = m.blocks[i];
    auto& qb = out.blocks[i];
    const std::string p = "blocks." + std::to_string(i);
    qb.norm_gamma = fb.norm_gamma;
    qb.norm_beta = fb.norm_beta;
    qb.in_proj = linear(p + ".in_proj", fb.in_proj_w, {}, Activation::none);
    if (qs.smooth) {
      qb.in_proj_report.assign(2 * m.cfg.inner(), 1.0f);
      std::copy(sm.at(p + ".fwd.conv").begin(), sm.at(p + ".fwd.conv").end(), qb.in_proj_report.begin());
    }
    for (int d = 0; d < 2; ++d) {
      const auto& fd = fb.dir[d];
      auto& qd = qb.dir[d];
      const std::string q = dir_prefix(i, d);
      qd.conv = make_quantized_conv(q + ".conv", fd.conv_w, fd.conv_b, cb);
      qd.conv.act_policy = policy(q + ".conv");
      qd.x_proj_pre = fd.x_proj_pre;
      qd.x_proj = linear(q + ".x_proj", fd.x_proj_w, {}, Activation::none);
      if (qs.smooth) {
        qd.x_proj_report.assign(fd.x_proj_w.rows, 1.0f);
        const auto& s = sm.at(q + ".dt_proj");
        std::copy(s.begin(), s.end(), qd.x_proj_report.begin());
      }
      qd.dt_proj = linear(q + ".dt_proj", fd.dt_proj_w, fd.dt_proj_b, Activation::softplus);
      qd.A = fd.A;
      qd.d_skip = fd.d_skip;
    }
    qb.out_proj_pre = fb.out_proj_pre;
    qb.out_proj = linear(p + ".out_proj", fb.out_proj_w, {}, Activation::none);
  }
  out.final_gamma = m.final_gamma;
  out.final_beta = m.final_beta;
  out.head = linear("head", m.head_w, m.head_b, Activation::none);
  return out;
}

std::vector<LayerQuantError> weight_quant_errors(const FloatModel& model, std::uint32_t block,
                                                 const ApotCodebook& codebook) {
  model.validate();
  std::vector<LayerQuantError> out;
  auto add = [&](const std::string& name, const MatrixF& w) {
    const MatrixF deq = dequantize_weights(quantize_weights(w, block, codebook), codebook);
    double acc = 0.0;
    for (std::size_t i = 0; i < w.data.size(); ++i) {
      const double e = static_cast<double>(w.data[i]) - deq.data[i];
      acc += e * e;
    }
    out.push_back({name, w.data.empty() ? 0.0 : acc / static_cast<double>(w.data.size())});
  };
  add("patch_embed", model.patch_w);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& b = model.blocks[i];
    const std::string p = "blocks." + std::to_string(i);
    add(p + ".in_proj", b.in_proj_w);
    for (int d = 0; d < 2; ++d) {
      add(dir_prefix(i, d) + ".x_proj", b.dir[d].x_proj_w);
      add(dir_prefix(i, d) + ".dt_proj", b.dir[d].dt_proj_w);
    }
    add(p + ".out_proj", b.out_proj_w);
  }
  add("head", model.head_w);
  return out;
}

}  // namespace vimq

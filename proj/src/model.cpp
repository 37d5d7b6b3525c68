#include "vimq/model.hpp"

#include <cmath>
#include <random>

#include "vimq/activation.hpp"

namespace vimq {

namespace {

const char* const kDirNames[2] = {"fwd", "bwd"};

MatrixF columns(const MatrixF& m, std::size_t begin, std::size_t count) {
  MatrixF out(m.rows, count);
  for (std::size_t t = 0; t < m.rows; ++t) {
    auto src = m.row(t).subspan(begin, count);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

void divide_columns(MatrixF& x, std::span<const float> s) {
  if (s.empty()) return;
  if (s.size() != x.cols) throw ValidationError("pre-scale length does not match the layer input");
  for (std::size_t t = 0; t < x.rows; ++t) {
    auto r = x.row(t);
    for (std::size_t c = 0; c < x.cols; ++c) r[c] /= s[c];
  }
}

template <class F>
void apply_inplace(MatrixF& m, F&& f) {
  for (float& v : m.data) v = f(v);
}

void check_finite(const MatrixF& m, const std::string& what) {
  for (std::size_t i = 0; i < m.data.size(); ++i)
    if (!std::isfinite(m.data[i]))
      throw NumericalError("non-finite value in " + what + " at token " + std::to_string(i / m.cols) +
                           ", channel " + std::to_string(i % m.cols));
}

struct Hooks {
  const ForwardOptions& opts;
  void in(const std::string& name, const MatrixF& x) const {
    if (opts.observer) opts.observer->layer_input(name, x);
  }
  void out(const std::string& name, const MatrixF& y) const {
    if (opts.observer) opts.observer->layer_output(name, y);
  }
  void perf(const std::string& name, const char* engine, const EngineCounters& c) const {
    if (opts.perf) opts.perf->add(name, engine, c);
  }
};

std::string block_prefix(std::size_t index) { return "blocks." + std::to_string(index); }

void check_block_input(const MatrixF& tokens, std::size_t d_model, std::size_t index) {
  if (tokens.cols != d_model)
    throw ValidationError("block " + std::to_string(index) + ": tokens have " + std::to_string(tokens.cols) +
                          " features, expected " + std::to_string(d_model));
  if (tokens.rows == 0) throw ValidationError("block " + std::to_string(index) + ": empty token sequence");
}

MatrixF ones_like(std::size_t rows, std::size_t cols) { return MatrixF(rows, cols, 1.0f); }

SsmParams make_ssm_params(const MatrixF& u, MatrixF delta, const MatrixF& dbc, std::size_t R, std::size_t N,
                          const MatrixF& A, const std::vector<float>& d_skip) {
  SsmParams p;
  p.u = u;
  p.delta = std::move(delta);
  p.A = A;
  p.B = columns(dbc, R, N);
  p.C = columns(dbc, R + N, N);
  p.d_skip = d_skip;
  // The gate is applied after the two directions are merged.
  p.z = ones_like(u.rows, u.cols);
  return p;
}

void merge_direction(MatrixF& merged, const MatrixF& y, bool flipped) {
  const MatrixF yy = flipped ? flip_sequence(y) : y;
  if (merged.data.empty()) {
    merged = yy;
    return;
  }
  for (std::size_t i = 0; i < merged.data.size(); ++i) merged.data[i] += yy.data[i];
}

}  // namespace

std::string_view cls_placement_name(ClsPlacement p) {
  switch (p) {
    case ClsPlacement::head: return "head";
    case ClsPlacement::middle: return "middle";
    case ClsPlacement::tail: return "tail";
  }
  return "?";
}

ClsPlacement parse_cls_placement(std::string_view s) {
  if (s == "head") return ClsPlacement::head;
  if (s == "middle") return ClsPlacement::middle;
  if (s == "tail") return ClsPlacement::tail;
  throw ValidationError("unknown CLS position '" + std::string(s) + "' (head, middle, tail)");
}

std::string_view norm_kind_name(NormKind k) { return k == NormKind::rms ? "rms" : "layer"; }

NormKind parse_norm_kind(std::string_view s) {
  if (s == "rms" || s == "rmsnorm") return NormKind::rms;
  if (s == "layer" || s == "layernorm") return NormKind::layer;
  throw ValidationError("unknown norm kind '" + std::string(s) + "' (rms, layer)");
}

std::string_view exp_mode_name(ExpMode m) { return m == ExpMode::exact ? "exact" : "approx"; }

ExpMode parse_exp_mode(std::string_view s) {
  if (s == "exact") return ExpMode::exact;
  if (s == "approx") return ExpMode::approx;
  throw ValidationError("unknown exp mode '" + std::string(s) + "' (exact, approx)");
}

std::size_t VimConfig::cls_position(std::size_t patches) const {
  switch (cls) {
    case ClsPlacement::head: return 0;
    case ClsPlacement::middle: return patches / 2;
    case ClsPlacement::tail: return patches;
  }
  return patches / 2;
}

void VimConfig::validate() const {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw ValidationError(std::string("model config: ") + msg);
  };
  need(d_model >= 1, "d_model must be >= 1");
  need(n_blocks >= 1, "n_blocks must be >= 1");
  need(d_state >= 1, "d_state must be >= 1");
  need(expand >= 1, "expand must be >= 1");
  need(d_conv >= 1, "conv kernel must be >= 1");
  need(patch >= 1, "patch size must be >= 1");
  need(in_channels >= 1, "in_channels must be >= 1");
  need(num_classes >= 1, "num_classes must be >= 1");
  need(dt_rank >= 1, "dt_rank must be >= 1");
  need(state_tile >= 1, "state tile must be >= 1");
  need(norm_eps > 0.0f, "norm epsilon must be > 0");
}

VimConfig config_for_variant(std::string_view variant) {
  VimConfig c;
  c.variant = std::string(variant);
  if (variant == "tiny") c.d_model = 192;
  else if (variant == "small") c.d_model = 384;
  else if (variant == "base") c.d_model = 768;
  else throw ValidationError("unknown variant '" + std::string(variant) + "' (tiny, small, base)");
  c.dt_rank = static_cast<std::uint32_t>(ceil_div(c.d_model, 16));
  return c;
}

void FloatModel::validate() const {
  cfg.validate();
  const std::size_t d = cfg.d_model, E = cfg.inner(), N = cfg.d_state, K = cfg.d_conv, R = cfg.dt_rank;
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ValidationError("model weights: " + msg);
  };
  auto shape = [](const MatrixF& m, std::size_t r, std::size_t c) { return m.rows == r && m.cols == c; };
  auto affine_ok = [&](const std::vector<float>& g, const std::vector<float>& b) {
    return g.size() == d && (b.empty() || b.size() == d);
  };
  need(shape(patch_w, d, static_cast<std::size_t>(cfg.in_channels) * cfg.patch * cfg.patch), "patch_embed shape");
  need(patch_b.empty() || patch_b.size() == d, "patch_embed bias");
  need(cls.size() == d, "cls token width");
  need(blocks.size() == cfg.n_blocks, "block count");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = block_prefix(i) + ".";
    need(affine_ok(b.norm_gamma, b.norm_beta), p + "norm");
    need(shape(b.in_proj_w, 2 * E, d), p + "in_proj shape");
    need(shape(b.out_proj_w, d, E), p + "out_proj shape");
    need(b.out_proj_pre.empty() || b.out_proj_pre.size() == E, p + "out_proj pre-scale");
    for (const auto& dir : b.dir) {
      need(shape(dir.conv_w, E, K) && dir.conv_b.size() == E, p + "conv shape");
      need(shape(dir.x_proj_w, R + 2 * N, E), p + "x_proj shape");
      need(dir.x_proj_pre.empty() || dir.x_proj_pre.size() == E, p + "x_proj pre-scale");
      need(shape(dir.dt_proj_w, E, R) && dir.dt_proj_b.size() == E, p + "dt_proj shape");
      need(shape(dir.A, E, N) && dir.d_skip.size() == E, p + "SSM parameter shape");
    }
  }
  need(affine_ok(final_gamma, final_beta), "final norm");
  need(shape(head_w, cfg.num_classes, d) && (head_b.empty() || head_b.size() == cfg.num_classes), "head shape");
}

FloatModel init_model(const VimConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto gauss = [&](std::size_t r, std::size_t c, double stddev) {
    MatrixF m(r, c);
    for (float& v : m.data) v = static_cast<float>(normal(rng) * stddev);
    return m;
  };
  auto gauss_vec = [&](std::size_t n, double mean, double stddev) {
    std::vector<float> v(n);
    for (float& x : v) x = static_cast<float>(mean + normal(rng) * stddev);
    return v;
  };
  const std::size_t d = cfg.d_model, E = cfg.inner(), N = cfg.d_state, K = cfg.d_conv, R = cfg.dt_rank;
  const std::size_t patch_in = static_cast<std::size_t>(cfg.in_channels) * cfg.patch * cfg.patch;
  const bool has_beta = cfg.norm == NormKind::layer;

  FloatModel m;
  m.cfg = cfg;
  m.patch_w = gauss(d, patch_in, 1.0 / std::sqrt(double(patch_in)));
  m.patch_b = gauss_vec(d, 0.0, 0.02);
  m.cls = gauss_vec(d, 0.0, 1.0);
  m.blocks.resize(cfg.n_blocks);
  for (auto& b : m.blocks) {
    b.norm_gamma = gauss_vec(d, 1.0, 0.1);
    if (has_beta) b.norm_beta = gauss_vec(d, 0.0, 0.02);
    b.in_proj_w = gauss(2 * E, d, 1.0 / std::sqrt(double(d)));
    for (auto& dir : b.dir) {
      dir.conv_w = gauss(E, K, 1.0 / std::sqrt(double(K)));
      dir.conv_b = gauss_vec(E, 0.0, 0.02);
      dir.x_proj_w = gauss(R + 2 * N, E, 1.0 / std::sqrt(double(E)));
      dir.dt_proj_w = gauss(E, R, 0.5 / std::sqrt(double(R)));
      dir.dt_proj_b.resize(E);
      for (auto& bias : dir.dt_proj_b) {
        // SoftPlus(bias) log-uniform in [1e-3, 1e-1].
        const double dt = std::exp(std::log(1e-3) + unit(rng) * (std::log(1e-1) - std::log(1e-3)));
        bias = static_cast<float>(dt + std::log(-std::expm1(-dt)));
      }
      dir.A = MatrixF(E, N);
      for (std::size_t c = 0; c < E; ++c)
        for (std::size_t n = 0; n < N; ++n) dir.A(c, n) = -static_cast<float>(n + 1);
      dir.d_skip.assign(E, 1.0f);
    }
    b.out_proj_w = gauss(d, E, 1.0 / std::sqrt(double(E) * 2.0 * cfg.n_blocks));
  }
  m.final_gamma = gauss_vec(d, 1.0, 0.1);
  if (has_beta) m.final_beta = gauss_vec(d, 0.0, 0.02);
  m.head_w = gauss(cfg.num_classes, d, 1.0 / std::sqrt(double(d)));
  m.head_b.assign(cfg.num_classes, 0.0f);
  return m;
}

Image random_image(std::size_t channels, std::size_t height, std::size_t width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Image img{channels, height, width, std::vector<float>(channels * height * width)};
  for (float& v : img.data) v = normal(rng);
  return img;
}

// Float path ----------------------------------------------------------------

MatrixF block_forward(const MatrixF& tokens, const FloatBlock& block, const VimConfig& cfg, std::size_t index,
                      const ForwardOptions& opts) {
  check_block_input(tokens, cfg.d_model, index);
  const Hooks hk{opts};
  const std::string p = block_prefix(index);
  const std::size_t E = cfg.inner(), N = cfg.d_state, R = cfg.dt_rank;
  try {
    const MatrixF h = normalize(tokens, cfg.norm, block.norm_gamma, block.norm_beta, cfg.norm_eps);
    hk.in(p + ".in_proj", h);
    const MatrixF xz = linear_forward_reference(h, block.in_proj_w, {}, Activation::none);
    hk.out(p + ".in_proj", xz);
    const MatrixF xb = columns(xz, 0, E);
    const MatrixF z = columns(xz, E, E);

    MatrixF merged;
    for (int d = 0; d < 2; ++d) {
      const auto& w = block.dir[d];
      const std::string q = p + "." + kDirNames[d];
      const MatrixF xd = d ? flip_sequence(xb) : xb;
      hk.in(q + ".conv", xd);
      MatrixF u = causal_conv(xd, w.conv_w, w.conv_b);
      apply_inplace(u, [](float v) { return activation_exact(Activation::silu, v); });
      hk.out(q + ".conv", u);

      MatrixF xin = u;
      divide_columns(xin, w.x_proj_pre);
      hk.in(q + ".x_proj", xin);
      const MatrixF dbc = linear_forward_reference(xin, w.x_proj_w, {}, Activation::none);
      hk.out(q + ".x_proj", dbc);

      const MatrixF dt_low = columns(dbc, 0, R);
      hk.in(q + ".dt_proj", dt_low);
      MatrixF delta = linear_forward_reference(dt_low, w.dt_proj_w, w.dt_proj_b, Activation::softplus);
      hk.out(q + ".dt_proj", delta);

      const SsmParams sp = make_ssm_params(u, std::move(delta), dbc, R, N, w.A, w.d_skip);
      SsmOptions so;
      so.state_tile = cfg.state_tile;
      so.exp_mode = ExpMode::exact;
      const MatrixF y = ssm_forward(sp, so);
      hk.out(q + ".ssm", y);
      merge_direction(merged, y, d == 1);
    }
    hk.out(p + ".merge", merged);

    MatrixF g = merged;
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= activation_exact(Activation::silu, z.data[i]);
    divide_columns(g, block.out_proj_pre);
    hk.in(p + ".out_proj", g);
    const MatrixF o = linear_forward_reference(g, block.out_proj_w, {}, Activation::none);
    hk.out(p + ".out_proj", o);

    MatrixF res = residual_add(tokens, o);
    check_finite(res, "block output");
    hk.out(p, res);
    return res;
  } catch (const NumericalError& e) {
    throw NumericalError("block " + std::to_string(index) + ": " + e.what());
  }
}

std::vector<float> model_forward(const Image& image, const FloatModel& model, const ForwardOptions& opts) {
  const auto& cfg = model.cfg;
  const Hooks hk{opts};
  const PatchEmbedConfig pc{cfg.patch, cfg.in_channels, cfg.d_model};
  if (opts.observer) hk.in("patch_embed", im2col(image, cfg.patch));
  const MatrixF tokens = patch_embed(image, pc, model.patch_w, model.patch_b);
  hk.out("patch_embed", tokens);

  const std::size_t pos = cfg.cls_position(tokens.rows);
  MatrixF seq = insert_cls(tokens, model.cls, pos);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) seq = block_forward(seq, model.blocks[i], cfg, i, opts);

  const MatrixF hn = normalize(seq, cfg.norm, model.final_gamma, model.final_beta, cfg.norm_eps);
  const MatrixF c(1, cfg.d_model, extract_cls(hn, pos).first);
  hk.in("head", c);
  const MatrixF logits = linear_forward_reference(c, model.head_w, model.head_b, Activation::none);
  hk.out("head", logits);
  check_finite(logits, "logits");
  return logits.data;
}

// Quantized path --------------------------------------------------------------

MatrixF block_forward(const MatrixF& tokens, const QuantBlock& block, const QuantModel& model, std::size_t index,
                      const ForwardOptions& opts) {
  const auto& cfg = model.cfg;
  check_block_input(tokens, cfg.d_model, index);
  const Hooks hk{opts};
  const std::string p = block_prefix(index);
  const std::size_t E = cfg.inner(), N = cfg.d_state, R = cfg.dt_rank;
  const auto& cb = model.codebook;
  const auto& tile = model.qs.tile;

  auto run_linear = [&](const MatrixF& x, const QuantizedLinear& layer, const std::vector<float>& report = {}) {
    hk.in(layer.name, x);
    auto r = linear_forward_quantized(x, layer, cb, tile);
    hk.perf(layer.name, "linear", r.counters);
    if (opts.observer && !report.empty()) {
      MatrixF seen = r.y;
      for (std::size_t t = 0; t < seen.rows; ++t)
        for (std::size_t c = 0; c < seen.cols; ++c) seen(t, c) *= report[c];
      hk.out(layer.name, seen);
    } else {
      hk.out(layer.name, r.y);
    }
    return std::move(r.y);
  };

  try {
    const MatrixF h = normalize(tokens, cfg.norm, block.norm_gamma, block.norm_beta, cfg.norm_eps);
    const MatrixF xz = run_linear(h, block.in_proj, block.in_proj_report);
    const MatrixF xb = columns(xz, 0, E);
    const MatrixF z = columns(xz, E, E);

    MatrixF merged;
    for (int d = 0; d < 2; ++d) {
      const auto& w = block.dir[d];
      const std::string q = p + "." + kDirNames[d];
      const MatrixF xd = d ? flip_sequence(xb) : xb;
      hk.in(w.conv.name, xd);
      EngineCounters conv_cnt;
      MatrixF u = causal_conv_quantized(xd, w.conv, cb, tile.pre_shift, &conv_cnt);
      apply_inplace(u, [](float v) { return activation_hw(Activation::silu, v); });
      hk.perf(w.conv.name, "conv", conv_cnt);
      hk.out(w.conv.name, u);

      MatrixF xin = u;
      divide_columns(xin, w.x_proj_pre);
      const MatrixF dbc = run_linear(xin, w.x_proj, w.x_proj_report);
      MatrixF delta = run_linear(columns(dbc, 0, R), w.dt_proj);

      const SsmParams sp = make_ssm_params(u, std::move(delta), dbc, R, N, w.A, w.d_skip);
      SsmOptions so;
      so.state_tile = cfg.state_tile;
      so.exp_mode = cfg.exp_mode;
      EngineCounters ssm_cnt;
      const MatrixF y = ssm_forward(sp, so, &ssm_cnt);
      hk.perf(q + ".ssm", "ssm", ssm_cnt);
      hk.out(q + ".ssm", y);
      merge_direction(merged, y, d == 1);
    }
    hk.out(p + ".merge", merged);

    MatrixF g = merged;
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= activation_hw(Activation::silu, z.data[i]);
    divide_columns(g, block.out_proj_pre);
    const MatrixF o = run_linear(g, block.out_proj);

    MatrixF res = residual_add(tokens, o);
    check_finite(res, "block output");
    hk.out(p, res);
    return res;
  } catch (const NumericalError& e) {
    throw NumericalError("block " + std::to_string(index) + ": " + e.what());
  }
}

std::vector<float> model_forward(const Image& image, const QuantModel& model, const ForwardOptions& opts) {
  const auto& cfg = model.cfg;
  const Hooks hk{opts};
  const PatchEmbedConfig pc{cfg.patch, cfg.in_channels, cfg.d_model};
  if (opts.observer) hk.in(model.patch.name, im2col(image, cfg.patch));
  auto pe = patch_embed(image, pc, model.patch, model.codebook, model.qs.tile);
  hk.perf(model.patch.name, "linear", pe.counters);
  hk.out(model.patch.name, pe.y);

  const std::size_t pos = cfg.cls_position(pe.y.rows);
  MatrixF seq = insert_cls(pe.y, model.cls, pos);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) seq = block_forward(seq, model.blocks[i], model, i, opts);

  const MatrixF hn = normalize(seq, cfg.norm, model.final_gamma, model.final_beta, cfg.norm_eps);
  const MatrixF c(1, cfg.d_model, extract_cls(hn, pos).first);
  hk.in(model.head.name, c);
  auto head = linear_forward_quantized(c, model.head, model.codebook, model.qs.tile);
  hk.perf(model.head.name, "linear", head.counters);
  hk.out(model.head.name, head.y);
  check_finite(head.y, "logits");
  return head.y.data;
}

std::vector<const QuantizedLinear*> QuantModel::linears() const {
  std::vector<const QuantizedLinear*> out{&patch};
  for (const auto& b : blocks) {
    out.push_back(&b.in_proj);
    for (const auto& d : b.dir) {
      out.push_back(&d.x_proj);
      out.push_back(&d.dt_proj);
    }
    out.push_back(&b.out_proj);
  }
  out.push_back(&head);
  return out;
}

}  // namespace vimq

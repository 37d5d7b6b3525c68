#include "vimq/verify.hpp"

#include <bit>
#include <cmath>
#include <random>
#include <sstream>

#include "vimq/container.hpp"
#include "vimq/packing.hpp"
#include "vimq/ssm_engine.hpp"

namespace vimq {

std::int64_t exact_preshift_product(int x, std::uint8_t code, const ApotCodebook& codebook, std::uint32_t pre_shift) {
  // Every level times 2^F is an integer for F >= max exponent.
  const double scaled = std::ldexp(codebook.value(code), static_cast<int>(pre_shift));
  return static_cast<std::int64_t>(x) * std::llround(scaled);
}

MatrixF staged_linear_oracle(const MatrixF& x, const QuantizedWeights& qw, std::span<const float> bias, Activation act,
                             const ActQuantPolicy& policy, const ApotCodebook& codebook, std::uint32_t tile,
                             std::uint32_t pre_shift) {
  const std::size_t out = qw.codes.rows, in = qw.codes.cols, B = qw.block_size;
  if (x.cols != in) throw ValidationError("oracle input width mismatch");
  const auto tq = quantize_activations(x, policy);
  MatrixF y(x.rows, out);
  for (std::size_t t = 0; t < x.rows; ++t) {
    const float mult = std::ldexp(tq[t].scale, -static_cast<int>(pre_shift));
    for (std::size_t o = 0; o < out; ++o) {
      float acc = 0.0f;
      std::size_t col = 0;
      while (col < in) {
        // Segment = run of columns sharing both an input tile and a block.
        const std::size_t flat = o * in + col;
        const std::size_t block = flat / B;
        const std::size_t tile_end = std::min(in, (col / tile + 1) * tile);
        const std::size_t block_end = std::min(in, col + ((block + 1) * B - flat));
        const std::size_t end = std::min(tile_end, block_end);
        std::int64_t sum = 0;
        for (std::size_t c = col; c < end; ++c) sum += exact_preshift_product(tq[t].q[c], qw.codes(o, c), codebook, pre_shift);
        acc += static_cast<float>(sum) * qw.scales[block];
        col = end;
      }
      float v = acc * mult;
      if (!bias.empty()) v = v + bias[o];
      y(t, o) = activation_hw(act, v);
    }
  }
  return y;
}

MatrixF naive_causal_conv(const MatrixF& x, const MatrixF& w, std::span<const float> bias) {
  const std::size_t K = w.cols;
  MatrixF y(x.rows, x.cols);
  for (std::size_t t = 0; t < x.rows; ++t)
    for (std::size_t c = 0; c < x.cols; ++c) {
      float acc = 0.0f;
      for (std::size_t j = 0; j < K; ++j) {
        const long src = static_cast<long>(t + j) - static_cast<long>(K - 1);
        if (src >= 0) acc += w(c, j) * x(static_cast<std::size_t>(src), c);
      }
      y(t, c) = bias.empty() ? acc : acc + bias[c];
    }
  return y;
}

MatrixF staged_conv_oracle(const MatrixF& x, const QuantizedConv& conv, const ApotCodebook& codebook,
                           std::uint32_t pre_shift) {
  const std::size_t K = conv.kernel();
  const auto tq = quantize_activations(x, conv.act_policy);
  MatrixF y(x.rows, x.cols);
  for (std::size_t t = 0; t < x.rows; ++t)
    for (std::size_t c = 0; c < x.cols; ++c) {
      float acc = 0.0f;
      for (std::size_t j = 0; j < K; ++j) {
        const long src = static_cast<long>(t + j) - static_cast<long>(K - 1);
        if (src < 0) continue;
        const auto& tok = tq[static_cast<std::size_t>(src)];
        const auto p = exact_preshift_product(tok.q[c], conv.codes(c, j), codebook, pre_shift);
        acc += static_cast<float>(p) * std::ldexp(tok.scale, -static_cast<int>(pre_shift));
      }
      const float v = acc * conv.scales[c];
      y(t, c) = conv.bias.empty() ? v : v + conv.bias[c];
    }
  return y;
}

MatrixF naive_gemm(const MatrixF& x, const MatrixF& w, std::span<const float> bias) {
  if (x.cols != w.cols) throw ValidationError("gemm width mismatch");
  MatrixF y(x.rows, w.rows);
  for (std::size_t t = 0; t < x.rows; ++t)
    for (std::size_t o = 0; o < w.rows; ++o) {
      double acc = bias.empty() ? 0.0 : bias[o];
      for (std::size_t i = 0; i < x.cols; ++i) acc += static_cast<double>(x(t, i)) * w(o, i);
      y(t, o) = static_cast<float>(acc);
    }
  return y;
}

Mismatch first_bit_mismatch(const MatrixF& got, const MatrixF& want) {
  Mismatch m;
  if (got.rows != want.rows || got.cols != want.cols) {
    m.found = true;
    return m;
  }
  for (std::size_t i = 0; i < got.data.size(); ++i)
    if (std::bit_cast<std::uint32_t>(got.data[i]) != std::bit_cast<std::uint32_t>(want.data[i])) {
      m = {true, i / got.cols, i % got.cols, got.data[i], want.data[i]};
      return m;
    }
  return m;
}

// Self-test ------------------------------------------------------------------

namespace {

MatrixF gaussian(std::mt19937_64& rng, std::size_t r, std::size_t c, float stddev = 1.0f) {
  std::normal_distribution<float> n(0.0f, stddev);
  MatrixF m(r, c);
  for (float& v : m.data) v = n(rng);
  return m;
}

SelftestCheck check_codebook() {
  const auto cb = default_codebook();
  const double want[8] = {0.0,
                          std::ldexp(1.0, -4),
                          std::ldexp(1.0, -3),
                          std::ldexp(1.0, -4) + std::ldexp(1.0, -3),
                          std::ldexp(1.0, -2),
                          std::ldexp(1.0, -2) + std::ldexp(1.0, -3),
                          std::ldexp(1.0, -1),
                          std::ldexp(1.0, -1) + std::ldexp(1.0, -3)};
  bool ok = cb.levels.size() == 8;
  for (std::size_t i = 0; ok && i < 8; ++i) ok = cb.levels[i] == want[i];
  return {"codebook", ok, ok ? "8 levels match" : "level set differs"};
}

SelftestCheck check_preshift() {
  const auto cb = default_codebook();
  const std::uint32_t F = 8;
  std::size_t cases = 0, bad = 0;
  std::vector<std::int8_t> xs;
  for (int x = -127; x <= 127; ++x) xs.push_back(static_cast<std::int8_t>(x));
  const auto bank = precompute_lut(xs, cb, F);
  for (std::size_t i = 0; i < xs.size(); ++i)
    for (std::size_t m = 0; m < cb.size(); ++m) {
      ++cases;
      if (bank.lut(i)[m] != exact_preshift_product(xs[i], cb.encode(false, m), cb, F)) ++bad;
    }
  return {"preshift", bad == 0, std::to_string(cases) + " cases, " + std::to_string(bad) + " wrong"};
}

SelftestCheck check_lut_gemm(const SelftestOptions& opts) {
  std::mt19937_64 rng(opts.seed);
  const auto cb = default_codebook();
  const std::uint32_t tiles[3] = {16, 32, 64};
  std::uniform_int_distribution<std::size_t> dim(1, 200);
  for (std::size_t k = 0; k < opts.linear_layers; ++k) {
    const bool reference_shape = k == 0;
    const std::size_t in = reference_shape ? 192 : dim(rng), out = reference_shape ? 384 : dim(rng);
    const std::size_t tokens = 1 + k % 5;
    const TileConfig cfg{tiles[k % 3], 8};
    const MatrixF w = gaussian(rng, out, in, 0.05f);
    const MatrixF x = gaussian(rng, tokens, in);
    std::vector<float> bias(out);
    for (auto& b : bias) b = std::normal_distribution<float>(0.0f, 0.1f)(rng);
    const Activation act = static_cast<Activation>(k % 4);
    const auto qw = quantize_weights(w, 32, cb);
    auto layer = make_quantized_linear("selftest." + std::to_string(k), qw, bias, act, cfg, cb);
    if (static_cast<int>(k) == opts.corrupt_layer) layer.blob.words[0][0] ^= 0x01;
    const auto got = linear_forward_quantized(x, layer, cb, cfg).y;
    const auto want = staged_linear_oracle(x, qw, bias, act, layer.act_policy, cb, cfg.tile, cfg.pre_shift);
    const auto mm = first_bit_mismatch(got, want);
    if (mm.found) {
      std::ostringstream s;
      s << "layer '" << layer.name << "' [" << out << "x" << in << ", T=" << cfg.tile << "] token " << mm.row
        << " output " << mm.col << ": engine " << mm.got << " vs oracle " << mm.want;
      return {"lut_gemm", false, s.str()};
    }
  }
  return {"lut_gemm", true, std::to_string(opts.linear_layers) + " layers bit-exact"};
}

SelftestCheck check_scan(const SelftestOptions& opts) {
  std::mt19937_64 rng(opts.seed + 1);
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);
  double worst = 0.0;
  for (int k = 0; k < 4; ++k) {
    const std::size_t L = 16 + 40 * k, D = 8 + 8 * k, N = 16;
    SsmParams p;
    p.u = gaussian(rng, L, D);
    p.delta = MatrixF(L, D);
    for (float& v : p.delta.data) v = 0.001f + 0.1f * uni(rng);
    p.A = MatrixF(D, N);
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t n = 0; n < N; ++n) p.A(d, n) = -static_cast<float>(n + 1);
    p.B = gaussian(rng, L, N);
    p.C = gaussian(rng, L, N);
    p.d_skip.assign(D, 1.0f);
    p.z = gaussian(rng, L, D);
    const auto a = ssm_forward(p);
    const auto b = ssm_scan_oracle(p);
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
      diff += (double(a.data[i]) - b.data[i]) * (double(a.data[i]) - b.data[i]);
      ref += double(b.data[i]) * b.data[i];
    }
    worst = std::max(worst, std::sqrt(diff / ref));
  }
  std::ostringstream s;
  s << "max rel error " << worst;
  return {"scan_vs_recurrence", worst <= 1e-5, s.str()};
}

SelftestCheck check_pack(const SelftestOptions& opts) {
  std::mt19937_64 rng(opts.seed + 2);
  std::uniform_int_distribution<int> code(0, 15);
  std::uniform_int_distribution<std::size_t> dim(1, 130);
  for (int k = 0; k < 8; ++k) {
    CodeMatrix c(dim(rng), dim(rng));
    for (auto& v : c.data) v = static_cast<std::uint8_t>(code(rng));
    const std::uint32_t tile = 16u << (k % 3);
    const auto blob = pack_weights(c, tile);
    if (!(unpack_weights(blob) == c)) return {"pack_roundtrip", false, "unpack differs for tile " + std::to_string(tile)};
    std::vector<NamedTensor> entries;
    append_blob(entries, "w", blob);
    const TensorMap map(read_container(write_container(entries)));
    const auto back = read_blob(map, "w");
    if (!(back.layout == blob.layout) || back.words != blob.words)
      return {"pack_roundtrip", false, "container round-trip differs"};
  }
  return {"pack_roundtrip", true, "8 matrices"};
}

SelftestCheck check_conv(const SelftestOptions& opts) {
  std::mt19937_64 rng(opts.seed + 3);
  const auto cb = default_codebook();
  const MatrixF x = gaussian(rng, 37, 24);
  const MatrixF w = gaussian(rng, 24, 4, 0.5f);
  std::vector<float> b(24, 0.25f);
  if (first_bit_mismatch(causal_conv(x, w, b), naive_causal_conv(x, w, b)).found)
    return {"causal_conv", false, "float conv differs from direct convolution"};
  const auto qc = make_quantized_conv("conv", w, b, cb);
  const auto mm = first_bit_mismatch(causal_conv_quantized(x, qc, cb, 8), staged_conv_oracle(x, qc, cb, 8));
  if (mm.found) return {"causal_conv", false, "quantized conv differs at token " + std::to_string(mm.row)};
  return {"causal_conv", true, "float and quantized bit-exact"};
}

}  // namespace

std::vector<SelftestCheck> run_selftest(const SelftestOptions& opts) {
  std::vector<SelftestCheck> out;
  auto guarded = [&](const char* name, auto&& fn) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back({name, false, e.what()});
    }
  };
  guarded("codebook", [] { return check_codebook(); });
  guarded("preshift", [] { return check_preshift(); });
  guarded("lut_gemm", [&] { return check_lut_gemm(opts); });
  guarded("scan_vs_recurrence", [&] { return check_scan(opts); });
  guarded("pack_roundtrip", [&] { return check_pack(opts); });
  guarded("causal_conv", [&] { return check_conv(opts); });
  return out;
}

}  // namespace vimq

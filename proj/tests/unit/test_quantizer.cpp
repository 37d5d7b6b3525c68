#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "test_util.hpp"
#include "vimq/codebook.hpp"
#include "vimq/linear_engine.hpp"
#include "vimq/quantizer.hpp"

using namespace vimq;

namespace {

// Nearest level via midpoints: index = number of midpoints strictly below v.
std::size_t midpoint_index(double v, const std::vector<double>& levels) {
  std::size_t idx = 0;
  for (std::size_t m = 0; m + 1 < levels.size(); ++m)
    if (v > 0.5 * (levels[m] + levels[m + 1])) idx = m + 1;
  return idx;
}

}  // namespace

TEST_CASE("codebook: the 4-bit basis") {
  const std::vector<int> coarse{1, 2, 4}, fine{3};
  const auto cb = build_codebook(coarse, fine);
  const std::vector<double> want{0, 0.0625, 0.125, 0.1875, 0.25, 0.375, 0.5, 0.625};
  CHECK(cb.levels == want);
  CHECK(cb.magnitude_bits == 3);
  CHECK(cb.code_bits() == 4);
  CHECK(cb.max_exponent() == 4);
  for (std::size_t m = 0; m < cb.size(); ++m) {
    const auto [kc, kf] = cb.shifts[m];
    const double v = (kc ? std::ldexp(1.0, -kc) : 0.0) + (kf ? std::ldexp(1.0, -kf) : 0.0);
    CHECK(v == cb.levels[m]);
  }
  CHECK(default_codebook().levels == want);
}

TEST_CASE("codebook: degenerate and pure power-of-two bases") {
  const auto one = build_codebook(std::vector<int>{}, std::vector<int>{});
  CHECK(one.levels == std::vector<double>{0.0});
  const std::vector<int> pot{1, 2, 3, 4, 5, 6, 7};
  const auto cb = build_codebook(pot, std::vector<int>{});
  REQUIRE(cb.size() == 8);
  for (int k = 1; k <= 7; ++k) CHECK(std::count(cb.levels.begin(), cb.levels.end(), std::ldexp(1.0, -k)) == 1);
}

TEST_CASE("codebook: collisions and bad exponents are rejected") {
  CHECK_THROWS_AS(build_codebook(std::vector<int>{1, 2}, std::vector<int>{2}), ValidationError);
  CHECK_THROWS_AS(build_codebook(std::vector<int>{0}, std::vector<int>{}), ValidationError);
}

TEST_CASE("codebook: nested sweep bases") {
  const auto w3 = codebook_for_bits(3), w4 = codebook_for_bits(4), w5 = codebook_for_bits(5);
  CHECK(w3.size() == 4);
  CHECK(w4.size() == 8);
  CHECK(w5.size() == 16);
  for (double v : w3.levels) CHECK(std::count(w4.levels.begin(), w4.levels.end(), v) == 1);
  for (double v : w4.levels) CHECK(std::count(w5.levels.begin(), w5.levels.end(), v) == 1);
  CHECK_THROWS_AS(codebook_for_bits(2), ValidationError);
}

TEST_CASE("codebook: sign-magnitude codes") {
  const auto cb = default_codebook();
  CHECK(cb.encode(true, 6) == 0xE);
  CHECK(cb.value(0xE) == -0.5);
  CHECK(cb.value(0x6) == 0.5);
  CHECK(cb.is_negative(0x8));
  CHECK(cb.magnitude_index(0xD) == 5);
}

TEST_CASE("smoothing scales") {
  CHECK(compute_smoothing(std::vector<float>{4}, std::vector<float>{1}, 0.5f).s == std::vector<float>{2});
  CHECK(compute_smoothing(std::vector<float>{1}, std::vector<float>{1}, 0.5f).s == std::vector<float>{1});
  CHECK(compute_smoothing(std::vector<float>{0}, std::vector<float>{5}, 0.5f).s == std::vector<float>{1});
  // alpha = 0 depends on the weights alone
  const auto s0 = compute_smoothing(std::vector<float>{9, 100}, std::vector<float>{4, 4}, 0.0f);
  CHECK(s0.s[0] == doctest::Approx(0.25));
  CHECK(s0.s[1] == doctest::Approx(0.25));
  CHECK_THROWS_AS(compute_smoothing(std::vector<float>{-1}, std::vector<float>{1}), ValidationError);
  CHECK_THROWS_AS(compute_smoothing(std::vector<float>{1, 2}, std::vector<float>{1}), ValidationError);
  CHECK_THROWS_AS(compute_smoothing(std::vector<float>{1}, std::vector<float>{1}, 1.5f), ValidationError);
}

TEST_CASE("fuse_smoothing: unit scales are a no-op") {
  std::mt19937_64 rng(1);
  const auto up = testing::random_matrix(16, 8, rng), down = testing::random_matrix(4, 16, rng);
  SmoothingScales s;
  s.s.assign(16, 1.0f);
  const auto [u2, d2] = fuse_smoothing(up, down, s);
  CHECK(u2 == up);
  CHECK(d2 == down);
}

TEST_CASE("fuse_smoothing: two-layer float composition is preserved") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto up = testing::random_matrix(16, 16, rng), down = testing::random_matrix(16, 16, rng);
    const auto x = testing::random_matrix(8, 16, rng);
    SmoothingScales s;
    s.s = testing::random_vector(16, rng, 0.05f, 20.0f);
    const auto [u2, d2] = fuse_smoothing(up, down, s);
    const auto ref = linear_forward_reference(linear_forward_reference(x, up, {}, Activation::none), down, {},
                                              Activation::none);
    const auto got = linear_forward_reference(linear_forward_reference(x, u2, {}, Activation::none), d2, {},
                                              Activation::none);
    CHECK(testing::rel_l2(got.data, ref.data) <= 1e-6);
  }
  SmoothingScales bad;
  bad.s.assign(3, 1.0f);
  CHECK_THROWS_AS(fuse_smoothing(MatrixF(16, 4), MatrixF(2, 16), bad), ValidationError);
}

TEST_CASE("weights: worked block example") {
  const auto cb = default_codebook();
  const MatrixF w(1, 3, std::vector<float>{0.5f, -0.25f, 0.125f});
  const auto qw = quantize_weights(w, 3, cb);
  REQUIRE(qw.scales.size() == 1);
  CHECK(qw.scales[0] == 0.5f);
  CHECK(cb.value(qw.codes.data[0]) == 0.625);
  CHECK(cb.value(qw.codes.data[1]) == -0.5);
  CHECK(cb.value(qw.codes.data[2]) == 0.25);
}

TEST_CASE("weights: zero block and tie rule") {
  const auto cb = default_codebook();
  const auto qz = quantize_weights(MatrixF(2, 4, 0.0f), 4, cb);
  CHECK(qz.scales == std::vector<float>{1.0f, 1.0f});
  CHECK(std::all_of(qz.codes.data.begin(), qz.codes.data.end(), [](auto c) { return c == 0; }));
  // 0.09375 sits halfway between 0.0625 and 0.125 after normalising by 1
  const MatrixF w(1, 2, std::vector<float>{1.0f, 0.09375f});
  const auto q = quantize_weights(w, 2, cb);
  CHECK(cb.value(q.codes.data[1]) == 0.0625);
  const MatrixF neg0(1, 2, std::vector<float>{1.0f, -0.01f});
  CHECK(quantize_weights(neg0, 2, cb).codes.data[1] == 0);  // rounds to zero, stored positive
  CHECK_THROWS_AS(quantize_weights(w, 0, cb), ValidationError);
}

TEST_CASE("weights: dequantize examples") {
  const auto cb = default_codebook();
  QuantizedWeights qw;
  qw.codes = CodeMatrix(1, 2, std::vector<std::uint8_t>{6, 0});
  qw.scales = {2.0f};
  qw.block_size = 2;
  const auto d = dequantize_weights(qw, cb);
  CHECK(d.data[0] == 1.0f);
  CHECK(d.data[1] == 0.0f);
}

TEST_CASE("weights: nearest-level optimality on random weights") {
  std::mt19937_64 rng(3);
  for (int bits : {3, 4, 5}) {
    const auto cb = codebook_for_bits(bits);
    const auto w = testing::random_matrix(100, 333, rng);
    for (std::uint32_t B : {7u, 32u}) {
      const auto qw = quantize_weights(w, B, cb);
      std::size_t violations = 0;
      double max_gap = 1.0 - cb.max_level();
      for (std::size_t m = 1; m < cb.size(); ++m) max_gap = std::max(max_gap, cb.levels[m] - cb.levels[m - 1]);
      const auto deq = dequantize_weights(qw, cb);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const float s = qw.scales[i / B];
        const double v = std::min(1.0, std::fabs(static_cast<double>(w.data[i])) / s);
        const auto code = qw.codes.data[i];
        violations += cb.magnitude_index(code) != midpoint_index(v, cb.levels);
        violations += cb.magnitude_index(code) != 0 && cb.is_negative(code) != (w.data[i] < 0);
        violations += std::fabs(deq.data[i] - w.data[i]) > s * max_gap * (1 + 1e-6);
        violations += std::fabs(deq.data[i]) > s;
      }
      CHECK(violations == 0);
    }
    // block scale is the block absmax
    const auto qw = quantize_weights(w, 32, cb);
    for (std::size_t b = 0; b < qw.scales.size(); ++b) {
      float m = 0.0f;
      for (std::size_t i = b * 32; i < std::min(w.size(), b * 32 + 32); ++i) m = std::max(m, std::fabs(w.data[i]));
      CHECK(qw.scales[b] == m);
    }
  }
}

TEST_CASE("weights: scale equivariance") {
  std::mt19937_64 rng(4);
  const auto cb = default_codebook();
  const auto w = testing::random_matrix(12, 40, rng);
  MatrixF w4 = w;
  for (auto& v : w4.data) v *= 4.0f;
  const auto a = quantize_weights(w, 16, cb), b = quantize_weights(w4, 16, cb);
  CHECK(a.codes == b.codes);
  for (std::size_t i = 0; i < a.scales.size(); ++i) CHECK(b.scales[i] == a.scales[i] * 4.0f);
}

TEST_CASE("tokens: worked examples") {
  const auto t = quantize_token(std::vector<float>{0.5f, -1.0f, 0.25f});
  CHECK(t.scale == 1.0f / 127.0f);
  CHECK(t.q == std::vector<std::int8_t>{64, -127, 32});
  const auto z = quantize_token(std::vector<float>{0, 0, 0});
  CHECK(z.scale == 1.0f);
  CHECK(z.q == std::vector<std::int8_t>{0, 0, 0});
}

TEST_CASE("tokens: roundtrip bound and absmax mapping on random tokens") {
  std::mt19937_64 rng(6);
  std::size_t violations = 0;
  for (int i = 0; i < 20000; ++i) {
    const float spread = std::ldexp(1.0f, static_cast<int>(rng() % 20) - 10);
    const auto x = testing::random_vector(1 + rng() % 64, rng, -spread, spread);
    const auto t = quantize_token(x);
    const float am = absmax(x);
    for (std::size_t j = 0; j < x.size(); ++j) {
      violations += std::abs(t.q[j]) > 127;
      violations += std::fabs(static_cast<double>(x[j]) - static_cast<double>(t.q[j]) * t.scale) > t.scale * 0.5 * (1 + 1e-6);
      if (std::fabs(x[j]) == am) violations += std::abs(t.q[j]) != 127;
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("tokens: scale equivariance and half-away rounding") {
  const std::vector<float> x{0.3f, -0.7f, 1.1f};
  std::vector<float> x8(x);
  for (auto& v : x8) v *= 8.0f;
  const auto a = quantize_token(x), b = quantize_token(x8);
  CHECK(a.q == b.q);
  CHECK(b.scale == a.scale * 8.0f);
  const auto r = quantize_with_scale(std::vector<float>{2.5f, -2.5f, 1.49f}, 1.0f);
  CHECK(r.q == std::vector<std::int8_t>{3, -3, 1});
  CHECK(quantize_with_scale(std::vector<float>{1000.0f}, 1.0f).q[0] == 127);
  CHECK_THROWS_AS(quantize_with_scale(std::vector<float>{1.0f}, 0.0f), ValidationError);
}

TEST_CASE("activation policies") {
  MatrixF x(2, 3, std::vector<float>{1, -2, 0.5f, 0.1f, 0.2f, -0.4f});
  const auto dyn = quantize_activations(x, {});
  CHECK(dyn[0].scale == 2.0f / 127.0f);
  CHECK(dyn[1].scale == 0.4f / 127.0f);
  ActQuantPolicy tensor{false, ActGranularity::per_tensor, {4.0f}};
  const auto st = quantize_activations(x, tensor);
  CHECK(st[0].scale == 4.0f / 127.0f);
  CHECK(st[1].scale == 4.0f / 127.0f);
  ActQuantPolicy token{false, ActGranularity::per_token, {1.0f, 1.0f}};
  const auto pt = quantize_activations(x, token);
  CHECK(pt[0].q[1] == -127);  // clamped
  ActQuantPolicy short_map{false, ActGranularity::per_token, {1.0f}};
  CHECK_THROWS_AS(quantize_activations(x, short_map), ValidationError);
}

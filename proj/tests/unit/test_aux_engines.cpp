#include <doctest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "vimq/aux_engines.hpp"
#include "vimq/verify.hpp"

using namespace vimq;

namespace {

Image random_img(std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  Image img{c, h, w, testing::random_vector(c * h * w, rng, -1, 1)};
  return img;
}

}  // namespace

TEST_CASE("im2col and patch embedding") {
  std::mt19937_64 rng(1);
  const auto img = random_img(3, 16, 16, rng);
  const auto cols = im2col(img, 16);
  CHECK(cols.rows == 1);
  CHECK(cols.cols == 768);
  CHECK(cols(0, 1 * 256 + 2 * 16 + 3) == img.at(1, 2, 3));

  const auto big = random_img(3, 224, 224, rng);
  CHECK(im2col(big, 16).rows == 196);
  const auto rect = random_img(3, 32, 48, rng);
  const auto rc = im2col(rect, 16);
  REQUIRE(rc.rows == 6);
  CHECK(rc(4, 0) == rect.at(0, 16, 16));  // second patch row, second column
  CHECK_THROWS_AS(im2col(random_img(3, 20, 16, rng), 16), ValidationError);

  PatchEmbedConfig cfg{16, 3, 8};
  const auto w = testing::random_matrix(8, 768, rng);
  const auto b = testing::random_vector(8, rng, -1, 1);
  CHECK(patch_embed(rect, cfg, w, b) == linear_forward_reference(rc, w, b, Activation::none));

  const auto cb = default_codebook();
  const auto qw = quantize_weights(w, 32, cb);
  const auto layer = make_quantized_linear("patch_embed", qw, b, Activation::none, {32, 8}, cb);
  const auto got = patch_embed(rect, cfg, layer, cb, {32, 8});
  CHECK(testing::bit_equal(got.y, linear_forward_quantized(rc, layer, cb, {32, 8}).y));
}

TEST_CASE("patch embedding of a constant image gives identical tokens") {
  Image img{3, 32, 32, std::vector<float>(3 * 32 * 32, 0.75f)};
  std::mt19937_64 rng(2);
  const auto w = testing::random_matrix(4, 768, rng);
  const auto cb = default_codebook();
  const auto layer = make_quantized_linear("p", quantize_weights(w, 32, cb), {}, Activation::none, {32, 8}, cb);
  const auto y = patch_embed(img, {16, 3, 4}, layer, cb, {32, 8}).y;
  REQUIRE(y.rows == 4);
  for (std::size_t t = 1; t < 4; ++t)
    for (std::size_t o = 0; o < 4; ++o) CHECK(y(t, o) == y(0, o));
  // every code is reached through the same roundtrip value 0.75
  const auto deq = dequantize_weights(quantize_weights(w, 32, cb), cb);
  for (std::size_t o = 0; o < 4; ++o) {
    double rs = 0.0;
    for (std::size_t i = 0; i < 768; ++i) rs += deq(o, i);
    CHECK(y(0, o) == doctest::Approx(rs * 0.75).epsilon(1e-5));
  }
}

TEST_CASE("CLS insertion and extraction") {
  std::mt19937_64 rng(3);
  const std::vector<float> cls{9, 8, 7};
  const auto only = insert_cls(MatrixF(0, 3), cls, 0);
  CHECK(only.rows == 1);
  CHECK(only.data == cls);
  const auto tokens = testing::random_matrix(196, 3, rng);
  for (std::size_t pos : {0ul, 98ul, 196ul}) {
    const auto seq = insert_cls(tokens, cls, pos);
    CHECK(seq.rows == 197);
    CHECK(std::vector<float>(seq.row(pos).begin(), seq.row(pos).end()) == cls);
    const auto [c, rest] = extract_cls(seq, pos);
    CHECK(c == cls);
    CHECK(rest == tokens);
  }
  CHECK_THROWS_AS(insert_cls(tokens, cls, 197), ValidationError);
  CHECK_THROWS_AS(insert_cls(tokens, std::vector<float>{1}, 0), ValidationError);
}

TEST_CASE("sequence flip") {
  const MatrixF one(1, 2, std::vector<float>{1, 2});
  CHECK(flip_sequence(one) == one);
  const MatrixF three(3, 1, std::vector<float>{0, 1, 2});
  CHECK(flip_sequence(three).data == std::vector<float>{2, 1, 0});
  std::mt19937_64 rng(4);
  const auto r = testing::random_matrix(17, 5, rng);
  CHECK(flip_sequence(flip_sequence(r)) == r);
}

TEST_CASE("causal conv: degenerate kernel and impulse response") {
  std::mt19937_64 rng(5);
  const auto x = testing::random_matrix(6, 3, rng);
  const MatrixF k1(3, 1, std::vector<float>{2, -1, 0.5f});
  const auto y1 = causal_conv(x, k1, {});
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 3; ++c) CHECK(y1(t, c) == x(t, c) * k1(c, 0));

  MatrixF impulse(7, 2, 0.0f);
  impulse(0, 0) = impulse(0, 1) = 1.0f;
  const MatrixF w(2, 4, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8});
  const auto y = causal_conv(impulse, w, {});
  const float want0[] = {4, 3, 2, 1, 0, 0, 0}, want1[] = {8, 7, 6, 5, 0, 0, 0};
  for (std::size_t t = 0; t < 7; ++t) {
    CHECK(y(t, 0) == want0[t]);
    CHECK(y(t, 1) == want1[t]);
  }
}

TEST_CASE("causal conv: window stage and naive oracle") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t L = 1 + rng() % 40, E = 1 + rng() % 20, K = 1 + rng() % 5;
    const auto x = testing::random_matrix(L, E, rng), w = testing::random_matrix(E, K, rng);
    const auto b = testing::random_vector(E, rng, -1, 1);
    const auto win = extract_windows(x, K);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t c = 0; c < E; ++c)
        for (std::size_t j = 0; j < K; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(K - 1);
          CHECK(win.at(t, c, j) == (src < 0 ? 0.0f : x(static_cast<std::size_t>(src), c)));
        }
    CHECK(testing::bit_equal(causal_conv(x, w, b), naive_causal_conv(x, w, b)));
  }
}

TEST_CASE("causal conv: causality") {
  std::mt19937_64 rng(7);
  const auto x = testing::random_matrix(20, 6, rng), w = testing::random_matrix(6, 4, rng);
  const auto cb = default_codebook();
  const auto qc = make_quantized_conv("c", w, {}, cb);
  auto x2 = x;
  for (std::size_t t = 11; t < 20; ++t)
    for (std::size_t c = 0; c < 6; ++c) x2(t, c) += 5.0f;
  const auto a = causal_conv(x, w, {}), b = causal_conv(x2, w, {});
  const auto qa = causal_conv_quantized(x, qc, cb, 8), qb = causal_conv_quantized(x2, qc, cb, 8);
  for (std::size_t t = 0; t <= 10; ++t)
    for (std::size_t c = 0; c < 6; ++c) {
      CHECK(a(t, c) == b(t, c));
      CHECK(qa(t, c) == qb(t, c));
    }
}

TEST_CASE("quantized causal conv matches the staged oracle") {
  std::mt19937_64 rng(8);
  for (int bits : {3, 4, 5}) {
    const auto cb = codebook_for_bits(bits);
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t L = 1 + rng() % 60, E = 1 + rng() % 48;
      const auto x = testing::random_matrix(L, E, rng, 2.0f), w = testing::random_matrix(E, 4, rng);
      const auto qc = make_quantized_conv("c", w, testing::random_vector(E, rng, -1, 1), cb);
      CHECK(qc.scales.size() == E);
      EngineCounters cnt;
      const auto got = causal_conv_quantized(x, qc, cb, 8, &cnt);
      CHECK(!first_bit_mismatch(got, staged_conv_oracle(x, qc, cb, 8)).found);
      CHECK(cnt.tokens == L);
      // loose sanity bound: with 4-tap blocks the largest tap always clips to 0.625 of its scale
      CHECK(testing::rel_l2(got.data, causal_conv(x, w, qc.bias).data) < 0.5);
    }
  }
}

TEST_CASE("normalisation") {
  const MatrixF c(1, 4, 3.0f);
  const std::vector<float> g{1, 2, 3, 4}, b{0.5f, 0.5f, 0.5f, 0.5f};
  CHECK(normalize(c, NormKind::layer, g, b, 1e-5f).data == b);
  const MatrixF unit(1, 4, std::vector<float>{1, -1, 1, -1});
  const auto r = normalize(unit, NormKind::rms, g, {}, 1e-9f);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.data[i] == doctest::Approx(unit.data[i] * g[i]).epsilon(1e-6));

  std::mt19937_64 rng(9);
  const auto x = testing::random_matrix(10, 64, rng, 3.0f);
  const auto gam = testing::random_vector(64, rng, 0.5f, 1.5f), bet = testing::random_vector(64, rng, -1, 1);
  for (auto kind : {NormKind::rms, NormKind::layer}) {
    const auto y = normalize(x, kind, gam, bet, 1e-5f);
    std::vector<double> want(x.size());
    for (std::size_t t = 0; t < 10; ++t) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < 64; ++i) mean += x(t, i);
      mean /= 64.0;
      if (kind == NormKind::rms) mean = 0.0;
      for (std::size_t i = 0; i < 64; ++i) sq += (x(t, i) - mean) * (x(t, i) - mean);
      const double inv = 1.0 / std::sqrt(sq / 64.0 + 1e-5);
      for (std::size_t i = 0; i < 64; ++i) want[t * 64 + i] = (x(t, i) - mean) * inv * gam[i] + bet[i];
    }
    CHECK(testing::rel_l2(y.data, want) <= 1e-6);
  }
  CHECK_THROWS_AS(normalize(x, NormKind::rms, gam, {}, 0.0f), ValidationError);
}

TEST_CASE("residual add") {
  std::mt19937_64 rng(10);
  const auto a = testing::random_matrix(5, 7, rng), b = testing::random_matrix(5, 7, rng);
  CHECK(residual_add(a, MatrixF(5, 7, 0.0f)) == a);
  auto neg = a;
  for (auto& v : neg.data) v = -v;
  CHECK(residual_add(a, neg) == MatrixF(5, 7, 0.0f));
  CHECK(residual_add(a, b) == residual_add(b, a));
  CHECK_THROWS_AS(residual_add(a, MatrixF(5, 6)), ValidationError);
}

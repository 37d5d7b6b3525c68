#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "test_util.hpp"
#include "vimq/activation.hpp"
#include "vimq/linear_engine.hpp"
#include "vimq/verify.hpp"

using namespace vimq;

namespace {

MatrixF naive_reference(const MatrixF& x, const MatrixF& w, std::span<const float> bias) {
  MatrixF y(x.rows, w.rows);
  for (std::size_t t = 0; t < x.rows; ++t)
    for (std::size_t o = 0; o < w.rows; ++o) {
      float acc = 0.0f;
      for (std::size_t i = 0; i < w.cols; ++i) {
        const float p = w(o, i) * x(t, i);
        acc = acc + p;
      }
      y(t, o) = bias.empty() ? acc : acc + bias[o];
    }
  return y;
}

std::vector<std::int8_t> random_i8(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::int8_t> v(n);
  for (auto& x : v) x = static_cast<std::int8_t>(static_cast<int>(rng() % 255) - 127);
  return v;
}

}  // namespace

TEST_CASE("reference GEMM: hand examples and naive oracle") {
  const MatrixF x(1, 2, std::vector<float>{1, 2});
  const MatrixF w(2, 2, std::vector<float>{1, 1, 0, 1});
  const auto y = linear_forward_reference(x, w, std::vector<float>{0, 0}, Activation::none);
  CHECK(y.data == std::vector<float>{3, 2});

  std::mt19937_64 rng(1);
  MatrixF eye(5, 5, 0.0f);
  for (std::size_t i = 0; i < 5; ++i) eye(i, i) = 1.0f;
  const auto xi = testing::random_matrix(3, 5, rng);
  CHECK(linear_forward_reference(xi, eye, {}, Activation::none) == xi);

  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t in = 1 + rng() % 512, out = 1 + rng() % 512, L = 1 + rng() % 6;
    const auto xr = testing::random_matrix(L, in, rng), wr = testing::random_matrix(out, in, rng);
    const auto b = testing::random_vector(out, rng, -1, 1);
    CHECK(testing::bit_equal(linear_forward_reference(xr, wr, b, Activation::none), naive_reference(xr, wr, b)));
  }
  CHECK_THROWS_AS(linear_forward_reference(MatrixF(1, 3), w, {}, Activation::none), ValidationError);
}

TEST_CASE("LUT precompute: worked entries") {
  const auto cb = default_codebook();
  const std::vector<std::int8_t> tile{3, 0, -127};
  const auto bank = precompute_lut(tile, cb, 8);
  const std::vector<std::int32_t> three{0, 48, 96, 144, 192, 288, 384, 480};
  CHECK(std::vector<std::int32_t>(bank.lut(0).begin(), bank.lut(0).end()) == three);
  for (auto v : bank.lut(1)) CHECK(v == 0);
  CHECK(bank.lut(2)[7] == -20320);
  CHECK_THROWS_AS(precompute_lut(tile, cb, 3), ValidationError);
}

TEST_CASE("LUT precompute equals exact products and the direct shift-add path") {
  for (int bits : {3, 4, 5}) {
    const auto cb = codebook_for_bits(bits);
    std::vector<std::int8_t> all;
    for (int x = -127; x <= 127; ++x) all.push_back(static_cast<std::int8_t>(x));
    for (std::uint32_t F : {6u, 8u, 12u}) {
      if (static_cast<int>(F) < cb.max_exponent()) continue;
      const auto bank = precompute_lut(all, cb, F);
      std::size_t bad = 0;
      for (std::size_t i = 0; i < all.size(); ++i)
        for (std::size_t m = 0; m < cb.size(); ++m) {
          const auto code = static_cast<std::uint8_t>(m);
          const auto exact = exact_preshift_product(all[i], code, cb, F);
          bad += bank.lut(i)[m] != exact;
          bad += shift_add_product(all[i], code, cb, F) != exact;
          const auto neg = cb.encode(true, m);
          bad += shift_add_product(all[i], neg, cb, F) != -exact;
        }
      CHECK(bad == 0);
    }
  }
}

TEST_CASE("PE lane: single element, zero codes and exact-arithmetic oracle") {
  const auto cb = default_codebook();
  const std::vector<std::int8_t> x3{3};
  const auto bank = precompute_lut(x3, cb, 8);
  std::vector<BlockPartial> out(4);
  const std::vector<std::uint8_t> half{6};
  REQUIRE(pe_lane_accumulate(bank, half, {0, 1, 32}, cb, out) == 1);
  CHECK(out[0].sum == 384);
  CHECK(out[0].block == 0);

  std::mt19937_64 rng(2);
  for (std::uint32_t T : {16u, 32u, 64u})
    for (std::uint32_t B : {5u, 16u, 32u, 64u})
      for (int trial = 0; trial < 10; ++trial) {
        const auto xs = random_i8(T, rng);
        const auto luts = precompute_lut(xs, cb, 8);
        std::vector<std::uint8_t> codes(T);
        for (auto& c : codes) c = rng() % 16;
        const std::uint32_t len = 1 + rng() % T;
        const std::uint64_t begin = rng() % 1000;
        std::vector<BlockPartial> parts(T + 2);
        const auto n = pe_lane_accumulate(luts, std::span(codes).first(len), {begin, len, B}, cb, parts);
        // exact oracle: bucket each element by its block id
        std::map<std::uint64_t, std::int64_t> want;
        for (std::uint32_t i = 0; i < len; ++i) want[(begin + i) / B] += exact_preshift_product(xs[i], codes[i], cb, 8);
        REQUIRE(n == want.size());
        std::size_t k = 0;
        for (const auto& [blk, sum] : want) {
          CHECK(parts[k].block == blk);
          CHECK(parts[k].sum == sum);
          ++k;
        }
        std::vector<std::uint8_t> zeros(len, 0);
        const auto nz = pe_lane_accumulate(luts, zeros, {begin, len, B}, cb, parts);
        for (std::size_t j = 0; j < nz; ++j) CHECK(parts[j].sum == 0);
      }
}

TEST_CASE("scale_and_reduce: worked example and dequantized GEMM agreement") {
  const std::vector<BlockPartial> one{{0, 384}};
  const std::vector<float> scale{2.0f};
  const float got = scale_and_reduce(one, scale, 1.0f / 127.0f, 8);
  CHECK(got == doctest::Approx(3.0 * 0.5 * 2.0 / 127.0).epsilon(1e-7));
  const std::vector<BlockPartial> zero{{0, 0}, {1, 0}};
  CHECK(scale_and_reduce(zero, std::vector<float>{3, 4}, 0.5f, 8) == 0.0f);
  CHECK(dequant_multiplier(0.5f, 8) == 0.5f / 256.0f);

  std::mt19937_64 rng(3);
  const auto cb = default_codebook();
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t in = 32 * (1 + rng() % 6), out = 1 + rng() % 40;
    const auto w = testing::random_matrix(out, in, rng), x = testing::random_matrix(2, in, rng);
    const auto qw = quantize_weights(w, 32, cb);
    const auto layer = make_quantized_linear("t", qw, {}, Activation::none, {32, 8}, cb);
    const auto y = linear_forward_quantized(x, layer, cb, {32, 8}).y;
    // oracle: dequantized weights times dequantized tokens, in double
    const auto deq = dequantize_weights(qw, cb);
    std::vector<double> want(2 * out, 0.0);
    for (std::size_t t = 0; t < 2; ++t) {
      const auto tq = quantize_token(x.row(t));
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i) want[t * out + o] += static_cast<double>(deq(o, i)) * tq.q[i] * tq.scale;
    }
    CHECK(testing::rel_l2(y.data, want) <= 1e-6);
  }
}

TEST_CASE("activation LUT") {
  for (auto fn : {Activation::silu, Activation::softplus}) {
    const auto& lut = default_offset_lut(fn);
    CHECK(lut.entries.size() == 128);
    CHECK(lut.range == 8.0f);
    double worst = 0.0;
    for (int k = -16000; k <= 16000; ++k) {
      const float y = static_cast<float>(k) * 8.0f / 16000.0f;
      CHECK(lut.offset(y) == lut.offset(-y));
      worst = std::max(worst, static_cast<double>(std::fabs(apply_activation_lut(y, lut) - activation_exact(fn, y))));
    }
    CHECK(worst <= 1e-2);
    CHECK(lut.offset(100.0f) == lut.entries.back());
  }
  CHECK(apply_activation_lut(0.0f, default_offset_lut(Activation::silu)) == 0.0f);
  CHECK(activation_hw(Activation::relu, -2.0f) == 0.0f);
  CHECK(activation_hw(Activation::none, -2.0f) == -2.0f);
  CHECK(parse_activation("softplus") == Activation::softplus);
  CHECK_THROWS_AS(parse_activation("gelu"), ValidationError);
}

TEST_CASE("quantized linear: effective identity") {
  const auto cb = default_codebook();
  std::mt19937_64 rng(4);
  for (std::uint32_t T : {16u, 32u, 64u}) {
    QuantizedWeights qw;
    qw.block_size = T;
    qw.codes = CodeMatrix(T, T, std::uint8_t{0});
    for (std::size_t i = 0; i < T; ++i) qw.codes(i, i) = 6;  // level 1/2
    qw.scales.assign(T, 2.0f);
    const auto layer = make_quantized_linear("eye", qw, {}, Activation::none, {T, 8}, cb);
    const auto x = testing::random_matrix(5, T, rng);
    const auto y = linear_forward_quantized(x, layer, cb, {T, 8}).y;
    for (std::size_t t = 0; t < 5; ++t) {
      const auto tq = quantize_token(x.row(t));
      for (std::size_t i = 0; i < T; ++i) CHECK(y(t, i) == doctest::Approx(tq.q[i] * tq.scale).epsilon(1e-6));
    }
  }
}

TEST_CASE("quantized linear: zero input gives the bias") {
  const auto cb = default_codebook();
  std::mt19937_64 rng(5);
  const auto qw = quantize_weights(testing::random_matrix(20, 40, rng), 32, cb);
  const auto bias = testing::random_vector(20, rng, -1, 1);
  const auto layer = make_quantized_linear("z", qw, bias, Activation::none, {32, 8}, cb);
  const auto y = linear_forward_quantized(MatrixF(1, 40, 0.0f), layer, cb, {32, 8}).y;
  CHECK(y.data == bias);
}

TEST_CASE("quantized linear: bit-exact against the staged oracle") {
  std::mt19937_64 rng(6);
  const Activation acts[] = {Activation::none, Activation::relu, Activation::silu, Activation::softplus};
  for (int trial = 0; trial < 24; ++trial) {
    const std::uint32_t T = 16u << (trial % 3);
    const std::uint32_t B = trial % 4 == 0 ? T : static_cast<std::uint32_t>(1 + rng() % 64);
    const int bits = 3 + trial % 3;
    const auto cb = codebook_for_bits(bits);
    const std::size_t in = trial == 0 ? 192 : 1 + rng() % 300, out = trial == 0 ? 384 : 1 + rng() % 300;
    const auto w = testing::random_matrix(out, in, rng);
    const auto x = testing::random_matrix(1 + rng() % 9, in, rng, 3.0f);
    const auto bias = testing::random_vector(out, rng, -0.5f, 0.5f);
    const auto act = acts[trial % 4];
    const auto qw = quantize_weights(w, B, cb);
    TileConfig tc{T, 8};
    tc.validate(cb, B);
    const auto layer = make_quantized_linear("l", qw, bias, act, tc, cb);
    const auto got = linear_forward_quantized(x, layer, cb, tc);
    const auto want = staged_linear_oracle(x, qw, bias, act, {}, cb, T, 8);
    const auto mm = first_bit_mismatch(got.y, want);
    CHECK_MESSAGE(!mm.found, "trial " << trial << " row " << mm.row << " col " << mm.col);
    CHECK(got.counters == linear_counters(layer.blob.layout, x.rows));
  }
}

TEST_CASE("quantized linear: tile invariance when B = T") {
  std::mt19937_64 rng(7);
  const auto cb = default_codebook();
  // in = 128 and B = 16: every block boundary is also a boundary of every
  // tile, so all three tilings produce the same block segments
  const auto w = testing::random_matrix(70, 128, rng), x = testing::random_matrix(4, 128, rng);
  const auto qw = quantize_weights(w, 16, cb);
  MatrixF first;
  for (std::uint32_t T : {16u, 32u, 64u}) {
    const auto layer = make_quantized_linear("t", qw, {}, Activation::none, {T, 8}, cb);
    const auto y = linear_forward_quantized(x, layer, cb, {T, 8}).y;
    if (T == 16) first = y;
    else CHECK(testing::bit_equal(y, first));
  }
}

TEST_CASE("counters: analytic tile formulas") {
  std::mt19937_64 rng(8);
  const auto cb = default_codebook();
  for (int trial = 0; trial < 10; ++trial) {
    const std::uint32_t T = 16u << (rng() % 3);
    const std::size_t in = 1 + rng() % 200, out = 1 + rng() % 200, L = 1 + rng() % 5;
    const auto qw = quantize_weights(testing::random_matrix(out, in, rng), 32, cb);
    const auto layer = make_quantized_linear("c", qw, {}, Activation::none, {T, 8}, cb);
    const auto r = linear_forward_quantized(testing::random_matrix(L, in, rng), layer, cb, {T, 8});
    const std::size_t ti = (in + T - 1) / T, to = (out + T - 1) / T;
    CHECK(r.counters.tiles == L * ti * to);
    CHECK(r.counters.lut_builds == L * ti);
    CHECK(r.counters.tokens == L);
    CHECK(r.counters.macs == L * in * out);
    CHECK(r.counters.words_streamed == L * layer.blob.words.size());
  }
}

TEST_CASE("tile schedule: one flush per output tile, order matches packed words") {
  PackedLayout l{32, 100, 70, 4};
  const auto sched = tile_schedule(l, 32);
  REQUIRE(sched.size() == l.out_tiles() * l.in_tiles());
  std::size_t flushes = 0, k = 0;
  for (std::size_t r = 0; r < l.out_tiles(); ++r)
    for (std::size_t c = 0; c < l.in_tiles(); ++c, ++k) {
      CHECK(sched[k].row_tile == r);
      CHECK(sched[k].col_tile == c);
      CHECK(sched[k].reset == (c == 0));
      CHECK(sched[k].flush == (c + 1 == l.in_tiles()));
      CHECK(sched[k].first_block == (r * 32 * 70 + c * 32) / 32);
      flushes += sched[k].flush;
    }
  CHECK(flushes == l.out_tiles());
}

TEST_CASE("tile config validation") {
  const auto cb = default_codebook();
  CHECK_NOTHROW((TileConfig{32, 8}.validate(cb, 32)));
  CHECK_THROWS_AS((TileConfig{24, 8}.validate(cb, 32)), ValidationError);
  CHECK_THROWS_AS((TileConfig{32, 3}.validate(cb, 32)), ValidationError);
  CHECK_THROWS_AS((TileConfig{32, 8}.validate(cb, 0)), ValidationError);
  CHECK_THROWS_AS((TileConfig{64, 20}.validate(cb, 64)), ValidationError);  // i32 overflow bound
  const auto qw = quantize_weights(MatrixF(4, 4, 1.0f), 4, cb);
  const auto layer = make_quantized_linear("m", qw, {}, Activation::none, {16, 8}, cb);
  CHECK_THROWS_AS(linear_forward_quantized(MatrixF(1, 4, 1.0f), layer, cb, {32, 8}), ValidationError);
}

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "test_util.hpp"
#include "vimq/ssm_engine.hpp"

using namespace vimq;

namespace {

template <class T>
SsmParamsT<T> mamba_params(std::size_t L, std::size_t D, std::size_t N, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> dt(-4.0, 1.0);
  SsmParamsT<T> p;
  p.u = Mat<T>(L, D);
  p.delta = Mat<T>(L, D);
  p.z = Mat<T>(L, D);
  p.A = Mat<T>(D, N);
  p.B = Mat<T>(L, N);
  p.C = Mat<T>(L, N);
  p.d_skip.resize(D);
  for (auto& v : p.u.data) v = static_cast<T>(g(rng));
  for (auto& v : p.delta.data) v = static_cast<T>(std::log1p(std::exp(dt(rng))));
  for (auto& v : p.z.data) v = static_cast<T>(g(rng));
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t n = 0; n < N; ++n) p.A(d, n) = static_cast<T>(-static_cast<double>(n + 1) * (0.5 + 0.5 * std::fabs(g(rng))));
  for (auto& v : p.B.data) v = static_cast<T>(g(rng));
  for (auto& v : p.C.data) v = static_cast<T>(g(rng));
  for (auto& v : p.d_skip) v = static_cast<T>(g(rng));
  return p;
}

// Plain sequential loop in double, independent of the engine's stage functions.
Mat<double> sequential_oracle(const SsmParams& p) {
  const std::size_t L = p.length(), D = p.features(), N = p.states();
  Mat<double> out(L, D), h(D, N, 0.0);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      double y = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        h(d, n) = h(d, n) * std::exp(double(p.delta(t, d)) * p.A(d, n)) + double(p.delta(t, d)) * p.u(t, d) * p.B(t, n);
        y += h(d, n) * p.C(t, n);
      }
      out(t, d) = (y + double(p.u(t, d)) * p.d_skip[d]) * p.z(t, d);
    }
  return out;
}

/// Source that checks strictly ascending, single-pass consumption.
class CheckingSource final : public SsmTokenSource<float> {
 public:
  explicit CheckingSource(const SsmParams& p) : inner_(p) {}
  bool next(SsmTokenView<float>& out) override {
    if (!inner_.next(out)) return false;
    ordered_ = ordered_ && out.t == pulled_;
    ++pulled_;
    return true;
  }
  std::size_t pulled_ = 0;
  bool ordered_ = true;

 private:
  ParamsTokenSource<float> inner_;
};

}  // namespace

TEST_CASE("discretize") {
  const std::vector<float> A{-1.0f, -2.0f}, B{2.0f, 3.0f};
  std::vector<float> Abar(2), Bu(2);
  discretize<float>(0.0f, 5.0f, A, B, ExpMode::exact, Abar, Bu);
  CHECK(Abar == std::vector<float>{1, 1});
  CHECK(Bu == std::vector<float>{0, 0});
  discretize<float>(1.0f, 1.0f, std::span(A).first(1), std::span(B).first(1), ExpMode::exact, std::span(Abar).first(1),
                    std::span(Bu).first(1));
  CHECK(Abar[0] == std::exp(-1.0f));
  CHECK(Bu[0] == 2.0f);
}

TEST_CASE("exp approximation error over [-16, 0]") {
  double worst = 0.0;
  for (int k = 0; k <= 160000; ++k) {
    const double x = -16.0 * k / 160000.0;
    worst = std::max(worst, std::fabs(exp_approx(x) - std::exp(x)) / std::exp(x));
    const float xf = static_cast<float>(x);
    worst = std::max(worst, std::fabs(double(exp_approx(xf)) - std::exp(double(xf))) / std::exp(double(xf)));
  }
  CHECK(worst <= 1e-3);
  CHECK(exp_approx(0.0) == 1.0);
  CHECK(exp_approx(3.0) == 1.0);
  CHECK(exp_approx(-100.0) == exp_approx(-16.0));
}

TEST_CASE("state update") {
  std::vector<float> h{1, 2, 3};
  state_update<float>(h, std::vector<float>{0, 0, 0}, std::vector<float>{4, 5, 6});
  CHECK(h == std::vector<float>{4, 5, 6});
  state_update<float>(h, std::vector<float>{1, 1, 1}, std::vector<float>{0, 0, 0});
  CHECK(h == std::vector<float>{4, 5, 6});
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    auto hv = testing::random_vector(16, rng, -2, 2);
    const auto a = testing::random_vector(16, rng, 0, 1), b = testing::random_vector(16, rng, -1, 1);
    std::vector<float> want(16);
    for (std::size_t n = 0; n < 16; ++n) {
      const float prod = hv[n] * a[n];
      want[n] = prod + b[n];
    }
    state_update<float>(hv, a, b);
    CHECK(hv == want);
  }
}

TEST_CASE("state projection") {
  std::vector<float> h(16);
  for (std::size_t n = 0; n < 16; ++n) h[n] = static_cast<float>(n) * 1.5f;
  std::vector<float> e(16, 0.0f);
  e[5] = 1.0f;
  CHECK(state_project<float>(h, e, 16) == h[5]);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto hv = testing::random_vector(16, rng, -3, 3), c = testing::random_vector(16, rng, -3, 3);
    float naive = 0.0f;
    for (std::size_t n = 0; n < 16; ++n) {
      const float p = hv[n] * c[n];
      naive = naive + p;
    }
    for (std::uint32_t nb : {1u, 4u, 5u, 16u, 32u}) CHECK(state_project<float>(hv, c, nb) == naive);
  }
}

TEST_CASE("fused output") {
  const std::vector<float> y{1, 2}, u{3, 4}, one{1, 1}, zero{0, 0};
  std::vector<float> out(2);
  fused_output<float>(y, u, zero, one, out);
  CHECK(out == y);
  fused_output<float>(zero, u, one, one, out);
  CHECK(out == u);
  std::mt19937_64 rng(3);
  const auto a = testing::random_vector(64, rng, -2, 2), b = testing::random_vector(64, rng, -2, 2),
             d = testing::random_vector(64, rng, -2, 2), z = testing::random_vector(64, rng, -2, 2);
  std::vector<float> got(64), want(64);
  fused_output<float>(a, b, d, z, got);
  for (std::size_t i = 0; i < 64; ++i) {
    const float skip = b[i] * d[i];
    const float sum = a[i] + skip;
    want[i] = sum * z[i];
  }
  CHECK(got == want);
}

TEST_CASE("ssm_forward: single step and zero delta") {
  std::mt19937_64 rng(4);
  auto p = mamba_params<float>(1, 8, 16, rng);
  const auto out = ssm_forward(p);
  for (std::size_t d = 0; d < 8; ++d) {
    double y = 0.0;
    for (std::size_t n = 0; n < 16; ++n) y += double(p.delta(0, d)) * p.u(0, d) * p.B(0, n) * p.C(0, n);
    CHECK(out(0, d) == doctest::Approx((y + p.u(0, d) * p.d_skip[d]) * p.z(0, d)).epsilon(1e-5));
  }
  auto q = mamba_params<float>(20, 8, 16, rng);
  for (auto& v : q.delta.data) v = 0.0f;
  const auto o2 = ssm_forward(q);
  for (std::size_t t = 0; t < 20; ++t)
    for (std::size_t d = 0; d < 8; ++d) CHECK(o2(t, d) == (q.u(t, d) * q.d_skip[d]) * q.z(t, d));
}

TEST_CASE("ssm_forward matches the scan oracle and the sequential loop") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t L = trial == 0 ? 256 : 1 + rng() % 300, D = trial == 0 ? 64 : 1 + rng() % 64;
    const auto p = mamba_params<float>(L, D, 16, rng);
    const auto got = ssm_forward(p);
    CHECK(testing::rel_l2(got.data, ssm_scan_oracle(p).data) <= 1e-5);
    CHECK(testing::rel_l2(got.data, sequential_oracle(p).data) <= 1e-5);
    const auto p64 = mamba_params<double>(L, D, 16, rng);
    CHECK(testing::rel_l2(ssm_forward(p64).data, ssm_scan_oracle(p64).data) <= 1e-12);
  }
}

TEST_CASE("scan oracle: two-step expansion and prefix-sum degeneration") {
  SsmParams64 p;
  p.u = Mat<double>(2, 1, std::vector<double>{1.0, 2.0});
  p.delta = Mat<double>(2, 1, std::vector<double>{0.5, 0.25});
  p.A = Mat<double>(1, 1, std::vector<double>{-1.0});
  p.B = Mat<double>(2, 1, std::vector<double>{3.0, -1.0});
  p.C = Mat<double>(2, 1, std::vector<double>{1.0, 1.0});
  p.d_skip = {0.0};
  p.z = Mat<double>(2, 1, 1.0);
  const double a2 = std::exp(-0.25), bu1 = 0.5 * 1.0 * 3.0, bu2 = 0.25 * 2.0 * -1.0;
  const auto o = ssm_scan_oracle(p);
  CHECK(o(1, 0) == doctest::Approx(a2 * bu1 + bu2).epsilon(1e-15));

  p.A = Mat<double>(1, 1, 0.0);  // Abar = 1
  const auto s = ssm_scan_oracle(p);
  CHECK(s(0, 0) == doctest::Approx(bu1));
  CHECK(s(1, 0) == doctest::Approx(bu1 + bu2));
}

TEST_CASE("state tiling and exp mode") {
  std::mt19937_64 rng(6);
  const auto p = mamba_params<float>(64, 16, 16, rng);
  const auto ref = ssm_forward(p, {16});
  for (std::uint32_t nb : {1u, 4u, 8u, 5u}) CHECK(testing::bit_equal(ssm_forward(p, {nb}), ref));
  SsmOptions approx;
  approx.exp_mode = ExpMode::approx;
  CHECK(testing::rel_l2(ssm_forward(p, approx).data, ref.data) <= 5e-3);
}

TEST_CASE("linearity in u") {
  std::mt19937_64 rng(7);
  auto p = mamba_params<float>(48, 12, 16, rng);
  std::fill(p.d_skip.begin(), p.d_skip.end(), 0.0f);
  std::fill(p.z.data.begin(), p.z.data.end(), 1.0f);
  auto p2 = p, p12 = p;
  std::normal_distribution<float> g;
  for (std::size_t i = 0; i < p.u.size(); ++i) {
    p2.u.data[i] = g(rng);
    p12.u.data[i] = p.u.data[i] + p2.u.data[i];
  }
  const auto a = ssm_forward(p), b = ssm_forward(p2), ab = ssm_forward(p12);
  std::vector<float> sum(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) sum[i] = a.data[i] + b.data[i];
  CHECK(testing::rel_l2(ab.data, sum) <= 1e-5);
}

TEST_CASE("token-major streaming contract") {
  std::mt19937_64 rng(8);
  const auto p = mamba_params<float>(33, 6, 16, rng);
  CheckingSource src(p);
  EngineCounters c;
  const auto out = ssm_forward_stream<float>(src, p.length(), p.A, p.d_skip, {}, &c);
  CHECK(src.ordered_);
  CHECK(src.pulled_ == 33);
  CHECK(testing::bit_equal(out, ssm_forward(p)));
  CHECK(c.tokens == 33);
  CHECK(c.state_updates == 33u * 6u * 16u);
}

TEST_CASE("non-finite state is reported with coordinates") {
  std::mt19937_64 rng(9);
  auto p = mamba_params<float>(10, 4, 16, rng);
  p.A(2, 3) = 200.0f;  // exp(delta * 200) overflows quickly
  for (std::size_t t = 0; t < 10; ++t) p.delta(t, 2) = 1.0f;
  try {
    ssm_forward(p);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("d=2") != std::string::npos);
  }
  auto bad = p;
  bad.B = Mat<float>(3, 16);
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("trace dump") {
  std::mt19937_64 rng(10);
  const auto p = mamba_params<float>(12, 2, 4, rng);
  std::ostringstream os;
  SsmOptions o;
  o.trace_every = 4;
  o.trace = &os;
  ssm_forward(p, o);
  std::istringstream is(os.str());
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    CHECK(line.front() == '{');
    ++lines;
  }
  CHECK(lines == 3);
}

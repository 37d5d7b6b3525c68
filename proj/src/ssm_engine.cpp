#include "vimq/ssm_engine.hpp"

#include <array>
#include <cmath>
#include <string>

#include <json.hpp>

namespace vimq {

namespace {

constexpr int kExpSegments = 256;
constexpr double kExpLow = -16.0;

template <class T>
const std::array<T, kExpSegments + 1>& exp_table() {
  static const auto table = [] {
    std::array<T, kExpSegments + 1> t{};
    for (int k = 0; k <= kExpSegments; ++k)
      t[k] = static_cast<T>(std::exp(kExpLow + (-kExpLow) * k / kExpSegments));
    return t;
  }();
  return table;
}

template <class T>
T exp_approx_impl(T x) {
  const auto& table = exp_table<T>();
  if (!(x < T(0))) return table[kExpSegments];
  if (!(x > T(kExpLow))) return table[0];
  const T pos = (x - T(kExpLow)) * T(kExpSegments / -kExpLow);
  auto k = static_cast<int>(pos);
  if (k >= kExpSegments) k = kExpSegments - 1;
  const T frac = pos - static_cast<T>(k);
  return table[k] + (table[k + 1] - table[k]) * frac;
}

template <class T>
bool all_finite(std::span<const T> v) {
  for (T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

void check_shape(bool ok, const char* what) {
  if (!ok) throw ValidationError(std::string("SSM parameter shape mismatch: ") + what);
}

}  // namespace

float exp_approx(float x) { return exp_approx_impl(x); }
double exp_approx(double x) { return exp_approx_impl(x); }

template <class T>
void SsmParamsT<T>::validate() const {
  const std::size_t L = u.rows, D = u.cols, N = A.cols;
  check_shape(L >= 1, "sequence length must be >= 1");
  check_shape(delta.rows == L && delta.cols == D, "delta must be [L, D_f]");
  check_shape(z.rows == L && z.cols == D, "z must be [L, D_f]");
  check_shape(A.rows == D && N >= 1, "A must be [D_f, N]");
  check_shape(B.rows == L && B.cols == N, "B must be [L, N]");
  check_shape(C.rows == L && C.cols == N, "C must be [L, N]");
  check_shape(d_skip.size() == D, "skip parameter must have D_f entries");
  for (const auto* m : {&u, &delta, &A, &B, &C, &z})
    if (!all_finite<T>(m->data)) throw ValidationError("SSM parameters must be finite");
  if (!all_finite<T>(d_skip)) throw ValidationError("SSM parameters must be finite");
}

template <class T>
void discretize(T delta, T u, std::span<const T> A_row, std::span<const T> B_t, ExpMode mode, std::span<T> Abar,
                std::span<T> Bbar_u) {
  const T du = delta * u;
  for (std::size_t n = 0; n < A_row.size(); ++n) {
    const T arg = delta * A_row[n];
    Abar[n] = mode == ExpMode::exact ? std::exp(arg) : exp_approx(arg);
    Bbar_u[n] = du * B_t[n];
  }
}

template <class T>
void state_update(std::span<T> h, std::span<const T> Abar, std::span<const T> Bbar_u) {
  for (std::size_t n = 0; n < h.size(); ++n) h[n] = h[n] * Abar[n] + Bbar_u[n];
}

template <class T>
T state_project(std::span<const T> h, std::span<const T> C, std::uint32_t state_tile) {
  if (state_tile == 0) throw ValidationError("state tile N_B must be >= 1");
  if (h.size() != C.size()) throw ValidationError("state and C_t lengths differ");
  T acc = 0;
  std::array<T, 64> lanes{};
  for (std::size_t base = 0; base < h.size(); base += state_tile) {
    const std::size_t width = std::min<std::size_t>(state_tile, h.size() - base);
    // Products of one tile are formed in parallel lanes, then folded in order.
    for (std::size_t start = 0; start < width; start += lanes.size()) {
      const std::size_t chunk = std::min(lanes.size(), width - start);
      for (std::size_t k = 0; k < chunk; ++k) lanes[k] = h[base + start + k] * C[base + start + k];
      for (std::size_t k = 0; k < chunk; ++k) acc += lanes[k];
    }
  }
  return acc;
}

template <class T>
void fused_output(std::span<const T> y, std::span<const T> u, std::span<const T> d_skip, std::span<const T> z,
                  std::span<T> out) {
  if (u.size() != y.size() || d_skip.size() != y.size() || z.size() != y.size() || out.size() != y.size())
    throw ValidationError("fused output operands differ in length");
  for (std::size_t d = 0; d < y.size(); ++d) out[d] = (y[d] + u[d] * d_skip[d]) * z[d];
}

template <class T>
bool ParamsTokenSource<T>::next(SsmTokenView<T>& out) {
  if (t_ >= p_.length()) return false;
  out.t = t_;
  out.u = p_.u.row(t_);
  out.delta = p_.delta.row(t_);
  out.B = p_.B.row(t_);
  out.C = p_.C.row(t_);
  out.z = p_.z.row(t_);
  ++t_;
  return true;
}

template <class T>
Mat<T> ssm_forward_stream(SsmTokenSource<T>& source, std::size_t length, const Mat<T>& A, std::span<const T> d_skip,
                          const SsmOptions& opts, EngineCounters* counters) {
  if (opts.state_tile == 0) throw ValidationError("state tile N_B must be >= 1");
  const std::size_t D = A.rows, N = A.cols, NB = opts.state_tile;
  if (d_skip.size() != D) throw ValidationError("skip parameter must have D_f entries");

  Mat<T> h(D, N, T(0));  // h_0 = 0
  Mat<T> out(length, D);
  std::vector<T> abar(NB), bbar(NB), y(D);
  std::size_t t = 0;
  SsmTokenView<T> tok;
  for (; t < length; ++t) {
    if (!source.next(tok)) throw ValidationError("SSM token stream ended early at t=" + std::to_string(t));
    if (tok.t != t) throw ValidationError("SSM token stream out of order");
    if (tok.u.size() != D || tok.delta.size() != D || tok.z.size() != D || tok.B.size() != N || tok.C.size() != N)
      throw ValidationError("SSM token view has the wrong width at t=" + std::to_string(t));

    // Stage 1 (discretise + recurrence) and stage 2 (projection) per channel.
    for (std::size_t d = 0; d < D; ++d) {
      auto hd = h.row(d);
      const auto a_row = A.row(d);
      for (std::size_t base = 0; base < N; base += NB) {
        const std::size_t w = std::min(NB, N - base);
        std::span<T> ab(abar.data(), w), bu(bbar.data(), w);
        discretize<T>(tok.delta[d], tok.u[d], a_row.subspan(base, w), tok.B.subspan(base, w), opts.exp_mode, ab, bu);
        state_update<T>(hd.subspan(base, w), ab, bu);
      }
      if (!all_finite<T>(hd))
        throw NumericalError("non-finite SSM state at (t=" + std::to_string(t) + ", d=" + std::to_string(d) + ")");
      y[d] = state_project<T>(hd, tok.C, opts.state_tile);
    }
    // Stage 3.
    auto o = out.row(t);
    fused_output<T>(y, tok.u, d_skip, tok.z, o);
    for (std::size_t d = 0; d < D; ++d)
      if (!std::isfinite(o[d]))
        throw NumericalError("non-finite SSM output at (t=" + std::to_string(t) + ", d=" + std::to_string(d) + ")");

    if (opts.trace && opts.trace_every && (t + 1) % opts.trace_every == 0) {
      nlohmann::json j;
      j["t"] = t;
      j["h"] = nlohmann::json::array();
      for (std::size_t d = 0; d < D; ++d) {
        auto r = h.row(d);
        j["h"].push_back(std::vector<T>(r.begin(), r.end()));
      }
      *opts.trace << j.dump() << '\n';
    }
  }
  if (counters) {
    EngineCounters c;
    c.tokens = length;
    c.tiles = length * D * ceil_div(N, NB);
    c.state_updates = length * D * N;
    c.macs = 2 * length * D * N;
    *counters += c;
  }
  return out;
}

template <class T>
Mat<T> ssm_forward(const SsmParamsT<T>& params, const SsmOptions& opts, EngineCounters* counters) {
  params.validate();
  ParamsTokenSource<T> source(params);
  return ssm_forward_stream<T>(source, params.length(), params.A, params.d_skip, opts, counters);
}

template <class T>
Mat<T> ssm_scan_oracle(const SsmParamsT<T>& p) {
  p.validate();
  const std::size_t L = p.length(), D = p.features(), N = p.states();
  // h[(t * D + d) * N + n] after the scan.
  std::vector<T> hs(L * D * N);
  std::vector<T> a(L), b(L);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t t = 0; t < L; ++t) {
        const T dt = p.delta(t, d);
        a[t] = std::exp(dt * p.A(d, n));
        b[t] = (dt * p.u(t, d)) * p.B(t, n);
      }
      // Inclusive Hillis-Steele scan with (a1, b1) . (a2, b2) = (a1 a2, a2 b1 + b2).
      for (std::size_t off = 1; off < L; off <<= 1)
        for (std::size_t t = L - 1; t >= off; --t) {
          b[t] = a[t] * b[t - off] + b[t];
          a[t] = a[t - off] * a[t];
          if (t == off) break;
        }
      for (std::size_t t = 0; t < L; ++t) hs[(t * D + d) * N + n] = b[t];
    }
  }
  Mat<T> out(L, D);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      T y = 0;
      for (std::size_t n = 0; n < N; ++n) y += hs[(t * D + d) * N + n] * p.C(t, n);
      out(t, d) = (y + p.u(t, d) * p.d_skip[d]) * p.z(t, d);
    }
  return out;
}

#define VIMQ_INSTANTIATE_SSM(T)                                                                                  \
  template struct SsmParamsT<T>;                                                                                 \
  template class ParamsTokenSource<T>;                                                                           \
  template void discretize<T>(T, T, std::span<const T>, std::span<const T>, ExpMode, std::span<T>, std::span<T>); \
  template void state_update<T>(std::span<T>, std::span<const T>, std::span<const T>);                           \
  template T state_project<T>(std::span<const T>, std::span<const T>, std::uint32_t);                            \
  template void fused_output<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::span<const T>,  \
                                std::span<T>);                                                                   \
  template Mat<T> ssm_forward_stream<T>(SsmTokenSource<T>&, std::size_t, const Mat<T>&, std::span<const T>,      \
                                        const SsmOptions&, EngineCounters*);                                     \
  template Mat<T> ssm_forward<T>(const SsmParamsT<T>&, const SsmOptions&, EngineCounters*);                      \
  template Mat<T> ssm_scan_oracle<T>(const SsmParamsT<T>&);

VIMQ_INSTANTIATE_SSM(float)
VIMQ_INSTANTIATE_SSM(double)

}  // namespace vimq

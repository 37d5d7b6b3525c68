#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "vimq/common.hpp"
#include "vimq/counters.hpp"

namespace vimq {

enum class ExpMode : std::uint8_t {
  exact,   // library exponential
  approx,  // 256-segment table with linear interpolation over [-16, 0]
};

/// Inputs of one selective-SSM invocation. `d_skip` is the skip parameter
/// (the feature width is written D_f in comments).
template <class T>
struct SsmParamsT {
  Mat<T> u;      // [L, D_f]
  Mat<T> delta;  // [L, D_f]
  Mat<T> A;      // [D_f, N], time invariant
  Mat<T> B;      // [L, N]
  Mat<T> C;      // [L, N]
  std::vector<T> d_skip;  // [D_f]
  Mat<T> z;      // [L, D_f]

  std::size_t length() const { return u.rows; }
  std::size_t features() const { return u.cols; }
  std::size_t states() const { return A.cols; }
  void validate() const;
};

using SsmParams = SsmParamsT<float>;
using SsmParams64 = SsmParamsT<double>;

struct SsmOptions {
  std::uint32_t state_tile = 16;  // N_B
  ExpMode exp_mode = ExpMode::exact;
  /// Dump h every `trace_every` tokens as JSON lines (0 disables).
  std::uint32_t trace_every = 0;
  std::ostream* trace = nullptr;
};

/// exp via the table-plus-interpolation approximation. Inputs above 0 clamp
/// to 0, inputs below -16 clamp to -16.
float exp_approx(float x);
double exp_approx(double x);

// Stage 1 -------------------------------------------------------------------

/// Abar[n] = exp(delta * A[n]); Bbar_u[n] = (delta * u) * B[n].
template <class T>
void discretize(T delta, T u, std::span<const T> A_row, std::span<const T> B_t, ExpMode mode, std::span<T> Abar,
                std::span<T> Bbar_u);

/// h = h * Abar + Bbar_u, elementwise (in place).
template <class T>
void state_update(std::span<T> h, std::span<const T> Abar, std::span<const T> Bbar_u);

// Stage 2 -------------------------------------------------------------------

/// y = sum_n h[n] * C[n]. Lanes of `state_tile` products are folded into one
/// running sum in ascending n, so the result does not depend on state_tile.
template <class T>
T state_project(std::span<const T> h, std::span<const T> C, std::uint32_t state_tile);

// Stage 3 -------------------------------------------------------------------

/// out = (y + u * d_skip) * z, elementwise.
template <class T>
void fused_output(std::span<const T> y, std::span<const T> u, std::span<const T> d_skip, std::span<const T> z,
                  std::span<T> out);

/// One token's worth of streamed inputs.
template <class T>
struct SsmTokenView {
  std::size_t t = 0;
  std::span<const T> u, delta, B, C, z;
};

/// Token-major input stream. The engine pulls each token exactly once, in
/// ascending order.
template <class T>
class SsmTokenSource {
 public:
  virtual ~SsmTokenSource() = default;
  virtual bool next(SsmTokenView<T>& out) = 0;
};

template <class T>
class ParamsTokenSource final : public SsmTokenSource<T> {
 public:
  explicit ParamsTokenSource(const SsmParamsT<T>& p) : p_(p) {}
  bool next(SsmTokenView<T>& out) override;

 private:
  const SsmParamsT<T>& p_;
  std::size_t t_ = 0;
};

/// Spatial-recurrent dataflow over a token stream: sequential in t, with all
/// feature channels and state tiles of a token processed together. Throws
/// NumericalError naming (t, d) on the first non-finite state or output.
template <class T>
Mat<T> ssm_forward_stream(SsmTokenSource<T>& source, std::size_t length, const Mat<T>& A,
                          std::span<const T> d_skip, const SsmOptions& opts, EngineCounters* counters = nullptr);

template <class T>
Mat<T> ssm_forward(const SsmParamsT<T>& params, const SsmOptions& opts = {}, EngineCounters* counters = nullptr);

/// Correctness oracle: the same recurrence evaluated channel-major with a
/// parallel-prefix scan over (Abar, Bbar_u) pairs, exact exponential.
template <class T>
Mat<T> ssm_scan_oracle(const SsmParamsT<T>& params);

}  // namespace vimq

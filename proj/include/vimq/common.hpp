#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vimq {

/// Malformed input, bad configuration or contract violation by the caller.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical invariant broke at runtime (non-finite state, accumulator overflow).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major 2-D array. Used for token matrices [L, C] and weight
/// matrices [out, in].
template <class T>
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}
  Mat(std::size_t r, std::size_t c, std::vector<T> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ValidationError("matrix data size does not match shape");
  }

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool operator==(const Mat&) const = default;
};

using MatrixF = Mat<float>;
using MatrixD = Mat<double>;
using CodeMatrix = Mat<std::uint8_t>;

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

/// Worker count: VIMQ_THREADS if set and positive, else hardware concurrency.
unsigned worker_threads();

/// Runs fn(i) for i in [0, n) across worker_threads(). Each index is handled by
/// exactly one worker, so results are deterministic as long as fn only writes
/// to index-owned state.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace vimq

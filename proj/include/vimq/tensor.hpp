#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "vimq/common.hpp"

namespace vimq {

enum class DType : std::uint8_t {
  f32 = 0,
  i8 = 1,
  i32 = 2,
  u4 = 3,  // two codes per byte, low nibble first
  u8 = 4,
};

std::string_view dtype_name(DType dt);
/// Bytes occupied by `count` elements of `dt` (u4 rounds up to whole bytes).
std::size_t storage_bytes(DType dt, std::size_t count);

/// Typed, shaped, contiguous row-major buffer. Storage is little-endian bytes
/// so a Tensor can be written to disk without conversion.
class Tensor {
 public:
  Tensor() = default;

  static Tensor f32(std::vector<std::int64_t> shape, std::span<const float> values);
  static Tensor i8(std::vector<std::int64_t> shape, std::span<const std::int8_t> values);
  static Tensor i32(std::vector<std::int64_t> shape, std::span<const std::int32_t> values);
  static Tensor u8(std::vector<std::int64_t> shape, std::span<const std::uint8_t> values);
  /// One code per element in `codes`, each < 16.
  static Tensor u4(std::vector<std::int64_t> shape, std::span<const std::uint8_t> codes);
  /// Wraps raw little-endian storage; validates size and i8 range.
  static Tensor from_bytes(DType dt, std::vector<std::int64_t> shape, std::vector<std::uint8_t> bytes);

  static Tensor from_matrix(const MatrixF& m);
  MatrixF to_matrix() const;

  DType dtype() const { return dtype_; }
  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::size_t numel() const;
  std::span<const std::uint8_t> bytes() const { return bytes_; }

  std::vector<float> to_f32() const;
  std::vector<std::int8_t> to_i8() const;
  std::vector<std::int32_t> to_i32() const;
  /// u8 or u4 tensors as one value per element.
  std::vector<std::uint8_t> to_u8() const;

  bool operator==(const Tensor&) const = default;

 private:
  Tensor(DType dt, std::vector<std::int64_t> shape, std::vector<std::uint8_t> bytes);

  std::vector<std::int64_t> shape_;
  DType dtype_ = DType::f32;
  std::vector<std::uint8_t> bytes_;
};

std::size_t shape_numel(std::span<const std::int64_t> shape);

}  // namespace vimq

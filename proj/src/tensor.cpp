#include "vimq/tensor.hpp"

#include <bit>
#include <cstring>
#include <string>

namespace vimq {

static_assert(std::endian::native == std::endian::little, "vimq storage assumes a little-endian host");

std::string_view dtype_name(DType dt) {
  switch (dt) {
    case DType::f32: return "f32";
    case DType::i8: return "i8";
    case DType::i32: return "i32";
    case DType::u4: return "u4";
    case DType::u8: return "u8";
  }
  return "?";
}

std::size_t storage_bytes(DType dt, std::size_t count) {
  switch (dt) {
    case DType::f32:
    case DType::i32: return count * 4;
    case DType::i8:
    case DType::u8: return count;
    case DType::u4: return (count + 1) / 2;
  }
  throw ValidationError("unsupported dtype");
}

std::size_t shape_numel(std::span<const std::int64_t> shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ValidationError("negative dimension in tensor shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(DType dt, std::vector<std::int64_t> shape, std::vector<std::uint8_t> bytes)
    : shape_(std::move(shape)), dtype_(dt), bytes_(std::move(bytes)) {}

std::size_t Tensor::numel() const { return shape_numel(shape_); }

namespace {

template <class T>
std::vector<std::uint8_t> copy_bytes(std::span<const T> values) {
  std::vector<std::uint8_t> out(values.size_bytes());
  if (!out.empty()) std::memcpy(out.data(), values.data(), out.size());
  return out;
}

void check_count(std::span<const std::int64_t> shape, std::size_t n) {
  if (shape_numel(shape) != n) throw ValidationError("tensor value count does not match shape");
}

}  // namespace

Tensor Tensor::f32(std::vector<std::int64_t> shape, std::span<const float> values) {
  check_count(shape, values.size());
  return Tensor(DType::f32, std::move(shape), copy_bytes(values));
}

Tensor Tensor::i8(std::vector<std::int64_t> shape, std::span<const std::int8_t> values) {
  check_count(shape, values.size());
  for (auto v : values)
    if (v == -128) throw ValidationError("i8 tensors use the symmetric range [-127, 127]");
  return Tensor(DType::i8, std::move(shape), copy_bytes(values));
}

Tensor Tensor::i32(std::vector<std::int64_t> shape, std::span<const std::int32_t> values) {
  check_count(shape, values.size());
  return Tensor(DType::i32, std::move(shape), copy_bytes(values));
}

Tensor Tensor::u8(std::vector<std::int64_t> shape, std::span<const std::uint8_t> values) {
  check_count(shape, values.size());
  return Tensor(DType::u8, std::move(shape), copy_bytes(values));
}

Tensor Tensor::u4(std::vector<std::int64_t> shape, std::span<const std::uint8_t> codes) {
  check_count(shape, codes.size());
  std::vector<std::uint8_t> packed(storage_bytes(DType::u4, codes.size()), 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] > 0xF) throw ValidationError("u4 code out of range");
    packed[i / 2] |= static_cast<std::uint8_t>(codes[i] << ((i & 1) * 4));
  }
  return Tensor(DType::u4, std::move(shape), std::move(packed));
}

Tensor Tensor::from_bytes(DType dt, std::vector<std::int64_t> shape, std::vector<std::uint8_t> bytes) {
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != storage_bytes(dt, n))
    throw ValidationError("tensor byte size does not match shape for dtype " + std::string(dtype_name(dt)));
  if (dt == DType::i8) {
    for (auto b : bytes)
      if (b == 0x80) throw ValidationError("i8 tensors use the symmetric range [-127, 127]");
  }
  if (dt == DType::u4 && (n & 1) && !bytes.empty() && (bytes.back() & 0xF0))
    throw ValidationError("u4 tensor has a non-zero trailing pad nibble");
  return Tensor(dt, std::move(shape), std::move(bytes));
}

Tensor Tensor::from_matrix(const MatrixF& m) {
  return f32({static_cast<std::int64_t>(m.rows), static_cast<std::int64_t>(m.cols)}, m.data);
}

MatrixF Tensor::to_matrix() const {
  if (shape_.size() != 2) throw ValidationError("expected a rank-2 tensor");
  return MatrixF(static_cast<std::size_t>(shape_[0]), static_cast<std::size_t>(shape_[1]), to_f32());
}

std::vector<float> Tensor::to_f32() const {
  if (dtype_ != DType::f32) throw ValidationError("tensor is not f32");
  std::vector<float> out(numel());
  if (!out.empty()) std::memcpy(out.data(), bytes_.data(), bytes_.size());
  return out;
}

std::vector<std::int8_t> Tensor::to_i8() const {
  if (dtype_ != DType::i8) throw ValidationError("tensor is not i8");
  std::vector<std::int8_t> out(numel());
  if (!out.empty()) std::memcpy(out.data(), bytes_.data(), bytes_.size());
  return out;
}

std::vector<std::int32_t> Tensor::to_i32() const {
  if (dtype_ != DType::i32) throw ValidationError("tensor is not i32");
  std::vector<std::int32_t> out(numel());
  if (!out.empty()) std::memcpy(out.data(), bytes_.data(), bytes_.size());
  return out;
}

std::vector<std::uint8_t> Tensor::to_u8() const {
  if (dtype_ == DType::u8) return bytes_;
  if (dtype_ != DType::u4) throw ValidationError("tensor is not u8/u4");
  std::vector<std::uint8_t> out(numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (bytes_[i / 2] >> ((i & 1) * 4)) & 0xF;
  return out;
}

}  // namespace vimq

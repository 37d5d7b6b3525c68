#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vimq/tensor.hpp"

namespace vimq {

/// `.vimq` model container, little-endian:
///
///   "VIMQ" | u16 version | u32 entry_count
///   entry_count x { u16 name_len | name (UTF-8) | u8 dtype | u8 rank |
///                   rank x u64 dim | u64 offset | u64 nbytes }
///   u64 payload_size | payload
///
/// Offsets are relative to the start of the payload. Entries are laid out in
/// the order given, without gaps.
inline constexpr std::uint16_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::vector<std::uint8_t> write_container(std::span<const NamedTensor> entries);
std::vector<NamedTensor> read_container(std::span<const std::uint8_t> bytes);

void save_container(const std::filesystem::path& path, std::span<const NamedTensor> entries);
std::vector<NamedTensor> load_container(const std::filesystem::path& path);

/// Name lookup over a loaded container.
class TensorMap {
 public:
  TensorMap() = default;
  explicit TensorMap(std::vector<NamedTensor> entries);

  bool contains(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  const Tensor* find(const std::string& name) const;
  const std::vector<NamedTensor>& entries() const { return entries_; }

 private:
  std::vector<NamedTensor> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace vimq

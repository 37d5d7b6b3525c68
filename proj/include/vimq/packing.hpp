#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vimq/common.hpp"
#include "vimq/container.hpp"

namespace vimq {

inline constexpr std::size_t kWordBits = 256;
inline constexpr std::size_t kWordBytes = kWordBits / 8;
using Word256 = std::array<std::uint8_t, kWordBytes>;

/// Describes how a [out_dim, in_dim] code matrix was reordered into words.
/// Traversal: output-tile rows, then input-tile columns, then the in-tile
/// input index, then the in-tile output index. Both dims are zero-padded up
/// to a multiple of `tile`. Codes are `code_bits` wide (4 or 8), packed
/// low-bits-first into little-endian words.
struct PackedLayout {
  std::uint32_t tile = 32;
  std::uint32_t out_dim = 0;
  std::uint32_t in_dim = 0;
  std::uint32_t code_bits = 4;

  std::size_t out_tiles() const { return ceil_div(out_dim, tile); }
  std::size_t in_tiles() const { return ceil_div(in_dim, tile); }
  std::size_t padded_codes() const { return out_tiles() * in_tiles() * tile * tile; }
  std::size_t codes_per_word() const { return kWordBits / code_bits; }
  std::size_t word_count() const { return ceil_div(padded_codes(), codes_per_word()); }
  bool operator==(const PackedLayout&) const = default;
};

struct PackedWeightBlob {
  PackedLayout layout;
  std::vector<Word256> words;
};

/// Reorders `codes` into sequential words. Padding lanes hold `pad_code`
/// (the positive zero-level code, 0, in the APoT encoding).
PackedWeightBlob pack_weights(const CodeMatrix& codes, std::uint32_t tile, std::uint32_t code_bits = 4,
                              std::uint8_t pad_code = 0);
/// Inverse of pack_weights on the unpadded region.
CodeMatrix unpack_weights(const PackedWeightBlob& blob);

/// Consumes a blob strictly front to back, one code at a time.
class WordReader {
 public:
  explicit WordReader(const PackedWeightBlob& blob);

  std::uint8_t next();
  bool exhausted() const { return index_ >= total_; }
  /// Words touched so far.
  std::size_t words_consumed() const;

 private:
  const PackedWeightBlob& blob_;
  std::size_t index_ = 0;
  std::size_t total_ = 0;
  std::size_t per_word_ = 0;
  std::uint32_t bits_ = 0;
};

/// Serialised form for `.vimqw`: `<name>.words` (u8 [n_words, 32]) and
/// `<name>.layout` (i32 [tile, out_dim, in_dim, code_bits]).
void append_blob(std::vector<NamedTensor>& out, const std::string& name, const PackedWeightBlob& blob);
PackedWeightBlob read_blob(const TensorMap& map, const std::string& name);

}  // namespace vimq

#include "vimq/packing.hpp"

#include <cstring>

namespace vimq {

namespace {

void check_layout(const PackedLayout& l) {
  if (l.tile == 0) throw ValidationError("tile size must be >= 1");
  if (l.code_bits != 4 && l.code_bits != 8) throw ValidationError("code width must be 4 or 8 bits");
}

void put_code(std::vector<Word256>& words, std::size_t k, std::uint32_t bits, std::uint8_t code) {
  const std::size_t bit = k * bits;
  auto& word = words[bit / kWordBits];
  const std::size_t in_word = bit % kWordBits;
  word[in_word / 8] |= static_cast<std::uint8_t>(code << (in_word % 8));
}

std::uint8_t get_code(const std::vector<Word256>& words, std::size_t k, std::uint32_t bits) {
  const std::size_t bit = k * bits;
  const auto& word = words[bit / kWordBits];
  const std::size_t in_word = bit % kWordBits;
  const std::uint8_t mask = bits == 8 ? 0xFF : 0x0F;
  return (word[in_word / 8] >> (in_word % 8)) & mask;
}

}  // namespace

PackedWeightBlob pack_weights(const CodeMatrix& codes, std::uint32_t tile, std::uint32_t code_bits,
                              std::uint8_t pad_code) {
  PackedWeightBlob blob;
  blob.layout = {tile, static_cast<std::uint32_t>(codes.rows), static_cast<std::uint32_t>(codes.cols), code_bits};
  check_layout(blob.layout);
  const std::uint32_t limit = code_bits == 8 ? 0xFF : 0x0F;
  if (pad_code > limit) throw ValidationError("pad code does not fit the code width");

  const auto& l = blob.layout;
  blob.words.assign(l.word_count(), Word256{});
  std::size_t k = 0;
  for (std::size_t rt = 0; rt < l.out_tiles(); ++rt) {
    for (std::size_t ct = 0; ct < l.in_tiles(); ++ct) {
      for (std::size_t i = 0; i < tile; ++i) {
        const std::size_t col = ct * tile + i;
        for (std::size_t o = 0; o < tile; ++o, ++k) {
          const std::size_t row = rt * tile + o;
          std::uint8_t c = pad_code;
          if (row < codes.rows && col < codes.cols) {
            c = codes(row, col);
            if (c > limit) throw ValidationError("weight code does not fit the code width");
          }
          put_code(blob.words, k, code_bits, c);
        }
      }
    }
  }
  return blob;
}

CodeMatrix unpack_weights(const PackedWeightBlob& blob) {
  const auto& l = blob.layout;
  check_layout(l);
  if (blob.words.size() != l.word_count()) throw ValidationError("packed blob word count does not match layout");
  CodeMatrix out(l.out_dim, l.in_dim);
  std::size_t k = 0;
  for (std::size_t rt = 0; rt < l.out_tiles(); ++rt)
    for (std::size_t ct = 0; ct < l.in_tiles(); ++ct)
      for (std::size_t i = 0; i < l.tile; ++i)
        for (std::size_t o = 0; o < l.tile; ++o, ++k) {
          const std::size_t row = rt * l.tile + o, col = ct * l.tile + i;
          if (row < l.out_dim && col < l.in_dim) out(row, col) = get_code(blob.words, k, l.code_bits);
        }
  return out;
}

WordReader::WordReader(const PackedWeightBlob& blob)
    : blob_(blob),
      total_(blob.layout.padded_codes()),
      per_word_(blob.layout.codes_per_word()),
      bits_(blob.layout.code_bits) {
  check_layout(blob.layout);
  if (blob.words.size() != blob.layout.word_count())
    throw ValidationError("packed blob word count does not match layout");
}

std::uint8_t WordReader::next() {
  if (index_ >= total_) throw ValidationError("read past the end of a packed weight blob");
  return get_code(blob_.words, index_++, bits_);
}

std::size_t WordReader::words_consumed() const { return ceil_div(index_, per_word_); }

void append_blob(std::vector<NamedTensor>& out, const std::string& name, const PackedWeightBlob& blob) {
  std::vector<std::uint8_t> raw(blob.words.size() * kWordBytes);
  if (!raw.empty()) std::memcpy(raw.data(), blob.words.data(), raw.size());
  out.push_back({name + ".words", Tensor::u8({static_cast<std::int64_t>(blob.words.size()),
                                               static_cast<std::int64_t>(kWordBytes)},
                                              raw)});
  const std::int32_t meta[4] = {static_cast<std::int32_t>(blob.layout.tile),
                                static_cast<std::int32_t>(blob.layout.out_dim),
                                static_cast<std::int32_t>(blob.layout.in_dim),
                                static_cast<std::int32_t>(blob.layout.code_bits)};
  out.push_back({name + ".layout", Tensor::i32({4}, meta)});
}

PackedWeightBlob read_blob(const TensorMap& map, const std::string& name) {
  const auto meta = map.at(name + ".layout").to_i32();
  if (meta.size() != 4) throw ValidationError("malformed layout descriptor for '" + name + "'");
  for (auto v : meta)
    if (v < 0) throw ValidationError("malformed layout descriptor for '" + name + "'");
  PackedWeightBlob blob;
  blob.layout = {static_cast<std::uint32_t>(meta[0]), static_cast<std::uint32_t>(meta[1]),
                 static_cast<std::uint32_t>(meta[2]), static_cast<std::uint32_t>(meta[3])};
  check_layout(blob.layout);
  const auto raw = map.at(name + ".words").to_u8();
  if (raw.size() % kWordBytes != 0) throw ValidationError("packed words are not 256-bit aligned");
  blob.words.resize(raw.size() / kWordBytes);
  if (!raw.empty()) std::memcpy(blob.words.data(), raw.data(), raw.size());
  if (blob.words.size() != blob.layout.word_count())
    throw ValidationError("packed blob word count does not match layout for '" + name + "'");
  return blob;
}

}  // namespace vimq

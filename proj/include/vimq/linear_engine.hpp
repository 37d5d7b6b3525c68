#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vimq/activation.hpp"
#include "vimq/codebook.hpp"
#include "vimq/common.hpp"
#include "vimq/counters.hpp"
#include "vimq/packing.hpp"
#include "vimq/quantizer.hpp"

namespace vimq {

/// Activations stream as 1 x tile vectors against tile x tile weight tiles.
/// `pre_shift` (F) scales every LUT entry by 2^F so that all APoT products
/// stay integral.
struct TileConfig {
  std::uint32_t tile = 32;
  std::uint32_t pre_shift = 8;

  /// Rejects tiles outside {16, 32, 64}, F below the codebook's largest
  /// exponent, and (tile, block, F) combinations whose block partial sums
  /// could overflow an i32 accumulator.
  void validate(const ApotCodebook& codebook, std::uint32_t block_size) const;
};

/// Precomputed shift results for one activation tile: for element i and
/// magnitude index m, entry = x_i << (F - k_c) + x_i << (F - k_f), i.e.
/// exactly x_i * level_m * 2^F.
class ShiftLutBank {
 public:
  ShiftLutBank() = default;
  ShiftLutBank(std::size_t elements, std::size_t levels) : levels_(levels), entries_(elements * levels, 0) {}

  std::size_t elements() const { return levels_ ? entries_.size() / levels_ : 0; }
  std::size_t levels() const { return levels_; }
  std::span<const std::int32_t> lut(std::size_t i) const { return {entries_.data() + i * levels_, levels_}; }
  std::span<std::int32_t> lut(std::size_t i) { return {entries_.data() + i * levels_, levels_}; }
  const std::int32_t* data() const { return entries_.data(); }

 private:
  std::size_t levels_ = 0;
  std::vector<std::int32_t> entries_;
};

ShiftLutBank precompute_lut(std::span<const std::int8_t> tile, const ApotCodebook& codebook,
                            std::uint32_t pre_shift);
void precompute_lut_into(ShiftLutBank& bank, std::span<const std::int8_t> tile, const ApotCodebook& codebook,
                         std::uint32_t pre_shift);

/// On-demand shift-add for a single (activation, code): the path the LUT
/// replaces.
std::int32_t shift_add_product(std::int8_t x, std::uint8_t code, const ApotCodebook& codebook,
                               std::uint32_t pre_shift);

/// Travels with each LUT broadcast so the PEs stay stateless.
struct PeControlPacket {
  std::uint32_t row_tile = 0;
  std::uint32_t col_tile = 0;
  std::uint64_t first_block = 0;  // block id of the tile's first (row 0, col 0) weight
  bool reset = false;             // first input tile of an output tile
  bool flush = false;             // last input tile of an output tile
};

/// Tile visiting order of the engine; matches the packed-word order.
std::vector<PeControlPacket> tile_schedule(const PackedLayout& layout, std::uint32_t block_size);

/// Which flattened weights one PE lane covers within a tile.
struct LaneSegment {
  std::uint64_t flat_begin = 0;  // row * in_dim + first input column of the tile
  std::uint32_t length = 0;      // valid (unpadded) inputs in the tile
  std::uint32_t block_size = 32;
};

struct BlockPartial {
  std::uint64_t block = 0;
  std::int32_t sum = 0;
};

/// One output lane of the PE array: mux-select each code's LUT entry, apply
/// the sign inverter, and reduce per weight block. Writes the partials in
/// ascending block order and returns their count. Throws NumericalError if a
/// block sum leaves the i32 range.
std::size_t pe_lane_accumulate(const ShiftLutBank& luts, std::span<const std::uint8_t> lane_codes,
                               const LaneSegment& segment, const ApotCodebook& codebook,
                               std::span<BlockPartial> out);

/// acc += sum_b float(partial_b) * block_scale_b, blocks in the given order.
void accumulate_scaled(float& acc, std::span<const BlockPartial> partials, std::span<const float> block_scales);

/// act_scale * 2^-F as one exact multiplier.
float dequant_multiplier(float act_scale, std::uint32_t pre_shift);

/// Row dot product from block partials: (sum_b partial_b * scale_b) * act_scale * 2^-F.
float scale_and_reduce(std::span<const BlockPartial> partials, std::span<const float> block_scales,
                       float act_scale, std::uint32_t pre_shift);

/// A linear layer as the engine sees it: packed codes, per-block scales,
/// bias and a fused activation.
struct QuantizedLinear {
  std::string name;
  PackedWeightBlob blob;
  std::vector<float> block_scales;
  std::uint32_t block_size = 32;
  std::vector<float> bias;  // empty or out_dim
  Activation act = Activation::none;
  ActQuantPolicy act_policy;

  std::size_t in_dim() const { return blob.layout.in_dim; }
  std::size_t out_dim() const { return blob.layout.out_dim; }
};

QuantizedLinear make_quantized_linear(std::string name, const QuantizedWeights& qw, std::vector<float> bias,
                                      Activation act, const TileConfig& cfg, const ApotCodebook& codebook);

struct LinearResult {
  MatrixF y;
  EngineCounters counters;
};

/// Float ground truth: y = act(x W^T + b), each dot product accumulated in
/// ascending input order.
MatrixF linear_forward_reference(const MatrixF& x, const MatrixF& w, std::span<const float> bias,
                                 Activation act);

/// Bit-accurate model of the quantized engine.
LinearResult linear_forward_quantized(const MatrixF& x, const QuantizedLinear& layer, const ApotCodebook& codebook,
                                      const TileConfig& cfg);

/// Analytic counters for a layer call over `tokens` tokens.
EngineCounters linear_counters(const PackedLayout& layout, std::size_t tokens);

}  // namespace vimq

#include "vimq/linear_engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace vimq {

void TileConfig::validate(const ApotCodebook& codebook, std::uint32_t block_size) const {
  if (tile != 16 && tile != 32 && tile != 64)
    throw ValidationError("tile size must be 16, 32 or 64, got " + std::to_string(tile));
  if (block_size == 0) throw ValidationError("block size must be >= 1");
  if (static_cast<int>(pre_shift) < codebook.max_exponent())
    throw ValidationError("pre-shift F=" + std::to_string(pre_shift) + " is below the largest basis exponent " +
                          std::to_string(codebook.max_exponent()) + "; shifted products would truncate");
  if (pre_shift > 20) throw ValidationError("pre-shift F must be <= 20");
  // Largest block partial: min(T, B) inputs of |x| <= 127 at the top level.
  const double bound = static_cast<double>(std::min(tile, block_size)) * 127.0 * codebook.max_level() *
                       std::ldexp(1.0, static_cast<int>(pre_shift));
  if (bound > static_cast<double>(std::numeric_limits<std::int32_t>::max()))
    throw ValidationError("tile/block/pre-shift combination can overflow the i32 block accumulator");
}

void precompute_lut_into(ShiftLutBank& bank, std::span<const std::int8_t> tile, const ApotCodebook& codebook,
                         std::uint32_t pre_shift) {
  const int F = static_cast<int>(pre_shift);
  if (F < codebook.max_exponent()) throw ValidationError("pre-shift F is below the largest basis exponent");
  for (std::size_t i = 0; i < tile.size(); ++i) {
    const std::int32_t x = tile[i];
    auto lut = bank.lut(i);
    for (std::size_t m = 0; m < codebook.size(); ++m) {
      const auto& s = codebook.shifts[m];
      std::int32_t v = 0;
      if (s.coarse_k) v += x << (F - s.coarse_k);
      if (s.fine_k) v += x << (F - s.fine_k);
      lut[m] = v;
    }
  }
}

ShiftLutBank precompute_lut(std::span<const std::int8_t> tile, const ApotCodebook& codebook, std::uint32_t pre_shift) {
  ShiftLutBank bank(tile.size(), codebook.size());
  precompute_lut_into(bank, tile, codebook, pre_shift);
  return bank;
}

std::int32_t shift_add_product(std::int8_t x, std::uint8_t code, const ApotCodebook& codebook,
                               std::uint32_t pre_shift) {
  const int F = static_cast<int>(pre_shift);
  if (F < codebook.max_exponent()) throw ValidationError("pre-shift F is below the largest basis exponent");
  const auto& s = codebook.shifts.at(codebook.magnitude_index(code));
  const std::int32_t xv = x;
  std::int32_t v = 0;
  if (s.coarse_k) v += xv << (F - s.coarse_k);
  if (s.fine_k) v += xv << (F - s.fine_k);
  return codebook.is_negative(code) ? -v : v;
}

std::vector<PeControlPacket> tile_schedule(const PackedLayout& layout, std::uint32_t block_size) {
  std::vector<PeControlPacket> out;
  const std::size_t rts = layout.out_tiles(), cts = layout.in_tiles();
  out.reserve(rts * cts);
  for (std::size_t rt = 0; rt < rts; ++rt)
    for (std::size_t ct = 0; ct < cts; ++ct) {
      PeControlPacket p;
      p.row_tile = static_cast<std::uint32_t>(rt);
      p.col_tile = static_cast<std::uint32_t>(ct);
      p.first_block = (static_cast<std::uint64_t>(rt) * layout.tile * layout.in_dim + ct * layout.tile) / block_size;
      p.reset = ct == 0;
      p.flush = ct + 1 == cts;
      out.push_back(p);
    }
  return out;
}

std::size_t pe_lane_accumulate(const ShiftLutBank& luts, std::span<const std::uint8_t> lane_codes,
                               const LaneSegment& segment, const ApotCodebook& codebook,
                               std::span<BlockPartial> out) {
  if (segment.block_size == 0) throw ValidationError("block size must be >= 1");
  if (lane_codes.size() < segment.length || luts.elements() < segment.length)
    throw ValidationError("PE lane is shorter than its segment");
  if (luts.levels() != codebook.size()) throw ValidationError("LUT bank does not match the codebook");

  const std::uint8_t mask = static_cast<std::uint8_t>((1u << codebook.magnitude_bits) - 1);
  const int sign_shift = codebook.magnitude_bits;
  const std::size_t levels = luts.levels();
  const std::int32_t* table = luts.data();

  std::size_t n = 0;
  std::uint64_t block = segment.flat_begin / segment.block_size;
  std::uint32_t i = 0;
  while (i < segment.length) {
    // Run of inputs inside one weight block.
    const std::uint64_t boundary = (block + 1) * segment.block_size;
    const auto end = static_cast<std::uint32_t>(
        std::min<std::uint64_t>(segment.length, boundary - segment.flat_begin));
    std::int64_t sum = 0;
    for (; i < end; ++i) {
      const std::uint8_t code = lane_codes[i];
      const std::int32_t v = table[i * levels + (code & mask)];
      const std::int32_t neg = -static_cast<std::int32_t>((code >> sign_shift) & 1u);
      sum += (v ^ neg) - neg;  // sign inverter
    }
    if (sum > std::numeric_limits<std::int32_t>::max() || sum < std::numeric_limits<std::int32_t>::min())
      throw NumericalError("PE block accumulator overflow in block " + std::to_string(block));
    if (n >= out.size()) throw ValidationError("PE partial buffer too small");
    out[n++] = {block, static_cast<std::int32_t>(sum)};
    ++block;
  }
  return n;
}

void accumulate_scaled(float& acc, std::span<const BlockPartial> partials, std::span<const float> block_scales) {
  for (const auto& p : partials) acc += static_cast<float>(p.sum) * block_scales[p.block];
}

float dequant_multiplier(float act_scale, std::uint32_t pre_shift) {
  return std::ldexp(act_scale, -static_cast<int>(pre_shift));
}

float scale_and_reduce(std::span<const BlockPartial> partials, std::span<const float> block_scales, float act_scale,
                       std::uint32_t pre_shift) {
  for (const auto& p : partials)
    if (p.block >= block_scales.size()) throw ValidationError("block partial has no matching scale");
  float acc = 0.0f;
  accumulate_scaled(acc, partials, block_scales);
  return acc * dequant_multiplier(act_scale, pre_shift);
}

QuantizedLinear make_quantized_linear(std::string name, const QuantizedWeights& qw, std::vector<float> bias,
                                      Activation act, const TileConfig& cfg, const ApotCodebook& codebook) {
  cfg.validate(codebook, qw.block_size);
  QuantizedLinear q;
  q.name = std::move(name);
  q.blob = pack_weights(qw.codes, cfg.tile, codebook.code_bits() <= 4 ? 4 : 8);
  q.block_scales = qw.scales;
  q.block_size = qw.block_size;
  q.bias = std::move(bias);
  q.act = act;
  return q;
}

MatrixF linear_forward_reference(const MatrixF& x, const MatrixF& w, std::span<const float> bias, Activation act) {
  if (x.cols != w.cols)
    throw ValidationError("linear input has " + std::to_string(x.cols) + " features, weight expects " +
                          std::to_string(w.cols));
  if (!bias.empty() && bias.size() != w.rows) throw ValidationError("bias length does not match output features");
  const std::size_t in = w.cols, out = w.rows;
  // Transposed copy so the inner loop runs across outputs; every output still
  // accumulates its products in ascending input order.
  std::vector<float> wt(in * out);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) wt[i * out + o] = w(o, i);

  MatrixF y(x.rows, out);
  parallel_for(x.rows, [&](std::size_t t) {
    auto yr = y.row(t);
    const auto xr = x.row(t);
    float* acc = yr.data();
    for (std::size_t i = 0; i < in; ++i) {
      const float xi = xr[i];
      const float* wrow = wt.data() + i * out;
      for (std::size_t o = 0; o < out; ++o) acc[o] += wrow[o] * xi;
    }
    for (std::size_t o = 0; o < out; ++o) {
      const float v = bias.empty() ? acc[o] : acc[o] + bias[o];
      acc[o] = activation_exact(act, v);
    }
  });
  return y;
}

EngineCounters linear_counters(const PackedLayout& layout, std::size_t tokens) {
  EngineCounters c;
  const std::uint64_t tiles = layout.out_tiles() * layout.in_tiles();
  c.tokens = tokens;
  c.tiles = tokens * tiles;
  c.lut_builds = tokens * layout.in_tiles();
  c.pe_selects = c.tiles * layout.tile * layout.tile;
  c.macs = static_cast<std::uint64_t>(tokens) * layout.out_dim * layout.in_dim;
  c.words_streamed = tokens * layout.word_count();
  return c;
}

LinearResult linear_forward_quantized(const MatrixF& x, const QuantizedLinear& layer, const ApotCodebook& codebook,
                                      const TileConfig& cfg) {
  const auto& layout = layer.blob.layout;
  const std::string where = layer.name.empty() ? std::string("linear layer") : "layer '" + layer.name + "'";
  if (layout.tile != cfg.tile)
    throw ValidationError(where + ": packed for tile " + std::to_string(layout.tile) + " but engine runs tile " +
                          std::to_string(cfg.tile));
  if (static_cast<int>(layout.code_bits) < codebook.code_bits())
    throw ValidationError(where + ": packed code width is narrower than the codebook");
  if (x.cols != layout.in_dim)
    throw ValidationError(where + ": input has " + std::to_string(x.cols) + " features, layer expects " +
                          std::to_string(layout.in_dim));
  if (layer.block_scales.size() != ceil_div(static_cast<std::size_t>(layout.out_dim) * layout.in_dim,
                                            std::max<std::uint32_t>(layer.block_size, 1)))
    throw ValidationError(where + ": block scale count does not match the layout");
  if (!layer.bias.empty() && layer.bias.size() != layout.out_dim)
    throw ValidationError(where + ": bias length does not match output features");
  cfg.validate(codebook, layer.block_size);

  const std::size_t T = cfg.tile, rts = layout.out_tiles(), cts = layout.in_tiles();
  const std::size_t in = layout.in_dim, out = layout.out_dim;

  // Stream the words once, front to back, into per-lane tile buffers:
  // tile_codes[((rt * cts + ct) * T + o) * T + i].
  std::vector<std::uint8_t> tile_codes(rts * cts * T * T);
  {
    WordReader reader(layer.blob);
    for (std::size_t rt = 0; rt < rts; ++rt)
      for (std::size_t ct = 0; ct < cts; ++ct) {
        std::uint8_t* tile = tile_codes.data() + (rt * cts + ct) * T * T;
        for (std::size_t i = 0; i < T; ++i)
          for (std::size_t o = 0; o < T; ++o) {
            const std::uint8_t code = reader.next();
            if (code >> codebook.code_bits()) throw ValidationError(where + ": weight code outside the codebook");
            tile[o * T + i] = code;
          }
      }
  }

  const auto schedule = tile_schedule(layout, layer.block_size);
  const auto tq = quantize_activations(x, layer.act_policy);
  const std::size_t max_partials = ceil_div(T, layer.block_size) + 1;

  MatrixF y(x.rows, out);
  parallel_for(x.rows, [&](std::size_t t) {
    // Activation tiles, zero padded to whole tiles.
    std::vector<std::int8_t> q(cts * T, 0);
    std::copy(tq[t].q.begin(), tq[t].q.end(), q.begin());
    std::vector<ShiftLutBank> banks;
    banks.reserve(cts);
    for (std::size_t ct = 0; ct < cts; ++ct)
      banks.push_back(precompute_lut(std::span<const std::int8_t>(q).subspan(ct * T, T), codebook, cfg.pre_shift));

    const float mult = dequant_multiplier(tq[t].scale, cfg.pre_shift);
    std::vector<float> acc(T);
    std::vector<BlockPartial> partials(max_partials);
    auto yr = y.row(t);
    for (const auto& pkt : schedule) {
      if (pkt.reset) std::fill(acc.begin(), acc.end(), 0.0f);
      const std::size_t col0 = static_cast<std::size_t>(pkt.col_tile) * T;
      const auto length = static_cast<std::uint32_t>(std::min(T, in - col0));
      const std::uint8_t* tile = tile_codes.data() + (pkt.row_tile * cts + pkt.col_tile) * T * T;
      for (std::size_t o = 0; o < T; ++o) {
        const std::size_t row = static_cast<std::size_t>(pkt.row_tile) * T + o;
        if (row >= out) break;  // padded lanes hold zero codes
        const LaneSegment seg{static_cast<std::uint64_t>(row) * in + col0, length, layer.block_size};
        const std::size_t n = pe_lane_accumulate(banks[pkt.col_tile], {tile + o * T, T}, seg, codebook, partials);
        accumulate_scaled(acc[o], std::span<const BlockPartial>(partials.data(), n), layer.block_scales);
      }
      if (pkt.flush) {
        for (std::size_t o = 0; o < T; ++o) {
          const std::size_t row = static_cast<std::size_t>(pkt.row_tile) * T + o;
          if (row >= out) break;
          float v = acc[o] * mult;
          if (!layer.bias.empty()) v = v + layer.bias[row];
          yr[row] = activation_hw(layer.act, v);
        }
      }
    }
  });
  return {std::move(y), linear_counters(layout, x.rows)};
}

}  // namespace vimq

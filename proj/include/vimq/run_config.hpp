#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <utility>
#include <vector>
#include <string>
#include <string_view>

#include "vimq/model.hpp"

namespace vimq {

enum class RunMode : std::uint8_t { float_ref, quantized, both };

std::string_view run_mode_name(RunMode m);
RunMode parse_run_mode(std::string_view s);

/// Settings read from a `key = value` text file. Lines starting with '#' and
/// blank lines are ignored; unknown keys are errors.
///
///   variant         tiny | small | base
///   blocks          encoder depth (default 24)
///   classes         head width (default 1000)
///   resolution      square input side, or set height / width separately
///   cls_position    head | middle | tail
///   norm            rms | layer
///   exp_mode        exact | approx
///   state_tile      N_B
///   mode            float | quantized | both
///   bits, block, tile, pre_shift, alpha
///   smooth, static_act, per_tensor_act   true | false
///   coarse, fine    comma-separated basis exponents for `bits`
///   coarse.W, fine.W  basis for weight width W in a sweep (e.g. coarse.3 = 1)
///   calib_samples, seed
struct RunConfig {
  VimConfig model = config_for_variant("tiny");
  QuantSettings quant;
  std::uint32_t height = 224;
  std::uint32_t width = 224;
  RunMode mode = RunMode::quantized;
  std::uint32_t calib_samples = 4;
  std::uint64_t seed = 0;
  /// Per-width bases for sweeps: W -> (coarse, fine).
  std::map<int, std::pair<std::vector<int>, std::vector<int>>> bases;
};

/// Settings for weight width `bits` taken from `base`, with the basis from
/// `bases` when one is configured for that width.
QuantSettings settings_for_bits(const QuantSettings& base, int bits,
                                const std::map<int, std::pair<std::vector<int>, std::vector<int>>>& bases);

RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace vimq

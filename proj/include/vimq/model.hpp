#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "vimq/aux_engines.hpp"
#include "vimq/codebook.hpp"
#include "vimq/common.hpp"
#include "vimq/container.hpp"
#include "vimq/counters.hpp"
#include "vimq/linear_engine.hpp"
#include "vimq/ssm_engine.hpp"

namespace vimq {

enum class ClsPlacement : std::uint8_t { head, middle, tail };

std::string_view cls_placement_name(ClsPlacement p);
ClsPlacement parse_cls_placement(std::string_view s);
std::string_view norm_kind_name(NormKind k);
NormKind parse_norm_kind(std::string_view s);
std::string_view exp_mode_name(ExpMode m);
ExpMode parse_exp_mode(std::string_view s);

struct VimConfig {
  std::string variant = "tiny";
  std::uint32_t d_model = 192;
  std::uint32_t n_blocks = 24;
  std::uint32_t d_state = 16;
  std::uint32_t expand = 2;
  std::uint32_t d_conv = 4;
  std::uint32_t patch = 16;
  std::uint32_t in_channels = 3;
  std::uint32_t num_classes = 1000;
  std::uint32_t dt_rank = 12;  // ceil(d_model / 16)
  ClsPlacement cls = ClsPlacement::middle;
  NormKind norm = NormKind::rms;
  float norm_eps = 1e-5f;
  ExpMode exp_mode = ExpMode::exact;  // quantized path only; the float path always uses exact exp
  std::uint32_t state_tile = 16;

  std::size_t inner() const { return static_cast<std::size_t>(expand) * d_model; }
  /// Where the CLS token goes in a sequence of `patches` patch tokens.
  std::size_t cls_position(std::size_t patches) const;
  void validate() const;
};

/// tiny / small / base with 24 blocks and N = 16.
VimConfig config_for_variant(std::string_view variant);

// Float weights -------------------------------------------------------------

struct FloatDirection {
  MatrixF conv_w;                 // [E, K]
  std::vector<float> conv_b;      // [E]
  std::vector<float> x_proj_pre;  // empty, or explicit per-channel divisor of the x_proj input
  MatrixF x_proj_w;               // [R + 2N, E]
  MatrixF dt_proj_w;              // [E, R]
  std::vector<float> dt_proj_b;   // [E]
  MatrixF A;                      // [E, N], negative
  std::vector<float> d_skip;      // [E]
};

struct FloatBlock {
  std::vector<float> norm_gamma, norm_beta;  // beta empty for RMSNorm
  MatrixF in_proj_w;                         // [2E, d]
  std::array<FloatDirection, 2> dir;         // forward, backward
  std::vector<float> out_proj_pre;
  MatrixF out_proj_w;  // [d, E]
};

struct FloatModel {
  VimConfig cfg;
  MatrixF patch_w;  // [d, C * P * P]
  std::vector<float> patch_b;
  std::vector<float> cls;
  std::vector<FloatBlock> blocks;
  std::vector<float> final_gamma, final_beta;
  MatrixF head_w;  // [classes, d]
  std::vector<float> head_b;

  void validate() const;
};

/// Gaussian-initialised weights for desk-scale runs.
FloatModel init_model(const VimConfig& cfg, std::uint64_t seed);

Image random_image(std::size_t channels, std::size_t height, std::size_t width, std::uint64_t seed);

// Quantized weights ---------------------------------------------------------

struct QuantSettings {
  int weight_bits = 4;
  std::uint32_t block = 32;
  TileConfig tile{};
  float alpha = 0.5f;
  bool smooth = true;
  bool static_act = false;
  bool per_tensor_act = false;
  /// Optional basis override; empty means codebook_for_bits(weight_bits).
  std::vector<int> coarse, fine;

  ApotCodebook codebook() const;
  void validate() const;
};

struct QuantDirection {
  QuantizedConv conv;
  std::vector<float> x_proj_pre;
  QuantizedLinear x_proj;
  // multiplies the observed x_proj output back into the unsmoothed basis; empty = identity
  std::vector<float> x_proj_report;
  QuantizedLinear dt_proj;  // bias + SoftPlus fused
  MatrixF A;
  std::vector<float> d_skip;
};

struct QuantBlock {
  std::vector<float> norm_gamma, norm_beta;
  QuantizedLinear in_proj;
  std::vector<float> in_proj_report;  // same role as QuantDirection::x_proj_report
  std::array<QuantDirection, 2> dir;
  std::vector<float> out_proj_pre;
  QuantizedLinear out_proj;
};

struct QuantModel {
  VimConfig cfg;
  QuantSettings qs;
  ApotCodebook codebook;
  QuantizedLinear patch;
  std::vector<float> cls;
  std::vector<QuantBlock> blocks;
  std::vector<float> final_gamma, final_beta;
  QuantizedLinear head;

  /// Every quantized linear with its name, in execution order.
  std::vector<const QuantizedLinear*> linears() const;
};

// Forward -------------------------------------------------------------------

/// Sees every quantizable layer's input and output (names like
/// "blocks.3.fwd.x_proj") plus each block output ("blocks.3").
class ForwardObserver {
 public:
  virtual ~ForwardObserver() = default;
  virtual void layer_input(const std::string& /*layer*/, const MatrixF& /*x*/) {}
  virtual void layer_output(const std::string& /*layer*/, const MatrixF& /*y*/) {}
};

struct ForwardOptions {
  ForwardObserver* observer = nullptr;
  PerfLog* perf = nullptr;  // quantized path only
};

MatrixF block_forward(const MatrixF& tokens, const FloatBlock& block, const VimConfig& cfg, std::size_t index,
                      const ForwardOptions& opts = {});
MatrixF block_forward(const MatrixF& tokens, const QuantBlock& block, const QuantModel& model, std::size_t index,
                      const ForwardOptions& opts = {});

std::vector<float> model_forward(const Image& image, const FloatModel& model, const ForwardOptions& opts = {});
std::vector<float> model_forward(const Image& image, const QuantModel& model, const ForwardOptions& opts = {});

// Calibration, smoothing, quantization --------------------------------------

/// Per quantizable layer input: elementwise absmax over calibration samples,
/// kept as an [L, C] map so per-channel, per-token and per-tensor statistics
/// can all be derived after smoothing.
struct CalibrationStats {
  std::map<std::string, MatrixF> absmax;
  std::size_t samples = 0;

  const MatrixF& at(const std::string& layer) const;
  std::vector<float> channel_absmax(const std::string& layer) const;
};

CalibrationStats calibrate(const FloatModel& model, const std::vector<Image>& images);

std::vector<NamedTensor> calibration_to_tensors(const CalibrationStats& stats);
CalibrationStats calibration_from_tensors(const TensorMap& map);

/// Smoothing vectors applied per layer input, keyed like the calibration.
using SmoothingMap = std::map<std::string, std::vector<float>>;

/// Migrates activation range into weights. Fused where the producer is linear
/// (norm affine -> in_proj, in_proj x rows -> both convs, x_proj dt rows ->
/// dt_proj, final norm -> head); explicit divisors before x_proj and
/// out_proj, whose inputs come out of a nonlinearity. Returns the smoothed
/// model, still in float.
FloatModel smooth_model(const FloatModel& model, const CalibrationStats& calib, float alpha,
                        SmoothingMap* applied = nullptr);

/// Smoothing (if enabled) then APoT quantization of every linear and conv.
/// SSM parameters, norms and biases stay f32. `calib` may be null only when
/// neither smoothing nor static activation quantization is requested.
QuantModel quantize_model(const FloatModel& model, const CalibrationStats* calib, const QuantSettings& qs);

struct LayerQuantError {
  std::string layer;
  double mse = 0.0;
};

/// Weight-quantization MSE of every linear layer under (block, codebook).
std::vector<LayerQuantError> weight_quant_errors(const FloatModel& model, std::uint32_t block,
                                                 const ApotCodebook& codebook);

// Files ---------------------------------------------------------------------

std::vector<NamedTensor> model_to_tensors(const FloatModel& model);
FloatModel model_from_tensors(const TensorMap& map);

/// Quantized model: scalar parameters and scales in the `.vimq` part, packed
/// linear weights in the `.vimqw` part.
struct QuantizedFiles {
  std::vector<NamedTensor> model;
  std::vector<NamedTensor> weights;
};
QuantizedFiles quant_model_to_tensors(const QuantModel& model);
QuantModel quant_model_from_tensors(const TensorMap& model, const TensorMap& weights);

bool is_quantized_container(const TensorMap& map);

/// Input batch: "input" f32 [N, C, H, W] (or [C, H, W]) and optional
/// "labels" i32 [N].
struct ImageBatch {
  std::vector<Image> images;
  std::vector<std::int32_t> labels;
};
std::vector<NamedTensor> images_to_tensors(const ImageBatch& batch);
ImageBatch images_from_tensors(const TensorMap& map);

void save_model(const std::filesystem::path& path, const FloatModel& model);
FloatModel load_model(const std::filesystem::path& path);
/// Writes `path` and `path` with extension ".vimqw".
void save_quant_model(const std::filesystem::path& path, const QuantModel& model);
QuantModel load_quant_model(const std::filesystem::path& path);
std::filesystem::path packed_path_for(const std::filesystem::path& model_path);

}  // namespace vimq

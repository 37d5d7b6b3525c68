#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vimq/run_config.hpp"

namespace vimq::cli {

struct InitArgs {
  std::string variant = "tiny";
  std::optional<std::uint32_t> blocks, classes;
  std::string norm = "rms", cls = "middle";
  std::uint64_t seed = 0;
  std::string out;
};

struct GenInputArgs {
  std::uint32_t height = 224, width = 224, channels = 3;
  std::uint32_t count = 1;
  std::uint32_t classes = 0;  // > 0: attach random labels
  std::uint64_t seed = 0;
  std::string out;
};

struct CalibrateArgs {
  std::string model, input, out;
};

struct QuantizeArgs {
  std::string model, calib, out;
  QuantSettings qs;
};

struct PackArgs {
  std::string codes, out;
  std::uint32_t tile = 32;
};

struct InferArgs {
  std::string model, float_model, calib, input;
  std::string report, logits, counters;
  RunMode mode = RunMode::quantized;
  std::optional<ExpMode> exp_mode;
  QuantSettings qs;  // used when a float model is quantized on the fly
  std::string ssm_trace;
  std::uint32_t trace_every = 0;
};

struct DseArgs {
  std::string model, calib, input, out;
  std::vector<int> bits{3, 4, 5};
  std::vector<std::uint32_t> blocks{16, 32, 64};
  std::string metric = "cosine";
  QuantSettings base;
  std::map<int, std::pair<std::vector<int>, std::vector<int>>> bases;
};

struct SelftestArgs {
  std::uint64_t seed = 1234;
  int corrupt_layer = -1;
};

struct RunArgs {
  std::string config, out_dir;
};

int cmd_init(const InitArgs& a, std::ostream& log);
int cmd_gen_input(const GenInputArgs& a, std::ostream& log);
int cmd_calibrate(const CalibrateArgs& a, std::ostream& log);
int cmd_quantize(const QuantizeArgs& a, std::ostream& log);
int cmd_pack(const PackArgs& a, std::ostream& log);
int cmd_infer(const InferArgs& a, std::ostream& log);
int cmd_dse(const DseArgs& a, std::ostream& log);
int cmd_selftest(const SelftestArgs& a, std::ostream& log);
int cmd_run(const RunArgs& a, std::ostream& log);

}  // namespace vimq::cli

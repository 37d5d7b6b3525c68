#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace vimq;
using namespace vimq::cli;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("not an integer list: '" + s + "'");
    }
  }
  return out;
}

/// Quantization flags shared by quantize, infer and dse. Values from a
/// --config file are applied first, explicit flags override them.
struct QuantFlags {
  std::string config;
  int bits = 4;
  std::uint32_t block = 32, tile = 32, pre_shift = 8;
  double alpha = 0.5;
  bool smooth = true, static_act = false, per_tensor_act = false;
  std::string coarse, fine;
  std::map<std::string, CLI::Option*> opts;

  void add(CLI::App* app, bool with_bits = true) {
    opts["config"] = app->add_option("--config", config, "key = value settings file");
    if (with_bits) opts["bits"] = app->add_option("--bits", bits, "weight bit width W (3, 4 or 5)");
    opts["block"] = app->add_option("--block", block, "quantization block size B");
    opts["tile"] = app->add_option("--tile", tile, "engine tile size T (16, 32 or 64)");
    opts["pre_shift"] = app->add_option("--pre-shift", pre_shift, "fixed-point pre-shift F");
    opts["alpha"] = app->add_option("--alpha", alpha, "smoothing migration strength");
    opts["smooth"] = app->add_flag("--smooth,!--no-smooth", smooth, "apply activation smoothing (default on)");
    opts["static_act"] = app->add_flag("--static-act,!--dynamic-act", static_act, "static activation scales from calibration");
    opts["per_tensor_act"] = app->add_flag("--per-tensor-act,!--per-token-act", per_tensor_act, "one activation scale per tensor");
    opts["coarse"] = app->add_option("--coarse", coarse, "coarse basis exponents, e.g. 1,2,4");
    opts["fine"] = app->add_option("--fine", fine, "fine basis exponents, e.g. 3");
  }
  bool given(const std::string& k) const {
    auto it = opts.find(k);
    return it != opts.end() && it->second->count() > 0;
  }

  std::optional<RunConfig> run_config() const {
    if (config.empty()) return std::nullopt;
    return load_run_config(config);
  }

  QuantSettings settings(const std::optional<RunConfig>& rc) const {
    QuantSettings qs = rc ? rc->quant : QuantSettings{};
    if (given("bits")) qs = settings_for_bits(qs, bits, rc ? rc->bases : decltype(rc->bases){});
    if (given("block")) qs.block = block;
    if (given("tile")) qs.tile.tile = tile;
    if (given("pre_shift")) qs.tile.pre_shift = pre_shift;
    if (given("alpha")) qs.alpha = alpha;
    if (given("smooth")) qs.smooth = smooth;
    if (given("static_act")) qs.static_act = static_act;
    if (given("per_tensor_act")) qs.per_tensor_act = per_tensor_act;
    if (given("coarse")) qs.coarse = parse_int_list(coarse);
    if (given("fine")) qs.fine = parse_int_list(fine);
    return qs;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vimq: quantized bidirectional state-space vision model toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "vimq 0.1.0");

  InitArgs init;
  auto* c_init = app.add_subcommand("init", "create a randomly initialised float model");
  c_init->add_option("--variant", init.variant, "tiny | small | base")->check(CLI::IsMember({"tiny", "small", "base"}));
  c_init->add_option("--blocks", init.blocks, "encoder depth");
  c_init->add_option("--classes", init.classes, "classifier width");
  c_init->add_option("--norm", init.norm, "rms | layer");
  c_init->add_option("--cls-position", init.cls, "head | middle | tail");
  c_init->add_option("--seed", init.seed);
  c_init->add_option("--out", init.out)->required();

  GenInputArgs gen;
  auto* c_gen = app.add_subcommand("gen-input", "write random input images");
  std::uint32_t resolution = 0;
  auto* o_res = c_gen->add_option("--resolution", resolution, "square side (sets height and width)");
  c_gen->add_option("--height", gen.height)->excludes(o_res);
  c_gen->add_option("--width", gen.width)->excludes(o_res);
  c_gen->add_option("--channels", gen.channels);
  c_gen->add_option("--count", gen.count);
  c_gen->add_option("--labels", gen.classes, "attach random labels in [0, N)");
  c_gen->add_option("--seed", gen.seed);
  c_gen->add_option("--out", gen.out)->required();

  CalibrateArgs cal;
  auto* c_cal = app.add_subcommand("calibrate", "record per-channel activation absmax for every layer input");
  c_cal->add_option("--model", cal.model)->required();
  c_cal->add_option("--input", cal.input)->required();
  c_cal->add_option("--out", cal.out)->required();

  QuantizeArgs qa;
  QuantFlags qa_flags;
  auto* c_q = app.add_subcommand("quantize", "smooth, quantize and pack a float model");
  c_q->add_option("--model", qa.model)->required();
  c_q->add_option("--calib", qa.calib, "calibration container (needed for smoothing and static scales)");
  c_q->add_option("--out", qa.out)->required();
  qa_flags.add(c_q);

  PackArgs pk;
  auto* c_pack = app.add_subcommand("pack", "pack rank-2 code tensors into 256-bit words");
  c_pack->add_option("--codes", pk.codes)->required();
  c_pack->add_option("--tile", pk.tile);
  c_pack->add_option("--out", pk.out)->required();

  InferArgs inf;
  QuantFlags inf_flags;
  std::string inf_mode, inf_exp;
  auto* c_inf = app.add_subcommand("infer", "run inference and write a JSON report");
  c_inf->add_option("--model", inf.model, "float or quantized model")->required();
  c_inf->add_option("--float-model", inf.float_model, "float reference for --mode both");
  c_inf->add_option("--calib", inf.calib, "calibration, when quantizing a float model on the fly");
  c_inf->add_option("--input", inf.input)->required();
  c_inf->add_option("--report", inf.report, "report path (stdout when omitted)");
  c_inf->add_option("--logits", inf.logits, "logits container path");
  c_inf->add_option("--counters", inf.counters, "per-layer counters JSONL path");
  auto* o_mode = c_inf->add_option("--mode", inf_mode, "float | quantized | both");
  auto* o_exp = c_inf->add_option("--exp-mode", inf_exp, "exact | approx");
  inf_flags.add(c_inf);

  DseArgs dse;
  QuantFlags dse_flags;
  std::string dse_bits, dse_blocks;
  auto* c_dse = app.add_subcommand("dse", "sweep weight width and block size");
  c_dse->add_option("--model", dse.model)->required();
  c_dse->add_option("--calib", dse.calib);
  c_dse->add_option("--input", dse.input)->required();
  c_dse->add_option("--out", dse.out, "JSON results path (stdout when omitted)");
  c_dse->add_option("--bits", dse_bits, "comma-separated widths (default 3,4,5)");
  c_dse->add_option("--blocks", dse_blocks, "comma-separated block sizes (default 16,32,64)");
  c_dse->add_option("--metric", dse.metric, "cosine | top1");
  dse_flags.add(c_dse, false);

  SelftestArgs st;
  auto* c_st = app.add_subcommand("selftest", "check every engine against its oracle");
  c_st->add_option("--seed", st.seed);
  c_st->add_option("--corrupt-layer", st.corrupt_layer, "flip one packed weight bit in this layer");

  RunArgs run;
  auto* c_run = app.add_subcommand("run", "init, calibrate, quantize and infer from one config file");
  c_run->add_option("--config", run.config)->required();
  c_run->add_option("--out-dir", run.out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    auto& log = std::cout;
    if (*c_init) return cmd_init(init, log);
    if (*c_gen) {
      if (o_res->count()) gen.height = gen.width = resolution;
      return cmd_gen_input(gen, log);
    }
    if (*c_cal) return cmd_calibrate(cal, log);
    if (*c_q) {
      qa.qs = qa_flags.settings(qa_flags.run_config());
      return cmd_quantize(qa, log);
    }
    if (*c_pack) return cmd_pack(pk, log);
    if (*c_inf) {
      const auto rc = inf_flags.run_config();
      inf.qs = inf_flags.settings(rc);
      if (rc) {
        inf.mode = rc->mode;
        inf.exp_mode = rc->model.exp_mode;
      }
      if (o_mode->count()) inf.mode = parse_run_mode(inf_mode);
      if (o_exp->count()) inf.exp_mode = parse_exp_mode(inf_exp);
      return cmd_infer(inf, log);
    }
    if (*c_dse) {
      const auto rc = dse_flags.run_config();
      dse.base = dse_flags.settings(rc);
      if (rc) dse.bases = rc->bases;
      if (!dse_bits.empty() || c_dse->get_option("--bits")->count()) dse.bits = parse_int_list(dse_bits);
      if (!dse_blocks.empty() || c_dse->get_option("--blocks")->count()) {
        dse.blocks.clear();
        for (int b : parse_int_list(dse_blocks)) {
          if (b < 1) throw ValidationError("block size must be >= 1");
          dse.blocks.push_back(static_cast<std::uint32_t>(b));
        }
      }
      return cmd_dse(dse, log);
    }
    if (*c_st) return cmd_selftest(st, log);
    if (*c_run) return cmd_run(run, log);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

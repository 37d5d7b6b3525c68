#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>

#include <json.hpp>

#include "vimq/container.hpp"
#include "vimq/metrics.hpp"
#include "vimq/model.hpp"
#include "vimq/packing.hpp"
#include "vimq/verify.hpp"

namespace vimq::cli {

namespace {

using json = nlohmann::ordered_json;

TensorMap load_map(const std::string& path) { return TensorMap(load_container(path)); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write " + path);
  f << text;
  if (!f) throw ValidationError("failed writing " + path);
}

std::vector<std::size_t> top_k(std::span<const float> logits, std::size_t k) {
  std::vector<std::size_t> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
  idx.resize(k);
  return idx;
}

json error_json(const ErrorStats& s) { return {{"max_abs", s.max_abs}, {"relative", s.relative}, {"cosine", s.cosine}}; }

json counters_json(const EngineCounters& c) {
  return {{"tiles", c.tiles},   {"lut_builds", c.lut_builds}, {"pe_selects", c.pe_selects},
          {"macs", c.macs},     {"words_streamed", c.words_streamed}, {"tokens", c.tokens},
          {"state_updates", c.state_updates}};
}

/// Keeps every layer output of the float pass of one image.
class OutputRecorder final : public ForwardObserver {
 public:
  void layer_output(const std::string& layer, const MatrixF& y) override { outputs[layer] = y; }
  std::map<std::string, MatrixF> outputs;
};

/// Compares quantized layer outputs against a recorded float pass.
class OutputComparer final : public ForwardObserver {
 public:
  struct Agg {
    double max_abs = 0.0, rel_sum = 0.0, cos_sum = 0.0;
    std::size_t n = 0;
  };
  explicit OutputComparer(std::map<std::string, Agg>& agg, std::vector<std::string>& order) : agg_(agg), order_(order) {}
  const std::map<std::string, MatrixF>* reference = nullptr;

  void layer_output(const std::string& layer, const MatrixF& y) override {
    if (!reference) return;
    auto it = reference->find(layer);
    if (it == reference->end() || it->second.data.size() != y.data.size()) return;
    const auto s = compare(y.data, it->second.data);
    auto [a, fresh] = agg_.try_emplace(layer);
    if (fresh) order_.push_back(layer);
    a->second.max_abs = std::max(a->second.max_abs, s.max_abs);
    a->second.rel_sum += s.relative;
    a->second.cos_sum += s.cosine;
    ++a->second.n;
  }

 private:
  std::map<std::string, Agg>& agg_;
  std::vector<std::string>& order_;
};

std::optional<CalibrationStats> maybe_calib(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return calibration_from_tensors(load_map(path));
}

}  // namespace

int cmd_init(const InitArgs& a, std::ostream& log) {
  if (a.out.empty()) throw ValidationError("--out is required");
  VimConfig cfg = config_for_variant(a.variant);
  if (a.blocks) cfg.n_blocks = *a.blocks;
  if (a.classes) cfg.num_classes = *a.classes;
  cfg.norm = parse_norm_kind(a.norm);
  cfg.cls = parse_cls_placement(a.cls);
  const auto m = init_model(cfg, a.seed);
  save_model(a.out, m);
  log << "wrote " << cfg.variant << " model (d_model " << cfg.d_model << ", " << cfg.n_blocks << " blocks, N "
      << cfg.d_state << ") to " << a.out << "\n";
  return 0;
}

int cmd_gen_input(const GenInputArgs& a, std::ostream& log) {
  if (a.out.empty()) throw ValidationError("--out is required");
  if (a.count == 0) throw ValidationError("--count must be >= 1");
  if (a.height == 0 || a.width == 0 || a.channels == 0) throw ValidationError("image dimensions must be >= 1");
  ImageBatch b;
  std::mt19937_64 rng(a.seed ^ 0x9e3779b97f4a7c15ull);
  for (std::uint32_t i = 0; i < a.count; ++i) {
    b.images.push_back(random_image(a.channels, a.height, a.width, a.seed + i));
    if (a.classes) b.labels.push_back(static_cast<std::int32_t>(rng() % a.classes));
  }
  save_container(a.out, images_to_tensors(b));
  log << "wrote " << a.count << " image(s) of " << a.channels << "x" << a.height << "x" << a.width << " to " << a.out
      << "\n";
  return 0;
}

int cmd_calibrate(const CalibrateArgs& a, std::ostream& log) {
  if (a.model.empty() || a.input.empty() || a.out.empty()) throw ValidationError("--model, --input and --out are required");
  const auto model = load_model(a.model);
  const auto batch = images_from_tensors(load_map(a.input));
  const auto stats = calibrate(model, batch.images);
  save_container(a.out, calibration_to_tensors(stats));
  log << "calibrated " << stats.absmax.size() << " layer inputs over " << stats.samples << " sample(s); wrote "
      << a.out << "\n";
  return 0;
}

int cmd_quantize(const QuantizeArgs& a, std::ostream& log) {
  if (a.model.empty() || a.out.empty()) throw ValidationError("--model and --out are required");
  a.qs.validate();
  const auto model = load_model(a.model);
  const auto calib = maybe_calib(a.calib);
  const auto q = quantize_model(model, calib ? &*calib : nullptr, a.qs);
  save_quant_model(a.out, q);

  const FloatModel smoothed = a.qs.smooth ? smooth_model(model, *calib, a.qs.alpha) : model;
  const auto errs = weight_quant_errors(smoothed, a.qs.block, q.codebook);
  log << "W" << a.qs.weight_bits << " B" << a.qs.block << " T" << a.qs.tile.tile << " F" << a.qs.tile.pre_shift
      << (a.qs.smooth ? " smoothed" : " unsmoothed") << (a.qs.static_act ? " static" : " dynamic")
      << (a.qs.per_tensor_act ? " per-tensor" : " per-token") << "\n";
  log << std::left << std::setw(28) << "layer" << "weight_mse\n";
  double total = 0.0;
  for (const auto& e : errs) {
    log << std::left << std::setw(28) << e.layer << std::scientific << std::setprecision(4) << e.mse << "\n"
        << std::defaultfloat;
    total += e.mse;
  }
  log << "quantized " << errs.size() << " linear layers and " << 2 * q.blocks.size() << " convs across "
      << q.blocks.size() << " blocks; mean weight MSE " << std::scientific << total / errs.size() << std::defaultfloat
      << "; " << 2 * q.blocks.size() << " SSM parameter sets kept f32\n";
  log << "wrote " << a.out << " and " << packed_path_for(a.out).string() << "\n";
  return 0;
}

int cmd_pack(const PackArgs& a, std::ostream& log) {
  if (a.codes.empty() || a.out.empty()) throw ValidationError("--codes and --out are required");
  if (a.tile == 0) throw ValidationError("tile size must be >= 1");
  const auto map = load_map(a.codes);
  std::vector<NamedTensor> out;
  for (const auto& e : map.entries()) {
    const auto& t = e.tensor;
    if ((t.dtype() != DType::u4 && t.dtype() != DType::u8) || t.shape().size() != 2) continue;
    const CodeMatrix codes(static_cast<std::size_t>(t.shape()[0]), static_cast<std::size_t>(t.shape()[1]), t.to_u8());
    const bool narrow = std::all_of(codes.data.begin(), codes.data.end(), [](std::uint8_t c) { return c < 16; });
    const auto blob = pack_weights(codes, a.tile, narrow ? 4 : 8);
    append_blob(out, e.name, blob);
    log << e.name << ": [" << codes.rows << ", " << codes.cols << "] -> " << blob.words.size() << " words\n";
  }
  if (out.empty()) throw ValidationError("no rank-2 u4/u8 code tensors in " + a.codes);
  save_container(a.out, out);
  log << "wrote " << a.out << "\n";
  return 0;
}

int cmd_infer(const InferArgs& a, std::ostream& log) {
  if (a.model.empty() || a.input.empty()) throw ValidationError("--model and --input are required");
  const auto map = load_map(a.model);
  std::optional<FloatModel> fm;
  std::optional<QuantModel> qm;
  if (is_quantized_container(map))
    qm = quant_model_from_tensors(map, load_map(packed_path_for(a.model).string()));
  else
    fm = model_from_tensors(map);
  if (!a.float_model.empty()) fm = load_model(a.float_model);

  const bool want_float = a.mode != RunMode::quantized, want_quant = a.mode != RunMode::float_ref;
  if (want_quant && !qm) {
    const auto calib = maybe_calib(a.calib);
    qm = quantize_model(*fm, calib ? &*calib : nullptr, a.qs);
  }
  if (want_float && !fm) throw ValidationError("the float path needs a float model (--float-model)");
  if (qm && a.exp_mode) qm->cfg.exp_mode = *a.exp_mode;

  const auto batch = images_from_tensors(load_map(a.input));
  const auto& cfg = fm ? fm->cfg : qm->cfg;
  for (const auto& img : batch.images)
    if (img.channels != cfg.in_channels || img.height % cfg.patch || img.width % cfg.patch)
      throw ValidationError("input " + std::to_string(img.channels) + "x" + std::to_string(img.height) + "x" +
                            std::to_string(img.width) + " does not fit the model (channels " +
                            std::to_string(cfg.in_channels) + ", patch " + std::to_string(cfg.patch) + ")");

  PerfLog perf;
  std::map<std::string, OutputComparer::Agg> layer_agg;
  std::vector<std::string> layer_order;
  std::vector<float> all_float, all_quant;
  json results = json::array();
  std::size_t top1[2] = {0, 0}, top5[2] = {0, 0};
  double cos_sum = 0.0, cos_min = 1.0;

  for (std::size_t i = 0; i < batch.images.size(); ++i) {
    const auto& img = batch.images[i];
    json r;
    r["index"] = i;
    OutputRecorder rec;
    std::vector<float> lf, lq;
    auto describe = [&](const std::vector<float>& logits, int path) {
      const auto top = top_k(logits, 5);
      json j{{"logits_hash", hash_floats(logits)}, {"top1", top.empty() ? 0 : top[0]}, {"top5", top}};
      if (!batch.labels.empty()) {
        const auto label = static_cast<std::size_t>(batch.labels[i]);
        top1[path] += !top.empty() && top[0] == label;
        top5[path] += std::find(top.begin(), top.end(), label) != top.end();
      }
      return j;
    };
    if (want_float) {
      ForwardOptions o;
      if (want_quant) o.observer = &rec;
      lf = model_forward(img, *fm, o);
      r["float"] = describe(lf, 0);
      all_float.insert(all_float.end(), lf.begin(), lf.end());
    }
    if (want_quant) {
      OutputComparer cmp(layer_agg, layer_order);
      if (want_float) cmp.reference = &rec.outputs;
      ForwardOptions o;
      o.perf = &perf;
      o.observer = &cmp;
      lq = model_forward(img, *qm, o);
      r["quantized"] = describe(lq, 1);
      all_quant.insert(all_quant.end(), lq.begin(), lq.end());
    }
    if (want_float && want_quant) {
      const auto s = compare(lq, lf);
      r["comparison"] = error_json(s);
      cos_sum += s.cosine;
      cos_min = std::min(cos_min, s.cosine);
    }
    results.push_back(std::move(r));
  }

  json report;
  report["mode"] = std::string(run_mode_name(a.mode));
  report["variant"] = cfg.variant;
  report["inputs"] = batch.images.size();
  report["resolution"] = {batch.images.front().height, batch.images.front().width};
  if (qm) {
    report["quantization"] = {{"bits", qm->qs.weight_bits},         {"block", qm->qs.block},
                              {"tile", qm->qs.tile.tile},           {"pre_shift", qm->qs.tile.pre_shift},
                              {"smooth", qm->qs.smooth},            {"static_act", qm->qs.static_act},
                              {"per_tensor_act", qm->qs.per_tensor_act},
                              {"exp_mode", std::string(exp_mode_name(qm->cfg.exp_mode))}};
  }
  report["results"] = std::move(results);
  if (want_float && want_quant) {
    json layers = json::array();
    for (const auto& name : layer_order) {
      const auto& g = layer_agg.at(name);
      layers.push_back({{"layer", name},
                        {"max_abs", g.max_abs},
                        {"relative", g.rel_sum / g.n},
                        {"cosine", g.cos_sum / g.n}});
    }
    const auto s = compare(all_quant, all_float);
    report["comparison"] = {{"end_to_end", {{"max_abs", s.max_abs},
                                            {"relative", s.relative},
                                            {"cosine", s.cosine},
                                            {"cosine_mean", cos_sum / batch.images.size()},
                                            {"cosine_min", cos_min}}},
                            {"per_layer", std::move(layers)}};
  }
  if (!batch.labels.empty()) {
    const double n = static_cast<double>(batch.labels.size());
    json acc;
    if (want_float) acc["float"] = {{"top1", top1[0] / n}, {"top5", top5[0] / n}};
    if (want_quant) acc["quantized"] = {{"top1", top1[1] / n}, {"top5", top5[1] / n}};
    acc["labeled"] = batch.labels.size();
    report["accuracy"] = std::move(acc);
  }
  if (want_quant) {
    json totals;
    for (const auto& [engine, c] : perf.totals()) totals[engine] = counters_json(c);
    report["counters"] = std::move(totals);
  }
  std::uint64_t h = fnv1a({reinterpret_cast<const std::uint8_t*>(all_float.data()), all_float.size() * sizeof(float)});
  h = fnv1a({reinterpret_cast<const std::uint8_t*>(all_quant.data()), all_quant.size() * sizeof(float)}, h);
  std::ostringstream hs;
  hs << std::hex << std::setw(16) << std::setfill('0') << h;
  report["report_hash"] = hs.str();

  const std::string text = report.dump(2) + "\n";
  if (a.report.empty()) log << text;
  else write_text(a.report, text);

  const std::string logits_path = !a.logits.empty() ? a.logits : (a.report.empty() ? "" : a.report + ".logits.vimq");
  if (!logits_path.empty()) {
    std::vector<NamedTensor> out;
    const auto n = static_cast<std::int64_t>(batch.images.size());
    if (want_float) out.push_back({"logits.float", Tensor::f32({n, static_cast<std::int64_t>(cfg.num_classes)}, all_float)});
    if (want_quant) out.push_back({"logits.quantized", Tensor::f32({n, static_cast<std::int64_t>(cfg.num_classes)}, all_quant)});
    save_container(logits_path, out);
  }
  const std::string counters_path =
      !a.counters.empty() ? a.counters : (a.report.empty() ? "" : a.report + ".counters.jsonl");
  if (!counters_path.empty() && want_quant) write_text(counters_path, perf.to_jsonl());
  if (!a.report.empty()) log << "report hash " << hs.str() << "; wrote " << a.report << "\n";
  return 0;
}

int cmd_dse(const DseArgs& a, std::ostream& log) {
  if (a.model.empty() || a.input.empty()) throw ValidationError("--model and --input are required");
  if (a.bits.empty() || a.blocks.empty()) throw ValidationError("empty DSE grid");
  if (a.metric != "cosine" && a.metric != "top1") throw ValidationError("--metric must be cosine or top1");
  const auto model = load_model(a.model);
  const auto calib = maybe_calib(a.calib);
  const auto batch = images_from_tensors(load_map(a.input));
  if (a.metric == "top1" && batch.labels.empty()) throw ValidationError("--metric top1 needs labels in the input");

  std::vector<std::vector<float>> ref;
  for (const auto& img : batch.images) ref.push_back(model_forward(img, model));

  json records = json::array();
  log << std::left << std::setw(6) << "W" << std::setw(6) << "B" << std::setw(14) << "cosine_mean" << std::setw(14)
      << "weight_mse" << (batch.labels.empty() ? "" : "top1") << "\n";
  for (int bits : a.bits)
    for (std::uint32_t block : a.blocks) {
      QuantSettings qs = settings_for_bits(a.base, bits, a.bases);
      qs.block = block;
      const auto q = quantize_model(model, calib ? &*calib : nullptr, qs);
      std::vector<double> cos;
      std::size_t hits = 0;
      for (std::size_t i = 0; i < batch.images.size(); ++i) {
        const auto lq = model_forward(batch.images[i], q);
        cos.push_back(cosine_similarity(lq, ref[i]));
        if (!batch.labels.empty()) hits += top_k(lq, 1)[0] == static_cast<std::size_t>(batch.labels[i]);
      }
      const FloatModel smoothed = qs.smooth ? smooth_model(model, *calib, qs.alpha) : model;
      json layer_mse;
      double mse_sum = 0.0;
      const auto errs = weight_quant_errors(smoothed, block, q.codebook);
      for (const auto& e : errs) {
        layer_mse[e.layer] = e.mse;
        mse_sum += e.mse;
      }
      const double cos_mean = std::accumulate(cos.begin(), cos.end(), 0.0) / cos.size();
      json rec{{"bits", bits},
               {"block", block},
               {"coarse", q.codebook.coarse_exponents},
               {"fine", q.codebook.fine_exponents},
               {"cosine_mean", cos_mean},
               {"cosine_min", *std::min_element(cos.begin(), cos.end())},
               {"cosines", cos},
               {"weight_mse_mean", mse_sum / errs.size()},
               {"layer_mse", std::move(layer_mse)}};
      if (!batch.labels.empty()) rec["top1"] = static_cast<double>(hits) / batch.labels.size();
      log << std::left << std::setw(6) << bits << std::setw(6) << block << std::setw(14) << std::setprecision(6)
          << cos_mean << std::setw(14) << std::scientific << mse_sum / errs.size() << std::defaultfloat;
      if (!batch.labels.empty()) log << rec["top1"].get<double>();
      log << "\n";
      records.push_back(std::move(rec));
    }
  json out{{"metric", a.metric}, {"inputs", batch.images.size()}, {"records", std::move(records)}};
  const std::string text = out.dump(2) + "\n";
  if (a.out.empty()) log << text;
  else {
    write_text(a.out, text);
    log << "wrote " << a.out << "\n";
  }
  return 0;
}

int cmd_selftest(const SelftestArgs& a, std::ostream& log) {
  SelftestOptions o;
  o.seed = a.seed;
  o.corrupt_layer = a.corrupt_layer;
  bool ok = true;
  for (const auto& c : run_selftest(o)) {
    log << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
    ok = ok && c.pass;
  }
  log << (ok ? "selftest passed\n" : "selftest FAILED\n");
  return ok ? 0 : 3;
}

int cmd_run(const RunArgs& a, std::ostream& log) {
  if (a.config.empty() || a.out_dir.empty()) throw ValidationError("--config and --out-dir are required");
  const auto rc = load_run_config(a.config);
  std::filesystem::create_directories(a.out_dir);
  const auto dir = std::filesystem::path(a.out_dir);
  const std::string model = (dir / "model.vimq").string(), calib_in = (dir / "calib_input.vimq").string(),
                    calib = (dir / "calib.vimq").string(), input = (dir / "input.vimq").string(),
                    qmodel = (dir / "model_q.vimq").string(), report = (dir / "report.json").string();

  // init with the configured shape
  {
    auto cfg = rc.model;
    const auto m = init_model(cfg, rc.seed);
    save_model(model, m);
    log << "wrote " << cfg.variant << " model (" << cfg.n_blocks << " blocks) to " << model << "\n";
  }
  GenInputArgs g;
  g.height = rc.height;
  g.width = rc.width;
  g.count = std::max<std::uint32_t>(rc.calib_samples, 1);
  g.seed = rc.seed + 1000;
  g.out = calib_in;
  cmd_gen_input(g, log);
  g.count = 1;
  g.seed = rc.seed + 2000;
  g.out = input;
  cmd_gen_input(g, log);
  cmd_calibrate({model, calib_in, calib}, log);

  InferArgs inf;
  inf.mode = rc.mode;
  inf.input = input;
  inf.report = report;
  if (rc.mode == RunMode::float_ref) {
    inf.model = model;
  } else {
    QuantizeArgs qa{model, calib, qmodel, rc.quant};
    cmd_quantize(qa, log);
    inf.model = qmodel;
    if (rc.mode == RunMode::both) inf.float_model = model;
  }
  return cmd_infer(inf, log);
}

}  // namespace vimq::cli

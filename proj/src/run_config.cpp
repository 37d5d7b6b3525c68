#include "vimq/run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace vimq {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view v, const std::string& where) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || p != end) throw ValidationError(where + ": '" + std::string(v) + "' is not a valid number");
  return out;
}

bool parse_bool(std::string_view v, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError(where + ": expected true or false, got '" + std::string(v) + "'");
}

std::vector<int> parse_int_list(std::string_view v, const std::string& where) {
  std::vector<int> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    const auto item = trim(v.substr(0, comma));
    if (!item.empty()) out.push_back(parse_number<int>(item, where));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

}  // namespace

std::string_view run_mode_name(RunMode m) {
  switch (m) {
    case RunMode::float_ref: return "float";
    case RunMode::quantized: return "quantized";
    case RunMode::both: return "both";
  }
  return "?";
}

RunMode parse_run_mode(std::string_view s) {
  if (s == "float" || s == "float_ref") return RunMode::float_ref;
  if (s == "quantized") return RunMode::quantized;
  if (s == "both") return RunMode::both;
  throw ValidationError("unknown mode '" + std::string(s) + "' (float, quantized, both)");
}

RunConfig parse_run_config(std::string_view text) {
  RunConfig rc;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  // variant resets the model shape, so it is applied before the other keys.
  std::vector<std::pair<std::string, std::string>> kv;
  while (std::getline(in, line)) {
    ++lineno;
    const auto s = trim(line);
    if (s.empty() || s.front() == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos)
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    kv.emplace_back(std::string(trim(s.substr(0, eq))), std::string(trim(s.substr(eq + 1))));
  }
  for (const auto& [k, v] : kv)
    if (k == "variant") rc.model = config_for_variant(v);

  auto& m = rc.model;
  auto& q = rc.quant;
  for (const auto& [k, v] : kv) {
    const std::string where = "config key '" + k + "'";
    if (k == "variant") continue;
    else if (k == "blocks") m.n_blocks = parse_number<std::uint32_t>(v, where);
    else if (k == "classes") m.num_classes = parse_number<std::uint32_t>(v, where);
    else if (k == "resolution") rc.height = rc.width = parse_number<std::uint32_t>(v, where);
    else if (k == "height") rc.height = parse_number<std::uint32_t>(v, where);
    else if (k == "width") rc.width = parse_number<std::uint32_t>(v, where);
    else if (k == "cls_position") m.cls = parse_cls_placement(v);
    else if (k == "norm") m.norm = parse_norm_kind(v);
    else if (k == "exp_mode") m.exp_mode = parse_exp_mode(v);
    else if (k == "state_tile") m.state_tile = parse_number<std::uint32_t>(v, where);
    else if (k == "mode") rc.mode = parse_run_mode(v);
    else if (k == "bits") q.weight_bits = parse_number<int>(v, where);
    else if (k == "block") q.block = parse_number<std::uint32_t>(v, where);
    else if (k == "tile") q.tile.tile = parse_number<std::uint32_t>(v, where);
    else if (k == "pre_shift") q.tile.pre_shift = parse_number<std::uint32_t>(v, where);
    else if (k == "alpha") q.alpha = parse_number<float>(v, where);
    else if (k == "smooth") q.smooth = parse_bool(v, where);
    else if (k == "static_act") q.static_act = parse_bool(v, where);
    else if (k == "per_tensor_act") q.per_tensor_act = parse_bool(v, where);
    else if (k == "coarse") q.coarse = parse_int_list(v, where);
    else if (k == "fine") q.fine = parse_int_list(v, where);
    else if (k.rfind("coarse.", 0) == 0) rc.bases[parse_number<int>(std::string_view(k).substr(7), where)].first = parse_int_list(v, where);
    else if (k.rfind("fine.", 0) == 0) rc.bases[parse_number<int>(std::string_view(k).substr(5), where)].second = parse_int_list(v, where);
    else if (k == "calib_samples") rc.calib_samples = parse_number<std::uint32_t>(v, where);
    else if (k == "seed") rc.seed = parse_number<std::uint64_t>(v, where);
    else throw ValidationError("unknown config key '" + k + "'");
  }
  m.validate();
  q.validate();
  for (const auto& [bits, basis] : rc.bases) settings_for_bits(q, bits, rc.bases).validate();
  if (rc.height == 0 || rc.width == 0 || rc.height % m.patch || rc.width % m.patch)
    throw ValidationError("resolution " + std::to_string(rc.height) + "x" + std::to_string(rc.width) +
                          " is not divisible by patch size " + std::to_string(m.patch));
  return rc;
}

QuantSettings settings_for_bits(const QuantSettings& base, int bits,
                                const std::map<int, std::pair<std::vector<int>, std::vector<int>>>& bases) {
  QuantSettings q = base;
  if (q.weight_bits != bits) {
    q.coarse.clear();
    q.fine.clear();
  }
  q.weight_bits = bits;
  if (auto it = bases.find(bits); it != bases.end()) {
    q.coarse = it->second.first;
    q.fine = it->second.second;
  }
  return q;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace vimq

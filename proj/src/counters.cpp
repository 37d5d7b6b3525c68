#include "vimq/counters.hpp"

#include <json.hpp>

namespace vimq {

EngineCounters& EngineCounters::operator+=(const EngineCounters& o) {
  tiles += o.tiles;
  lut_builds += o.lut_builds;
  pe_selects += o.pe_selects;
  macs += o.macs;
  words_streamed += o.words_streamed;
  tokens += o.tokens;
  state_updates += o.state_updates;
  return *this;
}

void PerfLog::add(std::string layer, std::string engine, const EngineCounters& c) {
  records_.push_back({std::move(layer), std::move(engine), c});
}

std::map<std::string, EngineCounters> PerfLog::totals() const {
  std::map<std::string, EngineCounters> out;
  for (const auto& r : records_) out[r.engine] += r.counters;
  return out;
}

std::string PerfLog::to_jsonl() const {
  std::string out;
  for (const auto& r : records_) {
    nlohmann::ordered_json j;
    j["layer"] = r.layer;
    j["engine"] = r.engine;
    j["tiles"] = r.counters.tiles;
    j["lut_builds"] = r.counters.lut_builds;
    j["pe_selects"] = r.counters.pe_selects;
    j["words_streamed"] = r.counters.words_streamed;
    j["macs"] = r.counters.macs;
    j["tokens"] = r.counters.tokens;
    j["state_updates"] = r.counters.state_updates;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace vimq

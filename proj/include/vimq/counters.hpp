#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vimq {

/// Analytic operation counts for one engine invocation. These are dataflow
/// counters, not cycle estimates.
struct EngineCounters {
  std::uint64_t tiles = 0;
  std::uint64_t lut_builds = 0;
  std::uint64_t pe_selects = 0;
  std::uint64_t macs = 0;
  std::uint64_t words_streamed = 0;
  std::uint64_t tokens = 0;
  std::uint64_t state_updates = 0;

  EngineCounters& operator+=(const EngineCounters& o);
  bool operator==(const EngineCounters&) const = default;
};

struct LayerRecord {
  std::string layer;
  std::string engine;  // "linear", "conv", "ssm", "aux"
  EngineCounters counters;
};

/// Per-invocation log; serialises as one JSON object per line.
class PerfLog {
 public:
  void add(std::string layer, std::string engine, const EngineCounters& c);
  const std::vector<LayerRecord>& records() const { return records_; }
  std::map<std::string, EngineCounters> totals() const;
  std::string to_jsonl() const;
  void clear() { records_.clear(); }

 private:
  std::vector<LayerRecord> records_;
};

}  // namespace vimq

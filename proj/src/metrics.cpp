#include "vimq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "vimq/common.hpp"

namespace vimq {

ErrorStats compare(std::span<const float> a, std::span<const float> ref) {
  if (a.size() != ref.size()) throw ValidationError("compared vectors differ in length");
  double diff2 = 0.0, ref2 = 0.0, a2 = 0.0, dot = 0.0, max_abs = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], r = ref[i], e = x - r;
    diff2 += e * e;
    ref2 += r * r;
    a2 += x * x;
    dot += x * r;
    max_abs = std::max(max_abs, std::fabs(e));
  }
  ErrorStats s;
  s.max_abs = max_abs;
  s.relative = ref2 > 0.0 ? std::sqrt(diff2) / std::sqrt(ref2) : (diff2 > 0.0 ? INFINITY : 0.0);
  if (a2 > 0.0 && ref2 > 0.0) s.cosine = dot / (std::sqrt(a2) * std::sqrt(ref2));
  else s.cosine = (a2 == ref2) ? 1.0 : 0.0;
  return s;
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) { return compare(a, b).cosine; }
double relative_error(std::span<const float> a, std::span<const float> ref) { return compare(a, ref).relative; }

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h) {
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hash_floats(std::span<const float> v) {
  const auto h = fnv1a({reinterpret_cast<const std::uint8_t*>(v.data()), v.size_bytes()});
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace vimq

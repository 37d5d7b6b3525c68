#include "vimq/codebook.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "vimq/common.hpp"

namespace vimq {

int ApotCodebook::max_exponent() const {
  int k = 0;
  for (const auto& s : shifts) k = std::max({k, s.coarse_k, s.fine_k});
  return k;
}

double ApotCodebook::value(std::uint8_t code) const {
  if (code >> (magnitude_bits + 1)) throw ValidationError("weight code out of range");
  const double v = levels[magnitude_index(code)];
  return is_negative(code) ? -v : v;
}

ApotCodebook build_codebook(std::span<const int> coarse_exponents, std::span<const int> fine_exponents) {
  for (auto span : {coarse_exponents, fine_exponents})
    for (int k : span)
      if (k < 1 || k > 30) throw ValidationError("basis exponents must lie in [1, 30], got " + std::to_string(k));

  struct Entry {
    double level;
    ShiftPair shift;
  };
  std::vector<Entry> entries;
  std::vector<int> coarse{0}, fine{0};
  coarse.insert(coarse.end(), coarse_exponents.begin(), coarse_exponents.end());
  fine.insert(fine.end(), fine_exponents.begin(), fine_exponents.end());
  for (int kc : coarse)
    for (int kf : fine) {
      const double c = kc ? std::ldexp(1.0, -kc) : 0.0;
      const double f = kf ? std::ldexp(1.0, -kf) : 0.0;
      entries.push_back({c + f, {kc, kf}});
    }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.level < b.level; });
  for (std::size_t i = 1; i < entries.size(); ++i)
    if (entries[i].level == entries[i - 1].level)
      throw ValidationError("basis collision: level " + std::to_string(entries[i].level) +
                            " has two encodings");
  if (!std::has_single_bit(entries.size()))
    throw ValidationError("codebook size " + std::to_string(entries.size()) + " is not a power of two");

  ApotCodebook cb;
  cb.coarse_exponents.assign(coarse_exponents.begin(), coarse_exponents.end());
  cb.fine_exponents.assign(fine_exponents.begin(), fine_exponents.end());
  for (const auto& e : entries) {
    cb.levels.push_back(e.level);
    cb.shifts.push_back(e.shift);
  }
  cb.magnitude_bits = std::countr_zero(entries.size());
  return cb;
}

ApotCodebook default_codebook() {
  const int coarse[] = {1, 2, 4};
  const int fine[] = {3};
  return build_codebook(coarse, fine);
}

ApotCodebook codebook_for_bits(int weight_bits) {
  switch (weight_bits) {
    case 3: {
      const int coarse[] = {1}, fine[] = {3};
      return build_codebook(coarse, fine);
    }
    case 4: return default_codebook();
    case 5: {
      const int coarse[] = {1, 2, 4}, fine[] = {3, 5, 6};
      return build_codebook(coarse, fine);
    }
    default:
      throw ValidationError("no default basis for " + std::to_string(weight_bits) +
                            "-bit weights; supply coarse/fine exponents explicitly");
  }
}

}  // namespace vimq

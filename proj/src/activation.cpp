#include "vimq/activation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vimq/common.hpp"

namespace vimq {

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::silu: return "silu";
    case Activation::softplus: return "softplus";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  for (auto a : {Activation::none, Activation::relu, Activation::silu, Activation::softplus})
    if (activation_name(a) == name) return a;
  throw ValidationError("unknown activation '" + std::string(name) + "'");
}

namespace {

double silu(double x) { return x / (1.0 + std::exp(-x)); }
double softplus(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }

}  // namespace

float activation_exact(Activation a, float x) {
  switch (a) {
    case Activation::none: return x;
    case Activation::relu: return x > 0.0f ? x : 0.0f;
    case Activation::silu: return static_cast<float>(silu(x));
    case Activation::softplus: return static_cast<float>(softplus(x));
  }
  throw ValidationError("unknown activation tag");
}

ActOffsetLut ActOffsetLut::build(Activation fn, std::size_t entry_count, float range) {
  if (fn != Activation::silu && fn != Activation::softplus)
    throw ValidationError("offset tables exist only for silu and softplus");
  if (entry_count < 2 || !(range > 0.0f)) throw ValidationError("offset table needs >= 2 entries and range > 0");
  ActOffsetLut lut;
  lut.fn = fn;
  lut.range = range;
  lut.entries.resize(entry_count);
  for (std::size_t k = 0; k < entry_count; ++k) {
    const double a = static_cast<double>(range) * static_cast<double>(k) / static_cast<double>(entry_count - 1);
    const double f = fn == Activation::silu ? silu(a) : softplus(a);
    lut.entries[k] = static_cast<float>(f - a);
  }
  return lut;
}

float ActOffsetLut::offset(float y) const {
  const std::size_t last = entries.size() - 1;
  const float pos = std::fabs(y) * static_cast<float>(last) / range;
  if (!(pos < static_cast<float>(last))) return entries[last];
  const auto k = static_cast<std::size_t>(pos);
  const float frac = pos - static_cast<float>(k);
  return entries[k] + (entries[k + 1] - entries[k]) * frac;
}

float apply_activation_lut(float y, const ActOffsetLut& lut) {
  if (lut.fn != Activation::silu && lut.fn != Activation::softplus)
    throw ValidationError("unknown offset-table function tag");
  return (y > 0.0f ? y : 0.0f) + lut.offset(y);
}

const ActOffsetLut& default_offset_lut(Activation fn) {
  static const ActOffsetLut silu_lut = ActOffsetLut::build(Activation::silu);
  static const ActOffsetLut softplus_lut = ActOffsetLut::build(Activation::softplus);
  if (fn == Activation::silu) return silu_lut;
  if (fn == Activation::softplus) return softplus_lut;
  throw ValidationError("no offset table for activation '" + std::string(activation_name(fn)) + "'");
}

float activation_hw(Activation a, float y) {
  switch (a) {
    case Activation::none: return y;
    case Activation::relu: return y > 0.0f ? y : 0.0f;
    case Activation::silu:
    case Activation::softplus: return apply_activation_lut(y, default_offset_lut(a));
  }
  throw ValidationError("unknown activation tag");
}

}  // namespace vimq

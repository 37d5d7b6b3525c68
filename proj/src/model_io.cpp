#include <cmath>

#include "vimq/model.hpp"

namespace vimq {

namespace {

constexpr std::int32_t kFormatFloat = 1;
constexpr std::int32_t kFormatQuant = 2;

using Shape = std::vector<std::int64_t>;

class Writer {
 public:
  explicit Writer(std::vector<NamedTensor>& out) : out_(out) {}

  void i32(const std::string& name, std::int32_t v) {
    out_.push_back({name, Tensor::i32({1}, std::span<const std::int32_t>(&v, 1))});
  }
  void i32s(const std::string& name, const std::vector<int>& v) {
    std::vector<std::int32_t> tmp(v.begin(), v.end());
    out_.push_back({name, Tensor::i32({static_cast<std::int64_t>(tmp.size())}, tmp)});
  }
  void f32(const std::string& name, float v) { out_.push_back({name, Tensor::f32({1}, std::span<const float>(&v, 1))}); }
  void vec(const std::string& name, const std::vector<float>& v) {
    out_.push_back({name, Tensor::f32({static_cast<std::int64_t>(v.size())}, v)});
  }
  /// Skips empty vectors (optional tensors).
  void opt_vec(const std::string& name, const std::vector<float>& v) {
    if (!v.empty()) vec(name, v);
  }
  void mat(const std::string& name, const MatrixF& m) { out_.push_back({name, Tensor::from_matrix(m)}); }
  void str(const std::string& name, const std::string& s) {
    out_.push_back({name, Tensor::u8({static_cast<std::int64_t>(s.size())},
                                     std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()),
                                                                   s.size()))});
  }

 private:
  std::vector<NamedTensor>& out_;
};

class Reader {
 public:
  explicit Reader(const TensorMap& map) : map_(map) {}

  const Tensor& get(const std::string& name, DType dt) const {
    const Tensor& t = map_.at(name);
    if (t.dtype() != dt)
      throw ValidationError("tensor '" + name + "' has dtype " + std::string(dtype_name(t.dtype())) + ", expected " +
                            std::string(dtype_name(dt)));
    return t;
  }
  std::int32_t i32(const std::string& name) const {
    const auto v = get(name, DType::i32).to_i32();
    if (v.size() != 1) throw ValidationError("tensor '" + name + "' must be a scalar");
    return v[0];
  }
  std::uint32_t u32(const std::string& name) const {
    const auto v = i32(name);
    if (v < 0) throw ValidationError("tensor '" + name + "' must be non-negative");
    return static_cast<std::uint32_t>(v);
  }
  std::vector<int> i32s(const std::string& name) const {
    const auto v = get(name, DType::i32).to_i32();
    return {v.begin(), v.end()};
  }
  float f32(const std::string& name) const {
    const auto v = get(name, DType::f32).to_f32();
    if (v.size() != 1) throw ValidationError("tensor '" + name + "' must be a scalar");
    return v[0];
  }
  std::vector<float> vec(const std::string& name, std::size_t expected) const {
    auto v = get(name, DType::f32).to_f32();
    if (v.size() != expected)
      throw ValidationError("tensor '" + name + "' has " + std::to_string(v.size()) + " values, expected " +
                            std::to_string(expected));
    return v;
  }
  std::vector<float> opt_vec(const std::string& name, std::size_t expected) const {
    return map_.contains(name) ? vec(name, expected) : std::vector<float>{};
  }
  MatrixF mat(const std::string& name, std::size_t rows, std::size_t cols) const {
    const Tensor& t = get(name, DType::f32);
    if (t.shape().size() != 2 || t.shape()[0] != static_cast<std::int64_t>(rows) ||
        t.shape()[1] != static_cast<std::int64_t>(cols))
      throw ValidationError("tensor '" + name + "' must have shape [" + std::to_string(rows) + ", " +
                            std::to_string(cols) + "]");
    return t.to_matrix();
  }
  std::string str(const std::string& name) const {
    const auto b = get(name, DType::u8).to_u8();
    return {b.begin(), b.end()};
  }
  bool contains(const std::string& name) const { return map_.contains(name); }

 private:
  const TensorMap& map_;
};

void write_config(Writer& w, const VimConfig& c, std::int32_t format) {
  w.i32("meta.format", format);
  w.str("meta.variant", c.variant);
  w.i32("meta.d_model", static_cast<std::int32_t>(c.d_model));
  w.i32("meta.n_blocks", static_cast<std::int32_t>(c.n_blocks));
  w.i32("meta.d_state", static_cast<std::int32_t>(c.d_state));
  w.i32("meta.expand", static_cast<std::int32_t>(c.expand));
  w.i32("meta.d_conv", static_cast<std::int32_t>(c.d_conv));
  w.i32("meta.patch", static_cast<std::int32_t>(c.patch));
  w.i32("meta.in_channels", static_cast<std::int32_t>(c.in_channels));
  w.i32("meta.num_classes", static_cast<std::int32_t>(c.num_classes));
  w.i32("meta.dt_rank", static_cast<std::int32_t>(c.dt_rank));
  w.str("meta.cls", std::string(cls_placement_name(c.cls)));
  w.str("meta.norm", std::string(norm_kind_name(c.norm)));
  w.f32("meta.norm_eps", c.norm_eps);
  w.str("meta.exp_mode", std::string(exp_mode_name(c.exp_mode)));
  w.i32("meta.state_tile", static_cast<std::int32_t>(c.state_tile));
}

VimConfig read_config(const Reader& r, std::int32_t expected_format) {
  if (!r.contains("meta.format")) throw ValidationError("not a model container (meta.format missing)");
  const auto format = r.i32("meta.format");
  if (format != expected_format)
    throw ValidationError(format == kFormatQuant ? "container holds a quantized model"
                                                 : "container does not hold a quantized model");
  VimConfig c;
  c.variant = r.str("meta.variant");
  c.d_model = r.u32("meta.d_model");
  c.n_blocks = r.u32("meta.n_blocks");
  c.d_state = r.u32("meta.d_state");
  c.expand = r.u32("meta.expand");
  c.d_conv = r.u32("meta.d_conv");
  c.patch = r.u32("meta.patch");
  c.in_channels = r.u32("meta.in_channels");
  c.num_classes = r.u32("meta.num_classes");
  c.dt_rank = r.u32("meta.dt_rank");
  c.cls = parse_cls_placement(r.str("meta.cls"));
  c.norm = parse_norm_kind(r.str("meta.norm"));
  c.norm_eps = r.f32("meta.norm_eps");
  c.exp_mode = parse_exp_mode(r.str("meta.exp_mode"));
  c.state_tile = r.u32("meta.state_tile");
  c.validate();
  return c;
}

std::string block_name(std::size_t i) { return "blocks." + std::to_string(i); }
std::string dir_name(std::size_t i, int d) { return block_name(i) + (d ? ".bwd" : ".fwd"); }

// Quantized linear: scales, bias, activation and static absmax in the model
// part, packed words in the weights part.
void write_linear(Writer& w, std::vector<NamedTensor>& weights, const QuantizedLinear& l) {
  w.vec(l.name + ".scales", l.block_scales);
  w.i32(l.name + ".block", static_cast<std::int32_t>(l.block_size));
  w.i32(l.name + ".act", static_cast<std::int32_t>(l.act));
  w.opt_vec(l.name + ".bias", l.bias);
  w.opt_vec(l.name + ".act_absmax", l.act_policy.static_absmax);
  append_blob(weights, l.name, l.blob);
}

ActQuantPolicy read_policy(const Reader& r, const std::string& name, const QuantSettings& qs) {
  ActQuantPolicy p;
  p.dynamic = !qs.static_act;
  p.granularity = qs.per_tensor_act ? ActGranularity::per_tensor : ActGranularity::per_token;
  if (qs.static_act) {
    p.static_absmax = r.get(name + ".act_absmax", DType::f32).to_f32();
    if (qs.per_tensor_act && p.static_absmax.size() != 1)
      throw ValidationError("'" + name + "': per-tensor static scale must be a single value");
  }
  return p;
}

QuantizedLinear read_linear(const Reader& r, const TensorMap& weights, const std::string& name, std::size_t out,
                            std::size_t in, const QuantSettings& qs) {
  QuantizedLinear l;
  l.name = name;
  l.blob = read_blob(weights, name);
  if (l.blob.layout.out_dim != out || l.blob.layout.in_dim != in)
    throw ValidationError("packed weights for '" + name + "' are [" + std::to_string(l.blob.layout.out_dim) + ", " +
                          std::to_string(l.blob.layout.in_dim) + "], expected [" + std::to_string(out) + ", " +
                          std::to_string(in) + "]");
  l.block_size = r.u32(name + ".block");
  if (l.block_size == 0) throw ValidationError("'" + name + "': block size must be >= 1");
  l.block_scales = r.vec(name + ".scales", ceil_div(out * in, l.block_size));
  const auto act = r.i32(name + ".act");
  if (act < 0 || act > static_cast<std::int32_t>(Activation::softplus))
    throw ValidationError("'" + name + "': unknown activation id " + std::to_string(act));
  l.act = static_cast<Activation>(act);
  l.bias = r.opt_vec(name + ".bias", out);
  l.act_policy = read_policy(r, name, qs);
  return l;
}

}  // namespace

std::vector<NamedTensor> model_to_tensors(const FloatModel& model) {
  model.validate();
  std::vector<NamedTensor> out;
  Writer w(out);
  write_config(w, model.cfg, kFormatFloat);
  w.mat("patch_embed.weight", model.patch_w);
  w.opt_vec("patch_embed.bias", model.patch_b);
  w.vec("cls_token", model.cls);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& b = model.blocks[i];
    const std::string p = block_name(i);
    w.vec(p + ".norm.weight", b.norm_gamma);
    w.opt_vec(p + ".norm.bias", b.norm_beta);
    w.mat(p + ".in_proj.weight", b.in_proj_w);
    for (int d = 0; d < 2; ++d) {
      const auto& dir = b.dir[d];
      const std::string q = dir_name(i, d);
      w.mat(q + ".conv.weight", dir.conv_w);
      w.vec(q + ".conv.bias", dir.conv_b);
      w.opt_vec(q + ".x_proj.pre_scale", dir.x_proj_pre);
      w.mat(q + ".x_proj.weight", dir.x_proj_w);
      w.mat(q + ".dt_proj.weight", dir.dt_proj_w);
      w.vec(q + ".dt_proj.bias", dir.dt_proj_b);
      w.mat(q + ".A", dir.A);
      w.vec(q + ".D", dir.d_skip);
    }
    w.opt_vec(p + ".out_proj.pre_scale", b.out_proj_pre);
    w.mat(p + ".out_proj.weight", b.out_proj_w);
  }
  w.vec("norm_f.weight", model.final_gamma);
  w.opt_vec("norm_f.bias", model.final_beta);
  w.mat("head.weight", model.head_w);
  w.opt_vec("head.bias", model.head_b);
  return out;
}

FloatModel model_from_tensors(const TensorMap& map) {
  const Reader r(map);
  FloatModel m;
  m.cfg = read_config(r, kFormatFloat);
  const auto& c = m.cfg;
  const std::size_t d = c.d_model, E = c.inner(), N = c.d_state, K = c.d_conv, R = c.dt_rank;
  m.patch_w = r.mat("patch_embed.weight", d, static_cast<std::size_t>(c.in_channels) * c.patch * c.patch);
  m.patch_b = r.opt_vec("patch_embed.bias", d);
  m.cls = r.vec("cls_token", d);
  m.blocks.resize(c.n_blocks);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = block_name(i);
    b.norm_gamma = r.vec(p + ".norm.weight", d);
    b.norm_beta = r.opt_vec(p + ".norm.bias", d);
    b.in_proj_w = r.mat(p + ".in_proj.weight", 2 * E, d);
    for (int k = 0; k < 2; ++k) {
      auto& dir = b.dir[k];
      const std::string q = dir_name(i, k);
      dir.conv_w = r.mat(q + ".conv.weight", E, K);
      dir.conv_b = r.vec(q + ".conv.bias", E);
      dir.x_proj_pre = r.opt_vec(q + ".x_proj.pre_scale", E);
      dir.x_proj_w = r.mat(q + ".x_proj.weight", R + 2 * N, E);
      dir.dt_proj_w = r.mat(q + ".dt_proj.weight", E, R);
      dir.dt_proj_b = r.vec(q + ".dt_proj.bias", E);
      dir.A = r.mat(q + ".A", E, N);
      dir.d_skip = r.vec(q + ".D", E);
    }
    b.out_proj_pre = r.opt_vec(p + ".out_proj.pre_scale", E);
    b.out_proj_w = r.mat(p + ".out_proj.weight", d, E);
  }
  m.final_gamma = r.vec("norm_f.weight", d);
  m.final_beta = r.opt_vec("norm_f.bias", d);
  m.head_w = r.mat("head.weight", c.num_classes, d);
  m.head_b = r.opt_vec("head.bias", c.num_classes);
  m.validate();
  return m;
}

QuantizedFiles quant_model_to_tensors(const QuantModel& model) {
  QuantizedFiles f;
  Writer w(f.model);
  write_config(w, model.cfg, kFormatQuant);
  const auto& qs = model.qs;
  w.i32("meta.weight_bits", qs.weight_bits);
  w.i32("meta.block", static_cast<std::int32_t>(qs.block));
  w.i32("meta.tile", static_cast<std::int32_t>(qs.tile.tile));
  w.i32("meta.pre_shift", static_cast<std::int32_t>(qs.tile.pre_shift));
  w.f32("meta.alpha", qs.alpha);
  w.i32("meta.smooth", qs.smooth);
  w.i32("meta.static_act", qs.static_act);
  w.i32("meta.per_tensor_act", qs.per_tensor_act);
  w.i32s("meta.coarse", model.codebook.coarse_exponents);
  w.i32s("meta.fine", model.codebook.fine_exponents);

  write_linear(w, f.weights, model.patch);
  w.vec("cls_token", model.cls);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& b = model.blocks[i];
    const std::string p = block_name(i);
    w.vec(p + ".norm.weight", b.norm_gamma);
    w.opt_vec(p + ".norm.bias", b.norm_beta);
    write_linear(w, f.weights, b.in_proj);
    w.opt_vec(p + ".in_proj.report_scale", b.in_proj_report);
    for (int d = 0; d < 2; ++d) {
      const auto& dir = b.dir[d];
      const std::string q = dir_name(i, d);
      f.model.push_back({dir.conv.name + ".codes", Tensor::u8({static_cast<std::int64_t>(dir.conv.codes.rows),
                                                               static_cast<std::int64_t>(dir.conv.codes.cols)},
                                                              dir.conv.codes.data)});
      w.vec(dir.conv.name + ".scales", dir.conv.scales);
      w.opt_vec(dir.conv.name + ".bias", dir.conv.bias);
      w.opt_vec(dir.conv.name + ".act_absmax", dir.conv.act_policy.static_absmax);
      w.opt_vec(q + ".x_proj.pre_scale", dir.x_proj_pre);
      write_linear(w, f.weights, dir.x_proj);
      w.opt_vec(q + ".x_proj.report_scale", dir.x_proj_report);
      write_linear(w, f.weights, dir.dt_proj);
      w.mat(q + ".A", dir.A);
      w.vec(q + ".D", dir.d_skip);
    }
    w.opt_vec(p + ".out_proj.pre_scale", b.out_proj_pre);
    write_linear(w, f.weights, b.out_proj);
  }
  w.vec("norm_f.weight", model.final_gamma);
  w.opt_vec("norm_f.bias", model.final_beta);
  write_linear(w, f.weights, model.head);
  return f;
}

QuantModel quant_model_from_tensors(const TensorMap& map, const TensorMap& weights) {
  const Reader r(map);
  QuantModel m;
  m.cfg = read_config(r, kFormatQuant);
  auto& qs = m.qs;
  qs.weight_bits = r.i32("meta.weight_bits");
  qs.block = r.u32("meta.block");
  qs.tile.tile = r.u32("meta.tile");
  qs.tile.pre_shift = r.u32("meta.pre_shift");
  qs.alpha = r.f32("meta.alpha");
  qs.smooth = r.i32("meta.smooth") != 0;
  qs.static_act = r.i32("meta.static_act") != 0;
  qs.per_tensor_act = r.i32("meta.per_tensor_act") != 0;
  qs.coarse = r.i32s("meta.coarse");
  qs.fine = r.i32s("meta.fine");
  qs.validate();
  m.codebook = qs.codebook();

  const auto& c = m.cfg;
  const std::size_t d = c.d_model, E = c.inner(), N = c.d_state, K = c.d_conv, R = c.dt_rank;
  m.patch = read_linear(r, weights, "patch_embed", d, static_cast<std::size_t>(c.in_channels) * c.patch * c.patch, qs);
  m.cls = r.vec("cls_token", d);
  m.blocks.resize(c.n_blocks);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = block_name(i);
    b.norm_gamma = r.vec(p + ".norm.weight", d);
    b.norm_beta = r.opt_vec(p + ".norm.bias", d);
    b.in_proj = read_linear(r, weights, p + ".in_proj", 2 * E, d, qs);
    b.in_proj_report = r.opt_vec(p + ".in_proj.report_scale", 2 * E);
    for (int k = 0; k < 2; ++k) {
      auto& dir = b.dir[k];
      const std::string q = dir_name(i, k);
      dir.conv.name = q + ".conv";
      const Tensor& codes = r.get(dir.conv.name + ".codes", DType::u8);
      if (codes.shape() != Shape{static_cast<std::int64_t>(E), static_cast<std::int64_t>(K)})
        throw ValidationError("'" + dir.conv.name + ".codes' must have shape [E, K]");
      dir.conv.codes = CodeMatrix(E, K, codes.to_u8());
      for (auto code : dir.conv.codes.data)
        if (code >> m.codebook.code_bits()) throw ValidationError("'" + dir.conv.name + "': code outside the codebook");
      dir.conv.scales = r.vec(dir.conv.name + ".scales", E);
      dir.conv.bias = r.opt_vec(dir.conv.name + ".bias", E);
      dir.conv.act_policy = read_policy(r, dir.conv.name, qs);
      dir.x_proj_pre = r.opt_vec(q + ".x_proj.pre_scale", E);
      dir.x_proj = read_linear(r, weights, q + ".x_proj", R + 2 * N, E, qs);
      dir.x_proj_report = r.opt_vec(q + ".x_proj.report_scale", R + 2 * N);
      dir.dt_proj = read_linear(r, weights, q + ".dt_proj", E, R, qs);
      dir.A = r.mat(q + ".A", E, N);
      dir.d_skip = r.vec(q + ".D", E);
    }
    b.out_proj_pre = r.opt_vec(p + ".out_proj.pre_scale", E);
    b.out_proj = read_linear(r, weights, p + ".out_proj", d, E, qs);
  }
  m.final_gamma = r.vec("norm_f.weight", d);
  m.final_beta = r.opt_vec("norm_f.bias", d);
  m.head = read_linear(r, weights, "head", c.num_classes, d, qs);
  return m;
}

bool is_quantized_container(const TensorMap& map) {
  const Tensor* f = map.find("meta.format");
  return f && f->dtype() == DType::i32 && f->numel() == 1 && f->to_i32()[0] == kFormatQuant;
}

std::vector<NamedTensor> images_to_tensors(const ImageBatch& batch) {
  if (batch.images.empty()) throw ValidationError("image batch is empty");
  const auto& first = batch.images.front();
  std::vector<float> data;
  for (const auto& img : batch.images) {
    if (img.channels != first.channels || img.height != first.height || img.width != first.width)
      throw ValidationError("all images in a batch must share one shape");
    data.insert(data.end(), img.data.begin(), img.data.end());
  }
  std::vector<NamedTensor> out;
  out.push_back({"input", Tensor::f32({static_cast<std::int64_t>(batch.images.size()),
                                       static_cast<std::int64_t>(first.channels),
                                       static_cast<std::int64_t>(first.height),
                                       static_cast<std::int64_t>(first.width)},
                                      data)});
  if (!batch.labels.empty()) {
    if (batch.labels.size() != batch.images.size()) throw ValidationError("one label per image expected");
    out.push_back({"labels", Tensor::i32({static_cast<std::int64_t>(batch.labels.size())}, batch.labels)});
  }
  return out;
}

ImageBatch images_from_tensors(const TensorMap& map) {
  const Reader r(map);
  const Tensor& t = r.get("input", DType::f32);
  auto shape = t.shape();
  if (shape.size() == 3) shape.insert(shape.begin(), 1);
  if (shape.size() != 4) throw ValidationError("'input' must have shape [N, C, H, W] or [C, H, W]");
  for (auto d : shape)
    if (d <= 0) throw ValidationError("'input' has an empty dimension");
  const auto n = static_cast<std::size_t>(shape[0]), c = static_cast<std::size_t>(shape[1]),
             h = static_cast<std::size_t>(shape[2]), w = static_cast<std::size_t>(shape[3]);
  const auto data = t.to_f32();
  ImageBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    Image img{c, h, w, std::vector<float>(data.begin() + i * c * h * w, data.begin() + (i + 1) * c * h * w)};
    for (float v : img.data)
      if (!std::isfinite(v)) throw ValidationError("input image " + std::to_string(i) + " has non-finite pixels");
    b.images.push_back(std::move(img));
  }
  if (r.contains("labels")) {
    const auto labels = r.get("labels", DType::i32).to_i32();
    if (labels.size() != n) throw ValidationError("'labels' must have one entry per image");
    b.labels.assign(labels.begin(), labels.end());
  }
  return b;
}

void save_model(const std::filesystem::path& path, const FloatModel& model) {
  save_container(path, model_to_tensors(model));
}

FloatModel load_model(const std::filesystem::path& path) { return model_from_tensors(TensorMap(load_container(path))); }

std::filesystem::path packed_path_for(const std::filesystem::path& model_path) {
  auto p = model_path;
  p.replace_extension(".vimqw");
  return p;
}

void save_quant_model(const std::filesystem::path& path, const QuantModel& model) {
  const auto files = quant_model_to_tensors(model);
  save_container(path, files.model);
  save_container(packed_path_for(path), files.weights);
}

QuantModel load_quant_model(const std::filesystem::path& path) {
  return quant_model_from_tensors(TensorMap(load_container(path)), TensorMap(load_container(packed_path_for(path))));
}

}  // namespace vimq

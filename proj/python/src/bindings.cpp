#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "vimq/codebook.hpp"
#include "vimq/linear_engine.hpp"
#include "vimq/metrics.hpp"
#include "vimq/model.hpp"
#include "vimq/quantizer.hpp"
#include "vimq/ssm_engine.hpp"
#include "vimq/verify.hpp"

namespace py = pybind11;
using namespace vimq;

namespace {

template <class T>
using Arr = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <class T>
Mat<T> to_mat(const Arr<T>& a, const char* what) {
  if (a.ndim() != 2) throw ValidationError(std::string(what) + " must be a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Mat<T>(r, c, std::vector<T>(a.data(), a.data() + r * c));
}

template <class T>
std::vector<T> to_vec(const Arr<T>& a) {
  return std::vector<T>(a.data(), a.data() + a.size());
}

template <class T>
Arr<T> from_mat(const Mat<T>& m) {
  Arr<T> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(m.rows), static_cast<py::ssize_t>(m.cols)});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

template <class T>
Arr<T> from_vec(const std::vector<T>& v) {
  Arr<T> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Image to_image(const Arr<float>& a) {
  if (a.ndim() != 3) throw ValidationError("image must be a [C, H, W] array");
  Image img{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
            static_cast<std::size_t>(a.shape(2)), to_vec(a)};
  return img;
}

Arr<float> from_image(const Image& img) {
  Arr<float> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(img.channels), static_cast<py::ssize_t>(img.height),
                                          static_cast<py::ssize_t>(img.width)});
  std::copy(img.data.begin(), img.data.end(), out.mutable_data());
  return out;
}

py::dict counters_dict(const EngineCounters& c) {
  py::dict d;
  d["tiles"] = c.tiles;
  d["lut_builds"] = c.lut_builds;
  d["pe_selects"] = c.pe_selects;
  d["macs"] = c.macs;
  d["words_streamed"] = c.words_streamed;
  d["tokens"] = c.tokens;
  d["state_updates"] = c.state_updates;
  return d;
}

template <class T>
SsmParamsT<T> ssm_params(const Arr<T>& u, const Arr<T>& delta, const Arr<T>& A, const Arr<T>& B, const Arr<T>& C,
                         const Arr<T>& d_skip, const Arr<T>& z) {
  SsmParamsT<T> p;
  p.u = to_mat(u, "u");
  p.delta = to_mat(delta, "delta");
  p.A = to_mat(A, "A");
  p.B = to_mat(B, "B");
  p.C = to_mat(C, "C");
  p.d_skip = to_vec(d_skip);
  p.z = to_mat(z, "z");
  return p;
}

QuantSettings make_settings(int bits, std::uint32_t block, std::uint32_t tile, std::uint32_t pre_shift, float alpha,
                            bool smooth, bool static_act, bool per_tensor_act) {
  QuantSettings qs;
  qs.weight_bits = bits;
  qs.block = block;
  qs.tile = {tile, pre_shift};
  qs.alpha = alpha;
  qs.smooth = smooth;
  qs.static_act = static_act;
  qs.per_tensor_act = per_tensor_act;
  return qs;
}

}  // namespace

PYBIND11_MODULE(_vimq, m) {
  m.doc() = "Low-bit APoT quantization and bit-accurate inference engines for Vision Mamba models";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  // codebook / quantizer
  m.def(
      "build_codebook",
      [](const std::vector<int>& coarse, const std::vector<int>& fine) { return build_codebook(coarse, fine).levels; },
      py::arg("coarse"), py::arg("fine"), "Non-negative APoT levels for the given exponent bases.");
  m.def(
      "codebook_levels", [](int bits) { return codebook_for_bits(bits).levels; }, py::arg("bits"));

  m.def(
      "quantize_weights",
      [](const Arr<float>& w, std::uint32_t block, int bits) {
        const auto qw = quantize_weights(to_mat(w, "w"), block, codebook_for_bits(bits));
        return py::make_tuple(from_mat(qw.codes), from_vec(qw.scales));
      },
      py::arg("w"), py::arg("block") = 32, py::arg("bits") = 4, "Returns (sign-magnitude codes, block scales).");
  m.def(
      "dequantize_weights",
      [](const Arr<float>& w, std::uint32_t block, int bits) {
        const auto cb = codebook_for_bits(bits);
        return from_mat(dequantize_weights(quantize_weights(to_mat(w, "w"), block, cb), cb));
      },
      py::arg("w"), py::arg("block") = 32, py::arg("bits") = 4, "Quantize then dequantize.");
  m.def(
      "quantize_token",
      [](const Arr<float>& x) {
        const auto t = quantize_token(to_vec(x));
        return py::make_tuple(from_vec(t.q), t.scale);
      },
      py::arg("x"));

  // linear engine
  m.def(
      "linear_quantized",
      [](const Arr<float>& x, const Arr<float>& w, std::optional<Arr<float>> bias, int bits, std::uint32_t block,
         std::uint32_t tile, std::uint32_t pre_shift, const std::string& activation) {
        const auto cb = codebook_for_bits(bits);
        const TileConfig tc{tile, pre_shift};
        tc.validate(cb, block);
        const auto qw = quantize_weights(to_mat(w, "w"), block, cb);
        const auto layer = make_quantized_linear("python", qw, bias ? to_vec(*bias) : std::vector<float>{},
                                                 parse_activation(activation), tc, cb);
        const auto r = linear_forward_quantized(to_mat(x, "x"), layer, cb, tc);
        return py::make_tuple(from_mat(r.y), counters_dict(r.counters));
      },
      py::arg("x"), py::arg("w"), py::arg("bias") = py::none(), py::arg("bits") = 4, py::arg("block") = 32,
      py::arg("tile") = 32, py::arg("pre_shift") = 8, py::arg("activation") = "none",
      "LUT engine forward. Returns (y, counters).");
  m.def(
      "linear_oracle",
      [](const Arr<float>& x, const Arr<float>& w, std::optional<Arr<float>> bias, int bits, std::uint32_t block,
         std::uint32_t tile, std::uint32_t pre_shift, const std::string& activation) {
        const auto cb = codebook_for_bits(bits);
        const auto qw = quantize_weights(to_mat(w, "w"), block, cb);
        const auto b = bias ? to_vec(*bias) : std::vector<float>{};
        return from_mat(
            staged_linear_oracle(to_mat(x, "x"), qw, b, parse_activation(activation), {}, cb, tile, pre_shift));
      },
      py::arg("x"), py::arg("w"), py::arg("bias") = py::none(), py::arg("bits") = 4, py::arg("block") = 32,
      py::arg("tile") = 32, py::arg("pre_shift") = 8, py::arg("activation") = "none",
      "Staged reference of linear_quantized; agrees bit for bit.");

  // SSM
  m.def(
      "ssm_forward",
      [](const Arr<double>& u, const Arr<double>& delta, const Arr<double>& A, const Arr<double>& B,
         const Arr<double>& C, const Arr<double>& d_skip, const Arr<double>& z, std::uint32_t state_tile,
         const std::string& exp_mode, bool f64) -> py::object {
        SsmOptions so;
        so.state_tile = state_tile;
        so.exp_mode = parse_exp_mode(exp_mode);
        const auto p = ssm_params<double>(u, delta, A, B, C, d_skip, z);
        if (f64) return from_mat(ssm_forward(p, so));
        SsmParams p32;
        auto narrow = [](const Mat<double>& m) {
          return MatrixF(m.rows, m.cols, std::vector<float>(m.data.begin(), m.data.end()));
        };
        p32.u = narrow(p.u);
        p32.delta = narrow(p.delta);
        p32.A = narrow(p.A);
        p32.B = narrow(p.B);
        p32.C = narrow(p.C);
        p32.d_skip.assign(p.d_skip.begin(), p.d_skip.end());
        p32.z = narrow(p.z);
        return from_mat(ssm_forward(p32, so));
      },
      py::arg("u"), py::arg("delta"), py::arg("A"), py::arg("B"), py::arg("C"), py::arg("D"), py::arg("z"),
      py::arg("state_tile") = 16, py::arg("exp_mode") = "exact", py::arg("f64") = false,
      "Sequential selective-scan engine; computes in f32 unless f64 is set.");
  m.def(
      "ssm_scan_oracle",
      [](const Arr<double>& u, const Arr<double>& delta, const Arr<double>& A, const Arr<double>& B,
         const Arr<double>& C, const Arr<double>& d_skip, const Arr<double>& z) {
        return from_mat(ssm_scan_oracle(ssm_params<double>(u, delta, A, B, C, d_skip, z)));
      },
      py::arg("u"), py::arg("delta"), py::arg("A"), py::arg("B"), py::arg("C"), py::arg("D"), py::arg("z"),
      "Associative-scan reference in f64.");

  // metrics
  m.def(
      "cosine_similarity",
      [](const Arr<float>& a, const Arr<float>& b) { return cosine_similarity(to_vec(a), to_vec(b)); });
  m.def("hash_floats", [](const Arr<float>& a) { return hash_floats(to_vec(a)); });

  // model
  py::class_<VimConfig>(m, "VimConfig")
      .def_readonly("variant", &VimConfig::variant)
      .def_readonly("d_model", &VimConfig::d_model)
      .def_readonly("n_blocks", &VimConfig::n_blocks)
      .def_readonly("d_state", &VimConfig::d_state)
      .def_readonly("dt_rank", &VimConfig::dt_rank)
      .def_readonly("num_classes", &VimConfig::num_classes)
      .def_readonly("patch", &VimConfig::patch);

  py::class_<CalibrationStats>(m, "CalibrationStats")
      .def_readonly("samples", &CalibrationStats::samples)
      .def("layers", [](const CalibrationStats& s) {
        std::vector<std::string> names;
        for (const auto& [k, v] : s.absmax) names.push_back(k);
        return names;
      });

  py::class_<FloatModel>(m, "FloatModel")
      .def_readonly("config", &FloatModel::cfg)
      .def(
          "forward", [](const FloatModel& fm, const Arr<float>& img) { return from_vec(model_forward(to_image(img), fm)); },
          py::arg("image"))
      .def("save", [](const FloatModel& fm, const std::filesystem::path& p) { save_model(p, fm); });

  py::class_<QuantModel>(m, "QuantModel")
      .def_readonly("config", &QuantModel::cfg)
      .def_property_readonly("weight_bits", [](const QuantModel& q) { return q.qs.weight_bits; })
      .def_property_readonly("block", [](const QuantModel& q) { return q.qs.block; })
      .def(
          "forward",
          [](const QuantModel& q, const Arr<float>& img) { return from_vec(model_forward(to_image(img), q)); },
          py::arg("image"))
      .def("save", [](const QuantModel& q, const std::filesystem::path& p) { save_quant_model(p, q); });

  m.def(
      "init_model",
      [](const std::string& variant, std::optional<std::uint32_t> blocks, std::optional<std::uint32_t> classes,
         std::uint64_t seed) {
        auto cfg = config_for_variant(variant);
        if (blocks) cfg.n_blocks = *blocks;
        if (classes) cfg.num_classes = *classes;
        return init_model(cfg, seed);
      },
      py::arg("variant") = "tiny", py::arg("blocks") = py::none(), py::arg("classes") = py::none(),
      py::arg("seed") = 0);
  m.def("load_model", [](const std::filesystem::path& p) { return load_model(p); });
  m.def("load_quant_model", [](const std::filesystem::path& p) { return load_quant_model(p); });
  m.def(
      "random_image",
      [](std::size_t height, std::size_t width, std::uint64_t seed, std::size_t channels) {
        return from_image(random_image(channels, height, width, seed));
      },
      py::arg("height"), py::arg("width"), py::arg("seed") = 0, py::arg("channels") = 3);
  m.def(
      "calibrate",
      [](const FloatModel& fm, const std::vector<Arr<float>>& images) {
        std::vector<Image> imgs;
        for (const auto& a : images) imgs.push_back(to_image(a));
        return calibrate(fm, imgs);
      },
      py::arg("model"), py::arg("images"));
  m.def(
      "quantize_model",
      [](const FloatModel& fm, const CalibrationStats* calib, int bits, std::uint32_t block, std::uint32_t tile,
         std::uint32_t pre_shift, float alpha, bool smooth, bool static_act, bool per_tensor_act) {
        return quantize_model(fm, calib,
                              make_settings(bits, block, tile, pre_shift, alpha, smooth, static_act, per_tensor_act));
      },
      py::arg("model"), py::arg("calib") = nullptr, py::arg("bits") = 4, py::arg("block") = 32, py::arg("tile") = 32,
      py::arg("pre_shift") = 8, py::arg("alpha") = 0.5f, py::arg("smooth") = true, py::arg("static_act") = false,
      py::arg("per_tensor_act") = false);
}

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fambav/data.hpp"
#include "fambav/errors.hpp"
#include "fambav/fusion.hpp"
#include "fambav/ops.hpp"
#include "fambav/scheduler.hpp"
#include "fambav/ssm.hpp"

namespace py = pybind11;
using namespace fambav;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<double>::from_vector(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor<double>& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

FusionPlan make_plan(const std::string& strategy, std::size_t layers, std::size_t r, std::size_t seq_len,
                     std::size_t boundary) {
  Strategy s{parse_strategy_kind(strategy), 0};
  if (s.kind == Strategy::Kind::LowerLayer) s.boundary = boundary ? boundary : default_lower_k(layers);
  if (s.kind == Strategy::Kind::UpperLayer) s.boundary = boundary ? boundary : default_upper_start(layers);
  return build_plan(s, layers, r, seq_len);
}

py::dict plan_dict(const FusionPlan& p) {
  py::dict d;
  d["strategy"] = strategy_name(p.strategy.kind);
  d["boundary"] = p.strategy.boundary;
  d["r"] = p.r;
  d["lengths"] = p.lengths();
  d["total_reduced"] = p.total_reduced();
  d["token_steps"] = token_steps(p).total;
  d["record"] = p.to_record();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings to the fambav C++ core";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<PlanError>(m, "PlanError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("build_plan", [](const std::string& strategy, std::size_t layers, std::size_t r, std::size_t seq_len,
                         std::size_t boundary) { return plan_dict(make_plan(strategy, layers, r, seq_len, boundary)); },
        py::arg("strategy"), py::arg("layers"), py::arg("r"), py::arg("seq_len"), py::arg("boundary") = 0);

  m.def("token_steps", [](std::vector<std::size_t> r, std::size_t seq_len) {
    const TokenSteps s = token_steps(custom_plan(std::move(r), seq_len));
    return py::make_tuple(s.total, s.per_layer);
  }, py::arg("r"), py::arg("seq_len"));

  m.def("parity_configs", [](std::size_t layers, std::size_t budget) {
    py::list out;
    for (const ParityEntry& e : parity_configs(layers, budget)) {
      py::dict d;
      d["strategy"] = strategy_name(e.strategy.kind);
      d["boundary"] = e.strategy.boundary;
      d["r"] = e.r_per_layer;
      d["fused_layers"] = e.fused_layers;
      d["total"] = e.total;
      out.append(d);
    }
    return out;
  }, py::arg("layers"), py::arg("budget"));

  m.def("match_pairs", [](const Array& tokens, std::size_t r) {
    if (tokens.ndim() != 2) throw py::value_error("tokens must be [L, D]");
    const std::size_t len = tokens.shape(0), width = tokens.shape(1);
    const Partition part = partition_even_odd(len);
    const MatchResult res = match_pairs(cosine_similarity(tokens.data(), width, part), part, r, len);
    py::list out;
    for (const MergePair& p : res.pairs) out.append(py::make_tuple(p.index_a, p.index_b, p.similarity));
    return out;
  }, py::arg("tokens"), py::arg("r"));

  m.def("fuse_layer", [](const Array& tokens, std::size_t r, bool weighted) {
    if (tokens.ndim() != 3) throw py::value_error("tokens must be [B, L, D]");
    TokenSequence<double> seq;
    seq.values = to_tensor(tokens);
    FusionOptions opts;
    opts.weighted = weighted;
    return to_array(fuse_layer(seq, r, opts).values);
  }, py::arg("tokens"), py::arg("r"), py::arg("weighted") = false);

  m.def("phi1", [](const Array& z) { return to_array(phi1(to_tensor(z))); }, py::arg("z"));

  m.def("selective_scan",
        [](const Array& x, const Array& delta, const Array& b, const Array& c, const Array& a,
           std::optional<Array> skip, bool reverse) {
          return to_array(selective_scan(to_tensor(x), to_tensor(delta), to_tensor(b), to_tensor(c), to_tensor(a),
                                         skip ? to_tensor(*skip) : Tensor<double>{},
                                         reverse ? ScanDirection::Backward : ScanDirection::Forward));
        },
        py::arg("x"), py::arg("delta"), py::arg("b"), py::arg("c"), py::arg("a"), py::arg("skip") = py::none(),
        py::arg("reverse") = false);

  m.def("load_cifar100", [](const std::string& path) {
    const Dataset d = load_cifar100_binary(path);
    py::array_t<float> pixels({static_cast<py::ssize_t>(d.size()), py::ssize_t{3}, py::ssize_t{32}, py::ssize_t{32}});
    py::array_t<std::int64_t> fine(static_cast<py::ssize_t>(d.size())), coarse(static_cast<py::ssize_t>(d.size()));
    float* px = pixels.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      std::copy(d[i].pixels.begin(), d[i].pixels.end(), px + i * 3072);
      fine.mutable_data()[i] = static_cast<std::int64_t>(d[i].fine_label);
      coarse.mutable_data()[i] = d[i].coarse_label ? static_cast<std::int64_t>(*d[i].coarse_label) : -1;
    }
    return py::make_tuple(pixels, fine, coarse);
  }, py::arg("path"));
}

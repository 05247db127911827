#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "sotu/checkpoint_io.hpp"
#include "sotu/classifier.hpp"
#include "sotu/cli.hpp"
#include "sotu/delta_ops.hpp"
#include "sotu/harness.hpp"

namespace py = pybind11;
using namespace sotu;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

DenseTensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return DenseTensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const DenseTensor& t) {
  Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), a.mutable_data());
  return a;
}

// Python dicts keep insertion order, which becomes the tensor order.
ParamSet to_paramset(const py::dict& d) {
  ParamSet ps;
  for (const auto& [k, v] : d) ps.add(py::cast<std::string>(k), to_tensor(py::cast<Array>(v)));
  return ps;
}

py::dict to_dict(const ParamSet& ps) {
  py::dict d;
  for (const auto& e : ps) d[py::str(e.name)] = to_array(e.tensor);
  return d;
}

RunConfig to_config(const std::map<std::string, std::string>& kv) {
  RunConfig cfg;
  for (const auto& [k, v] : kv) set_config_value(cfg, k, v);
  cfg.validate();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_sotu, m) {
  m.doc() = "Sparse delta masking and merging for continual learning";

  static py::exception<Error> error(m, "SotuError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, (std::string(errc_name(e.code())) + ": " + e.detail()).c_str());
    }
  });

  py::class_<SparseDelta>(m, "SparseDelta")
      .def_readonly("keep_prob", &SparseDelta::keep_prob)
      .def_readonly("seed", &SparseDelta::seed)
      .def_property_readonly("num_kept", &SparseDelta::num_kept)
      .def_property_readonly("num_coordinates", &SparseDelta::num_coordinates)
      .def("to_dense", [](const SparseDelta& d) { return to_dict(to_dense(d)); })
      .def("save", [](const SparseDelta& d, const std::filesystem::path& p) { save_sparse_delta(d, p); })
      .def("bit_identical", &SparseDelta::bit_identical);

  m.def("load_sparse_delta", &load_sparse_delta, py::arg("path"));
  m.def("load_paramset", [](const std::filesystem::path& p) { return to_dict(load_paramset(p)); }, py::arg("path"));
  m.def("save_paramset", [](const py::dict& d, const std::filesystem::path& p) { save_paramset(to_paramset(d), p); },
        py::arg("params"), py::arg("path"));
  m.def("fingerprint", [](const py::dict& d) {
    const auto fp = fingerprint(to_paramset(d));
    return py::bytes(reinterpret_cast<const char*>(fp.digest.data()), fp.digest.size());
  });

  m.def("compute_delta", [](const py::dict& ft, const py::dict& pre) {
    return to_dict(compute_delta(to_paramset(ft), to_paramset(pre)));
  }, py::arg("theta_ft"), py::arg("theta_pre"));
  m.def("mask_delta", [](const py::dict& delta, double p, std::uint64_t seed, const py::dict& base) {
    return mask_delta(to_paramset(delta), p, seed, fingerprint(to_paramset(base)));
  }, py::arg("delta"), py::arg("mask_rate"), py::arg("seed"), py::arg("base"));
  m.def("merge_deltas", [](const py::dict& pre, const std::vector<SparseDelta>& deltas) {
    return to_dict(merge_deltas(to_paramset(pre), deltas));
  }, py::arg("theta_pre"), py::arg("deltas"));
  m.def("delta_cosine_matrix", [](const std::vector<SparseDelta>& deltas) {
    const auto s = delta_cosine_matrix(deltas);
    Array a({s.n, s.n});
    std::copy(s.values.begin(), s.values.end(), a.mutable_data());
    return a;
  });
  m.def("multi_collision_rate", [](const std::vector<SparseDelta>& deltas) {
    return collision_report(deltas).multi_collision_rate;
  });
  m.def("binomial_multi_collision_rate", &binomial_multi_collision_rate, py::arg("tasks"), py::arg("keep_prob"));

  m.def("compute_metrics", [](const std::vector<double>& r) {
    const auto mt = compute_metrics(r);
    return py::make_tuple(mt.avg_acc, mt.final_acc);
  });
  m.def("ncm_predict", [](const std::vector<std::pair<ClassId, std::vector<double>>>& protos,
                          const std::vector<double>& feature) {
    PrototypeSet set;
    for (const auto& [id, v] : protos) set.add(id, v);
    return ncm_predict(set, feature);
  }, py::arg("prototypes"), py::arg("feature"));

  m.def("config_keys", &config_keys);
  m.def("default_config", [] {
    std::map<std::string, std::string> out;
    const RunConfig cfg;
    for (const auto& k : config_keys()) out[k] = get_config_value(cfg, k);
    return out;
  });
  m.def("run_experiment", [](const std::map<std::string, std::string>& kv) {
    const auto cfg = to_config(kv);
    RunResult res;
    {
      py::gil_scoped_release release;
      res = run_experiment(cfg);
    }
    py::dict d;
    d["R"] = res.metrics.R;
    d["avg_acc"] = res.metrics.avg_acc;
    d["final_acc"] = res.metrics.final_acc;
    return d;
  }, py::arg("config") = std::map<std::string, std::string>{});

  m.def("cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"));
}

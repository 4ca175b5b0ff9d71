// Python bindings: manifold operations plus the simulation/estimation
// entry points. JSON-valued structures cross the boundary as dicts.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mhe/sim.hpp"

namespace py = pybind11;
using namespace mhe;

namespace {

py::object json_to_py(const nlohmann::json& j) {
  py::object loads = py::module_::import("json").attr("loads");
  return loads(j.dump());
}

nlohmann::json py_to_json(const py::object& obj) {
  py::object dumps = py::module_::import("json").attr("dumps");
  return nlohmann::json::parse(dumps(obj).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(pymhe, m) {
  m.doc() = "Moving-horizon sensor fusion";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<NumericalError>(m, "NumericalError");
  py::register_exception<ContractViolation>(m, "ContractViolation");

  py::class_<Manifold>(m, "Manifold")
      .def_static("euclidean", &Manifold::Euclidean, py::arg("n"))
      .def_static("unit_quaternion", &Manifold::UnitQuaternion)
      .def_static("angle", &Manifold::Angle)
      .def_property_readonly("ambient_dim", &Manifold::ambient_dim)
      .def_property_readonly("tangent_dim", &Manifold::tangent_dim)
      .def("boxplus", &Manifold::boxplus, py::arg("x"), py::arg("delta"))
      .def("boxminus", &Manifold::boxminus, py::arg("y"), py::arg("x"))
      .def("is_valid", &Manifold::is_valid, py::arg("v"), py::arg("tol") = 1e-9);

  m.def("wrap_angle", &wrap_angle, py::arg("a"));

  py::class_<sim::MetricsReport>(m, "MetricsReport")
      .def_readonly("rms_position_error", &sim::MetricsReport::rms_position_error)
      .def_readonly("rms_heading_error", &sim::MetricsReport::rms_heading_error)
      .def_readonly("consistency_rms", &sim::MetricsReport::consistency_rms)
      .def_readonly("total_solves", &sim::MetricsReport::total_solves)
      .def_readonly("dropped_measurements", &sim::MetricsReport::dropped_measurements)
      .def("to_dict", [](const sim::MetricsReport& r) { return json_to_py(r.to_json()); });

  py::class_<sim::RunResult>(m, "RunResult")
      .def_readonly("estimator", &sim::RunResult::estimator)
      .def_readonly("metrics", &sim::RunResult::metrics)
      .def_property_readonly("num_rows", [](const sim::RunResult& r) {
        return r.rows.size();
      });

  py::class_<sim::SimConfig>(m, "SimConfig")
      .def_static("from_dict",
                  [](const py::object& d) { return sim::SimConfig::from_json(py_to_json(d)); })
      .def("to_dict", [](const sim::SimConfig& c) { return json_to_py(c.to_json()); })
      .def("hash", &sim::SimConfig::hash);

  py::class_<sim::SimDataset>(m, "SimDataset")
      .def_static("from_dict",
                  [](const py::object& d) { return sim::SimDataset::from_json(py_to_json(d)); })
      .def("to_dict", [](const sim::SimDataset& d) { return json_to_py(d.to_json()); })
      .def_property_readonly("num_events",
                             [](const sim::SimDataset& d) { return d.events.size(); });

  m.def("simulate", &sim::simulate, py::arg("config"));
  m.def("run_mhe", &sim::run_mhe, py::arg("dataset"), py::arg("config"));
  m.def("run_iekf", &sim::run_iekf, py::arg("dataset"), py::arg("config"));
  m.def("write_report", &sim::write_report, py::arg("result"), py::arg("config"),
        py::arg("out_dir"), py::arg("format") = "csv");
}

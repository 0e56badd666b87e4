#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ontraffic/config_json.hpp"
#include "ontraffic/dataset.hpp"
#include "ontraffic/evaluation.hpp"
#include "ontraffic/net.hpp"
#include "ontraffic/training.hpp"

namespace py = pybind11;
using namespace ontraffic;

namespace {

// Config dicts travel through JSON so Python sees the same keys as the CLI.
Json to_json_obj(const py::object& o) {
  if (o.is_none()) return Json::object();
  auto dumps = py::module_::import("json").attr("dumps");
  return Json::parse(dumps(o).cast<std::string>());
}

py::object to_py(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

template <class C>
C config_from(const py::object& o) {
  C c;
  apply_json(c, to_json_obj(o));
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array vec(const std::vector<double>& v) { return Array(static_cast<py::ssize_t>(v.size()), v.data()); }

Array mat(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  Array a({static_cast<py::ssize_t>(rows), static_cast<py::ssize_t>(cols)});
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

pipeline::InputSet input_from(const Array& coords, const Array& values) {
  if (coords.ndim() != 2 || coords.shape(1) != 3) throw py::value_error("coords must have shape (m, 3)");
  if (values.ndim() != 2 || values.shape(1) != 2) throw py::value_error("values must have shape (m, 2)");
  if (coords.shape(0) != values.shape(0)) throw py::value_error("coords and values differ in row count");
  pipeline::InputSet in;
  const auto c = coords.unchecked<2>();
  const auto v = values.unchecked<2>();
  for (py::ssize_t i = 0; i < coords.shape(0); ++i) in.push({c(i, 0), c(i, 1), c(i, 2)}, {v(i, 0), v(i, 1)});
  return in;
}

std::vector<pipeline::Query> queries_from(const Array& q) {
  if (q.ndim() != 2 || q.shape(1) != 2) throw py::value_error("queries must have shape (n, 2)");
  std::vector<pipeline::Query> out(static_cast<std::size_t>(q.shape(0)));
  const auto a = q.unchecked<2>();
  for (py::ssize_t i = 0; i < q.shape(0); ++i) out[static_cast<std::size_t>(i)] = {a(i, 0), a(i, 1)};
  return out;
}

py::dict field_dict(const net::PredictionField& f) {
  py::dict d;
  d["rho"] = vec(f.rho);
  d["v"] = vec(f.v);
  d["sigma_rho"] = vec(f.sigma_rho);
  d["sigma_v"] = vec(f.sigma_v);
  return d;
}

py::dict scenario_dict(const pipeline::Scenario& s) {
  py::dict d;
  d["source"] = pipeline::to_string(s.source);
  d["x"] = vec(s.cell_centers);
  d["t"] = vec(s.times);
  d["rho"] = mat(s.rho, s.n_times(), s.n_cells());
  d["v"] = mat(s.v, s.n_times(), s.n_cells());
  std::vector<double> probes;
  for (const auto& p : s.probes) probes.insert(probes.end(), {p.y, p.t, p.rho, p.v, double(p.source_id)});
  d["probes"] = mat(probes, s.probes.size(), 5);
  return d;
}

py::dict sample_dict(const pipeline::TrainingSample& s) {
  std::vector<double> c, v, q, t;
  for (std::size_t i = 0; i < s.input.size(); ++i) {
    c.insert(c.end(), s.input.coords[i].begin(), s.input.coords[i].end());
    v.insert(v.end(), s.input.values[i].begin(), s.input.values[i].end());
  }
  for (std::size_t i = 0; i < s.queries.size(); ++i) {
    q.insert(q.end(), {s.queries[i].x, s.queries[i].t});
    t.insert(t.end(), {s.targets[i][0], s.targets[i][1]});
  }
  py::dict d;
  d["coords"] = mat(c, s.input.size(), 3);
  d["values"] = mat(v, s.input.size(), 2);
  d["queries"] = mat(q, s.queries.size(), 2);
  d["targets"] = mat(t, s.queries.size(), 2);
  d["t_c"] = s.t_c;
  return d;
}

py::dict record_dict(const training::EpochRecord& r) {
  py::dict d;
  d["epoch"] = r.epoch;
  d["train_mse"] = r.train_mse;
  d["val_mse"] = r.val_mse;
  d["train_nll"] = r.train_nll;
  d["val_nll"] = r.val_nll;
  d["grad_norm"] = r.grad_norm;
  d["seconds"] = r.seconds;
  return d;
}

struct Model {
  net::ModelParams params;
  std::string meta = "{}";
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Traffic-state operator network with probe-vehicle inputs";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<pipeline::DatasetError>(m, "DatasetError", PyExc_IOError);
  py::register_exception<net::CheckpointError>(m, "CheckpointError", PyExc_IOError);
  py::register_exception<training::DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  py::class_<pipeline::Dataset>(m, "Dataset")
      .def("__len__", [](const pipeline::Dataset& d) { return d.scenarios.size(); })
      .def_property_readonly("config", [](const pipeline::Dataset& d) { return to_py(to_json(d.config)); })
      .def("scenario",
           [](const pipeline::Dataset& d, std::size_t i) {
             if (i >= d.scenarios.size()) throw py::index_error("scenario index out of range");
             return scenario_dict(d.scenarios[i]);
           })
      .def(
          "window",
          [](const pipeline::Dataset& d, std::size_t i, double t_c, bool shifted) {
            if (i >= d.scenarios.size()) throw py::index_error("scenario index out of range");
            return sample_dict(training::window(d.scenarios[i], t_c, d.config.windows, shifted));
          },
          py::arg("index"), py::arg("t_c"), py::arg("shifted") = true,
          "Input set and targets of the window at reference time t_c")
      .def("save", [](const pipeline::Dataset& d, const std::filesystem::path& p) { pipeline::save_dataset(d, p); });

  m.def(
      "generate_dataset",
      [](const py::object& cfg, unsigned workers) {
        py::gil_scoped_release release;
        return pipeline::generate_dataset(
            [&] {
              py::gil_scoped_acquire acquire;
              return config_from<pipeline::GenerationConfig>(cfg);
            }(),
            workers);
      },
      py::arg("config") = py::none(), py::arg("workers") = 1);
  m.def("load_dataset", [](const std::filesystem::path& p) { return pipeline::load_dataset(p); });

  py::class_<Model>(m, "Model")
      .def_static(
          "init",
          [](const py::object& cfg, std::uint64_t seed) {
            Rng rng = make_rng(seed);
            return Model{net::ModelParams::init(config_from<net::ModelConfig>(cfg), rng)};
          },
          py::arg("config") = py::none(), py::arg("seed") = 0)
      .def_static("load",
                  [](const std::filesystem::path& p) {
                    auto ck = net::load_checkpoint(p);
                    return Model{std::move(ck.params), ck.meta_json};
                  })
      .def("save",
           [](const Model& md, const std::filesystem::path& p) {
             net::save_checkpoint(net::Checkpoint{md.params, md.meta, {}}, p);
           })
      .def_property_readonly("config", [](const Model& md) { return to_py(to_json(md.params.config)); })
      .def_property_readonly("meta", [](const Model& md) { return to_py(Json::parse(md.meta)); })
      .def_property_readonly("parameter_count", [](const Model& md) { return md.params.parameter_count(); })
      .def(
          "predict",
          [](const Model& md, const Array& coords, const Array& values, const Array& queries) {
            const auto in = input_from(coords, values);
            const auto q = queries_from(queries);
            net::PredictionField f;
            {
              py::gil_scoped_release release;
              f = net::predict(md.params, in, q);
            }
            return field_dict(f);
          },
          py::arg("coords"), py::arg("values"), py::arg("queries"),
          "coords (m, 3) = x, t, id; values (m, 2) = rho, v; queries (n, 2) = x, t");

  m.def(
      "train",
      [](const pipeline::Dataset& data, const py::object& model_cfg, const py::object& train_cfg,
         const py::object& on_epoch) {
        const auto tc = config_from<training::TrainConfig>(train_cfg);
        const auto mc = training::fit_model_box(config_from<net::ModelConfig>(model_cfg), data.config, tc.temporal_shift);
        training::TrainOptions opt;
        if (!on_epoch.is_none())
          opt.on_epoch = [&](const training::EpochRecord& r) {
            py::gil_scoped_acquire acquire;
            on_epoch(record_dict(r));
          };
        training::TrainResult res;
        {
          py::gil_scoped_release release;
          res = training::train(data, mc, tc, opt);
        }
        py::list history;
        for (const auto& r : res.report.epochs) history.append(record_dict(r));
        Json meta{{"train_config", to_json(tc)}, {"best_epoch", res.report.best_epoch}};
        return py::make_tuple(Model{std::move(res.params), meta.dump()}, history);
      },
      py::arg("dataset"), py::arg("model_config") = py::none(), py::arg("train_config") = py::none(),
      py::arg("on_epoch") = py::none());

  m.def(
      "evaluate",
      [](const Model& md, const pipeline::Dataset& data, std::uint64_t seed) {
        const bool shifted = md.params.config.t_min < 0.0;
        const auto samples = evaluation::test_samples(data.scenarios, data.config.windows, seed, shifted);
        const auto r = evaluation::accuracy_table(md.params, samples, pipeline::to_string(data.config.source));
        py::dict d;
        d["mse"] = r.mse;
        d["mae"] = r.mae;
        d["mse_rho"] = r.mse_rho;
        d["mae_rho"] = r.mae_rho;
        d["per_scenario_mse"] = vec(r.per_scenario_mse);
        return d;
      },
      py::arg("model"), py::arg("dataset"), py::arg("seed") = 0);

  m.def("tiny_model_config", [] { return to_py(to_json(net::ModelConfig::tiny())); },
        "Small architecture for quick experiments");
  m.def("default_model_config", [] { return to_py(to_json(net::ModelConfig{})); });
  m.def("default_train_config", [] { return to_py(to_json(training::TrainConfig{})); });

  m.def("expected_coverage", &evaluation::expected_coverage, py::arg("k"));
  m.def(
      "coverage",
      [](const Array& rho_hat, const Array& sigma, const Array& rho_true, const std::vector<double>& ks) {
        auto span = [](const Array& a) { return std::span<const double>(a.data(), static_cast<std::size_t>(a.size())); };
        const auto c = evaluation::coverage_from(span(rho_hat), span(sigma), span(rho_true), ks);
        py::dict d;
        d["k"] = vec(c.k);
        d["expected"] = vec(c.expected);
        d["observed"] = vec(c.observed);
        d["n"] = c.n;
        return d;
      },
      py::arg("rho_hat"), py::arg("sigma"), py::arg("rho_true"), py::arg("k"));
}

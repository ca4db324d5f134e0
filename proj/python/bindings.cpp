// Copyright 2026 The metasg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "metasg/diagnostics.hpp"
#include "metasg/dynamics.hpp"
#include "metasg/energy.hpp"
#include "metasg/error.hpp"
#include "metasg/experiment.hpp"
#include "metasg/meta_nets.hpp"
#include "metasg/meta_training.hpp"

namespace py = pybind11;
using namespace metasg;

namespace {

py::object to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

RunConfig config_from(const py::object& cfg) {
  if (py::isinstance<py::str>(cfg)) return preset_config(cfg.cast<std::string>());
  return run_config_from_json(from_py(cfg));
}

}  // namespace

PYBIND11_MODULE(_metasg, m) {
  m.doc() = "Meta-learned stochastic-gradient MCMC samplers";

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IngestionError>(m, "IngestionError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);
  py::register_exception<CalibrationError>(m, "CalibrationError", PyExc_RuntimeError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  py::class_<Rng>(m, "Rng")
      .def(py::init<std::uint64_t, std::uint64_t>(), py::arg("seed") = 0, py::arg("stream") = 0)
      .def("normal", &Rng::normal)
      .def("uniform", &Rng::uniform);

  py::class_<EnergyModel, std::shared_ptr<EnergyModel>>(m, "EnergyModel")
      .def_property_readonly("dim", &EnergyModel::dim)
      .def_property_readonly("kind", &EnergyModel::kind)
      .def("energy", [](const EnergyModel& e, const Vec& t) { return energy(e, t); })
      .def("grad_energy", [](const EnergyModel& e, const Vec& t) { return grad_energy(e, t); })
      .def(
          "stochastic_energy_grad",
          [](const EnergyModel& e, const Vec& t, std::size_t batch, Rng& rng) {
            EnergyEval r = stochastic_energy_grad(e, t, batch, rng);
            return py::make_tuple(r.energy, r.grad);
          },
          py::arg("theta"), py::arg("batch_index"), py::arg("rng"));

  py::class_<GaussianTarget, EnergyModel, std::shared_ptr<GaussianTarget>>(m, "GaussianTarget")
      .def(py::init<Vec, Mat, double>(), py::arg("mean"), py::arg("precision"),
           py::arg("injected_noise_std") = 0.0)
      .def_static("from_covariance", &GaussianTarget::from_covariance, py::arg("mean"),
                  py::arg("covariance"), py::arg("injected_noise_std") = 0.0)
      .def_property_readonly("mean", &GaussianTarget::mean)
      .def_property_readonly("precision", &GaussianTarget::precision)
      .def_property_readonly("covariance", &GaussianTarget::covariance);

  py::class_<MetaNets>(m, "MetaNets")
      .def_readwrite("alpha", &MetaNets::alpha)
      .def_readwrite("beta", &MetaNets::beta)
      .def_readwrite("c", &MetaNets::c)
      .def_readwrite("d_scale", &MetaNets::d_scale)
      .def_readwrite("clamp_enabled", &MetaNets::clamp_enabled)
      .def_readwrite("diffusion_net_enabled", &MetaNets::diffusion_net_enabled)
      .def_property_readonly("num_params", &MetaNets::num_params)
      .def("flat_params", &MetaNets::flat_params)
      .def("set_flat_params", &MetaNets::set_flat_params)
      .def("f_q", [](const MetaNets& n, double u, double p) { return f_q(n, u, p); })
      .def("f_d", [](const MetaNets& n, double u, double p, double g) { return f_d(n, u, p, g); })
      .def("to_json", [](const MetaNets& n) { return to_py(to_json(n)); })
      .def_static("from_json", [](const py::object& o) { return meta_nets_from_json(from_py(o)); })
      .def("save", [](const MetaNets& n, const std::string& p) { save_checkpoint(n, p); })
      .def_static("load", &load_checkpoint);

  m.def(
      "make_meta_nets",
      [](std::size_t hidden_q, std::size_t hidden_d, double alpha, double beta, double c,
         double d_scale, std::uint64_t seed) {
        NetsOptions o;
        o.hidden_q = hidden_q;
        o.hidden_d = hidden_d;
        o.alpha = alpha;
        o.beta = beta;
        o.c = c;
        o.d_scale = d_scale;
        Rng rng(seed, 0);
        return make_meta_nets(o, rng);
      },
      py::arg("hidden_q") = 10, py::arg("hidden_d") = 10, py::arg("alpha") = 1.0,
      py::arg("beta") = 0.0, py::arg("c") = 0.01, py::arg("d_scale") = 1.0, py::arg("seed") = 0);

  m.def(
      "nnsghmc_step",
      [](const Vec& theta, const Vec& p, const EnergyModel& model, const MetaNets& nets,
         double eta, const std::string& gamma, bool noise, Rng& rng) {
        StepConfig cfg;
        cfg.eta = eta;
        cfg.gamma = parse_gamma_mode(gamma);
        cfg.noise_on = noise;
        SamplerState s = nnsghmc_step(make_state(theta, p), model, nets, cfg, rng);
        return py::make_tuple(s.theta, s.momentum);
      },
      py::arg("theta"), py::arg("momentum"), py::arg("model"), py::arg("nets"), py::arg("eta"),
      py::arg("gamma") = "exact", py::arg("noise") = true, py::arg("rng"));

  m.def(
      "baseline_step",
      [](const std::string& kind, const Vec& theta, const Vec& p, const EnergyModel& model,
         double eta, double friction, bool noise, Rng& rng) {
        BaselineHyper h;
        h.eta = eta;
        h.friction = friction;
        h.noise_on = noise;
        const SamplerKind k = parse_sampler_kind(kind);
        BaselineKind b = k == SamplerKind::kSgld    ? BaselineKind::kSgld
                         : k == SamplerKind::kPsgld ? BaselineKind::kPsgld
                                                    : BaselineKind::kSghmc;
        if (k == SamplerKind::kNnsghmc) throw ConfigError("use nnsghmc_step for nnsghmc");
        SamplerState s = baseline_step(b, make_state(theta, p), model, h, rng);
        return py::make_tuple(s.theta, s.momentum);
      },
      py::arg("kind"), py::arg("theta"), py::arg("momentum"), py::arg("model"), py::arg("eta"),
      py::arg("friction") = 1.0, py::arg("noise") = true, py::arg("rng"));

  m.def("stein_score", &stein_score, py::arg("samples"), py::arg("bandwidth_multiplier") = 0.5,
        py::arg("ridge") = 1e-3);
  m.def(
      "adam_step",
      [](Vec phi, const Vec& grad, Vec m1, Vec v, std::size_t t, double lr) {
        AdamState st{std::move(m1), std::move(v), t};
        adam_step(phi, grad, st, lr);
        return py::make_tuple(phi, st.m, st.v, st.t);
      },
      py::arg("phi"), py::arg("grad"), py::arg("m"), py::arg("v"), py::arg("t"), py::arg("lr"));
  m.def(
      "fit_gaussian_kl",
      [](const Mat& draws, const Vec& mean, const Mat& cov, bool reverse) {
        return fit_gaussian_kl(draws, mean, cov,
                               reverse ? KlDirection::kTruthToEmpirical
                                       : KlDirection::kEmpiricalToTruth);
      },
      py::arg("draws"), py::arg("mean"), py::arg("cov"), py::arg("reverse") = false);
  m.def("ess", py::overload_cast<const Mat&>(&ess), py::arg("series"));

  m.def("preset_names", &preset_names);
  m.def(
      "preset_config", [](const std::string& name) { return to_py(to_json(preset_config(name))); },
      py::arg("name"));
  m.def(
      "meta_train",
      [](const py::object& cfg) {
        const RunConfig config = config_from(cfg);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = run_meta_train(config);
        }
        py::list log;
        for (const auto& e : r.log)
          log.append(py::dict(py::arg("update") = e.update, py::arg("loss") = e.loss,
                              py::arg("grad_norm") = e.grad_norm, py::arg("diverged") = e.diverged));
        return py::make_tuple(r.nets, log);
      },
      py::arg("config"), "Meta-train from a preset name or a config dict.");
  m.def(
      "run_sampler",
      [](const py::object& cfg_obj, std::optional<MetaNets> nets, std::optional<py::dict> sampler) {
        const RunConfig cfg = config_from(cfg_obj);
        SamplerConfig sc = cfg.sampler;
        if (sampler) {
          nlohmann::json doc = to_json(cfg);
          doc["sampler"] = from_py(*sampler);
          sc = run_config_from_json(doc).sampler;
        }
        const Task task = build_task(cfg.test_task);
        RunResult r;
        {
          py::gil_scoped_release release;
          const SamplerSpec spec =
              resolve_sampler(sc, task, cfg.seed, cfg.resolved_workers(), nets ? &*nets : nullptr);
          r = run_sampler(task, spec, cfg.eval, cfg.seed, cfg.resolved_workers());
        }
        py::list curve;
        for (const auto& p : r.curve) curve.append(py::make_tuple(p.step, p.metric, p.value));
        return py::dict(py::arg("draws") = r.samples.draws, py::arg("chain") = r.samples.chain,
                        py::arg("step") = r.samples.step, py::arg("curve") = curve,
                        py::arg("metrics") = r.final_metrics);
      },
      py::arg("config"), py::arg("nets") = py::none(), py::arg("sampler") = py::none(),
      "Run the configured sampler on the test task.");
}

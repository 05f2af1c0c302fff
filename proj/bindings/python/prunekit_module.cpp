#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <sstream>
#include <string>

#include "prunekit/checkpoint.hpp"
#include "prunekit/commands.hpp"
#include "prunekit/compaction.hpp"
#include "prunekit/corpus.hpp"
#include "prunekit/reports.hpp"
#include "prunekit/training.hpp"

namespace py = pybind11;
using namespace prunekit;

namespace {

// Model plus its pruning scaffolding, shared with python.
struct Bundle {
  Model<float> model;
  PrunePlan plan;
  GateSet<float> gates;
  GateConfig gate_config;
};

using BundlePtr = std::shared_ptr<Bundle>;

py::array_t<float> tensor_to_numpy(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<float> out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

Tensor<double> numpy_to_vector(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 1) throw UsageError("expected a 1-D array");
  Tensor<double> t({static_cast<std::size_t>(a.shape(0))});
  std::copy(a.data(), a.data() + a.shape(0), t.data.begin());
  return t;
}

RunConfig config_from_dict(const py::dict& overrides) {
  RunConfig cfg;
  for (const auto& item : overrides) {
    const std::string key = py::cast<std::string>(item.first);
    const std::string value = py::cast<std::string>(py::str(item.second));
    apply_config_line(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

GateParam<double> gate_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& log_alpha,
                                  double beta, double gamma, double eta) {
  GateConfig gc;
  gc.beta = beta;
  gc.gamma = gamma;
  gc.eta = eta;
  gc.validate();
  auto values = numpy_to_vector(log_alpha);
  auto gate = make_gate<double>("py", values.numel(), gc);
  gate.log_alpha.mutable_value() = std::move(values);
  return gate;
}

py::dict report_to_dict(const CompactionReport& rep) {
  py::dict d;
  d["params_before"] = rep.params_before;
  d["params_after"] = rep.params_after;
  d["sparsity_pct"] = rep.sparsity_pct;
  d["ratio"] = rep.ratio;
  d["max_residual"] = rep.max_residual;
  py::list dims;
  for (const auto& dim : rep.dims) {
    py::dict e;
    e["name"] = dim.name;
    e["kept"] = dim.kept;
    e["total"] = dim.total;
    e["rescued"] = dim.rescued;
    dims.append(e);
  }
  d["dims"] = dims;
  return d;
}

}  // namespace

PYBIND11_MODULE(_prunekit, m) {
  m.doc() = "Learnable structured pruning for a desk-scale TTS transformer";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<DataError>(m, "DataError");
  py::register_exception<NumericError>(m, "NumericError");

  // ---- gates -------------------------------------------------------------
  m.def(
      "sample_gate",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> log_alpha, double beta,
         double gamma, double eta, std::uint64_t seed, std::uint64_t step, const std::string& name) {
        auto gate = gate_from_numpy(log_alpha, beta, gamma, eta);
        gate.name = name;
        auto s = sample_gate_at(gate, seed, step);
        py::dict out;
        out["u"] = tensor_to_numpy(tensor_cast<float>(s.u));
        out["s"] = tensor_to_numpy(tensor_cast<float>(s.s.value()));
        out["z"] = tensor_to_numpy(tensor_cast<float>(s.z.value()));
        return out;
      },
      py::arg("log_alpha"), py::arg("beta") = 1.0, py::arg("gamma") = 0.0, py::arg("eta") = 1.0,
      py::arg("seed") = 0, py::arg("step") = 0, py::arg("name") = "gate",
      "Hard-concrete gate sample for one dimension, deterministic in (seed, step, name)");

  m.def(
      "binarize",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> log_alpha, double beta) {
        auto gate = gate_from_numpy(log_alpha, beta, 0.0, 1.0);
        return tensor_to_numpy(tensor_cast<float>(binarize(gate)));
      },
      py::arg("log_alpha"), py::arg("beta") = 1.0,
      "Threshold binarization: 1 iff sigmoid(log_alpha/beta) >= 0.5");

  m.def(
      "gate_polarization",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> log_alpha, double beta) {
        auto gate = gate_from_numpy(log_alpha, beta, 0.0, 1.0);
        std::vector<const GateParam<double>*> set{&gate};
        return gate_polarization(set);
      },
      py::arg("log_alpha"), py::arg("beta") = 1.0,
      "Fraction of keep probabilities strictly inside (0.05, 0.95)");

  // ---- model -------------------------------------------------------------
  py::class_<Bundle, BundlePtr>(m, "Model")
      .def_property_readonly("param_count",
                             [](const Bundle& b) { return b.model.param_count(); })
      .def_property_readonly("lambda_", [](const Bundle& b) { return b.plan.lambda; })
      .def_property_readonly("maskable_params",
                             [](const Bundle& b) { return b.plan.maskable_params(); })
      .def("param_names",
           [](const Bundle& b) {
             std::vector<std::string> names;
             b.model.for_each_param(
                 [&](const std::string& n, const Var<float>&) { names.push_back(n); });
             return names;
           })
      .def("get_param",
           [](const Bundle& b, const std::string& name) {
             const Var<float>* p = b.model.find_param(name);
             if (!p) throw DataError("no parameter named '" + name + "'");
             return tensor_to_numpy(p->value());
           })
      .def("gate_logits",
           [](const Bundle& b) {
             py::dict out;
             for (const auto& g : b.gates.gates)
               out[py::str(g.name)] = tensor_to_numpy(g.log_alpha.value());
             return out;
           })
      .def("dims",
           [](const Bundle& b) {
             py::list out;
             for (const auto& d : b.plan.dims) {
               py::dict e;
               e["name"] = d.name;
               e["extent"] = d.extent;
               e["enabled"] = d.enabled;
               out.append(e);
             }
             return out;
           })
      .def(
          "forward",
          [](const Bundle& b, const std::vector<std::size_t>& tokens, std::size_t speaker) {
            auto out = forward(b.model, tokens, speaker);
            return py::make_tuple(tensor_to_numpy(out.mel_before.value()),
                                  tensor_to_numpy(out.mel_after.value()),
                                  tensor_to_numpy(out.aux.value()));
          },
          py::arg("tokens"), py::arg("speaker") = 0,
          "Plain forward pass: (mel_before, mel_after, aux)")
      .def(
          "forward_masked",
          [](const Bundle& b, const std::vector<std::size_t>& tokens, std::size_t speaker) {
            auto masks = binary_mask_map(finalize_binary_gates(b.plan, b.gates));
            ParamView<float> view(b.model, b.plan, masks);
            auto out = forward(b.model, tokens, speaker, view);
            return py::make_tuple(tensor_to_numpy(out.mel_before.value()),
                                  tensor_to_numpy(out.mel_after.value()),
                                  tensor_to_numpy(out.aux.value()));
          },
          py::arg("tokens"), py::arg("speaker") = 0,
          "Forward pass under the binarized masks of the stored gates");

  m.def(
      "init_model",
      [](const py::dict& config, std::uint64_t seed) {
        RunConfig cfg = config_from_dict(config);
        auto b = std::make_shared<Bundle>();
        b->model = init_model<float>(cfg.model, seed);
        b->plan = build_plan(b->model, cfg.prune_model_dim);
        b->gates = make_gate_set<float>(b->plan, cfg.gate);
        b->gate_config = cfg.gate;
        return b;
      },
      py::arg("config") = py::dict(), py::arg("seed") = 1234,
      "Fresh model from a config dict (same keys as the config file)");

  m.def(
      "load_model",
      [](const std::string& path) {
        auto ck = load_checkpoint(path);
        auto b = std::make_shared<Bundle>();
        b->model = std::move(ck.model);
        b->plan = std::move(ck.plan);
        b->gates = std::move(ck.gates);
        b->gate_config = ck.gate_config;
        return b;
      },
      py::arg("path"), "Load a checkpoint written by the CLI or pipelines");

  m.def(
      "compact_model",
      [](const BundlePtr& b) {
        auto res = compact(b->model, b->plan, b->gates);
        auto out = std::make_shared<Bundle>();
        out->model = std::move(res.model);
        out->plan = std::move(res.plan);
        out->gates = std::move(res.gates);
        out->gate_config = b->gate_config;
        return py::make_tuple(out, report_to_dict(res.report));
      },
      py::arg("model"), "Binarize gates and physically shrink: (small_model, report)");

  // ---- config / runs -----------------------------------------------------
  m.def(
      "make_config_text",
      [](const py::dict& overrides) { return run_config_text(config_from_dict(overrides)); },
      py::arg("overrides") = py::dict(),
      "Render a config file (defaults plus overrides) as text");

  m.def(
      "pretrain",
      [](const std::string& out_dir, std::optional<std::string> config,
         std::optional<std::uint64_t> seed, std::optional<std::size_t> steps) {
        cmd_pretrain(config, {seed, steps}, out_dir);
      },
      py::arg("out_dir"), py::arg("config") = std::nullopt, py::arg("seed") = std::nullopt,
      py::arg("steps") = std::nullopt, "Pretrain the multi-speaker base model");

  m.def(
      "clone",
      [](const std::string& base, const std::string& pipeline, std::uint64_t task_seed,
         const std::string& out_dir, std::optional<std::string> config,
         std::optional<std::uint64_t> seed, std::optional<std::size_t> steps) {
        cmd_clone(base, pipeline, task_seed, config, {seed, steps}, out_dir);
      },
      py::arg("base"), py::arg("pipeline"), py::arg("task_seed"), py::arg("out_dir"),
      py::arg("config") = std::nullopt, py::arg("seed") = std::nullopt,
      py::arg("steps") = std::nullopt, "Run one voice-cloning pipeline from a base checkpoint");

  m.def(
      "compact",
      [](const std::string& ckpt, const std::string& out_dir) {
        std::ostringstream sink;
        cmd_compact(ckpt, out_dir, sink);
        return report_to_dict(compaction_report_from_json(sink.str()));
      },
      py::arg("ckpt"), py::arg("out_dir"), "Compact a checkpoint on disk; returns the report");

  m.def(
      "report_table",
      [](const std::string& run_dir) {
        std::ostringstream out;
        cmd_report(run_dir, out);
        return out.str();
      },
      py::arg("run_dir"), "Consolidated stage table for a run directory");

  m.def("load_stage_records", [](const std::string& run_dir) {
    py::list out;
    for (const auto& rec : load_stage_records(run_dir)) {
      py::dict d;
      d["pipeline"] = rec.pipeline;
      d["stage"] = rec.stage;
      d["step"] = rec.step;
      d["l_tts"] = rec.loss.l_tts;
      d["l_reg"] = rec.loss.l_reg;
      d["density"] = rec.loss.density;
      d["sparsity"] = rec.sparsity_pct;
      d["final"] = rec.final_record;
      if (rec.has_eval) d["eval_loss"] = rec.eval_loss;
      if (rec.final_record) {
        d["params_before"] = rec.params_before;
        d["params_after"] = rec.params_after;
        d["polarization"] = rec.polarization;
      }
      out.append(d);
    }
    return out;
  });
}

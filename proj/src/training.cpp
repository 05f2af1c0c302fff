#include "prunekit/training.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "prunekit/errors.hpp"
#include "prunekit/rng.hpp"

namespace prunekit {

PipelineKind parse_pipeline(const std::string& name) {
  if (name == "joint") return PipelineKind::kJoint;
  if (name == "ft_then_prune") return PipelineKind::kFtThenPrune;
  if (name == "prune_then_ft") return PipelineKind::kPruneThenFt;
  if (name == "prune_pretrain_then_ft") return PipelineKind::kPrunePretrainThenFt;
  throw ConfigError("unknown pipeline '" + name +
                    "'; valid kinds: joint, ft_then_prune, prune_then_ft, prune_pretrain_then_ft");
}

std::string pipeline_name(PipelineKind kind) {
  switch (kind) {
    case PipelineKind::kJoint: return "joint";
    case PipelineKind::kFtThenPrune: return "ft_then_prune";
    case PipelineKind::kPruneThenFt: return "prune_then_ft";
    case PipelineKind::kPrunePretrainThenFt: return "prune_pretrain_then_ft";
  }
  throw UsageError("pipeline_name: bad kind");
}

PipelineSpec make_pipeline_spec(PipelineKind kind, const RunConfig& cfg) {
  PipelineSpec spec;
  spec.kind = kind;
  const bool w_prune = cfg.train_weights_during_prune;
  switch (kind) {
    case PipelineKind::kJoint:
      spec.stages = {{"joint", true, MaskMode::kSampled, true, true, true, false}};
      break;
    case PipelineKind::kFtThenPrune:
      spec.stages = {{"ft", false, MaskMode::kOff, true, false, true, false},
                     {"prune", true, MaskMode::kSampled, w_prune, true, true, false}};
      break;
    case PipelineKind::kPruneThenFt:
      spec.stages = {{"prune", true, MaskMode::kSampled, w_prune, true, true, false},
                     {"ft", false, MaskMode::kFrozenBinary, true, false, true, false}};
      break;
    case PipelineKind::kPrunePretrainThenFt:
      // gates only against the pretraining corpus, then adapt to the task
      spec.stages = {{"prune_pretrain", true, MaskMode::kSampled, false, true, false, true},
                     {"ft", false, MaskMode::kFrozenBinary, true, false, true, false}};
      break;
  }
  for (auto& stage : spec.stages) {
    stage.min_steps = stage.train_gates ? cfg.stage_max_steps : cfg.stage_min_steps;
    stage.max_steps = cfg.stage_max_steps;
  }
  return spec;
}

TrainSetup make_train_setup(Model<float> model, const RunConfig& cfg) {
  TrainSetup setup{std::move(model), {}, {}};
  setup.plan = build_plan(setup.model, cfg.prune_model_dim);
  setup.gates = make_gate_set<float>(setup.plan, cfg.gate);
  return setup;
}

namespace {

MaskMap<float> masks_for(const TrainSetup& setup, MaskMode mode, std::uint64_t seed,
                         std::uint64_t sample_step) {
  switch (mode) {
    case MaskMode::kOff: return {};
    case MaskMode::kSampled: return sample_all(setup.gates, setup.plan, seed, sample_step);
    case MaskMode::kFrozenBinary:
      return binary_mask_map(finalize_binary_gates(setup.plan, setup.gates));
  }
  throw UsageError("masks_for: bad mode");
}

MaskMap<float> reg_gate_values(const TrainSetup& setup, const RunConfig& cfg,
                               const MaskMap<float>& sampled) {
  if (cfg.reg_mode == "sampled") return sampled;
  MaskMap<float> expected;
  for (const auto& g : setup.gates.gates) {
    if (!setup.plan.dim_enabled(g.name)) continue;
    expected.emplace(g.name, expected_gate(g));
  }
  return expected;
}

}  // namespace

std::vector<Var<float>> stage_trainables(TrainSetup& setup, const StageSpec& stage) {
  std::vector<Var<float>> params;
  if (stage.train_weights) {
    params = setup.model.all_params();
  } else if (stage.train_speaker) {
    params.push_back(setup.model.speaker_embedding);
  }
  if (stage.train_gates) {
    for (const auto& g : trainable_gate_logits(setup.gates, setup.plan)) params.push_back(g);
  }
  if (params.empty()) throw UsageError("stage '" + stage.name + "' trains nothing");
  return params;
}

double evaluate(const Model<float>& m, const PrunePlan& plan, const GateSet<float>& gates,
                const std::vector<BatchItem<float>>& items, MaskMode mode, double aux_weight) {
  if (items.empty()) throw UsageError("evaluate: empty item set");
  MaskMap<float> masks;
  if (mode != MaskMode::kOff) masks = binary_mask_map(finalize_binary_gates(plan, gates));
  ParamView<float> view = mode == MaskMode::kOff ? ParamView<float>(m) : ParamView<float>(m, plan, masks);
  double acc = 0;
  for (const auto& item : items) {
    acc += static_cast<double>(tts_loss_item(m, view, item, aux_weight).value().data[0]);
  }
  return acc / static_cast<double>(items.size());
}

LossBreakdown train_step(TrainSetup& setup, Optimizer& opt, const StageSpec& stage,
                         const std::vector<BatchItem<float>>& batch, const RunConfig& cfg,
                         std::uint64_t sample_step) {
  const MaskMap<float> masks = masks_for(setup, stage.mask_mode, cfg.seed, sample_step);
  ParamView<float> view = stage.mask_mode == MaskMode::kOff
                              ? ParamView<float>(setup.model)
                              : ParamView<float>(setup.model, setup.plan, masks);
  LossOptions opts;
  opts.reg_enabled = stage.reg_enabled;
  opts.reg_multiplier = cfg.reg_multiplier;
  opts.aux_weight = cfg.aux_loss_weight;

  MaskMap<float> reg_masks;
  if (stage.reg_enabled) reg_masks = reg_gate_values(setup, cfg, masks);
  auto res = total_loss<float>(setup.model, setup.plan, view, batch,
                               stage.reg_enabled ? &reg_masks : nullptr, opts);
  auto params = stage_trainables(setup, stage);
  auto grads = grad(res.total, params);
  opt.step(grads);
  return res.breakdown;
}

namespace {

std::vector<BatchItem<float>> corpus_batch(const Corpus& corpus, std::size_t batch_size,
                                           std::uint64_t seed, std::uint64_t step) {
  Rng rng = stream_rng(seed, step, "batch");
  std::vector<BatchItem<float>> batch;
  for (std::size_t i = 0; i < batch_size; ++i)
    batch.push_back(corpus.items[rng.below(corpus.items.size())]);
  return batch;
}

}  // namespace

StageReport run_stage(TrainSetup& setup, const StageSpec& stage, std::size_t stage_index,
                      const std::string& pipeline, const Corpus* corpus, const CloneTask* task,
                      const RunConfig& cfg, std::uint64_t& global_step, const RecordSink& sink) {
  if (stage.use_pretrain_corpus && !corpus) {
    throw UsageError("stage '" + stage.name + "' needs the pretraining corpus");
  }
  if (!stage.use_pretrain_corpus && !task) {
    throw UsageError("stage '" + stage.name + "' needs a clone task");
  }

  // Gate logits ride at the end of stage_trainables and get the larger rate.
  Optimizer opt(cfg.optimizer == "adam");
  {
    const auto params = stage_trainables(setup, stage);
    std::size_t n_gates = 0;
    if (stage.train_gates) {
      for (const auto& g : setup.gates.gates)
        if (setup.plan.dim_enabled(g.name)) ++n_gates;
    }
    const std::size_t n_weight_params = params.size() - n_gates;
    for (std::size_t i = 0; i < params.size(); ++i) {
      opt.add_param(params[i], i < n_weight_params ? cfg.lr_weights : cfg.lr_gates);
    }
  }

  const auto& eval_items = task ? task->eval : corpus->items;
  const MaskMode eval_mode = stage.mask_mode;

  StageReport report;
  report.pipeline = pipeline;
  report.stage = stage.name;
  report.stage_index = stage_index;
  report.params_before = static_cast<std::size_t>(setup.plan.lambda);

  struct EvalPoint {
    std::size_t step;
    double eval;
    double sparsity;
  };
  std::deque<EvalPoint> eval_history;
  LossBreakdown last;
  std::size_t step = 0;
  bool stop = false;
  const std::size_t min_steps = stage.min_steps ? stage.min_steps : cfg.stage_min_steps;
  const std::size_t max_steps = stage.max_steps ? stage.max_steps : cfg.stage_max_steps;
  while (step < max_steps && !stop) {
    ++step;
    ++global_step;
    const auto batch = stage.use_pretrain_corpus
                           ? corpus_batch(*corpus, cfg.batch_size, cfg.seed, global_step)
                           : task->support;
    last = train_step(setup, opt, stage, batch, cfg, global_step);

    const bool eval_now = step % cfg.eval_every == 0 || step == max_steps;
    double eval_loss = 0;
    if (eval_now) {
      eval_loss = evaluate(setup.model, setup.plan, setup.gates, eval_items, eval_mode,
                           cfg.aux_loss_weight);
      const double sparsity_now =
          sparsity_of(setup.plan, finalize_binary_gates(setup.plan, setup.gates));
      eval_history.push_back({step, eval_loss, sparsity_now});
      // "until convergence": stop once, over a 200-step window, eval improves
      // by less than 1% and (for gate-training stages) sparsity has stalled
      if (step >= min_steps) {
        for (auto it = eval_history.rbegin(); it != eval_history.rend(); ++it) {
          if (step - it->step >= 200) {
            const bool eval_stalled =
                (it->eval - eval_loss) / std::max(std::fabs(it->eval), 1e-12) < 0.01;
            const bool sparsity_stalled = std::fabs(sparsity_now - it->sparsity) < 0.5;
            if (eval_stalled && sparsity_stalled) stop = true;
            break;
          }
        }
      }
    }
    if (sink && (step % cfg.log_every == 0 || eval_now || stop || step == max_steps)) {
      StepRecord rec;
      rec.pipeline = pipeline;
      rec.stage = stage.name;
      rec.stage_index = stage_index;
      rec.step = step;
      rec.loss = last;
      rec.sparsity_pct = sparsity_of(setup.plan, finalize_binary_gates(setup.plan, setup.gates));
      rec.has_eval = eval_now;
      rec.eval_loss = eval_loss;
      sink(rec);
    }
  }

  const auto binary = finalize_binary_gates(setup.plan, setup.gates);
  report.steps_run = step;
  report.final_loss = last;
  report.eval_loss =
      evaluate(setup.model, setup.plan, setup.gates, eval_items, eval_mode, cfg.aux_loss_weight);
  report.sparsity_pct = sparsity_of(setup.plan, binary);
  report.params_after = surviving_params(setup.plan, binary);
  report.polarization = live_polarization(setup.gates, setup.plan, binary);
  if (sink) {
    StepRecord rec;
    rec.pipeline = pipeline;
    rec.stage = stage.name;
    rec.stage_index = stage_index;
    rec.step = step;
    rec.loss = last;
    rec.sparsity_pct = report.sparsity_pct;
    rec.has_eval = true;
    rec.eval_loss = report.eval_loss;
    rec.final_record = true;
    rec.params_before = report.params_before;
    rec.params_after = report.params_after;
    rec.polarization = report.polarization;
    sink(rec);
  }
  return report;
}

std::vector<StageReport> run_pipeline(const PipelineSpec& spec, TrainSetup& setup,
                                      const Corpus* corpus, const CloneTask& task,
                                      const RunConfig& cfg, const RecordSink& sink) {
  std::vector<StageReport> reports;
  std::uint64_t global_step = 0;
  const std::string name = pipeline_name(spec.kind);
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    reports.push_back(
        run_stage(setup, spec.stages[i], i, name, corpus, &task, cfg, global_step, sink));
  }
  return reports;
}

StageReport pretrain(TrainSetup& setup, const Corpus& corpus, const RunConfig& cfg,
                     std::size_t steps, const RecordSink& sink) {
  StageSpec stage{"pretrain", false, MaskMode::kOff, true, false, true, true};
  Optimizer opt(cfg.optimizer == "adam");
  for (const auto& p : stage_trainables(setup, stage)) opt.add_param(p, cfg.lr_weights);

  StageReport report;
  report.pipeline = "pretrain";
  report.stage = "pretrain";
  report.params_before = static_cast<std::size_t>(setup.plan.lambda);
  report.params_after = report.params_before;

  LossBreakdown last;
  for (std::size_t step = 1; step <= steps; ++step) {
    const auto batch = corpus_batch(corpus, cfg.batch_size, cfg.seed, step);
    last = train_step(setup, opt, stage, batch, cfg, step);
    if (sink && (step % cfg.log_every == 0 || step == steps)) {
      StepRecord rec;
      rec.pipeline = "pretrain";
      rec.stage = "pretrain";
      rec.step = step;
      rec.loss = last;
      rec.final_record = step == steps;
      sink(rec);
    }
  }
  report.steps_run = steps;
  report.final_loss = last;
  report.eval_loss = evaluate(setup.model, setup.plan, setup.gates, corpus.items, MaskMode::kOff,
                              cfg.aux_loss_weight);
  return report;
}

std::size_t add_speaker_row_mean(Model<float>& model) {
  const auto& table = model.speaker_embedding.value();
  const std::size_t n = table.shape[0], d = table.shape[1];
  Tensor<float> next({n + 1, d});
  for (std::size_t i = 0; i < n * d; ++i) next.data[i] = table.data[i];
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += table.at(i, j);
    next.at(n, j) = static_cast<float>(mean / static_cast<double>(n));
  }
  model.speaker_embedding = Var<float>::parameter(std::move(next));
  model.config.n_speakers = n + 1;
  return n;
}

}  // namespace prunekit

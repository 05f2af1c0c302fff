#pragma once

#include <functional>
#include <string>
#include <vector>

#include "prunekit/compaction.hpp"
#include "prunekit/corpus.hpp"
#include "prunekit/loss.hpp"
#include "prunekit/model.hpp"
#include "prunekit/optimizer.hpp"
#include "prunekit/plan.hpp"
#include "prunekit/runconfig.hpp"

namespace prunekit {

enum class PipelineKind { kJoint, kFtThenPrune, kPruneThenFt, kPrunePretrainThenFt };

PipelineKind parse_pipeline(const std::string& name);
std::string pipeline_name(PipelineKind kind);

enum class MaskMode {
  kOff,           // gates frozen at 1: plain forward
  kSampled,       // hard-concrete samples, gates learnable
  kFrozenBinary,  // binarized masks as constants (post-prune fine-tuning)
};

struct StageSpec {
  std::string name;
  bool reg_enabled{false};
  MaskMode mask_mode{MaskMode::kOff};
  bool train_weights{false};
  bool train_gates{false};
  bool train_speaker{false};  // only relevant when weights are frozen
  bool use_pretrain_corpus{false};
  // Gate-training stages run their full budget (polarization continues long
  // after eval plateaus); pure fine-tuning stages stop on the convergence
  // rule between min and max.
  std::size_t min_steps{0};
  std::size_t max_steps{0};
};

struct PipelineSpec {
  PipelineKind kind{PipelineKind::kJoint};
  std::vector<StageSpec> stages;
};

PipelineSpec make_pipeline_spec(PipelineKind kind, const RunConfig& cfg);

// Line-one-per-record training log entry.
struct StepRecord {
  std::string pipeline, stage;
  std::size_t stage_index{0};
  std::size_t step{0};
  LossBreakdown loss;
  double sparsity_pct{0};
  bool has_eval{false};
  double eval_loss{0};
  bool final_record{false};
  std::size_t params_before{0};
  std::size_t params_after{0};
  double polarization{0};
};

using RecordSink = std::function<void(const StepRecord&)>;

struct StageReport {
  std::string pipeline, stage;
  std::size_t stage_index{0};
  std::size_t steps_run{0};
  LossBreakdown final_loss;
  double eval_loss{0};
  double sparsity_pct{0};
  std::size_t params_before{0};
  std::size_t params_after{0};
  double polarization{0};
};

// Model plus its pruning scaffolding.
struct TrainSetup {
  Model<float> model;
  PrunePlan plan;
  GateSet<float> gates;
};

TrainSetup make_train_setup(Model<float> model, const RunConfig& cfg);

// Mean task loss over items; kSampled evaluates with binarized masks
// (inference thresholds gates, never samples).
double evaluate(const Model<float>& m, const PrunePlan& plan, const GateSet<float>& gates,
                const std::vector<BatchItem<float>>& items, MaskMode mode, double aux_weight);

// One optimizer step on the sets the stage trains; `sample_step` keys the
// shared per-gate uniform draws.
LossBreakdown train_step(TrainSetup& setup, Optimizer& opt, const StageSpec& stage,
                         const std::vector<BatchItem<float>>& batch, const RunConfig& cfg,
                         std::uint64_t sample_step);

std::vector<Var<float>> stage_trainables(TrainSetup& setup, const StageSpec& stage);

StageReport run_stage(TrainSetup& setup, const StageSpec& stage, std::size_t stage_index,
                      const std::string& pipeline, const Corpus* corpus, const CloneTask* task,
                      const RunConfig& cfg, std::uint64_t& global_step, const RecordSink& sink);

std::vector<StageReport> run_pipeline(const PipelineSpec& spec, TrainSetup& setup,
                                      const Corpus* corpus, const CloneTask& task,
                                      const RunConfig& cfg, const RecordSink& sink);

// Plain multi-speaker pretraining: no masks, no regularizer.
StageReport pretrain(TrainSetup& setup, const Corpus& corpus, const RunConfig& cfg,
                     std::size_t steps, const RecordSink& sink);

// New speaker row initialized to the mean of the pretraining rows; returns
// the new speaker id.
std::size_t add_speaker_row_mean(Model<float>& model);

}  // namespace prunekit

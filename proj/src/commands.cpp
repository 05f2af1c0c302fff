#include "prunekit/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include "prunekit/checkpoint.hpp"
#include "prunekit/compaction.hpp"
#include "prunekit/corpus.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/reports.hpp"
#include "prunekit/training.hpp"

namespace prunekit {

namespace {

namespace fs = std::filesystem;

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());
}

RunConfig resolve_config(const std::optional<std::string>& config_path,
                         const CommandOverrides& over) {
  RunConfig cfg = config_path ? load_run_config(*config_path) : RunConfig{};
  if (over.seed) cfg.seed = *over.seed;
  cfg.validate();
  return cfg;
}

std::ofstream open_log(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  return out;
}

RecordSink jsonl_sink(std::ofstream& out) {
  return [&out](const StepRecord& rec) { out << step_record_json(rec) << "\n"; };
}

void write_compaction_outputs(const std::string& out_dir, const CompactionResult<float>& res,
                              const GateConfig& gate_config, std::uint64_t step) {
  save_checkpoint(out_dir + "/compact.ckpt", res.model, res.gates, res.plan, gate_config, step);
  std::ofstream rep = open_log(out_dir + "/compaction.json");
  rep << compaction_report_json(res.report) << "\n";
}

}  // namespace

void cmd_pretrain(const std::optional<std::string>& config_path, const CommandOverrides& over,
                  const std::string& out_dir) {
  RunConfig cfg = resolve_config(config_path, over);
  const std::size_t steps = over.steps ? *over.steps : cfg.pretrain_steps;
  cfg.pretrain_steps = steps;
  ensure_dir(out_dir);

  const Corpus corpus = make_synthetic_corpus(cfg, cfg.model.n_speakers, cfg.samples_per_speaker);
  TrainSetup setup = make_train_setup(init_model<float>(cfg.model, cfg.seed), cfg);

  std::ofstream log = open_log(out_dir + "/pretrain_log.jsonl");
  pretrain(setup, corpus, cfg, steps, jsonl_sink(log));

  save_checkpoint(out_dir + "/base.ckpt", setup.model, setup.gates, setup.plan, cfg.gate, steps);
  save_run_config(cfg, out_dir + "/config.txt");
}

void cmd_clone(const std::string& base_checkpoint, const std::string& pipeline,
               std::uint64_t task_seed, const std::optional<std::string>& config_path,
               const CommandOverrides& over, const std::string& out_dir) {
  const PipelineKind kind = parse_pipeline(pipeline);

  // default to the config written next to the base checkpoint
  std::optional<std::string> cfg_path = config_path;
  if (!cfg_path) {
    const fs::path sibling = fs::path(base_checkpoint).parent_path() / "config.txt";
    if (fs::exists(sibling)) cfg_path = sibling.string();
  }
  RunConfig cfg = resolve_config(cfg_path, over);
  if (over.steps) {
    cfg.stage_max_steps = *over.steps;
    cfg.stage_min_steps = std::min(cfg.stage_min_steps, *over.steps);
  }
  ensure_dir(out_dir);

  LoadedCheckpoint base = load_checkpoint(base_checkpoint);
  // Gates restart from init for a fresh pruning run; the base model's weights
  // carry over and the new speaker row starts at the pretraining mean.
  TrainSetup setup{std::move(base.model), {}, {}};
  const std::size_t speaker_id = add_speaker_row_mean(setup.model);
  setup.plan = build_plan(setup.model, cfg.prune_model_dim);
  setup.gates = make_gate_set<float>(setup.plan, cfg.gate);

  const CloneTask task = make_clone_task(cfg, task_seed, speaker_id);
  const Corpus corpus = make_synthetic_corpus(cfg, cfg.model.n_speakers, cfg.samples_per_speaker);

  std::ofstream log = open_log(out_dir + "/stages.jsonl");
  const PipelineSpec spec = make_pipeline_spec(kind, cfg);
  run_pipeline(spec, setup, &corpus, task, cfg, jsonl_sink(log));

  save_checkpoint(out_dir + "/final.ckpt", setup.model, setup.gates, setup.plan, cfg.gate,
                  base.step);
  // every pipeline ends in a pruned state; emit the physical model too
  auto compacted = compact(setup.model, setup.plan, setup.gates);
  write_compaction_outputs(out_dir, compacted, cfg.gate, base.step);
  save_run_config(cfg, out_dir + "/config.txt");
}

void cmd_compact(const std::string& checkpoint, const std::string& out_dir, std::ostream& out) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  ensure_dir(out_dir);
  auto res = compact(ck.model, ck.plan, ck.gates);
  write_compaction_outputs(out_dir, res, ck.gate_config, ck.step);
  out << compaction_report_json(res.report) << "\n";
}

void cmd_report(const std::string& run_dir, std::ostream& out) {
  const auto records = load_stage_records(run_dir);
  out << render_report_table(records);
}

}  // namespace prunekit

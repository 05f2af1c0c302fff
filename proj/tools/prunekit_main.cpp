#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "prunekit/commands.hpp"
#include "prunekit/errors.hpp"

namespace {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const prunekit::ConfigError*>(&e)) return static_cast<int>(prunekit::ExitCode::kConfig);
  if (dynamic_cast<const prunekit::DataError*>(&e)) return static_cast<int>(prunekit::ExitCode::kData);
  if (dynamic_cast<const prunekit::NumericError*>(&e)) return static_cast<int>(prunekit::ExitCode::kNumeric);
  return static_cast<int>(prunekit::ExitCode::kFailure);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prunekit: learnable structured pruning for a desk-scale TTS transformer"};
  app.require_subcommand(1);

  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::string out_dir = "run";

  auto add_common = [&](CLI::App* cmd, bool with_steps = true) {
    cmd->add_option("--config", config_path, "run configuration file (key = value lines)");
    cmd->add_option("--seed", seed, "override the training seed");
    if (with_steps) cmd->add_option("--steps", steps, "override the step budget");
    cmd->add_option("--out", out_dir, "output directory");
  };

  auto* pre = app.add_subcommand("pretrain", "pretrain the multi-speaker base model");
  add_common(pre);

  auto* clone = app.add_subcommand("clone", "run a voice-cloning pipeline from a base checkpoint");
  std::string base_ckpt;
  std::string pipeline = "joint";
  std::uint64_t task_seed = 1;
  clone->add_option("--base", base_ckpt, "base checkpoint")->required();
  clone->add_option("--pipeline", pipeline,
                    "joint | ft_then_prune | prune_then_ft | prune_pretrain_then_ft");
  clone->add_option("--task-seed", task_seed, "synthetic target-speaker seed");
  add_common(clone);

  auto* compact_cmd = app.add_subcommand("compact", "binarize gates and emit the smaller model");
  std::string ckpt;
  compact_cmd->add_option("--ckpt", ckpt, "checkpoint to compact")->required();
  compact_cmd->add_option("--out", out_dir, "output directory");

  auto* report = app.add_subcommand("report", "consolidated table over a run directory");
  std::string run_dir;
  report->add_option("--run-dir", run_dir, "directory holding stage records")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(prunekit::ExitCode::kConfig);
  }

  prunekit::CommandOverrides over{seed, steps};
  try {
    if (pre->parsed()) {
      prunekit::cmd_pretrain(config_path, over, out_dir);
    } else if (clone->parsed()) {
      prunekit::cmd_clone(base_ckpt, pipeline, task_seed, config_path, over, out_dir);
    } else if (compact_cmd->parsed()) {
      prunekit::cmd_compact(ckpt, out_dir, std::cout);
    } else if (report->parsed()) {
      prunekit::cmd_report(run_dir, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}

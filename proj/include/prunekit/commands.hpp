#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "prunekit/runconfig.hpp"

namespace prunekit {

// CLI-facing operations; they throw (ConfigError/DataError/NumericError) and
// the CLI maps exception class to exit code.

struct CommandOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
};

// Pretrain a multi-speaker base model on the synthetic corpus. Writes
// base.ckpt, config.txt, pretrain_log.jsonl into out_dir.
void cmd_pretrain(const std::optional<std::string>& config_path, const CommandOverrides& over,
                  const std::string& out_dir);

// Run one voice-cloning pipeline from a base checkpoint. Writes stages.jsonl,
// final.ckpt, compact.ckpt, compaction.json, config.txt into out_dir.
void cmd_clone(const std::string& base_checkpoint, const std::string& pipeline,
               std::uint64_t task_seed, const std::optional<std::string>& config_path,
               const CommandOverrides& over, const std::string& out_dir);

// Binarize and shrink a checkpoint. Writes compact.ckpt and compaction.json
// into out_dir and prints the report.
void cmd_compact(const std::string& checkpoint, const std::string& out_dir, std::ostream& out);

// Consolidated table over every stage record found under run_dir.
void cmd_report(const std::string& run_dir, std::ostream& out);

}  // namespace prunekit

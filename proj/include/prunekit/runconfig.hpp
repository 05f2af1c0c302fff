#pragma once

#include <cstdint>
#include <string>

#include "prunekit/gates.hpp"
#include "prunekit/model.hpp"

namespace prunekit {

// Everything a run needs; a run is reproducible from (RunConfig, code
// version) alone. Serialized as a documented key = value text file.
struct RunConfig {
  ModelConfig model;
  GateConfig gate;

  // synthetic corpus / tasks
  std::uint64_t corpus_seed{7};
  std::size_t samples_per_speaker{10};
  std::size_t task_support{8};
  std::size_t task_eval{16};
  std::size_t seq_min_len{8};
  std::size_t seq_max_len{32};
  std::size_t teacher_hidden{12};
  double teacher_dev_scale{0.5};

  // optimization
  std::uint64_t seed{1234};
  std::size_t pretrain_steps{3000};
  std::size_t stage_min_steps{800};
  std::size_t stage_max_steps{2000};
  std::size_t eval_every{100};
  std::size_t log_every{50};
  std::size_t batch_size{8};
  double lr_weights{1e-3};
  double lr_gates{5e-2};
  double aux_loss_weight{0.1};
  double reg_multiplier{1.0};
  std::string reg_mode{"sampled"};  // L1 of sampled masks, or closed-form "expected"
  std::string optimizer{"adam"};    // "adam" or "sgd"
  bool prune_model_dim{false};      // d is prunable but off by default
  bool train_weights_during_prune{false};

  void validate() const;
};

// key = value text, '#' comments. Unknown keys are config errors.
RunConfig parse_run_config_text(const std::string& text);
RunConfig load_run_config(const std::string& path);
void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value);
std::string run_config_text(const RunConfig& cfg);
void save_run_config(const RunConfig& cfg, const std::string& path);

}  // namespace prunekit

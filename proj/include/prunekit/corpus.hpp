#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "prunekit/loss.hpp"
#include "prunekit/runconfig.hpp"

// Synthetic stand-in for the pretraining / voice-cloning datasets: each
// speaker is a frozen random teacher mapping token sequences to target mels.
// All speakers share one teacher core (so transfer helps) plus a
// speaker-specific deviation scaled by teacher_dev_scale.

namespace prunekit {

struct Corpus {
  std::vector<BatchItem<float>> items;
  std::size_t n_speakers{0};
  std::size_t samples_per_speaker{0};
};

struct CloneTask {
  std::uint64_t speaker_seed{0};
  std::vector<BatchItem<float>> support;  // the 8-shot set
  std::vector<BatchItem<float>> eval;     // held-out items of the same speaker
};

// Targets of one (corpus_seed, speaker_key) teacher for a given token
// sequence; mel is [L x n_mel], aux is [L x 1].
std::pair<Tensor<float>, Tensor<float>> teacher_targets(const RunConfig& cfg,
                                                        std::uint64_t speaker_key,
                                                        const std::vector<std::size_t>& tokens);

// Full item with teacher-drawn tokens; deterministic given
// (cfg, speaker_key, item_index).
BatchItem<float> make_teacher_item(const RunConfig& cfg, std::uint64_t speaker_key,
                                   std::uint64_t item_index, std::size_t model_speaker_id);

Corpus make_synthetic_corpus(const RunConfig& cfg, std::size_t n_speakers,
                             std::size_t samples_per_speaker);

// A clone task's teacher is keyed far away from the pretraining speakers, so
// the target voice is genuinely unseen. model_speaker_id is the embedding row
// the cloned model will use for it.
CloneTask make_clone_task(const RunConfig& cfg, std::uint64_t task_seed,
                          std::size_t model_speaker_id);

}  // namespace prunekit

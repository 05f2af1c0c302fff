#include "prunekit/corpus.hpp"

#include <cmath>

#include "prunekit/errors.hpp"
#include "prunekit/rng.hpp"

namespace prunekit {

namespace {

struct TeacherCore {
  std::vector<double> tok;   // vocab x ht
  std::vector<double> pos;   // max_len x ht
  std::vector<double> core;  // ht x n_mel
  std::vector<double> aux;   // ht
};

struct TeacherSpeaker {
  std::vector<double> dev;      // ht x n_mel
  std::vector<double> aux_dev;  // ht
};

void fill_normal(std::vector<double>& v, Rng& rng, double scale) {
  for (auto& x : v) x = rng.normal() * scale;
}

TeacherCore make_core(const RunConfig& cfg) {
  const std::size_t ht = cfg.teacher_hidden;
  TeacherCore core;
  core.tok.resize(cfg.model.vocab_size * ht);
  core.pos.resize(cfg.model.max_len * ht);
  core.core.resize(ht * cfg.model.n_mel);
  core.aux.resize(ht);
  const double w = 1.0 / std::sqrt(static_cast<double>(ht));
  Rng r1 = stream_rng(cfg.corpus_seed, 0, "teacher.tok");
  fill_normal(core.tok, r1, 1.0);
  Rng r2 = stream_rng(cfg.corpus_seed, 0, "teacher.pos");
  fill_normal(core.pos, r2, 0.5);
  Rng r3 = stream_rng(cfg.corpus_seed, 0, "teacher.core");
  fill_normal(core.core, r3, w);
  Rng r4 = stream_rng(cfg.corpus_seed, 0, "teacher.aux");
  fill_normal(core.aux, r4, w);
  return core;
}

TeacherSpeaker make_speaker(const RunConfig& cfg, std::uint64_t speaker_key) {
  const std::size_t ht = cfg.teacher_hidden;
  TeacherSpeaker s;
  s.dev.resize(ht * cfg.model.n_mel);
  s.aux_dev.resize(ht);
  const double w = 1.0 / std::sqrt(static_cast<double>(ht));
  Rng r1 = stream_rng(cfg.corpus_seed, speaker_key, "teacher.spk.dev");
  fill_normal(s.dev, r1, w);
  Rng r2 = stream_rng(cfg.corpus_seed, speaker_key, "teacher.spk.aux");
  fill_normal(s.aux_dev, r2, w);
  return s;
}

}  // namespace

std::pair<Tensor<float>, Tensor<float>> teacher_targets(const RunConfig& cfg,
                                                        std::uint64_t speaker_key,
                                                        const std::vector<std::size_t>& tokens) {
  // Core/speaker tables are rebuilt per call; desk-scale sizes make this
  // cheap and it keeps items independently addressable.
  const TeacherCore core = make_core(cfg);
  const TeacherSpeaker spk = make_speaker(cfg, speaker_key);
  const std::size_t ht = cfg.teacher_hidden;
  const std::size_t n_mel = cfg.model.n_mel;
  const std::size_t L = tokens.size();

  Tensor<float> mel({L, n_mel});
  Tensor<float> aux({L, 1});
  std::vector<double> h(ht);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t j = 0; j < ht; ++j) {
      h[j] = std::tanh(core.tok[tokens[l] * ht + j] + core.pos[l * ht + j]);
    }
    for (std::size_t c = 0; c < n_mel; ++c) {
      double v = 0, dv = 0;
      for (std::size_t j = 0; j < ht; ++j) {
        v += h[j] * core.core[j * n_mel + c];
        dv += h[j] * spk.dev[j * n_mel + c];
      }
      mel.at(l, c) = static_cast<float>(v + cfg.teacher_dev_scale * dv);
    }
    double a = 0, da = 0;
    for (std::size_t j = 0; j < ht; ++j) {
      a += h[j] * core.aux[j];
      da += h[j] * spk.aux_dev[j];
    }
    aux.at(l, 0) = static_cast<float>(a + cfg.teacher_dev_scale * da);
  }
  return {std::move(mel), std::move(aux)};
}

BatchItem<float> make_teacher_item(const RunConfig& cfg, std::uint64_t speaker_key,
                                   std::uint64_t item_index, std::size_t model_speaker_id) {
  Rng rng = stream_rng(cfg.corpus_seed, mix_u64(speaker_key, item_index), "teacher.item");
  const std::size_t L = cfg.seq_min_len + rng.below(cfg.seq_max_len - cfg.seq_min_len + 1);
  BatchItem<float> item;
  item.speaker = model_speaker_id;
  item.tokens.resize(L);
  for (auto& t : item.tokens) t = rng.below(cfg.model.vocab_size);
  auto targets = teacher_targets(cfg, speaker_key, item.tokens);
  item.mel = std::move(targets.first);
  item.aux = std::move(targets.second);
  return item;
}

Corpus make_synthetic_corpus(const RunConfig& cfg, std::size_t n_speakers,
                             std::size_t samples_per_speaker) {
  if (n_speakers < 2) throw ConfigError("corpus: need at least 2 speakers");
  Corpus corpus;
  corpus.n_speakers = n_speakers;
  corpus.samples_per_speaker = samples_per_speaker;
  corpus.items.reserve(n_speakers * samples_per_speaker);
  for (std::size_t s = 0; s < n_speakers; ++s)
    for (std::size_t i = 0; i < samples_per_speaker; ++i)
      corpus.items.push_back(make_teacher_item(cfg, s, i, s));
  return corpus;
}

CloneTask make_clone_task(const RunConfig& cfg, std::uint64_t task_seed,
                          std::size_t model_speaker_id) {
  CloneTask task;
  // keyed far away from pre-training speaker keys 0..n-1
  task.speaker_seed = (1ULL << 32) + task_seed;
  for (std::size_t i = 0; i < cfg.task_support; ++i)
    task.support.push_back(make_teacher_item(cfg, task.speaker_seed, i, model_speaker_id));
  for (std::size_t i = 0; i < cfg.task_eval; ++i)
    task.eval.push_back(
        make_teacher_item(cfg, task.speaker_seed, 100000 + i, model_speaker_id));
  return task;
}

}  // namespace prunekit

#include <doctest.h>

#include <cmath>

#include "prunekit/corpus.hpp"
#include "prunekit/training.hpp"

using namespace prunekit;

namespace {

// Small enough for sub-second stage runs.
RunConfig mini_config() {
  RunConfig cfg;
  cfg.model.vocab_size = 11;
  cfg.model.d = 8;
  cfg.model.n_enc_layers = 1;
  cfg.model.n_dec_layers = 1;
  cfg.model.n_heads = 2;
  cfg.model.d_k = 8;
  cfg.model.d_f = 12;
  cfg.model.adaptor_hidden = 4;
  cfg.model.postnet_hidden = 4;
  cfg.model.n_mel = 6;
  cfg.model.n_speakers = 4;
  cfg.model.max_len = 16;
  cfg.samples_per_speaker = 3;
  cfg.task_support = 4;
  cfg.task_eval = 6;
  cfg.seq_min_len = 4;
  cfg.seq_max_len = 10;
  cfg.teacher_hidden = 6;
  cfg.stage_min_steps = 20;
  cfg.stage_max_steps = 30;
  cfg.eval_every = 10;
  cfg.log_every = 10;
  cfg.batch_size = 4;
  return cfg;
}

TrainSetup clone_setup(const Model<float>& base, const RunConfig& cfg, std::size_t* speaker_out) {
  TrainSetup setup{base.clone(), {}, {}};
  const std::size_t spk = add_speaker_row_mean(setup.model);
  if (speaker_out) *speaker_out = spk;
  setup.plan = build_plan(setup.model, cfg.prune_model_dim);
  setup.gates = make_gate_set<float>(setup.plan, cfg.gate);
  return setup;
}

}  // namespace

TEST_CASE("parse_pipeline accepts the four kinds and rejects others verbosely") {
  CHECK(parse_pipeline("joint") == PipelineKind::kJoint);
  CHECK(parse_pipeline("ft_then_prune") == PipelineKind::kFtThenPrune);
  CHECK(parse_pipeline("prune_then_ft") == PipelineKind::kPruneThenFt);
  CHECK(parse_pipeline("prune_pretrain_then_ft") == PipelineKind::kPrunePretrainThenFt);
  try {
    parse_pipeline("distill");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const char* kind : {"joint", "ft_then_prune", "prune_then_ft", "prune_pretrain_then_ft"})
      CHECK(msg.find(kind) != std::string::npos);
  }
}

TEST_CASE("synthetic corpus: determinism, counts, per-speaker targets") {
  auto cfg = mini_config();
  CHECK_THROWS_AS(make_synthetic_corpus(cfg, 1, 3), ConfigError);

  auto a = make_synthetic_corpus(cfg, 2, 3);
  CHECK(a.items.size() == 6);
  auto b = make_synthetic_corpus(cfg, 2, 3);
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    CHECK(a.items[i].tokens == b.items[i].tokens);
    CHECK(a.items[i].mel.data == b.items[i].mel.data);
    CHECK(a.items[i].aux.data == b.items[i].aux.data);
  }

  // same tokens, different speakers -> different targets
  const std::vector<std::size_t> tokens{1, 4, 2, 9};
  auto t0 = teacher_targets(cfg, 0, tokens);
  auto t1 = teacher_targets(cfg, 1, tokens);
  double maxdiff = 0;
  for (std::size_t i = 0; i < t0.first.numel(); ++i)
    maxdiff = std::max(maxdiff, std::fabs(static_cast<double>(t0.first.data[i] - t1.first.data[i])));
  CHECK(maxdiff > 0.0);
}

TEST_CASE("clone task: support and eval are disjoint, lengths bounded") {
  auto cfg = mini_config();
  auto task = make_clone_task(cfg, 5, 3);
  CHECK(task.support.size() == cfg.task_support);
  CHECK(task.eval.size() == cfg.task_eval);
  for (const auto& item : task.support) {
    CHECK(item.tokens.size() >= cfg.seq_min_len);
    CHECK(item.tokens.size() <= cfg.seq_max_len);
    CHECK(item.speaker == 3);
  }
  for (const auto& s : task.support)
    for (const auto& e : task.eval) CHECK(s.tokens != e.tokens);
}

TEST_CASE("total_loss bookkeeping follows the total-loss identity") {
  auto cfg = mini_config();
  auto m = init_model<float>(cfg.model, 1);
  auto plan = build_plan(m, false);
  auto task = make_clone_task(cfg, 1, 1);

  ParamView<float> view(m);
  LossOptions opts;
  opts.reg_enabled = false;
  auto off = total_loss<float>(m, plan, view, task.support, nullptr, opts);
  CHECK(off.breakdown.l_total == off.breakdown.l_tts);  // reg disabled
  CHECK(off.breakdown.density == 0.0);

  // forced all-ones gates: density is exactly maskable / lambda
  auto ones = all_ones_masks<float>(plan);
  opts.reg_enabled = true;
  auto on = total_loss<float>(m, plan, view, task.support, &ones, opts);
  CHECK(on.breakdown.density ==
        static_cast<double>(plan.maskable_params()) / plan.lambda);
  CHECK(on.breakdown.l_total ==
        doctest::Approx(on.breakdown.l_tts + on.breakdown.l_reg / plan.lambda).epsilon(1e-12));

  // arithmetic of the weighting: lambda 1000, L_reg 250 -> extra 0.25
  PrunePlan rigged;
  rigged.dims = {{"x", 250, true}};
  rigged.bindings = {{"w", {250}, {{0, "x"}}, std::nullopt}};
  rigged.lambda = 1000;
  MaskMap<float> rigged_masks;
  rigged_masks.emplace("x", Var<float>::constant(Tensor<float>::full({250}, 1.0f)));
  auto rig = total_loss<float>(m, rigged, view, task.support, &rigged_masks, opts);
  CHECK(rig.breakdown.l_total - rig.breakdown.l_tts == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("optimizer: zero learning rate leaves parameters unchanged; sgd matches the closed-form step") {
  auto w = Var<float>::parameter(Tensor<float>({3}, {2.0f, -1.0f, 0.5f}));
  const auto before = w.value().data;

  Optimizer frozen(/*adam=*/false);
  frozen.add_param(w, 0.0);
  frozen.step({Tensor<float>({3}, {1.0f, 1.0f, 1.0f})});
  CHECK(w.value().data == before);

  // loss = ||w||^2 / 2 has gradient w; one sgd step gives w * (1 - lr)
  Optimizer sgd(/*adam=*/false);
  sgd.add_param(w, 0.1);
  auto loss = scale_const(sum(mul(w, w)), 0.5f);
  auto g = grad(loss, {w});
  sgd.step(g);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(w.value().data[i] == doctest::Approx(before[i] * 0.9f).epsilon(1e-6));
}

TEST_CASE("train_step is deterministic and honors the total-loss identity each step") {
  auto cfg = mini_config();
  auto run = [&](std::uint64_t seed) {
    auto setup = make_train_setup(init_model<float>(cfg.model, seed), cfg);
    auto task = make_clone_task(cfg, 2, 0);
    StageSpec stage{"joint", true, MaskMode::kSampled, true, true, true, false, 0, 0};
    Optimizer opt(true);
    for (const auto& p : stage_trainables(setup, stage)) opt.add_param(p, 1e-3);
    std::vector<LossBreakdown> history;
    for (std::uint64_t step = 1; step <= 25; ++step)
      history.push_back(train_step(setup, opt, stage, task.support, cfg, step));
    return std::make_pair(history, setup.model.token_embedding.value().data);
  };
  auto [h1, emb1] = run(7);
  auto [h2, emb2] = run(7);
  CHECK(emb1 == emb2);
  auto ref_setup = make_train_setup(init_model<float>(cfg.model, 7), cfg);
  const double max_density =
      static_cast<double>(ref_setup.plan.maskable_params()) / ref_setup.plan.lambda;
  for (std::size_t i = 0; i < h1.size(); ++i) {
    CHECK(h1[i].l_total == h2[i].l_total);
    CHECK(std::fabs(h1[i].l_total - (h1[i].l_tts + h1[i].l_reg / h1[i].lambda)) < 1e-9);
    CHECK(h1[i].density >= 0.0);
    CHECK(h1[i].density <= max_density + 1e-9);
  }
}

TEST_CASE("expected-L0 regularization mode needs a real stretch and then trains") {
  auto cfg = mini_config();
  cfg.reg_mode = "expected";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);  // gamma = 0 has no closed form

  cfg.gate.gamma = -0.1;
  cfg.gate.eta = 1.1;
  cfg.validate();
  auto setup = make_train_setup(init_model<float>(cfg.model, 13), cfg);
  auto task = make_clone_task(cfg, 6, 0);
  StageSpec stage{"joint", true, MaskMode::kSampled, true, true, true, false, 0, 0};
  Optimizer opt(true);
  for (const auto& p : stage_trainables(setup, stage)) opt.add_param(p, cfg.lr_weights);
  LossBreakdown last;
  for (std::uint64_t step = 1; step <= 5; ++step)
    last = train_step(setup, opt, stage, task.support, cfg, step);
  CHECK(last.l_reg > 0.0);
  CHECK(std::isfinite(last.l_total));
}

TEST_CASE("frozen binary masks keep pruned channels at exactly zero gradient") {
  auto cfg = mini_config();
  auto setup = make_train_setup(init_model<float>(cfg.model, 11), cfg);
  auto* df = setup.gates.find("enc0.ffn_df");
  REQUIRE(df != nullptr);
  df->log_alpha.mutable_value().data[2] = -5.0f;
  df->log_alpha.mutable_value().data[7] = -5.0f;

  auto task = make_clone_task(cfg, 3, 1);
  auto masks = binary_mask_map(finalize_binary_gates(setup.plan, setup.gates));
  ParamView<float> view(setup.model, setup.plan, masks);
  LossOptions opts;  // reg off in post-prune fine-tuning
  auto res = total_loss<float>(setup.model, setup.plan, view, task.support, nullptr, opts);
  auto grads = grad(res.total, {setup.model.encoder[0].ffn_up_w, setup.model.encoder[0].ffn_up_b,
                                setup.model.encoder[0].ffn_down_w});
  const std::size_t df_extent = cfg.model.d_f;
  for (std::size_t j : {std::size_t(2), std::size_t(7)}) {
    for (std::size_t r = 0; r < cfg.model.d; ++r) {
      CHECK(grads[0].data[r * df_extent + j] == 0.0f);  // up_w column
      CHECK(grads[2].data[j * cfg.model.d + r] == 0.0f);  // down_w row
    }
    CHECK(grads[1].data[j] == 0.0f);  // up_b element
  }
}

TEST_CASE("pipeline structure: stage counts, sparsity bookkeeping") {
  auto cfg = mini_config();
  auto corpus = make_synthetic_corpus(cfg, cfg.model.n_speakers, cfg.samples_per_speaker);
  auto base = make_train_setup(init_model<float>(cfg.model, 3), cfg);
  pretrain(base, corpus, cfg, 40, nullptr);

  std::size_t spk = 0;

  SUBCASE("ft_then_prune reports stage-1 sparsity exactly 0.00") {
    auto setup = clone_setup(base.model, cfg, &spk);
    auto task = make_clone_task(cfg, 1, spk);
    auto reps = run_pipeline(make_pipeline_spec(PipelineKind::kFtThenPrune, cfg), setup, &corpus,
                             task, cfg, nullptr);
    REQUIRE(reps.size() == 2);
    CHECK(reps[0].stage == "ft");
    CHECK(reps[0].sparsity_pct == 0.0);
    CHECK(reps[0].params_after == reps[0].params_before);
  }

  SUBCASE("prune_then_ft reports identical sparsity in both stages") {
    auto setup = clone_setup(base.model, cfg, &spk);
    auto task = make_clone_task(cfg, 2, spk);
    auto reps = run_pipeline(make_pipeline_spec(PipelineKind::kPruneThenFt, cfg), setup, &corpus,
                             task, cfg, nullptr);
    REQUIRE(reps.size() == 2);
    CHECK(reps[0].sparsity_pct == reps[1].sparsity_pct);
    CHECK(reps[0].params_after == reps[1].params_after);
  }

  SUBCASE("joint is a single stage; zero multiplier keeps sparsity at zero") {
    RunConfig c = cfg;
    c.reg_multiplier = 0.0;
    auto setup = clone_setup(base.model, c, &spk);
    auto task = make_clone_task(c, 3, spk);
    auto reps =
        run_pipeline(make_pipeline_spec(PipelineKind::kJoint, c), setup, &corpus, task, c, nullptr);
    REQUIRE(reps.size() == 1);
    CHECK(reps[0].stage == "joint");
    CHECK(reps[0].sparsity_pct == 0.0);  // no pressure to prune
  }

  SUBCASE("prune_pretrain_then_ft runs gates-only first, then adapts") {
    auto setup = clone_setup(base.model, cfg, &spk);
    auto task = make_clone_task(cfg, 4, spk);
    const auto weights_before = setup.model.encoder[0].ffn_up_w.value().data;
    auto spec = make_pipeline_spec(PipelineKind::kPrunePretrainThenFt, cfg);
    std::uint64_t gs = 0;
    auto first = run_stage(setup, spec.stages[0], 0, "prune_pretrain_then_ft", &corpus, &task, cfg,
                           gs, nullptr);
    CHECK(setup.model.encoder[0].ffn_up_w.value().data == weights_before);  // weights frozen
    auto second = run_stage(setup, spec.stages[1], 1, "prune_pretrain_then_ft", &corpus, &task, cfg,
                            gs, nullptr);
    CHECK(second.sparsity_pct == first.sparsity_pct);
  }
}

TEST_CASE("pretraining beats random init on a held-out speaker") {
  auto cfg = mini_config();
  cfg.pretrain_steps = 250;
  cfg.stage_max_steps = 250;
  auto corpus = make_synthetic_corpus(cfg, cfg.model.n_speakers, cfg.samples_per_speaker);

  auto trained = make_train_setup(init_model<float>(cfg.model, 5), cfg);
  std::vector<double> first_loss;
  pretrain(trained, corpus, cfg, 250,
           [&](const StepRecord& rec) { first_loss.push_back(rec.loss.l_tts); });
  CHECK(first_loss.back() < first_loss.front());  // training reduces loss

  auto fresh = make_train_setup(init_model<float>(cfg.model, 6), cfg);

  // held-out speaker evaluated through the mean-initialized embedding row
  auto eval_on_heldout = [&](TrainSetup& s) {
    auto m = s.model.clone();
    const std::size_t spk = add_speaker_row_mean(m);
    std::vector<BatchItem<float>> items;
    for (std::size_t i = 0; i < 6; ++i) items.push_back(make_teacher_item(cfg, 7777, i, spk));
    auto plan = build_plan(m, false);
    auto gates = make_gate_set<float>(plan, cfg.gate);
    return evaluate(m, plan, gates, items, MaskMode::kOff, cfg.aux_loss_weight);
  };
  CHECK(eval_on_heldout(trained) < eval_on_heldout(fresh));
}

TEST_CASE("add_speaker_row_mean appends the mean embedding row") {
  auto cfg = mini_config();
  auto m = init_model<float>(cfg.model, 8);
  const auto table = m.speaker_embedding.value();
  const std::size_t id = add_speaker_row_mean(m);
  CHECK(id == cfg.model.n_speakers);
  CHECK(m.config.n_speakers == cfg.model.n_speakers + 1);
  for (std::size_t j = 0; j < table.shape[1]; ++j) {
    double mean = 0;
    for (std::size_t i = 0; i < table.shape[0]; ++i) mean += table.at(i, j);
    mean /= static_cast<double>(table.shape[0]);
    CHECK(m.speaker_embedding.value().at(id, j) == doctest::Approx(mean).epsilon(1e-6));
  }
}

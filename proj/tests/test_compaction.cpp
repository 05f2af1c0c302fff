#include <doctest.h>

#include <cmath>

#include "prunekit/compaction.hpp"
#include "prunekit/model.hpp"

using namespace prunekit;

namespace {

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.vocab_size = 9;
  cfg.d = 8;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.n_heads = 2;
  cfg.d_k = 8;
  cfg.d_f = 12;
  cfg.adaptor_hidden = 4;
  cfg.postnet_hidden = 4;
  cfg.n_mel = 6;
  cfg.n_speakers = 3;
  cfg.max_len = 16;
  return cfg;
}

template <typename T>
void randomize_gates(GateSet<T>& gates, Rng& rng, double keep_bias = 0.0) {
  for (auto& g : gates.gates)
    for (auto& la : g.log_alpha.mutable_value().data)
      la = static_cast<T>(rng.normal() * 3.0 + keep_bias);
}

}  // namespace

TEST_CASE("compact with all gates kept is the identity") {
  auto m = init_model<float>(toy_config(), 1);
  auto plan = build_plan(m);
  auto gates = make_gate_set<float>(plan, {});  // init_log_alpha 2.5 > 0
  auto res = compact(m, plan, gates);
  CHECK(res.report.params_after == res.report.params_before);
  CHECK(res.report.ratio == doctest::Approx(1.0));
  CHECK(res.report.sparsity_pct == doctest::Approx(0.0));
  CHECK(res.report.max_residual == 0.0);  // identical slices, identical arithmetic
  CHECK(res.report.rescued.empty());
}

TEST_CASE("surviving_params counts a tied middle gate like the two-layer chain") {
  // 4 -> 4 -> 4 chain, no biases: both matrices are bound to the middle
  // dimension, one on columns, one on rows. Gate [1,0,1,0]: 32 -> 16 params.
  PrunePlan plan;
  plan.dims = {{"mid", 4, true}};
  plan.bindings = {{"w1", {4, 4}, {{1, "mid"}}, std::nullopt},
                   {"w2", {4, 4}, {{0, "mid"}}, std::nullopt}};
  plan.lambda = 32;
  BinaryGates<float> binary;
  binary.by_dim.emplace("mid", Tensor<float>({4}, {1, 0, 1, 0}));
  CHECK(surviving_params(plan, binary) == 16);
  CHECK(sparsity_of(plan, binary) == doctest::Approx(50.0));
}

TEST_CASE("masked forward equals compacted forward for random binary gates") {
  Rng rng(100);
  double worst_float = 0;
  for (int trial = 0; trial < 5; ++trial) {
    auto m = init_model<float>(toy_config(), 200 + trial);
    auto plan = build_plan(m);
    auto gates = make_gate_set<float>(plan, {});
    randomize_gates(gates, rng);
    auto res = compact(m, plan, gates, /*probe_inputs=*/10, /*probe_seed=*/31 + trial);
    CHECK(res.report.max_residual < 1e-5);
    worst_float = std::max(worst_float, res.report.max_residual);

    // double-precision run of the same assignment
    auto md = init_model<double>(toy_config(), 200 + trial);
    auto pland = build_plan(md);
    auto gatesd = make_gate_set<double>(pland, {});
    for (std::size_t i = 0; i < gates.gates.size(); ++i)
      for (std::size_t j = 0; j < gates.gates[i].size(); ++j)
        gatesd.gates[i].log_alpha.mutable_value().data[j] = gates.gates[i].log_alpha.value().data[j];
    auto resd = compact(md, pland, gatesd, 10, 31 + trial);
    CHECK(resd.report.max_residual < 1e-10);
  }
  INFO("worst float residual ", worst_float);
}

TEST_CASE("masked forward equals compacted forward with model_d pruning enabled") {
  Rng rng(55);
  auto m = init_model<double>(toy_config(), 300);
  auto plan = build_plan(m, /*enable_model_d=*/true);
  auto gates = make_gate_set<double>(plan, {});
  randomize_gates(gates, rng, 0.5);
  auto res = compact(m, plan, gates, 10, 77);
  CHECK(res.report.max_residual < 1e-10);
  CHECK(res.model.config.d < toy_config().d);  // something actually pruned
}

TEST_CASE("sparsity_of agrees with compact's surviving count exactly") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = init_model<float>(toy_config(), 400 + trial);
    auto plan = build_plan(m);
    auto gates = make_gate_set<float>(plan, {});
    randomize_gates(gates, rng);
    auto binary = finalize_binary_gates(plan, gates);
    auto res = compact(m, plan, gates, /*probe_inputs=*/1);
    CHECK(surviving_params(plan, binary) == res.report.params_after);
    CHECK(sparsity_of(plan, binary) == doctest::Approx(res.report.sparsity_pct).epsilon(1e-12));
  }
}

TEST_CASE("compaction is idempotent") {
  Rng rng(9);
  auto m = init_model<float>(toy_config(), 500);
  auto plan = build_plan(m);
  auto gates = make_gate_set<float>(plan, {});
  randomize_gates(gates, rng);
  auto first = compact(m, plan, gates);
  auto second = compact(first.model, first.plan, first.gates);
  CHECK(second.report.params_after == first.report.params_after);
  CHECK(second.report.params_before == first.report.params_after);
  CHECK(second.report.ratio == doctest::Approx(1.0));
  CHECK(second.report.max_residual == 0.0);
  for (const auto& d : second.report.dims) CHECK(d.kept == d.total);
}

TEST_CASE("zeroing one more gate index never increases the surviving count") {
  Rng rng(13);
  auto m = init_model<float>(toy_config(), 600);
  auto plan = build_plan(m);
  auto gates = make_gate_set<float>(plan, {});
  randomize_gates(gates, rng, 1.0);
  auto before = surviving_params(plan, finalize_binary_gates(plan, gates));
  for (int step = 0; step < 30; ++step) {
    // flip a random currently-positive logit negative
    auto& g = gates.gates[rng.below(gates.gates.size())];
    if (!plan.dim_enabled(g.name)) continue;
    const std::size_t i = rng.below(g.size());
    if (g.log_alpha.value().data[i] < 0) continue;
    g.log_alpha.mutable_value().data[i] = -5.0f;
    const auto after = surviving_params(plan, finalize_binary_gates(plan, gates));
    CHECK(after <= before);
    before = after;
  }
}

TEST_CASE("a dimension pruned to zero survivors keeps its best index and is flagged") {
  auto m = init_model<float>(toy_config(), 700);
  auto plan = build_plan(m);
  auto gates = make_gate_set<float>(plan, {});
  auto* df = gates.find("enc0.ffn_df");
  REQUIRE(df != nullptr);
  for (std::size_t i = 0; i < df->size(); ++i)
    df->log_alpha.mutable_value().data[i] = -4.0f - static_cast<float>(i);
  auto res = compact(m, plan, gates);
  CHECK(std::find(res.report.rescued.begin(), res.report.rescued.end(), "enc0.ffn_df") !=
        res.report.rescued.end());
  for (const auto& d : res.report.dims) {
    if (d.name == "enc0.ffn_df") {
      CHECK(d.kept == 1);
      CHECK(d.rescued);
    }
  }
  // the kept index is the one with the largest log alpha (index 0 here)
  CHECK(res.model.encoder[0].ffn_up_w.value().shape[1] == 1);
  CHECK(res.report.max_residual < 1e-5);
}

TEST_CASE("dropping a head removes all four matrices and its gate parameters") {
  auto m = init_model<float>(toy_config(), 800);
  auto plan = build_plan(m);
  auto gates = make_gate_set<float>(plan, {});
  auto* hc = gates.find("enc0.head_count");
  REQUIRE(hc != nullptr);
  hc->log_alpha.mutable_value().data[0] = -9.0f;  // drop head 0, keep head 1

  const std::size_t head_dim = m.config.head_dim();
  const std::size_t head_params = 3 * (m.config.d * head_dim + head_dim) + head_dim * m.config.d;
  auto res = compact(m, plan, gates);
  CHECK(res.report.params_before - res.report.params_after == head_params);
  CHECK(res.model.encoder[0].heads.size() == 1);
  CHECK(res.report.max_residual < 1e-5);

  // surviving head (old h1) is renumbered h0; its gates carry over
  CHECK(res.plan.find_dim("enc0.h1.head_dk") == nullptr);
  CHECK(res.plan.find_dim("enc0.h0.head_dk") != nullptr);
  CHECK(res.gates.find("enc0.head_count")->size() == 1);

  // the kept head's output must match the original head 1 computation
  auto& old_h1 = m.encoder[0].heads[1];
  auto& new_h0 = res.model.encoder[0].heads[0];
  CHECK(new_h0.wq.value().data == old_h1.wq.value().data);
}

TEST_CASE("ffn channel pruning equals an FFN with the channel deleted") {
  auto cfg = toy_config();
  auto m = init_model<double>(cfg, 900);
  auto plan = build_plan(m);
  auto gates = make_gate_set<double>(plan, {});
  auto* df = gates.find("enc0.ffn_df");
  df->log_alpha.mutable_value().data[3] = -8.0;  // delete channel 3

  auto binary = finalize_binary_gates(plan, gates);
  auto masks = binary_mask_map(binary);
  Rng rng(41);
  Tensor<double> xt({4, cfg.d});
  for (auto& v : xt.data) v = rng.normal();
  auto x = Var<double>::constant(xt);

  ParamView<double> masked(m, plan, masks);
  auto masked_out = ffn(m.encoder[0], "enc0", x, masked);

  auto res = compact(m, plan, gates);
  ParamView<double> small(res.model);
  auto small_out = ffn(res.model.encoder[0], "enc0", x, small);
  for (std::size_t i = 0; i < masked_out.value().numel(); ++i)
    CHECK(masked_out.value().data[i] == doctest::Approx(small_out.value().data[i]).epsilon(1e-12));
}

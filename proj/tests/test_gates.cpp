#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "prunekit/gates.hpp"
#include "prunekit/rng.hpp"

using namespace prunekit;

namespace {

GateParam<double> gate_with_logits(const std::vector<double>& la, GateConfig cfg = {}) {
  auto g = make_gate<double>("test", la.size(), cfg);
  g.log_alpha.mutable_value().data = la;
  return g;
}

}  // namespace

TEST_CASE("gate config validation") {
  GateConfig cfg;
  CHECK(cfg.beta == 1.0);
  CHECK(cfg.gamma == 0.0);
  CHECK(cfg.eta == 1.0);
  CHECK(cfg.init_log_alpha == 2.5);
  cfg.beta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.gamma = 0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.eta = 0.9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("sample_gate at the midpoint") {
  auto g = gate_with_logits({0.0});
  auto s = sample_gate_with_u(g, Tensor<double>::scalar(0.5));
  CHECK(s.s.value().data[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.z.value().data[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("sample_gate saturates for large log_alpha") {
  auto g = gate_with_logits({20.0});
  auto s = sample_gate_with_u(g, Tensor<double>::scalar(0.5));
  CHECK(s.z.value().data[0] >= 1.0 - 1e-8);
}

TEST_CASE("sample_gate with a real stretch") {
  GateConfig cfg;
  cfg.gamma = -0.1;
  cfg.eta = 1.1;
  auto g = gate_with_logits({0.0}, cfg);
  auto s = sample_gate_with_u(g, Tensor<double>::scalar(0.5));
  CHECK(s.s.value().data[0] == doctest::Approx(0.5));
  CHECK(s.z.value().data[0] == doctest::Approx(-0.1 + 0.5 * 1.2));  // = 0.5
}

TEST_CASE("sample_gate rejects u on the boundary") {
  auto g = gate_with_logits({0.0});
  CHECK_THROWS_AS(sample_gate_with_u(g, Tensor<double>::scalar(0.0)), NumericError);
  CHECK_THROWS_AS(sample_gate_with_u(g, Tensor<double>::scalar(1.0)), NumericError);
}

TEST_CASE("sampled z stays inside [0,1], strictly inside with defaults") {
  auto g = make_gate<double>("g", 64, {});
  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    auto s = sample_gate(g, rng);
    for (std::size_t i = 0; i < 64; ++i) {
      CHECK(s.u.data[i] > 0.0);
      CHECK(s.u.data[i] < 1.0);
      CHECK(s.z.value().data[i] > 0.0);
      CHECK(s.z.value().data[i] < 1.0);
    }
    // with gamma=0, eta=1 the stretch-and-clamp is the identity on s
    CHECK(s.z.value().data == s.s.value().data);
  }
}

TEST_CASE("with u fixed, z is nondecreasing in log_alpha") {
  Rng rng(5);
  Tensor<double> u({1}, {rng.uniform_clamped(1e-6)});
  double prev = -1.0;
  for (double la = -6.0; la <= 6.0; la += 0.37) {
    auto g = gate_with_logits({la});
    auto s = sample_gate_with_u(g, u);
    CHECK(s.z.value().data[0] >= prev);
    prev = s.z.value().data[0];
  }
}

TEST_CASE("sampling is deterministic given (seed, step, name)") {
  auto g = make_gate<double>("enc0.ffn_df", 16, {});
  auto a = sample_gate_at(g, 7, 123);
  auto b = sample_gate_at(g, 7, 123);
  CHECK(a.u.data == b.u.data);
  auto c = sample_gate_at(g, 7, 124);
  CHECK(a.u.data != c.u.data);
}

TEST_CASE("binarize thresholds at log_alpha = 0, boundary kept") {
  auto g = gate_with_logits({0.0});
  CHECK(binarize(g).data[0] == 1.0);
  auto g2 = gate_with_logits({-0.1});
  CHECK(binarize(g2).data[0] == 0.0);
  auto g3 = gate_with_logits({-3.0, 0.0, 3.0});
  const auto m = binarize(g3).data;
  CHECK(m == std::vector<double>{0.0, 1.0, 1.0});
}

TEST_CASE("binarize is invariant under positive rescaling of beta") {
  for (double beta : {0.25, 1.0, 4.0}) {
    GateConfig cfg;
    cfg.beta = beta;
    auto g = gate_with_logits({-2.0, -1e-9, 0.0, 1e-9, 5.0}, cfg);
    const auto m = binarize(g).data;
    CHECK(m == std::vector<double>{0.0, 0.0, 1.0, 1.0, 1.0});
  }
}

TEST_CASE("gate_polarization counts probabilities in (0.05, 0.95)") {
  auto saturated = gate_with_logits({20.0, -20.0, 20.0});
  std::vector<const GateParam<double>*> set{&saturated};
  CHECK(gate_polarization(set) == 0.0);

  auto undecided = gate_with_logits({0.0, 0.0});
  set = {&undecided};
  CHECK(gate_polarization(set) == 1.0);

  auto mixed = gate_with_logits({0.0, 20.0, -20.0, 20.0});
  set = {&mixed};
  CHECK(gate_polarization(set) == doctest::Approx(0.25));

  set = {};
  CHECK_THROWS_AS(gate_polarization(set), UsageError);
}

TEST_CASE("gradient of z w.r.t. log_alpha matches finite differences (u fixed)") {
  Rng rng(17);
  Tensor<double> u({8});
  for (auto& v : u.data) v = rng.uniform_clamped(1e-6);
  auto g = make_gate<double>("fd", 8, {});
  for (std::size_t i = 0; i < 8; ++i) g.log_alpha.mutable_value().data[i] = rng.normal();
  auto build = [&]() {
    auto s = sample_gate_with_u(g, u);
    return sum(mul(s.z, s.z));
  };
  auto res = fdcheck::check_gradients({g.log_alpha}, build);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("expected_gate closed form needs a real stretch") {
  auto g = gate_with_logits({1.0});
  CHECK_THROWS_AS(expected_gate(g), ConfigError);

  GateConfig cfg;
  cfg.gamma = -0.1;
  cfg.eta = 1.1;
  auto gs = gate_with_logits({1.0, -1.0}, cfg);
  auto e = expected_gate(gs);
  const double shift = std::log(0.1 / 1.1);  // beta = 1
  for (std::size_t i = 0; i < 2; ++i) {
    const double la = gs.log_alpha.value().data[i];
    const double ref = 1.0 / (1.0 + std::exp(-(la - shift)));
    CHECK(e.value().data[i] == doctest::Approx(ref).epsilon(1e-12));
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "prunekit/autodiff.hpp"
#include "prunekit/rng.hpp"
#include "prunekit/tensor.hpp"

using namespace prunekit;

namespace {

Tensor<double> random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.normal() * scale;
  return t;
}

// Brute-force triple-loop matmul, the reference the fast path is checked against.
Tensor<double> matmul_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<double> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      c.at(i, j) = acc;
    }
  return c;
}

}  // namespace

TEST_CASE("tensor shape/data invariant") {
  CHECK_THROWS_AS(Tensor<float>({2, 3}, {1.0f, 2.0f}), ShapeError);
  Tensor<float> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.all_finite());
}

TEST_CASE("matmul identity and basis selection") {
  auto eye = Var<double>::constant(Tensor<double>::from_rows({{1, 0}, {0, 1}}));
  auto a = Var<double>::constant(Tensor<double>::from_rows({{1, 2}, {3, 4}}));
  auto prod = matmul(eye, a);
  CHECK(prod.value().at(0, 0) == 1);
  CHECK(prod.value().at(0, 1) == 2);
  CHECK(prod.value().at(1, 0) == 3);
  CHECK(prod.value().at(1, 1) == 4);

  auto basis = Var<double>::constant(Tensor<double>::from_rows({{1, 0}}));
  auto col = Var<double>::constant(Tensor<double>::from_rows({{5}, {7}}));
  auto picked = matmul(basis, col);
  CHECK(picked.value().numel() == 1);
  CHECK(picked.value().data[0] == 5);
}

TEST_CASE("matmul random vs scalar-loop oracle") {
  Rng rng(42);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto fast = matmul(Var<double>::constant(a), Var<double>::constant(b));
  auto ref = matmul_oracle(a, b);
  for (std::size_t i = 0; i < ref.numel(); ++i)
    CHECK(std::fabs(fast.value().data[i] - ref.data[i]) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = Var<double>::constant(Tensor<double>({2, 3}));
  auto b = Var<double>::constant(Tensor<double>({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul_nt matches explicit transpose") {
  Rng rng(7);
  auto a = random_tensor({3, 5}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto fast = matmul_nt(Var<double>::constant(a), Var<double>::constant(b));
  Tensor<double> bt({5, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) bt.at(j, i) = b.at(i, j);
  auto ref = matmul_oracle(a, bt);
  for (std::size_t i = 0; i < ref.numel(); ++i)
    CHECK(std::fabs(fast.value().data[i] - ref.data[i]) < 1e-12);
}

TEST_CASE("softmax rows: symmetry, shift invariance, formula oracle") {
  auto s0 = softmax_rows(Var<double>::constant(Tensor<double>::from_rows({{0, 0}})));
  CHECK(s0.value().data[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(s0.value().data[1] == doctest::Approx(0.5).epsilon(1e-9));

  for (double c : {-3.0, 0.0, 11.5}) {
    auto s = softmax_rows(Var<double>::constant(Tensor<double>::from_rows({{c, c, c}})));
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(std::fabs(s.value().data[j] - 1.0 / 3.0) < 1e-6);
  }

  auto s = softmax_rows(Var<double>::constant(Tensor<double>::from_rows({{1, 2, 3}})));
  double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (std::size_t j = 0; j < 3; ++j)
    CHECK(std::fabs(s.value().data[j] - std::exp(1.0 + j) / denom) < 1e-12);

  // shift invariance on a random row
  Rng rng(3);
  auto x = random_tensor({2, 6}, rng, 2.0);
  Tensor<double> shifted = x;
  for (std::size_t j = 0; j < 6; ++j) shifted.at(0, j) += 17.25;
  auto p1 = softmax_rows(Var<double>::constant(x));
  auto p2 = softmax_rows(Var<double>::constant(shifted));
  for (std::size_t j = 0; j < 6; ++j)
    CHECK(std::fabs(p1.value().at(0, j) - p2.value().at(0, j)) < 1e-6);

  // rows sum to one
  for (std::size_t i = 0; i < 2; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < 6; ++j) acc += p1.value().at(i, j);
    CHECK(std::fabs(acc - 1.0) < 1e-6);
  }
}

TEST_CASE("layer_norm: constant row, scale annihilation, formula oracle") {
  const double eps = 1e-5;
  auto ones = Var<double>::constant(Tensor<double>::full({4}, 1.0));
  auto zeros = Var<double>::constant(Tensor<double>({4}));

  auto c = layer_norm(Var<double>::constant(Tensor<double>::from_rows({{3, 3, 3, 3}})), ones, zeros, eps);
  for (std::size_t j = 0; j < 4; ++j) CHECK(std::fabs(c.value().data[j]) < 1e-9);

  auto b = Var<double>::constant(Tensor<double>::full({4}, 2.5));
  auto zscale = Var<double>::constant(Tensor<double>({4}));
  auto out = layer_norm(Var<double>::constant(Tensor<double>::from_rows({{1, 7, -2, 4}})), zscale, b, eps);
  for (std::size_t j = 0; j < 4; ++j) CHECK(out.value().data[j] == doctest::Approx(2.5));

  // direct formula reference
  Tensor<double> x = Tensor<double>::from_rows({{1, 2, 3, 4}});
  auto y = layer_norm(Var<double>::constant(x), ones, zeros, eps);
  const double mu = 2.5;
  double var = 0;
  for (std::size_t j = 0; j < 4; ++j) var += (x.data[j] - mu) * (x.data[j] - mu);
  var /= 4.0;
  for (std::size_t j = 0; j < 4; ++j) {
    const double ref = (x.data[j] - mu) / std::sqrt(var + eps);
    CHECK(std::fabs(y.value().data[j] - ref) < 1e-10);
  }

  // normalized rows have mean ~0, variance ~1
  Rng rng(11);
  auto r = random_tensor({3, 8}, rng, 4.0);
  auto ones8 = Var<double>::constant(Tensor<double>::full({8}, 1.0));
  auto zeros8 = Var<double>::constant(Tensor<double>({8}));
  auto ln = layer_norm(Var<double>::constant(r), ones8, zeros8, eps);
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0;
    for (std::size_t j = 0; j < 8; ++j) mean += ln.value().at(i, j);
    mean /= 8;
    CHECK(std::fabs(mean) < 1e-6);
    double v = 0;
    for (std::size_t j = 0; j < 8; ++j) v += (ln.value().at(i, j) - mean) * (ln.value().at(i, j) - mean);
    v /= 8;
    CHECK(std::fabs(v - 1.0) < 1e-4);
  }
}

TEST_CASE("grad: sum gives ones, half squared norm gives the weights") {
  Rng rng(5);
  auto w = Var<double>::parameter(random_tensor({3, 2}, rng));

  auto g1 = grad(sum(w), {w});
  for (const double v : g1[0].data) CHECK(v == doctest::Approx(1.0));

  auto loss = scale_const(sum(mul(w, w)), 0.5);
  auto g2 = grad(loss, {w});
  CHECK(g2[0].shape == w.value().shape);
  for (std::size_t i = 0; i < g2[0].numel(); ++i)
    CHECK(g2[0].data[i] == doctest::Approx(w.value().data[i]));
}

TEST_CASE("grad: parameter not on tape is a usage error") {
  auto w = Var<double>::parameter(Tensor<double>::full({2}, 1.0));
  auto other = Var<double>::parameter(Tensor<double>::full({2}, 1.0));
  auto loss = sum(w);
  CHECK_THROWS_AS(grad(loss, {other}), UsageError);
}

TEST_CASE("grad: replaying the same tape twice yields identical gradients") {
  Rng rng(9);
  auto w = Var<double>::parameter(random_tensor({4, 4}, rng));
  auto x = Var<double>::constant(random_tensor({2, 4}, rng));
  auto loss = sum(relu(matmul(x, w)));
  auto g1 = grad(loss, {w});
  auto g2 = grad(loss, {w});
  CHECK(g1[0].data == g2[0].data);
}

TEST_CASE("two-layer net gradients match central finite differences") {
  Rng rng(1234);
  auto w1 = Var<double>::parameter(random_tensor({5, 7}, rng, 0.5));
  auto b1 = Var<double>::parameter(random_tensor({7}, rng, 0.2));
  auto w2 = Var<double>::parameter(random_tensor({7, 3}, rng, 0.5));
  auto b2 = Var<double>::parameter(random_tensor({3}, rng, 0.2));
  auto x = Var<double>::constant(random_tensor({4, 5}, rng));
  auto target = Var<double>::constant(random_tensor({4, 3}, rng));

  auto build = [&]() {
    auto h = relu(add_rowvec(matmul(x, w1), b1));
    auto y = add_rowvec(matmul(h, w2), b2);
    return mse(y, target);
  };
  auto res = fdcheck::check_gradients({w1, b1, w2, b2}, build);
  CHECK(res.coords_checked == 5 * 7 + 7 + 7 * 3 + 3);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("per-op gradients match finite differences") {
  Rng rng(777);

  SUBCASE("elementwise and scaling ops") {
    auto a = Var<double>::parameter(random_tensor({3, 4}, rng));
    auto b = Var<double>::parameter(random_tensor({3, 4}, rng));
    auto v = Var<double>::parameter(random_tensor({4}, rng));
    auto r = Var<double>::parameter(random_tensor({3}, rng));
    auto sc = Var<double>::parameter(random_tensor({1}, rng));
    auto weights = Var<double>::constant(random_tensor({3, 4}, rng));

    auto build = [&]() {
      auto t = mul(add(a, b), sub(a, scale_const(b, 0.3)));
      t = add_rowvec(t, v);
      t = scale_axis(t, r, 0);
      t = scale_by(t, sc);
      t = mul(t, weights);
      return sum(t);
    };
    auto res = fdcheck::check_gradients({a, b, v, r, sc}, build);
    CHECK(res.max_rel_err < 1e-4);
  }

  SUBCASE("sigmoid, element, reshape, hc_stretch") {
    auto v = Var<double>::parameter(random_tensor({6}, rng));
    auto build = [&]() {
      auto s = sigmoid(v);
      auto z = hc_stretch(s, -0.1, 1.1);
      auto picked = element(z, 2);
      auto flat = reshape(z, {2, 3});
      return add(sum(mul(flat, flat)), picked);
    };
    auto res = fdcheck::check_gradients({v}, build);
    CHECK(res.max_rel_err < 1e-4);
  }

  SUBCASE("matmul family, softmax, layer_norm") {
    auto q = Var<double>::parameter(random_tensor({3, 4}, rng, 0.7));
    auto k = Var<double>::parameter(random_tensor({3, 4}, rng, 0.7));
    auto g = Var<double>::parameter(random_tensor({3}, rng, 0.5));
    auto sft = Var<double>::parameter(random_tensor({3}, rng, 0.5));
    auto build = [&]() {
      auto scores = softmax_rows(matmul_nt(q, k));
      auto y = layer_norm(scores, g, sft, 1e-5);
      return sum(mul(y, y));
    };
    auto res = fdcheck::check_gradients({q, k, g, sft}, build);
    CHECK(res.max_rel_err < 1e-4);
  }

  SUBCASE("gated layer_norm including gate gradient") {
    auto x = Var<double>::parameter(random_tensor({3, 5}, rng));
    auto g = Var<double>::parameter(random_tensor({5}, rng, 0.5));
    auto b = Var<double>::parameter(random_tensor({5}, rng, 0.5));
    auto z = Var<double>::parameter(Tensor<double>({5}, {0.9, 0.3, 0.8, 0.5, 0.7}));
    auto build = [&]() {
      auto y = layer_norm_gated(x, g, b, 1e-5, z);
      return sum(mul(y, y));
    };
    auto res = fdcheck::check_gradients({x, g, b, z}, build);
    CHECK(res.max_rel_err < 1e-4);
  }

  SUBCASE("conv1d_same and lookup_rows") {
    auto x = Var<double>::parameter(random_tensor({6, 3}, rng));
    auto w = Var<double>::parameter(random_tensor({2, 3, 3}, rng, 0.5));
    auto b = Var<double>::parameter(random_tensor({2}, rng, 0.2));
    auto table = Var<double>::parameter(random_tensor({5, 3}, rng));
    auto build = [&]() {
      auto rows = lookup_rows(table, {1, 3, 3, 0, 4, 2});
      auto y = conv1d_same(add(x, rows), w, b);
      return sum(mul(y, y));
    };
    auto res = fdcheck::check_gradients({x, w, b, table}, build);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("determinism: same seed reproduces outputs and gradients bit-for-bit") {
  auto run = [] {
    Rng rng(2024);
    auto w = Var<double>::parameter(random_tensor({6, 6}, rng));
    auto x = Var<double>::constant(random_tensor({3, 6}, rng));
    auto loss = sum(softmax_rows(matmul(x, w)));
    auto g = grad(loss, {w});
    return std::make_pair(loss.value().data[0], g[0].data);
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("conv1d_same matches direct correlation oracle") {
  Rng rng(31);
  auto x = random_tensor({5, 2}, rng);
  auto w = random_tensor({3, 2, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto y = conv1d_same(Var<double>::constant(x), Var<double>::constant(w), Var<double>::constant(b));
  for (std::size_t l = 0; l < 5; ++l)
    for (std::size_t co = 0; co < 3; ++co) {
      double acc = b.data[co];
      for (int t = -1; t <= 1; ++t) {
        const int src = static_cast<int>(l) + t;
        if (src < 0 || src >= 5) continue;
        for (std::size_t ci = 0; ci < 2; ++ci)
          acc += w.at(co, ci, static_cast<std::size_t>(t + 1)) * x.at(static_cast<std::size_t>(src), ci);
      }
      CHECK(y.value().at(l, co) == doctest::Approx(acc).epsilon(1e-12));
    }
}

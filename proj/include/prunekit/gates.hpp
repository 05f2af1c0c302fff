#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "prunekit/autodiff.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/rng.hpp"
#include "prunekit/tensor.hpp"

// Hard-concrete gates: z = clamp(gamma + s*(eta - gamma), 0, 1) with
// s = Sigmoid((logit(u) + log_alpha) / beta). With the default
// beta=1, gamma=0, eta=1 the clamp is the identity and the distribution
// reduces to the concrete distribution.

namespace prunekit {

struct GateConfig {
  double beta{1.0};
  double gamma{0.0};
  double eta{1.0};
  double init_log_alpha{2.5};

  void validate() const {
    if (beta <= 0.0) throw ConfigError("gate config: beta must be > 0");
    if (gamma > 0.0) throw ConfigError("gate config: gamma must be <= 0");
    if (eta < 1.0) throw ConfigError("gate config: eta must be >= 1");
  }
};

// Learnable masking parameters (log alpha) for one prunable dimension.
template <typename T>
struct GateParam {
  std::string name;
  Var<T> log_alpha;  // [k]
  GateConfig config;

  std::size_t size() const { return log_alpha.value().numel(); }
};

template <typename T>
struct GateSample {
  Tensor<T> u;  // uniform draws, strictly inside (0,1)
  Var<T> s;     // pre-stretch sigmoid output
  Var<T> z;     // final gate values
};

template <typename T>
GateParam<T> make_gate(std::string name, std::size_t extent, const GateConfig& config) {
  config.validate();
  GateParam<T> g;
  g.name = std::move(name);
  g.log_alpha = Var<T>::parameter(Tensor<T>::full({extent}, static_cast<T>(config.init_log_alpha)));
  g.config = config;
  return g;
}

// Uniform draws stay in [kUniformMargin, 1 - kUniformMargin] so logit(u)
// remains finite.
inline constexpr double kUniformMargin = 1e-6;

template <typename T>
GateSample<T> sample_gate_with_u(const GateParam<T>& gate, Tensor<T> u) {
  if (u.numel() != gate.size()) {
    throw ShapeError("sample_gate: u " + shape_str(u.shape) + " vs gate length " +
                     std::to_string(gate.size()));
  }
  Tensor<T> noise(u.shape);
  for (std::size_t i = 0; i < u.numel(); ++i) {
    const double uv = static_cast<double>(u.data[i]);
    if (!(uv > 0.0 && uv < 1.0)) {
      throw NumericError("sample_gate: sampler contract violation, u outside (0,1)");
    }
    noise.data[i] = static_cast<T>(std::log(uv) - std::log1p(-uv));
  }
  GateSample<T> out;
  out.u = std::move(u);
  auto shifted = add(gate.log_alpha, Var<T>::constant(std::move(noise)));
  out.s = sigmoid(scale_const(shifted, static_cast<T>(1.0 / gate.config.beta)));
  out.z = hc_stretch(out.s, static_cast<T>(gate.config.gamma), static_cast<T>(gate.config.eta));
  return out;
}

template <typename T>
GateSample<T> sample_gate(const GateParam<T>& gate, Rng& rng) {
  Tensor<T> u({gate.size()});
  for (auto& v : u.data) v = static_cast<T>(rng.uniform_clamped(kUniformMargin));
  return sample_gate_with_u(gate, std::move(u));
}

// Deterministic per-(seed, step, gate) sample so replicas replay identically.
template <typename T>
GateSample<T> sample_gate_at(const GateParam<T>& gate, std::uint64_t seed, std::uint64_t step) {
  Rng rng = stream_rng(seed, step, gate.name);
  return sample_gate(gate, rng);
}

// Keep probability of each gate element: Sigmoid(log_alpha / beta).
template <typename T>
std::vector<double> keep_probabilities(const GateParam<T>& gate) {
  std::vector<double> p(gate.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double la = static_cast<double>(gate.log_alpha.value().data[i]);
    p[i] = 1.0 / (1.0 + std::exp(-la / gate.config.beta));
  }
  return p;
}

// Inference-time binarization: 1 iff Sigmoid(log_alpha/beta) >= 0.5, i.e. iff
// log_alpha >= 0. Deterministic, no sampling.
template <typename T>
Tensor<T> binarize(const GateParam<T>& gate) {
  Tensor<T> mask({gate.size()});
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    mask.data[i] = gate.log_alpha.value().data[i] >= T(0) ? T(1) : T(0);
  }
  return mask;
}

// Fraction of keep probabilities strictly inside (0.05, 0.95).
template <typename T>
double gate_polarization(const std::vector<const GateParam<T>*>& gates) {
  std::size_t total = 0, undecided = 0;
  for (const GateParam<T>* g : gates) {
    const auto p = keep_probabilities(*g);
    total += p.size();
    for (const double v : p)
      if (v > 0.05 && v < 0.95) ++undecided;
  }
  if (total == 0) throw UsageError("gate_polarization: empty gate set, rate undefined");
  return static_cast<double>(undecided) / static_cast<double>(total);
}

// Closed-form expected L0 gate value Sigmoid(log_alpha - beta*log(-gamma/eta)),
// only defined for a genuine stretch (gamma < 0). Exposed behind the
// reg_mode=expected switch; the sampled form is the default.
template <typename T>
Var<T> expected_gate(const GateParam<T>& gate) {
  if (gate.config.gamma >= 0.0) {
    throw ConfigError("expected_gate: closed-form penalty requires gamma < 0 (got gamma=" +
                      std::to_string(gate.config.gamma) + ")");
  }
  const double shift = gate.config.beta * std::log(-gate.config.gamma / gate.config.eta);
  return sigmoid(add_const(gate.log_alpha, static_cast<T>(-shift)));
}

}  // namespace prunekit

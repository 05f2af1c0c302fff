#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "prunekit/autodiff.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/tensor.hpp"

namespace prunekit {

// Adam with standard defaults (or plain SGD), per-parameter learning rates.
// Weights and gate logits share one optimizer; gate logits get a larger rate.
class Optimizer {
 public:
  Optimizer(bool adam, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : adam_(adam), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void add_param(Var<float> p, double lr) {
    Slot s;
    s.p = std::move(p);
    s.lr = lr;
    if (adam_) {
      s.m = Tensor<float>(s.p.value().shape);
      s.v = Tensor<float>(s.p.value().shape);
    }
    slots_.push_back(std::move(s));
  }

  const std::vector<Var<float>> params() const {
    std::vector<Var<float>> out;
    out.reserve(slots_.size());
    for (const auto& s : slots_) out.push_back(s.p);
    return out;
  }

  bool empty() const { return slots_.empty(); }

  void step(const std::vector<Tensor<float>>& grads) {
    if (grads.size() != slots_.size()) throw UsageError("optimizer: gradient/parameter mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      Slot& s = slots_[i];
      auto& value = s.p.mutable_value().data;
      const auto& g = grads[i].data;
      if (g.size() != value.size()) throw UsageError("optimizer: gradient shape mismatch");
      if (!adam_) {
        for (std::size_t j = 0; j < value.size(); ++j)
          value[j] -= static_cast<float>(s.lr * static_cast<double>(g[j]));
        continue;
      }
      for (std::size_t j = 0; j < value.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        const double m = beta1_ * s.m.data[j] + (1.0 - beta1_) * gj;
        const double v = beta2_ * s.v.data[j] + (1.0 - beta2_) * gj * gj;
        s.m.data[j] = static_cast<float>(m);
        s.v.data[j] = static_cast<float>(v);
        value[j] -= static_cast<float>(s.lr * (m / bc1) / (std::sqrt(v / bc2) + eps_));
      }
    }
  }

 private:
  struct Slot {
    Var<float> p;
    double lr{0};
    Tensor<float> m, v;
  };
  bool adam_;
  double beta1_, beta2_, eps_;
  std::uint64_t t_{0};
  std::vector<Slot> slots_;
};

}  // namespace prunekit

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prunekit/autodiff.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/gates.hpp"
#include "prunekit/tensor.hpp"

// The dependency ledger: every prunable dimension, the gate that masks it,
// and which tensor axes it touches. Tied dimensions (the residual stream d)
// bind the same dimension name everywhere they appear, so all tensors see the
// identical gate vector each step.

namespace prunekit {

struct PrunableDim {
  std::string name;
  std::size_t extent{0};
  bool enabled{true};
};

struct AxisBinding {
  std::size_t axis{0};
  std::string dim;
};

// Whole-tensor multiplier for head membership: the tensor belongs to head
// `index` of dimension `dim` and dies with it.
struct ScalarBinding {
  std::string dim;
  std::size_t index{0};
};

struct TensorBinding {
  std::string tensor;
  std::vector<std::size_t> shape;
  std::vector<AxisBinding> axes;
  std::optional<ScalarBinding> scalar;
};

struct PrunePlan {
  std::vector<PrunableDim> dims;
  std::vector<TensorBinding> bindings;
  double lambda{0};  // total model parameter count

  const PrunableDim* find_dim(const std::string& name) const {
    for (const auto& d : dims)
      if (d.name == name) return &d;
    return nullptr;
  }

  const TensorBinding* find_binding(const std::string& tensor) const {
    for (const auto& b : bindings)
      if (b.tensor == tensor) return &b;
    return nullptr;
  }

  bool dim_enabled(const std::string& name) const {
    const PrunableDim* d = find_dim(name);
    return d != nullptr && d->enabled;
  }

  bool tensor_maskable(const TensorBinding& b) const {
    if (b.scalar && dim_enabled(b.scalar->dim)) return true;
    for (const auto& ab : b.axes)
      if (dim_enabled(ab.dim)) return true;
    return false;
  }

  // Parameters belonging to tensors with at least one enabled gate binding;
  // the reachable mass of the regularizer.
  std::size_t maskable_params() const {
    std::size_t n = 0;
    for (const auto& b : bindings)
      if (tensor_maskable(b)) n += numel_of(b.shape);
    return n;
  }
};

// Per-dimension gate values for one training step (sampled z, frozen binary
// masks, or forced values in tests), keyed by dimension name.
template <typename T>
using MaskMap = std::map<std::string, Var<T>>;

// One gate per plan dimension, in plan order. Disabled dimensions carry a
// gate too (so checkpoints round-trip) but never sample, train, or regularize.
template <typename T>
struct GateSet {
  std::vector<GateParam<T>> gates;

  GateParam<T>* find(const std::string& name) {
    for (auto& g : gates)
      if (g.name == name) return &g;
    return nullptr;
  }
  const GateParam<T>* find(const std::string& name) const {
    for (const auto& g : gates)
      if (g.name == name) return &g;
    return nullptr;
  }
};

template <typename T>
GateSet<T> make_gate_set(const PrunePlan& plan, const GateConfig& config) {
  GateSet<T> set;
  set.gates.reserve(plan.dims.size());
  for (const auto& d : plan.dims) set.gates.push_back(make_gate<T>(d.name, d.extent, config));
  return set;
}

// One shared u per gate per training step: a dimension is one object and its
// mask must be consistent across every tensor it touches.
template <typename T>
MaskMap<T> sample_all(const GateSet<T>& set, const PrunePlan& plan, std::uint64_t seed,
                      std::uint64_t step) {
  MaskMap<T> masks;
  for (const auto& g : set.gates) {
    if (!plan.dim_enabled(g.name)) continue;
    masks.emplace(g.name, sample_gate_at(g, seed, step).z);
  }
  return masks;
}

// Frozen binary masks (constants: no gradient flows to log_alpha).
template <typename T>
MaskMap<T> frozen_binary_masks(const GateSet<T>& set, const PrunePlan& plan) {
  MaskMap<T> masks;
  for (const auto& g : set.gates) {
    if (!plan.dim_enabled(g.name)) continue;
    masks.emplace(g.name, Var<T>::constant(binarize(g)));
  }
  return masks;
}

// All-ones masks; used to force gates on for density bookkeeping checks.
template <typename T>
MaskMap<T> all_ones_masks(const PrunePlan& plan) {
  MaskMap<T> masks;
  for (const auto& d : plan.dims) {
    if (!d.enabled) continue;
    masks.emplace(d.name, Var<T>::constant(Tensor<T>::full({d.extent}, T(1))));
  }
  return masks;
}

template <typename T>
std::vector<Var<T>> trainable_gate_logits(GateSet<T>& set, const PrunePlan& plan) {
  std::vector<Var<T>> out;
  for (auto& g : set.gates)
    if (plan.dim_enabled(g.name)) out.push_back(g.log_alpha);
  return out;
}

template <typename T>
double enabled_polarization(const GateSet<T>& set, const PrunePlan& plan) {
  std::vector<const GateParam<T>*> enabled;
  for (const auto& g : set.gates)
    if (plan.dim_enabled(g.name)) enabled.push_back(&g);
  return gate_polarization(enabled);
}

namespace detail {

template <typename T>
const Var<T>& mask_for(const MaskMap<T>& masks, const std::string& dim) {
  const auto it = masks.find(dim);
  if (it == masks.end()) {
    throw UsageError("missing gate sample for dimension '" + dim + "' required by the plan");
  }
  return it->second;
}

}  // namespace detail

// Outer-product mask for one tensor: axes without a gate (or with a disabled
// one) contribute all-ones. The head-membership scalar is *not* folded in
// here; it multiplies the head's output path instead.
template <typename T>
Var<T> compose_mask(const TensorBinding& binding, const PrunePlan& plan, const MaskMap<T>& masks) {
  Var<T> m = Var<T>::constant(Tensor<T>::full(binding.shape, T(1)));
  for (const auto& ab : binding.axes) {
    if (!plan.dim_enabled(ab.dim)) continue;
    const Var<T>& z = detail::mask_for(masks, ab.dim);
    if (ab.axis >= binding.shape.size() || z.value().numel() != binding.shape[ab.axis]) {
      throw ShapeError("compose_mask: gate '" + ab.dim + "' " + shape_str(z.value().shape) +
                       " vs axis " + std::to_string(ab.axis) + " of " + shape_str(binding.shape));
    }
    m = scale_axis(m, z, ab.axis);
  }
  return m;
}

// W' = W (.) z for one tensor, built as successive axis scalings (numerically
// identical to multiplying by the composed outer-product mask).
template <typename T>
Var<T> apply_mask(const Var<T>& param, const TensorBinding& binding, const PrunePlan& plan,
                  const MaskMap<T>& masks) {
  Var<T> out = param;
  for (const auto& ab : binding.axes) {
    if (!plan.dim_enabled(ab.dim)) continue;
    out = scale_axis(out, detail::mask_for(masks, ab.dim), ab.axis);
  }
  return out;
}

// Regularizer: sum over composed per-tensor masks of their L1 norm.
// All gate values are nonnegative, so each tensor's term factorizes into a
// product of per-axis sums; the head-membership scalar multiplies the whole
// term. Tensors with no enabled binding contribute nothing.
template <typename T>
Var<T> mask_l1(const PrunePlan& plan, const MaskMap<T>& masks) {
  Var<T> total = Var<T>::constant(Tensor<T>::scalar(T(0)));
  for (const auto& b : plan.bindings) {
    if (!plan.tensor_maskable(b)) continue;
    Var<T> term;
    T const_factor = T(1);
    if (b.scalar && plan.dim_enabled(b.scalar->dim)) {
      term = element(detail::mask_for(masks, b.scalar->dim), b.scalar->index);
    }
    std::vector<bool> bound(b.shape.size(), false);
    for (const auto& ab : b.axes) {
      bound[ab.axis] = true;
      if (!plan.dim_enabled(ab.dim)) {
        const_factor *= static_cast<T>(b.shape[ab.axis]);
        continue;
      }
      auto axis_sum = sum(detail::mask_for(masks, ab.dim));
      term = term.defined() ? mul(term, axis_sum) : axis_sum;
    }
    for (std::size_t a = 0; a < b.shape.size(); ++a)
      if (!bound[a]) const_factor *= static_cast<T>(b.shape[a]);
    total = add(total, scale_const(term, const_factor));
  }
  return total;
}

}  // namespace prunekit

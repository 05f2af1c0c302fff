#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "prunekit/errors.hpp"
#include "prunekit/model.hpp"
#include "prunekit/plan.hpp"
#include "prunekit/rng.hpp"

// Binarize gates, physically delete pruned channels and heads, and account
// sparsity/compression. compact() and sparsity_of() share one gate
// finalization path so their surviving-parameter counts agree exactly.

namespace prunekit {

struct DimOutcome {
  std::string name;
  std::size_t kept{0};
  std::size_t total{0};
  bool rescued{false};  // all-zero dimension kept alive by the min-1 rule
};

struct CompactionReport {
  std::vector<DimOutcome> dims;
  std::size_t params_before{0};
  std::size_t params_after{0};
  std::size_t maskable_before{0};  // parameters reachable by enabled gates;
                                   // lets either sparsity convention be derived
  double sparsity_pct{0};          // denominator: all parameters (lambda)
  double ratio{1.0};
  double max_residual{0};  // masked vs compacted forward on probe inputs
  std::vector<std::string> rescued;
};

template <typename T>
struct BinaryGates {
  // Finalized binary vector per enabled dimension (after min-1 rescue).
  std::map<std::string, Tensor<T>> by_dim;
  std::vector<std::string> rescued;

  bool kept(const std::string& dim, std::size_t i) const {
    const auto it = by_dim.find(dim);
    if (it == by_dim.end()) return true;  // disabled dims keep everything
    return it->second.data[i] != T(0);
  }
  std::size_t kept_count(const std::string& dim, std::size_t extent) const {
    const auto it = by_dim.find(dim);
    if (it == by_dim.end()) return extent;
    std::size_t n = 0;
    for (const T v : it->second.data) n += (v != T(0));
    return n;
  }
  std::vector<std::size_t> kept_indices(const std::string& dim, std::size_t extent) const {
    std::vector<std::size_t> idx;
    const auto it = by_dim.find(dim);
    if (it == by_dim.end()) {
      for (std::size_t i = 0; i < extent; ++i) idx.push_back(i);
      return idx;
    }
    for (std::size_t i = 0; i < it->second.numel(); ++i)
      if (it->second.data[i] != T(0)) idx.push_back(i);
    return idx;
  }
};

// A dimension is live if at least one tensor bound to it survives the head
// gates; dead dims vanish from the compacted artifact with their gates.
template <typename T>
bool dim_is_live(const PrunePlan& plan, const BinaryGates<T>& binary, const std::string& name) {
  if (name.find(".head_count") != std::string::npos) return true;
  for (const auto& b : plan.bindings) {
    for (const auto& ab : b.axes) {
      if (ab.dim != name) continue;
      if (b.scalar && plan.dim_enabled(b.scalar->dim) && !binary.kept(b.scalar->dim, b.scalar->index)) {
        continue;
      }
      return true;
    }
  }
  return false;
}

// Polarization over the gates that survive in the artifact: gates of live,
// enabled dimensions. Gates frozen mid-band inside a dropped head are not
// part of the pruned model and do not count.
template <typename T>
double live_polarization(const GateSet<T>& gates, const PrunePlan& plan,
                         const BinaryGates<T>& binary) {
  std::vector<const GateParam<T>*> live;
  for (const auto& d : plan.dims) {
    if (!d.enabled || !dim_is_live(plan, binary, d.name)) continue;
    live.push_back(gates.find(d.name));
  }
  return gate_polarization(live);
}

// Threshold binarization plus the min-1 rule: a live dimension binarized to all
// zeros keeps its single largest-logit index. Dimensions whose tensors die
// with a dropped head are left as-is; they vanish from the compacted model.
template <typename T>
BinaryGates<T> finalize_binary_gates(const PrunePlan& plan, const GateSet<T>& gates) {
  BinaryGates<T> out;
  auto rescue = [&](const std::string& name, Tensor<T>& mask, const GateParam<T>& g) {
    bool any = false;
    for (const T v : mask.data) any = any || v != T(0);
    if (any) return;
    std::size_t best = 0;
    for (std::size_t i = 1; i < mask.numel(); ++i)
      if (g.log_alpha.value().data[i] > g.log_alpha.value().data[best]) best = i;
    mask.data[best] = T(1);
    out.rescued.push_back(name);
  };

  // Head-membership dims first; they decide which other dims stay live.
  for (const auto& d : plan.dims) {
    if (!d.enabled) continue;
    const GateParam<T>* g = gates.find(d.name);
    if (!g) throw UsageError("finalize_binary_gates: no gate for dimension '" + d.name + "'");
    Tensor<T> mask = binarize(*g);
    const bool is_head_dim = d.name.find(".head_count") != std::string::npos;
    if (is_head_dim) rescue(d.name, mask, *g);
    out.by_dim.emplace(d.name, std::move(mask));
  }
  for (const auto& d : plan.dims) {
    if (!d.enabled) continue;
    if (d.name.find(".head_count") != std::string::npos) continue;
    if (dim_is_live(plan, out, d.name)) rescue(d.name, out.by_dim.at(d.name), *gates.find(d.name));
  }
  return out;
}

template <typename T>
MaskMap<T> binary_mask_map(const BinaryGates<T>& binary) {
  MaskMap<T> masks;
  for (const auto& [name, mask] : binary.by_dim) masks.emplace(name, Var<T>::constant(mask));
  return masks;
}

// Closed-form surviving-parameter count; agrees with compact() exactly.
template <typename T>
std::size_t surviving_params(const PrunePlan& plan, const BinaryGates<T>& binary) {
  std::size_t total = 0;
  for (const auto& b : plan.bindings) {
    if (b.scalar && plan.dim_enabled(b.scalar->dim) && !binary.kept(b.scalar->dim, b.scalar->index)) {
      continue;
    }
    std::size_t n = 1;
    std::vector<bool> bound(b.shape.size(), false);
    for (const auto& ab : b.axes) {
      bound[ab.axis] = true;
      n *= plan.dim_enabled(ab.dim) ? binary.kept_count(ab.dim, b.shape[ab.axis]) : b.shape[ab.axis];
    }
    for (std::size_t a = 0; a < b.shape.size(); ++a)
      if (!bound[a]) n *= b.shape[a];
    total += n;
  }
  return total;
}

template <typename T>
double sparsity_of(const PrunePlan& plan, const BinaryGates<T>& binary) {
  const double after = static_cast<double>(surviving_params(plan, binary));
  return 100.0 * (1.0 - after / plan.lambda);
}

namespace detail {

template <typename T>
Tensor<T> slice_axis(const Tensor<T>& t, std::size_t axis, const std::vector<std::size_t>& keep) {
  std::vector<std::size_t> out_shape = t.shape;
  out_shape[axis] = keep.size();
  Tensor<T> out(out_shape);
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < t.shape.size(); ++a) inner *= t.shape[a];
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= t.shape[a];
  const std::size_t old_extent = t.shape[axis];
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < keep.size(); ++k)
      for (std::size_t i = 0; i < inner; ++i)
        out.data[(o * keep.size() + k) * inner + i] = t.data[(o * old_extent + keep[k]) * inner + i];
  return out;
}

template <typename T>
Var<T> slice_param(const Var<T>& p, std::initializer_list<std::pair<std::size_t, const std::vector<std::size_t>*>> slices) {
  Tensor<T> t = p.value();
  for (const auto& [axis, keep] : slices) {
    if (keep->size() != t.shape[axis]) t = slice_axis(t, axis, *keep);
  }
  return Var<T>::parameter(std::move(t));
}

}  // namespace detail

template <typename T>
struct CompactionResult {
  Model<T> model;
  PrunePlan plan;
  GateSet<T> gates;
  CompactionReport report;
};

// Physically delete pruned channels and heads: the
// surviving parts of each tensor are concatenated into smaller matrices, and
// heads with gate 0 are removed with all four of their matrices. Gate logits
// of surviving indices carry over; dropped heads' gates are dropped with them.
template <typename T>
CompactionResult<T> compact(const Model<T>& m, const PrunePlan& plan, const GateSet<T>& gates,
                            std::size_t probe_inputs = 10, std::uint64_t probe_seed = 20240) {
  const BinaryGates<T> binary = finalize_binary_gates(plan, gates);

  auto keep_of = [&](const std::string& dim, std::size_t extent) {
    return binary.kept_indices(dim, extent);
  };
  const bool d_enabled = plan.dim_enabled("model_d");
  const std::vector<std::size_t> keep_d = keep_of("model_d", m.config.d);

  CompactionResult<T> res;
  Model<T>& out = res.model;
  out.config = m.config;
  out.config.d = keep_d.size();
  out.attn_scale = m.attn_scale;

  out.token_embedding = detail::slice_param(m.token_embedding, {{1, &keep_d}});
  out.speaker_embedding = detail::slice_param(m.speaker_embedding, {{1, &keep_d}});
  out.positional = d_enabled ? detail::slice_axis(m.positional, 1, keep_d) : m.positional;

  // Heads are renumbered densely after removal; remember where each surviving
  // dimension came from so its gate logits can be carried over.
  std::map<std::string, std::string> dim_origin;
  auto compact_stack = [&](const char* stack, const std::vector<BlockParams<T>>& blocks) {
    std::vector<BlockParams<T>> out_blocks;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = std::string(stack) + std::to_string(i);
      const auto& b = blocks[i];
      BlockParams<T> nb;
      for (std::size_t h = 0; h < b.heads.size(); ++h) {
        if (!binary.kept(p + ".head_count", h)) continue;
        dim_origin.emplace(p + ".h" + std::to_string(nb.heads.size()) + ".head_dk",
                           p + ".h" + std::to_string(h) + ".head_dk");
        const std::string dk = p + ".h" + std::to_string(h) + ".head_dk";
        const auto keep_k = keep_of(dk, b.heads[h].wq.value().shape[1]);
        AttentionHead<T> nh;
        nh.wq = detail::slice_param(b.heads[h].wq, {{0, &keep_d}, {1, &keep_k}});
        nh.bq = detail::slice_param(b.heads[h].bq, {{0, &keep_k}});
        nh.wk = detail::slice_param(b.heads[h].wk, {{0, &keep_d}, {1, &keep_k}});
        nh.bk = detail::slice_param(b.heads[h].bk, {{0, &keep_k}});
        nh.wv = detail::slice_param(b.heads[h].wv, {{0, &keep_d}, {1, &keep_k}});
        nh.bv = detail::slice_param(b.heads[h].bv, {{0, &keep_k}});
        nh.wo = detail::slice_param(b.heads[h].wo, {{0, &keep_k}, {1, &keep_d}});
        nb.heads.push_back(std::move(nh));
      }
      nb.attn_bias = detail::slice_param(b.attn_bias, {{0, &keep_d}});
      nb.ln1_scale = detail::slice_param(b.ln1_scale, {{0, &keep_d}});
      nb.ln1_shift = detail::slice_param(b.ln1_shift, {{0, &keep_d}});
      nb.ln2_scale = detail::slice_param(b.ln2_scale, {{0, &keep_d}});
      nb.ln2_shift = detail::slice_param(b.ln2_shift, {{0, &keep_d}});
      const auto keep_f = keep_of(p + ".ffn_df", b.ffn_up_w.value().shape[1]);
      nb.ffn_up_w = detail::slice_param(b.ffn_up_w, {{0, &keep_d}, {1, &keep_f}});
      nb.ffn_up_b = detail::slice_param(b.ffn_up_b, {{0, &keep_f}});
      nb.ffn_down_w = detail::slice_param(b.ffn_down_w, {{0, &keep_f}, {1, &keep_d}});
      nb.ffn_down_b = detail::slice_param(b.ffn_down_b, {{0, &keep_d}});
      out_blocks.push_back(std::move(nb));
    }
    return out_blocks;
  };
  out.encoder = compact_stack("enc", m.encoder);
  out.decoder = compact_stack("dec", m.decoder);

  const auto keep_a = keep_of("adaptor_hidden", m.adaptor_w1.value().shape[0]);
  out.adaptor_w1 = detail::slice_param(m.adaptor_w1, {{0, &keep_a}, {1, &keep_d}});
  out.adaptor_b1 = detail::slice_param(m.adaptor_b1, {{0, &keep_a}});
  out.adaptor_w2 = detail::slice_param(m.adaptor_w2, {{1, &keep_a}});
  out.adaptor_b2 = Var<T>::parameter(m.adaptor_b2.value());
  out.aux_proj = detail::slice_param(m.aux_proj, {{1, &keep_d}});
  out.out_w = detail::slice_param(m.out_w, {{0, &keep_d}});
  out.out_b = Var<T>::parameter(m.out_b.value());
  const auto keep_p = keep_of("postnet_hidden", m.postnet_w1.value().shape[0]);
  out.postnet_w1 = detail::slice_param(m.postnet_w1, {{0, &keep_p}});
  out.postnet_b1 = detail::slice_param(m.postnet_b1, {{0, &keep_p}});
  out.postnet_w2 = detail::slice_param(m.postnet_w2, {{1, &keep_p}});
  out.postnet_b2 = Var<T>::parameter(m.postnet_b2.value());
  out.config.adaptor_hidden = keep_a.size();
  out.config.postnet_hidden = keep_p.size();

  res.plan = build_plan(out, d_enabled);
  res.gates = make_gate_set<T>(res.plan, gates.gates.empty() ? GateConfig{} : gates.gates.front().config);
  // Carry surviving logits over so a second compaction reproduces this one.
  for (auto& g : res.gates.gates) {
    const auto origin_it = dim_origin.find(g.name);
    const std::string old_name = origin_it != dim_origin.end() ? origin_it->second : g.name;
    const GateParam<T>* old_gate = gates.find(old_name);
    const PrunableDim* old_dim = nullptr;
    for (const auto& dd : plan.dims)
      if (dd.name == old_name) old_dim = &dd;
    if (!old_gate || !old_dim) continue;
    const auto keep = keep_of(old_name, old_dim->extent);
    if (keep.size() != g.size()) continue;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      g.log_alpha.mutable_value().data[i] = old_gate->log_alpha.value().data[keep[i]];
    }
  }

  CompactionReport& rep = res.report;
  rep.params_before = m.param_count();
  rep.params_after = out.param_count();
  rep.maskable_before = plan.maskable_params();
  rep.sparsity_pct = 100.0 * (1.0 - static_cast<double>(rep.params_after) / static_cast<double>(rep.params_before));
  rep.ratio = static_cast<double>(rep.params_before) / static_cast<double>(rep.params_after);
  rep.rescued = binary.rescued;
  for (const auto& d : plan.dims) {
    if (!d.enabled) continue;
    DimOutcome outcome;
    outcome.name = d.name;
    outcome.total = d.extent;
    outcome.kept = binary.kept_count(d.name, d.extent);
    outcome.rescued = std::find(binary.rescued.begin(), binary.rescued.end(), d.name) != binary.rescued.end();
    // Dims that die with a dropped head keep nothing.
    if (!dim_is_live(plan, binary, d.name)) outcome.kept = 0;
    rep.dims.push_back(outcome);
  }

  // Equivalence probes: masked forward on the original vs the compacted model.
  const MaskMap<T> masks = binary_mask_map(binary);
  Rng rng(probe_seed);
  for (std::size_t probe = 0; probe < probe_inputs; ++probe) {
    const std::size_t L = 4 + rng.below(m.config.max_len > 8 ? m.config.max_len - 8 : 4);
    std::vector<std::size_t> tokens(L);
    for (auto& t : tokens) t = rng.below(m.config.vocab_size);
    const std::size_t speaker = rng.below(m.config.n_speakers);
    ParamView<T> masked_view(m, plan, masks);
    auto a = forward(m, tokens, speaker, masked_view);
    auto b = forward(out, tokens, speaker);
    auto residual = [&](const Var<T>& x, const Var<T>& y) {
      double r = 0;
      for (std::size_t i = 0; i < x.value().numel(); ++i) {
        r = std::max(r, std::fabs(static_cast<double>(x.value().data[i]) -
                                  static_cast<double>(y.value().data[i])));
      }
      return r;
    };
    rep.max_residual = std::max({rep.max_residual, residual(a.mel_before, b.mel_before),
                                 residual(a.mel_after, b.mel_after), residual(a.aux, b.aux)});
  }
  return res;
}

}  // namespace prunekit

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "prunekit/autodiff.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/model.hpp"
#include "prunekit/plan.hpp"

namespace prunekit {

// Total-loss bookkeeping. Fields are accumulated in double regardless of the
// training precision so the identity l_total = l_tts + multiplier*l_reg/lambda
// holds to full double accuracy in logs and reports.
struct LossBreakdown {
  double l_tts{0};
  double l_reg{0};
  double lambda{0};
  double l_total{0};
  double density{0};  // l_reg / lambda
};

struct LossOptions {
  bool reg_enabled{false};
  double reg_multiplier{1.0};
  double aux_weight{0.1};
};

template <typename T>
struct BatchItem {
  std::vector<std::size_t> tokens;
  Tensor<T> mel;  // L x n_mel target
  Tensor<T> aux;  // L x 1 target
  std::size_t speaker{0};
};

// L_TTS of one item: mse(mel_before) + mse(mel_after) + aux_weight * mse(aux).
template <typename T>
Var<T> tts_loss_item(const Model<T>& m, const ParamView<T>& view, const BatchItem<T>& item,
                     double aux_weight) {
  auto out = forward(m, item.tokens, item.speaker, view);
  auto loss = add(mse(out.mel_before, Var<T>::constant(item.mel)),
                  mse(out.mel_after, Var<T>::constant(item.mel)));
  return add(loss, scale_const(mse(out.aux, Var<T>::constant(item.aux)), static_cast<T>(aux_weight)));
}

template <typename T>
struct LossResult {
  Var<T> total;  // graph node driving gradients
  LossBreakdown breakdown;
};

// L_total = L_TTS + multiplier * (1/lambda) * L_reg over one batch. The
// regularizer is evaluated once per step (it does not depend on the batch).
template <typename T>
LossResult<T> total_loss(const Model<T>& m, const PrunePlan& plan, const ParamView<T>& view,
                         const std::vector<BatchItem<T>>& batch, const MaskMap<T>* reg_masks,
                         const LossOptions& opts) {
  if (batch.empty()) throw UsageError("total_loss: empty batch");
  Var<T> tts;
  for (const auto& item : batch) {
    auto li = tts_loss_item(m, view, item, opts.aux_weight);
    tts = tts.defined() ? add(tts, li) : li;
  }
  tts = scale_const(tts, static_cast<T>(1.0 / static_cast<double>(batch.size())));

  LossResult<T> res;
  res.breakdown.lambda = plan.lambda;
  res.breakdown.l_tts = static_cast<double>(tts.value().data[0]);
  if (opts.reg_enabled) {
    if (!reg_masks) throw UsageError("total_loss: reg enabled but no gate values supplied");
    auto reg = mask_l1(plan, *reg_masks);
    res.breakdown.l_reg = static_cast<double>(reg.value().data[0]);
    res.total = add(tts, scale_const(reg, static_cast<T>(opts.reg_multiplier / plan.lambda)));
  } else {
    res.total = tts;
  }
  res.breakdown.l_total =
      res.breakdown.l_tts + opts.reg_multiplier * res.breakdown.l_reg / res.breakdown.lambda;
  res.breakdown.density = res.breakdown.l_reg / res.breakdown.lambda;
  if (!std::isfinite(res.breakdown.l_total)) {
    throw NumericError("total_loss: non-finite loss");
  }
  return res;
}

}  // namespace prunekit

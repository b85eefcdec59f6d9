#pragma once

#include "asvit/config.hpp"
#include "asvit/ops.hpp"

namespace asvit {

/// |mean(batch_flops) / dense - target_fraction|. Costs are compared as fractions of the dense
/// model so the loss weight means the same thing at every model size.
template <class T>
Var<T> budget_loss(const Var<T>& batch_flops, double dense_flops, double target_fraction) {
  if (!(target_fraction > 0)) throw ContractError("budget_loss: target must be positive");
  auto frac = scale(mean(batch_flops), static_cast<T>(1.0 / dense_flops));
  return abs(add_scalar(frac, static_cast<T>(-target_fraction)));
}

/// KL divergence between student and (detached) teacher predictions, batch mean.
template <class T>
Var<T> distill_loss(const Var<T>& student_logits, const Var<T>& teacher_logits,
                    KlDirection dir = KlDirection::TeacherStudent) {
  return kl_div(student_logits, detach(teacher_logits), dir);
}

/// ce + lambda_flops * flops + lambda_distill * distill. Undefined terms are skipped.
template <class T>
Var<T> total_loss(const Var<T>& ce, const Var<T>& flops_term, const Var<T>& distill_term, const TrainConfig& cfg) {
  Var<T> total = ce;
  if (flops_term.defined() && cfg.lambda_flops != 0)
    total = add(total, scale(flops_term, static_cast<T>(cfg.lambda_flops)));
  if (distill_term.defined() && cfg.lambda_distill != 0)
    total = add(total, scale(distill_term, static_cast<T>(cfg.lambda_distill)));
  return total;
}

}  // namespace asvit

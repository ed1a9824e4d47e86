#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "c2f/autograd.hpp"
#include "c2f/decoder.hpp"

namespace c2f {

struct LossConfig {
  double lambda1 = 5e-2;
  double lambda2 = 5e-2;
  double margin = 0.2;           // horizontal, on p_hat
  double vertical_margin = 0.2;  // per class, across steps of Q

  void validate() const {
    if (!(lambda1 >= 0.0 && lambda2 >= 0.0)) throw std::invalid_argument("LossConfig: lambdas must be nonnegative");
    if (!(margin >= 0.0 && margin <= 1.0 && vertical_margin >= 0.0 && vertical_margin <= 1.0))
      throw std::invalid_argument("LossConfig: margins must lie in [0, 1]");
  }
};

inline constexpr double kProbClamp = 1e-12;

/// -(1/C) sum_j [y_j log p_j + (1 - y_j) log(1 - p_j)], probabilities clamped
/// to [1e-12, 1 - 1e-12].
inline Var bce(Tape& tape, Var p_hat, const LabelSet& labels) {
  const std::size_t c = labels.classes();
  if (p_hat.size() != c)
    throw ShapeError("bce: " + std::to_string(p_hat.size()) + " predictions for " + std::to_string(c) + " labels");
  Var p = reshape(p_hat, {c});
  Tensor y({c}), not_y({c}), ones({c}, 1.0);
  for (std::size_t j = 0; j < c; ++j) {
    y[j] = labels.y[j];
    not_y[j] = 1.0 - labels.y[j];
  }
  Var pos = clamp(p, kProbClamp, 1.0 - kProbClamp);
  Var neg = clamp(add(scale(p, -1.0), tape.constant(std::move(ones))), kProbClamp, 1.0 - kProbClamp);
  Var ll = add(mul(tape.constant(std::move(y)), log(pos)), mul(tape.constant(std::move(not_y)), log(neg)));
  return scale(sum(ll, 0), -1.0 / static_cast<double>(c));
}

/// max(max_neg(p) - min_pos(p) + eps, 0); zero for label sets without both
/// a positive and a negative class.
inline Var horizontal_margin(Tape& tape, Var p_hat, const LabelSet& labels, double eps) {
  const std::size_t c = labels.classes();
  if (p_hat.size() != c) throw ShapeError("horizontal_margin: prediction/label length mismatch");
  std::vector<std::size_t> pos, neg;
  for (std::size_t j = 0; j < c; ++j) (labels.y[j] ? pos : neg).push_back(j);
  if (pos.empty() || neg.empty()) return tape.scalar(0.0);
  Var min_pos = scale(max(scale(gather(p_hat, pos), -1.0), 0), -1.0);
  Var max_neg = max(gather(p_hat, neg), 0);
  return hinge(add(sub(max_neg, min_pos), tape.scalar(eps)));
}

/// Sum over positive classes j of max(max_{t != t_j} Q[t, j] - Q[t_j, j] + eps, 0),
/// where t_j is j's position in the step targets.
inline Var vertical_margin(Tape& tape, Var q, const LabelSet& labels, double eps) {
  labels.validate();
  if (q.value().rank() != 2 || q.shape()[1] != labels.classes())
    throw ShapeError("vertical_margin: Q shape " + to_string(q.shape()) + " vs " +
                     std::to_string(labels.classes()) + " classes");
  const std::size_t steps = q.shape()[0], c = q.shape()[1];
  if (labels.step_targets.size() > steps)
    throw std::invalid_argument("vertical_margin: more step targets than steps");
  if (steps == 1) return tape.scalar(0.0);
  std::vector<Var> terms;
  for (std::size_t t_j = 0; t_j < labels.step_targets.size(); ++t_j) {
    const std::size_t j = labels.step_targets[t_j];
    std::vector<std::size_t> others;
    for (std::size_t t = 0; t < steps; ++t)
      if (t != t_j) others.push_back(t * c + j);
    Var own = gather(q, {t_j * c + j});
    terms.push_back(hinge(add(sub(max(gather(q, std::move(others)), 0), reshape(own, {})), tape.scalar(eps))));
  }
  if (terms.empty()) return tape.scalar(0.0);
  std::vector<Var> flat;
  for (Var v : terms) flat.push_back(reshape(v, {1}));
  return sum(concat(flat), 0);
}

struct LossTerms {
  Var total;
  Var bce;
  Var r1;
  Var r2;
};

/// bce + lambda1 * R1-term + lambda2 * R2-term for one sample.
inline LossTerms total_loss(Tape& tape, Var q, Var p_hat, const LabelSet& labels, const LossConfig& cfg) {
  cfg.validate();
  LossTerms terms;
  terms.bce = bce(tape, p_hat, labels);
  terms.r1 = horizontal_margin(tape, p_hat, labels, cfg.margin);
  terms.r2 = vertical_margin(tape, q, labels, cfg.vertical_margin);
  terms.total = terms.bce;
  if (cfg.lambda1 != 0.0) terms.total = add(terms.total, scale(terms.r1, cfg.lambda1));
  if (cfg.lambda2 != 0.0) terms.total = add(terms.total, scale(terms.r2, cfg.lambda2));
  return terms;
}

/// One sample's share of the batch objective: the cross-entropy averaged over
/// the batch, the margin terms summed over it.
inline Var batch_share(const LossTerms& terms, std::size_t batch_size, const LossConfig& cfg) {
  Var share = scale(terms.bce, 1.0 / static_cast<double>(batch_size));
  if (cfg.lambda1 != 0.0) share = add(share, scale(terms.r1, cfg.lambda1));
  if (cfg.lambda2 != 0.0) share = add(share, scale(terms.r2, cfg.lambda2));
  return share;
}

}  // namespace c2f

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "c2f/autograd.hpp"

namespace c2f {

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t nonsmooth = 0;  // elements whose probe crossed a max/hinge/clamp branch
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  double max_rel_error = 0.0;
  std::size_t nonsmooth_points = 0;
  bool passed = true;
};

/// Builds a scalar loss on the given tape. It must read the checked
/// parameters through `tape.param(...)` so perturbations are visible.
using LossBuilder = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients with central differences.
///
/// Relative error for one element is |analytic - numeric| / max(|analytic|,
/// |numeric|, floor). Probes whose +/- evaluations take a different branch
/// of any max, hinge or clamp than the base evaluation sit on a non-smooth
/// point; they are counted and excluded.
inline GradCheckReport grad_check(const LossBuilder& f, const std::vector<NamedParam>& params, double step,
                                  double tol, double floor = 1e-6) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

  for (const auto& p : params) p.tensor->zero_grad();
  double base = 0.0;
  std::uint64_t base_signature = 0;
  {
    Tape tape;
    Var loss = f(tape);
    base = loss.item();
    if (!std::isfinite(base)) throw std::domain_error("grad_check: loss is not finite");
    base_signature = tape.branch_signature();
    backward(tape, loss);
  }

  auto probe = [&](std::uint64_t& signature) {
    Tape tape(false);
    Var loss = f(tape);
    const double v = loss.item();
    if (!std::isfinite(v)) throw std::domain_error("grad_check: loss is not finite under perturbation");
    signature = tape.branch_signature();
    return v;
  };

  GradCheckReport report;
  for (const auto& p : params) {
    GradCheckEntry entry{p.name};
    const std::vector<double> analytic = p.tensor->has_grad() ? p.tensor->grad : std::vector<double>(p.tensor->size(), 0.0);
    for (std::size_t i = 0; i < p.tensor->size(); ++i) {
      double& x = p.tensor->values[i];
      const double orig = x;
      std::uint64_t sig_plus = 0, sig_minus = 0;
      x = orig + step;
      const double fp = probe(sig_plus);
      x = orig - step;
      const double fm = probe(sig_minus);
      x = orig;
      if (sig_plus != base_signature || sig_minus != base_signature) {
        ++entry.nonsmooth;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++entry.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.nonsmooth_points += entry.nonsmooth;
    report.params.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace c2f

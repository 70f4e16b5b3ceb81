#pragma once

#include <cmath>
#include <optional>
#include <utility>

#include "olv/common.hpp"

namespace olv {

// Truncated Gaussian bump centered at t_rel, clamped to [0, 1]. The 4/(sqrt(2pi)*sigma)
// peak factor exceeds 1 for sigma < 4/sqrt(2pi), hence the clamp. Absent event
// (nullopt) yields the all-zero vector.
inline VecD smooth_labels(std::optional<int> t_rel, int l_ws, double sigma,
                          int halfwidth = 3) {
  VecD y = VecD::Zero(l_ws);
  if (!t_rel.has_value()) return y;
  const double peak = 4.0 / (std::sqrt(2.0 * M_PI) * sigma);
  for (int i = 0; i < l_ws; ++i) {
    const int off = i - *t_rel;
    if (off < -halfwidth || off > halfwidth) continue;
    const double v = peak * std::exp(-static_cast<double>(off) * off / (2.0 * sigma * sigma));
    y[i] = std::min(1.0, std::max(0.0, v));
  }
  return y;
}

// Window-relative target for a window anchored at t. The event counts as
// contained only when strictly interior: t < t_event < t + l_ws. Offsets
// outside [0, l_ws) are dropped by construction. With smoothing disabled the
// target is the hard one-hot vector.
inline std::pair<VecD, bool> make_target(int t, int l_ws, std::optional<int> t_event,
                                         double sigma, int halfwidth = 3,
                                         bool use_smoothing = true) {
  if (!t_event.has_value() || !(*t_event > t && *t_event < t + l_ws))
    return {VecD::Zero(l_ws), false};
  const int t_rel = *t_event - t;
  if (!use_smoothing) {
    VecD y = VecD::Zero(l_ws);
    y[t_rel] = 1.0;
    return {y, true};
  }
  return {smooth_labels(t_rel, l_ws, sigma, halfwidth), true};
}

// Mean per-position binary cross entropy against the soft target, plus the
// weighted auxiliary BCE of the window-level event probability. Scores must
// already be sigmoid outputs in (0, 1).
template <typename S>
inline double bce_loss(const VecX<S>& scores, const VecD& target,
                       std::optional<double> aux_prob, bool contains_event,
                       double aux_weight) {
  const int n = static_cast<int>(scores.size());
  if (n != static_cast<int>(target.size()))
    throw Error(ErrorKind::Eval, "scores/target length mismatch");
  constexpr double kEps = 1e-12;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double s = std::min(1.0 - kEps, std::max(kEps, static_cast<double>(scores[i])));
    const double t = target[i];
    total += -(t * std::log(s) + (1.0 - t) * std::log(1.0 - s));
  }
  double loss = total / static_cast<double>(n);
  if (aux_prob.has_value() && aux_weight > 0.0) {
    const double p = std::min(1.0 - kEps, std::max(kEps, *aux_prob));
    const double t = contains_event ? 1.0 : 0.0;
    loss += aux_weight * -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  return loss;
}

}  // namespace olv

#pragma once

#include <array>
#include <cmath>
#include <map>
#include <utility>
#include <vector>

#include "olv/common.hpp"

namespace olv {

struct EvalReport {
  int n = 0;
  double mae_min = 0.0;
  std::array<double, 5> acc = {0, 0, 0, 0, 0};  // acc[k-1]: |err| <= k minutes
  std::map<int, int> histogram;                 // signed error -> count
};

// MAE, margin accuracies (inclusive |pred - true| <= k) and the signed-error
// histogram over (predicted, true) minute pairs.
inline EvalReport evaluate(const std::vector<std::pair<int, int>>& pairs) {
  if (pairs.empty())
    throw Error(ErrorKind::Eval, "cannot evaluate an empty prediction list");
  EvalReport rep;
  rep.n = static_cast<int>(pairs.size());
  double abs_sum = 0.0;
  std::array<int, 5> within = {0, 0, 0, 0, 0};
  for (const auto& [pred, truth] : pairs) {
    const int err = pred - truth;
    abs_sum += std::abs(err);
    for (int k = 1; k <= 5; ++k)
      if (std::abs(err) <= k) ++within[k - 1];
    ++rep.histogram[err];
  }
  rep.mae_min = abs_sum / rep.n;
  for (int k = 0; k < 5; ++k)
    rep.acc[k] = static_cast<double>(within[k]) / rep.n;
  return rep;
}

template <typename S>
struct Attribution {
  MatX<S> values;               // same shape as the input, signed
  VecD channel_scores;          // per-channel sum of |values|, max-normalized to [0,1]
  double completeness_gap = 0;  // |sum(values) - (F(x) - F(baseline))|
};

// Path-integral attribution from baseline to input, trapezoid rule. The
// scorer is any differentiable functional exposing value + input gradient:
//   f(x) -> std::pair<double, MatX<S>>.
template <typename S, typename Scorer>
Attribution<S> integrated_gradients(Scorer&& f, const MatX<S>& x, const MatX<S>& baseline,
                                    int steps) {
  if (steps < 16)
    throw Error(ErrorKind::Eval, "integrated gradients needs steps >= 16");
  if (x.rows() != baseline.rows() || x.cols() != baseline.cols())
    throw Error(ErrorKind::Eval, "baseline shape mismatch");

  const MatX<S> delta = x - baseline;
  MatX<S> grad_sum = MatX<S>::Zero(x.rows(), x.cols());
  double f_at_x = 0.0, f_at_base = 0.0;
  for (int k = 0; k <= steps; ++k) {
    const S alpha = static_cast<S>(k) / static_cast<S>(steps);
    const MatX<S> point = baseline + alpha * delta;
    auto [value, grad] = f(point);
    const double w = (k == 0 || k == steps) ? 0.5 : 1.0;
    grad_sum += static_cast<S>(w) * grad;
    if (k == 0) f_at_base = value;
    if (k == steps) f_at_x = value;
  }

  Attribution<S> out;
  out.values = delta.cwiseProduct(grad_sum / static_cast<S>(steps));
  out.channel_scores = VecD::Zero(x.rows());
  for (int c = 0; c < x.rows(); ++c)
    out.channel_scores[c] = out.values.row(c).template cast<double>().cwiseAbs().sum();
  const double peak = out.channel_scores.maxCoeff();
  if (peak > 0.0) out.channel_scores /= peak;
  out.completeness_gap =
      std::abs(static_cast<double>(out.values.sum()) - (f_at_x - f_at_base));
  return out;
}

}  // namespace olv

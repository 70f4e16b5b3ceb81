#pragma once

#include <algorithm>
#include <utility>
#include <vector>

#include "olv/common.hpp"
#include "olv/domain.hpp"
#include "olv/preprocess.hpp"

namespace olv {

namespace detail {

inline double median_inplace(std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    std::nth_element(v.begin(), v.begin() + mid - 1, v.end());
    m = 0.5 * (m + v[mid - 1]);
  }
  return m;
}

// Median absolute deviation of the first difference; robust noise scale.
inline double mad_of_diff(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  std::vector<double> d(x.size() - 1);
  for (std::size_t i = 0; i + 1 < x.size(); ++i) d[i] = x[i + 1] - x[i];
  std::vector<double> tmp = d;
  const double med = median_inplace(tmp);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::abs(d[i] - med);
  return median_inplace(d);
}

}  // namespace detail

// Non-learned baseline: scan the standardized two-sample mean-shift statistic
//   S(t) = |mean(x[0..t)) - mean(x[t..d))| * sqrt(t * (d - t) / d)
// over all split points, greedily take the two strongest local shifts with a
// minimum separation, and report them in temporal order. A split only counts
// as a change point when the mean shift across a short local window exceeds
// 4x the MAD of the differenced signal. Location/scale normalized, so the
// result is invariant under x -> a*x + b (a > 0).
inline std::pair<int, int> change_point_detect(const PreparedRecord& record,
                                               ChannelId channel = ChannelId::VTSet,
                                               int min_separation = 40,
                                               int local_window = 8) {
  const int d = record.duration_min;
  if (d < 4)
    throw Error(ErrorKind::Baseline, "record too short for change-point detection");
  std::vector<double> x(d);
  for (int t = 0; t < d; ++t) x[t] = record.signals(static_cast<int>(channel), t);

  const double mad = detail::mad_of_diff(x);
  double spread = 0.0;
  for (double v : x) spread = std::max(spread, std::abs(v - x[0]));
  const double shift_threshold = 4.0 * mad + 1e-9 * std::max(1.0, spread);

  std::vector<double> prefix(d + 1, 0.0);
  for (int t = 0; t < d; ++t) prefix[t + 1] = prefix[t] + x[t];
  const auto seg_mean = [&](int lo, int hi) {  // mean over [lo, hi)
    return (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
  };

  std::vector<double> stat(d, 0.0);
  std::vector<char> strong(d, 0);
  for (int t = 1; t < d; ++t) {
    const double shift = seg_mean(0, t) - seg_mean(t, d);
    stat[t] = std::abs(shift) * std::sqrt(static_cast<double>(t) * (d - t) / d);
    const int lo = std::max(0, t - local_window);
    const int hi = std::min(d, t + local_window);
    strong[t] = std::abs(seg_mean(lo, t) - seg_mean(t, hi)) > shift_threshold ? 1 : 0;
  }

  const auto pick_best = [&](int exclude_center) -> int {
    int best = -1;
    for (int t = 1; t < d; ++t) {
      if (!strong[t]) continue;
      if (exclude_center >= 0 && std::abs(t - exclude_center) < min_separation) continue;
      if (best < 0 || stat[t] > stat[best]) best = t;
    }
    return best;
  };

  const int first = pick_best(-1);
  if (first < 0)
    throw Error(ErrorKind::Baseline, "insufficient change points",
                std::string(channel_name(channel)) + "@" + record.record_id);
  const int second = pick_best(first);
  if (second < 0)
    throw Error(ErrorKind::Baseline, "insufficient change points",
                std::string(channel_name(channel)) + "@" + record.record_id);
  return {std::min(first, second), std::max(first, second)};
}

}  // namespace olv

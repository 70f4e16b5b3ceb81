#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "olv/common.hpp"
#include "olv/domain.hpp"

namespace olv {

// Fill interior gaps (missing runs with present values on both sides) by
// linear interpolation. Head/tail runs are left absent for pad_edges.
inline std::vector<std::optional<double>> interpolate_missing(
    const std::vector<std::optional<double>>& channel, const std::string& name = "") {
  const int n = static_cast<int>(channel.size());
  bool any_present = false;
  for (const auto& v : channel)
    if (v.has_value()) { any_present = true; break; }
  if (!any_present)
    throw Error(ErrorKind::Preprocess, "channel is entirely missing", name);

  std::vector<std::optional<double>> out = channel;
  int prev = -1;  // index of last present value
  for (int i = 0; i < n; ++i) {
    if (!channel[i].has_value()) continue;
    if (prev >= 0 && i - prev > 1) {
      const double lo = *channel[prev];
      const double hi = *channel[i];
      const double slope = (hi - lo) / static_cast<double>(i - prev);
      for (int j = prev + 1; j < i; ++j)
        out[j] = lo + slope * static_cast<double>(j - prev);
    }
    prev = i;
  }
  return out;
}

// Nearest-value padding for leading/trailing missing runs.
inline std::vector<double> pad_edges(const std::vector<std::optional<double>>& channel,
                                     const std::string& name = "") {
  const int n = static_cast<int>(channel.size());
  int first = -1, last = -1;
  for (int i = 0; i < n; ++i) {
    if (channel[i].has_value()) {
      if (first < 0) first = i;
      last = i;
    }
  }
  if (first < 0)
    throw Error(ErrorKind::Preprocess, "channel is entirely missing", name);

  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) {
    if (i < first) out[i] = *channel[first];
    else if (i > last) out[i] = *channel[last];
    else if (channel[i].has_value()) out[i] = *channel[i];
    else throw Error(ErrorKind::Preprocess, "interior gap not interpolated", name);
  }
  return out;
}

// Interpolate then pad all channels of a record; result has no gaps.
inline std::vector<std::vector<double>> complete_signals(const PatientRecord& r) {
  std::vector<std::vector<double>> out(kNumChannels);
  for (int c = 0; c < kNumChannels; ++c) {
    const std::string name = std::string(kChannelNames[c]) + "@" + r.record_id;
    out[c] = pad_edges(interpolate_missing(r.signals[c], name), name);
  }
  return out;
}

inline constexpr double kStdFloor = 1e-6;

// Per-channel mean/std over all training minutes. Std floored so constant
// setting channels do not blow up the z-score.
inline NormStats fit_normalizer(const std::vector<const PatientRecord*>& train) {
  if (train.empty())
    throw Error(ErrorKind::Preprocess, "cannot fit normalizer on empty training set");
  NormStats stats;
  for (int c = 0; c < kNumChannels; ++c) {
    double sum = 0.0, sum_sq = 0.0;
    std::int64_t n = 0;
    for (const PatientRecord* r : train) {
      const auto completed = pad_edges(interpolate_missing(r->signals[c]));
      for (double v : completed) {
        sum += v;
        sum_sq += v * v;
        ++n;
      }
    }
    const double mean = sum / static_cast<double>(n);
    const double var = std::max(0.0, sum_sq / static_cast<double>(n) - mean * mean);
    stats[c].mean = mean;
    stats[c].std = std::max(std::sqrt(var), kStdFloor);
  }
  return stats;
}

inline NormStats fit_normalizer(const Dataset& train) {
  std::vector<const PatientRecord*> ptrs;
  ptrs.reserve(train.records.size());
  for (const auto& r : train.records) ptrs.push_back(&r);
  return fit_normalizer(ptrs);
}

// A record after gap filling and (optional) z-scoring, as a dense 7 x d
// matrix ready for window extraction.
struct PreparedRecord {
  std::string record_id;
  Site site = Site::A;
  int duration_min = 0;
  MatD signals;  // 7 x d, complete
  std::optional<int> olv_start;
  std::optional<int> olv_end;
};

inline PreparedRecord prepare_record(const PatientRecord& r, const NormStats* stats) {
  PreparedRecord out;
  out.record_id = r.record_id;
  out.site = r.site;
  out.duration_min = r.duration_min;
  out.olv_start = r.olv_start;
  out.olv_end = r.olv_end;
  out.signals.resize(kNumChannels, r.duration_min);
  const auto complete = complete_signals(r);
  for (int c = 0; c < kNumChannels; ++c) {
    for (int t = 0; t < r.duration_min; ++t) {
      double v = complete[c][t];
      if (stats) v = (v - (*stats)[c].mean) / (*stats)[c].std;
      out.signals(c, t) = v;
    }
  }
  return out;
}

inline double invert_normalized(double z, const ChannelStats& s) {
  return z * s.std + s.mean;
}

// Columns [t, t + l_ws) of all channels, copy semantics.
inline MatD extract_window(const PreparedRecord& r, int t, int l_ws) {
  if (t < 0 || t + l_ws > r.duration_min)
    throw Error(ErrorKind::Inference,
                "window start out of range: t=" + std::to_string(t) +
                    " l_ws=" + std::to_string(l_ws) +
                    " d=" + std::to_string(r.duration_min));
  return r.signals.block(0, t, kNumChannels, l_ws);
}

}  // namespace olv

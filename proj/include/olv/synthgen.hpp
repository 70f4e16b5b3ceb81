#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <utility>

#include "olv/domain.hpp"
#include "olv/rng.hpp"

namespace olv {

// Signal morphology knobs for one synthetic site. Setting channels step
// instantly and carry no noise; measured channels ramp over
// transition_ramp_min minutes and carry Gaussian noise plus i.i.d. missing
// entries.
struct SiteProfile {
  Site site = Site::A;
  double vt_baseline_ml = 500.0;
  double vt_olv_ratio = 0.6;
  double pip_baseline_cmH2O = 18.0;
  double pip_olv_delta = 8.0;
  double rr_baseline = 12.0;
  double rr_olv_delta = 4.0;
  double spo2_baseline_pct = 98.0;
  double spo2_olv_dip_pct = -2.0;
  double peep_baseline = 5.0;
  double noise_std_fraction = 0.03;
  int transition_ramp_min = 2;
  double missing_rate = 0.05;

  static SiteProfile for_site(Site s) {
    SiteProfile p;
    p.site = s;
    if (s == Site::B) p.vt_baseline_ml = 450.0;
    return p;
  }

  std::vector<std::string> validate() const {
    std::vector<std::string> v;
    if (vt_baseline_ml <= 0 || pip_baseline_cmH2O <= 0 || rr_baseline <= 0 ||
        spo2_baseline_pct <= 0 || peep_baseline <= 0)
      v.push_back("baselines must be positive");
    if (vt_olv_ratio <= 0.0 || vt_olv_ratio >= 1.0)
      v.push_back("vt_olv_ratio must be in (0,1)");
    if (missing_rate < 0.0 || missing_rate >= 1.0)
      v.push_back("missing_rate must be in [0,1)");
    if (noise_std_fraction < 0.0) v.push_back("noise_std_fraction must be >= 0");
    if (transition_ramp_min < 0) v.push_back("transition_ramp_min must be >= 0");
    return v;
  }
};

struct GenOptions {
  int duration_min = 480;
  int edge_margin = 40;   // events stay >= this far from record edges
  int min_olv_len = 20;
  int max_olv_len = 240;
};

namespace detail {

// Piecewise level of a measured channel: baseline before the event, a linear
// ramp of `ramp` minutes starting at each transition, the OLV plateau in
// between.
inline double measured_level(int t, int start, int end, int ramp, double base, double olv) {
  if (t < start) return base;
  if (t < end) {
    const double f = ramp > 0 ? std::min(1.0, static_cast<double>(t - start + 1) / ramp) : 1.0;
    return base + (olv - base) * f;
  }
  const double f = ramp > 0 ? std::min(1.0, static_cast<double>(t - end + 1) / ramp) : 1.0;
  return olv + (base - olv) * f;
}

inline std::vector<std::optional<double>> setting_channel(int d, int start, int end,
                                                          double base, double olv) {
  std::vector<std::optional<double>> out(d);
  for (int t = 0; t < d; ++t) out[t] = (t >= start && t < end) ? olv : base;
  return out;
}

inline std::vector<std::optional<double>> measured_channel(int d, int start, int end,
                                                           const SiteProfile& p, double base,
                                                           double olv, Rng& rng) {
  std::vector<std::optional<double>> out(d);
  const double noise_std = p.noise_std_fraction * base;
  for (int t = 0; t < d; ++t) {
    const double level = measured_level(t, start, end, p.transition_ramp_min, base, olv);
    const double v = noise_std > 0.0 ? rng.normal(level, noise_std) : level;
    if (rng.uniform() < p.missing_rate)
      out[t] = std::nullopt;
    else
      out[t] = v;
  }
  return out;
}

}  // namespace detail

inline std::pair<int, int> draw_olv_interval(int d, const GenOptions& opts, Rng& rng) {
  const int margin = std::max(0, opts.edge_margin);
  const int hi_end = d - std::max(margin, 1);  // olv_end must stay < d
  const int max_len = std::min(opts.max_olv_len, hi_end - margin);
  if (max_len < opts.min_olv_len)
    throw Error(ErrorKind::Usage, "duration too short for an OLV interval: d=" + std::to_string(d));
  const int len = static_cast<int>(rng.uniform_int(opts.min_olv_len, max_len));
  const int start = static_cast<int>(rng.uniform_int(margin, hi_end - len));
  return {start, start + len};
}

inline PatientRecord generate_record(const SiteProfile& profile, int duration_min,
                                     std::uint64_t rng_seed, const GenOptions& opts = {},
                                     std::optional<std::pair<int, int>> forced_interval = {}) {
  if (const auto v = profile.validate(); !v.empty())
    throw Error(ErrorKind::Usage, "invalid site profile: " + v.front());
  const int min_d = std::max(3 * std::max(opts.edge_margin, 1), 2 * opts.min_olv_len);
  if (duration_min < min_d)
    throw Error(ErrorKind::Usage, "duration_min must be >= " + std::to_string(min_d) +
                                      ", got " + std::to_string(duration_min));

  Rng rng(rng_seed);
  int start, end;
  if (forced_interval) {
    std::tie(start, end) = *forced_interval;
    if (!(0 <= start && start < end && end < duration_min))
      throw Error(ErrorKind::Usage, "forced OLV interval out of range");
  } else {
    std::tie(start, end) = draw_olv_interval(duration_min, opts, rng);
  }

  PatientRecord r;
  r.record_id = std::string(site_name(profile.site)) + "-" + std::to_string(rng_seed);
  r.site = profile.site;
  r.duration_min = duration_min;
  r.olv_start = start;
  r.olv_end = end;
  r.signals.resize(kNumChannels);

  const double vt_olv = profile.vt_baseline_ml * profile.vt_olv_ratio;
  const double rr_olv = profile.rr_baseline + profile.rr_olv_delta;
  r.signals[static_cast<int>(ChannelId::VTSet)] =
      detail::setting_channel(duration_min, start, end, profile.vt_baseline_ml, vt_olv);
  r.signals[static_cast<int>(ChannelId::RRSet)] =
      detail::setting_channel(duration_min, start, end, profile.rr_baseline, rr_olv);
  r.signals[static_cast<int>(ChannelId::PEEP)] = detail::setting_channel(
      duration_min, start, end, profile.peep_baseline, profile.peep_baseline);
  r.signals[static_cast<int>(ChannelId::ExhaledVT)] = detail::measured_channel(
      duration_min, start, end, profile, profile.vt_baseline_ml, vt_olv, rng);
  r.signals[static_cast<int>(ChannelId::RRMeasured)] = detail::measured_channel(
      duration_min, start, end, profile, profile.rr_baseline, rr_olv, rng);
  r.signals[static_cast<int>(ChannelId::PIP)] = detail::measured_channel(
      duration_min, start, end, profile, profile.pip_baseline_cmH2O,
      profile.pip_baseline_cmH2O + profile.pip_olv_delta, rng);
  r.signals[static_cast<int>(ChannelId::SpO2)] = detail::measured_channel(
      duration_min, start, end, profile, profile.spo2_baseline_pct,
      profile.spo2_baseline_pct + profile.spo2_olv_dip_pct, rng);
  return r;
}

// Record i of a dataset is generated from the derived seed mix_seed(seed, i),
// so single records can be reproduced without generating the whole set.
inline Dataset generate_dataset(const SiteProfile& profile, int n_records,
                                std::uint64_t rng_seed, const GenOptions& opts = {}) {
  if (n_records <= 0)
    throw Error(ErrorKind::Usage, "n_records must be positive");
  Dataset ds;
  ds.records.reserve(n_records);
  for (int i = 0; i < n_records; ++i)
    ds.records.push_back(generate_record(profile, opts.duration_min, mix_seed(rng_seed, i), opts));
  return ds;
}

}  // namespace olv

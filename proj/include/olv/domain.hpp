#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "olv/common.hpp"

namespace olv {

// The seven per-minute channels, in matrix row order. The integer encoding
// is part of the on-disk and in-memory contracts.
enum class ChannelId : int {
  VTSet = 0,
  RRSet = 1,
  PEEP = 2,
  ExhaledVT = 3,
  RRMeasured = 4,
  PIP = 5,
  SpO2 = 6,
};

inline constexpr int kNumChannels = 7;

inline constexpr std::array<const char*, kNumChannels> kChannelNames = {
    "VTSet", "RRSet", "PEEP", "ExhaledVT", "RRMeasured", "PIP", "SpO2"};

inline const char* channel_name(ChannelId c) {
  return kChannelNames[static_cast<int>(c)];
}

inline std::optional<ChannelId> channel_from_name(const std::string& name) {
  for (int i = 0; i < kNumChannels; ++i) {
    if (name == kChannelNames[i]) return static_cast<ChannelId>(i);
  }
  return std::nullopt;
}

// Setting channels are keyed in by clinicians as discrete values; the
// remaining four are sensor measurements.
inline bool is_setting_channel(ChannelId c) {
  return c == ChannelId::VTSet || c == ChannelId::RRSet || c == ChannelId::PEEP;
}

enum class Site { A, B };

inline const char* site_name(Site s) { return s == Site::A ? "A" : "B"; }

// One surgery: 7 aligned per-minute channels plus optional ground-truth
// event minutes. Missing measurements are explicit (nullopt), never sentinel
// numbers. Immutable value object once built.
struct PatientRecord {
  std::string record_id;
  Site site = Site::A;
  int duration_min = 0;
  // signals[channel][minute]; exactly 7 rows of length duration_min.
  std::vector<std::vector<std::optional<double>>> signals;
  std::optional<int> olv_start;
  std::optional<int> olv_end;
};

struct ChannelStats {
  double mean = 0.0;
  double std = 1.0;
};

using NormStats = std::array<ChannelStats, kNumChannels>;

struct Dataset {
  std::vector<PatientRecord> records;
  std::optional<NormStats> normalization_stats;
};

enum class EventKind { Start, End };

inline const char* event_name(EventKind k) { return k == EventKind::Start ? "start" : "end"; }

enum class EncoderKind { Transformer, LSTM, MLP };

inline const char* encoder_name(EncoderKind k) {
  switch (k) {
    case EncoderKind::Transformer: return "transformer";
    case EncoderKind::LSTM: return "lstm";
    default: return "mlp";
  }
}

// All architecture and training hyperparameters. Defaults are the reference
// configuration; sigma defaults to 4/sqrt(2*pi) so the smoothed label peak
// is exactly 1.
struct ModelConfig {
  int l_ws = 40;
  int l_step = 10;
  std::array<int, 3> embed_dims = {64, 512, 512};
  int transformer_depth = 4;
  int transformer_heads = 8;
  int freq_feat_dim = 64;
  double sigma = 4.0 / std::sqrt(2.0 * M_PI);
  int smoothing_halfwidth = 3;
  double aux_loss_weight = 0.5;
  double lr = 0.0005;
  double weight_decay = 0.0001;
  int batch_size = 24;
  double momentum = 0.9;
  EncoderKind encoder_kind = EncoderKind::Transformer;
  bool use_spectrum = true;
  std::int64_t seed = 0;
  // Ablation and variant switches.
  bool use_smoothing = true;    // false: hard one-hot targets
  int masked_channel = -1;      // zero this channel at the model input (-1: none)
  bool nesterov = true;         // false: plain Adam
  int ffn_mult = 4;             // encoder feed-forward width multiplier
  double dropout = 0.0;

  int d_model() const { return embed_dims[2]; }

  std::vector<std::string> validate() const {
    std::vector<std::string> v;
    if (l_ws < 2) v.push_back("l_ws must be >= 2");
    if (l_step < 1) v.push_back("l_step must be >= 1");
    if (l_step > l_ws) v.push_back("l_step must be <= l_ws");
    for (int d : embed_dims)
      if (d < 1) v.push_back("embed_dims entries must be positive");
    if (transformer_depth < 1) v.push_back("transformer_depth must be >= 1");
    if (transformer_heads < 1) v.push_back("transformer_heads must be >= 1");
    if (transformer_heads >= 1 && embed_dims[2] % transformer_heads != 0)
      v.push_back("embed_dims[2] must be divisible by transformer_heads");
    if (freq_feat_dim < 4 || freq_feat_dim % 4 != 0)
      v.push_back("freq_feat_dim must be a positive multiple of 4");
    if (!(sigma > 0.0)) v.push_back("sigma must be > 0");
    if (smoothing_halfwidth < 1) v.push_back("smoothing_halfwidth must be >= 1");
    if (aux_loss_weight < 0.0) v.push_back("aux_loss_weight must be >= 0");
    if (!(lr > 0.0)) v.push_back("lr must be > 0");
    if (weight_decay < 0.0) v.push_back("weight_decay must be >= 0");
    if (batch_size < 1) v.push_back("batch_size must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0) v.push_back("momentum must be in [0, 1)");
    if (masked_channel < -1 || masked_channel >= kNumChannels)
      v.push_back("masked_channel must be -1 or a channel index 0..6");
    if (ffn_mult < 1) v.push_back("ffn_mult must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) v.push_back("dropout must be in [0, 1)");
    return v;
  }
};

// One fixed-length window cut from a normalized record, ready for the model.
template <typename S>
struct WindowSampleT {
  int anchor_t = 0;
  MatX<S> values;                   // 7 x l_ws
  std::vector<MatX<S>> spectra;     // 7 images (scale x time); empty if unused
  VecX<S> target;                   // length l_ws, in [0, 1]
  bool contains_event = false;
};

using WindowSample = WindowSampleT<float>;

// Score for one (window anchor, in-window position) pair of the sliding
// inference pass.
struct TraceEntry {
  int anchor = 0;
  int position = 0;
  double score = 0.0;
  int global_min() const { return anchor + position; }
};

struct Prediction {
  std::string record_id;
  EventKind event_kind = EventKind::Start;
  int predicted_min = 0;
  double peak_score = 0.0;
  std::vector<TraceEntry> score_trace;
};

inline std::vector<std::string> validate_record(const PatientRecord& r) {
  std::vector<std::string> v;
  if (r.record_id.empty()) v.push_back("record_id must be non-empty");
  if (r.duration_min <= 0) v.push_back("duration_min must be positive");
  if (static_cast<int>(r.signals.size()) != kNumChannels) {
    v.push_back("expected 7 channels, got " + std::to_string(r.signals.size()));
  } else {
    for (int c = 0; c < kNumChannels; ++c) {
      if (static_cast<int>(r.signals[c].size()) != r.duration_min)
        v.push_back(std::string("channel ") + kChannelNames[c] + " length != duration_min");
    }
  }
  if (r.olv_start && r.olv_end) {
    if (*r.olv_start >= *r.olv_end) v.push_back("start >= end");
    if (*r.olv_start < 0) v.push_back("olv_start < 0");
    if (*r.olv_end >= r.duration_min) v.push_back("olv_end >= duration_min");
  } else if (r.olv_start && (*r.olv_start < 0 || *r.olv_start >= r.duration_min)) {
    v.push_back("olv_start out of range");
  } else if (r.olv_end && (*r.olv_end < 0 || *r.olv_end >= r.duration_min)) {
    v.push_back("olv_end out of range");
  }
  return v;
}

inline std::vector<std::string> validate_dataset(const Dataset& ds) {
  std::vector<std::string> v;
  std::vector<std::string> ids;
  ids.reserve(ds.records.size());
  for (const auto& r : ds.records) ids.push_back(r.record_id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    v.push_back("record_ids must be unique");
  return v;
}

}  // namespace olv

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "olv/evaluation.hpp"
#include "olv/inference.hpp"
#include "olv/trainer.hpp"

namespace olv {

// Scorer for attribution: window values -> (score at `position`, gradient
// w.r.t. the values). The spectra are recomputed from the candidate values at
// every path point, so the gradient flows through both branches, including
// the wavelet magnitudes. Runs in inference mode (running batch-norm stats).
template <typename S>
class WindowScorer {
 public:
  WindowScorer(const Model<S>& model, const MorletBank<S>* bank, int position)
      : model_(model), bank_(bank), position_(position) {
    if (position < 0 || position >= model.config().l_ws)
      throw Error(ErrorKind::Eval, "attribution position out of range");
    if (model.config().use_spectrum && bank == nullptr)
      throw Error(ErrorKind::Eval, "spectrum bank required by this model");
  }

  std::pair<double, MatX<S>> operator()(const MatX<S>& values) const {
    const auto& cfg = model_.config();
    WindowSampleT<S> w;
    w.values = values;
    std::vector<CwtCache<S>> caches(cfg.use_spectrum ? kNumChannels : 0);
    if (cfg.use_spectrum) {
      w.spectra.resize(kNumChannels);
      for (int c = 0; c < kNumChannels; ++c) {
        const VecX<S> row = values.row(c).transpose();
        w.spectra[c] = bank_->spectrum(row, &caches[c]);
      }
    }
    std::vector<const WindowSampleT<S>*> batch = {&w};
    typename Model<S>::Tape tape;
    const auto out = model_.forward(batch, &tape, nullptr, /*batch_norm_train=*/false);
    const S score = out.scores(0, position_);

    MatX<S> dlogits = MatX<S>::Zero(1, cfg.l_ws);
    dlogits(0, position_) = score * (S(1) - score);  // d(sigmoid)/d(logit)
    VecX<S> daux;
    BatchGrad<S> ig;
    model_.backward(batch, tape, dlogits, daux, &ig);

    MatX<S> dx = ig.d_values[0];
    if (cfg.use_spectrum) {
      for (int c = 0; c < kNumChannels; ++c) {
        if (c == cfg.masked_channel) continue;
        dx.row(c) += bank_->backward(caches[c], ig.d_spectra[0][c]).transpose();
      }
    }
    return {static_cast<double>(score), std::move(dx)};
  }

 private:
  const Model<S>& model_;
  const MorletBank<S>* bank_;
  int position_;
};

// Integrated gradients for the score the model assigned at `position` of one
// window, against an all-zeros (channel-mean) baseline by default.
template <typename S>
Attribution<S> attribute_window(const Model<S>& model, const MorletBank<S>* bank,
                                const MatX<S>& values, int position, int steps = 64,
                                const MatX<S>* baseline = nullptr) {
  const MatX<S> base =
      baseline ? *baseline : MatX<S>::Zero(values.rows(), values.cols()).eval();
  return integrated_gradients<S>(WindowScorer<S>(model, bank, position), values, base, steps);
}

struct RecordAttribution {
  std::string record_id;
  EventKind event_kind = EventKind::Start;
  int predicted_min = 0;
  VecD channel_scores;  // normalized to [0, 1]
};

// Attribution of the winning window/position of one prediction.
template <typename S>
RecordAttribution attribute_prediction(const PreparedRecord& record, const Model<S>& model,
                                       const MorletBank<S>* bank, EventKind kind,
                                       const InferenceOptions& iopts = {}, int steps = 64) {
  const auto pred = predict_record<S>(record, model, bank, kind, iopts);
  const auto& best = pred.score_trace[argmax_trace(pred.score_trace)];
  const MatX<S> values =
      extract_window(record, best.anchor, model.config().l_ws).template cast<S>();
  const auto attr = attribute_window<S>(model, bank, values, best.position, steps);
  RecordAttribution out;
  out.record_id = record.record_id;
  out.event_kind = kind;
  out.predicted_min = pred.predicted_min;
  out.channel_scores = attr.channel_scores;
  return out;
}

// --- leave-one-variable-out study ---------------------------------------------

struct StudyRow {
  std::string label;            // "all" or the masked channel name
  int masked_channel = -1;
  EvalReport start, end;
};

// Deterministic train/test split, then one full (start, end) training per row:
// the unmasked model plus one per channel with that channel zeroed at the
// model input.
template <typename S = float>
std::vector<StudyRow> leave_one_out_study(const Dataset& ds, const ModelConfig& cfg, int epochs,
                                          double test_fraction = 0.2,
                                          std::ostream* log = nullptr,
                                          const InferenceOptions& iopts = {}) {
  const int n = static_cast<int>(ds.records.size());
  const int n_test = std::max(1, static_cast<int>(test_fraction * n));
  if (n_test >= n) throw Error(ErrorKind::Usage, "dataset too small for the study split");
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(static_cast<std::uint64_t>(cfg.seed), 0x570d));
  rng.shuffle(order);

  std::vector<const PatientRecord*> train_raw, test_raw;
  for (int i = 0; i < n; ++i) {
    if (i < n_test) test_raw.push_back(&ds.records[order[i]]);
    else train_raw.push_back(&ds.records[order[i]]);
  }
  const NormStats stats = fit_normalizer(train_raw);
  std::vector<PreparedRecord> train;
  for (const auto* r : train_raw) train.push_back(prepare_record(*r, &stats));
  std::vector<PreparedRecord> test;
  for (const auto* r : test_raw) test.push_back(prepare_record(*r, &stats));

  std::optional<MorletBank<S>> bank;
  if (cfg.use_spectrum) bank.emplace(cfg.l_ws);

  const auto run_row = [&](int masked) -> StudyRow {
    ModelConfig row_cfg = cfg;
    row_cfg.masked_channel = masked;
    TrainHooks<S> hooks;
    hooks.log = log;
    auto start_fit = fit<S>(train, row_cfg, EventKind::Start, epochs, hooks);
    auto end_fit = fit<S>(train, row_cfg, EventKind::End, epochs, hooks);
    std::vector<std::pair<int, int>> sp, ep;
    for (std::size_t i = 0; i < test.size(); ++i) {
      if (test_raw[i]->olv_start) {
        const auto p = predict_record<S>(test[i], start_fit.model, bank ? &*bank : nullptr,
                                         EventKind::Start, iopts);
        sp.push_back({p.predicted_min, *test_raw[i]->olv_start});
      }
      if (test_raw[i]->olv_end) {
        const auto p = predict_record<S>(test[i], end_fit.model, bank ? &*bank : nullptr,
                                         EventKind::End, iopts);
        ep.push_back({p.predicted_min, *test_raw[i]->olv_end});
      }
    }
    StudyRow row;
    row.masked_channel = masked;
    row.label = masked < 0 ? "all" : kChannelNames[masked];
    row.start = evaluate(sp);
    row.end = evaluate(ep);
    return row;
  };

  std::vector<StudyRow> rows;
  rows.push_back(run_row(-1));
  for (int c = 0; c < kNumChannels; ++c) rows.push_back(run_row(c));
  return rows;
}

}  // namespace olv

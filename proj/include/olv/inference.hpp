#pragma once

#include <string>
#include <vector>

#include "olv/common.hpp"
#include "olv/domain.hpp"
#include "olv/network.hpp"
#include "olv/preprocess.hpp"
#include "olv/spectral.hpp"

namespace olv {

// Window anchors for sliding inference: multiples of l_step below d - l_ws,
// plus a final anchor at d - l_ws so the record tail is always covered. The
// paper-literal variant keeps exactly floor((d - l_ws) / l_step) anchors and
// may leave trailing minutes unscored (or none at all when d == l_ws).
inline std::vector<int> segment_anchors(int d, int l_ws, int l_step,
                                        bool tail_extension = true) {
  if (d < l_ws)
    throw Error(ErrorKind::Inference, "record shorter than the window: d=" + std::to_string(d) +
                                          " l_ws=" + std::to_string(l_ws));
  if (l_step < 1) throw Error(ErrorKind::Inference, "l_step must be >= 1");
  std::vector<int> anchors;
  if (tail_extension) {
    for (int a = 0; a < d - l_ws; a += l_step) anchors.push_back(a);
    anchors.push_back(d - l_ws);
  } else {
    const int n_seg = (d - l_ws) / l_step;
    for (int i = 0; i < n_seg; ++i) anchors.push_back(i * l_step);
  }
  return anchors;
}

// Global argmax over the score trace. Ties break toward the smallest global
// minute, then the smallest anchor.
inline std::size_t argmax_trace(const std::vector<TraceEntry>& trace) {
  if (trace.empty()) throw Error(ErrorKind::Inference, "empty score trace");
  std::size_t best = 0;
  for (std::size_t i = 1; i < trace.size(); ++i) {
    const auto& t = trace[i];
    const auto& b = trace[best];
    if (t.score > b.score ||
        (t.score == b.score &&
         (t.global_min() < b.global_min() ||
          (t.global_min() == b.global_min() && t.anchor < b.anchor))))
      best = i;
  }
  return best;
}

struct InferenceOptions {
  int l_step = 10;
  bool tail_extension = true;
  int max_batch = 128;  // anchors scored per forward pass
};

// Score every anchored window and take the global maximum. The record must
// already be normalized with the training statistics.
template <typename S>
Prediction predict_record(const PreparedRecord& record, const Model<S>& model,
                          const MorletBank<S>* bank, EventKind kind,
                          const InferenceOptions& opts = {}) {
  const auto& cfg = model.config();
  if (cfg.use_spectrum && bank == nullptr)
    throw Error(ErrorKind::Inference, "spectrum bank required by this model");
  const auto anchors = segment_anchors(record.duration_min, cfg.l_ws, opts.l_step,
                                       opts.tail_extension);
  if (anchors.empty())
    throw Error(ErrorKind::Inference, "no inference windows for record " + record.record_id);

  Prediction pred;
  pred.record_id = record.record_id;
  pred.event_kind = kind;
  pred.score_trace.reserve(anchors.size() * static_cast<std::size_t>(cfg.l_ws));

  std::vector<WindowSampleT<S>> windows(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    windows[i].anchor_t = anchors[i];
    windows[i].values = extract_window(record, anchors[i], cfg.l_ws).template cast<S>();
    if (cfg.use_spectrum) windows[i].spectra = stack_spectra(*bank, windows[i].values).data;
  }

  for (std::size_t lo = 0; lo < windows.size(); lo += opts.max_batch) {
    const std::size_t hi = std::min(windows.size(), lo + opts.max_batch);
    std::vector<const WindowSampleT<S>*> batch;
    batch.reserve(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) batch.push_back(&windows[i]);
    const auto out = model.forward(batch);
    for (std::size_t i = lo; i < hi; ++i) {
      for (int j = 0; j < cfg.l_ws; ++j)
        pred.score_trace.push_back(
            {anchors[i], j, static_cast<double>(out.scores(static_cast<int>(i - lo), j))});
    }
  }

  const auto& win = pred.score_trace[argmax_trace(pred.score_trace)];
  pred.predicted_min = win.global_min();
  pred.peak_score = win.score;
  return pred;
}

}  // namespace olv

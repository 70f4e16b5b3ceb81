#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "olv/domain.hpp"
#include "olv/evaluation.hpp"
#include "olv/inference.hpp"
#include "olv/network.hpp"
#include "olv/optim.hpp"
#include "olv/preprocess.hpp"
#include "olv/rng.hpp"
#include "olv/spectral.hpp"
#include "olv/supervision.hpp"

namespace olv {

// --- k-fold protocol ---------------------------------------------------------

struct FoldSplit {
  int k = 5;
  std::map<std::string, int> assignments;  // record_id -> fold index
};

inline FoldSplit kfold_split(const Dataset& ds, int k, std::uint64_t seed) {
  const int n = static_cast<int>(ds.records.size());
  if (k < 2) throw Error(ErrorKind::Usage, "k must be >= 2");
  if (n < k)
    throw Error(ErrorKind::Usage, "dataset smaller than fold count: " + std::to_string(n) +
                                      " records, k=" + std::to_string(k));
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  FoldSplit split;
  split.k = k;
  for (int i = 0; i < n; ++i)
    split.assignments[ds.records[order[i]].record_id] = i % k;
  return split;
}

// --- window sampling ----------------------------------------------------------

// One training window at a uniform random anchor t in [0, d - l_ws], with
// spectra and the smoothed target for the requested event.
template <typename S>
WindowSampleT<S> sample_training_window(const PreparedRecord& rec, const ModelConfig& cfg,
                                        EventKind kind, const MorletBank<S>* bank, Rng& rng) {
  if (rec.duration_min <= cfg.l_ws)
    throw Error(ErrorKind::Training,
                "record too short to sample a window: " + rec.record_id);
  const int t = static_cast<int>(rng.uniform_int(0, rec.duration_min - cfg.l_ws));
  WindowSampleT<S> w;
  w.anchor_t = t;
  w.values = extract_window(rec, t, cfg.l_ws).template cast<S>();
  if (cfg.use_spectrum) {
    if (!bank) throw Error(ErrorKind::Training, "spectrum bank missing");
    w.spectra = stack_spectra(*bank, w.values).data;
  }
  const std::optional<int> t_event = kind == EventKind::Start ? rec.olv_start : rec.olv_end;
  auto [target, contains] = make_target(t, cfg.l_ws, t_event, cfg.sigma,
                                        cfg.smoothing_halfwidth, cfg.use_smoothing);
  w.target = std::move(target);
  w.contains_event = contains;
  return w;
}

// --- resumable training state --------------------------------------------------

template <typename S>
struct TrainState {
  int completed_epochs = 0;
  VecX<S> params;
  VecX<S> m, v;  // optimizer moments
  std::int64_t step = 0;
  Rng rng;
  std::vector<double> loss_history;
};

template <typename S>
void save_train_state(const TrainState<S>& st, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Checkpoint, "cannot write train state", path);
  const auto write_vec = [&](const VecX<S>& v) {
    const std::uint64_t n = static_cast<std::uint64_t>(v.size());
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    std::vector<double> buf(n);
    for (std::uint64_t i = 0; i < n; ++i) buf[i] = static_cast<double>(v[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(n * sizeof(double)));
  };
  os.write("OLVT", 4);
  const std::int64_t epoch = st.completed_epochs;
  os.write(reinterpret_cast<const char*>(&epoch), sizeof(epoch));
  os.write(reinterpret_cast<const char*>(&st.step), sizeof(st.step));
  write_vec(st.params);
  write_vec(st.m);
  write_vec(st.v);
  std::ostringstream rng_text;
  rng_text << st.rng;
  const std::string rs = rng_text.str();
  const std::uint64_t rn = rs.size();
  os.write(reinterpret_cast<const char*>(&rn), sizeof(rn));
  os.write(rs.data(), static_cast<std::streamsize>(rn));
  const std::uint64_t hn = st.loss_history.size();
  os.write(reinterpret_cast<const char*>(&hn), sizeof(hn));
  os.write(reinterpret_cast<const char*>(st.loss_history.data()),
           static_cast<std::streamsize>(hn * sizeof(double)));
  if (!os) throw Error(ErrorKind::Checkpoint, "write failure", path);
}

template <typename S>
TrainState<S> load_train_state(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Checkpoint, "cannot open train state", path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "OLVT", 4) != 0)
    throw Error(ErrorKind::Checkpoint, "bad train-state magic", path);
  TrainState<S> st;
  const auto read_vec = [&](VecX<S>& v) {
    std::uint64_t n = 0;
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    std::vector<double> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    v.resize(static_cast<Eigen::Index>(n));
    for (std::uint64_t i = 0; i < n; ++i) v[static_cast<Eigen::Index>(i)] = static_cast<S>(buf[i]);
  };
  std::int64_t epoch = 0;
  is.read(reinterpret_cast<char*>(&epoch), sizeof(epoch));
  st.completed_epochs = static_cast<int>(epoch);
  is.read(reinterpret_cast<char*>(&st.step), sizeof(st.step));
  read_vec(st.params);
  read_vec(st.m);
  read_vec(st.v);
  std::uint64_t rn = 0;
  is.read(reinterpret_cast<char*>(&rn), sizeof(rn));
  std::string rs(rn, '\0');
  is.read(rs.data(), static_cast<std::streamsize>(rn));
  std::istringstream rng_text(rs);
  rng_text >> st.rng;
  std::uint64_t hn = 0;
  is.read(reinterpret_cast<char*>(&hn), sizeof(hn));
  st.loss_history.resize(hn);
  is.read(reinterpret_cast<char*>(st.loss_history.data()),
          static_cast<std::streamsize>(hn * sizeof(double)));
  if (!is) throw Error(ErrorKind::Checkpoint, "truncated train state", path);
  return st;
}

// --- training loop --------------------------------------------------------------

template <typename S>
struct TrainHooks {
  std::function<void(int epoch, const TrainState<S>&)> on_epoch;
  std::ostream* log = nullptr;  // line-delimited JSON: epoch, batch, loss, lr
};

template <typename S>
struct FitResult {
  Model<S> model;
  std::vector<double> loss_history;  // per-epoch mean training loss
};

// One freshly sampled window per record per epoch, minibatches in shuffled
// record order, Adam/NAdam with decoupled weight decay. Start and end models
// are independent runs of this function.
template <typename S = float>
FitResult<S> fit(const std::vector<PreparedRecord>& train, const ModelConfig& cfg,
                 EventKind kind, int epochs, TrainHooks<S> hooks = {},
                 const TrainState<S>* resume = nullptr) {
  if (train.empty()) throw Error(ErrorKind::Training, "empty training set");
  if (epochs < 0) throw Error(ErrorKind::Usage, "epochs must be >= 0");

  const std::uint64_t base_seed =
      mix_seed(static_cast<std::uint64_t>(cfg.seed), kind == EventKind::Start ? 1 : 2);
  Model<S> model(cfg);
  model.init(base_seed);
  std::optional<MorletBank<S>> bank;
  if (cfg.use_spectrum) bank.emplace(cfg.l_ws);

  OptimConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.beta1 = cfg.momentum;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.nesterov = cfg.nesterov;
  AdamOptimizer<S> opt(model.params(), ocfg);
  Rng rng(mix_seed(base_seed, 0x5a17));
  std::vector<double> loss_history;
  int start_epoch = 0;

  if (resume) {
    if (resume->params.size() != model.params().size())
      throw Error(ErrorKind::Checkpoint, "train state does not match this configuration");
    model.params().flat() = resume->params;
    opt.first_moment() = resume->m;
    opt.second_moment() = resume->v;
    opt.set_step_count(resume->step);
    rng = resume->rng;
    loss_history = resume->loss_history;
    start_epoch = resume->completed_epochs;
  }

  std::vector<int> usable;
  for (int i = 0; i < static_cast<int>(train.size()); ++i) {
    if (train[i].duration_min > cfg.l_ws) {
      usable.push_back(i);
    } else if (hooks.log) {
      *hooks.log << R"({"warning":"record skipped, too short","record_id":")"
                 << train[i].record_id << "\"}\n";
    }
  }
  if (usable.empty()) throw Error(ErrorKind::Training, "no record is longer than l_ws");

  const bool want_dropout = cfg.dropout > 0.0;
  for (int epoch = start_epoch; epoch < epochs; ++epoch) {
    std::vector<int> order = usable;
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      const int B = static_cast<int>(hi - lo);
      std::vector<WindowSampleT<S>> windows;
      windows.reserve(B);
      for (std::size_t i = lo; i < hi; ++i)
        windows.push_back(sample_training_window<S>(train[order[i]], cfg, kind,
                                                    bank ? &*bank : nullptr, rng));
      std::vector<const WindowSampleT<S>*> batch;
      batch.reserve(B);
      for (const auto& w : windows) batch.push_back(&w);

      typename Model<S>::Tape tape;
      const auto out = model.forward(batch, &tape, want_dropout ? &rng : nullptr);

      double loss = 0.0;
      for (int b = 0; b < B; ++b) {
        const VecX<S> scores = out.scores.row(b).transpose();
        const std::optional<double> aux =
            out.has_aux ? std::optional<double>(static_cast<double>(out.aux_prob[b]))
                        : std::nullopt;
        loss += bce_loss(scores, windows[b].target, aux, windows[b].contains_event,
                         cfg.aux_loss_weight);
      }
      loss /= B;
      if (!std::isfinite(loss))
        throw Error(ErrorKind::Training, "non-finite loss",
                    "epoch=" + std::to_string(epoch) + " batch=" + std::to_string(batches));

      MatX<S> dlogits(B, cfg.l_ws);
      for (int b = 0; b < B; ++b)
        for (int j = 0; j < cfg.l_ws; ++j)
          dlogits(b, j) = (out.scores(b, j) - static_cast<S>(windows[b].target[j])) /
                          static_cast<S>(cfg.l_ws * B);
      VecX<S> daux;
      if (out.has_aux && cfg.aux_loss_weight > 0.0) {
        daux.resize(B);
        for (int b = 0; b < B; ++b)
          daux[b] = static_cast<S>(cfg.aux_loss_weight *
                                   (static_cast<double>(out.aux_prob[b]) -
                                    (windows[b].contains_event ? 1.0 : 0.0)) /
                                   B);
      }

      const auto grad = model.backward(batch, tape, dlogits, daux);
      model.commit_bn(tape);
      opt.step(model.params(), grad);

      epoch_loss += loss;
      ++batches;
      if (hooks.log) {
        *hooks.log << "{\"epoch\":" << epoch << ",\"batch\":" << batches - 1
                   << ",\"loss\":" << loss << ",\"lr\":" << cfg.lr << "}\n";
      }
    }
    loss_history.push_back(batches > 0 ? epoch_loss / batches : 0.0);
    if (hooks.on_epoch) {
      TrainState<S> st;
      st.completed_epochs = epoch + 1;
      st.params = model.params().flat();
      st.m = opt.first_moment();
      st.v = opt.second_moment();
      st.step = opt.step_count();
      st.rng = rng;
      st.loss_history = loss_history;
      hooks.on_epoch(epoch, st);
    }
  }
  return {std::move(model), std::move(loss_history)};
}

// --- cross validation -----------------------------------------------------------

struct FoldOutcome {
  int fold = 0;
  EvalReport start, end;
  std::vector<std::string> train_ids, test_ids;
  NormStats stats;
};

struct CvResult {
  FoldSplit split;
  std::vector<FoldOutcome> folds;
  EvalReport mean_start, mean_end;
};

inline EvalReport mean_report(const std::vector<EvalReport>& reports) {
  EvalReport mean;
  if (reports.empty()) throw Error(ErrorKind::Eval, "no fold reports to average");
  for (const auto& r : reports) {
    mean.n += r.n;
    mean.mae_min += r.mae_min;
    for (int k = 0; k < 5; ++k) mean.acc[k] += r.acc[k];
    for (const auto& [err, cnt] : r.histogram) mean.histogram[err] += cnt;
  }
  const double k = static_cast<double>(reports.size());
  mean.mae_min /= k;
  for (int a = 0; a < 5; ++a) mean.acc[a] /= k;
  return mean;
}

// Five-fold protocol: per fold, fit the normalizer and both event models on
// the other folds, predict the held-out records, report per-fold and averaged
// metrics.
template <typename S = float>
CvResult run_cv(const Dataset& ds, const ModelConfig& cfg, int epochs, int k = 5,
                std::ostream* log = nullptr, const InferenceOptions& iopts = {}) {
  CvResult result;
  result.split = kfold_split(ds, k, static_cast<std::uint64_t>(cfg.seed));
  std::optional<MorletBank<S>> bank;
  if (cfg.use_spectrum) bank.emplace(cfg.l_ws);

  std::vector<EvalReport> starts, ends;
  for (int fold = 0; fold < k; ++fold) {
    std::vector<const PatientRecord*> train_raw;
    std::vector<const PatientRecord*> test_raw;
    for (const auto& r : ds.records) {
      if (result.split.assignments.at(r.record_id) == fold) test_raw.push_back(&r);
      else train_raw.push_back(&r);
    }
    FoldOutcome outcome;
    outcome.fold = fold;
    for (const auto* r : train_raw) outcome.train_ids.push_back(r->record_id);
    for (const auto* r : test_raw) outcome.test_ids.push_back(r->record_id);
    outcome.stats = fit_normalizer(train_raw);

    std::vector<PreparedRecord> train;
    train.reserve(train_raw.size());
    for (const auto* r : train_raw) train.push_back(prepare_record(*r, &outcome.stats));

    ModelConfig fold_cfg = cfg;
    fold_cfg.seed = static_cast<std::int64_t>(
        mix_seed(static_cast<std::uint64_t>(cfg.seed), 100 + fold));
    TrainHooks<S> hooks;
    hooks.log = log;
    auto start_fit = fit<S>(train, fold_cfg, EventKind::Start, epochs, hooks);
    auto end_fit = fit<S>(train, fold_cfg, EventKind::End, epochs, hooks);

    std::vector<std::pair<int, int>> start_pairs, end_pairs;
    for (const auto* r : test_raw) {
      const PreparedRecord prepared = prepare_record(*r, &outcome.stats);
      if (r->olv_start) {
        const auto p = predict_record<S>(prepared, start_fit.model, bank ? &*bank : nullptr,
                                         EventKind::Start, iopts);
        start_pairs.push_back({p.predicted_min, *r->olv_start});
      }
      if (r->olv_end) {
        const auto p = predict_record<S>(prepared, end_fit.model, bank ? &*bank : nullptr,
                                         EventKind::End, iopts);
        end_pairs.push_back({p.predicted_min, *r->olv_end});
      }
    }
    outcome.start = evaluate(start_pairs);
    outcome.end = evaluate(end_pairs);
    starts.push_back(outcome.start);
    ends.push_back(outcome.end);
    result.folds.push_back(std::move(outcome));
  }
  result.mean_start = mean_report(starts);
  result.mean_end = mean_report(ends);
  return result;
}

}  // namespace olv

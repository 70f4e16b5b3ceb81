#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <optional>
#include <vector>

#include "olv/network.hpp"
#include "olv/rng.hpp"
#include "olv/spectral.hpp"
#include "olv/study.hpp"
#include "olv/supervision.hpp"

using namespace olv;

namespace {

// Double-precision toy scale: l_ws=8, dims 4/16/16, one block with 2 heads,
// spectra 16x16 through conv widths 4/8/16.
ModelConfig toy_config(EncoderKind kind = EncoderKind::Transformer, bool spectrum = true) {
  ModelConfig cfg;
  cfg.l_ws = 8;
  cfg.embed_dims = {4, 16, 16};
  cfg.transformer_depth = 1;
  cfg.transformer_heads = 2;
  cfg.freq_feat_dim = 16;
  cfg.encoder_kind = kind;
  cfg.use_spectrum = spectrum;
  cfg.seed = 7;
  return cfg;
}

std::vector<WindowSampleT<double>> toy_batch(const ModelConfig& cfg, int B, int spec_hw,
                                             std::uint64_t seed) {
  Rng rng(seed);
  std::vector<WindowSampleT<double>> windows(B);
  for (int b = 0; b < B; ++b) {
    auto& w = windows[b];
    w.values.resize(kNumChannels, cfg.l_ws);
    for (Eigen::Index i = 0; i < w.values.size(); ++i)
      w.values.data()[i] = rng.normal(0, 1);
    if (cfg.use_spectrum) {
      w.spectra.resize(kNumChannels);
      for (int c = 0; c < kNumChannels; ++c) {
        w.spectra[c].resize(spec_hw, spec_hw);
        for (Eigen::Index i = 0; i < w.spectra[c].size(); ++i)
          w.spectra[c].data()[i] = std::abs(rng.normal(0, 1));
      }
    }
    const std::optional<int> t_event = b % 2 == 0 ? std::optional<int>(cfg.l_ws / 2) : std::nullopt;
    auto [target, contains] = make_target(0, cfg.l_ws, t_event, cfg.sigma);
    w.target = target;
    w.contains_event = contains;
  }
  return windows;
}

// Training loss of the batch as a pure function of the parameters.
double batch_loss(const Model<double>& model, const std::vector<WindowSampleT<double>>& windows) {
  std::vector<const WindowSampleT<double>*> batch;
  for (const auto& w : windows) batch.push_back(&w);
  typename Model<double>::Tape tape;
  const auto out = model.forward(batch, &tape);
  double loss = 0.0;
  const auto& cfg = model.config();
  for (std::size_t b = 0; b < windows.size(); ++b) {
    const VecX<double> scores = out.scores.row(static_cast<int>(b)).transpose();
    const std::optional<double> aux =
        out.has_aux ? std::optional<double>(out.aux_prob[static_cast<int>(b)]) : std::nullopt;
    loss += bce_loss(scores, windows[b].target, aux, windows[b].contains_event,
                     cfg.aux_loss_weight);
  }
  return loss / static_cast<double>(windows.size());
}

ParamStore<double> analytic_grad(const Model<double>& model,
                                 const std::vector<WindowSampleT<double>>& windows) {
  std::vector<const WindowSampleT<double>*> batch;
  for (const auto& w : windows) batch.push_back(&w);
  typename Model<double>::Tape tape;
  const auto out = model.forward(batch, &tape);
  const auto& cfg = model.config();
  const int B = static_cast<int>(windows.size());
  MatX<double> dlogits(B, cfg.l_ws);
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < cfg.l_ws; ++j)
      dlogits(b, j) = (out.scores(b, j) - windows[b].target[j]) / (cfg.l_ws * B);
  VecX<double> daux;
  if (out.has_aux && cfg.aux_loss_weight > 0.0) {
    daux.resize(B);
    for (int b = 0; b < B; ++b)
      daux[b] = cfg.aux_loss_weight *
                (out.aux_prob[b] - (windows[b].contains_event ? 1.0 : 0.0)) / B;
  }
  return model.backward(batch, tape, dlogits, daux);
}

// Central finite differences vs. the analytic gradient, compared per named
// block with a relative L2 criterion.
void check_gradients(const ModelConfig& cfg, int spec_hw = 16, double tol = 1e-4) {
  Model<double> model(cfg);
  model.init(11);
  const auto windows = toy_batch(cfg, 2, spec_hw, 3);
  const auto grad = analytic_grad(model, windows);

  const double h = 1e-3;
  auto& flat = model.params().flat();
  for (std::size_t blk = 0; blk < model.params().blocks().size(); ++blk) {
    const auto& info = model.params().blocks()[blk];
    if (!info.trainable) continue;
    double num_sq = 0.0, diff_sq = 0.0;
    for (Eigen::Index i = info.offset; i < info.offset + info.rows * info.cols; ++i) {
      const double orig = flat[i];
      flat[i] = orig + h;
      const double up = batch_loss(model, windows);
      flat[i] = orig - h;
      const double down = batch_loss(model, windows);
      flat[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double an = grad.flat()[i];
      num_sq += fd * fd;
      diff_sq += (fd - an) * (fd - an);
    }
    const double rel = std::sqrt(diff_sq) / std::max(std::sqrt(num_sq), 1e-12);
    INFO("block " << info.name);
    CHECK(rel < tol);
  }
}

}  // namespace

TEST_CASE("transformer model gradients match finite differences") {
  check_gradients(toy_config(EncoderKind::Transformer, true));
}

TEST_CASE("lstm model gradients match finite differences") {
  check_gradients(toy_config(EncoderKind::LSTM, true));
}

TEST_CASE("mlp model gradients match finite differences") {
  check_gradients(toy_config(EncoderKind::MLP, true));
}

TEST_CASE("gradients without the spectrum branch match finite differences") {
  check_gradients(toy_config(EncoderKind::Transformer, false));
}

TEST_CASE("input gradient through values and wavelet spectra matches finite differences") {
  ModelConfig cfg = toy_config(EncoderKind::Transformer, true);
  Model<double> model(cfg);
  model.init(21);
  MorletBank<double> bank(cfg.l_ws);

  Rng rng(5);
  MatX<double> values(kNumChannels, cfg.l_ws);
  for (Eigen::Index i = 0; i < values.size(); ++i) values.data()[i] = rng.normal(0, 1);

  const int position = 3;
  WindowScorer<double> scorer(model, &bank, position);
  const auto [f0, grad] = scorer(values);
  CHECK(f0 > 0.0);
  CHECK(f0 < 1.0);

  const double h = 1e-4;
  double num_sq = 0.0, diff_sq = 0.0;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    MatX<double> up = values, down = values;
    up.data()[i] += h;
    down.data()[i] -= h;
    const double fd = (scorer(up).first - scorer(down).first) / (2.0 * h);
    num_sq += fd * fd;
    diff_sq += (fd - grad.data()[i]) * (fd - grad.data()[i]);
  }
  const double rel = std::sqrt(diff_sq) / std::max(std::sqrt(num_sq), 1e-12);
  CHECK(rel < 1e-4);
}

TEST_CASE("masked channel receives zero input gradient") {
  ModelConfig cfg = toy_config(EncoderKind::MLP, true);
  cfg.masked_channel = static_cast<int>(ChannelId::PEEP);
  Model<double> model(cfg);
  model.init(31);
  MorletBank<double> bank(cfg.l_ws);
  Rng rng(6);
  MatX<double> values(kNumChannels, cfg.l_ws);
  for (Eigen::Index i = 0; i < values.size(); ++i) values.data()[i] = rng.normal(0, 1);
  const auto [f, grad] = WindowScorer<double>(model, &bank, 2)(values);
  (void)f;
  CHECK(grad.row(cfg.masked_channel).cwiseAbs().maxCoeff() == 0.0);
  CHECK(grad.cwiseAbs().maxCoeff() > 0.0);
}

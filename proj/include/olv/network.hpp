#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "olv/common.hpp"
#include "olv/domain.hpp"
#include "olv/rng.hpp"

namespace olv {

// ---------------------------------------------------------------------------
// Flat parameter storage with named blocks. All learnable state (and the
// batch-norm running statistics, marked non-trainable) lives in one
// contiguous vector so the optimizer, the checkpoint writer and the gradient
// checker can walk it uniformly.
// ---------------------------------------------------------------------------

struct BlockInfo {
  std::string name;
  Eigen::Index rows = 0, cols = 0;
  Eigen::Index offset = 0;
  bool trainable = true;
};

template <typename S>
class ParamStore {
 public:
  int add(std::string name, Eigen::Index rows, Eigen::Index cols, bool trainable = true) {
    if (sealed_) throw Error(ErrorKind::Model, "parameter layout already sealed");
    BlockInfo b;
    b.name = std::move(name);
    b.rows = rows;
    b.cols = cols;
    b.offset = total_;
    b.trainable = trainable;
    total_ += rows * cols;
    blocks_.push_back(std::move(b));
    return static_cast<int>(blocks_.size()) - 1;
  }

  void seal() {
    flat_ = VecX<S>::Zero(total_);
    sealed_ = true;
  }

  Eigen::Index size() const { return total_; }
  const std::vector<BlockInfo>& blocks() const { return blocks_; }
  VecX<S>& flat() { return flat_; }
  const VecX<S>& flat() const { return flat_; }

  Eigen::Map<MatX<S>> mat(int id) {
    const auto& b = blocks_[id];
    return Eigen::Map<MatX<S>>(flat_.data() + b.offset, b.rows, b.cols);
  }
  Eigen::Map<const MatX<S>> mat(int id) const {
    const auto& b = blocks_[id];
    return Eigen::Map<const MatX<S>>(flat_.data() + b.offset, b.rows, b.cols);
  }
  Eigen::Map<VecX<S>> vec(int id) {
    const auto& b = blocks_[id];
    return Eigen::Map<VecX<S>>(flat_.data() + b.offset, b.rows * b.cols);
  }
  Eigen::Map<const VecX<S>> vec(int id) const {
    const auto& b = blocks_[id];
    return Eigen::Map<const VecX<S>>(flat_.data() + b.offset, b.rows * b.cols);
  }

  std::optional<int> find(const std::string& name) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      if (blocks_[i].name == name) return static_cast<int>(i);
    return std::nullopt;
  }

  ParamStore<S> zeros_like() const {
    ParamStore<S> g;
    g.blocks_ = blocks_;
    g.total_ = total_;
    g.seal();
    return g;
  }

 private:
  std::vector<BlockInfo> blocks_;
  Eigen::Index total_ = 0;
  VecX<S> flat_;
  bool sealed_ = false;
};

// ---------------------------------------------------------------------------
// Layer primitives. Activations are (rows = batch*positions, cols =
// features); weights are (in_features x out_features).
// ---------------------------------------------------------------------------

namespace nn {

template <typename S>
S sigmoid(S z) {
  if (z >= S(0)) return S(1) / (S(1) + std::exp(-z));
  const S e = std::exp(z);
  return e / (S(1) + e);
}

template <typename S>
MatX<S> linear(const MatX<S>& x, Eigen::Map<const MatX<S>> w, Eigen::Map<const MatX<S>> b) {
  MatX<S> y = x * w;
  y.rowwise() += Eigen::Map<const VecX<S>>(b.data(), b.size()).transpose();
  return y;
}

// Accumulates dW/db and returns dX.
template <typename S>
MatX<S> linear_backward(const MatX<S>& x, Eigen::Map<const MatX<S>> w, const MatX<S>& dy,
                        Eigen::Map<MatX<S>> dw, Eigen::Map<MatX<S>> db) {
  dw.noalias() += x.transpose() * dy;
  Eigen::Map<VecX<S>>(db.data(), db.size()) += dy.colwise().sum().transpose();
  return dy * w.transpose();
}

template <typename S>
void relu_inplace(MatX<S>& x) {
  x = x.cwiseMax(S(0));
}

template <typename S>
MatX<S> relu_backward(const MatX<S>& pre, const MatX<S>& dy) {
  return ((pre.array() > S(0)).template cast<S>() * dy.array()).matrix();
}

// Same mask recovered from the post-activation values (pre > 0 iff post > 0).
template <typename S>
MatX<S> relu_backward_from_output(const MatX<S>& post, const MatX<S>& dy) {
  return ((post.array() > S(0)).template cast<S>() * dy.array()).matrix();
}

template <typename S>
struct LayerNormCache {
  MatX<S> xhat;
  VecX<S> inv_std;
};

template <typename S>
MatX<S> layer_norm(const MatX<S>& x, Eigen::Map<const MatX<S>> gamma,
                   Eigen::Map<const MatX<S>> beta, LayerNormCache<S>* cache) {
  constexpr S kEps = S(1e-5);
  const Eigen::Index n = x.rows(), d = x.cols();
  MatX<S> xhat(n, d);
  VecX<S> inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mu = x.row(i).mean();
    const S var = (x.row(i).array() - mu).square().mean();
    const S is = S(1) / std::sqrt(var + kEps);
    xhat.row(i) = (x.row(i).array() - mu) * is;
    inv_std[i] = is;
  }
  const auto g = Eigen::Map<const VecX<S>>(gamma.data(), d).transpose().array();
  const auto b = Eigen::Map<const VecX<S>>(beta.data(), d).transpose().array();
  MatX<S> y(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    y.row(i) = xhat.row(i).array() * g + b;
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename S>
MatX<S> layer_norm_backward(const LayerNormCache<S>& c, Eigen::Map<const MatX<S>> gamma,
                            const MatX<S>& dy, Eigen::Map<MatX<S>> dgamma,
                            Eigen::Map<MatX<S>> dbeta) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  const auto g = Eigen::Map<const VecX<S>>(gamma.data(), d).transpose().array();
  Eigen::Map<VecX<S>>(dgamma.data(), d) +=
      (dy.array() * c.xhat.array()).colwise().sum().matrix().transpose();
  Eigen::Map<VecX<S>>(dbeta.data(), d) += dy.colwise().sum().transpose();
  MatX<S> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto dxhat = (dy.row(i).array() * g).matrix().eval();
    const S m1 = dxhat.mean();
    const S m2 = (dxhat.array() * c.xhat.row(i).array()).mean();
    dx.row(i) = ((dxhat.array() - m1 - c.xhat.row(i).array() * m2) * c.inv_std[i]).matrix();
  }
  return dx;
}

template <typename S>
void softmax_rows(MatX<S>& z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const S m = z.row(i).maxCoeff();
    z.row(i) = (z.row(i).array() - m).exp();
    z.row(i) /= z.row(i).sum();
  }
}

template <typename S>
MatX<S> softmax_backward(const MatX<S>& a, const MatX<S>& da) {
  MatX<S> dz(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const S dot = a.row(i).dot(da.row(i));
    dz.row(i) = a.row(i).array() * (da.row(i).array() - dot);
  }
  return dz;
}

}  // namespace nn

// ---------------------------------------------------------------------------
// The model: per-minute embedding stack, learnable positional embedding, a
// temporal encoder (transformer blocks / LSTM / per-position MLP), a
// post-encoder affine layer, the spectrum CNN branch, the per-position fusion
// classifier and the window-level auxiliary head.
// ---------------------------------------------------------------------------

template <typename S>
struct BatchGrad {
  std::vector<MatX<S>> d_values;                // per window, 7 x l_ws
  std::vector<std::vector<MatX<S>>> d_spectra;  // per window, 7 images
};

template <typename S>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (const auto v = cfg_.validate(); !v.empty())
      throw Error(ErrorKind::Usage, "invalid model config: " + v.front());
    build_layout();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return p_; }
  const ParamStore<S>& params() const { return p_; }

  // Deterministic fan-in-scaled initialization.
  void init(std::uint64_t seed) {
    p_.flat().setZero();
    Rng rng(seed);
    const auto uniform_fill = [&](int id, double bound) {
      auto v = p_.vec(id);
      for (Eigen::Index i = 0; i < v.size(); ++i)
        v[i] = static_cast<S>(rng.uniform(-bound, bound));
    };
    const auto kaiming = [&](int id, Eigen::Index fan_in) {
      uniform_fill(id, std::sqrt(6.0 / static_cast<double>(fan_in)));
    };
    const auto xavier = [&](int id, Eigen::Index fan_in, Eigen::Index fan_out) {
      uniform_fill(id, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
    };

    kaiming(id_.embed_w[0], kNumChannels);
    kaiming(id_.embed_w[1], cfg_.embed_dims[0]);
    xavier(id_.embed_w[2], cfg_.embed_dims[1], cfg_.embed_dims[2]);
    {
      auto v = p_.vec(id_.pos);
      for (Eigen::Index i = 0; i < v.size(); ++i)
        v[i] = static_cast<S>(rng.normal(0.0, 0.02));
    }
    const int d = cfg_.d_model();
    if (cfg_.encoder_kind == EncoderKind::Transformer) {
      for (const auto& blk : id_.blocks) {
        xavier(blk.wq, d, d);
        xavier(blk.wk, d, d);
        xavier(blk.wv, d, d);
        xavier(blk.wo, d, d);
        p_.vec(blk.ln1_g).setOnes();
        p_.vec(blk.ln2_g).setOnes();
        kaiming(blk.ffn_w1, d);
        xavier(blk.ffn_w2, d * cfg_.ffn_mult, d);
      }
    } else if (cfg_.encoder_kind == EncoderKind::LSTM) {
      xavier(id_.lstm_wx, d, 4 * d);
      xavier(id_.lstm_wh, d, 4 * d);
      p_.vec(id_.lstm_b).segment(d, d).setOnes();  // forget-gate bias
    } else {
      kaiming(id_.mlp_w1, d);
      xavier(id_.mlp_w2, d, d);
    }
    xavier(id_.post_w, d, d);
    if (cfg_.use_spectrum) {
      const auto cw = conv_widths();
      kaiming(id_.conv_w[0], kNumChannels * 9);
      kaiming(id_.conv_w[1], cw[0] * 9);
      kaiming(id_.conv_w[2], cw[1] * 9);
      for (int l = 0; l < 3; ++l) {
        p_.vec(id_.bn_g[l]).setOnes();
        p_.vec(id_.bn_rv[l]).setOnes();
      }
      xavier(id_.proj_w, cw[2], cfg_.freq_feat_dim);
      xavier(id_.aux_w, cfg_.freq_feat_dim, 1);
    }
    xavier(id_.cls_w, cls_in_dim(), 1);
  }

  struct Tape;

  struct Output {
    MatX<S> logits;     // B x l_ws
    MatX<S> scores;     // sigmoid(logits)
    VecX<S> aux_logit;  // B; empty when the spectrum branch is off
    VecX<S> aux_prob;
    bool has_aux = false;
  };

  // Forward over a batch of windows. A tape enables caching for backward and
  // (by default) batch-statistic batch norm; without a tape the pass runs on
  // the running statistics. Dropout draws from `dropout_rng` when configured.
  Output forward(const std::vector<const WindowSampleT<S>*>& batch, Tape* tape = nullptr,
                 Rng* dropout_rng = nullptr, bool batch_norm_train = true) const {
    const int B = static_cast<int>(batch.size());
    if (B == 0) throw Error(ErrorKind::Model, "empty batch");
    const int l = cfg_.l_ws;
    const int d = cfg_.d_model();
    for (const auto* w : batch) {
      if (w->values.rows() != kNumChannels || w->values.cols() != l)
        throw Error(ErrorKind::Model, "window values must be 7 x l_ws");
      if (cfg_.use_spectrum && static_cast<int>(w->spectra.size()) != kNumChannels)
        throw Error(ErrorKind::Model, "spectra required when use_spectrum is set");
    }
    if (tape) {
      tape->B = B;
      tape->l = l;
      tape->rng = dropout_rng;
      tape->bn_batch_stats = batch_norm_train;
    }

    // per-minute inputs, stacked (B*l x 7), masked channel zeroed
    MatX<S> x_in(static_cast<Eigen::Index>(B) * l, kNumChannels);
    for (int w = 0; w < B; ++w)
      x_in.middleRows(static_cast<Eigen::Index>(w) * l, l) = batch[w]->values.transpose();
    if (cfg_.masked_channel >= 0) x_in.col(cfg_.masked_channel).setZero();
    if (tape) tape->x_in = x_in;

    MatX<S> e3 = stage_embed(x_in, tape);
    {
      auto pos = p_.mat(id_.pos);  // l x d
      for (int w = 0; w < B; ++w)
        e3.middleRows(static_cast<Eigen::Index>(w) * l, l) += pos;
    }
    if (tape) tape->enc_in = e3;

    MatX<S> enc = stage_encoder(e3, B, tape);
    MatX<S> feats = nn::linear(enc, p_.mat(id_.post_w), p_.mat(id_.post_b));
    if (tape) {
      tape->enc_out = enc;
      tape->post_out = feats;
    }

    Output out;
    if (cfg_.use_spectrum) {
      MatX<S> freq = stage_cnn(batch, tape);  // B x freq_dim
      if (tape) tape->freq = freq;
      MatX<S> cls_in(static_cast<Eigen::Index>(B) * l, d + cfg_.freq_feat_dim);
      cls_in.leftCols(d) = feats;
      for (int w = 0; w < B; ++w)
        cls_in.block(static_cast<Eigen::Index>(w) * l, d, l, cfg_.freq_feat_dim) =
            freq.row(w).replicate(l, 1);
      if (tape) tape->cls_in = cls_in;
      MatX<S> logits = nn::linear(cls_in, p_.mat(id_.cls_w), p_.mat(id_.cls_b));
      out.logits = reshape_scores(logits, B, l);
      MatX<S> aux = nn::linear(freq, p_.mat(id_.aux_w), p_.mat(id_.aux_b));
      out.aux_logit = aux.col(0);
      out.has_aux = true;
    } else {
      if (tape) tape->cls_in = feats;
      MatX<S> logits = nn::linear(feats, p_.mat(id_.cls_w), p_.mat(id_.cls_b));
      out.logits = reshape_scores(logits, B, l);
    }
    out.scores = out.logits.unaryExpr([](S z) { return nn::sigmoid(z); });
    if (out.has_aux)
      out.aux_prob = out.aux_logit.unaryExpr([](S z) { return nn::sigmoid(z); });
    return out;
  }

  // Gradients w.r.t. every parameter given d(loss)/d(logits) and
  // d(loss)/d(aux logit); optionally also the input gradients (window values
  // and spectra) for attribution.
  ParamStore<S> backward(const std::vector<const WindowSampleT<S>*>& batch, const Tape& tape,
                         const MatX<S>& dlogits, const VecX<S>& daux,
                         BatchGrad<S>* input_grad = nullptr) const {
    const int B = tape.B, l = tape.l, d = cfg_.d_model();
    ParamStore<S> g = p_.zeros_like();

    MatX<S> dlog_flat(static_cast<Eigen::Index>(B) * l, 1);
    for (int w = 0; w < B; ++w)
      dlog_flat.col(0).segment(static_cast<Eigen::Index>(w) * l, l) = dlogits.row(w).transpose();

    MatX<S> d_cls_in = nn::linear_backward(tape.cls_in, p_.mat(id_.cls_w), dlog_flat,
                                           g.mat(id_.cls_w), g.mat(id_.cls_b));

    MatX<S> d_feats;
    if (cfg_.use_spectrum) {
      d_feats = d_cls_in.leftCols(d);
      MatX<S> d_freq = MatX<S>::Zero(B, cfg_.freq_feat_dim);
      for (int w = 0; w < B; ++w)
        d_freq.row(w) = d_cls_in.block(static_cast<Eigen::Index>(w) * l, d, l, cfg_.freq_feat_dim)
                            .colwise()
                            .sum();
      if (daux.size() > 0) {
        MatX<S> daux_m(B, 1);
        daux_m.col(0) = daux;
        d_freq += nn::linear_backward(tape.freq, p_.mat(id_.aux_w), daux_m, g.mat(id_.aux_w),
                                      g.mat(id_.aux_b));
      }
      backward_cnn(tape, d_freq, g, input_grad);
    } else {
      d_feats = d_cls_in;
    }

    MatX<S> d_enc = nn::linear_backward(tape.enc_out, p_.mat(id_.post_w), d_feats,
                                        g.mat(id_.post_w), g.mat(id_.post_b));
    MatX<S> d_enc_in = backward_encoder(tape, d_enc, g);

    {
      auto dpos = g.mat(id_.pos);
      for (int w = 0; w < B; ++w)
        dpos += d_enc_in.middleRows(static_cast<Eigen::Index>(w) * l, l);
    }

    MatX<S> d_x_in = backward_embed(tape, d_enc_in, g);
    if (input_grad) {
      if (cfg_.masked_channel >= 0) d_x_in.col(cfg_.masked_channel).setZero();
      input_grad->d_values.resize(B);
      for (int w = 0; w < B; ++w)
        input_grad->d_values[w] =
            d_x_in.middleRows(static_cast<Eigen::Index>(w) * l, l).transpose();
    }
    return g;
  }

  // Fold the batch statistics cached on the tape into the running estimates.
  void commit_bn(const Tape& tape, double momentum = 0.1) {
    if (!cfg_.use_spectrum || !tape.bn_batch_stats) return;
    for (int layer = 0; layer < 3; ++layer) {
      const auto& ct = tape.conv[layer];
      auto rm = p_.vec(id_.bn_rm[layer]);
      auto rv = p_.vec(id_.bn_rv[layer]);
      rm = ((1.0 - momentum) * rm.template cast<double>() +
            momentum * ct.batch_mean.template cast<double>())
               .template cast<S>();
      rv = ((1.0 - momentum) * rv.template cast<double>() +
            momentum * ct.batch_var.template cast<double>())
               .template cast<S>();
    }
  }

  // --- convenience single-window wrappers -------------------------------

  Output forward_single(const WindowSampleT<S>& w) const { return forward({&w}); }

  // l_ws x d feature sequence out of the per-minute embedding stack.
  MatX<S> embed_single(const MatX<S>& values) const {
    MatX<S> x_in = values.transpose();
    if (cfg_.masked_channel >= 0) x_in.col(cfg_.masked_channel).setZero();
    return stage_embed(x_in, nullptr);
  }

  // Positional embedding + encoder blocks + post-encoder affine, B = 1.
  MatX<S> encode_temporal_single(const MatX<S>& f) const {
    if (f.rows() != cfg_.l_ws || f.cols() != cfg_.d_model())
      throw Error(ErrorKind::Model, "encoder input must be l_ws x d_model");
    MatX<S> x = f + p_.mat(id_.pos);
    MatX<S> enc = stage_encoder(x, 1, nullptr);
    return nn::linear(enc, p_.mat(id_.post_w), p_.mat(id_.post_b));
  }

  VecX<S> encode_frequency_single(const std::vector<MatX<S>>& spectra) const {
    if (!cfg_.use_spectrum) throw Error(ErrorKind::Model, "spectrum branch disabled");
    WindowSampleT<S> w;
    w.values = MatX<S>::Zero(kNumChannels, cfg_.l_ws);
    w.spectra = spectra;
    std::vector<const WindowSampleT<S>*> batch = {&w};
    MatX<S> freq = stage_cnn(batch, nullptr);
    return freq.row(0).transpose();
  }

  struct Tape {
    int B = 0, l = 0;
    Rng* rng = nullptr;
    bool bn_batch_stats = true;
    MatX<S> x_in;
    MatX<S> e_pre[2];
    MatX<S> e_post[2];
    MatX<S> enc_in;
    struct BlockTape {
      MatX<S> x;
      MatX<S> q, k, v;
      std::vector<MatX<S>> attn;  // B*H softmax matrices, each l x l
      MatX<S> concat;
      MatX<S> res1;
      nn::LayerNormCache<S> ln1;
      MatX<S> ln1_out;
      MatX<S> ffn_pre, ffn_post;
      MatX<S> res2;
      nn::LayerNormCache<S> ln2;
      MatX<S> drop1, drop2;  // dropout masks; empty when dropout == 0
    };
    std::vector<BlockTape> blocks;
    struct LstmTape {
      MatX<S> x;
      std::vector<MatX<S>> gates;  // per t: B x 4d post-activation [i f g o]
      std::vector<MatX<S>> c, tanh_c, h;
    } lstm;
    MatX<S> mlp_x, mlp_pre, mlp_post;
    MatX<S> enc_out;
    MatX<S> post_out;
    struct ConvTape {
      MatX<S> patches;  // B*P x C_in*9
      MatX<S> xhat;     // B*P x C_out
      VecX<S> inv_std;  // per out-channel
      VecX<S> batch_mean, batch_var;
      MatX<S> post;     // after ReLU
      int h_in = 0, w_in = 0, h_out = 0, w_out = 0, c_in = 0, c_out = 0;
    };
    std::vector<ConvTape> conv;
    MatX<S> gap;   // B x C3
    MatX<S> freq;  // B x freq_dim
    MatX<S> cls_in;
  };

 private:
  struct BlockIds {
    int wq, bq, wk, bk, wv, bv, wo, bo;
    int ln1_g, ln1_b, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln2_g, ln2_b;
  };
  struct Ids {
    int embed_w[3], embed_b[3];
    int pos;
    std::vector<BlockIds> blocks;
    int lstm_wx = -1, lstm_wh = -1, lstm_b = -1;
    int mlp_w1 = -1, mlp_b1 = -1, mlp_w2 = -1, mlp_b2 = -1;
    int post_w, post_b;
    int conv_w[3] = {-1, -1, -1}, conv_b[3] = {-1, -1, -1};
    int bn_g[3] = {-1, -1, -1}, bn_b[3] = {-1, -1, -1};
    int bn_rm[3] = {-1, -1, -1}, bn_rv[3] = {-1, -1, -1};
    int proj_w = -1, proj_b = -1, aux_w = -1, aux_b = -1;
    int cls_w, cls_b;
  };

  std::array<int, 3> conv_widths() const {
    return {cfg_.freq_feat_dim / 4, cfg_.freq_feat_dim / 2, cfg_.freq_feat_dim};
  }

  int cls_in_dim() const {
    return cfg_.d_model() + (cfg_.use_spectrum ? cfg_.freq_feat_dim : 0);
  }

  void build_layout() {
    const int d = cfg_.d_model();
    const int e0 = cfg_.embed_dims[0], e1 = cfg_.embed_dims[1];
    id_.embed_w[0] = p_.add("embed.w0", kNumChannels, e0);
    id_.embed_b[0] = p_.add("embed.b0", 1, e0);
    id_.embed_w[1] = p_.add("embed.w1", e0, e1);
    id_.embed_b[1] = p_.add("embed.b1", 1, e1);
    id_.embed_w[2] = p_.add("embed.w2", e1, d);
    id_.embed_b[2] = p_.add("embed.b2", 1, d);
    id_.pos = p_.add("pos", cfg_.l_ws, d);

    if (cfg_.encoder_kind == EncoderKind::Transformer) {
      const int h = d * cfg_.ffn_mult;
      for (int i = 0; i < cfg_.transformer_depth; ++i) {
        const std::string pre = "blk" + std::to_string(i) + ".";
        BlockIds b;
        b.wq = p_.add(pre + "wq", d, d);
        b.bq = p_.add(pre + "bq", 1, d);
        b.wk = p_.add(pre + "wk", d, d);
        b.bk = p_.add(pre + "bk", 1, d);
        b.wv = p_.add(pre + "wv", d, d);
        b.bv = p_.add(pre + "bv", 1, d);
        b.wo = p_.add(pre + "wo", d, d);
        b.bo = p_.add(pre + "bo", 1, d);
        b.ln1_g = p_.add(pre + "ln1.g", 1, d);
        b.ln1_b = p_.add(pre + "ln1.b", 1, d);
        b.ffn_w1 = p_.add(pre + "ffn.w1", d, h);
        b.ffn_b1 = p_.add(pre + "ffn.b1", 1, h);
        b.ffn_w2 = p_.add(pre + "ffn.w2", h, d);
        b.ffn_b2 = p_.add(pre + "ffn.b2", 1, d);
        b.ln2_g = p_.add(pre + "ln2.g", 1, d);
        b.ln2_b = p_.add(pre + "ln2.b", 1, d);
        id_.blocks.push_back(b);
      }
    } else if (cfg_.encoder_kind == EncoderKind::LSTM) {
      id_.lstm_wx = p_.add("lstm.wx", d, 4 * d);
      id_.lstm_wh = p_.add("lstm.wh", d, 4 * d);
      id_.lstm_b = p_.add("lstm.b", 1, 4 * d);
    } else {
      id_.mlp_w1 = p_.add("mlpenc.w1", d, d);
      id_.mlp_b1 = p_.add("mlpenc.b1", 1, d);
      id_.mlp_w2 = p_.add("mlpenc.w2", d, d);
      id_.mlp_b2 = p_.add("mlpenc.b2", 1, d);
    }
    id_.post_w = p_.add("post.w", d, d);
    id_.post_b = p_.add("post.b", 1, d);

    if (cfg_.use_spectrum) {
      const auto cw = conv_widths();
      int c_in = kNumChannels;
      for (int l = 0; l < 3; ++l) {
        const std::string pre = "cnn.c" + std::to_string(l + 1) + ".";
        id_.conv_w[l] = p_.add(pre + "w", c_in * 9, cw[l]);
        id_.conv_b[l] = p_.add(pre + "b", 1, cw[l]);
        id_.bn_g[l] = p_.add(pre + "bn.g", 1, cw[l]);
        id_.bn_b[l] = p_.add(pre + "bn.b", 1, cw[l]);
        id_.bn_rm[l] = p_.add(pre + "bn.rm", 1, cw[l], /*trainable=*/false);
        id_.bn_rv[l] = p_.add(pre + "bn.rv", 1, cw[l], /*trainable=*/false);
        c_in = cw[l];
      }
      id_.proj_w = p_.add("cnn.proj.w", cw[2], cfg_.freq_feat_dim);
      id_.proj_b = p_.add("cnn.proj.b", 1, cfg_.freq_feat_dim);
      id_.aux_w = p_.add("aux.w", cfg_.freq_feat_dim, 1);
      id_.aux_b = p_.add("aux.b", 1, 1);
    }
    id_.cls_w = p_.add("cls.w", cls_in_dim(), 1);
    id_.cls_b = p_.add("cls.b", 1, 1);
    p_.seal();
  }

  static MatX<S> reshape_scores(const MatX<S>& flat, int B, int l) {
    MatX<S> out(B, l);
    for (int w = 0; w < B; ++w)
      out.row(w) = flat.col(0).segment(static_cast<Eigen::Index>(w) * l, l).transpose();
    return out;
  }

  // --- embedding stack ---

  MatX<S> stage_embed(const MatX<S>& x_in, Tape* tape) const {
    MatX<S> a = nn::linear(x_in, p_.mat(id_.embed_w[0]), p_.mat(id_.embed_b[0]));
    if (tape) tape->e_pre[0] = a;
    nn::relu_inplace(a);
    if (tape) tape->e_post[0] = a;
    MatX<S> b = nn::linear(a, p_.mat(id_.embed_w[1]), p_.mat(id_.embed_b[1]));
    if (tape) tape->e_pre[1] = b;
    nn::relu_inplace(b);
    if (tape) tape->e_post[1] = b;
    return nn::linear(b, p_.mat(id_.embed_w[2]), p_.mat(id_.embed_b[2]));
  }

  MatX<S> backward_embed(const Tape& tape, const MatX<S>& d_e3, ParamStore<S>& g) const {
    MatX<S> db = nn::linear_backward(tape.e_post[1], p_.mat(id_.embed_w[2]), d_e3,
                                     g.mat(id_.embed_w[2]), g.mat(id_.embed_b[2]));
    db = nn::relu_backward(tape.e_pre[1], db);
    MatX<S> da = nn::linear_backward(tape.e_post[0], p_.mat(id_.embed_w[1]), db,
                                     g.mat(id_.embed_w[1]), g.mat(id_.embed_b[1]));
    da = nn::relu_backward(tape.e_pre[0], da);
    return nn::linear_backward(tape.x_in, p_.mat(id_.embed_w[0]), da, g.mat(id_.embed_w[0]),
                               g.mat(id_.embed_b[0]));
  }

  // --- temporal encoders ---

  MatX<S> stage_encoder(const MatX<S>& x, int B, Tape* tape) const {
    switch (cfg_.encoder_kind) {
      case EncoderKind::Transformer: return encoder_transformer(x, B, tape);
      case EncoderKind::LSTM: return encoder_lstm(x, B, tape);
      default: return encoder_mlp(x, tape);
    }
  }

  MatX<S> backward_encoder(const Tape& tape, const MatX<S>& d_out, ParamStore<S>& g) const {
    switch (cfg_.encoder_kind) {
      case EncoderKind::Transformer: return backward_transformer(tape, d_out, g);
      case EncoderKind::LSTM: return backward_lstm(tape, d_out, g);
      default: return backward_mlp(tape, d_out, g);
    }
  }

  MatX<S> maybe_dropout(MatX<S> x, Tape* tape, MatX<S>* mask_slot) const {
    if (cfg_.dropout <= 0.0 || !tape || !tape->rng) return x;
    const S keep = static_cast<S>(1.0 - cfg_.dropout);
    MatX<S> mask(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i)
      mask.data()[i] = tape->rng->uniform() < cfg_.dropout ? S(0) : S(1) / keep;
    *mask_slot = mask;
    return x.cwiseProduct(mask);
  }

  MatX<S> encoder_transformer(const MatX<S>& x0, int B, Tape* tape) const {
    const int l = cfg_.l_ws, d = cfg_.d_model();
    const int heads = cfg_.transformer_heads, hd = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(hd));
    MatX<S> x = x0;
    if (tape) tape->blocks.resize(id_.blocks.size());
    for (std::size_t bi = 0; bi < id_.blocks.size(); ++bi) {
      const auto& w = id_.blocks[bi];
      typename Tape::BlockTape* bt = tape ? &tape->blocks[bi] : nullptr;
      if (bt) bt->x = x;
      MatX<S> q = nn::linear(x, p_.mat(w.wq), p_.mat(w.bq));
      MatX<S> k = nn::linear(x, p_.mat(w.wk), p_.mat(w.bk));
      MatX<S> v = nn::linear(x, p_.mat(w.wv), p_.mat(w.bv));
      MatX<S> concat(x.rows(), d);
      std::vector<MatX<S>> attn_store;
      if (bt) attn_store.reserve(static_cast<std::size_t>(B) * heads);
      for (int wi = 0; wi < B; ++wi) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(wi) * l;
        for (int h = 0; h < heads; ++h) {
          const Eigen::Index c0 = static_cast<Eigen::Index>(h) * hd;
          MatX<S> a = scale * (q.block(r0, c0, l, hd) * k.block(r0, c0, l, hd).transpose());
          nn::softmax_rows(a);
          concat.block(r0, c0, l, hd).noalias() = a * v.block(r0, c0, l, hd);
          if (bt) attn_store.push_back(std::move(a));
        }
      }
      MatX<S> attn_proj = nn::linear(concat, p_.mat(w.wo), p_.mat(w.bo));
      if (bt) {
        bt->q = std::move(q);
        bt->k = std::move(k);
        bt->v = std::move(v);
        bt->attn = std::move(attn_store);
        bt->concat = std::move(concat);
      }
      attn_proj = maybe_dropout(std::move(attn_proj), tape, bt ? &bt->drop1 : nullptr);
      MatX<S> res1 = x + attn_proj;
      if (bt) bt->res1 = res1;
      MatX<S> ln1 =
          nn::layer_norm(res1, p_.mat(w.ln1_g), p_.mat(w.ln1_b), bt ? &bt->ln1 : nullptr);
      if (bt) bt->ln1_out = ln1;
      MatX<S> hpre = nn::linear(ln1, p_.mat(w.ffn_w1), p_.mat(w.ffn_b1));
      if (bt) bt->ffn_pre = hpre;
      nn::relu_inplace(hpre);
      if (bt) bt->ffn_post = hpre;
      MatX<S> ffn_out = nn::linear(hpre, p_.mat(w.ffn_w2), p_.mat(w.ffn_b2));
      ffn_out = maybe_dropout(std::move(ffn_out), tape, bt ? &bt->drop2 : nullptr);
      MatX<S> res2 = ln1 + ffn_out;
      if (bt) bt->res2 = res2;
      x = nn::layer_norm(res2, p_.mat(w.ln2_g), p_.mat(w.ln2_b), bt ? &bt->ln2 : nullptr);
    }
    return x;
  }

  MatX<S> backward_transformer(const Tape& tape, const MatX<S>& d_out, ParamStore<S>& g) const {
    const int B = tape.B, l = tape.l, d = cfg_.d_model();
    const int heads = cfg_.transformer_heads, hd = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(hd));
    MatX<S> dx = d_out;
    for (int bi = static_cast<int>(id_.blocks.size()) - 1; bi >= 0; --bi) {
      const auto& w = id_.blocks[bi];
      const auto& bt = tape.blocks[bi];
      MatX<S> d_res2 =
          nn::layer_norm_backward(bt.ln2, p_.mat(w.ln2_g), dx, g.mat(w.ln2_g), g.mat(w.ln2_b));
      MatX<S> d_ffn_out = d_res2;
      if (bt.drop2.size() > 0) d_ffn_out = d_ffn_out.cwiseProduct(bt.drop2);
      MatX<S> d_hpost = nn::linear_backward(bt.ffn_post, p_.mat(w.ffn_w2), d_ffn_out,
                                            g.mat(w.ffn_w2), g.mat(w.ffn_b2));
      MatX<S> d_hpre = nn::relu_backward(bt.ffn_pre, d_hpost);
      MatX<S> d_ln1 = d_res2 + nn::linear_backward(bt.ln1_out, p_.mat(w.ffn_w1), d_hpre,
                                                   g.mat(w.ffn_w1), g.mat(w.ffn_b1));
      MatX<S> d_res1 =
          nn::layer_norm_backward(bt.ln1, p_.mat(w.ln1_g), d_ln1, g.mat(w.ln1_g), g.mat(w.ln1_b));
      MatX<S> d_attn_proj = d_res1;
      if (bt.drop1.size() > 0) d_attn_proj = d_attn_proj.cwiseProduct(bt.drop1);
      MatX<S> d_concat =
          nn::linear_backward(bt.concat, p_.mat(w.wo), d_attn_proj, g.mat(w.wo), g.mat(w.bo));
      MatX<S> dq = MatX<S>::Zero(bt.q.rows(), d);
      MatX<S> dk = MatX<S>::Zero(bt.q.rows(), d);
      MatX<S> dv = MatX<S>::Zero(bt.q.rows(), d);
      for (int wi = 0; wi < B; ++wi) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(wi) * l;
        for (int h = 0; h < heads; ++h) {
          const Eigen::Index c0 = static_cast<Eigen::Index>(h) * hd;
          const MatX<S>& a = bt.attn[static_cast<std::size_t>(wi) * heads + h];
          const auto d_oh = d_concat.block(r0, c0, l, hd);
          MatX<S> da = d_oh * bt.v.block(r0, c0, l, hd).transpose();
          dv.block(r0, c0, l, hd).noalias() += a.transpose() * d_oh;
          MatX<S> dz = nn::softmax_backward(a, da);
          dq.block(r0, c0, l, hd).noalias() += scale * (dz * bt.k.block(r0, c0, l, hd));
          dk.block(r0, c0, l, hd).noalias() += scale * (dz.transpose() * bt.q.block(r0, c0, l, hd));
        }
      }
      MatX<S> d_x = d_res1;
      d_x += nn::linear_backward(bt.x, p_.mat(w.wq), dq, g.mat(w.wq), g.mat(w.bq));
      d_x += nn::linear_backward(bt.x, p_.mat(w.wk), dk, g.mat(w.wk), g.mat(w.bk));
      d_x += nn::linear_backward(bt.x, p_.mat(w.wv), dv, g.mat(w.wv), g.mat(w.bv));
      dx = std::move(d_x);
    }
    return dx;
  }

  MatX<S> encoder_lstm(const MatX<S>& x, int B, Tape* tape) const {
    const int l = cfg_.l_ws, d = cfg_.d_model();
    auto wx = p_.mat(id_.lstm_wx);
    auto wh = p_.mat(id_.lstm_wh);
    const auto b = p_.vec(id_.lstm_b);
    MatX<S> h = MatX<S>::Zero(B, d), c = MatX<S>::Zero(B, d);
    MatX<S> out(static_cast<Eigen::Index>(B) * l, d);
    if (tape) {
      tape->lstm.x = x;
      tape->lstm.gates.resize(l);
      tape->lstm.c.resize(l);
      tape->lstm.tanh_c.resize(l);
      tape->lstm.h.resize(l);
    }
    MatX<S> xt(B, d);
    for (int t = 0; t < l; ++t) {
      for (int wi = 0; wi < B; ++wi)
        xt.row(wi) = x.row(static_cast<Eigen::Index>(wi) * l + t);
      MatX<S> z = xt * wx + h * wh;
      z.rowwise() += b.transpose();
      MatX<S> gates(B, 4 * d);
      gates.leftCols(2 * d) =
          z.leftCols(2 * d).unaryExpr([](S v) { return nn::sigmoid(v); });  // i, f
      gates.middleCols(2 * d, d) = z.middleCols(2 * d, d).array().tanh();   // g
      gates.rightCols(d) = z.rightCols(d).unaryExpr([](S v) { return nn::sigmoid(v); });  // o
      c = gates.middleCols(d, d).cwiseProduct(c) +
          gates.leftCols(d).cwiseProduct(gates.middleCols(2 * d, d));
      MatX<S> tc = c.array().tanh();
      h = gates.rightCols(d).cwiseProduct(tc);
      for (int wi = 0; wi < B; ++wi)
        out.row(static_cast<Eigen::Index>(wi) * l + t) = h.row(wi);
      if (tape) {
        tape->lstm.gates[t] = gates;
        tape->lstm.c[t] = c;
        tape->lstm.tanh_c[t] = tc;
        tape->lstm.h[t] = h;
      }
    }
    return out;
  }

  MatX<S> backward_lstm(const Tape& tape, const MatX<S>& d_out, ParamStore<S>& g) const {
    const int B = tape.B, l = tape.l, d = cfg_.d_model();
    auto wx = p_.mat(id_.lstm_wx);
    auto wh = p_.mat(id_.lstm_wh);
    MatX<S> dh = MatX<S>::Zero(B, d), dc = MatX<S>::Zero(B, d);
    MatX<S> dx = MatX<S>::Zero(static_cast<Eigen::Index>(B) * l, d);
    MatX<S> xt(B, d);
    for (int t = l - 1; t >= 0; --t) {
      for (int wi = 0; wi < B; ++wi)
        dh.row(wi) += d_out.row(static_cast<Eigen::Index>(wi) * l + t);
      const auto& gates = tape.lstm.gates[t];
      const auto i = gates.leftCols(d).array();
      const auto f = gates.middleCols(d, d).array();
      const auto gg = gates.middleCols(2 * d, d).array();
      const auto o = gates.rightCols(d).array();
      const auto tc = tape.lstm.tanh_c[t].array();
      dc.array() += dh.array() * o * (1 - tc * tc);
      const MatX<S> c_prev = t > 0 ? tape.lstm.c[t - 1] : MatX<S>::Zero(B, d);
      MatX<S> dz(B, 4 * d);
      dz.leftCols(d) = (dc.array() * gg * i * (1 - i)).matrix();                   // di
      dz.middleCols(d, d) = (dc.array() * c_prev.array() * f * (1 - f)).matrix();  // df
      dz.middleCols(2 * d, d) = (dc.array() * i * (1 - gg * gg)).matrix();         // dg
      dz.rightCols(d) = (dh.array() * tc * o * (1 - o)).matrix();                  // do
      dc = dc.cwiseProduct(gates.middleCols(d, d));

      for (int wi = 0; wi < B; ++wi)
        xt.row(wi) = tape.lstm.x.row(static_cast<Eigen::Index>(wi) * l + t);
      const MatX<S> h_prev = t > 0 ? tape.lstm.h[t - 1] : MatX<S>::Zero(B, d);
      g.mat(id_.lstm_wx).noalias() += xt.transpose() * dz;
      g.mat(id_.lstm_wh).noalias() += h_prev.transpose() * dz;
      g.vec(id_.lstm_b) += dz.colwise().sum().transpose();
      const MatX<S> dxt = dz * wx.transpose();
      for (int wi = 0; wi < B; ++wi)
        dx.row(static_cast<Eigen::Index>(wi) * l + t) = dxt.row(wi);
      dh = dz * wh.transpose();
    }
    return dx;
  }

  MatX<S> encoder_mlp(const MatX<S>& x, Tape* tape) const {
    if (tape) tape->mlp_x = x;
    MatX<S> h = nn::linear(x, p_.mat(id_.mlp_w1), p_.mat(id_.mlp_b1));
    if (tape) tape->mlp_pre = h;
    nn::relu_inplace(h);
    if (tape) tape->mlp_post = h;
    return nn::linear(h, p_.mat(id_.mlp_w2), p_.mat(id_.mlp_b2));
  }

  MatX<S> backward_mlp(const Tape& tape, const MatX<S>& d_out, ParamStore<S>& g) const {
    MatX<S> dh = nn::linear_backward(tape.mlp_post, p_.mat(id_.mlp_w2), d_out, g.mat(id_.mlp_w2),
                                     g.mat(id_.mlp_b2));
    dh = nn::relu_backward(tape.mlp_pre, dh);
    return nn::linear_backward(tape.mlp_x, p_.mat(id_.mlp_w1), dh, g.mat(id_.mlp_w1),
                               g.mat(id_.mlp_b1));
  }

  // --- spectrum CNN ---

  static int conv_out(int n) { return (n - 1) / 2 + 1; }  // k=3, stride=2, pad=1

  template <typename Accessor>
  static MatX<S> im2col(int B, int c_in, int h_in, int w_in, Accessor&& value) {
    const int h_out = conv_out(h_in), w_out = conv_out(w_in);
    const Eigen::Index p = static_cast<Eigen::Index>(h_out) * w_out;
    MatX<S> patches = MatX<S>::Zero(B * p, static_cast<Eigen::Index>(c_in) * 9);
    for (int b = 0; b < B; ++b) {
      for (int oy = 0; oy < h_out; ++oy) {
        for (int ox = 0; ox < w_out; ++ox) {
          const Eigen::Index row = b * p + static_cast<Eigen::Index>(oy) * w_out + ox;
          for (int c = 0; c < c_in; ++c) {
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = 2 * oy - 1 + ky;
              if (iy < 0 || iy >= h_in) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = 2 * ox - 1 + kx;
                if (ix < 0 || ix >= w_in) continue;
                patches(row, static_cast<Eigen::Index>(c) * 9 + ky * 3 + kx) = value(b, c, iy, ix);
              }
            }
          }
        }
      }
    }
    return patches;
  }

  template <typename Accumulator>
  static void col2im(const MatX<S>& d_patches, int B, int c_in, int h_in, int w_in,
                     Accumulator&& accum) {
    const int h_out = conv_out(h_in), w_out = conv_out(w_in);
    const Eigen::Index p = static_cast<Eigen::Index>(h_out) * w_out;
    for (int b = 0; b < B; ++b) {
      for (int oy = 0; oy < h_out; ++oy) {
        for (int ox = 0; ox < w_out; ++ox) {
          const Eigen::Index row = b * p + static_cast<Eigen::Index>(oy) * w_out + ox;
          for (int c = 0; c < c_in; ++c) {
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = 2 * oy - 1 + ky;
              if (iy < 0 || iy >= h_in) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = 2 * ox - 1 + kx;
                if (ix < 0 || ix >= w_in) continue;
                accum(b, c, iy, ix,
                      d_patches(row, static_cast<Eigen::Index>(c) * 9 + ky * 3 + kx));
              }
            }
          }
        }
      }
    }
  }

  MatX<S> stage_cnn(const std::vector<const WindowSampleT<S>*>& batch, Tape* tape) const {
    const int B = static_cast<int>(batch.size());
    for (const auto* w : batch) {
      for (const auto& img : w->spectra)
        if (img.rows() != w->spectra[0].rows() || img.cols() != w->spectra[0].cols())
          throw Error(ErrorKind::Model, "spectra images must share one shape");
    }
    const int hs = static_cast<int>(batch[0]->spectra[0].rows());
    const int ws = static_cast<int>(batch[0]->spectra[0].cols());
    const auto cw = conv_widths();
    const bool batch_stats = tape && tape->bn_batch_stats;
    if (tape) tape->conv.resize(3);

    MatX<S> act;
    int h = hs, w = ws, c_in = kNumChannels;
    for (int layer = 0; layer < 3; ++layer) {
      MatX<S> patches;
      if (layer == 0) {
        const int masked = cfg_.masked_channel;
        patches = im2col(B, c_in, h, w, [&](int b, int c, int y, int x) -> S {
          if (c == masked) return S(0);
          return batch[b]->spectra[c](y, x);
        });
      } else {
        const int w_prev = w;
        const Eigen::Index p_prev = static_cast<Eigen::Index>(h) * w_prev;
        const MatX<S>& prev = act;
        patches = im2col(B, c_in, h, w, [&](int b, int c, int y, int x) -> S {
          return prev(b * p_prev + static_cast<Eigen::Index>(y) * w_prev + x, c);
        });
      }
      MatX<S> z = patches * p_.mat(id_.conv_w[layer]);
      z.rowwise() += p_.vec(id_.conv_b[layer]).transpose();

      const Eigen::Index n = z.rows();
      VecX<S> mean(cw[layer]), var(cw[layer]);
      if (batch_stats) {
        for (int cc = 0; cc < cw[layer]; ++cc) {
          mean[cc] = z.col(cc).mean();
          var[cc] = (z.col(cc).array() - mean[cc]).square().sum() / static_cast<S>(n);
        }
      } else {
        mean = p_.vec(id_.bn_rm[layer]);
        var = p_.vec(id_.bn_rv[layer]);
      }
      constexpr S kEps = S(1e-5);
      const VecX<S> inv_std = (var.array() + kEps).rsqrt();
      MatX<S> xhat =
          ((z.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array())
              .matrix();
      MatX<S> y = (xhat.array().rowwise() * p_.vec(id_.bn_g[layer]).transpose().array()).matrix();
      y.rowwise() += p_.vec(id_.bn_b[layer]).transpose();
      if (tape) {
        auto& ct = tape->conv[layer];
        ct.patches = std::move(patches);
        ct.xhat = std::move(xhat);
        ct.inv_std = inv_std;
        ct.batch_mean = mean;
        ct.batch_var = var;
        ct.h_in = h;
        ct.w_in = w;
        ct.c_in = c_in;
        ct.c_out = cw[layer];
        ct.h_out = conv_out(h);
        ct.w_out = conv_out(w);
      }
      nn::relu_inplace(y);
      if (tape) tape->conv[layer].post = y;
      act = std::move(y);
      h = conv_out(h);
      w = conv_out(w);
      c_in = cw[layer];
    }

    const Eigen::Index p = static_cast<Eigen::Index>(h) * w;
    MatX<S> gap(B, cw[2]);
    for (int b = 0; b < B; ++b)
      gap.row(b) = act.middleRows(b * p, p).colwise().mean();
    if (tape) tape->gap = gap;
    return nn::linear(gap, p_.mat(id_.proj_w), p_.mat(id_.proj_b));
  }

  void backward_cnn(const Tape& tape, const MatX<S>& d_freq, ParamStore<S>& g,
                    BatchGrad<S>* input_grad) const {
    const int B = tape.B;
    MatX<S> d_gap = nn::linear_backward(tape.gap, p_.mat(id_.proj_w), d_freq, g.mat(id_.proj_w),
                                        g.mat(id_.proj_b));
    const auto& last = tape.conv[2];
    const Eigen::Index p_last = static_cast<Eigen::Index>(last.h_out) * last.w_out;
    MatX<S> d_act(B * p_last, last.c_out);
    for (int b = 0; b < B; ++b)
      d_act.middleRows(b * p_last, p_last) =
          (d_gap.row(b) / static_cast<S>(p_last)).replicate(p_last, 1);

    for (int layer = 2; layer >= 0; --layer) {
      const auto& ct = tape.conv[layer];
      MatX<S> dy = nn::relu_backward_from_output(ct.post, d_act);

      // batch norm backward
      const Eigen::Index n = dy.rows();
      const auto gamma = p_.vec(id_.bn_g[layer]);
      g.vec(id_.bn_g[layer]) += (dy.array() * ct.xhat.array()).colwise().sum().matrix().transpose();
      g.vec(id_.bn_b[layer]) += dy.colwise().sum().transpose();
      MatX<S> dz(n, ct.c_out);
      if (tape.bn_batch_stats) {
        for (int cc = 0; cc < ct.c_out; ++cc) {
          const S sum_dy = dy.col(cc).sum();
          const S sum_dyx = dy.col(cc).dot(ct.xhat.col(cc));
          dz.col(cc) = (gamma[cc] * ct.inv_std[cc] / static_cast<S>(n)) *
                       (static_cast<S>(n) * dy.col(cc).array() - sum_dy -
                        ct.xhat.col(cc).array() * sum_dyx)
                           .matrix();
        }
      } else {
        for (int cc = 0; cc < ct.c_out; ++cc)
          dz.col(cc) = gamma[cc] * ct.inv_std[cc] * dy.col(cc);
      }

      // conv backward
      g.mat(id_.conv_w[layer]).noalias() += ct.patches.transpose() * dz;
      g.vec(id_.conv_b[layer]) += dz.colwise().sum().transpose();
      MatX<S> d_patches = dz * p_.mat(id_.conv_w[layer]).transpose();

      if (layer > 0) {
        const Eigen::Index p_prev = static_cast<Eigen::Index>(ct.h_in) * ct.w_in;
        MatX<S> d_prev = MatX<S>::Zero(B * p_prev, ct.c_in);
        col2im(d_patches, B, ct.c_in, ct.h_in, ct.w_in,
               [&](int b, int c, int y, int x, S v) {
                 d_prev(b * p_prev + static_cast<Eigen::Index>(y) * ct.w_in + x, c) += v;
               });
        d_act = std::move(d_prev);
      } else if (input_grad) {
        input_grad->d_spectra.assign(
            B, std::vector<MatX<S>>(kNumChannels, MatX<S>::Zero(ct.h_in, ct.w_in)));
        col2im(d_patches, B, ct.c_in, ct.h_in, ct.w_in,
               [&](int b, int c, int y, int x, S v) { input_grad->d_spectra[b][c](y, x) += v; });
        if (cfg_.masked_channel >= 0)
          for (int b = 0; b < B; ++b)
            input_grad->d_spectra[b][cfg_.masked_channel].setZero();
      }
    }
  }

  ModelConfig cfg_;
  ParamStore<S> p_;
  Ids id_;
};

}  // namespace olv

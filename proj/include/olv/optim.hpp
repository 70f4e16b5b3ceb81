#pragma once

#include <cmath>
#include <cstdint>

#include "olv/common.hpp"
#include "olv/network.hpp"

namespace olv {

struct OptimConfig {
  double lr = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0001;
  bool nesterov = true;  // Nesterov lookahead on the first moment; false: plain Adam
};

// Adam with optional Nesterov momentum (NAdam-style lookahead) and decoupled
// weight decay. Moments are kept flat alongside the parameters; blocks marked
// non-trainable (batch-norm running stats) are skipped.
template <typename S>
class AdamOptimizer {
 public:
  AdamOptimizer(const ParamStore<S>& params, OptimConfig cfg)
      : cfg_(cfg),
        m_(VecX<S>::Zero(params.size())),
        v_(VecX<S>::Zero(params.size())) {}

  std::int64_t step_count() const { return t_; }
  VecX<S>& first_moment() { return m_; }
  VecX<S>& second_moment() { return v_; }
  void set_step_count(std::int64_t t) { t_ = t; }

  void step(ParamStore<S>& params, const ParamStore<S>& grad) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc1_next = 1.0 - std::pow(b1, static_cast<double>(t_ + 1));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    auto& theta = params.flat();
    const auto& gflat = grad.flat();
    for (const auto& blk : params.blocks()) {
      if (!blk.trainable) continue;
      const Eigen::Index lo = blk.offset, n = blk.rows * blk.cols;
      for (Eigen::Index i = lo; i < lo + n; ++i) {
        const double gi = static_cast<double>(gflat[i]);
        const double mi = b1 * static_cast<double>(m_[i]) + (1.0 - b1) * gi;
        const double vi = b2 * static_cast<double>(v_[i]) + (1.0 - b2) * gi * gi;
        m_[i] = static_cast<S>(mi);
        v_[i] = static_cast<S>(vi);
        const double denom = std::sqrt(vi / bc2) + cfg_.eps;
        double update;
        if (cfg_.nesterov)
          update = (b1 * mi / bc1_next + (1.0 - b1) * gi / bc1) / denom;
        else
          update = (mi / bc1) / denom;
        double x = static_cast<double>(theta[i]);
        x -= cfg_.lr * update + cfg_.lr * cfg_.weight_decay * x;
        theta[i] = static_cast<S>(x);
      }
    }
  }

 private:
  OptimConfig cfg_;
  VecX<S> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace olv

#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "olv/common.hpp"
#include "olv/domain.hpp"

namespace olv {

inline constexpr int kSpectrumBins = 100;  // output image is bins x bins
inline constexpr double kMorletOmega0 = 6.0;

// Fourier period of the Morlet wavelet at scale s: lambda = s * 4*pi / (w0 + sqrt(2 + w0^2)).
inline double morlet_fourier_factor() {
  return 4.0 * M_PI / (kMorletOmega0 + std::sqrt(2.0 + kMorletOmega0 * kMorletOmega0));
}

template <typename S>
struct SpectrumStackT {
  std::vector<MatX<S>> data;  // 7 images, each kSpectrumBins x kSpectrumBins
  VecD scales;                // strictly increasing wavelet scales
};

using SpectrumStack = SpectrumStackT<float>;

// Cache of complex coefficients before magnitude/resampling, for the input
// gradient path.
template <typename S>
struct CwtCache {
  MatX<S> re, im, mag;  // n_scales x l_ws
};

// Continuous wavelet transform with the analytic Morlet mother wavelet over
// geometrically spaced scales covering pseudo-periods from 2 to l_ws minutes.
// The kernel table depends only on l_ws, so one bank serves every window.
template <typename S>
class MorletBank {
 public:
  explicit MorletBank(int l_ws) : l_ws_(l_ws) {
    if (l_ws < 8)
      throw Error(ErrorKind::Spectral,
                  "window too short for spectrum: l_ws=" + std::to_string(l_ws));
    const double ff = morlet_fourier_factor();
    const double period_lo = 2.0, period_hi = static_cast<double>(l_ws);
    scales_.resize(kSpectrumBins);
    for (int j = 0; j < kSpectrumBins; ++j) {
      const double frac = static_cast<double>(j) / (kSpectrumBins - 1);
      const double period = period_lo * std::pow(period_hi / period_lo, frac);
      scales_[j] = period / ff;
    }
    // kernel_[j] holds (1/sqrt(s)) * conj(psi(u / s)) for u in [-(l_ws-1), l_ws-1]
    const double norm0 = std::pow(M_PI, -0.25);
    kre_.resize(kSpectrumBins, 2 * l_ws - 1);
    kim_.resize(kSpectrumBins, 2 * l_ws - 1);
    for (int j = 0; j < kSpectrumBins; ++j) {
      const double s = scales_[j];
      const double amp = norm0 / std::sqrt(s);
      for (int k = 0; k < 2 * l_ws - 1; ++k) {
        const double u = static_cast<double>(k - (l_ws - 1)) / s;
        const double env = amp * std::exp(-0.5 * u * u);
        kre_(j, k) = static_cast<S>(env * std::cos(kMorletOmega0 * u));
        kim_(j, k) = static_cast<S>(-env * std::sin(kMorletOmega0 * u));
      }
    }
    // time-axis resampling weights, l_ws columns -> kSpectrumBins columns
    rs_lo_.resize(kSpectrumBins);
    rs_w_.resize(kSpectrumBins);
    for (int c = 0; c < kSpectrumBins; ++c) {
      const double p = static_cast<double>(c) * (l_ws - 1) / (kSpectrumBins - 1);
      int lo = static_cast<int>(std::floor(p));
      if (lo >= l_ws - 1) lo = l_ws - 2;
      rs_lo_[c] = lo;
      rs_w_[c] = static_cast<S>(p - lo);
    }
  }

  int l_ws() const { return l_ws_; }
  const VecD& scales() const { return scales_; }

  // Magnitude image, kSpectrumBins x kSpectrumBins (scale x resampled time).
  MatX<S> spectrum(const VecX<S>& x, CwtCache<S>* cache = nullptr) const {
    if (static_cast<int>(x.size()) != l_ws_)
      throw Error(ErrorKind::Spectral, "signal length != l_ws");
    MatX<S> re(kSpectrumBins, l_ws_), im(kSpectrumBins, l_ws_), mag(kSpectrumBins, l_ws_);
    for (int j = 0; j < kSpectrumBins; ++j) {
      for (int b = 0; b < l_ws_; ++b) {
        S zr = 0, zi = 0;
        const S* krow = kre_.data() + j;  // column-major: stride kSpectrumBins
        const S* kirow = kim_.data() + j;
        for (int t = 0; t < l_ws_; ++t) {
          const int k = t - b + (l_ws_ - 1);
          zr += x[t] * krow[static_cast<std::ptrdiff_t>(k) * kSpectrumBins];
          zi += x[t] * kirow[static_cast<std::ptrdiff_t>(k) * kSpectrumBins];
        }
        re(j, b) = zr;
        im(j, b) = zi;
        mag(j, b) = std::sqrt(zr * zr + zi * zi);
      }
    }
    MatX<S> out(kSpectrumBins, kSpectrumBins);
    for (int c = 0; c < kSpectrumBins; ++c) {
      const int lo = rs_lo_[c];
      const S w = rs_w_[c];
      out.col(c) = (S(1) - w) * mag.col(lo) + w * mag.col(lo + 1);
    }
    if (cache) {
      cache->re = std::move(re);
      cache->im = std::move(im);
      cache->mag = std::move(mag);
    }
    return out;
  }

  // d(loss)/d(signal) given d(loss)/d(resampled magnitude image).
  VecX<S> backward(const CwtCache<S>& cache, const MatX<S>& d_out) const {
    MatX<S> d_mag = MatX<S>::Zero(kSpectrumBins, l_ws_);
    for (int c = 0; c < kSpectrumBins; ++c) {
      const int lo = rs_lo_[c];
      const S w = rs_w_[c];
      d_mag.col(lo) += (S(1) - w) * d_out.col(c);
      d_mag.col(lo + 1) += w * d_out.col(c);
    }
    VecX<S> dx = VecX<S>::Zero(l_ws_);
    for (int j = 0; j < kSpectrumBins; ++j) {
      for (int b = 0; b < l_ws_; ++b) {
        const S m = cache.mag(j, b);
        if (m <= S(0)) continue;  // subgradient 0 at the origin
        const S g = d_mag(j, b) / m;
        const S gr = g * cache.re(j, b);
        const S gi = g * cache.im(j, b);
        const S* krow = kre_.data() + j;
        const S* kirow = kim_.data() + j;
        for (int t = 0; t < l_ws_; ++t) {
          const int k = t - b + (l_ws_ - 1);
          dx[t] += gr * krow[static_cast<std::ptrdiff_t>(k) * kSpectrumBins] +
                   gi * kirow[static_cast<std::ptrdiff_t>(k) * kSpectrumBins];
        }
      }
    }
    return dx;
  }

 private:
  int l_ws_;
  VecD scales_;
  MatX<S> kre_, kim_;  // kSpectrumBins x (2*l_ws - 1)
  std::vector<int> rs_lo_;
  std::vector<S> rs_w_;
};

template <typename S>
MatX<S> cwt_spectrum(const MorletBank<S>& bank, const VecX<S>& x) {
  return bank.spectrum(x);
}

// Channel c of the stack is the spectrum of window row c; all channels share
// the bank's scale grid.
template <typename S>
SpectrumStackT<S> stack_spectra(const MorletBank<S>& bank, const MatX<S>& window) {
  if (window.rows() != kNumChannels || static_cast<int>(window.cols()) != bank.l_ws())
    throw Error(ErrorKind::Spectral, "window must be 7 x l_ws");
  SpectrumStackT<S> stack;
  stack.scales = bank.scales();
  stack.data.reserve(kNumChannels);
  for (int c = 0; c < kNumChannels; ++c) {
    VecX<S> row = window.row(c).transpose();
    stack.data.push_back(bank.spectrum(row));
  }
  return stack;
}

}  // namespace olv

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "olv/supervision.hpp"

using namespace olv;

namespace {

// Independent direct evaluation of the truncated-Gaussian label formula,
// kept separate from the implementation under test.
double label_oracle(int offset, double sigma, int halfwidth = 3) {
  if (offset < -halfwidth || offset > halfwidth) return 0.0;
  const double v =
      4.0 / (std::sqrt(2.0 * M_PI) * sigma) *
      std::exp(-static_cast<double>(offset) * offset / (2.0 * sigma * sigma));
  return std::min(1.0, v);
}

const double kDefaultSigma = 4.0 / std::sqrt(2.0 * M_PI);

}  // namespace

TEST_CASE("absent event keeps the zero-filled label vector") {
  const auto y = smooth_labels(std::nullopt, 40, kDefaultSigma);
  CHECK(y.isZero(0.0));
}

TEST_CASE("default sigma puts exactly 1.0 at the event offset") {
  const auto y = smooth_labels(20, 40, kDefaultSigma);
  CHECK(y[20] == 1.0);
}

TEST_CASE("label values match the direct-evaluation oracle to 1e-9") {
  // frozen from a 30-digit evaluation of the same formula
  CHECK(label_oracle(1, kDefaultSigma) == Catch::Approx(0.82172495803387718).margin(1e-15));
  CHECK(label_oracle(2, kDefaultSigma) == Catch::Approx(0.45593812776599624).margin(1e-15));
  CHECK(label_oracle(3, kDefaultSigma) == Catch::Approx(0.17081983615293000).margin(1e-15));

  const auto y = smooth_labels(20, 40, kDefaultSigma);
  for (int off = -5; off <= 5; ++off)
    CHECK(y[20 + off] == Catch::Approx(label_oracle(off, kDefaultSigma)).margin(1e-9));
  CHECK(y[16] == 0.0);
  CHECK(y[24] == 0.0);
}

TEST_CASE("labels stay in [0,1], symmetric, decreasing, zero outside +/-3") {
  for (double sigma : {0.5, 1.0, kDefaultSigma, 3.0, 10.0}) {
    const auto y = smooth_labels(20, 40, sigma);
    for (int i = 0; i < 40; ++i) {
      CHECK(y[i] >= 0.0);
      CHECK(y[i] <= 1.0);
      if (std::abs(i - 20) > 3) CHECK(y[i] == 0.0);
    }
    for (int off = 1; off <= 3; ++off) {
      CHECK(y[20 - off] == Catch::Approx(y[20 + off]).margin(1e-12));
      CHECK(y[20 + off] < y[20 + off - 1]);
    }
  }
}

TEST_CASE("sigma below the default clamps the peak to 1") {
  const auto y = smooth_labels(10, 40, 0.5);
  CHECK(y[10] == 1.0);
}

TEST_CASE("support truncates at the window edges") {
  const auto y = smooth_labels(1, 40, kDefaultSigma);
  CHECK(y[0] > 0.0);
  CHECK(y[1] == 1.0);
  CHECK(y[4] > 0.0);
  CHECK(y[5] == 0.0);
}

TEST_CASE("make_target centers the bump at the in-window offset") {
  const auto [y, contains] = make_target(100, 40, 120, kDefaultSigma);
  REQUIRE(contains);
  CHECK(y[20] == 1.0);
  for (int i = 0; i < 40; ++i) {
    if (i >= 17 && i <= 23) CHECK(y[i] > 0.0);
    else CHECK(y[i] == 0.0);
  }
}

TEST_CASE("containment uses strict inequalities") {
  const auto [y0, c0] = make_target(100, 40, 100, kDefaultSigma);
  CHECK_FALSE(c0);
  CHECK(y0.isZero(0.0));

  const auto [y1, c1] = make_target(100, 40, 140, kDefaultSigma);
  CHECK_FALSE(c1);
  CHECK(y1.isZero(0.0));

  const auto [y2, c2] = make_target(100, 40, 141, kDefaultSigma);
  CHECK_FALSE(c2);
  CHECK(y2.isZero(0.0));

  const auto [y3, c3] = make_target(100, 40, 139, kDefaultSigma);
  CHECK(c3);
  CHECK(y3[39] == 1.0);
}

TEST_CASE("contains_event iff target is nonzero, across random cases") {
  for (int t_event = 80; t_event < 160; ++t_event) {
    const auto [y, contains] = make_target(100, 40, t_event, kDefaultSigma);
    CHECK(contains == (y.cwiseAbs().maxCoeff() > 0.0));
  }
}

TEST_CASE("hard one-hot targets when smoothing is disabled") {
  const auto [y, contains] =
      make_target(100, 40, 120, kDefaultSigma, 3, /*use_smoothing=*/false);
  REQUIRE(contains);
  CHECK(y[20] == 1.0);
  CHECK(y.sum() == 1.0);
}

TEST_CASE("near-perfect fit of hard zeros gives near-zero loss") {
  VecX<float> scores = VecX<float>::Constant(40, 1e-9f);
  const VecD target = VecD::Zero(40);
  CHECK(bce_loss(scores, target, 1e-9, false, 0.5) < 1e-6);
}

TEST_CASE("uniform 0.5 scores against a one-hot pair cost ln 2") {
  VecX<double> scores(2);
  scores << 0.5, 0.5;
  VecD target(2);
  target << 0.0, 1.0;
  CHECK(bce_loss(scores, target, std::nullopt, false, 0.0) ==
        Catch::Approx(std::log(2.0)).margin(1e-12));
}

TEST_CASE("loss is non-negative and rises when a score exceeds its target") {
  VecX<double> scores(3);
  scores << 0.2, 0.5, 0.7;
  VecD target(3);
  target << 0.2, 0.5, 0.7;
  const double base = bce_loss(scores, target, std::nullopt, false, 0.0);
  CHECK(base >= 0.0);
  VecX<double> higher = scores;
  higher[1] = 0.8;
  CHECK(bce_loss(higher, target, std::nullopt, false, 0.0) > base);
}

TEST_CASE("auxiliary term contributes with its weight") {
  VecX<double> scores(2);
  scores << 0.5, 0.5;
  VecD target = VecD::Zero(2);
  const double without = bce_loss(scores, target, std::nullopt, true, 0.5);
  const double with_aux = bce_loss(scores, target, 0.5, true, 0.5);
  CHECK(with_aux == Catch::Approx(without + 0.5 * std::log(2.0)).margin(1e-12));
}

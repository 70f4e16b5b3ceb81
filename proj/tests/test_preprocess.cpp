#include <catch2/catch_amalgamated.hpp>

#include "olv/preprocess.hpp"
#include "olv/rng.hpp"

using namespace olv;

namespace {

using OptSeq = std::vector<std::optional<double>>;

PatientRecord record_from_channel(const std::vector<double>& values) {
  PatientRecord r;
  r.record_id = "r";
  r.duration_min = static_cast<int>(values.size());
  r.signals.assign(kNumChannels, OptSeq(values.size()));
  for (int c = 0; c < kNumChannels; ++c)
    for (std::size_t t = 0; t < values.size(); ++t) r.signals[c][t] = values[t];
  return r;
}

}  // namespace

TEST_CASE("interior gaps fill by linear interpolation") {
  // oracle: the line through (0,1) and (2,3) passes (1,2)
  const auto out = interpolate_missing({1.0, std::nullopt, 3.0});
  REQUIRE(out.size() == 3);
  CHECK(*out[1] == Catch::Approx(2.0).margin(1e-12));

  // oracle: slope (11-5)/3 = 2 per step
  const auto out2 = interpolate_missing({5.0, std::nullopt, std::nullopt, 11.0});
  CHECK(*out2[1] == Catch::Approx(7.0).margin(1e-12));
  CHECK(*out2[2] == Catch::Approx(9.0).margin(1e-12));
}

TEST_CASE("complete channels pass through unchanged") {
  const OptSeq in = {1.0, 4.0, 2.0, 8.0};
  const auto out = interpolate_missing(in);
  for (std::size_t i = 0; i < in.size(); ++i) CHECK(*out[i] == *in[i]);
}

TEST_CASE("interpolation leaves head and tail runs absent") {
  const auto out = interpolate_missing({std::nullopt, 2.0, std::nullopt, 4.0, std::nullopt});
  CHECK_FALSE(out[0].has_value());
  CHECK(*out[2] == Catch::Approx(3.0));
  CHECK_FALSE(out[4].has_value());
}

TEST_CASE("interpolation is idempotent") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    OptSeq seq(60);
    for (auto& v : seq)
      if (rng.uniform() > 0.3) v = rng.normal(0, 10);
    seq[0] = 1.0;  // keep at least one present value
    const auto once = interpolate_missing(seq);
    const auto twice = interpolate_missing(once);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      CHECK(once[i].has_value() == twice[i].has_value());
      if (once[i]) CHECK(*once[i] == *twice[i]);
    }
  }
}

TEST_CASE("interpolation is exact on affine sequences") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const double a = rng.normal(0, 3), b = rng.normal(0, 50);
    OptSeq seq(80);
    for (int t = 0; t < 80; ++t)
      if (rng.uniform() > 0.4) seq[t] = a * t + b;
    seq[0] = b;
    seq[79] = a * 79 + b;
    const auto out = interpolate_missing(seq);
    for (int t = 0; t < 80; ++t) {
      REQUIRE(out[t].has_value());
      CHECK(*out[t] == Catch::Approx(a * t + b).margin(1e-9));
    }
  }
}

TEST_CASE("all-missing channel raises a preprocessing error naming the channel") {
  OptSeq empty(10, std::nullopt);
  try {
    interpolate_missing(empty, "SpO2@r42");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Preprocess);
    CHECK(std::string(e.what()).find("SpO2@r42") != std::string::npos);
  }
}

TEST_CASE("pad_edges fills head and tail with nearest values") {
  const auto out = pad_edges({std::nullopt, std::nullopt, 4.0, 6.0, std::nullopt});
  CHECK(out == std::vector<double>{4.0, 4.0, 4.0, 6.0, 6.0});

  const auto same = pad_edges({1.0, 2.0, 3.0});
  CHECK(same == std::vector<double>{1.0, 2.0, 3.0});

  const auto head = pad_edges({std::nullopt, 9.0});
  CHECK(head == std::vector<double>{9.0, 9.0});
}

TEST_CASE("pad_edges never alters present values") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    OptSeq seq(40);
    for (auto& v : seq)
      if (rng.uniform() > 0.5) v = rng.normal(0, 5);
    seq[20] = 3.25;
    const auto out = pad_edges(interpolate_missing(seq));
    for (std::size_t i = 0; i < seq.size(); ++i)
      if (seq[i]) CHECK(out[i] == *seq[i]);
  }
}

TEST_CASE("normalizer floors the std of constant channels") {
  const auto r = record_from_channel(std::vector<double>(100, 5.0));
  const auto stats = fit_normalizer({&r});
  for (int c = 0; c < kNumChannels; ++c) {
    CHECK(stats[c].mean == Catch::Approx(5.0));
    CHECK(stats[c].std == Catch::Approx(kStdFloor));
  }
}

TEST_CASE("normalizer computes the population std") {
  std::vector<double> vals(100, 0.0);
  for (int i = 50; i < 100; ++i) vals[i] = 10.0;
  const auto r = record_from_channel(vals);
  const auto stats = fit_normalizer({&r});
  CHECK(stats[0].mean == Catch::Approx(5.0));
  CHECK(stats[0].std == Catch::Approx(5.0));
}

TEST_CASE("stats fitted on training records are reused verbatim") {
  const auto train = record_from_channel({0.0, 10.0, 0.0, 10.0});
  const auto stats = fit_normalizer({&train});
  const auto again = fit_normalizer({&train});
  for (int c = 0; c < kNumChannels; ++c) {
    CHECK(stats[c].mean == again[c].mean);
    CHECK(stats[c].std == again[c].std);
  }
}

TEST_CASE("z-scoring maps mean to 0 and mean+std to 1, and inverts") {
  std::vector<double> vals;
  Rng rng(3);
  for (int i = 0; i < 200; ++i) vals.push_back(rng.normal(50, 7));
  const auto r = record_from_channel(vals);
  const auto stats = fit_normalizer({&r});
  const auto prepared = prepare_record(r, &stats);

  auto probe = record_from_channel({stats[0].mean, stats[0].mean + stats[0].std});
  const auto z = prepare_record(probe, &stats);
  CHECK(z.signals(0, 0) == Catch::Approx(0.0).margin(1e-9));
  CHECK(z.signals(0, 1) == Catch::Approx(1.0).margin(1e-9));

  for (int t = 0; t < prepared.duration_min; ++t) {
    const double back = invert_normalized(prepared.signals(0, t), stats[0]);
    CHECK(back == Catch::Approx(vals[t]).margin(1e-9));
  }
}

TEST_CASE("extract_window slices columns with copy semantics") {
  std::vector<double> vals(100);
  for (int i = 0; i < 100; ++i) vals[i] = i;
  const auto r = record_from_channel(vals);
  const auto prepared = prepare_record(r, nullptr);

  const auto whole = extract_window(prepared, 0, 100);
  CHECK(whole.cols() == 100);
  CHECK(whole(0, 99) == Catch::Approx(99.0));

  const auto win = extract_window(prepared, 10, 40);
  for (int j = 0; j < 40; ++j) CHECK(win(2, j) == Catch::Approx(10.0 + j));

  CHECK_THROWS_AS(extract_window(prepared, 100 - 40 + 1, 40), Error);
  CHECK_THROWS_AS(extract_window(prepared, -1, 40), Error);
}

#include <catch2/catch_amalgamated.hpp>

#include "olv/domain.hpp"

using namespace olv;

namespace {

PatientRecord make_record(int d = 480, std::optional<int> start = 120,
                          std::optional<int> end = 300) {
  PatientRecord r;
  r.record_id = "r0";
  r.site = Site::A;
  r.duration_min = d;
  r.signals.assign(kNumChannels, std::vector<std::optional<double>>(d, 1.0));
  r.olv_start = start;
  r.olv_end = end;
  return r;
}

}  // namespace

TEST_CASE("channel ids round-trip through the integer encoding") {
  REQUIRE(kNumChannels == 7);
  for (int i = 0; i < kNumChannels; ++i) {
    const auto c = static_cast<ChannelId>(i);
    const auto back = channel_from_name(channel_name(c));
    REQUIRE(back.has_value());
    CHECK(static_cast<int>(*back) == i);
  }
  CHECK_FALSE(channel_from_name("HeartRate").has_value());
}

TEST_CASE("validate_record accepts a well-formed record") {
  CHECK(validate_record(make_record()).empty());
}

TEST_CASE("validate_record flags start >= end") {
  const auto v = validate_record(make_record(480, 300, 120));
  REQUIRE_FALSE(v.empty());
  CHECK(v.front().find("start >= end") != std::string::npos);
}

TEST_CASE("validate_record requires exactly 7 channels") {
  auto r = make_record();
  r.signals.pop_back();
  const auto v = validate_record(r);
  REQUIRE_FALSE(v.empty());
  CHECK(v.front().find("expected 7 channels") != std::string::npos);
}

TEST_CASE("validate_record checks row lengths and end bound") {
  auto r = make_record();
  r.signals[3].pop_back();
  CHECK_FALSE(validate_record(r).empty());

  auto r2 = make_record(480, 100, 480);
  CHECK_FALSE(validate_record(r2).empty());
}

TEST_CASE("records without ground truth are valid") {
  CHECK(validate_record(make_record(480, std::nullopt, std::nullopt)).empty());
}

TEST_CASE("dataset ids must be unique") {
  Dataset ds;
  ds.records.push_back(make_record());
  ds.records.push_back(make_record());
  CHECK_FALSE(validate_dataset(ds).empty());
  ds.records[1].record_id = "r1";
  CHECK(validate_dataset(ds).empty());
}

TEST_CASE("model config defaults are valid and sigma puts the label peak at 1") {
  ModelConfig c;
  CHECK(c.validate().empty());
  CHECK(c.sigma == Catch::Approx(4.0 / std::sqrt(2.0 * M_PI)).epsilon(1e-12));
  CHECK(c.l_ws == 40);
  CHECK(c.l_step == 10);
  CHECK(c.batch_size == 24);
  CHECK(c.lr == 0.0005);
  CHECK(c.weight_decay == 0.0001);
  CHECK(c.momentum == 0.9);
}

TEST_CASE("model config rejects bad values") {
  ModelConfig c;
  c.sigma = 0.0;
  CHECK_FALSE(c.validate().empty());

  ModelConfig c2;
  c2.l_step = c2.l_ws + 1;
  CHECK_FALSE(c2.validate().empty());

  ModelConfig c3;
  c3.transformer_depth = 0;
  CHECK_FALSE(c3.validate().empty());
}

#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "olv/rng.hpp"

using namespace olv;

TEST_CASE("same seed yields the same stream") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.uniform() == b.uniform());
    CHECK(a.normal() == b.normal());
    CHECK(a.uniform_int(0, 999) == b.uniform_int(0, 999));
  }
}

TEST_CASE("different seeds diverge") {
  Rng a(1), b(2);
  bool differs = false;
  for (int i = 0; i < 10 && !differs; ++i) differs = a.uniform() != b.uniform();
  CHECK(differs);
}

TEST_CASE("uniform_int stays within inclusive bounds") {
  Rng r(7);
  for (int i = 0; i < 10000; ++i) {
    const auto v = r.uniform_int(-3, 5);
    CHECK(v >= -3);
    CHECK(v <= 5);
  }
}

TEST_CASE("normal draws have roughly standard moments") {
  Rng r(123);
  const int n = 200000;
  double sum = 0, sum_sq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sum_sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sum_sq / n - 1.0) < 0.02);
}

TEST_CASE("state round-trips through serialization") {
  Rng a(99);
  for (int i = 0; i < 17; ++i) a.normal();  // leave a spare cached
  std::stringstream ss;
  ss << a;
  Rng b(0);
  ss >> b;
  for (int i = 0; i < 50; ++i) {
    CHECK(a.uniform() == b.uniform());
    CHECK(a.normal() == b.normal());
  }
}

TEST_CASE("mix_seed separates indices") {
  CHECK(mix_seed(1, 0) != mix_seed(1, 1));
  CHECK(mix_seed(1, 0) != mix_seed(2, 0));
  CHECK(mix_seed(5, 3) == mix_seed(5, 3));
}

TEST_CASE("shuffle is deterministic given the seed") {
  std::vector<int> v1(20), v2(20);
  for (int i = 0; i < 20; ++i) v1[i] = v2[i] = i;
  Rng a(11), b(11);
  a.shuffle(v1);
  b.shuffle(v2);
  CHECK(v1 == v2);
  bool moved = false;
  for (int i = 0; i < 20; ++i) moved |= v1[i] != i;
  CHECK(moved);
}

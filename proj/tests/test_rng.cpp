#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "gmdiff/rng.hpp"

using namespace gmdiff;

TEST_CASE("streams are deterministic and independent of draw batching") {
  CounterRng a(42, 7, 3);
  CounterRng b(42, 7, 3);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  CounterRng c(42, 7, 3);
  CounterRng d(42, 7, 4);
  bool all_equal = true;
  for (int i = 0; i < 16; ++i) all_equal &= (c.next_u64() == d.next_u64());
  CHECK_FALSE(all_equal);
}

TEST_CASE("distinct keys give distinct outputs") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t seed = 0; seed < 8; ++seed)
    for (std::uint64_t traj = 0; traj < 8; ++traj) {
      CounterRng rng(seed, traj, 0);
      seen.insert(rng.next_u64());
    }
  CHECK(seen.size() == 64);
}

TEST_CASE("uniforms live in (0, 1]") {
  CounterRng rng(1, 2, 3);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    CHECK(u > 0.0);
    CHECK(u <= 1.0);
  }
}

TEST_CASE("normal moments look standard") {
  CounterRng rng(11, 0, 0);
  const int n = 200000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sum_sq += z * z;
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(std::abs(mean) < 5.0 / std::sqrt(static_cast<double>(n)));
  CHECK(std::abs(var - 1.0) < 0.02);
}

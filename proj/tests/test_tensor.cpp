#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include <emorec/emorec.hpp>

using namespace emorec;

TEST_CASE("tensor_new fills and validates") {
  const Tensor t = tensor_new({2, 3}, 1.5);
  REQUIRE(t.rank() == 2);
  REQUIRE(t.numel() == 6);
  for (double v : t.data) REQUIRE(v == 1.5);

  CHECK_THROWS_AS(tensor_new({}, 0.0), ShapeError);
  CHECK_THROWS_AS(tensor_new({1, 2, 3, 4, 5}, 0.0), ShapeError);
  CHECK_THROWS_AS(tensor_new({3, 0}, 0.0), ShapeError);
  CHECK_THROWS_AS(tensor_new({-1}, 0.0), ShapeError);
}

TEST_CASE("indexing is row-major") {
  Tensor t({2, 3, 4}, 0.0);
  double fill = 0.0;
  for (auto& v : t.data) v = fill++;
  // flat index of (i,j,k) must be (i*3 + j)*4 + k
  REQUIRE(t.at(0, 0, 0) == 0.0);
  REQUIRE(t.at(0, 0, 3) == 3.0);
  REQUIRE(t.at(0, 1, 0) == 4.0);
  REQUIRE(t.at(1, 0, 0) == 12.0);
  REQUIRE(t.at(1, 2, 3) == 23.0);

  Tensor q({2, 2, 2, 2}, 0.0);
  fill = 0.0;
  for (auto& v : q.data) v = fill++;
  REQUIRE(q.at(1, 0, 1, 0) == 10.0);
  REQUIRE(q.at(1, 1, 1, 1) == 15.0);
}

TEST_CASE("matmul matches a hand example") {
  Tensor a({2, 3}, 0.0);
  a.data = {1, 2, 3, 4, 5, 6};
  Tensor b({3, 2}, 0.0);
  b.data = {7, 8, 9, 10, 11, 12};
  const Tensor c = matmul(a, b);
  REQUIRE(c.dims == std::vector<int64_t>({2, 2}));
  CHECK(c.at(0, 0) == 58.0);   // 1*7 + 2*9 + 3*11
  CHECK(c.at(0, 1) == 64.0);
  CHECK(c.at(1, 0) == 139.0);
  CHECK(c.at(1, 1) == 154.0);
}

TEST_CASE("matmul equals the naive triple loop on random inputs") {
  SeededRng rng(7);
  for (int round = 0; round < 10; ++round) {
    const int64_t m = 1 + static_cast<int64_t>(rng.uniform() * 6);
    const int64_t k = 1 + static_cast<int64_t>(rng.uniform() * 6);
    const int64_t n = 1 + static_cast<int64_t>(rng.uniform() * 6);
    Tensor a({m, k}, 0.0);
    Tensor b({k, n}, 0.0);
    for (auto& v : a.data) v = rng.uniform() * 2.0 - 1.0;
    for (auto& v : b.data) v = rng.uniform() * 2.0 - 1.0;
    const Tensor c = matmul(a, b);
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        double want = 0.0;
        for (int64_t p = 0; p < k; ++p) want += a.at(i, p) * b.at(p, j);
        REQUIRE_THAT(c.at(i, j), Catch::Matchers::WithinAbs(want, 1e-12));
      }
    }
  }
}

TEST_CASE("matmul rejects bad shapes") {
  CHECK_THROWS_AS(matmul(Tensor({2, 3}, 0.0), Tensor({4, 2}, 0.0)), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor({2, 3, 1}, 0.0), Tensor({3, 2}, 0.0)), ShapeError);
}

TEST_CASE("rng streams are deterministic and seed-sensitive") {
  SeededRng a(1234), b(1234), c(1235);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 1000; ++i) {
    const uint64_t va = a.next_u64();
    all_equal = all_equal && va == b.next_u64();
    any_diff = any_diff || va != c.next_u64();
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

namespace {

// independent re-derivation of the pinned generator
uint64_t oracle_seed_state(uint64_t seed) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  z = z ^ (z >> 31);
  return z == 0 ? 0x9E3779B97F4A7C15ULL : z;
}

uint64_t oracle_next(uint64_t& s) {
  s ^= s >> 12;
  s ^= s << 25;
  s ^= s >> 27;
  return s * 2685821657736338717ULL;
}

}  // namespace

TEST_CASE("rng implements the pinned xorshift64* stream") {
  uint64_t s = oracle_seed_state(1234);
  SeededRng rng(1234);
  for (int i = 0; i < 64; ++i) {
    const uint64_t want = oracle_next(s);
    REQUIRE(rng.next_u64() == want);
  }
  // the uniform mapping takes the top 53 bits
  uint64_t s2 = oracle_seed_state(99);
  SeededRng rng2(99);
  for (int i = 0; i < 64; ++i) {
    const double want = static_cast<double>(oracle_next(s2) >> 11) * 0x1.0p-53;
    REQUIRE(rng2.uniform() == want);
  }
  // seed 0 must not stick the multiplier at zero
  SeededRng zero(0);
  CHECK(zero.next_u64() != 0);
}

TEST_CASE("uniform stays in [0,1) and covers the range") {
  SeededRng rng(42);
  double lo = 1.0, hi = 0.0, sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    sum += u;
  }
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);
  CHECK_THAT(sum / n, Catch::Matchers::WithinAbs(0.5, 0.01));
}

TEST_CASE("rng_normal follows Box-Muller pairs") {
  SeededRng rng(5);
  const std::vector<double> got = rng_normal(rng, 4);

  SeededRng ref(5);
  const double u1a = 1.0 - ref.uniform();
  const double u2a = ref.uniform();
  const double u1b = 1.0 - ref.uniform();
  const double u2b = ref.uniform();
  constexpr double two_pi = 6.283185307179586476925286766559;
  CHECK(got[0] == std::sqrt(-2.0 * std::log(u1a)) * std::cos(two_pi * u2a));
  CHECK(got[1] == std::sqrt(-2.0 * std::log(u1a)) * std::sin(two_pi * u2a));
  CHECK(got[2] == std::sqrt(-2.0 * std::log(u1b)) * std::cos(two_pi * u2b));
  CHECK(got[3] == std::sqrt(-2.0 * std::log(u1b)) * std::sin(two_pi * u2b));

  // an odd request consumes a full pair and discards the sine half
  SeededRng odd1(5), odd2(5);
  rng_normal(odd1, 3);
  rng_normal(odd2, 4);
  CHECK(odd1.state == odd2.state);
}

TEST_CASE("rng_normal moments") {
  SeededRng rng(11);
  const int n = 100000;
  const std::vector<double> xs = rng_normal(rng, n);
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n;
  CHECK_THAT(mean, Catch::Matchers::WithinAbs(0.0, 0.02));
  CHECK_THAT(var, Catch::Matchers::WithinAbs(1.0, 0.03));
}

TEST_CASE("rng_shuffle permutes and matches the Fisher-Yates oracle") {
  std::vector<int> items(25);
  std::iota(items.begin(), items.end(), 0);
  std::vector<int> shuffled = items;
  SeededRng rng(77);
  rng_shuffle(rng, shuffled);

  std::vector<int> sorted = shuffled;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == items);
  CHECK(shuffled != items);  // 25! makes identity astronomically unlikely

  // oracle: replay the draw rule j = floor(u * (i+1)) on a twin stream
  std::vector<int> oracle = items;
  SeededRng twin(77);
  for (int64_t i = static_cast<int64_t>(oracle.size()) - 1; i > 0; --i) {
    int64_t j = static_cast<int64_t>(twin.uniform() * static_cast<double>(i + 1));
    if (j > i) j = i;
    std::swap(oracle[static_cast<size_t>(i)], oracle[static_cast<size_t>(j)]);
  }
  CHECK(shuffled == oracle);
}

TEST_CASE("all_finite and sum") {
  Tensor t({3}, 1.0);
  CHECK(t.all_finite());
  CHECK(t.sum() == 3.0);
  t.data[1] = std::numeric_limits<double>::infinity();
  CHECK_FALSE(t.all_finite());
  t.data[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
}

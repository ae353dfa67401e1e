#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "attnet/errors.hpp"
#include "attnet/rng.hpp"
#include "attnet/tensor.hpp"
#include "doctest.h"

using namespace attnet;

TEST_CASE("tensor construction, shape, and row-major indexing") {
  Tensor t({2, 3});
  CHECK(t.rank() == 2);
  CHECK(t.numel() == 6);
  for (int64_t i = 0; i < 6; ++i) CHECK(t[i] == 0.0);

  t.at(1, 2) = 7.0;
  CHECK(t[5] == 7.0);
  t.at(0, 1) = -1.0;
  CHECK(t[1] == -1.0);

  Tensor f = Tensor::full({2, 2}, 3.5);
  CHECK(f[0] == 3.5);
  CHECK(f[3] == 3.5);

  Tensor s = Tensor::scalar(2.25);
  CHECK(s.rank() == 0);
  CHECK(s.numel() == 1);
  CHECK(s.item() == 2.25);

  Tensor r4({2, 1, 2, 2});
  r4.at(1, 0, 1, 1) = 9.0;
  CHECK(r4[7] == 9.0);
}

TEST_CASE("tensor error paths") {
  CHECK_THROWS_AS(Tensor({2, -1}), ShapeError);
  CHECK_THROWS_WITH_AS(Tensor({2, -1}), "negative extent -1 at axis 1", ShapeError);
  CHECK_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}).item(), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}).reshaped({3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2}).dim(1), ShapeError);
}

TEST_CASE("reshape preserves data") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = t.reshaped({3, 2});
  CHECK(r.at(2, 1) == 6.0);
  CHECK(r.at(0, 1) == 2.0);
}

TEST_CASE("all_finite flags NaN and Inf") {
  Tensor t({3}, {1.0, 2.0, 3.0});
  CHECK(t.all_finite());
  t[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
  t[1] = 1.0 / 0.0;
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("ATNT serialization byte layout") {
  Tensor t({2}, {1.0, -2.5});
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  const std::string bytes = os.str();
  const unsigned char expect[] = {
      0x41, 0x54, 0x4E, 0x54,                          // "ATNT"
      0x01, 0x00, 0x00, 0x00,                          // version 1
      0x01, 0x00, 0x00, 0x00,                          // rank 1
      0x02, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,  // extent 2
      0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF0, 0x3F,  // 1.0
      0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x04, 0xC0,  // -2.5
  };
  REQUIRE(bytes.size() == sizeof(expect));
  CHECK(std::memcmp(bytes.data(), expect, sizeof(expect)) == 0);
}

TEST_CASE("ATNT round trip is bitwise exact") {
  Rng rng(1234);
  Tensor t({3, 4, 5});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * std::pow(10.0, rng.uniform(-8, 8));
  t[0] = 0.0;
  t[1] = -0.0;
  t[2] = 1e308;
  t[3] = 5e-324;  // subnormal

  auto path = (std::filesystem::temp_directory_path() / "attnet_roundtrip.atnt").string();
  save_tensor(path, t);
  Tensor u = load_tensor(path);
  REQUIRE(u.shape() == t.shape());
  CHECK(std::memcmp(u.data(), t.data(), sizeof(double) * static_cast<size_t>(t.numel())) == 0);
  std::filesystem::remove(path);

  std::ostringstream os(std::ios::binary);
  write_tensor(os, Tensor::scalar(3.25));
  std::istringstream is(os.str(), std::ios::binary);
  Tensor s = read_tensor(is);
  CHECK(s.rank() == 0);
  CHECK(s.item() == 3.25);
}

TEST_CASE("ATNT read rejects malformed streams") {
  Tensor t({2, 2}, {1, 2, 3, 4});
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  std::string good = os.str();

  {
    std::string bad = good;
    bad[0] = 'X';
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_tensor(is), IoError);
  }
  {
    std::string bad = good;
    bad[4] = 2;  // version
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_tensor(is), IoError);
  }
  {
    std::string bad = good;
    bad[8] = 9;  // rank
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_tensor(is), IoError);
  }
  {
    std::string bad = good.substr(0, good.size() - 3);
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_tensor(is), IoError);
  }
}

TEST_CASE("rng streams are deterministic per seed") {
  Rng a(42), b(42), c(43);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 256; ++i) {
    double x = a.uniform(), y = b.uniform(), z = c.uniform();
    all_equal = all_equal && (x == y);
    any_diff = any_diff || (x != z);
  }
  CHECK(all_equal);
  CHECK(any_diff);

  Rng d(7), e(7);
  for (int i = 0; i < 99; ++i) CHECK(d.normal() == e.normal());
}

TEST_CASE("rng uniform and uniform_int respect bounds") {
  Rng rng(5);
  bool lo_hit = false, hi_hit = false;
  for (int i = 0; i < 2000; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    int64_t k = rng.uniform_int(-2, 2);
    CHECK(k >= -2);
    CHECK(k <= 2);
    lo_hit = lo_hit || k == -2;
    hi_hit = hi_hit || k == 2;
  }
  CHECK(lo_hit);
  CHECK(hi_hit);
}

TEST_CASE("rng normal has sane first and second moments") {
  Rng rng(99);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  double mean = s / n, var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("rng shuffle is a deterministic permutation") {
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  Rng a(11), b(11);
  auto w = v;
  a.shuffle(v);
  b.shuffle(w);
  CHECK(v == w);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("mix_seed separates streams") {
  CHECK(mix_seed(1, 0) != mix_seed(1, 1));
  CHECK(mix_seed(1, 0) != mix_seed(2, 0));
  CHECK(mix_seed(7, 3) == mix_seed(7, 3));
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "dq/error.hpp"
#include "dq/grid.hpp"
#include "dq/rng.hpp"

using namespace dq;

namespace {

QuantGrid four_point_grid(std::size_t n) {
  return QuantGrid::explicit_points(std::vector<std::vector<double>>(n, {0.0, 0.3, 0.6, 0.9}));
}

std::vector<double> random_vector(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace

TEST_CASE("block scaling: scale formula and symmetric levels") {
  const std::vector<double> w = {0.9, -0.3, 0.1, 0.6};
  const auto g = build_block_scaling(w, 3, 4);
  REQUIRE(g.scales().size() == 1);
  CHECK(g.scales()[0] == doctest::Approx(0.3).epsilon(1e-15));
  const auto pts = g.points(0);
  const std::vector<double> expect = {-0.9, -0.6, -0.3, 0.0, 0.3, 0.6, 0.9};
  REQUIRE(pts.size() == expect.size());
  for (std::size_t k = 0; k < pts.size(); ++k) CHECK(pts[k] == doctest::Approx(expect[k]).epsilon(1e-14));
}

TEST_CASE("block scaling: all-zero group uses the unit sentinel") {
  const std::vector<double> w(4, 0.0);
  const auto g = build_block_scaling(w, 3, 4);
  CHECK(g.scales()[0] == 1.0);
  const auto pts = g.points(2);
  CHECK(pts.front() == -3.0);
  CHECK(pts.back() == 3.0);
  CHECK(pts.size() == 7);
}

TEST_CASE("block scaling: short trailing group and per-tensor") {
  const std::vector<double> w = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const auto g = build_block_scaling(w, 4, 4);
  REQUIRE(g.scales().size() == 3);
  CHECK(g.scales()[2] == doctest::Approx(10.0 / 7.0));
  CHECK(g.group_of(9) == 2);
  const auto t = build_block_scaling(w, 4, kPerTensor);
  CHECK(t.scales().size() == 1);
}

TEST_CASE("block scaling: groups restart at segment boundaries") {
  const std::vector<double> w = {1, 1, 1, 8, 8, 8};
  const std::size_t ends[] = {3, 6};
  const auto g = QuantGrid::block_scaling(w, 3, 4, ends);
  REQUIRE(g.scales().size() == 2);
  CHECK(g.group_of(2) == 0);
  CHECK(g.group_of(3) == 1);
}

TEST_CASE("block scaling: bits < 2 is an invalid configuration") {
  const std::vector<double> w = {1.0, 2.0};
  CHECK_THROWS_AS(build_block_scaling(w, 1, 2), InvalidConfig);
}

TEST_CASE("bracket_of: adjacency, exact points and range clamping") {
  const auto g = four_point_grid(3);
  const std::vector<double> w = {0.45, 0.6, 1.7};
  const auto b = bracket_of(w, g);
  CHECK(b.down[0] == 0.3);
  CHECK(b.up[0] == 0.6);
  CHECK(b.down[1] == 0.6);
  CHECK(b.up[1] == 0.6);
  CHECK(b.down[2] == 0.9);
  CHECK(b.up[2] == 0.9);
  CHECK(b.delta[1] == 0.0);
}

TEST_CASE("bracket_of: below range uses the minimum") {
  const auto g = four_point_grid(1);
  const std::vector<double> w = {-2.0};
  const auto b = bracket_of(w, g);
  CHECK(b.down[0] == 0.0);
  CHECK(b.up[0] == 0.0);
}

TEST_CASE("interp_weights: endpoints, midpoint and reconstruction at y") {
  const auto g = four_point_grid(3);
  const std::vector<double> w = {0.45, 0.1, 0.85};
  const auto b = bracket_of(w, g);

  InterpState zeros{{0.0, 0.0, 0.0}, FrozenMask(3, 0), &b};
  CHECK(interp_weights(zeros) == b.down);

  const auto y = interp_position(w, b);
  const auto wy = interp_weights(y, b);
  for (std::size_t j = 0; j < w.size(); ++j) {
    const double ulp = std::nextafter(std::abs(w[j]), INFINITY) - std::abs(w[j]);
    CHECK(std::abs(wy[j] - w[j]) <= 4.0 * ulp);
  }

  Bracket unif{{0.0, 0.0}, {0.25, 0.25}, {0.25, 0.25}};
  const auto mid = interp_weights(std::vector<double>{0.5, 0.5}, unif);
  CHECK(mid[0] == 0.125);
  CHECK(mid[1] == 0.125);
}

TEST_CASE("rtn: nearest point with ties toward smaller magnitude") {
  const auto g = QuantGrid::explicit_points({{0.3, 0.6}, {0.3, 0.6}, {-0.5, 0.5}, {-0.6, -0.3}});
  const std::vector<double> w = {0.44, 0.45, 0.0, -0.45};
  const auto q = rtn(w, g);
  CHECK(q[0] == 0.3);
  CHECK(q[1] == 0.3);
  CHECK(q[2] == -0.5);  // equal magnitudes: lower point
  CHECK(q[3] == -0.3);
}

TEST_CASE("property: bracket contains w and rtn selects an endpoint") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto w = random_vector(rng, 97, 1.0);
    const int bits = 2 + static_cast<int>(rng.below(5));
    const std::size_t gs = 1 + rng.below(20);
    const auto g = build_block_scaling(w, bits, gs);
    const auto b = bracket_of(w, g);
    const auto q = rtn(w, g);
    for (std::size_t j = 0; j < w.size(); ++j) {
      CHECK((q[j] == b.down[j] || q[j] == b.up[j]));
      if (b.delta[j] == 0.0) {
        // Exact grid point, or the group extreme that lands one ulp outside
        // L * scale after the division.
        CHECK(std::abs(w[j] - q[j]) <= 4 * std::numeric_limits<double>::epsilon() * std::abs(w[j]));
        continue;
      }
      CHECK(b.down[j] <= w[j]);
      CHECK(w[j] <= b.up[j]);
      CHECK(std::abs(w[j] - q[j]) <= 0.5 * b.delta[j] * (1 + 1e-12));
    }
  }
}

TEST_CASE("property: interpolation is linear on uniform grids") {
  Rng rng(5);
  const double delta = 0.125;
  const auto g = QuantGrid::uniform(64, delta, -2.0, 2.0);
  std::vector<double> w(64);
  for (auto& v : w) v = rng.uniform(-1.9, 1.9);
  const auto b = bracket_of(w, g);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(64), x2(64);
    for (std::size_t j = 0; j < 64; ++j) {
      x[j] = rng.uniform();
      x2[j] = rng.uniform();
    }
    const auto a = interp_weights(x, b);
    const auto c = interp_weights(x2, b);
    for (std::size_t j = 0; j < 64; ++j) {
      if (b.delta[j] == 0.0) continue;
      const double expect = delta * (x[j] - x2[j]);
      CHECK(std::abs((a[j] - c[j]) - expect) <= 1e-12 * std::max(1.0, std::abs(expect)) * 4);
    }
  }
}

TEST_CASE("bits_per_param accounting") {
  const std::vector<double> w(256, 1.0);
  CHECK(bits_per_param(build_block_scaling(w, 3, 64)) == 3.25);
  CHECK(bits_per_param(build_block_scaling(w, 4, 64)) == 4.25);
  CHECK(bits_per_param(build_block_scaling(w, 3, 32)) == 3.5);
  CHECK(bits_per_param(build_block_scaling(w, 4, kPerTensor)) == 4.0);
  CHECK_THROWS_AS(bits_per_param(four_point_grid(2)), Unsupported);

  // Monotone in bits, antitone in groupsize.
  double prev = 0.0;
  for (int bits = 2; bits <= 8; ++bits) {
    const double b = bits_per_param(build_block_scaling(w, bits, 32));
    CHECK(b > prev);
    prev = b;
  }
  prev = INFINITY;
  for (std::size_t gs : {1, 2, 8, 32, 128}) {
    const double b = bits_per_param(build_block_scaling(w, 3, gs));
    CHECK(b < prev);
    prev = b;
  }
}

TEST_CASE("grid serialization round-trips bit-exactly") {
  Rng rng(3);
  const auto w = random_vector(rng, 50, 0.7);
  const auto g = build_block_scaling(w, 3, 16);
  const auto text = g.to_json().dump();
  const auto back = QuantGrid::from_json(nlohmann::json::parse(text));
  CHECK(back == g);
  const auto e = four_point_grid(4);
  CHECK(QuantGrid::from_json(nlohmann::json::parse(e.to_json().dump())) == e);
}

TEST_CASE("explicit grids reject malformed point lists") {
  CHECK_THROWS_AS(QuantGrid::explicit_points({{0.0, 0.0}}), InvalidInput);
  CHECK_THROWS_AS(QuantGrid::explicit_points({{}}), InvalidInput);
  CHECK_THROWS_AS(QuantGrid::explicit_points({{1.0, 0.5}}), InvalidInput);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dq/discquant.hpp"
#include "dq/error.hpp"
#include "oracles.hpp"

using namespace dq;

TEST_CASE("cstar: direct formula") {
  const std::vector<double> y = {0.25, 0.75};
  const auto c = cstar(y);
  CHECK(c[0] == 0.5);
  CHECK(c[1] == -0.5);
  for (double v : cstar(std::vector<double>(5, 0.5))) CHECK(v == 0.0);
  CHECK_THROWS_AS(cstar(std::vector<double>{1.5}), InvalidInput);
}

TEST_CASE("cstar: linear form equals squared distance on integral points") {
  // Exhaustive over {0,1}^8: <c*, x> + ||y||^2 = ||x - y||^2.
  Rng rng(2);
  std::vector<double> y(8);
  for (auto& v : y) v = rng.uniform();
  const auto c = cstar(y);
  double ny = 0.0;
  for (double v : y) ny += v * v;
  for (unsigned bits = 0; bits < 256; ++bits) {
    double lin = 0.0, dist = 0.0;
    for (unsigned j = 0; j < 8; ++j) {
      const double x = (bits >> j) & 1u ? 1.0 : 0.0;
      lin += c[j] * x;
      dist += (x - y[j]) * (x - y[j]);
    }
    CHECK(lin + ny == doctest::Approx(dist).epsilon(1e-12));
  }
}

TEST_CASE("finalize: integral selection, tie rule and on-grid output") {
  const Bracket b{{0.0, 0.0, -0.5, 1.0}, {1.0, 1.0, 0.5, 2.0}, {1.0, 1.0, 1.0, 1.0}};
  const auto w = finalize(std::vector<double>{0.0, 1.0, 0.5, 0.3}, b, 1e-3);
  CHECK(w[0] == 0.0);
  CHECK(w[1] == 1.0);
  CHECK(w[2] == -0.5);  // midpoint 0 between -0.5 and 0.5: equal magnitudes, lower point
  CHECK(w[3] == 1.0);

  Rng rng(3);
  std::vector<double> x(100);
  Bracket br;
  for (std::size_t j = 0; j < 100; ++j) {
    x[j] = rng.uniform();
    br.down.push_back(rng.normal());
    br.delta.push_back(rng.uniform());
    br.up.push_back(br.down.back() + br.delta.back());
  }
  const auto q = finalize(x, br, 1e-3);
  for (std::size_t j = 0; j < 100; ++j) CHECK((q[j] == br.down[j] || q[j] == br.up[j]));
}

TEST_CASE("init_x: modes") {
  const auto t = ToyModel::random(Arch{}, 1);
  const auto grid = build_block_scaling(t.params(), 3, 16);
  const auto b = bracket_of(t.params(), grid);
  const auto x = init_x(InitMode::OriginalWeights, b, t.params(), 0);
  const auto wx = interp_weights(x, b);
  for (std::size_t j = 0; j < wx.size(); ++j) CHECK(wx[j] == doctest::Approx(t.params()[j]).epsilon(1e-14));

  const auto u1 = init_x(InitMode::UniformRandom, b, t.params(), 9);
  const auto u2 = init_x(InitMode::UniformRandom, b, t.params(), 9);
  CHECK(u1 == u2);
  REQUIRE(u1.size() >= 1000);
  double mean = 0.0;
  for (double v : u1) mean += v;
  mean /= static_cast<double>(u1.size());
  CHECK(mean >= 0.45);
  CHECK(mean <= 0.55);
}

TEST_CASE("optimize: every iterate stays in the box and the output is on-grid") {
  const auto t = ToyModel::random(Arch{}, 2);
  const auto grid = build_block_scaling(t.params(), 3, 16);
  DiscQuantConfig cfg;
  cfg.iterations = 200;
  cfg.warmup = 20;
  cfg.seed = 1;
  int violations = 0;
  const auto stream = [&](int step) {
    Rng rng(derive_seed(5, static_cast<std::uint64_t>(step)));
    return sample_sequences(t, 4, 8, rng);
  };
  const auto rep = optimize(t, grid, stream, heldout_batch(t, cfg), cfg, [&](int, std::span<const double> x) {
    for (double v : x)
      if (!(v >= 0.0 && v <= 1.0)) ++violations;
  });
  CHECK(violations == 0);
  CHECK(rep.trace.size() == 200);
  const auto b = bracket_of(t.params(), grid);
  for (std::size_t j = 0; j < rep.w_hat.size(); ++j) CHECK((rep.w_hat[j] == b.down[j] || rep.w_hat[j] == b.up[j]));
}

TEST_CASE("optimize: huge lambda on the linear term reproduces RTN exactly") {
  const auto t = ToyModel::random(Arch{}, 3);
  const auto grid = build_block_scaling(t.params(), 3, 16);
  DiscQuantConfig cfg;
  cfg.lambda_on = LambdaOn::Linear;
  cfg.lambda = 200.0 * 1e6;
  cfg.iterations = 300;
  cfg.warmup = 30;
  const auto rep = optimize(t, grid, cfg);
  CHECK(rep.w_hat == rtn(t.params(), grid));
}

TEST_CASE("optimize: pure KL on a near-integral fine grid stays close to RTN") {
  const auto t = ToyModel::random(Arch{}, 4);
  const auto grid = build_block_scaling(t.params(), 8, 16);
  DiscQuantConfig cfg;
  cfg.lambda_on = LambdaOn::Linear;
  cfg.lambda = 0.0;
  cfg.init = InitMode::OriginalWeights;
  cfg.iterations = 200;
  cfg.warmup = 20;
  cfg.lr = 0.01;
  const auto rep = optimize(t, grid, cfg);
  const double base = heldout_kl(t, rtn(t.params(), grid), heldout_batch(t, cfg));
  MESSAGE("dq=", rep.heldout_kl, " rtn=", base);
  CHECK(rep.heldout_kl <= 2.0 * base);
}

TEST_CASE("optimize: defaults beat RTN and make integrality progress over seeds") {
  std::vector<double> dq_kl, rtn_kl, frac_delta, obj_delta;
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto t = ToyModel::random(Arch{}, 100 + s);
    const auto grid = build_block_scaling(t.params(), 3, 16);
    DiscQuantConfig cfg;
    cfg.seed = s;
    const auto rep = optimize(t, grid, cfg);
    dq_kl.push_back(rep.heldout_kl);
    rtn_kl.push_back(heldout_kl(t, rtn(t.params(), grid), heldout_batch(t, cfg)));
    frac_delta.push_back(rep.fractional_fraction - rep.fractional_fraction_warmup);

    double ema = rep.trace.front().total();
    double at_warmup = ema;
    for (std::size_t k = 0; k < rep.trace.size(); ++k) {
      ema = 0.99 * ema + 0.01 * rep.trace[k].total();
      if (static_cast<int>(k) + 1 == cfg.warmup) at_warmup = ema;
    }
    obj_delta.push_back(ema - at_warmup);
  }
  CHECK(oracle::median(dq_kl) < oracle::median(rtn_kl));
  // Fractions are k/n; differences carry round-off at the 1e-17 level.
  CHECK(oracle::median(frac_delta) <= 1e-12);
  CHECK(oracle::median(obj_delta) <= 0.0);
}

TEST_CASE("optimize: invalid inputs") {
  const auto t = ToyModel::random(Arch{}, 5);
  const auto grid = build_block_scaling(t.params(), 3, 16);
  DiscQuantConfig cfg;
  cfg.iterations = 4;
  cfg.warmup = 1;
  const auto empty = [](int) { return SampleBatch{}; };
  CHECK_THROWS_AS(optimize(t, grid, empty, heldout_batch(t, cfg), cfg), InvalidInput);
  cfg.tau = 0.6;
  CHECK_THROWS_AS(optimize(t, grid, cfg), InvalidConfig);
  cfg.tau = 1e-3;
  cfg.warmup = 10;
  CHECK_THROWS_AS(optimize(t, grid, cfg), InvalidConfig);
}

TEST_CASE("config JSON round-trip and report fields") {
  DiscQuantConfig cfg;
  cfg.lambda_on = LambdaOn::Linear;
  cfg.seed = 17;
  const auto back = DiscQuantConfig::from_json(nlohmann::json::parse(cfg.to_json().dump()));
  CHECK(back.to_json() == cfg.to_json());
  CHECK_THROWS_AS(DiscQuantConfig::from_json({{"lambda_on", "both"}}), InvalidConfig);

  RoundingReport r;
  r.x = {0.5};
  r.w_hat = {1.0};
  r.trace = {{1.0, 2.0}};
  const auto j = r.to_json(true);
  for (const char* k : {"x", "fractional_fraction", "trace", "w_hat", "heldout_kl"}) CHECK(j.contains(k));
  CHECK(r.trace_csv() == "step,linear_term,kl_term,total\n0,1,2,3\n");
}

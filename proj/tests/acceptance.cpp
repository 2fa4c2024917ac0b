// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset. Exit status is nonzero if any criterion fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dq/harness.hpp"
#include "dq/hexfloat.hpp"
#include "dq/parallel.hpp"
#include "dq/rng.hpp"
#include "oracles.hpp"
#include "vertex_oracle.hpp"

using namespace dq;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::clamp(hw, 1u, 16u));
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

ConstraintSet random_instance(std::size_t n, std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  ConstraintSet cs;
  cs.M.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < cs.M.rows(); ++i)
    for (Eigen::Index j = 0; j < cs.M.cols(); ++j) cs.M(i, j) = rng.normal();
  cs.y.resize(n);
  for (auto& v : cs.y) v = rng.uniform();
  return cs;
}

std::vector<double> random_unit(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double nrm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    nrm += x * x;
  }
  for (auto& x : v) x /= std::sqrt(nrm);
  return v;
}

SampleBatch teacher_batch(const ToyModel& t, std::size_t count, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  return sample_sequences(t, count, len, rng);
}

std::vector<std::size_t> probe_coords(std::size_t n, std::uint64_t seed, std::size_t count = 32) {
  Rng rng(seed);
  std::vector<std::size_t> c(count);
  for (auto& j : c) j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(n)) % n;
  return c;
}

nlohmann::ordered_json find_group(const nlohmann::ordered_json& summary,
                                  std::initializer_list<std::pair<const char*, nlohmann::ordered_json>> keys) {
  for (const auto& e : summary) {
    bool ok = true;
    for (const auto& [k, v] : keys) ok = ok && e.at(k) == v;
    if (ok) return e;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------

Outcome vertex_integrality() {
  const std::size_t n = 1024;
  const int seeds = 100;
  bool pass = true;
  std::ostringstream d;
  for (std::size_t m : {8, 16, 32, 64}) {
    std::vector<int> ok(seeds, 0);
    std::vector<double> resid(seeds, 0.0);
    parallel_for(seeds, workers(), [&](std::size_t s) {
      const auto cs = random_instance(n, m, derive_seed(1000 + m, s));
      WalkConfig cfg;
      cfg.seed = derive_seed(2000 + m, s);
      try {
        const auto r = lm_round(cs, cfg);
        const auto rep = vertex_integrality_check(cs, r.x);
        resid[s] = rep.residual_inf;
        ok[s] = rep.fractional <= 16 * m && rep.residual_inf <= 1e-6;
      } catch (const MaxPhasesExceeded&) {
        ok[s] = 0;
      }
    });
    const int good = static_cast<int>(std::count(ok.begin(), ok.end(), 1));
    const double rate = good / static_cast<double>(seeds);
    pass = pass && rate >= 0.99;
    d << "m=" << m << " success " << rate << " max resid " << fmt("%.1e", *std::max_element(resid.begin(), resid.end()))
      << "; ";
  }
  return {pass, d.str()};
}

Outcome brute_force_vertices() {
  bool pass = true;
  std::size_t total = 0;
  int matched = 0;
  const int instances = 10;
  for (int s = 0; s < instances; ++s) {
    const auto cs = random_instance(10, 2, derive_seed(3000, s));
    const auto verts = oracle::enumerate_vertices(cs);
    total += verts.size();
    pass = pass && !verts.empty();
    for (const auto& v : verts) pass = pass && vertex_integrality_check(cs, v).fractional <= 2;
    WalkConfig cfg;
    cfg.seed = derive_seed(3001, s);
    const auto r = walk_to_vertex(cs, cfg);
    const bool hit = oracle::matches_vertex(verts, r.x, r.frozen);
    matched += hit;
    pass = pass && hit;
  }
  return {pass, std::to_string(total) + " vertices over " + std::to_string(instances) + " instances, walk matched " +
                    std::to_string(matched) + "/" + std::to_string(instances)};
}

Outcome walk_variance() {
  const auto cs = random_instance(256, 4, 4000);
  Rng rng(4001);
  const auto theta = random_unit(rng, 256);
  const double val = walk_variance_probe(cs, WalkConfig{}, theta, 200);

  // A unit vector in the row space of M.
  std::vector<double> row(256, 0.0);
  double nrm = 0.0;
  for (std::size_t j = 0; j < 256; ++j) {
    for (Eigen::Index i = 0; i < cs.M.rows(); ++i) row[j] += (i + 1.0) * cs.M(i, static_cast<Eigen::Index>(j));
    nrm += row[j] * row[j];
  }
  for (auto& v : row) v /= std::sqrt(nrm);
  WalkConfig short_cfg;
  short_cfg.steps_per_phase = 2000;
  const double zero = walk_variance_probe(cs, short_cfg, row, 30);
  return {val <= 4.0 && zero <= 1e-10,
          "random theta " + fmt("%.4f", val) + " (budget 4.0), row-space theta " + fmt("%.2e", zero)};
}

Outcome covariance_rates() {
  SpectrumSpec s;
  s.n = 256;
  const std::vector<std::size_t> grid = {32, 64, 128, 256, 512};
  std::ostringstream d;
  bool pass = true;
  for (auto [alpha, target] : {std::pair{1.25, -0.25}, std::pair{2.5, -0.5}}) {
    s.alpha = alpha;
    const auto st = falpha_scaling_study(s, grid, 20, 5000, workers());
    const bool ok = std::abs(st.fit.slope - target) <= 0.1;
    pass = pass && ok;
    d << "alpha=" << alpha << " slope " << fmt("%.3f", st.fit.slope) << " +- " << fmt("%.3f", st.fit.stderr_slope)
      << " (target " << target << " +- 0.1) " << (ok ? "ok" : "off") << "; ";
  }
  return {pass, d.str()};
}

Outcome generalization_scaling() {
  SpectrumSpec s;
  s.n = 1024;
  s.alpha = 2.0;
  const auto st = generalization_study(s, {8, 16, 32, 64}, 20, WalkConfig{}, 6000, workers(), GenRounding::Vertex);
  bool decreasing = true;
  for (std::size_t i = 1; i < st.median_quad.size(); ++i)
    decreasing = decreasing && st.median_quad[i] < st.median_quad[i - 1];
  std::ostringstream d;
  d << "medians";
  for (double v : st.median_quad) d << " " << fmt("%.4g", v);
  d << ", slope " << fmt("%.3f", st.fit.slope) << " +- " << fmt("%.3f", st.fit.stderr_slope);
  return {decreasing && st.fit.slope <= -0.3, d.str()};
}

Outcome kl_identities() {
  double worst_grad = 0.0, worst_fd = 0.0, worst_rel = 0.0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto t = ToyModel::random(Arch{}, 7000 + seed);
    const auto batch = teacher_batch(t, 8, 8, 7100 + seed);
    const auto targets = teacher_targets(t, batch);
    const auto r = kl_term(targets, t);
    for (double g : r.grad) worst_grad = std::max(worst_grad, std::abs(g));
    auto f = [&](const std::vector<double>& w) { return kl_term(targets, t.with_params(w), false).value; };
    for (auto j : probe_coords(t.size(), 7200 + seed, 8))
      worst_fd = std::max(worst_fd, std::abs(oracle::central_diff(f, t.params(), j)));
    Rng rng(7300 + seed);
    for (int k = 0; k < 16; ++k) {
      const auto dir = random_unit(rng, t.size());
      const double q = hessian_quadratic_form(t, batch, dir);
      const double eps = 1e-3;
      auto w = t.params();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] += eps * dir[j];
      const double kl = f(w);
      worst_rel = std::max(worst_rel, std::abs(2.0 * kl / (eps * eps) - q) / q);
    }
  }
  return {worst_grad <= 1e-6 && worst_fd <= 1e-6 && worst_rel <= 0.05,
          "max |grad| " + fmt("%.1e", worst_grad) + ", max |fd| " + fmt("%.1e", worst_fd) +
              ", worst curvature rel err " + fmt("%.4f", worst_rel)};
}

Outcome first_order() {
  ExperimentConfig c;
  c.id = "acceptance-first-order";
  c.kind = ExperimentKind::FirstOrder;
  c.seed = 8000;
  c.trials = 8;
  c.first_order.bits = {3, 4, 5, 6, 7, 8};
  c.first_order.methods = {"rtn"};
  const auto r = run_first_order(c, workers());
  std::vector<double> corr, slope;
  for (int b : c.first_order.bits) {
    corr.push_back(find_group(r.summary.at("pearson"), {{"method", "rtn"}, {"bits", b}}).at("median").get<double>());
    slope.push_back(find_group(r.summary.at("slope"), {{"method", "rtn"}, {"bits", b}}).at("median").get<double>());
  }
  bool monotone = true;
  for (std::size_t i = 1; i < corr.size(); ++i) monotone = monotone && corr[i] >= corr[i - 1];
  std::ostringstream d;
  d << "median corr by bits 3..8:";
  for (double v : corr) d << " " << fmt("%.4f", v);
  d << "; finest slope " << fmt("%.4f", slope.back());
  return {corr.back() >= 0.9 && std::abs(slope.back() - 1.0) <= 0.1 && monotone, d.str()};
}

Outcome method_comparison() {
  ExperimentConfig c;
  c.id = "acceptance-comparison";
  c.seed = 9000;
  c.trials = 8;
  c.grid.bits = {2, 3};
  c.grid.groupsize = 16;
  c.methods = {RounderKind::Rtn, RounderKind::DiscQuant};
  const auto r = run_comparison(c, workers());
  bool pass = r.failures == 0;
  std::ostringstream d;
  for (int b : c.grid.bits) {
    const double rtn_med =
        find_group(r.summary.at("heldout_kl"), {{"method", "rtn"}, {"bits", b}, {"incoherence", "off"}})
            .at("median")
            .get<double>();
    const double dq_med =
        find_group(r.summary.at("heldout_kl"), {{"method", "discquant"}, {"bits", b}, {"incoherence", "off"}})
            .at("median")
            .get<double>();
    pass = pass && dq_med < rtn_med;
    d << "bits " << b << " rtn " << fmt("%.4f", rtn_med) << " dq " << fmt("%.4f", dq_med) << "; ";
  }
  int exact = 0;
  for (int t = 0; t < c.trials; ++t) {
    const auto teacher = trial_teacher(c, trial_seed(c, t));
    const auto grid = QuantGrid::block_scaling(teacher.params(), 2, 16, tensor_segment_ends(c.arch));
    DiscQuantConfig dc;
    dc.lambda_on = LambdaOn::Linear;
    dc.lambda = 2e8;
    dc.iterations = 300;
    dc.warmup = 30;
    dc.seed = trial_seed(c, t);
    exact += optimize(teacher, grid, dc).w_hat == rtn(teacher.params(), grid);
  }
  pass = pass && exact == c.trials;
  d << "large-lambda limit equals RTN on " << exact << "/" << c.trials;
  return {pass, d.str()};
}

Outcome incoherence() {
  ExperimentConfig c;
  c.id = "acceptance-incoherence";
  c.seed = 10000;
  c.trials = 8;
  c.grid.bits = {2};
  c.methods = {RounderKind::Rtn};
  c.incoherence.modes = {false, true};
  c.incoherence.seed = 10001;
  const auto r = run_comparison(c, workers());
  const auto& s = r.summary.at("heldout_kl");
  const double off = find_group(s, {{"method", "rtn"}, {"bits", 2}, {"incoherence", "off"}}).at("median").get<double>();
  const double on = find_group(s, {{"method", "rtn"}, {"bits", 2}, {"incoherence", "on"}}).at("median").get<double>();

  Rng rng(10002);
  double worst_trip = 0.0;
  for (auto [rows, cols] : {std::pair<std::size_t, std::size_t>{32, 68}, {17, 33}, {32, 32}, {5, 3}}) {
    std::vector<double> w(rows * cols);
    for (auto& v : w) v = rng.normal();
    const auto left = RHT::random(next_pow2(rows), derive_seed(10003, rows));
    const auto right = RHT::random(next_pow2(cols), derive_seed(10004, cols));
    const auto tl = transform_layer(w, rows, cols, left, right);
    const auto back = untransform(tl, tl.data, left, right);
    for (std::size_t i = 0; i < w.size(); ++i) worst_trip = std::max(worst_trip, std::abs(back[i] - w[i]));
  }
  double worst_fast = 0.0;
  for (std::size_t dim = 1; dim <= 512; dim *= 2) {
    const auto t = RHT::random(dim, derive_seed(10005, dim));
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    const auto fast = rht_apply(t, v);
    for (std::size_t i = 0; i < dim; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < dim; ++j) acc += (std::popcount(i & j) % 2 ? -1.0 : 1.0) * t.signs[j] * v[j];
      worst_fast = std::max(worst_fast, std::abs(acc / std::sqrt(static_cast<double>(dim)) - fast[i]));
    }
  }
  return {r.failures == 0 && on < off && worst_trip <= 1e-9 && worst_fast <= 1e-10,
          "median KL without " + fmt("%.4f", off) + " with " + fmt("%.4f", on) + "; round trip " +
              fmt("%.1e", worst_trip) + "; fast vs naive " + fmt("%.1e", worst_fast)};
}

Outcome determinism() {
  auto rows_of = [](const Report& r) {
    std::string s;
    for (const auto& row : r.rows) s += row.dump() + "\n";
    return s;
  };
  ExperimentConfig cmp;
  cmp.id = "det-comparison";
  cmp.seed = 11000;
  cmp.trials = 3;
  cmp.grid.bits = {2, 3};
  cmp.data.heldout_sequences = 64;
  cmp.methods = {RounderKind::Rtn, RounderKind::DiscQuant, RounderKind::LmWalk};
  cmp.walk_samples = 16;
  cmp.discquant.iterations = 128;
  cmp.discquant.warmup = 16;
  cmp.incoherence.modes = {false, true};

  ExperimentConfig fo;
  fo.id = "det-first-order";
  fo.kind = ExperimentKind::FirstOrder;
  fo.seed = 11001;
  fo.trials = 2;
  fo.first_order.bits = {4, 8};
  fo.first_order.sequences = 8;
  fo.first_order.methods = {"rtn", "zero"};

  ExperimentConfig sc;
  sc.id = "det-scaling";
  sc.kind = ExperimentKind::Scaling;
  sc.seed = 11002;
  sc.scaling.falpha_spec.n = 64;
  sc.scaling.falpha_m_grid = {16, 32, 64, 128};
  sc.scaling.gen_spec.n = 256;
  sc.scaling.gen_m_grid = {4, 8, 16};
  sc.scaling.gen_trials = 3;

  int identical = 0, total = 0;
  for (const auto* cfg : {&cmp, &fo, &sc}) {
    const auto a = run_experiment(*cfg, 1);
    const auto b = run_experiment(*cfg, 1);
    const auto c = run_experiment(*cfg, 3);
    for (const auto* other : {&b, &c}) {
      ++total;
      identical += rows_of(a) == rows_of(*other) && emit_csv(a) == emit_csv(*other) &&
                   a.summary.dump() == other->summary.dump();
    }
  }
  return {identical == total, std::to_string(identical) + "/" + std::to_string(total) +
                                  " reruns byte-identical (comparison, first-order, scaling; 1 and 3 workers)"};
}

Outcome gradients() {
  double worst = 0.0;
  auto track = [&](double analytic, double fd) { worst = std::max(worst, oracle::rel_err(analytic, fd)); };
  for (int layers : {1, 2}) {
    Arch arch;
    arch.layers = layers;
    const auto t = ToyModel::random(arch, 12000 + static_cast<std::uint64_t>(layers));
    const auto batch = teacher_batch(t, 4, 6, 12010 + static_cast<std::uint64_t>(layers));

    // per-sample loss gradient
    const Sample s = batch.samples().front();
    const auto g = per_sample_grad(t, s);
    auto fs = [&](const std::vector<double>& w) { return t.with_params(w).loss(s); };
    auto coords = probe_coords(t.size(), 12020);
    for (std::size_t j = 0; j < t.size() && coords.size() < 64; ++j)
      if (g[j] != 0.0) coords.push_back(j);
    for (auto j : coords) track(g[j], oracle::central_diff(fs, t.params(), j));

    // batch mean loss gradient
    const auto mg = mean_loss_grad(t, batch);
    auto fm = [&](const std::vector<double>& w) { return mean_loss(t.with_params(w), batch); };
    for (auto j : probe_coords(t.size(), 12030)) track(mg[j], oracle::central_diff(fm, t.params(), j));

    // KL gradient at a perturbed student
    auto w = t.params();
    Rng rng(12040);
    for (auto& v : w) v += 0.05 * rng.normal();
    const auto student = t.with_params(w);
    const auto targets = teacher_targets(t, batch);
    const auto kg = kl_term(targets, student).grad;
    auto fk = [&](const std::vector<double>& p) { return kl_term(targets, t.with_params(p), false).value; };
    for (auto j : probe_coords(t.size(), 12050)) track(kg[j], oracle::central_diff(fk, w, j));

    // KL gradient pulled back into the incoherent basis
    const IncoherentSpace space(t, 12060);
    std::vector<double> z = space.latent();
    for (auto& v : z) v += 0.05 * rng.normal();
    const auto zg = space.pullback(kl_term(targets, t.with_params(space.to_model(z))).grad);
    auto fz = [&](const std::vector<double>& p) { return kl_term(targets, t.with_params(space.to_model(p)), false).value; };
    for (auto j : probe_coords(z.size(), 12070)) track(zg[j], oracle::central_diff(fz, z, j));
  }
  return {worst <= 1e-4, "max relative error " + fmt("%.2e", worst) +
                             " (per-sample loss, mean loss, KL, latent KL; 1 and 2 layers)"};
}

Outcome beta_probe() {
  SpectrumSpec s;
  s.n = 32;
  const Eigen::MatrixXd g = sample_gradients(s, 100000, 13000);
  Rng rng(13001);
  double lo = 1e300, hi = -1e300;
  for (int i = 0; i < 100; ++i) {
    const auto theta = random_unit(rng, 32);
    const double q = fourth_moment_ratio(g, theta);
    lo = std::min(lo, q);
    hi = std::max(hi, q);
  }
  return {lo >= 2.5 && hi <= 3.5, "ratio range [" + fmt("%.3f", lo) + ", " + fmt("%.3f", hi) + "]"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"vertex integrality", vertex_integrality},
      {"brute-force vertex oracle", brute_force_vertices},
      {"walk variance", walk_variance},
      {"covariance-estimator rates", covariance_rates},
      {"generalization scaling", generalization_scaling},
      {"KL identities", kl_identities},
      {"first-order dominance", first_order},
      {"method comparison", method_comparison},
      {"incoherence composition", incoherence},
      {"determinism", determinism},
      {"gradient correctness", gradients},
      {"beta probe", beta_probe},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && std::find(selected.begin(), selected.end(), id) == selected.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("criterion %2d %-28s %s  %s [%.1fs]\n", id, criteria[k].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}

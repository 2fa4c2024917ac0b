#include "dq/lmwalk.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "dq/hexfloat.hpp"
#include "dq/rng.hpp"

namespace dq {

void ConstraintSet::validate(bool enforce_sample_bound) const {
  if (static_cast<std::size_t>(M.cols()) != y.size()) throw InvalidInput("constraint matrix width differs from n");
  if (!M.allFinite()) throw InvalidInput("constraint rows must be finite");
  for (double v : y)
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("y must lie in [0,1]^n");
  if (enforce_sample_bound && 16 * m() > n()) throw InvalidInput("walk rounding requires m <= n / 16");
}

ConstraintSet make_constraint_set(const std::vector<std::vector<double>>& gradients, const Bracket& bracket,
                                  std::vector<double> y) {
  const std::size_t n = bracket.size();
  if (y.size() != n) throw InvalidInput("y length differs from bracket");
  ConstraintSet cs;
  cs.M.resize(static_cast<Eigen::Index>(gradients.size()), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < gradients.size(); ++i) {
    if (gradients[i].size() != n) throw InvalidInput("gradient length differs from bracket");
    for (std::size_t j = 0; j < n; ++j)
      cs.M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = gradients[i][j] * bracket.delta[j];
  }
  cs.y = std::move(y);
  return cs;
}

long WalkConfig::phase_length() const {
  if (steps_per_phase > 0) return steps_per_phase;
  return static_cast<long>(std::ceil(4.0 / (step * step)));
}

void WalkConfig::validate() const {
  if (!(step > 0.0)) throw InvalidConfig("walk step must be positive");
  if (!(face_tol > 0.0 && face_tol <= step)) throw InvalidConfig("face tolerance must satisfy 0 < eps <= step");
  if (steps_per_phase < 0) throw InvalidConfig("steps per phase must be >= 1");
  if (max_phases < 1) throw InvalidConfig("max phases must be >= 1");
}

Eigen::MatrixXd unit_rows(const Eigen::MatrixXd& M) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < M.rows(); ++i)
    if (M.row(i).norm() > 0.0) keep.push_back(i);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(keep.size()), M.cols());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const auto i = keep[k];
    out.row(static_cast<Eigen::Index>(k)) = M.row(i) / M.row(i).norm();
  }
  return out;
}

// ---------------------------------------------------------------------------

ActiveProjector::ActiveProjector(const Eigen::MatrixXd& rows, const FrozenMask& frozen)
    : n_(static_cast<std::size_t>(rows.cols())) {
  for (std::size_t j = 0; j < n_; ++j)
    if (frozen.empty() || !frozen[j]) free_.push_back(j);
  const auto nf = static_cast<Eigen::Index>(free_.size());
  if (rows.rows() == 0 || nf == 0) {
    basis_.resize(nf, 0);
    return;
  }
  Eigen::MatrixXd At(nf, rows.rows());
  for (Eigen::Index k = 0; k < nf; ++k) At.row(k) = rows.col(static_cast<Eigen::Index>(free_[static_cast<std::size_t>(k)])).transpose();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(At);
  qr.setThreshold(1e-10);
  const Eigen::Index r = qr.rank();
  basis_ = qr.householderQ() * Eigen::MatrixXd::Identity(nf, r);
}

void ActiveProjector::project_free(Eigen::VectorXd& v) const {
  if (basis_.cols() == 0) return;
  const Eigen::VectorXd c = basis_.transpose() * v;
  v.noalias() -= basis_ * c;
}

std::vector<double> ActiveProjector::project(std::span<const double> v) const {
  if (v.size() != n_) throw InvalidInput("projection length mismatch");
  Eigen::VectorXd f(static_cast<Eigen::Index>(free_.size()));
  for (std::size_t k = 0; k < free_.size(); ++k) f(static_cast<Eigen::Index>(k)) = v[free_[k]];
  project_free(f);
  std::vector<double> out(n_, 0.0);
  for (std::size_t k = 0; k < free_.size(); ++k) out[free_[k]] = f(static_cast<Eigen::Index>(k));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

PhaseResult run_phase(const Eigen::MatrixXd& rows, std::span<const double> x_in, const FrozenMask& frozen_in,
                      const WalkConfig& cfg, std::uint64_t seed) {
  PhaseResult out;
  out.x.assign(x_in.begin(), x_in.end());
  out.frozen = frozen_in.empty() ? FrozenMask(x_in.size(), 0) : frozen_in;

  auto proj = std::make_unique<ActiveProjector>(rows, out.frozen);
  if (proj->saturated()) {
    out.saturated = true;
    return out;
  }

  Rng rng(seed);
  const long T = cfg.phase_length();
  auto gather = [&](const ActiveProjector& p) {
    Eigen::VectorXd xf(static_cast<Eigen::Index>(p.free_coords().size()));
    for (std::size_t k = 0; k < p.free_coords().size(); ++k) xf(static_cast<Eigen::Index>(k)) = out.x[p.free_coords()[k]];
    return xf;
  };
  auto scatter = [&](const ActiveProjector& p, const Eigen::VectorXd& xf) {
    for (std::size_t k = 0; k < p.free_coords().size(); ++k) out.x[p.free_coords()[k]] = xf(static_cast<Eigen::Index>(k));
  };

  Eigen::VectorXd xf = gather(*proj);
  Eigen::VectorXd g(xf.size());
  std::vector<double> rest(x_in.size());
  for (long t = 0; t < T; ++t) {
    out.steps = t + 1;
    g.resize(xf.size());
    for (Eigen::Index k = 0; k < g.size(); ++k) g(k) = rng.normal();
    proj->project_free(g);
    g *= cfg.step;
    if (!g.allFinite()) throw NumericError("non-finite walk step");

    // A step that reaches a face stops there, freezes the coordinate, and
    // continues with the remainder projected onto the smaller subspace.
    for (;;) {
      double tmin = std::numeric_limits<double>::infinity();
      for (Eigen::Index k = 0; k < g.size(); ++k) {
        const double s = g(k);
        if (s > 0.0)
          tmin = std::min(tmin, (1.0 - xf(k)) / s);
        else if (s < 0.0)
          tmin = std::min(tmin, -xf(k) / s);
      }
      if (tmin >= 1.0) {
        xf += g;
        break;
      }

      tmin = std::max(tmin, 0.0);
      const double cut = tmin * (1.0 + 1e-12) + 1e-300;
      xf += tmin * g;
      const auto& free = proj->free_coords();
      for (Eigen::Index k = 0; k < g.size(); ++k) {
        const double s = g(k);
        double t_hit = std::numeric_limits<double>::infinity();
        if (s > 0.0)
          t_hit = (1.0 - (xf(k) - tmin * s)) / s;
        else if (s < 0.0)
          t_hit = -(xf(k) - tmin * s) / s;
        if (t_hit <= cut) {
          xf(k) = s > 0.0 ? 1.0 : 0.0;
          out.frozen[free[static_cast<std::size_t>(k)]] = 1;
          ++out.newly_frozen;
        }
        rest[free[static_cast<std::size_t>(k)]] = (1.0 - tmin) * s;
      }
      scatter(*proj, xf);
      proj = std::make_unique<ActiveProjector>(rows, out.frozen);
      if (proj->saturated()) {
        out.saturated = true;
        return out;
      }
      xf = gather(*proj);
      g.resize(xf.size());
      for (std::size_t k = 0; k < proj->free_coords().size(); ++k)
        g(static_cast<Eigen::Index>(k)) = rest[proj->free_coords()[k]];
      proj->project_free(g);
      if (!(g.norm() > 1e-15)) break;
    }
  }
  scatter(*proj, xf);
  return out;
}

std::size_t count_free(const FrozenMask& f) {
  return static_cast<std::size_t>(std::count(f.begin(), f.end(), std::uint8_t{0}));
}

WalkResult start_state(const ConstraintSet& cs) {
  WalkResult r;
  r.x = cs.y;
  r.frozen.assign(cs.n(), 0);
  for (std::size_t j = 0; j < cs.n(); ++j)
    if (cs.y[j] == 0.0 || cs.y[j] == 1.0) r.frozen[j] = 1;
  return r;
}

void finish(const ConstraintSet& cs, WalkResult& r) {
  const auto res = constraint_residual(cs, r.x);
  double l2 = 0.0;
  for (double v : res) l2 += v * v;
  r.residual_l2 = std::sqrt(l2);
  r.residual_inf = max_abs(res);
}

}  // namespace

PhaseResult lm_phase(const ConstraintSet& cs, std::span<const double> x_in, const FrozenMask& frozen,
                     const WalkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  cs.validate(false);
  if (x_in.size() != cs.n()) throw InvalidInput("x length differs from n");
  if (!frozen.empty() && frozen.size() != cs.n()) throw InvalidInput("frozen mask length differs from n");
  for (std::size_t j = 0; j < cs.n(); ++j) {
    if (!(x_in[j] >= 0.0 && x_in[j] <= 1.0)) throw InvalidInput("x must lie in the box");
    if (!frozen.empty() && frozen[j] && x_in[j] != 0.0 && x_in[j] != 1.0)
      throw InvalidInput("frozen coordinates must be 0 or 1");
  }
  const Eigen::MatrixXd rows = unit_rows(cs.M);
  Eigen::VectorXd d(static_cast<Eigen::Index>(cs.n()));
  for (std::size_t j = 0; j < cs.n(); ++j) d(static_cast<Eigen::Index>(j)) = x_in[j] - cs.y[j];
  if (rows.rows() > 0 && (rows * d).cwiseAbs().maxCoeff() > 1e-8)
    throw InvalidInput("starting point violates the constraints");
  return run_phase(rows, x_in, frozen, cfg, seed);
}

std::size_t WalkResult::fractional() const { return count_free(frozen); }

nlohmann::json WalkResult::to_json() const {
  nlohmann::json j;
  j["x"] = hex_array(x);
  j["frozen"] = frozen;
  j["phases"] = phases;
  j["fractional"] = fractional();
  j["frozen_counts"] = frozen_counts;
  j["residual_l2"] = to_hex(residual_l2);
  j["residual_inf"] = to_hex(residual_inf);
  auto log_j = nlohmann::json::array();
  for (const auto& e : log)
    log_j.push_back({{"attempt", e.attempt},
                     {"fractional_before", e.fractional_before},
                     {"fractional_after", e.fractional_after},
                     {"accepted", e.accepted},
                     {"steps", e.steps}});
  j["phase_log"] = log_j;
  return j;
}

WalkResult lm_round(const ConstraintSet& cs, const WalkConfig& cfg) {
  cfg.validate();
  cs.validate(true);
  if (cs.m() < 1) throw InvalidInput("walk rounding requires at least one constraint");
  const Eigen::MatrixXd rows = unit_rows(cs.M);
  const std::size_t target = 16 * cs.m();

  WalkResult r = start_state(cs);
  for (int attempt = 0;; ++attempt) {
    const std::size_t before = r.fractional();
    if (before <= target) break;
    if (attempt >= cfg.max_phases) {
      finish(cs, r);
      throw MaxPhasesExceeded("walk exceeded the phase budget", r);
    }
    PhaseResult ph = run_phase(rows, r.x, r.frozen, cfg, derive_seed(cfg.seed, static_cast<std::uint64_t>(attempt)));
    const std::size_t after = count_free(ph.frozen);
    const bool good = 2 * (before - after) >= before;
    r.phases = attempt + 1;
    r.log.push_back({attempt, before, after, good, ph.steps});
    if (good) {
      r.x = std::move(ph.x);
      r.frozen = std::move(ph.frozen);
      r.frozen_counts.push_back(cs.n() - after);
    }
  }
  finish(cs, r);
  return r;
}

WalkResult walk_to_vertex(const ConstraintSet& cs, const WalkConfig& cfg) {
  cfg.validate();
  cs.validate(false);
  const Eigen::MatrixXd rows = unit_rows(cs.M);
  WalkResult r = start_state(cs);
  for (int attempt = 0;; ++attempt) {
    if (ActiveProjector(rows, r.frozen).saturated()) break;
    if (attempt >= cfg.max_phases) {
      finish(cs, r);
      throw MaxPhasesExceeded("walk exceeded the phase budget", r);
    }
    const std::size_t before = r.fractional();
    PhaseResult ph = run_phase(rows, r.x, r.frozen, cfg, derive_seed(cfg.seed, static_cast<std::uint64_t>(attempt)));
    r.x = std::move(ph.x);
    r.frozen = std::move(ph.frozen);
    r.phases = attempt + 1;
    r.log.push_back({attempt, before, r.fractional(), true, ph.steps});
    r.frozen_counts.push_back(cs.n() - r.fractional());
  }
  finish(cs, r);
  return r;
}

std::vector<double> constraint_residual(const ConstraintSet& cs, std::span<const double> x) {
  if (x.size() != cs.n()) throw InvalidInput("x length differs from n");
  Eigen::VectorXd d(static_cast<Eigen::Index>(cs.n()));
  for (std::size_t j = 0; j < cs.n(); ++j) d(static_cast<Eigen::Index>(j)) = x[j] - cs.y[j];
  const Eigen::VectorXd r = cs.M * d;
  return {r.data(), r.data() + r.size()};
}

IntegralityReport vertex_integrality_check(const ConstraintSet& cs, std::span<const double> x, double eps) {
  IntegralityReport rep;
  for (double v : x)
    if (v > eps && v < 1.0 - eps) ++rep.fractional;
  rep.residual_inf = max_abs(constraint_residual(cs, x));
  return rep;
}

double walk_variance_probe(const ConstraintSet& cs, const WalkConfig& cfg, std::span<const double> theta, int trials,
                           const FrozenMask& frozen) {
  if (trials < 30) throw InvalidConfig("variance probe needs at least 30 trials");
  if (theta.size() != cs.n()) throw InvalidInput("theta length differs from n");
  cfg.validate();
  cs.validate(false);
  const Eigen::MatrixXd rows = unit_rows(cs.M);
  FrozenMask start = frozen.empty() ? FrozenMask(cs.n(), 0) : frozen;
  std::vector<double> x0 = cs.y;
  for (std::size_t j = 0; j < cs.n(); ++j)
    if (start[j] && x0[j] != 0.0 && x0[j] != 1.0) throw InvalidInput("frozen coordinates must be 0 or 1");
  double acc = 0.0;
  for (int t = 0; t < trials; ++t) {
    const auto ph = run_phase(rows, x0, start, cfg, derive_seed(cfg.seed, static_cast<std::uint64_t>(t)));
    double ip = 0.0;
    for (std::size_t j = 0; j < cs.n(); ++j) ip += theta[j] * (ph.x[j] - cs.y[j]);
    acc += ip * ip;
  }
  return acc / trials;
}

}  // namespace dq

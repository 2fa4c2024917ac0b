#pragma once

// Constrained Gaussian random walk rounding (Lovett-Meka partial coloring).
//
// The walk lives in K = [0,1]^n ∩ {x : M(x - y) = 0}. Each step draws a
// standard Gaussian, projects it onto the orthogonal complement of the
// constraint rows together with the unit vectors of frozen coordinates, and
// moves by `step` times the projected vector. A step that would leave the box
// stops where the first coordinate reaches a face, freezes that coordinate at
// exactly 0 or 1, and spends the rest of its length along the remainder
// projected onto the smaller subspace.
// Every move lies in the null space of M, so the constraints hold to
// round-off for the whole walk.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dq/error.hpp"
#include "dq/grid.hpp"

namespace dq {

struct ConstraintSet {
  Eigen::MatrixXd M;      // m x n
  std::vector<double> y;  // in [0,1]^n

  std::size_t m() const { return static_cast<std::size_t>(M.rows()); }
  std::size_t n() const { return y.size(); }

  /// Checks finiteness, y in the box, column count. With
  /// `enforce_sample_bound`, also m <= n / 16.
  void validate(bool enforce_sample_bound = true) const;
};

/// Rows are per-sample gradients scaled componentwise by the grid spacing:
/// M_i = g_i ⊙ (w_up - w_down).
ConstraintSet make_constraint_set(const std::vector<std::vector<double>>& gradients, const Bracket& bracket,
                                  std::vector<double> y);

struct WalkConfig {
  double step = 0.02;
  double face_tol = 0.02;
  long steps_per_phase = 0;  // 0 selects ceil(4 / step^2)
  int max_phases = 200;
  std::uint64_t seed = 0;

  long phase_length() const;
  void validate() const;
};

/// Orthogonal projector onto the complement of span(active rows ∪ {e_j :
/// j frozen}), represented on the free coordinates by an orthonormal basis
/// of the restricted row space.
class ActiveProjector {
 public:
  ActiveProjector(const Eigen::MatrixXd& unit_rows, const FrozenMask& frozen);

  const std::vector<std::size_t>& free_coords() const { return free_; }
  std::size_t rank() const { return static_cast<std::size_t>(basis_.cols()); }
  bool saturated() const { return rank() >= free_.size(); }

  /// Projects a full-length vector; frozen coordinates come out as 0.
  std::vector<double> project(std::span<const double> v) const;

  /// Projects a vector given on the free coordinates only, in place.
  void project_free(Eigen::VectorXd& v) const;

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> free_;
  Eigen::MatrixXd basis_;  // |free| x rank, orthonormal columns
};

/// Constraint rows scaled to unit Euclidean norm; zero rows are dropped.
Eigen::MatrixXd unit_rows(const Eigen::MatrixXd& M);

struct PhaseResult {
  std::vector<double> x;
  FrozenMask frozen;
  bool saturated = false;
  long steps = 0;
  std::size_t newly_frozen = 0;
};

/// One walk phase of at most cfg.phase_length() steps from (x_in, frozen),
/// using generator seed `seed`.
PhaseResult lm_phase(const ConstraintSet& cs, std::span<const double> x_in, const FrozenMask& frozen,
                     const WalkConfig& cfg, std::uint64_t seed);

struct PhaseLogEntry {
  int attempt = 0;
  std::size_t fractional_before = 0;
  std::size_t fractional_after = 0;
  bool accepted = false;
  long steps = 0;
};

struct WalkResult {
  std::vector<double> x;
  FrozenMask frozen;
  int phases = 0;  // attempted phases, including discarded ones
  std::vector<std::size_t> frozen_counts;  // after each accepted phase
  std::vector<PhaseLogEntry> log;
  double residual_l2 = 0.0;
  double residual_inf = 0.0;

  std::size_t fractional() const;
  nlohmann::json to_json() const;
};

class MaxPhasesExceeded : public std::runtime_error {
 public:
  MaxPhasesExceeded(const std::string& what, WalkResult partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const WalkResult& partial() const { return partial_; }

 private:
  WalkResult partial_;
};

/// Repeats walk phases until at most 16m coordinates are fractional. A phase
/// that freezes fewer than half of the currently fractional coordinates is
/// discarded and re-run with a fresh seed.
WalkResult lm_round(const ConstraintSet& cs, const WalkConfig& cfg);

/// Runs phases until no free direction is left, i.e. x is a vertex of K.
/// Does not require m <= n / 16.
WalkResult walk_to_vertex(const ConstraintSet& cs, const WalkConfig& cfg);

struct IntegralityReport {
  std::size_t fractional = 0;
  double residual_inf = 0.0;
};

IntegralityReport vertex_integrality_check(const ConstraintSet& cs, std::span<const double> x, double eps = 1e-9);

/// Monte-Carlo mean of <theta, x - y>^2 over `trials` independent phases
/// started at y with the given frozen mask (empty = nothing frozen).
double walk_variance_probe(const ConstraintSet& cs, const WalkConfig& cfg, std::span<const double> theta, int trials,
                           const FrozenMask& frozen = {});

/// Residual M(x - y) with the unnormalized rows.
std::vector<double> constraint_residual(const ConstraintSet& cs, std::span<const double> x);

}  // namespace dq

#pragma once

// Synthetic gradient distributions with power-law spectra, covariance
// estimation error in the Schatten-1 norm, and the sample-size scaling
// studies built on them.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dq/lmwalk.hpp"

namespace dq {

enum class Basis { AxisAligned, RandomOrthogonal };
enum class Family { Gaussian, ScaledRademacher };

/// Covariance Q diag(lambda_1 / k^alpha) Q^T.
struct SpectrumSpec {
  std::size_t n = 256;
  double lambda1 = 1.0;
  double alpha = 2.0;
  Basis basis = Basis::AxisAligned;
  std::uint64_t basis_seed = 0;
  Family family = Family::Gaussian;

  void validate() const;
  std::vector<double> eigenvalues() const;
  /// Identity for axis-aligned specs, a Haar-random orthogonal matrix
  /// otherwise.
  Eigen::MatrixXd basis_matrix() const;
  Eigen::MatrixXd sigma() const;

  nlohmann::json to_json() const;
  static SpectrumSpec from_json(const nlohmann::json& j);
};

/// m x n matrix whose rows are i.i.d. Q diag(sqrt(lambda)) z with z standard
/// Gaussian or uniform signs.
Eigen::MatrixXd sample_gradients(const SpectrumSpec& spec, std::size_t m, std::uint64_t seed);

/// As above with a precomputed basis (skips re-deriving Q per call).
Eigen::MatrixXd sample_gradients(const SpectrumSpec& spec, const Eigen::MatrixXd& basis, std::size_t m,
                                 std::uint64_t seed);

/// (1/m) G^T G.
Eigen::MatrixXd empirical_covariance(const Eigen::MatrixXd& g);

/// Sum of |eigenvalues| of X - Sigma.
double schatten1_error(const Eigen::MatrixXd& x, const Eigen::MatrixXd& sigma);

/// E<g,theta>^4 / (E<g,theta>^2)^2 over the rows of g.
double fourth_moment_ratio(const Eigen::MatrixXd& g, std::span<const double> theta);

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double stderr_slope = 0.0;  // 0 when only two points
};

/// Ordinary least squares of log(y) on log(x).
LineFit fit_loglog(std::span<const double> x, std::span<const double> y);

double spearman(std::span<const double> a, std::span<const double> b);

struct FalphaRow {
  std::size_t m = 0;
  int trial = 0;
  std::uint64_t seed = 0;
  double error = 0.0;
};

struct FalphaStudy {
  std::vector<FalphaRow> rows;
  std::vector<std::size_t> m_grid;
  std::vector<double> mean_error;
  LineFit fit;
};

/// Argument checks of the two studies, usable before any work starts.
void check_falpha_args(const std::vector<std::size_t>& m_grid, int trials);
void check_generalization_args(const SpectrumSpec& spec, const std::vector<std::size_t>& m_grid, int trials);

/// Requires >= 4 geometrically spaced m values and >= 20 trials.
FalphaStudy falpha_scaling_study(const SpectrumSpec& spec, const std::vector<std::size_t>& m_grid, int trials,
                                 std::uint64_t seed, int workers = 1);

struct GenRow {
  std::size_t m = 0;
  int trial = 0;
  std::uint64_t seed = 0;
  double quad_form = 0.0;  // (x - y)^T Sigma (x - y)
  std::size_t fractional = 0;
  int phases = 0;
};

struct GenStudy {
  std::vector<GenRow> rows;
  std::vector<std::size_t> m_grid;
  std::vector<double> median_quad;
  std::vector<double> mean_quad;
  LineFit fit;  // on the means
};

/// LmRound stops at <= 16m fractional coordinates, so at m = n/16 it returns
/// y untouched. Vertex keeps walking until at most m coordinates are
/// fractional, which makes every m in the grid do comparable work.
enum class GenRounding { LmRound, Vertex };

/// One trial: y uniform in [0,1]^n, m sampled gradients as constraints,
/// walk, quadratic form against the analytic Sigma. m = 0 returns x = y.
GenRow generalization_trial(const SpectrumSpec& spec, const Eigen::MatrixXd& basis, std::size_t m,
                            const WalkConfig& walk, std::uint64_t seed, GenRounding rounding = GenRounding::Vertex);

/// Requires max(m_grid) <= n / 16 and at least two m values, all >= 1.
GenStudy generalization_study(const SpectrumSpec& spec, const std::vector<std::size_t>& m_grid, int trials,
                              const WalkConfig& walk, std::uint64_t seed, int workers = 1,
                              GenRounding rounding = GenRounding::Vertex);

/// d x n matrix with i.i.d. N(0, 1/d) entries.
Eigen::MatrixXd jl_matrix(std::size_t d, std::size_t n, std::uint64_t seed);

/// Eigenvalues, descending, of the empirical covariance of the projected
/// rows P g_i.
std::vector<double> projected_spectrum(const Eigen::MatrixXd& g, const Eigen::MatrixXd& projection);

std::vector<double> jl_spectrum(const Eigen::MatrixXd& g, std::size_t d, std::uint64_t seed);

/// Fits lambda_k ~ k^(-alpha) over the eigenvalues >= rel_floor * lambda_1
/// and returns alpha.
double decay_exponent(std::span<const double> eigenvalues, double rel_floor = 1e-8);

}  // namespace dq

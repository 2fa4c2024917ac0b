#include "dq/speclab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dq/error.hpp"
#include "dq/parallel.hpp"
#include "dq/rng.hpp"

namespace dq {

namespace {

constexpr std::uint64_t kYStream = 1;
constexpr std::uint64_t kGradStream = 2;
constexpr std::uint64_t kWalkStream = 3;

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

void check_symmetric(const Eigen::MatrixXd& a, const char* what) {
  if (a.rows() != a.cols()) throw InvalidInput(std::string(what) + " must be square");
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-8) throw InvalidInput(std::string(what) + " is not symmetric");
}

}  // namespace

void SpectrumSpec::validate() const {
  if (n < 1) throw InvalidConfig("spectrum dimension must be >= 1");
  if (!(lambda1 > 0.0) || !std::isfinite(lambda1)) throw InvalidConfig("lambda1 must be positive");
  if (!(alpha > 1.0) || !std::isfinite(alpha)) throw InvalidConfig("alpha must exceed 1");
}

std::vector<double> SpectrumSpec::eigenvalues() const {
  validate();
  std::vector<double> lam(n);
  for (std::size_t k = 0; k < n; ++k) lam[k] = lambda1 / std::pow(static_cast<double>(k + 1), alpha);
  return lam;
}

Eigen::MatrixXd SpectrumSpec::basis_matrix() const {
  validate();
  const auto dim = static_cast<Eigen::Index>(n);
  if (basis == Basis::AxisAligned) return Eigen::MatrixXd::Identity(dim, dim);
  Rng rng(basis_seed);
  Eigen::MatrixXd z(dim, dim);
  for (Eigen::Index j = 0; j < dim; ++j)
    for (Eigen::Index i = 0; i < dim; ++i) z(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(z);
  Eigen::MatrixXd q = qr.householderQ();
  // Sign fix on diag(R) makes the distribution Haar.
  const Eigen::MatrixXd& r = qr.matrixQR();
  for (Eigen::Index j = 0; j < dim; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return q;
}

Eigen::MatrixXd SpectrumSpec::sigma() const {
  const auto lam = eigenvalues();
  const Eigen::MatrixXd q = basis_matrix();
  const Eigen::VectorXd l = Eigen::Map<const Eigen::VectorXd>(lam.data(), static_cast<Eigen::Index>(lam.size()));
  Eigen::MatrixXd s = q * l.asDiagonal() * q.transpose();
  return 0.5 * (s + s.transpose());
}

nlohmann::json SpectrumSpec::to_json() const {
  return {{"n", n},
          {"lambda1", lambda1},
          {"alpha", alpha},
          {"basis", basis == Basis::AxisAligned ? "axis-aligned" : "random-orthogonal"},
          {"basis_seed", basis_seed},
          {"family", family == Family::Gaussian ? "gaussian" : "scaled-rademacher"}};
}

SpectrumSpec SpectrumSpec::from_json(const nlohmann::json& j) {
  SpectrumSpec s;
  s.n = j.value("n", s.n);
  s.lambda1 = j.value("lambda1", s.lambda1);
  s.alpha = j.value("alpha", s.alpha);
  const auto b = j.value("basis", std::string("axis-aligned"));
  if (b == "axis-aligned")
    s.basis = Basis::AxisAligned;
  else if (b == "random-orthogonal")
    s.basis = Basis::RandomOrthogonal;
  else
    throw InvalidConfig("basis must be axis-aligned or random-orthogonal");
  s.basis_seed = j.value("basis_seed", s.basis_seed);
  const auto f = j.value("family", std::string("gaussian"));
  if (f == "gaussian")
    s.family = Family::Gaussian;
  else if (f == "scaled-rademacher")
    s.family = Family::ScaledRademacher;
  else
    throw InvalidConfig("family must be gaussian or scaled-rademacher");
  s.validate();
  return s;
}

Eigen::MatrixXd sample_gradients(const SpectrumSpec& spec, std::size_t m, std::uint64_t seed) {
  return sample_gradients(spec, spec.basis_matrix(), m, seed);
}

Eigen::MatrixXd sample_gradients(const SpectrumSpec& spec, const Eigen::MatrixXd& basis, std::size_t m,
                                 std::uint64_t seed) {
  const auto lam = spec.eigenvalues();
  const auto n = static_cast<Eigen::Index>(spec.n);
  if (basis.rows() != n || basis.cols() != n) throw InvalidInput("basis does not match the spectrum dimension");
  Rng rng(seed);
  Eigen::MatrixXd z(static_cast<Eigen::Index>(m), n);
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index k = 0; k < n; ++k) {
      const double e = spec.family == Family::Gaussian ? rng.normal() : (rng.next_u64() >> 63 ? 1.0 : -1.0);
      z(i, k) = std::sqrt(lam[static_cast<std::size_t>(k)]) * e;
    }
  if (spec.basis == Basis::AxisAligned) return z;
  return z * basis.transpose();
}

Eigen::MatrixXd empirical_covariance(const Eigen::MatrixXd& g) {
  if (g.rows() == 0) throw InvalidInput("empty sample");
  Eigen::MatrixXd x = (g.transpose() * g) / static_cast<double>(g.rows());
  return 0.5 * (x + x.transpose());
}

double schatten1_error(const Eigen::MatrixXd& x, const Eigen::MatrixXd& sigma) {
  check_symmetric(x, "X");
  check_symmetric(sigma, "Sigma");
  if (x.rows() != sigma.rows()) throw InvalidInput("X and Sigma differ in shape");
  const Eigen::MatrixXd d = x - sigma;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (d + d.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  return es.eigenvalues().cwiseAbs().sum();
}

double fourth_moment_ratio(const Eigen::MatrixXd& g, std::span<const double> theta) {
  if (static_cast<std::size_t>(g.cols()) != theta.size()) throw InvalidInput("theta length mismatch");
  if (g.rows() == 0) throw InvalidInput("empty sample");
  const Eigen::VectorXd t = Eigen::Map<const Eigen::VectorXd>(theta.data(), g.cols());
  const Eigen::VectorXd p = g * t;
  const double m2 = p.array().square().mean();
  const double m4 = p.array().square().square().mean();
  if (!(m2 > 0.0)) throw NumericError("zero second moment along theta");
  return m4 / (m2 * m2);
}

LineFit fit_loglog(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidInput("need at least two points");
  const std::size_t k = x.size();
  std::vector<double> lx(k), ly(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw NumericError("log-log fit needs positive values");
    lx[i] = std::log(x[i]);
    ly[i] = std::log(y[i]);
  }
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / static_cast<double>(k);
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / static_cast<double>(k);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (!(sxx > 0.0)) throw NumericError("degenerate fit: x has zero variance");
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  if (k > 2) {
    double rss = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double r = ly[i] - f.intercept - f.slope * lx[i];
      rss += r * r;
    }
    f.stderr_slope = std::sqrt(rss / static_cast<double>(k - 2) / sxx);
  }
  return f;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw InvalidInput("need two equal-length samples");
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / static_cast<double>(ra.size());
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / static_cast<double>(rb.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw NumericError("constant sample");
  return sab / std::sqrt(saa * sbb);
}

void check_falpha_args(const std::vector<std::size_t>& m_grid, int trials) {
  if (m_grid.size() < 4) throw InvalidConfig("m grid needs at least 4 points");
  if (trials < 20) throw InvalidConfig("at least 20 trials per point");
  if (m_grid.front() < 1) throw InvalidConfig("m must be >= 1");
  const double ratio = static_cast<double>(m_grid[1]) / static_cast<double>(m_grid[0]);
  for (std::size_t i = 1; i < m_grid.size(); ++i) {
    const double r = static_cast<double>(m_grid[i]) / static_cast<double>(m_grid[i - 1]);
    if (!(r > 1.0) || std::abs(r - ratio) > 1e-9 * ratio) throw InvalidConfig("m grid must be geometric and increasing");
  }
}

void check_generalization_args(const SpectrumSpec& spec, const std::vector<std::size_t>& m_grid, int trials) {
  spec.validate();
  if (m_grid.size() < 2) throw InvalidConfig("m grid needs at least 2 points");
  if (trials < 1) throw InvalidConfig("trials must be >= 1");
  for (std::size_t i = 0; i < m_grid.size(); ++i) {
    if (m_grid[i] < 1) throw InvalidConfig("m must be >= 1");
    if (16 * m_grid[i] > spec.n) throw InvalidConfig("m must not exceed n / 16");
    if (i > 0 && m_grid[i] <= m_grid[i - 1]) throw InvalidConfig("m grid must be increasing");
  }
}

FalphaStudy falpha_scaling_study(const SpectrumSpec& spec, const std::vector<std::size_t>& m_grid, int trials,
                                 std::uint64_t seed, int workers) {
  spec.validate();
  check_falpha_args(m_grid, trials);

  const Eigen::MatrixXd q = spec.basis_matrix();
  const Eigen::MatrixXd sigma = spec.sigma();
  FalphaStudy st;
  st.m_grid = m_grid;
  const auto t = static_cast<std::size_t>(trials);
  st.rows.resize(m_grid.size() * t);
  parallel_for(st.rows.size(), workers, [&](std::size_t idx) {
    const std::size_t m = m_grid[idx / t];
    const int trial = static_cast<int>(idx % t);
    const std::uint64_t s = derive_seed(derive_seed(seed, m), static_cast<std::uint64_t>(trial));
    const Eigen::MatrixXd g = sample_gradients(spec, q, m, s);
    st.rows[idx] = {m, trial, s, schatten1_error(empirical_covariance(g), sigma)};
  });
  for (std::size_t p = 0; p < m_grid.size(); ++p) {
    double sum = 0.0;
    for (std::size_t k = 0; k < t; ++k) sum += st.rows[p * t + k].error;
    st.mean_error.push_back(sum / static_cast<double>(t));
  }
  std::vector<double> ms(m_grid.begin(), m_grid.end());
  st.fit = fit_loglog(ms, st.mean_error);
  return st;
}

GenRow generalization_trial(const SpectrumSpec& spec, const Eigen::MatrixXd& basis, std::size_t m,
                            const WalkConfig& walk, std::uint64_t seed, GenRounding rounding) {
  GenRow row;
  row.m = m;
  row.seed = seed;
  Rng yr(derive_seed(seed, kYStream));
  std::vector<double> y(spec.n);
  for (auto& v : y) v = yr.uniform();
  if (m == 0) {
    row.fractional = spec.n;
    return row;
  }
  ConstraintSet cs{sample_gradients(spec, basis, m, derive_seed(seed, kGradStream)), y};
  WalkConfig wc = walk;
  wc.seed = derive_seed(seed, kWalkStream);
  cs.validate();
  const WalkResult r = rounding == GenRounding::LmRound ? lm_round(cs, wc) : walk_to_vertex(cs, wc);

  const auto lam = spec.eigenvalues();
  Eigen::VectorXd d(static_cast<Eigen::Index>(spec.n));
  for (std::size_t j = 0; j < spec.n; ++j) d[static_cast<Eigen::Index>(j)] = r.x[j] - y[j];
  const Eigen::VectorXd p = spec.basis == Basis::AxisAligned ? d : Eigen::VectorXd(basis.transpose() * d);
  double q = 0.0;
  for (std::size_t k = 0; k < spec.n; ++k) q += lam[k] * p[static_cast<Eigen::Index>(k)] * p[static_cast<Eigen::Index>(k)];
  row.quad_form = q;
  row.fractional = r.fractional();
  row.phases = r.phases;
  return row;
}

GenStudy generalization_study(const SpectrumSpec& spec, const std::vector<std::size_t>& m_grid, int trials,
                              const WalkConfig& walk, std::uint64_t seed, int workers, GenRounding rounding) {
  walk.validate();
  check_generalization_args(spec, m_grid, trials);

  const Eigen::MatrixXd q = spec.basis_matrix();
  GenStudy st;
  st.m_grid = m_grid;
  const auto t = static_cast<std::size_t>(trials);
  st.rows.resize(m_grid.size() * t);
  parallel_for(st.rows.size(), workers, [&](std::size_t idx) {
    const std::size_t m = m_grid[idx / t];
    const int trial = static_cast<int>(idx % t);
    const std::uint64_t s = derive_seed(derive_seed(seed, m), static_cast<std::uint64_t>(trial));
    st.rows[idx] = generalization_trial(spec, q, m, walk, s, rounding);
    st.rows[idx].trial = trial;
  });
  for (std::size_t p = 0; p < m_grid.size(); ++p) {
    std::vector<double> v;
    for (std::size_t k = 0; k < t; ++k) v.push_back(st.rows[p * t + k].quad_form);
    st.mean_quad.push_back(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(t));
    st.median_quad.push_back(median_of(v));
  }
  std::vector<double> ms(m_grid.begin(), m_grid.end());
  st.fit = fit_loglog(ms, st.mean_quad);
  return st;
}

Eigen::MatrixXd jl_matrix(std::size_t d, std::size_t n, std::uint64_t seed) {
  if (d < 1 || d > n) throw InvalidInput("projection dimension must lie in [1, n]");
  Rng rng(seed);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  Eigen::MatrixXd p(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < p.cols(); ++j)
    for (Eigen::Index i = 0; i < p.rows(); ++i) p(i, j) = s * rng.normal();
  return p;
}

std::vector<double> projected_spectrum(const Eigen::MatrixXd& g, const Eigen::MatrixXd& projection) {
  if (projection.cols() != g.cols()) throw InvalidInput("projection width does not match gradient length");
  const Eigen::MatrixXd pg = g * projection.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(empirical_covariance(pg), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  std::vector<double> ev(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
  std::sort(ev.begin(), ev.end(), std::greater<>());
  return ev;
}

std::vector<double> jl_spectrum(const Eigen::MatrixXd& g, std::size_t d, std::uint64_t seed) {
  return projected_spectrum(g, jl_matrix(d, static_cast<std::size_t>(g.cols()), seed));
}

double decay_exponent(std::span<const double> eigenvalues, double rel_floor) {
  if (eigenvalues.empty() || !(eigenvalues[0] > 0.0)) throw InvalidInput("need a positive leading eigenvalue");
  std::vector<double> k, v;
  for (std::size_t i = 0; i < eigenvalues.size(); ++i) {
    if (eigenvalues[i] < rel_floor * eigenvalues[0]) break;
    k.push_back(static_cast<double>(i + 1));
    v.push_back(eigenvalues[i]);
  }
  return -fit_loglog(k, v).slope;
}

}  // namespace dq

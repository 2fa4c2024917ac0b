#pragma once

// Brute-force vertex enumeration for K = [0,1]^n ∩ {x : M(x - y) = 0}:
// fix n - m coordinates to every 0/1 pattern, solve the m equations for the
// rest, keep solutions inside the box. Exponential; small n only.

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "dq/lmwalk.hpp"

namespace dq::oracle {

inline std::vector<std::vector<double>> enumerate_vertices(const ConstraintSet& cs) {
  const auto n = static_cast<int>(cs.n());
  const auto m = static_cast<int>(cs.m());
  Eigen::VectorXd y(n);
  for (int j = 0; j < n; ++j) y(j) = cs.y[static_cast<std::size_t>(j)];
  const Eigen::VectorXd rhs0 = cs.M * y;

  std::vector<std::vector<double>> out;
  auto already = [&](const std::vector<double>& v) {
    for (const auto& u : out) {
      double d = 0.0;
      for (std::size_t k = 0; k < u.size(); ++k) d = std::max(d, std::abs(u[k] - v[k]));
      if (d < 1e-9) return true;
    }
    return false;
  };

  // Iterate over the m-subsets of free coordinates.
  std::vector<int> pick(static_cast<std::size_t>(m));
  for (int k = 0; k < m; ++k) pick[static_cast<std::size_t>(k)] = k;
  while (true) {
    std::vector<int> fixed;
    for (int j = 0, p = 0; j < n; ++j) {
      if (p < m && pick[static_cast<std::size_t>(p)] == j)
        ++p;
      else
        fixed.push_back(j);
    }
    Eigen::MatrixXd A(m, m);
    for (int k = 0; k < m; ++k) A.col(k) = cs.M.col(pick[static_cast<std::size_t>(k)]);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    if (lu.rank() == m) {
      const long patterns = 1L << fixed.size();
      for (long bits = 0; bits < patterns; ++bits) {
        std::vector<double> v(static_cast<std::size_t>(n), 0.0);
        Eigen::VectorXd rhs = rhs0;
        for (std::size_t f = 0; f < fixed.size(); ++f) {
          const double val = (bits >> f) & 1 ? 1.0 : 0.0;
          v[static_cast<std::size_t>(fixed[f])] = val;
          rhs -= val * cs.M.col(fixed[f]);
        }
        const Eigen::VectorXd z = lu.solve(rhs);
        bool inside = true;
        for (int k = 0; k < m; ++k) {
          if (z(k) < -1e-12 || z(k) > 1.0 + 1e-12) inside = false;
          v[static_cast<std::size_t>(pick[static_cast<std::size_t>(k)])] = std::clamp(z(k), 0.0, 1.0);
        }
        if (inside && !already(v)) out.push_back(std::move(v));
      }
    }
    // Next combination.
    int k = m - 1;
    while (k >= 0 && pick[static_cast<std::size_t>(k)] == n - m + k) --k;
    if (k < 0) break;
    ++pick[static_cast<std::size_t>(k)];
    for (int r = k + 1; r < m; ++r) pick[static_cast<std::size_t>(r)] = pick[static_cast<std::size_t>(r - 1)] + 1;
  }
  return out;
}

/// True when some vertex agrees with x on every frozen coordinate.
inline bool matches_vertex(const std::vector<std::vector<double>>& verts, const std::vector<double>& x,
                           const FrozenMask& frozen) {
  for (const auto& v : verts) {
    bool ok = true;
    for (std::size_t j = 0; j < x.size() && ok; ++j)
      if (frozen[j] && v[j] != x[j]) ok = false;
    if (ok) return true;
  }
  return false;
}

}  // namespace dq::oracle

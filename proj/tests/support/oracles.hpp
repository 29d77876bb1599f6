// SPDX-License-Identifier: Apache-2.0
//
// Independent test oracles: finite differences, brute-force numerical
// Jacobians, empirical-CDF statistics and chi-square critical values. These
// deliberately avoid the library's own analytic paths.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "condflow/tensor.hpp"

namespace oracles {

// Central-difference gradient of f at x.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double step) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + step;
    const double up = f(x);
    x[i] = xi - step;
    const double dn = f(x);
    x[i] = xi;
    g[i] = (up - dn) / (2.0 * step);
  }
  return g;
}

// Dense numerical Jacobian of a vector map, central differences.
inline Eigen::MatrixXd numerical_jacobian(
    const std::function<std::vector<double>(const std::vector<double>&)>& f,
    std::vector<double> x, double step) {
  const std::vector<double> y0 = f(x);
  Eigen::MatrixXd jac(y0.size(), x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double xj = x[j];
    x[j] = xj + step;
    const std::vector<double> up = f(x);
    x[j] = xj - step;
    const std::vector<double> dn = f(x);
    x[j] = xj;
    for (std::size_t i = 0; i < y0.size(); ++i)
      jac(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          (up[i] - dn[i]) / (2.0 * step);
  }
  return jac;
}

inline double log_abs_det(const Eigen::MatrixXd& m) {
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
  double s = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) s += std::log(std::fabs(lu.matrixLU()(i, i)));
  return s;
}

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Brute-force one-sample KS statistic against any CDF: max over a fine sweep
// of |ECDF(t) - cdf(t)| evaluated on both sides of every sample point.
inline double ks_stat_brute(std::vector<double> xs, const std::function<double(double)>& cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double c = cdf(xs[i]);
    worst = std::max(worst, std::fabs((static_cast<double>(i) + 1.0) / n - c));
    worst = std::max(worst, std::fabs(static_cast<double>(i) / n - c));
  }
  return worst;
}

inline double chi2_stat(const std::vector<std::size_t>& counts, double expected_per_bin) {
  double s = 0.0;
  for (std::size_t c : counts) {
    const double d = static_cast<double>(c) - expected_per_bin;
    s += d * d / expected_per_bin;
  }
  return s;
}

// 99th percentile of chi-square; entries for the degrees of freedom used here.
inline double chi2_crit_99(int df) {
  switch (df) {
    case 15: return 30.5779;
    case 16: return 31.9999;
    default: break;
  }
  throw std::invalid_argument("chi2_crit_99: df not tabulated");
}

} // namespace oracles

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <stdexcept>

#include "condflow/rng.hpp"
#include "condflow/tensor.hpp"

namespace condflow {

// Orthogonal initialization: QR of a Gaussian matrix, sign-corrected so R has
// a positive diagonal, scaled by `gain`. For non-square W the result is
// semi-orthogonal along the shorter side.
inline void orthogonal_init(Tensor& w, double gain, Rng& rng) {
  if (w.ndim() != 2) throw std::invalid_argument("orthogonal_init: need a 2D tensor");
  const std::size_t r = w.rows(), c = w.cols();
  const std::size_t big = std::max(r, c), small = std::min(r, c);

  Eigen::MatrixXd g(big, small);
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  const Eigen::MatrixXd rmat = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (std::size_t j = 0; j < small; ++j)
    if (rmat(j, j) < 0) q.col(j) = -q.col(j);

  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      w.at(i, j) = gain * (r >= c ? q(i, j) : q(j, i));
}

} // namespace condflow

// SPDX-License-Identifier: Apache-2.0
//
// Training objectives and conditional inference.
//
//   loss_flow         negative log-likelihood through the map (data -> prior)
//   loss_backwards    rule-based surrogate driven from prior samples
//   loss_conditional  joint objective: prior term + lambda * L1(y', y) - logdet
//
// The conditional loss exposes its three terms separately so stage detection
// can watch the distance term collapse.
#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "condflow/flow.hpp"
#include "condflow/rng.hpp"

namespace condflow {

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

// Standard normal latent prior.
struct Prior {
  std::size_t dim = 0;

  double log_density(const double* z) const {
    double q = 0;
    for (std::size_t i = 0; i < dim; ++i) q += z[i] * z[i];
    return -0.5 * q - 0.5 * static_cast<double>(dim) * kLog2Pi;
  }
  double log_density(const Tensor& z) const { return log_density(z.data.data()); }

  // Per-sample negative log-density of a [B x dim] batch -> [B x 1].
  Value nll_node(Tape& t, Value z) const {
    Value q = row_sum(mul(z, z));
    return add_const(scale(q, 0.5), 0.5 * static_cast<double>(dim) * kLog2Pi);
  }

  Tensor sample(std::size_t n, Rng& rng) const { return rng.normal_tensor({n, dim}); }
};

// Hand-written surrogate densities for rule-based backwards training. Each
// rule vanishes exactly on its target set and grows away from it.
struct RuleLoss {
  enum class Kind { circle, diamond, line, cross, parabola };

  Kind kind = Kind::circle;
  double radius = 1.0;   // circle
  double ell = 1.0;      // diamond L1 size
  double lambda = 10.0;  // scale factor

  static RuleLoss circle(double r, double lambda) { return {Kind::circle, r, 1.0, lambda}; }
  static RuleLoss diamond(double ell, double lambda) { return {Kind::diamond, 1.0, ell, lambda}; }
  static RuleLoss line(double lambda) { return {Kind::line, 1.0, 1.0, lambda}; }
  static RuleLoss cross(double lambda) { return {Kind::cross, 1.0, 1.0, lambda}; }
  static RuleLoss parabola(double lambda) { return {Kind::parabola, 1.0, 1.0, lambda}; }

  static Kind kind_from(const std::string& s) {
    if (s == "circle") return Kind::circle;
    if (s == "diamond") return Kind::diamond;
    if (s == "line") return Kind::line;
    if (s == "cross") return Kind::cross;
    if (s == "parabola") return Kind::parabola;
    throw std::invalid_argument("rule: unknown kind '" + s + "'");
  }
  static const char* name(Kind k) {
    switch (k) {
      case Kind::circle: return "circle";
      case Kind::diamond: return "diamond";
      case Kind::line: return "line";
      case Kind::cross: return "cross";
      case Kind::parabola: return "parabola";
    }
    return "circle";
  }

  double eval(double x0, double x1) const {
    switch (kind) {
      case Kind::circle: return std::fabs(x0 * x0 + x1 * x1 - radius * radius);
      case Kind::diamond: return std::fabs(std::fabs(x0) + std::fabs(x1) - ell);
      case Kind::line: return std::fabs(x0 + x1);
      case Kind::cross: return std::fabs(x0 * x1);
      case Kind::parabola: return std::fabs(x1 - x0 * x0);
    }
    throw std::invalid_argument("rule: unknown kind");
  }

  // [B x 2] points -> [B x 1] rule values.
  Value eval_node(Tape& t, Value x) const {
    if (x.tensor().cols() != 2) throw std::invalid_argument("rule: points must be 2D");
    switch (kind) {
      case Kind::circle:
        return abs(add_const(row_sum(mul(x, x)), -radius * radius));
      case Kind::diamond:
        return abs(add_const(row_sum(abs(x)), -ell));
      case Kind::line:
        return abs(row_sum(x));
      case Kind::cross:
        return abs(mul(slice_cols(x, 0, 1), slice_cols(x, 1, 2)));
      case Kind::parabola: {
        Value x0 = slice_cols(x, 0, 1);
        return abs(sub(slice_cols(x, 1, 2), mul(x0, x0)));
      }
    }
    throw std::invalid_argument("rule: unknown kind");
  }
};

inline double rule_eval(RuleLoss::Kind kind, double x0, double x1, double r = 1.0,
                        double ell = 1.0) {
  RuleLoss rl{kind, r, ell, 1.0};
  return rl.eval(x0, x1);
}

struct CondObjectiveConfig {
  double lambda = 100.0;  // weight of the condition-distance term

  CondObjectiveConfig() = default;
  explicit CondObjectiveConfig(double l) : lambda(l) {
    if (l <= 0) throw std::invalid_argument("lambda must be positive");
  }
};

struct FlowLossOut {
  Value total;        // [1]
  Value prior_term;   // [1] mean -log p_Z
  Value logdet_term;  // [1] mean -logdet (as added into total)
};

// Eq.-2 style objective: mean( -log p_Z(F(x)) - logdet ).
inline FlowLossOut loss_flow(const FlowModel& f, Tape& t, Value x,
                             std::span<const Value> params) {
  auto out = f.forward(t, x, Value{}, params);
  Prior prior{f.dx()};
  Value prior_term = mean(prior.nll_node(t, out.z));
  Value logdet_term = neg(mean(out.logdet));
  return {add(prior_term, logdet_term), prior_term, logdet_term};
}

struct BackwardsLossOut {
  Value total;
  Value rule_term;    // [1] lambda * mean rule value
  Value logdet_term;  // [1] mean -log|det J_{F^-1}|
  double rule_mean;   // unscaled mean rule value
};

// Rule-based surrogate objective on prior samples z: the model is evaluated
// backwards and penalized by the rule instead of a data density.
inline BackwardsLossOut loss_backwards(const FlowModel& f, Tape& t, Value z,
                                       const RuleLoss& rule, std::span<const Value> params) {
  auto out = f.inverse(t, z, Value{}, params);
  Value rule_vals = rule.eval_node(t, out.x);
  Value rule_mean = mean(rule_vals);
  Value rule_term = scale(rule_mean, rule.lambda);
  Value logdet_term = neg(mean(out.logdet));
  return {add(rule_term, logdet_term), rule_term, logdet_term,
          rule_mean.tensor().data[0]};
}

struct CondLossOut {
  Value total;        // [1]
  Value prior_term;   // [1]
  Value dist_term;    // [1] lambda-scaled
  Value logdet_term;  // [1]
  double dist_mean_l1 = 0;  // unscaled mean-L1 distance, for stage detection
};

// Joint conditional objective. The distance convention is the mean (not sum)
// of per-element absolute differences, so lambda keeps one meaning across
// condition dimensionalities.
inline CondLossOut loss_conditional(const FlowModel& f, Tape& t, Value x, Value y,
                                    const CondObjectiveConfig& cfg,
                                    std::span<const Value> params) {
  if (!f.conditional()) throw std::invalid_argument("loss_conditional: model has no condition");
  auto out = f.forward(t, x, y, params);
  Prior prior{f.dx()};
  Value prior_term = mean(prior.nll_node(t, out.z));
  Value dist_mean = mean(abs(sub(out.yprime, y)));
  Value dist_term = scale(dist_mean, cfg.lambda);
  Value logdet_term = neg(mean(out.logdet));
  Value total = add(add(prior_term, dist_term), logdet_term);
  return {total, prior_term, dist_term, logdet_term, dist_mean.tensor().data[0]};
}

struct ConditionalSamples {
  Tensor x;        // [n x dx] draws from p(x | y)
  Tensor y_back;   // [n x dy] returned condition F_Y^-1(z, y)
  Tensor z;        // [n x dx] latent draws used
};

// Draw n conditional samples for a fixed condition y ([dy] or [1 x dy]).
inline ConditionalSamples sample_conditional(const FlowModel& f, const Tensor& y, std::size_t n,
                                             Rng& rng) {
  if (y.numel() != f.dy())
    throw std::invalid_argument("sample_conditional: condition has wrong size");
  Prior prior{f.dx()};
  Tensor z = prior.sample(n, rng);
  Tensor yrep({n, f.dy()});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(y.data.data(), f.dy(), &yrep.data[i * f.dy()]);
  auto out = f.inverse_eval(z, yrep);
  return {std::move(out.x), std::move(out.y), std::move(z)};
}

enum class DensityMode { approximate, exact_block };

// Conditional log-density. Approximate mode uses the full-map logdet, valid
// once the condition-preserving stage has converged; exact mode computes the
// dZ/dx block with central differences (small dimensions only).
inline Tensor log_density_conditional(const FlowModel& f, const Tensor& x, const Tensor& y,
                                      DensityMode mode = DensityMode::approximate,
                                      double fd_step = 1e-5) {
  const std::size_t n = x.rows();
  Prior prior{f.dx()};
  Tensor out({n, 1});
  if (mode == DensityMode::approximate) {
    auto fwd = f.forward_eval(x, y);
    for (std::size_t i = 0; i < n; ++i)
      out.data[i] = prior.log_density(&fwd.z.data[i * f.dx()]) + fwd.logdet.data[i];
    return out;
  }
  if (f.dim() > 16)
    throw std::invalid_argument("log_density_conditional: exact mode limited to dim <= 16");
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor xi = FlowModel::take_rows(x, i, i + 1);
    const Tensor yi = FlowModel::take_rows(y, i, i + 1);
    auto fwd = f.forward_eval(xi, yi);
    Eigen::MatrixXd jac(f.dx(), f.dx());
    Tensor xp = xi;
    for (std::size_t j = 0; j < f.dx(); ++j) {
      const double xj = xp.data[j];
      xp.data[j] = xj + fd_step;
      auto up = f.forward_eval(xp, yi);
      xp.data[j] = xj - fd_step;
      auto dn = f.forward_eval(xp, yi);
      xp.data[j] = xj;
      for (std::size_t k = 0; k < f.dx(); ++k)
        jac(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) =
            (up.z.data[k] - dn.z.data[k]) / (2 * fd_step);
    }
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
    double ld = 0;
    for (Eigen::Index k = 0; k < jac.rows(); ++k)
      ld += std::log(std::fabs(lu.matrixLU()(k, k)));
    out.data[i] = prior.log_density(&fwd.z.data[0]) + ld;
  }
  return out;
}

struct JacobianBlocks {
  Eigen::MatrixXd dz_dx, dz_dy, dyp_dx, dyp_dy;
};

// Central-difference Jacobian of the full map at one point, split into the
// four blocks of the (z, y') x (x, y) partition.
inline JacobianBlocks jacobian_blocks(const FlowModel& f, const Tensor& x, const Tensor& y,
                                      double step = 1e-5) {
  if (f.dim() > 16) throw std::invalid_argument("jacobian_blocks: total dim must be <= 16");
  const std::size_t dx = f.dx(), dy = f.dy();
  JacobianBlocks jb{Eigen::MatrixXd(dx, dx), Eigen::MatrixXd(dx, dy),
                    Eigen::MatrixXd(dy, dx), Eigen::MatrixXd(dy, dy)};
  Tensor xp = x, yp = y;
  auto col = [&](std::size_t j, bool wrt_y) {
    Tensor& src = wrt_y ? yp : xp;
    const double v0 = src.data[j];
    src.data[j] = v0 + step;
    auto up = f.forward_eval(xp, yp);
    src.data[j] = v0 - step;
    auto dn = f.forward_eval(xp, yp);
    src.data[j] = v0;
    check_finite(up.z, "jacobian_blocks");
    check_finite(dn.z, "jacobian_blocks");
    for (std::size_t i = 0; i < dx; ++i) {
      const double d = (up.z.data[i] - dn.z.data[i]) / (2 * step);
      (wrt_y ? jb.dz_dy : jb.dz_dx)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d;
    }
    for (std::size_t i = 0; i < dy; ++i) {
      const double d = (up.yprime.data[i] - dn.yprime.data[i]) / (2 * step);
      (wrt_y ? jb.dyp_dy : jb.dyp_dx)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          d;
    }
  };
  for (std::size_t j = 0; j < dx; ++j) col(j, false);
  for (std::size_t j = 0; j < dy; ++j) col(j, true);
  return jb;
}

} // namespace condflow

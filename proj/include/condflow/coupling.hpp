// SPDX-License-Identifier: Apache-2.0
//
// Affine coupling layer. The pass-through half u1 parameterizes an
// elementwise affine map of u2:
//
//   v1 = u1
//   v2 = exp(s(u1)) * u2 + b(u1),   logdet = sum(s(u1))
//
// s is bounded by a tanh head times a learned scale, b is linear. The inverse
// is algebraic, so round-trips are exact to floating-point error.
#pragma once

#include <span>
#include <vector>

#include "condflow/mask.hpp"
#include "condflow/net.hpp"

namespace condflow {

struct CouplingOut {
  Value state;
  Value logdet;  // [B x 1], per-sample contribution
};

struct CouplingLayer {
  Mask mask;
  DenseNet scale_net;
  DenseNet shift_net;

  static CouplingLayer make(Mask m, const NetSpec& spec, Rng& rng) {
    CouplingLayer layer;
    const std::size_t n1 = m.idx1.size(), n2 = m.idx2.size();
    layer.scale_net = DenseNet::make(n1, n2, spec, DenseNet::Head::tanh_scaled, rng);
    layer.shift_net = DenseNet::make(n1, n2, spec, DenseNet::Head::linear, rng);
    layer.mask = std::move(m);
    return layer;
  }

  std::size_t param_count() const {
    return scale_net.param_count() + shift_net.param_count();
  }
  void collect_params(std::vector<Tensor*>& out) {
    scale_net.collect_params(out);
    shift_net.collect_params(out);
  }
  void collect_params(std::vector<const Tensor*>& out) const {
    scale_net.collect_params(out);
    shift_net.collect_params(out);
  }

  CouplingOut forward(Tape& t, Value u, std::span<const Value> params) const {
    auto [ps, pb] = split_params(params);
    Value u1 = gather_cols(u, mask.idx1);
    Value u2 = gather_cols(u, mask.idx2);
    Value s = scale_net.forward(t, u1, ps);
    Value b = shift_net.forward(t, u1, pb);
    Value v2 = add(mul(u2, exp(s)), b);
    Value v = gather_cols(concat_cols(u1, v2), mask.restore);
    return {v, row_sum(s)};
  }

  CouplingOut inverse(Tape& t, Value v, std::span<const Value> params) const {
    auto [ps, pb] = split_params(params);
    Value v1 = gather_cols(v, mask.idx1);
    Value v2 = gather_cols(v, mask.idx2);
    Value s = scale_net.forward(t, v1, ps);
    Value b = shift_net.forward(t, v1, pb);
    Value u2 = mul(sub(v2, b), exp(neg(s)));
    Value u = gather_cols(concat_cols(v1, u2), mask.restore);
    return {u, neg(row_sum(s))};
  }

 private:
  std::pair<std::span<const Value>, std::span<const Value>> split_params(
      std::span<const Value> params) const {
    const std::size_t ns = scale_net.param_count();
    return {params.subspan(0, ns), params.subspan(ns)};
  }
};

} // namespace condflow

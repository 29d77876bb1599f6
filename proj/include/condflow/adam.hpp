// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "condflow/tensor.hpp"

namespace condflow {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter first/second moments plus the shared step counter.
struct AdamState {
  AdamConfig cfg;
  long step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  void init(const std::vector<Tensor*>& params) {
    m.clear();
    v.clear();
    for (const Tensor* p : params) {
      m.push_back(Tensor::zeros(p->shape));
      v.push_back(Tensor::zeros(p->shape));
    }
    step = 0;
  }
};

inline void adam_step(const std::vector<Tensor*>& params,
                      const std::vector<const Tensor*>& grads, AdamState& st) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw std::invalid_argument("adam_step: state/parameter count mismatch");
  st.step += 1;
  const double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = *grads[k];
    if (!p.same_shape(g))
      throw std::invalid_argument("adam_step: gradient shape mismatch");
    check_finite(g, "adam_step");
    Tensor& mk = st.m[k];
    Tensor& vk = st.v[k];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      mk.data[i] = b1 * mk.data[i] + (1.0 - b1) * g.data[i];
      vk.data[i] = b2 * vk.data[i] + (1.0 - b2) * g.data[i] * g.data[i];
      const double mhat = mk.data[i] / bc1;
      const double vhat = vk.data[i] / bc2;
      p.data[i] -= st.cfg.lr * mhat / (std::sqrt(vhat) + st.cfg.eps);
    }
  }
}

} // namespace condflow

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "condflow/autodiff.hpp"
#include "condflow/init.hpp"
#include "condflow/rng.hpp"

namespace condflow {

struct NetSpec {
  std::size_t depth = 12;  // hidden layers
  std::size_t width = 64;
  double gain = 0.1;       // orthogonal init gain
};

// Plain dense network with leaky-ReLU hidden activations. The output head is
// either linear (shift nets) or tanh times a learned scalar (log-scale nets),
// which bounds the effective log-scale.
struct DenseNet {
  enum class Head { linear, tanh_scaled };

  std::vector<Tensor> weights;  // depth+1 matrices
  std::vector<Tensor> biases;   // depth+1 row vectors
  Tensor out_gain;              // [1], tanh_scaled head only
  Head head = Head::linear;
  double lrelu_slope = 0.01;

  static DenseNet make(std::size_t in, std::size_t out, const NetSpec& spec, Head head,
                       Rng& rng) {
    DenseNet net;
    net.head = head;
    std::size_t prev = in;
    for (std::size_t l = 0; l < spec.depth; ++l) {
      net.weights.push_back(Tensor({prev, spec.width}));
      net.biases.push_back(Tensor({1, spec.width}));
      orthogonal_init(net.weights.back(), spec.gain, rng);
      prev = spec.width;
    }
    net.weights.push_back(Tensor({prev, out}));
    net.biases.push_back(Tensor({1, out}));
    orthogonal_init(net.weights.back(), spec.gain, rng);
    if (head == Head::tanh_scaled) net.out_gain = Tensor::scalar(1.0);
    return net;
  }

  std::size_t param_count() const {
    return weights.size() + biases.size() + (head == Head::tanh_scaled ? 1 : 0);
  }

  void collect_params(std::vector<Tensor*>& out) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back(&weights[l]);
      out.push_back(&biases[l]);
    }
    if (head == Head::tanh_scaled) out.push_back(&out_gain);
  }

  void collect_params(std::vector<const Tensor*>& out) const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back(&weights[l]);
      out.push_back(&biases[l]);
    }
    if (head == Head::tanh_scaled) out.push_back(&out_gain);
  }

  // params must hold param_count() leaves in collect_params order.
  Value forward(Tape& t, Value x, std::span<const Value> params) const {
    if (params.size() != param_count())
      throw std::invalid_argument("DenseNet::forward: wrong parameter count");
    Value h = x;
    const std::size_t n_layers = weights.size();
    for (std::size_t l = 0; l < n_layers; ++l) {
      h = add(matmul(h, params[2 * l]), params[2 * l + 1]);
      if (l + 1 < n_layers) h = leaky_relu(h, lrelu_slope);
    }
    if (head == Head::tanh_scaled) h = mul(tanh(h), params[2 * n_layers]);
    return h;
  }
};

} // namespace condflow

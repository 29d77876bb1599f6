// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape owns the recorded graph for one evaluation. Nodes are appended in
// topological order, so the backward sweep is a single reverse walk. The
// same op set drives both training (recording tape) and inference (non
// recording tape), which keeps the two paths numerically identical.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "condflow/tensor.hpp"

namespace condflow {

class Tape;

struct Value {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& tensor() const;
  const Shape& shape() const;
};

namespace detail {
using EigenRowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EigenRowMat>;
using MapConstMat = Eigen::Map<const EigenRowMat>;

inline MapConstMat as_mat(const Tensor& t) {
  return MapConstMat(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}
inline MapMat as_mat(Tensor& t) {
  return MapMat(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}
} // namespace detail

class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Value leaf(Tensor t) {
    check_finite(t, "leaf");
    return push(std::move(t));
  }

  Value push(Tensor t) {
    nodes_.push_back(Node{std::move(t), Tensor{}, false, {}});
    return Value{this, static_cast<int>(nodes_.size() - 1)};
  }

  void set_backward(Value v, std::vector<int> parents,
                    std::function<void(Tape&, int)> fn) {
    if (!recording_) return;
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    n.parents = std::move(parents);
    n.back = std::move(fn);
  }

  const Tensor& value(Value v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

  // Gradient buffer for accumulation; allocated as zeros on first touch.
  Tensor& grad_ref(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_set) {
      n.grad = alloc(n.value.shape);
      std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
      n.grad_set = true;
    }
    return n.grad;
  }

  bool grad_seen(int id) const { return nodes_[static_cast<std::size_t>(id)].grad_set; }

  // d(loss)/d(v); zero tensor if v does not contribute to the loss.
  const Tensor& grad(Value v) { return grad_ref(v.id); }

  void backward(Value loss) {
    if (!recording_) throw std::logic_error("backward: tape is not recording");
    const Tensor& lv = value(loss);
    if (lv.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad_ref(loss.id).data[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.grad_set || !n.back) continue;
      check_finite(n.grad, "backward");
      n.back(*this, id);
    }
  }

  // Allocation through the tape reuses buffers freed by reset(); training
  // builds one graph per step and this keeps the allocator quiet.
  Tensor alloc(Shape s) {
    const std::size_t n = shape_numel(s);
    Tensor t;
    t.shape = std::move(s);
    if (!pool_.empty()) {
      t.data = std::move(pool_.back());
      pool_.pop_back();
      t.data.resize(n);
    } else {
      t.data.resize(n);
    }
    return t;
  }

  void reset() {
    for (Node& n : nodes_) {
      if (n.value.data.capacity() > 0) pool_.push_back(std::move(n.value.data));
      if (n.grad.data.capacity() > 0) pool_.push_back(std::move(n.grad.data));
    }
    nodes_.clear();
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool grad_set = false;
    std::vector<int> parents;
    std::function<void(Tape&, int)> back;
  };

  bool recording_;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> pool_;
};

inline const Tensor& Value::tensor() const { return tape->value(*this); }
inline const Shape& Value::shape() const { return tape->value(*this).shape; }

namespace detail {

enum class Broadcast { same, row, scalar };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return Broadcast::same;
  if (b.numel() == 1) return Broadcast::scalar;
  if (b.rows() == 1 && b.cols() == a.cols() && a.rows() >= 1) return Broadcast::row;
  if (b.ndim() == 1 && b.numel() == a.cols()) return Broadcast::row;
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_str(a.shape) + " vs " + shape_str(b.shape));
}

template <typename Fwd, typename Bwd>
Value unary_op(Value a, const char* name, Fwd fwd, Bwd bwd) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  Tensor out = t.alloc(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = fwd(x.data[i]);
  check_finite(out, name);
  Value v = t.push(std::move(out));
  t.set_backward(v, {a.id}, [a, bwd](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& x = tp.value(a);
    const Tensor& y = tp.value(Value{&tp, self});
    Tensor& ga = tp.grad_ref(a.id);
    for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * bwd(x.data[i], y.data[i]);
  });
  return v;
}

} // namespace detail

// --- primitive operations -------------------------------------------------

inline Value add(Value a, Value b) {
  Tape& t = *a.tape;
  const Tensor& xa = t.value(a);
  const Tensor& xb = t.value(b);
  const auto kind = detail::broadcast_kind(xa, xb, "add");
  Tensor out = t.alloc(xa.shape);
  switch (kind) {
    case detail::Broadcast::same:
      for (std::size_t i = 0; i < xa.numel(); ++i) out.data[i] = xa.data[i] + xb.data[i];
      break;
    case detail::Broadcast::scalar:
      for (std::size_t i = 0; i < xa.numel(); ++i) out.data[i] = xa.data[i] + xb.data[0];
      break;
    case detail::Broadcast::row: {
      const std::size_t r = xa.rows(), c = xa.cols();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = xa.data[i * c + j] + xb.data[j];
      break;
    }
  }
  check_finite(out, "add");
  Value v = t.push(std::move(out));
  t.set_backward(v, {a.id, b.id}, [a, b, kind](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(a.id);
    for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    Tensor& gb = tp.grad_ref(b.id);
    switch (kind) {
      case detail::Broadcast::same:
        for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
        break;
      case detail::Broadcast::scalar: {
        double s = 0;
        for (double v2 : g.data) s += v2;
        gb.data[0] += s;
        break;
      }
      case detail::Broadcast::row: {
        const std::size_t r = g.rows(), c = g.cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gb.data[j] += g.data[i * c + j];
        break;
      }
    }
  });
  return v;
}

inline Value mul(Value a, Value b) {
  Tape& t = *a.tape;
  const Tensor& xa = t.value(a);
  const Tensor& xb = t.value(b);
  const auto kind = detail::broadcast_kind(xa, xb, "mul");
  if (kind == detail::Broadcast::row)
    throw std::invalid_argument("mul: row broadcast not supported");
  Tensor out = t.alloc(xa.shape);
  if (kind == detail::Broadcast::same)
    for (std::size_t i = 0; i < xa.numel(); ++i) out.data[i] = xa.data[i] * xb.data[i];
  else
    for (std::size_t i = 0; i < xa.numel(); ++i) out.data[i] = xa.data[i] * xb.data[0];
  check_finite(out, "mul");
  Value v = t.push(std::move(out));
  t.set_backward(v, {a.id, b.id}, [a, b, kind](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& xa2 = tp.value(a);
    const Tensor& xb2 = tp.value(b);
    Tensor& ga = tp.grad_ref(a.id);
    Tensor& gb = tp.grad_ref(b.id);
    if (kind == detail::Broadcast::same) {
      for (std::size_t i = 0; i < g.numel(); ++i) {
        ga.data[i] += g.data[i] * xb2.data[i];
        gb.data[i] += g.data[i] * xa2.data[i];
      }
    } else {
      double s = 0;
      for (std::size_t i = 0; i < g.numel(); ++i) {
        ga.data[i] += g.data[i] * xb2.data[0];
        s += g.data[i] * xa2.data[i];
      }
      gb.data[0] += s;
    }
  });
  return v;
}

inline Value neg(Value a) {
  return detail::unary_op(a, "neg", [](double x) { return -x; },
                          [](double, double) { return -1.0; });
}

inline Value sub(Value a, Value b) { return add(a, neg(b)); }

// Multiply by a compile-time constant (not a graph node).
inline Value scale(Value a, double c) {
  return detail::unary_op(a, "scale", [c](double x) { return c * x; },
                          [c](double, double) { return c; });
}

inline Value add_const(Value a, double c) {
  return detail::unary_op(a, "add_const", [c](double x) { return x + c; },
                          [](double, double) { return 1.0; });
}

inline Value exp(Value a) {
  return detail::unary_op(a, "exp", [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

inline Value log(Value a) {
  const Tensor& x = a.tape->value(a);
  for (double v : x.data)
    if (v <= 0.0) throw std::domain_error("log: non-positive input");
  return detail::unary_op(a, "log", [](double x2) { return std::log(x2); },
                          [](double x2, double) { return 1.0 / x2; });
}

inline Value tanh(Value a) {
  return detail::unary_op(a, "tanh", [](double x) { return std::tanh(x); },
                          [](double, double y) { return 1.0 - y * y; });
}

inline Value leaky_relu(Value a, double slope = 0.01) {
  return detail::unary_op(a, "leaky_relu",
                          [slope](double x) { return x > 0 ? x : slope * x; },
                          [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

inline Value abs(Value a) {
  return detail::unary_op(a, "abs", [](double x) { return std::fabs(x); },
                          [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Value matmul(Value a, Value b) {
  Tape& t = *a.tape;
  const Tensor& xa = t.value(a);
  const Tensor& xb = t.value(b);
  if (xa.ndim() != 2 || xb.ndim() != 2 || xa.cols() != xb.rows())
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(xa.shape) +
                                " vs " + shape_str(xb.shape));
  Tensor out = t.alloc({xa.rows(), xb.cols()});
  detail::as_mat(out).noalias() = detail::as_mat(xa) * detail::as_mat(xb);
  check_finite(out, "matmul");
  Value v = t.push(std::move(out));
  t.set_backward(v, {a.id, b.id}, [a, b](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& xa2 = tp.value(a);
    const Tensor& xb2 = tp.value(b);
    detail::as_mat(tp.grad_ref(a.id)).noalias() +=
        detail::as_mat(g) * detail::as_mat(xb2).transpose();
    detail::as_mat(tp.grad_ref(b.id)).noalias() +=
        detail::as_mat(xa2).transpose() * detail::as_mat(g);
  });
  return v;
}

inline Value sum(Value a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  double s = 0;
  for (double v : x.data) s += v;
  Tensor out = t.alloc({1});
  out.data[0] = s;
  check_finite(out, "sum");
  Value v = t.push(std::move(out));
  t.set_backward(v, {a.id}, [a](Tape& tp, int self) {
    const double g = tp.grad_ref(self).data[0];
    Tensor& ga = tp.grad_ref(a.id);
    for (double& v2 : ga.data) v2 += g;
  });
  return v;
}

inline Value mean(Value a) {
  const std::size_t n = a.tensor().numel();
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

// Per-row sum of a [B x D] tensor -> [B x 1].
inline Value row_sum(Value a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = t.alloc({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += x.data[i * c + j];
    out.data[i] = s;
  }
  check_finite(out, "row_sum");
  Value v = t.push(std::move(out));
  t.set_backward(v, {a.id}, [a](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(a.id);
    const std::size_t r2 = ga.rows(), c2 = ga.cols();
    for (std::size_t i = 0; i < r2; ++i)
      for (std::size_t j = 0; j < c2; ++j) ga.data[i * c2 + j] += g.data[i];
  });
  return v;
}

inline Value concat_cols(Value a, Value b) {
  Tape& t = *a.tape;
  const Tensor& xa = t.value(a);
  const Tensor& xb = t.value(b);
  if (xa.rows() != xb.rows())
    throw std::invalid_argument("concat_cols: row mismatch");
  const std::size_t r = xa.rows(), ca = xa.cols(), cb = xb.cols();
  Tensor out = t.alloc({r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(&xa.data[i * ca], ca, &out.data[i * (ca + cb)]);
    std::copy_n(&xb.data[i * cb], cb, &out.data[i * (ca + cb) + ca]);
  }
  Value v = t.push(std::move(out));
  t.set_backward(v, {a.id, b.id}, [a, b, ca, cb](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(a.id);
    Tensor& gb = tp.grad_ref(b.id);
    const std::size_t r2 = g.rows();
    for (std::size_t i = 0; i < r2; ++i) {
      for (std::size_t j = 0; j < ca; ++j) ga.data[i * ca + j] += g.data[i * (ca + cb) + j];
      for (std::size_t j = 0; j < cb; ++j) gb.data[i * cb + j] += g.data[i * (ca + cb) + ca + j];
    }
  });
  return v;
}

inline Value slice_cols(Value a, std::size_t c0, std::size_t c1) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (c1 > x.cols() || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range");
  const std::size_t r = x.rows(), c = x.cols(), w = c1 - c0;
  Tensor out = t.alloc({r, w});
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(&x.data[i * c + c0], w, &out.data[i * w]);
  Value v = t.push(std::move(out));
  t.set_backward(v, {a.id}, [a, c0, w](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(a.id);
    const std::size_t r2 = g.rows(), c2 = ga.cols();
    for (std::size_t i = 0; i < r2; ++i)
      for (std::size_t j = 0; j < w; ++j) ga.data[i * c2 + c0 + j] += g.data[i * w + j];
  });
  return v;
}

// Column gather: out[:, j] = in[:, idx[j]]. Covers the rectangular mask
// matrices of compressed masking and all squeeze/factor permutations.
inline Value gather_cols(Value a, std::shared_ptr<const std::vector<std::size_t>> idx) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  const std::size_t r = x.rows(), c = x.cols(), w = idx->size();
  for (std::size_t j : *idx)
    if (j >= c) throw std::invalid_argument("gather_cols: index out of range");
  Tensor out = t.alloc({r, w});
  for (std::size_t i = 0; i < r; ++i) {
    const double* src = &x.data[i * c];
    double* dst = &out.data[i * w];
    for (std::size_t j = 0; j < w; ++j) dst[j] = src[(*idx)[j]];
  }
  Value v = t.push(std::move(out));
  t.set_backward(v, {a.id}, [a, idx](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(a.id);
    const std::size_t r2 = g.rows(), w2 = idx->size(), c2 = ga.cols();
    for (std::size_t i = 0; i < r2; ++i)
      for (std::size_t j = 0; j < w2; ++j) ga.data[i * c2 + (*idx)[j]] += g.data[i * w2 + j];
  });
  return v;
}

inline Value gather_cols(Value a, std::vector<std::size_t> idx) {
  return gather_cols(a, std::make_shared<const std::vector<std::size_t>>(std::move(idx)));
}

inline Value reshape(Value a, Shape s) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  Tensor out = t.alloc(std::move(s));
  if (out.numel() != x.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  out.data = x.data;
  Value v = t.push(std::move(out));
  t.set_backward(v, {a.id}, [a](Tape& tp, int self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(a.id);
    for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
  });
  return v;
}

// Max over coordinates of |g_autodiff - g_central| / (|g_central| + 1e-12).
// Builder is any (Tape&, Value) -> Value producing a scalar loss from x.
template <typename Builder>
double finite_diff_check(Builder&& f, const Tensor& x, double step) {
  Tape t;
  Value vx = t.leaf(x);
  Value loss = f(t, vx);
  t.backward(loss);
  Tensor g_ad = t.grad(vx);

  auto eval = [&](const Tensor& p) {
    Tape nt(false);
    Value v = nt.leaf(p);
    Value l = f(nt, v);
    return nt.value(l).data[0];
  };

  double worst = 0.0;
  Tensor p = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    p.data[i] = x.data[i] + step;
    const double up = eval(p);
    p.data[i] = x.data[i] - step;
    const double dn = eval(p);
    p.data[i] = x.data[i];
    const double g_fd = (up - dn) / (2.0 * step);
    if (!std::isfinite(g_fd)) throw std::runtime_error("finite_diff_check: non-finite evaluation");
    const double err = std::fabs(g_ad.data[i] - g_fd) / (std::fabs(g_fd) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

} // namespace condflow

// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "condflow/adam.hpp"
#include "condflow/autodiff.hpp"
#include "condflow/init.hpp"
#include "condflow/rng.hpp"
#include "support/oracles.hpp"

using namespace condflow;

TEST_CASE("exp at zero has value and gradient one", "[autodiff]") {
  Tape t;
  Value x = t.leaf(Tensor::scalar(0.0));
  Value y = exp(x);
  REQUIRE(y.tensor().data[0] == 1.0);
  t.backward(y);
  REQUIRE(t.grad(x).data[0] == 1.0);
}

TEST_CASE("matmul with identity leaves input unchanged", "[autodiff]") {
  Tape t;
  Value a = t.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
  Value eye = t.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
  Value out = matmul(a, eye);
  REQUIRE(out.tensor().data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("gradient of sum(tanh(Wx)) matches finite differences", "[autodiff]") {
  Rng rng(11);
  Tensor w0 = rng.normal_tensor({3, 3});
  Tensor x = rng.normal_tensor({3, 1});

  auto build = [&](Tape& t, Value w) {
    Value vx = t.leaf(x);
    return sum(tanh(matmul(w, vx)));
  };
  REQUIRE(finite_diff_check(build, w0, 1e-5) < 1e-5);
}

TEST_CASE("backward on x squared", "[autodiff]") {
  Tape t;
  Value x = t.leaf(Tensor::scalar(3.0));
  Value loss = mul(x, x);
  t.backward(loss);
  REQUIRE(t.grad(x).data[0] == Catch::Approx(6.0));
}

TEST_CASE("bilinear form gradients", "[autodiff]") {
  Tape t;
  Tensor ta({1, 3}, {1.0, -2.0, 0.5});
  Tensor tb({1, 3}, {4.0, 0.25, -1.0});
  Value a = t.leaf(ta);
  Value b = t.leaf(tb);
  t.backward(sum(mul(a, b)));
  REQUIRE(t.grad(a).data == tb.data);
  REQUIRE(t.grad(b).data == ta.data);
}

TEST_CASE("non-scalar loss is rejected", "[autodiff]") {
  Tape t;
  Value a = t.leaf(Tensor({1, 2}, {1.0, 2.0}));
  REQUIRE_THROWS_AS(t.backward(a), std::invalid_argument);
}

TEST_CASE("log rejects non-positive input", "[autodiff]") {
  Tape t;
  Value a = t.leaf(Tensor({1, 2}, {1.0, -1.0}));
  REQUIRE_THROWS_AS(log(a), std::domain_error);
}

TEST_CASE("shape mismatch is rejected", "[autodiff]") {
  Tape t;
  Value a = t.leaf(Tensor({2, 3}));
  Value b = t.leaf(Tensor({3, 3}));
  REQUIRE_THROWS_AS(add(a, b), std::invalid_argument);
  Value c = t.leaf(Tensor({2, 2}));
  REQUIRE_THROWS_AS(matmul(a, c), std::invalid_argument);
}

TEST_CASE("nodes off the loss path get zero gradient", "[autodiff]") {
  Tape t;
  Value a = t.leaf(Tensor::scalar(2.0));
  Value unused = t.leaf(Tensor::scalar(5.0));
  Value dead = exp(unused);
  (void)dead;
  t.backward(mul(a, a));
  REQUIRE(t.grad(unused).data[0] == 0.0);
  REQUIRE(t.grad(dead).data[0] == 0.0);
}

TEST_CASE("diamond graph sums path contributions", "[autodiff]") {
  // loss = (x + x^2) + x * x^2: gradient 1 + 2x + 3x^2.
  Tape t;
  const double xv = 1.7;
  Value x = t.leaf(Tensor::scalar(xv));
  Value sq = mul(x, x);
  Value loss = add(add(x, sq), mul(x, sq));
  t.backward(loss);
  REQUIRE(t.grad(x).data[0] == Catch::Approx(1.0 + 2 * xv + 3 * xv * xv).epsilon(1e-12));
}

TEST_CASE("every primitive matches central finite differences", "[autodiff][property]") {
  Rng rng(20252);
  auto rand_away_from_kinks = [&](Shape s) {
    Tensor t(std::move(s));
    for (double& v : t.data) {
      v = rng.normal();
      if (std::fabs(v) < 0.15) v = v < 0 ? v - 0.2 : v + 0.2;
    }
    return t;
  };

  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = rand_away_from_kinks({3, 4});
    const Tensor aux = rng.normal_tensor({4, 3});
    const Tensor bias = rng.normal_tensor({1, 4});
    const int which = trial % 10;
    auto build = [&](Tape& t, Value v) -> Value {
      switch (which) {
        case 0: return sum(exp(scale(v, 0.3)));
        case 1: return sum(tanh(v));
        case 2: return sum(leaky_relu(v, 0.01));
        case 3: return sum(abs(v));
        case 4: return sum(mul(v, v));
        case 5: return sum(matmul(v, t.leaf(aux)));
        case 6: return mean(add(v, t.leaf(bias)));
        case 7: return sum(log(exp(v)));
        case 8: return sum(row_sum(mul(v, v)));
        default:
          return sum(mul(slice_cols(v, 1, 3),
                         gather_cols(concat_cols(v, neg(v)), std::vector<std::size_t>{0, 7})));
      }
    };
    INFO("op case " << which << " trial " << trial);
    REQUIRE(finite_diff_check(build, x, 1e-5) < 1e-4);
  }
}

TEST_CASE("graph evaluation is deterministic", "[autodiff]") {
  auto run = [] {
    Rng rng(99);
    Tape t;
    Value w = t.leaf(rng.normal_tensor({4, 4}));
    Value x = t.leaf(rng.normal_tensor({4, 4}));
    Value loss = sum(tanh(matmul(w, x)));
    t.backward(loss);
    auto g = t.grad(w).data;
    g.push_back(loss.tensor().data[0]);
    return g;
  };
  REQUIRE(run() == run());
}

TEST_CASE("finite_diff_check on a constant is zero", "[autodiff]") {
  auto build = [](Tape& t, Value v) { return scale(sum(mul(v, t.leaf(Tensor::zeros(v.shape())))), 1.0); };
  REQUIRE(finite_diff_check(build, Tensor({1, 2}, {0.3, -0.4}), 1e-5) == 0.0);
}

TEST_CASE("finite_diff_check on squared norm", "[autodiff]") {
  auto build = [](Tape& t, Value v) { return sum(mul(v, v)); };
  Tensor x({1, 2}, {1.0, 2.0});
  Tape t;
  Value vx = t.leaf(x);
  t.backward(build(t, vx));
  REQUIRE(t.grad(vx).data[0] == Catch::Approx(2.0));
  REQUIRE(t.grad(vx).data[1] == Catch::Approx(4.0));
  REQUIRE(finite_diff_check(build, x, 1e-5) < 1e-8);
}

TEST_CASE("adam with zero gradient leaves parameters unchanged", "[adam]") {
  Tensor p({2, 2}, {1, 2, 3, 4});
  Tensor g = Tensor::zeros({2, 2});
  AdamState st;
  st.init({&p});
  for (int i = 0; i < 5; ++i) adam_step({&p}, {&g}, st);
  REQUIRE(p.data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("adam approaches signed step of size lr under constant gradient", "[adam]") {
  Tensor p = Tensor::scalar(0.0);
  Tensor g = Tensor::scalar(2.5);
  AdamState st;
  st.cfg.lr = 1e-3;
  st.init({&p});
  double prev = p.data[0];
  double delta = 0;
  for (int i = 0; i < 2000; ++i) {
    adam_step({&p}, {&g}, st);
    delta = prev - p.data[0];
    prev = p.data[0];
  }
  REQUIRE(delta == Catch::Approx(1e-3).epsilon(1e-3));
}

TEST_CASE("adam single step matches hand evaluation", "[adam]") {
  // From zero state: mhat = g, vhat = g^2, step = lr * g / (|g| + eps).
  const double g = -0.37, lr = 1e-2, eps = 1e-8;
  Tensor p = Tensor::scalar(1.0);
  Tensor gt = Tensor::scalar(g);
  AdamState st;
  st.cfg.lr = lr;
  st.cfg.eps = eps;
  st.init({&p});
  adam_step({&p}, {&gt}, st);
  const double expect = 1.0 - lr * g / (std::fabs(g) + eps);
  REQUIRE(p.data[0] == Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("adam rejects non-finite gradients", "[adam]") {
  Tensor p = Tensor::scalar(1.0);
  Tensor g = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
  AdamState st;
  st.init({&p});
  REQUIRE_THROWS_AS(adam_step({&p}, {&g}, st), std::runtime_error);
}

TEST_CASE("orthogonal init is semi-orthogonal with requested gain", "[init]") {
  Rng rng(5);
  Tensor w({64, 16});
  orthogonal_init(w, 0.1, rng);
  // Columns should be orthogonal with norm = gain.
  for (std::size_t a = 0; a < 16; ++a)
    for (std::size_t b = a; b < 16; ++b) {
      double dot = 0;
      for (std::size_t i = 0; i < 64; ++i) dot += w.at(i, a) * w.at(i, b);
      if (a == b)
        REQUIRE(dot == Catch::Approx(0.01).epsilon(1e-9));
      else
        REQUIRE(std::fabs(dot) < 1e-12);
    }

  Tensor wide({3, 32});
  orthogonal_init(wide, 1.0, rng);
  for (std::size_t a = 0; a < 3; ++a) {
    double n = 0;
    for (std::size_t j = 0; j < 32; ++j) n += wide.at(a, j) * wide.at(a, j);
    REQUIRE(n == Catch::Approx(1.0).epsilon(1e-9));
  }
}

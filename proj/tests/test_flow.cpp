// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "condflow/checkpoint.hpp"
#include "condflow/flow.hpp"
#include "support/oracles.hpp"

using namespace condflow;

namespace {

const NetSpec kTinyNet{2, 8, 0.5};  // small nets keep oracle checks fast

void zero_params(FlowModel& m) {
  for (Tensor* p : m.params()) std::fill(p->data.begin(), p->data.end(), 0.0);
}

// Flattened full map (z | y') as a plain vector function of (x | y).
std::vector<double> eval_map(const FlowModel& m, const std::vector<double>& in) {
  Tensor x({1, m.dx()});
  std::copy_n(in.data(), m.dx(), x.data.data());
  Tensor y({1, m.dy()});
  if (m.dy() > 0) std::copy_n(in.data() + m.dx(), m.dy(), y.data.data());
  auto out = m.forward_eval(x, y);
  std::vector<double> o(out.z.data);
  if (m.dy() > 0) o.insert(o.end(), out.yprime.data.begin(), out.yprime.data.end());
  return o;
}

double flow_logdet(const FlowModel& m, const std::vector<double>& in) {
  Tensor x({1, m.dx()});
  std::copy_n(in.data(), m.dx(), x.data.data());
  Tensor y({1, m.dy()});
  if (m.dy() > 0) std::copy_n(in.data() + m.dx(), m.dy(), y.data.data());
  return m.forward_eval(x, y).logdet.data[0];
}

} // namespace

TEST_CASE("identity coupling passes input through with zero logdet", "[coupling]") {
  Rng rng(3);
  CouplingLayer layer = CouplingLayer::make(Mask::vector_mask({true, false}), kTinyNet, rng);
  std::vector<Tensor*> ps;
  layer.collect_params(ps);
  for (Tensor* p : ps) std::fill(p->data.begin(), p->data.end(), 0.0);

  Tape t(false);
  std::vector<Value> params;
  for (Tensor* p : ps) params.push_back(t.leaf(*p));
  Value u = t.leaf(Tensor({3, 2}, {1, 2, 3, 4, 5, 6}));
  auto out = layer.forward(t, u, params);
  REQUIRE(out.state.tensor().data == std::vector<double>{1, 2, 3, 4, 5, 6});
  for (double v : out.logdet.tensor().data) REQUIRE(v == 0.0);

  auto inv = layer.inverse(t, out.state, params);
  REQUIRE(inv.state.tensor().data == std::vector<double>{1, 2, 3, 4, 5, 6});
  for (double v : inv.logdet.tensor().data) REQUIRE(v == 0.0);
}

TEST_CASE("constant log-scale coupling scales the free element", "[coupling]") {
  Rng rng(4);
  CouplingLayer layer = CouplingLayer::make(Mask::vector_mask({true, false}), kTinyNet, rng);
  std::vector<Tensor*> ps;
  layer.collect_params(ps);
  for (Tensor* p : ps) std::fill(p->data.begin(), p->data.end(), 0.0);
  // s = gain * tanh(raw bias); pick raw so s = ln 2 exactly up to rounding.
  layer.scale_net.out_gain.data[0] = 1.0;
  layer.scale_net.biases.back().data[0] = std::atanh(std::log(2.0));

  Tape t(false);
  std::vector<Value> params;
  for (Tensor* p : ps) params.push_back(t.leaf(*p));
  Value u = t.leaf(Tensor({1, 2}, {0.7, -1.5}));
  auto out = layer.forward(t, u, params);
  REQUIRE(out.state.tensor().data[0] == Catch::Approx(0.7));
  REQUIRE(out.state.tensor().data[1] == Catch::Approx(-3.0).epsilon(1e-12));
  REQUIRE(out.logdet.tensor().data[0] == Catch::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("coupling logdet matches the numerical Jacobian", "[coupling][oracle]") {
  Rng rng(5);
  FlowBuilder b = FlowBuilder::vector_model(2, 1);
  Rng r2(8);
  b.add_coupling(Mask::vector_mask({true, false, true}), kTinyNet, r2);
  FlowModel one = b.build();
  for (Tensor* p : one.params())
    for (double& v : p->data) v = 0.4 * rng.normal();

  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> in = {rng.normal(), rng.normal(), rng.normal()};
    auto jac = oracles::numerical_jacobian(
        [&](const std::vector<double>& v) { return eval_map(one, v); }, in, 1e-6);
    const double ld_num = oracles::log_abs_det(jac);
    REQUIRE(flow_logdet(one, in) == Catch::Approx(ld_num).margin(1e-5));
  }
}

TEST_CASE("coupling inverse round-trips and negates logdet", "[coupling][property]") {
  Rng rng(6);
  FlowBuilder b = FlowBuilder::vector_model(2, 1);
  b.add_coupling(Mask::vector_mask({false, true, true}), kTinyNet, rng);
  FlowModel m = b.build();
  for (Tensor* p : m.params())
    for (double& v : p->data) v = 0.5 * rng.normal();

  Tensor x = rng.normal_tensor({1000, 2});
  Tensor y = rng.normal_tensor({1000, 1});
  auto fwd = m.forward_eval(x, y);
  auto back = m.inverse_eval(fwd.z, fwd.yprime);
  double worst = 0;
  for (std::size_t i = 0; i < x.numel(); ++i)
    worst = std::max(worst, std::fabs(back.x.data[i] - x.data[i]));
  REQUIRE(worst < 1e-6);
  // Same u1 branch: the inverse logdet is the exact algebraic negation.
  for (std::size_t i = 0; i < 1000; ++i)
    REQUIRE(back.logdet.data[i] == -fwd.logdet.data[i]);
}

TEST_CASE("3D coupling block contains the six nontrivial masks", "[flow]") {
  Rng a(1), b(2);
  auto ma = coupling_block_masks_3d(a);
  auto mb = coupling_block_masks_3d(b);
  REQUIRE(ma.size() == 6);
  std::set<std::string> sa, sb;
  for (const Mask& m : ma) {
    REQUIRE(m.idx1.size() >= 1);
    REQUIRE(m.idx2.size() >= 1);
    sa.insert(m.pattern_string());
  }
  for (const Mask& m : mb) sb.insert(m.pattern_string());
  REQUIRE(sa.size() == 6);
  REQUIRE(sa == sb);  // same set regardless of seed, order may differ
  REQUIRE(sa.count("000") == 0);
  REQUIRE(sa.count("111") == 0);

  FlowModel four = make_toy_flow(2, 1, 4, kTinyNet, 99);
  REQUIRE(four.couplings().size() == 24);
}

TEST_CASE("checkerboard and channelwise compression shapes", "[mask]") {
  // 2x2 single-channel image: halves are 1x1x2.
  Mask cb = Mask::checkerboard(GridShape::image(2, 2, 1), 0);
  REQUIRE(cb.idx1.size() == 2);
  REQUIRE(cb.compact1.h == 1);
  REQUIRE(cb.compact1.w == 1);
  REQUIRE(cb.compact1.c == 2);

  // 1x1 image with 4 channels, channelwise: two 2-channel halves.
  Mask cw = Mask::channelwise(GridShape::image(1, 1, 4), 0);
  REQUIRE(cw.idx1.size() == 2);
  REQUIRE(cw.compact1.c == 2);

  SECTION("compress/decompress is a bijection on element indices") {
    Rng rng(7);
    for (int trial = 0; trial < 25; ++trial) {
      const std::size_t n = 2 + rng.integer(14);
      std::vector<bool> pat(n);
      bool any = false, all = true;
      for (std::size_t i = 0; i < n; ++i) {
        pat[i] = rng.uniform() < 0.5;
        any = any || pat[i];
        all = all && pat[i];
      }
      if (!any) pat[0] = true;
      if (all) pat[n - 1] = false;
      Mask m = Mask::vector_mask(pat);
      std::vector<std::size_t> seen(n, 0);
      for (std::size_t k = 0; k < m.idx1.size(); ++k) {
        REQUIRE((*m.restore)[m.idx1[k]] == k);
        seen[m.idx1[k]]++;
      }
      for (std::size_t k = 0; k < m.idx2.size(); ++k) {
        REQUIRE((*m.restore)[m.idx2[k]] == m.idx1.size() + k);
        seen[m.idx2[k]]++;
      }
      for (std::size_t c : seen) REQUIRE(c == 1);
    }
  }
}

TEST_CASE("squeeze is a volume-preserving permutation", "[flow]") {
  SqueezeStep s = make_squeeze(GridShape::image(4, 4, 1));
  REQUIRE(s.out.h == 2);
  REQUIRE(s.out.w == 2);
  REQUIRE(s.out.c == 4);
  std::set<std::size_t> seen(s.perm->begin(), s.perm->end());
  REQUIRE(seen.size() == 16);  // every input element appears exactly once
  for (std::size_t p = 0; p < 16; ++p) REQUIRE((*s.inv)[(*s.perm)[p]] == p);

  SECTION("permutation Jacobian has unit determinant magnitude") {
    SqueezeStep tiny = make_squeeze(GridShape::image(2, 2, 1));
    Eigen::MatrixXd jac = oracles::numerical_jacobian(
        [&](const std::vector<double>& v) {
          std::vector<double> out(4);
          for (std::size_t p = 0; p < 4; ++p) out[p] = v[(*tiny.perm)[p]];
          return out;
        },
        {0.3, -1.2, 0.8, 2.5}, 1e-6);
    REQUIRE(std::exp(oracles::log_abs_det(jac)) == Catch::Approx(1.0).margin(1e-9));
  }

  SECTION("odd extents are rejected") {
    REQUIRE_THROWS_AS(make_squeeze(GridShape::image(3, 4, 1)), std::invalid_argument);
  }
}

TEST_CASE("factor-out routes equal element counts to Z and Y'", "[flow]") {
  // 4x4 image, x and y planes; squeeze then drop 2 of 8 channels = 8 elements.
  Rng rng(12);
  FlowBuilder b = FlowBuilder::image_model(4, 4, 1, 1);
  b.squeeze();
  b.factor_channels(2);
  b.add_image_block(kTinyNet, rng);
  FlowModel m = b.build();
  REQUIRE(m.factors().size() == 1);
  REQUIRE(m.factors()[0].drop->size() == 8);
  REQUIRE(m.factors()[0].drop_x == 4);
  REQUIRE(m.factors()[0].drop_y == 4);

  SECTION("identity model reassembles bit-exactly through factoring") {
    zero_params(m);
    Tensor x = rng.normal_tensor({5, 16});
    Tensor y = rng.normal_tensor({5, 16});
    auto out = m.forward_eval(x, y);
    REQUIRE(out.z.data == x.data);  // origin-traced routing: z slots mirror x
    REQUIRE(out.yprime.data == y.data);
    auto back = m.inverse_eval(out.z, out.yprime);
    REQUIRE(back.x.data == x.data);
    REQUIRE(back.y.data == y.data);
  }

  SECTION("factor 0 elements is a pass-through") {
    FlowBuilder b0 = FlowBuilder::image_model(2, 2, 1, 1);
    b0.squeeze();
    b0.factor_channels(0);
    FlowModel m0 = b0.build();
    Tensor x = rng.normal_tensor({3, 4});
    Tensor y = rng.normal_tensor({3, 4});
    auto out = m0.forward_eval(x, y);
    REQUIRE(out.z.data == x.data);
    REQUIRE(out.yprime.data == y.data);
  }
}

TEST_CASE("flow of identity couplings is the identity with zero logdet", "[flow]") {
  FlowModel m = make_toy_flow(2, 1, 2, kTinyNet, 31);
  zero_params(m);
  Rng rng(32);
  Tensor x = rng.normal_tensor({64, 2});
  Tensor y = rng.normal_tensor({64, 1});
  auto out = m.forward_eval(x, y);
  REQUIRE(out.z.data == x.data);
  REQUIRE(out.yprime.data == y.data);
  for (double v : out.logdet.data) REQUIRE(v == 0.0);
}

TEST_CASE("flow logdet matches numerical Jacobian log|det|", "[flow][oracle]") {
  Rng rng(41);
  FlowModel m = make_toy_flow(2, 1, 2, kTinyNet, 42);
  for (Tensor* p : m.params())
    for (double& v : p->data) v = 0.3 * rng.normal();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> in = {rng.normal(), rng.normal(), rng.normal()};
    auto jac = oracles::numerical_jacobian(
        [&](const std::vector<double>& v) { return eval_map(m, v); }, in, 1e-6);
    REQUIRE(flow_logdet(m, in) == Catch::Approx(oracles::log_abs_det(jac)).margin(1e-4));
  }
}

TEST_CASE("image flow with squeeze/factor matches numerical Jacobian", "[flow][oracle]") {
  Rng rng(51);
  FlowModel m = make_image_flow(2, 2, {"block", "squeeze", "factor", "block"}, kTinyNet, 52);
  for (Tensor* p : m.params())
    for (double& v : p->data) v = 0.3 * rng.normal();
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> in(8);
    for (double& v : in) v = rng.normal();
    auto jac = oracles::numerical_jacobian(
        [&](const std::vector<double>& v) { return eval_map(m, v); }, in, 1e-6);
    REQUIRE(flow_logdet(m, in) == Catch::Approx(oracles::log_abs_det(jac)).margin(1e-4));
  }
}

TEST_CASE("24-layer model round-trips 1e4 points below 1e-5", "[flow][property]") {
  FlowModel m = make_toy_flow(2, 1, 4, NetSpec{2, 16, 1.0}, 61);
  Rng rng(62);
  Tensor x = rng.normal_tensor({10000, 2});
  Tensor y = rng.normal_tensor({10000, 1});
  auto fwd = m.forward_eval(x, y);
  auto back = m.inverse_eval(fwd.z, fwd.yprime);
  double worst = 0;
  for (std::size_t i = 0; i < x.numel(); ++i)
    worst = std::max(worst, std::fabs(back.x.data[i] - x.data[i]));
  for (std::size_t i = 0; i < y.numel(); ++i)
    worst = std::max(worst, std::fabs(back.y.data[i] - y.data[i]));
  REQUIRE(worst < 1e-5);

  // Other direction: forward(inverse(z)) recovers z.
  Tensor z = rng.normal_tensor({2000, 2});
  Tensor yp = rng.normal_tensor({2000, 1});
  auto data = m.inverse_eval(z, yp);
  auto again = m.forward_eval(data.x, data.y);
  worst = 0;
  for (std::size_t i = 0; i < z.numel(); ++i)
    worst = std::max(worst, std::fabs(again.z.data[i] - z.data[i]));
  REQUIRE(worst < 1e-5);
}

TEST_CASE("checkpoint write-then-read reproduces outputs bit-exactly", "[flow][checkpoint]") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "condflow_ckpt_test.bin";
  FlowModel m = make_image_flow(4, 4, {"block", "squeeze", "factor", "block"}, kTinyNet, 71);
  Rng rng(72);
  for (Tensor* p : m.params())
    for (double& v : p->data) v = 0.3 * rng.normal();

  save_checkpoint(m, path);
  FlowModel loaded = load_checkpoint(path);

  Tensor x = rng.normal_tensor({7, 16});
  Tensor y = rng.normal_tensor({7, 16});
  auto a = m.forward_eval(x, y);
  auto b = loaded.forward_eval(x, y);
  REQUIRE(a.z.data == b.z.data);
  REQUIRE(a.yprime.data == b.yprime.data);
  REQUIRE(a.logdet.data == b.logdet.data);
  fs::remove(path);
}

TEST_CASE("bad inputs are rejected", "[flow]") {
  FlowModel m = make_toy_flow(2, 1, 1, kTinyNet, 81);
  Rng rng(82);
  Tensor x = rng.normal_tensor({4, 3});  // wrong width
  Tensor y = rng.normal_tensor({4, 1});
  REQUIRE_THROWS_AS(m.forward_eval(x, y), std::invalid_argument);
}

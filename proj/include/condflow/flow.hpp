// SPDX-License-Identifier: Apache-2.0
//
// FlowModel: an ordered composition of coupling layers, squeeze and
// factor-out steps forming one bijective map (x, y) <-> (z, y').
//
// Output routing is derived by tracing element origins through the
// composition: every output slot of z corresponds to exactly one x input
// element and every slot of y' to one y element. Under identity couplings the
// whole map is therefore the identity, which is also what the gain-0.1
// initialization approximates at the start of training.
#pragma once

#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "condflow/coupling.hpp"

namespace condflow {

struct SqueezeStep {
  GridShape in, out;
  std::shared_ptr<const std::vector<std::size_t>> perm;  // out col p = in col perm[p]
  std::shared_ptr<const std::vector<std::size_t>> inv;
};

struct FactorStep {
  GridShape in, out;
  std::size_t drop_channels = 0;
  std::shared_ptr<const std::vector<std::size_t>> keep, drop, restore;
  std::size_t drop_x = 0, drop_y = 0;  // origin balance, recorded for audits
};

struct FlowStep {
  enum class Kind { coupling, squeeze, factor };
  Kind kind;
  std::size_t idx;
};

// Space-to-depth: (h, w, c) -> (h/2, w/2, 4c), planar layout.
inline SqueezeStep make_squeeze(GridShape g) {
  if (!g.spatial || g.h % 2 != 0 || g.w % 2 != 0)
    throw std::invalid_argument("squeeze: need even spatial extents");
  SqueezeStep s;
  s.in = g;
  s.out = GridShape::image(g.h / 2, g.w / 2, 4 * g.c);
  auto perm = std::make_shared<std::vector<std::size_t>>(g.numel());
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t i = 0; i < g.h / 2; ++i)
      for (std::size_t j = 0; j < g.w / 2; ++j)
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t out_ch = (di * 2 + dj) * g.c + ch;
            (*perm)[s.out.flat(i, j, out_ch)] = g.flat(2 * i + di, 2 * j + dj, ch);
          }
  auto inv = std::make_shared<std::vector<std::size_t>>(g.numel());
  for (std::size_t p = 0; p < perm->size(); ++p) (*inv)[(*perm)[p]] = p;
  s.perm = std::move(perm);
  s.inv = std::move(inv);
  return s;
}

class FlowModel {
 public:
  std::size_t dx() const { return dx_; }
  std::size_t dy() const { return dy_; }
  std::size_t dim() const { return dx_ + dy_; }
  bool conditional() const { return dy_ > 0; }
  const GridShape& input_grid() const { return grid_; }

  const std::vector<CouplingLayer>& couplings() const { return couplings_; }
  const std::vector<FactorStep>& factors() const { return factors_; }
  const std::vector<SqueezeStep>& squeezes() const { return squeezes_; }
  const std::vector<FlowStep>& steps() const { return steps_; }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out;
    for (auto& c : couplings_) c.collect_params(out);
    return out;
  }
  std::vector<const Tensor*> params() const {
    std::vector<const Tensor*> out;
    for (const auto& c : couplings_) c.collect_params(out);
    return out;
  }

  std::vector<Value> bind(Tape& t) const {
    std::vector<Value> vals;
    for (const Tensor* p : params()) vals.push_back(t.leaf(*p));
    return vals;
  }

  struct LatentOut { Value z, yprime, logdet; };
  struct DataOut { Value x, y, logdet; };

  LatentOut forward(Tape& t, Value x, Value y, std::span<const Value> params) const {
    check_cols(x, dx_, "forward: x");
    if (dy_ > 0) check_cols(y, dy_, "forward: y");
    Value state = dy_ > 0 ? concat_cols(x, y) : x;
    Value logdet{};
    std::vector<Value> chunks(factors_.size());
    for (const FlowStep& st : steps_) {
      switch (st.kind) {
        case FlowStep::Kind::coupling: {
          const CouplingLayer& layer = couplings_[st.idx];
          auto out = layer.forward(t, state, layer_params(params, st.idx));
          state = out.state;
          logdet = logdet.valid() ? add(logdet, out.logdet) : out.logdet;
          break;
        }
        case FlowStep::Kind::squeeze:
          state = gather_cols(state, squeezes_[st.idx].perm);
          break;
        case FlowStep::Kind::factor: {
          const FactorStep& f = factors_[st.idx];
          if (!f.drop->empty()) {
            chunks[st.idx] = gather_cols(state, f.drop);
            state = gather_cols(state, f.keep);
          }
          break;
        }
      }
    }
    if (!logdet.valid())
      logdet = t.leaf(Tensor::zeros({state.tensor().rows(), 1}));
    Value big = state;
    for (std::size_t i = chunks.size(); i-- > 0;)
      if (chunks[i].valid()) big = concat_cols(chunks[i], big);
    Value out = gather_cols(big, out_gather_);
    Value z = slice_cols(out, 0, dx_);
    Value yp = dy_ > 0 ? slice_cols(out, dx_, dx_ + dy_) : Value{};
    return {z, yp, logdet};
  }

  DataOut inverse(Tape& t, Value z, Value yprime, std::span<const Value> params) const {
    check_cols(z, dx_, "inverse: z");
    if (dy_ > 0) check_cols(yprime, dy_, "inverse: y'");
    Value out = dy_ > 0 ? concat_cols(z, yprime) : z;
    Value big = gather_cols(out, out_ungather_);
    std::vector<Value> chunks(factors_.size());
    std::size_t off = 0;
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const std::size_t sz = factors_[i].drop->size();
      if (sz > 0) chunks[i] = slice_cols(big, off, off + sz);
      off += sz;
    }
    Value state = slice_cols(big, off, off + final_size_);
    Value logdet{};
    for (std::size_t k = steps_.size(); k-- > 0;) {
      const FlowStep& st = steps_[k];
      switch (st.kind) {
        case FlowStep::Kind::coupling: {
          const CouplingLayer& layer = couplings_[st.idx];
          auto o = layer.inverse(t, state, layer_params(params, st.idx));
          state = o.state;
          logdet = logdet.valid() ? add(logdet, o.logdet) : o.logdet;
          break;
        }
        case FlowStep::Kind::squeeze:
          state = gather_cols(state, squeezes_[st.idx].inv);
          break;
        case FlowStep::Kind::factor: {
          const FactorStep& f = factors_[st.idx];
          if (!f.drop->empty())
            state = gather_cols(concat_cols(state, chunks[st.idx]), f.restore);
          break;
        }
      }
    }
    if (!logdet.valid())
      logdet = t.leaf(Tensor::zeros({state.tensor().rows(), 1}));
    Value x = slice_cols(state, 0, dx_);
    Value y = dy_ > 0 ? slice_cols(state, dx_, dx_ + dy_) : Value{};
    return {x, y, logdet};
  }

  struct LatentEval { Tensor z, yprime, logdet; };
  struct DataEval { Tensor x, y, logdet; };

  // Batched no-grad evaluation; chunks rows to bound tape memory.
  LatentEval forward_eval(const Tensor& x, const Tensor& y, std::size_t chunk = 4096) const {
    LatentEval out;
    out.z = Tensor({x.rows(), dx_});
    out.yprime = dy_ > 0 ? Tensor({x.rows(), dy_}) : Tensor{};
    out.logdet = Tensor({x.rows(), 1});
    Tape t(false);
    for (std::size_t r0 = 0; r0 < x.rows(); r0 += chunk) {
      const std::size_t r1 = std::min(x.rows(), r0 + chunk);
      t.reset();
      auto p = bind(t);
      Value vx = t.leaf(take_rows(x, r0, r1));
      Value vy = dy_ > 0 ? t.leaf(take_rows(y, r0, r1)) : Value{};
      auto o = forward(t, vx, vy, p);
      put_rows(out.z, o.z.tensor(), r0);
      if (dy_ > 0) put_rows(out.yprime, o.yprime.tensor(), r0);
      put_rows(out.logdet, o.logdet.tensor(), r0);
    }
    return out;
  }

  DataEval inverse_eval(const Tensor& z, const Tensor& yprime, std::size_t chunk = 4096) const {
    DataEval out;
    out.x = Tensor({z.rows(), dx_});
    out.y = dy_ > 0 ? Tensor({z.rows(), dy_}) : Tensor{};
    out.logdet = Tensor({z.rows(), 1});
    Tape t(false);
    for (std::size_t r0 = 0; r0 < z.rows(); r0 += chunk) {
      const std::size_t r1 = std::min(z.rows(), r0 + chunk);
      t.reset();
      auto p = bind(t);
      Value vz = t.leaf(take_rows(z, r0, r1));
      Value vy = dy_ > 0 ? t.leaf(take_rows(yprime, r0, r1)) : Value{};
      auto o = inverse(t, vz, vy, p);
      put_rows(out.x, o.x.tensor(), r0);
      if (dy_ > 0) put_rows(out.y, o.y.tensor(), r0);
      put_rows(out.logdet, o.logdet.tensor(), r0);
    }
    return out;
  }

  static Tensor take_rows(const Tensor& t, std::size_t r0, std::size_t r1) {
    const std::size_t c = t.cols();
    Tensor out({r1 - r0, c});
    std::copy_n(&t.data[r0 * c], (r1 - r0) * c, out.data.data());
    return out;
  }

 private:
  static void put_rows(Tensor& dst, const Tensor& src, std::size_t r0) {
    std::copy_n(src.data.data(), src.numel(), &dst.data[r0 * dst.cols()]);
  }
  static void check_cols(Value v, std::size_t want, const char* what) {
    if (v.tensor().cols() != want)
      throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(want) +
                                  " columns, got " + std::to_string(v.tensor().cols()));
  }

  std::span<const Value> layer_params(std::span<const Value> all, std::size_t idx) const {
    return all.subspan(param_offsets_[idx], couplings_[idx].param_count());
  }

  friend class FlowBuilder;

  std::size_t dx_ = 0, dy_ = 0;
  GridShape grid_;
  std::vector<CouplingLayer> couplings_;
  std::vector<SqueezeStep> squeezes_;
  std::vector<FactorStep> factors_;
  std::vector<FlowStep> steps_;
  std::vector<std::size_t> param_offsets_;
  std::size_t final_size_ = 0;
  std::shared_ptr<const std::vector<std::size_t>> out_gather_, out_ungather_;
};

// Incremental construction with origin tracking. Couplings, squeezes and
// factor steps are appended in execution order; build() freezes the output
// routing tables.
class FlowBuilder {
 public:
  static FlowBuilder vector_model(std::size_t dx, std::size_t dy) {
    FlowBuilder b;
    b.m_.dx_ = dx;
    b.m_.dy_ = dy;
    b.m_.grid_ = GridShape::vec(dx + dy);
    b.init_origins();
    return b;
  }

  // x occupies the first cx channels, y the remaining cy.
  static FlowBuilder image_model(std::size_t h, std::size_t w, std::size_t cx, std::size_t cy) {
    FlowBuilder b;
    b.m_.dx_ = h * w * cx;
    b.m_.dy_ = h * w * cy;
    b.m_.grid_ = GridShape::image(h, w, cx + cy);
    b.init_origins();
    return b;
  }

  GridShape current_grid() const { return cur_; }

  FlowBuilder& add_coupling(Mask mask, const NetSpec& spec, Rng& rng) {
    if (mask.pattern.size() != cur_.numel())
      throw std::invalid_argument("add_coupling: mask size does not match state");
    m_.couplings_.push_back(CouplingLayer::make(std::move(mask), spec, rng));
    m_.steps_.push_back({FlowStep::Kind::coupling, m_.couplings_.size() - 1});
    return *this;
  }

  // One block of vector-mask couplings: every nontrivial mask over the state
  // dimensions (6 for 3D, 2 for 2D), in seeded-random order.
  FlowBuilder& add_vector_block(const NetSpec& spec, Rng& rng) {
    std::vector<Mask> masks;
    if (cur_.numel() == 3)
      masks = coupling_block_masks_3d(rng);
    else if (cur_.numel() == 2)
      masks = coupling_block_masks_2d(rng);
    else
      throw std::invalid_argument("add_vector_block: supported for 2D/3D states only");
    for (Mask& m : masks) add_coupling(std::move(m), spec, rng);
    return *this;
  }

  // Checkerboard pair plus channelwise pair, when the grid admits them.
  FlowBuilder& add_image_block(const NetSpec& spec, Rng& rng) {
    bool any = false;
    if (cur_.spatial && cur_.h % 2 == 0 && cur_.w % 2 == 0) {
      add_coupling(Mask::checkerboard(cur_, 0), spec, rng);
      add_coupling(Mask::checkerboard(cur_, 1), spec, rng);
      any = true;
    }
    if (cur_.c % 2 == 0 && cur_.c >= 2) {
      add_coupling(Mask::channelwise(cur_, 0), spec, rng);
      add_coupling(Mask::channelwise(cur_, 1), spec, rng);
      any = true;
    }
    if (!any) throw std::invalid_argument("add_image_block: grid admits no masks");
    return *this;
  }

  FlowBuilder& squeeze() {
    SqueezeStep s = make_squeeze(cur_);
    apply_perm(*s.perm);
    cur_ = s.out;
    group_channels_ = s.in.c;
    m_.squeezes_.push_back(std::move(s));
    m_.steps_.push_back({FlowStep::Kind::squeeze, m_.squeezes_.size() - 1});
    return *this;
  }

  // Drop `n_drop` channels from the state, routing their elements to the
  // output. Channels leave in groups matching the pre-squeeze channel set so
  // that x- and y-origin elements are factored out in equal numbers.
  FlowBuilder& factor_channels(std::size_t n_drop) {
    FactorStep f;
    f.in = cur_;
    f.drop_channels = n_drop;
    auto keep = std::make_shared<std::vector<std::size_t>>();
    auto drop = std::make_shared<std::vector<std::size_t>>();
    if (n_drop > 0) {
      if (group_channels_ == 0)
        throw std::logic_error("factor_channels: no preceding squeeze");
      if (n_drop % group_channels_ != 0 || n_drop >= cur_.c)
        throw std::invalid_argument("factor_channels: drop count must be a multiple of " +
                                    std::to_string(group_channels_) + " below " +
                                    std::to_string(cur_.c));
      // Alternate groups: odd-indexed groups leave first.
      const std::size_t n_groups = cur_.c / group_channels_;
      std::vector<bool> drop_ch(cur_.c, false);
      std::size_t dropped = 0;
      for (std::size_t g = 1; g < n_groups && dropped < n_drop; g += 2)
        for (std::size_t c = 0; c < group_channels_ && dropped < n_drop; ++c, ++dropped)
          drop_ch[g * group_channels_ + c] = true;
      if (dropped < n_drop)
        throw std::invalid_argument("factor_channels: cannot drop that many channels");
      const std::size_t hw = cur_.h * cur_.w;
      for (std::size_t ch = 0; ch < cur_.c; ++ch)
        for (std::size_t p = 0; p < hw; ++p)
          (drop_ch[ch] ? *drop : *keep).push_back(ch * hw + p);
    } else {
      keep->resize(cur_.numel());
      for (std::size_t p = 0; p < cur_.numel(); ++p) (*keep)[p] = p;
    }
    auto restore = std::make_shared<std::vector<std::size_t>>(cur_.numel());
    for (std::size_t k = 0; k < keep->size(); ++k) (*restore)[(*keep)[k]] = k;
    for (std::size_t k = 0; k < drop->size(); ++k) (*restore)[(*drop)[k]] = keep->size() + k;

    std::vector<std::pair<bool, std::size_t>> chunk;
    for (std::size_t p : *drop) chunk.push_back(origins_[p]);
    std::vector<std::pair<bool, std::size_t>> kept;
    for (std::size_t p : *keep) kept.push_back(origins_[p]);
    origins_ = std::move(kept);
    for (const auto& o : chunk) (o.first ? f.drop_y : f.drop_x)++;
    if (f.drop_x != f.drop_y)
      throw std::logic_error("factor_channels: unbalanced x/y routing");
    chunk_origins_.push_back(std::move(chunk));

    f.out = GridShape::image(cur_.h, cur_.w, cur_.c - n_drop);
    f.keep = std::move(keep);
    f.drop = std::move(drop);
    f.restore = std::move(restore);
    cur_ = f.out;
    m_.factors_.push_back(std::move(f));
    m_.steps_.push_back({FlowStep::Kind::factor, m_.factors_.size() - 1});
    return *this;
  }

  FlowBuilder& factor_half() { return factor_channels(cur_.c / 2); }

  FlowModel build() {
    // Parameter offsets per coupling.
    m_.param_offsets_.clear();
    std::size_t off = 0;
    for (const auto& c : m_.couplings_) {
      m_.param_offsets_.push_back(off);
      off += c.param_count();
    }
    m_.final_size_ = origins_.size();

    // Concat layout: factored chunks in step order, then the final state.
    const std::size_t total = m_.dx_ + m_.dy_;
    std::vector<std::size_t> pos_x(m_.dx_), pos_y(m_.dy_);
    std::size_t pos = 0;
    for (const auto& chunk : chunk_origins_)
      for (const auto& o : chunk) (o.first ? pos_y[o.second] : pos_x[o.second]) = pos++;
    for (const auto& o : origins_) (o.first ? pos_y[o.second] : pos_x[o.second]) = pos++;
    if (pos != total) throw std::logic_error("flow build: element count mismatch");

    auto gather = std::make_shared<std::vector<std::size_t>>(total);
    for (std::size_t i = 0; i < m_.dx_; ++i) (*gather)[i] = pos_x[i];
    for (std::size_t j = 0; j < m_.dy_; ++j) (*gather)[m_.dx_ + j] = pos_y[j];
    auto ungather = std::make_shared<std::vector<std::size_t>>(total);
    for (std::size_t s = 0; s < total; ++s) (*ungather)[(*gather)[s]] = s;
    m_.out_gather_ = std::move(gather);
    m_.out_ungather_ = std::move(ungather);
    return std::move(m_);
  }

 private:
  void init_origins() {
    cur_ = m_.grid_;
    origins_.clear();
    for (std::size_t i = 0; i < m_.dx_; ++i) origins_.push_back({false, i});
    for (std::size_t j = 0; j < m_.dy_; ++j) origins_.push_back({true, j});
  }

  void apply_perm(const std::vector<std::size_t>& perm) {
    std::vector<std::pair<bool, std::size_t>> next(perm.size());
    for (std::size_t p = 0; p < perm.size(); ++p) next[p] = origins_[perm[p]];
    origins_ = std::move(next);
  }

  FlowModel m_;
  GridShape cur_;
  std::size_t group_channels_ = 0;
  std::vector<std::pair<bool, std::size_t>> origins_;
  std::vector<std::vector<std::pair<bool, std::size_t>>> chunk_origins_;
};

// App-standard toy topology: `blocks` sets of the six 3D masks (or the two
// 2D masks for non-conditional models).
inline FlowModel make_toy_flow(std::size_t dx, std::size_t dy, std::size_t blocks,
                               const NetSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  FlowBuilder b = FlowBuilder::vector_model(dx, dy);
  for (std::size_t k = 0; k < blocks; ++k) b.add_vector_block(spec, rng);
  return b.build();
}

inline std::vector<CouplingLayer> make_coupling_block_3d(const NetSpec& spec, Rng& rng) {
  std::vector<CouplingLayer> layers;
  for (Mask& m : coupling_block_masks_3d(rng))
    layers.push_back(CouplingLayer::make(std::move(m), spec, rng));
  return layers;
}

// Image topology plan: tokens "block", "squeeze", "factor".
inline FlowModel make_image_flow(std::size_t h, std::size_t w, const std::vector<std::string>& plan,
                                 const NetSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  FlowBuilder b = FlowBuilder::image_model(h, w, 1, 1);
  for (const std::string& tok : plan) {
    if (tok == "block")
      b.add_image_block(spec, rng);
    else if (tok == "squeeze")
      b.squeeze();
    else if (tok == "factor")
      b.factor_half();
    else
      throw std::invalid_argument("make_image_flow: unknown plan token '" + tok + "'");
  }
  return b.build();
}

} // namespace condflow

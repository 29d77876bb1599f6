// SPDX-License-Identifier: Apache-2.0
//
// Coupling masks and compressed masking. A mask partitions the state columns
// into the pass-through half u1 and the transformed half u2; compression
// gathers each half into a dense tensor instead of zero-filling, halving the
// coupling-network input size.
#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "condflow/tensor.hpp"

namespace condflow {

// Conceptual layout of a flat state vector. Planar storage: channel c spans
// columns [c*h*w, (c+1)*h*w) in row-major spatial order.
struct GridShape {
  std::size_t h = 1, w = 1, c = 1;
  bool spatial = false;  // false for plain vectors (h=w=1, c=dim)

  std::size_t numel() const { return h * w * c; }
  std::size_t flat(std::size_t i, std::size_t j, std::size_t ch) const {
    return ch * h * w + i * w + j;
  }
  static GridShape vec(std::size_t n) { return GridShape{1, 1, n, false}; }
  static GridShape image(std::size_t h, std::size_t w, std::size_t c) {
    return GridShape{h, w, c, true};
  }
};

struct Mask {
  enum class Kind { vector_pattern, checkerboard, channelwise };

  Kind kind = Kind::vector_pattern;
  GridShape grid;
  std::vector<bool> pattern;  // true: column belongs to u1

  std::vector<std::size_t> idx1, idx2;                       // compression gathers
  std::shared_ptr<const std::vector<std::size_t>> restore;   // concat(u1,u2) -> state
  GridShape compact1, compact2;

  static Mask vector_mask(std::vector<bool> pat) {
    Mask m;
    m.kind = Kind::vector_pattern;
    m.grid = GridShape::vec(pat.size());
    m.pattern = std::move(pat);
    m.compact1 = GridShape::vec(0);
    m.compact2 = GridShape::vec(0);
    m.finalize();
    m.compact1 = GridShape::vec(m.idx1.size());
    m.compact2 = GridShape::vec(m.idx2.size());
    return m;
  }

  // parity 0: (i+j) even is u1; parity 1 is the complement.
  static Mask checkerboard(GridShape g, int parity) {
    if (!g.spatial || g.h % 2 != 0 || g.w % 2 != 0)
      throw std::invalid_argument("checkerboard: need even spatial extents");
    Mask m;
    m.kind = Kind::checkerboard;
    m.grid = g;
    m.pattern.assign(g.numel(), false);
    for (std::size_t ch = 0; ch < g.c; ++ch)
      for (std::size_t i = 0; i < g.h; ++i)
        for (std::size_t j = 0; j < g.w; ++j)
          m.pattern[g.flat(i, j, ch)] = ((i + j) % 2 == static_cast<std::size_t>(parity));
    m.finalize();
    // Spatial extents halve, channel depth doubles.
    m.compact1 = GridShape::image(g.h / 2, g.w / 2, 2 * g.c);
    m.compact2 = m.compact1;
    return m;
  }

  // half 0: channels [0, c/2) are u1; half 1 is the complement.
  static Mask channelwise(GridShape g, int half) {
    if (g.c % 2 != 0 || g.c < 2)
      throw std::invalid_argument("channelwise: need an even channel count");
    Mask m;
    m.kind = Kind::channelwise;
    m.grid = g;
    m.pattern.assign(g.numel(), false);
    for (std::size_t ch = 0; ch < g.c; ++ch)
      for (std::size_t i = 0; i < g.h; ++i)
        for (std::size_t j = 0; j < g.w; ++j)
          m.pattern[g.flat(i, j, ch)] = ((ch < g.c / 2) == (half == 0));
    m.finalize();
    m.compact1 = GridShape::image(g.h, g.w, g.c / 2);
    m.compact2 = m.compact1;
    return m;
  }

  void finalize() {
    idx1.clear();
    idx2.clear();
    for (std::size_t p = 0; p < pattern.size(); ++p)
      (pattern[p] ? idx1 : idx2).push_back(p);
    if (idx1.empty() || idx2.empty())
      throw std::invalid_argument("mask: both halves must be non-empty");
    auto r = std::make_shared<std::vector<std::size_t>>(pattern.size());
    for (std::size_t k = 0; k < idx1.size(); ++k) (*r)[idx1[k]] = k;
    for (std::size_t k = 0; k < idx2.size(); ++k) (*r)[idx2[k]] = idx1.size() + k;
    restore = std::move(r);
  }

  std::string pattern_string() const {
    std::string s(pattern.size(), '0');
    for (std::size_t i = 0; i < s.size(); ++i)
      if (pattern[i]) s[i] = '1';
    return s;
  }

  static Mask from_saved(Kind kind, GridShape grid, const std::string& pattern) {
    if (pattern.size() != grid.numel())
      throw std::invalid_argument("mask: pattern length does not match grid");
    Mask m;
    m.kind = kind;
    m.grid = grid;
    m.pattern.resize(pattern.size());
    for (std::size_t i = 0; i < pattern.size(); ++i) m.pattern[i] = pattern[i] == '1';
    m.finalize();
    switch (kind) {
      case Kind::checkerboard:
        m.compact1 = GridShape::image(grid.h / 2, grid.w / 2, 2 * grid.c);
        m.compact2 = m.compact1;
        break;
      case Kind::channelwise:
        m.compact1 = GridShape::image(grid.h, grid.w, grid.c / 2);
        m.compact2 = m.compact1;
        break;
      case Kind::vector_pattern:
        m.compact1 = GridShape::vec(m.idx1.size());
        m.compact2 = GridShape::vec(m.idx2.size());
        break;
    }
    return m;
  }
};

// The six nontrivial masks over three dimensions, in seeded-random order.
template <typename RngT>
std::vector<Mask> coupling_block_masks_3d(RngT& rng) {
  static const bool pats[6][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1},
                                  {0, 1, 1}, {1, 0, 1}, {1, 1, 0}};
  std::vector<std::size_t> order = {0, 1, 2, 3, 4, 5};
  rng.shuffle(order);
  std::vector<Mask> masks;
  for (std::size_t k : order)
    masks.push_back(Mask::vector_mask({pats[k][0], pats[k][1], pats[k][2]}));
  return masks;
}

// Nontrivial masks for 2D states (non-conditional toy flows).
template <typename RngT>
std::vector<Mask> coupling_block_masks_2d(RngT& rng) {
  std::vector<std::size_t> order = {0, 1};
  rng.shuffle(order);
  std::vector<Mask> masks;
  for (std::size_t k : order)
    masks.push_back(Mask::vector_mask({k == 0, k != 0}));
  return masks;
}

} // namespace condflow

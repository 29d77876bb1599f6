// SPDX-License-Identifier: Apache-2.0
//
// Deterministic dataset generators for the toy and image experiments, plus
// dequantization, standardization and the batching policy. Every generator
// also ships an analytic support predicate (distance to the class support)
// that diagnostics use to score model samples.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "condflow/rng.hpp"
#include "condflow/tensor.hpp"

namespace condflow {

struct Dataset {
  Tensor x;                 // [n x dx]
  Tensor y;                 // [n x dy]; empty when non-conditional
  std::vector<int> labels;  // discrete class ids; empty for continuous conditions
  bool discrete = false;
  std::size_t image_size = 0;  // side length when x holds square images

  // Distance from a 2D point to the support of the class/condition `cond`
  // (0 inside). Unset for image corpora.
  std::function<double(double, double, double)> support_dist;

  std::size_t size() const { return x.rows(); }
  std::size_t dx() const { return x.cols(); }
  std::size_t dy() const { return y.numel() == 0 ? 0 : y.cols(); }
};

namespace geo {

inline double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2 * std::numbers::pi;
  while (a < -std::numbers::pi) a += 2 * std::numbers::pi;
  return a;
}

inline double dist_point_segment(double px, double py, double ax, double ay, double bx,
                                 double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double cx = ax + t * vx, cy = ay + t * vy;
  return std::hypot(px - cx, py - cy);
}

// Distance to the upper unit half-circle arc centered at the origin.
inline double dist_upper_arc(double x0, double x1) {
  if (x1 >= 0.0) return std::fabs(std::hypot(x0, x1) - 1.0);
  return std::min(std::hypot(x0 - 1.0, x1), std::hypot(x0 + 1.0, x1));
}

// Distance to the unit-circle sector of width 1 radian centered on angle y.
inline double dist_sector(double x0, double x1, double y) {
  const double r = std::hypot(x0, x1);
  const double delta = wrap_angle(std::atan2(x1, x0) - y);
  if (std::fabs(delta) <= 0.5) return std::max(0.0, r - 1.0);
  const double e0x = std::cos(y - 0.5), e0y = std::sin(y - 0.5);
  const double e1x = std::cos(y + 0.5), e1y = std::sin(y + 0.5);
  return std::min(dist_point_segment(x0, x1, 0, 0, e0x, e0y),
                  dist_point_segment(x0, x1, 0, 0, e1x, e1y));
}

} // namespace geo

// Points near the circumference of a circle: radius ~ N(r, sigma_r^2),
// angle uniform.
inline Dataset gen_circle(std::size_t n, double r, double sigma_r, std::uint64_t seed) {
  if (r <= 0 || sigma_r < 0) throw std::invalid_argument("gen_circle: need r > 0, sigma_r >= 0");
  Rng rng(seed);
  Dataset d;
  d.x = Tensor({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const double rho = rng.normal(r, sigma_r);
    const double th = rng.uniform(0, 2 * std::numbers::pi);
    d.x.data[2 * i] = rho * std::cos(th);
    d.x.data[2 * i + 1] = rho * std::sin(th);
  }
  const double band = 3 * sigma_r;
  d.support_dist = [r, band](double x0, double x1, double) {
    return std::max(0.0, std::fabs(std::hypot(x0, x1) - r) - band);
  };
  return d;
}

constexpr double kCrescentSigma = 0.1;

// Two interleaved half-circles of thickness sigma = 0.1, labels +1 / -1.
// Class +1 is the upper unit arc at the origin; class -1 is the lower arc
// offset by (1, 0.5).
inline Dataset gen_crescents(std::size_t n, std::uint64_t seed) {
  if (n % 2 != 0) throw std::invalid_argument("gen_crescents: n must be even");
  Rng rng(seed);
  Dataset d;
  d.x = Tensor({n, 2});
  d.y = Tensor({n, 1});
  d.labels.resize(n);
  d.discrete = true;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = (i % 2 == 0) ? 1 : -1;
    const double th = rng.uniform(0, std::numbers::pi);
    const double rho = rng.normal(1.0, kCrescentSigma);
    double px = rho * std::cos(th), py = rho * std::sin(th);
    if (label < 0) {
      px = 1.0 - px;
      py = 0.5 - py;
    }
    d.x.data[2 * i] = px;
    d.x.data[2 * i + 1] = py;
    d.y.data[i] = label;
    d.labels[i] = label;
  }
  d.support_dist = [](double x0, double x1, double label) {
    const double band = 3 * kCrescentSigma;
    const double arc = label >= 0 ? geo::dist_upper_arc(x0, x1)
                                  : geo::dist_upper_arc(1.0 - x0, 0.5 - x1);
    return std::max(0.0, arc - band);
  };
  return d;
}

// Continuous problem: y ~ U[0, 2pi), x uniform over the area of the unit
// circle sector of width 1 radian centered on y.
inline Dataset gen_sectors(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.x = Tensor({n, 2});
  d.y = Tensor({n, 1});
  d.discrete = false;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = rng.uniform(0, 2 * std::numbers::pi);
    const double r = std::sqrt(rng.uniform());
    const double th = rng.uniform(y - 0.5, y + 0.5);
    d.x.data[2 * i] = r * std::cos(th);
    d.x.data[2 * i + 1] = r * std::sin(th);
    d.y.data[i] = y;
  }
  d.support_dist = [](double x0, double x1, double y) { return geo::dist_sector(x0, x1, y); };
  return d;
}

namespace shapes4 {
constexpr double kRingRadius = 1.0, kRingSigma = 0.05;
constexpr double kBlobSigma = 0.15;
constexpr double kBlobAx = -0.7, kBlobAy = 0.4, kBlobBx = 0.7, kBlobBy = -0.4;
constexpr double kDiskCx = 0.3, kDiskCy = 0.0, kDiskR = 0.8;
constexpr double kLineSigma = 0.05;
// Segment endpoints for the line class.
constexpr double kLineAx = -1.0, kLineAy = -1.0, kLineBx = 1.0, kLineBy = 1.0;
} // namespace shapes4

// Four overlapping 2D class distributions with different topology:
// 0 ring, 1 two-blob mixture, 2 filled disk, 3 line segment.
inline Dataset gen_shapes4(std::size_t n, std::uint64_t seed) {
  if (n % 4 != 0) throw std::invalid_argument("gen_shapes4: n must be divisible by 4");
  using namespace shapes4;
  Rng rng(seed);
  Dataset d;
  d.x = Tensor({n, 2});
  d.y = Tensor({n, 1});
  d.labels.resize(n);
  d.discrete = true;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 4);
    double px = 0, py = 0;
    switch (label) {
      case 0: {
        const double th = rng.uniform(0, 2 * std::numbers::pi);
        const double rho = rng.normal(kRingRadius, kRingSigma);
        px = rho * std::cos(th);
        py = rho * std::sin(th);
        break;
      }
      case 1: {
        const bool first = rng.uniform() < 0.5;
        px = (first ? kBlobAx : kBlobBx) + kBlobSigma * rng.normal();
        py = (first ? kBlobAy : kBlobBy) + kBlobSigma * rng.normal();
        break;
      }
      case 2: {
        const double th = rng.uniform(0, 2 * std::numbers::pi);
        const double rho = kDiskR * std::sqrt(rng.uniform());
        px = kDiskCx + rho * std::cos(th);
        py = kDiskCy + rho * std::sin(th);
        break;
      }
      default: {
        const double t = rng.uniform();
        // Unit normal to the segment direction.
        const double nx = -(kLineBy - kLineAy), ny = kLineBx - kLineAx;
        const double nl = std::hypot(nx, ny);
        const double jitter = kLineSigma * rng.normal();
        px = kLineAx + t * (kLineBx - kLineAx) + jitter * nx / nl;
        py = kLineAy + t * (kLineBy - kLineAy) + jitter * ny / nl;
        break;
      }
    }
    d.x.data[2 * i] = px;
    d.x.data[2 * i + 1] = py;
    d.y.data[i] = label;
    d.labels[i] = label;
  }
  d.support_dist = [](double x0, double x1, double label) {
    using namespace shapes4;
    switch (static_cast<int>(std::lround(label))) {
      case 0:
        return std::max(0.0, std::fabs(std::hypot(x0, x1) - kRingRadius) - 3 * kRingSigma);
      case 1: {
        const double da = std::hypot(x0 - kBlobAx, x1 - kBlobAy);
        const double db = std::hypot(x0 - kBlobBx, x1 - kBlobBy);
        return std::max(0.0, std::min(da, db) - 3 * kBlobSigma);
      }
      case 2:
        return std::max(0.0, std::hypot(x0 - kDiskCx, x1 - kDiskCy) - kDiskR);
      case 3:
        return std::max(0.0, geo::dist_point_segment(x0, x1, kLineAx, kLineAy, kLineBx, kLineBy) -
                                 3 * kLineSigma);
      default:
        throw std::invalid_argument("shapes4: unknown label");
    }
  };
  return d;
}

// Small grayscale glyph images (bars, boxes, rings) with 8-level quantized
// intensities; labels are the glyph kind. Desk-scale stand-in corpus for
// image experiments.
inline Dataset gen_toy_images(std::size_t n, std::size_t size, std::uint64_t seed) {
  if (size != 8 && size != 16) throw std::invalid_argument("gen_toy_images: size must be 8 or 16");
  Rng rng(seed);
  Dataset d;
  d.x = Tensor({n, size * size});
  d.labels.resize(n);
  d.discrete = true;
  d.image_size = size;
  auto level = [&](std::uint64_t lo) { return static_cast<double>(lo + rng.integer(8 - lo)) / 7.0; };
  for (std::size_t img = 0; img < n; ++img) {
    double* px = &d.x.data[img * size * size];
    std::fill_n(px, size * size, 0.0);
    const int kind = static_cast<int>(img % 3);
    d.labels[img] = kind;
    const double fg = level(3);
    switch (kind) {
      case 0: {  // bars: one horizontal and one vertical stripe
        const std::size_t row = rng.integer(size);
        const std::size_t col = rng.integer(size);
        for (std::size_t j = 0; j < size; ++j) px[row * size + j] = fg;
        const double fg2 = level(2);
        for (std::size_t i = 0; i < size; ++i) px[i * size + col] = fg2;
        break;
      }
      case 1: {  // box outline
        const std::size_t h = 3 + rng.integer(size - 4);
        const std::size_t w = 3 + rng.integer(size - 4);
        const std::size_t r0 = rng.integer(size - h);
        const std::size_t c0 = rng.integer(size - w);
        for (std::size_t j = 0; j <= w; ++j) {
          px[r0 * size + c0 + j] = fg;
          px[(r0 + h) * size + c0 + j] = fg;
        }
        for (std::size_t i = 0; i <= h; ++i) {
          px[(r0 + i) * size + c0] = fg;
          px[(r0 + i) * size + c0 + w] = fg;
        }
        break;
      }
      default: {  // ring
        const double cx = size / 2.0 + rng.uniform(-1.5, 1.5);
        const double cy = size / 2.0 + rng.uniform(-1.5, 1.5);
        const double rad = size / 4.0 + rng.uniform(0, size / 4.0 - 1.0);
        for (std::size_t i = 0; i < size; ++i)
          for (std::size_t j = 0; j < size; ++j) {
            const double dist = std::hypot(i + 0.5 - cy, j + 0.5 - cx);
            if (std::fabs(dist - rad) < 0.7) px[i * size + j] = fg;
          }
        break;
      }
    }
  }
  return d;
}

// Rough unbounded dequantization: v <- (1 - alpha) v + alpha N(0, 1), fresh
// noise on every call.
inline Tensor dequantize(const Tensor& batch, double alpha, Rng& rng) {
  if (alpha < 0 || alpha >= 1) throw std::invalid_argument("dequantize: need 0 <= alpha < 1");
  Tensor out = batch;
  if (alpha == 0) return out;
  for (double& v : out.data) v = (1 - alpha) * v + alpha * rng.normal();
  return out;
}

struct StandardizeStats {
  double mean = 0;
  double stddev = 1;
};

// Joint affine standardization over every element of x and y together.
inline StandardizeStats standardize(Dataset& d) {
  double s = 0, s2 = 0;
  std::size_t n = d.x.numel() + d.y.numel();
  if (n == 0) throw std::invalid_argument("standardize: empty dataset");
  for (double v : d.x.data) { s += v; s2 += v * v; }
  for (double v : d.y.data) { s += v; s2 += v * v; }
  const double mean = s / static_cast<double>(n);
  const double var = s2 / static_cast<double>(n) - mean * mean;
  if (var <= 0) throw std::invalid_argument("standardize: zero variance");
  StandardizeStats st{mean, std::sqrt(var)};
  for (double& v : d.x.data) v = (v - st.mean) / st.stddev;
  for (double& v : d.y.data) v = (v - st.mean) / st.stddev;
  return st;
}

inline void apply_standardize(Tensor& t, const StandardizeStats& st) {
  for (double& v : t.data) v = (v - st.mean) / st.stddev;
}
inline void invert_standardize(Tensor& t, const StandardizeStats& st) {
  for (double& v : t.data) v = v * st.stddev + st.mean;
}

// One epoch of index batches. With segregation on, every batch holds a single
// class and classes interleave round-robin; otherwise a plain seeded shuffle.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n,
                                                          const std::vector<int>& labels,
                                                          std::size_t batch_size, bool segregate,
                                                          Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch size must be positive");
  std::vector<std::vector<std::size_t>> batches;
  if (!segregate) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t i = 0; i < n; i += batch_size) {
      batches.emplace_back(order.begin() + i,
                           order.begin() + std::min(n, i + batch_size));
    }
    return batches;
  }
  if (labels.size() != n) throw std::invalid_argument("make_batches: segregation needs labels");
  std::vector<int> classes;
  for (int l : labels)
    if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
  std::sort(classes.begin(), classes.end());
  std::vector<std::vector<std::size_t>> queues(classes.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = static_cast<std::size_t>(
        std::find(classes.begin(), classes.end(), labels[i]) - classes.begin());
    queues[c].push_back(i);
  }
  for (auto& q : queues) {
    if (q.size() < batch_size)
      throw std::invalid_argument("make_batches: batch size exceeds class size");
    rng.shuffle(q);
  }
  std::vector<std::size_t> heads(queues.size(), 0);
  bool left = true;
  while (left) {
    left = false;
    for (std::size_t c = 0; c < queues.size(); ++c) {
      if (heads[c] >= queues[c].size()) continue;
      const std::size_t take = std::min(batch_size, queues[c].size() - heads[c]);
      batches.emplace_back(queues[c].begin() + static_cast<std::ptrdiff_t>(heads[c]),
                           queues[c].begin() + static_cast<std::ptrdiff_t>(heads[c] + take));
      heads[c] += take;
      if (heads[c] < queues[c].size()) left = true;
    }
  }
  return batches;
}

inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  const std::size_t c = t.cols();
  Tensor out({rows.size(), c});
  for (std::size_t k = 0; k < rows.size(); ++k)
    std::copy_n(&t.data[rows[k] * c], c, &out.data[k * c]);
  return out;
}

// --- declarative dataset specs and cache files ------------------------------

struct DatasetSpec {
  std::string kind;  // circle | crescents | sectors | shapes4 | toy-images
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double r = 1.0;          // circle
  double sigma_r = 0.1;    // circle
  std::size_t image_size = 16;

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", kind}, {"n", n}, {"seed", seed}};
    if (kind == "circle") {
      j["r"] = r;
      j["sigma_r"] = sigma_r;
    }
    if (kind == "toy-images") j["image_size"] = image_size;
    return j;
  }

  static DatasetSpec from_json(const nlohmann::json& j) {
    DatasetSpec s;
    for (const auto& [key, _] : j.items())
      if (key != "kind" && key != "n" && key != "seed" && key != "r" && key != "sigma_r" &&
          key != "image_size")
        throw std::invalid_argument("dataset spec: unknown key '" + key + "'");
    s.kind = j.at("kind").get<std::string>();
    s.n = j.at("n").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.r = j.value("r", 1.0);
    s.sigma_r = j.value("sigma_r", 0.1);
    s.image_size = j.value("image_size", std::size_t{16});
    return s;
  }
};

inline Dataset generate(const DatasetSpec& spec) {
  if (spec.kind == "circle") return gen_circle(spec.n, spec.r, spec.sigma_r, spec.seed);
  if (spec.kind == "crescents") return gen_crescents(spec.n, spec.seed);
  if (spec.kind == "sectors") return gen_sectors(spec.n, spec.seed);
  if (spec.kind == "shapes4") return gen_shapes4(spec.n, spec.seed);
  if (spec.kind == "toy-images") return gen_toy_images(spec.n, spec.image_size, spec.seed);
  throw std::invalid_argument("dataset spec: unknown kind '" + spec.kind + "'");
}

// Cache file: JSON header line, then raw 64-bit floats (x block then y block).
inline void save_dataset_cache(const std::filesystem::path& path, const Dataset& d,
                               const DatasetSpec& spec) {
  nlohmann::json j;
  j["spec"] = spec.to_json();
  j["n"] = d.size();
  j["dx"] = d.dx();
  j["dy"] = d.dy();
  j["discrete"] = d.discrete;
  j["labels"] = d.labels;
  j["image_size"] = d.image_size;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("dataset cache: cannot write " + path.string());
  const std::string header = j.dump();
  const std::uint64_t hlen = header.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(d.x.data.data()),
            static_cast<std::streamsize>(d.x.numel() * sizeof(double)));
  out.write(reinterpret_cast<const char*>(d.y.data.data()),
            static_cast<std::streamsize>(d.y.numel() * sizeof(double)));
}

// Loads a cache; support predicates are not serialized, so they are restored
// by regenerating from the recorded spec when needed.
inline Dataset load_dataset_cache(const std::filesystem::path& path, DatasetSpec* spec_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("dataset cache: cannot open " + path.string());
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  const nlohmann::json j = nlohmann::json::parse(header);
  Dataset d;
  const std::size_t n = j.at("n").get<std::size_t>();
  const std::size_t dx = j.at("dx").get<std::size_t>();
  const std::size_t dy = j.at("dy").get<std::size_t>();
  d.x = Tensor({n, dx});
  if (dy > 0) d.y = Tensor({n, dy});
  d.discrete = j.at("discrete").get<bool>();
  d.labels = j.at("labels").get<std::vector<int>>();
  d.image_size = j.at("image_size").get<std::size_t>();
  in.read(reinterpret_cast<char*>(d.x.data.data()),
          static_cast<std::streamsize>(d.x.numel() * sizeof(double)));
  if (dy > 0)
    in.read(reinterpret_cast<char*>(d.y.data.data()),
            static_cast<std::streamsize>(d.y.numel() * sizeof(double)));
  if (!in) throw std::runtime_error("dataset cache: truncated file " + path.string());
  if (spec_out) *spec_out = DatasetSpec::from_json(j.at("spec"));
  return d;
}

} // namespace condflow

// SPDX-License-Identifier: Apache-2.0
//
// Versioned model checkpoints: a JSON topology header followed by the raw
// 64-bit parameter blob. Write-then-read reproduces model outputs bit-exactly.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "condflow/flow.hpp"

namespace condflow {

namespace detail {
constexpr char kCheckpointMagic[8] = {'C', 'N', 'D', 'F', 'L', 'W', '0', '1'};

inline nlohmann::json grid_json(const GridShape& g) {
  return {{"h", g.h}, {"w", g.w}, {"c", g.c}, {"spatial", g.spatial}};
}
inline GridShape grid_from_json(const nlohmann::json& j) {
  GridShape g;
  g.h = j.at("h").get<std::size_t>();
  g.w = j.at("w").get<std::size_t>();
  g.c = j.at("c").get<std::size_t>();
  g.spatial = j.at("spatial").get<bool>();
  return g;
}

inline const char* mask_kind_name(Mask::Kind k) {
  switch (k) {
    case Mask::Kind::vector_pattern: return "vector";
    case Mask::Kind::checkerboard: return "checkerboard";
    case Mask::Kind::channelwise: return "channelwise";
  }
  return "vector";
}
inline Mask::Kind mask_kind_from(const std::string& s) {
  if (s == "vector") return Mask::Kind::vector_pattern;
  if (s == "checkerboard") return Mask::Kind::checkerboard;
  if (s == "channelwise") return Mask::Kind::channelwise;
  throw std::invalid_argument("checkpoint: unknown mask kind '" + s + "'");
}
} // namespace detail

inline void save_checkpoint(const FlowModel& model, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "condflow-checkpoint";
  j["version"] = 1;
  j["dx"] = model.dx();
  j["dy"] = model.dy();
  j["grid"] = detail::grid_json(model.input_grid());
  nlohmann::json steps = nlohmann::json::array();
  for (const FlowStep& st : model.steps()) {
    nlohmann::json s;
    switch (st.kind) {
      case FlowStep::Kind::coupling: {
        const CouplingLayer& c = model.couplings()[st.idx];
        s["kind"] = "coupling";
        s["mask_kind"] = detail::mask_kind_name(c.mask.kind);
        s["grid"] = detail::grid_json(c.mask.grid);
        s["pattern"] = c.mask.pattern_string();
        s["net_depth"] = c.scale_net.weights.size() - 1;
        s["net_width"] =
            c.scale_net.weights.size() > 1 ? c.scale_net.weights[0].cols() : std::size_t{0};
        break;
      }
      case FlowStep::Kind::squeeze:
        s["kind"] = "squeeze";
        break;
      case FlowStep::Kind::factor:
        s["kind"] = "factor";
        s["drop_channels"] = model.factors()[st.idx].drop_channels;
        break;
    }
    steps.push_back(std::move(s));
  }
  j["steps"] = std::move(steps);

  std::size_t n_param = 0;
  for (const Tensor* p : model.params()) n_param += p->numel();
  j["n_param"] = n_param;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for write");
  out.write(detail::kCheckpointMagic, 8);
  const std::string header = j.dump();
  const std::uint64_t hlen = header.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  const std::uint64_t plen = n_param;
  out.write(reinterpret_cast<const char*>(&plen), 8);
  for (const Tensor* p : model.params())
    out.write(reinterpret_cast<const char*>(p->data.data()),
              static_cast<std::streamsize>(p->numel() * sizeof(double)));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

inline FlowModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(detail::kCheckpointMagic, 8))
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  const nlohmann::json j = nlohmann::json::parse(header);
  if (j.at("version").get<int>() != 1)
    throw std::runtime_error("checkpoint: unsupported version");

  const GridShape grid = detail::grid_from_json(j.at("grid"));
  const std::size_t dx = j.at("dx").get<std::size_t>();
  const std::size_t dy = j.at("dy").get<std::size_t>();
  Rng rng(0);  // placeholder weights; overwritten by the blob below
  FlowBuilder b = grid.spatial
                      ? FlowBuilder::image_model(grid.h, grid.w, dx / (grid.h * grid.w),
                                                 dy / (grid.h * grid.w))
                      : FlowBuilder::vector_model(dx, dy);
  for (const nlohmann::json& s : j.at("steps")) {
    const std::string kind = s.at("kind").get<std::string>();
    if (kind == "coupling") {
      NetSpec spec;
      spec.depth = s.at("net_depth").get<std::size_t>();
      spec.width = s.at("net_width").get<std::size_t>();
      Mask m = Mask::from_saved(detail::mask_kind_from(s.at("mask_kind").get<std::string>()),
                                detail::grid_from_json(s.at("grid")),
                                s.at("pattern").get<std::string>());
      b.add_coupling(std::move(m), spec, rng);
    } else if (kind == "squeeze") {
      b.squeeze();
    } else if (kind == "factor") {
      b.factor_channels(s.at("drop_channels").get<std::size_t>());
    } else {
      throw std::runtime_error("checkpoint: unknown step kind '" + kind + "'");
    }
  }
  FlowModel model = b.build();

  std::uint64_t plen = 0;
  in.read(reinterpret_cast<char*>(&plen), 8);
  if (plen != j.at("n_param").get<std::uint64_t>())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  for (Tensor* p : model.params()) {
    in.read(reinterpret_cast<char*>(p->data.data()),
            static_cast<std::streamsize>(p->numel() * sizeof(double)));
  }
  if (!in) throw std::runtime_error("checkpoint: truncated parameter blob");
  return model;
}

} // namespace condflow

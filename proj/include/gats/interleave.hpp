#pragma once

// Proportional interleaving of K GATS layers with component models of depths
// L_1..L_M: l_{k,i} = min(max(1, floor(k * L_i / K)), L_i - 1), k 1-based.

#include <cstddef>
#include <string>
#include <vector>

#include "gats/tensor.hpp"

namespace gats {

struct InterleavePlan {
  std::size_t gats_layers = 0;                       // K
  std::vector<std::vector<std::size_t>> insert_at;   // [K][M], 1-based layers
};

inline InterleavePlan build_plan(std::size_t gats_layers,
                                 const std::vector<std::size_t>& layer_counts) {
  if (gats_layers < 1) throw Error("config", "build_plan: K must be >= 1");
  for (std::size_t l : layer_counts)
    if (l < 2)
      throw Error("config",
                  "build_plan: component depth " + std::to_string(l) +
                      " < 2, no interior insertion point exists");
  InterleavePlan plan;
  plan.gats_layers = gats_layers;
  plan.insert_at.resize(gats_layers);
  for (std::size_t k = 1; k <= gats_layers; ++k) {
    auto& row = plan.insert_at[k - 1];
    row.reserve(layer_counts.size());
    for (std::size_t li : layer_counts) {
      std::size_t raw = (k * li) / gats_layers;  // floor(k * L_i / K)
      std::size_t v = raw < 1 ? 1 : raw;
      if (v > li - 1) v = li - 1;
      row.push_back(v);
    }
  }
  return plan;
}

}  // namespace gats

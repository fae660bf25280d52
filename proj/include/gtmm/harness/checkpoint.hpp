#pragma once

// Checkpoint file: one JSON header line
//   {"format": "gtmm-checkpoint-1", "config": {...}, "step": n,
//    "manifest": [{"name": ..., "shape": [...]}, ...]}
// followed by every parameter as little-endian float32, in manifest order.

#include "gtmm/tensor/parameters.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace gtmm {

struct Checkpoint {
  nlohmann::json config;
  Index step = 0;
  std::vector<std::pair<std::string, Shape>> manifest;
  std::vector<float> values;
};

template <typename S>
Checkpoint make_checkpoint(const ParameterStore<S>& store, const nlohmann::json& config, Index step);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into a store whose names and shapes must match
/// the manifest exactly.
template <typename S>
void apply_checkpoint(const Checkpoint& ckpt, ParameterStore<S>& store);

}  // namespace gtmm

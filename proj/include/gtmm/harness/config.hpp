#pragma once

#include "gtmm/model/model.hpp"
#include "gtmm/tasks/tasks.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>

namespace gtmm {

enum class Precision { f32, f64 };

struct TrainConfig {
  MemoryKind model = MemoryKind::introspection;
  TaskConfig task;
  Index latent = 8;
  Index heads = 5;
  Index slots = 0;  // 0: sequence length, or 5x that for lru
  Index hidden = 64;
  Index features = 64;
  Index head_hidden = 64;
  CodecKind codec = CodecKind::small_conv;
  double lr = 1e-3;
  double clip_norm = 10.0;  // global gradient norm cap, 0 disables
  Index batch = 10;
  Index steps = 3000;
  std::uint64_t seed = 1;
  std::optional<std::uint64_t> data_seed;  // fixes the image set across seeds and replicas
  Index replica = 0;
  Index eval_every = 100;
  Index eval_batches = 1;
  Index checkpoint_every = 0;  // 0: final checkpoint only
  std::string dataset = "synthetic";
  Index per_class = 50;
  Precision precision = Precision::f32;
  bool wall_clock = true;
  std::string out;  // run directory, echoed in config.json only

  Index resolved_slots() const;
  /// Seed for initialization, sampling order and noise; mixes in the replica id.
  std::uint64_t run_seed() const;
  std::uint64_t dataset_seed() const { return data_seed.value_or(seed); }
  ModelConfig model_config() const;
  void validate() const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

std::string to_string(Precision p);
Precision parse_precision(const std::string& name);
std::string codec_name(CodecKind k);
CodecKind parse_codec(const std::string& name);

/// Image set for a config: the synthetic glyph source (alphabets for
/// one-shot) or IDX files from a directory. Empty for rotation.
DatasetSource build_dataset(const TrainConfig& cfg);

}  // namespace gtmm

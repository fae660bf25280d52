#include "gtmm/harness/config.hpp"

#include "gtmm/harness/rng.hpp"

#include <stdexcept>

namespace gtmm {

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw std::invalid_argument("precision must be f32 or f64, got '" + name + "'");
}

std::string codec_name(CodecKind k) { return k == CodecKind::mlp ? "mlp" : "small-conv"; }

CodecKind parse_codec(const std::string& name) {
  if (name == "mlp") return CodecKind::mlp;
  if (name == "small-conv") return CodecKind::small_conv;
  throw std::invalid_argument("codec must be mlp or small-conv, got '" + name + "'");
}

Index TrainConfig::resolved_slots() const {
  if (slots > 0) return slots;
  return model == MemoryKind::lru ? 5 * task.length() : task.length();
}

std::uint64_t TrainConfig::run_seed() const {
  return stream_key(seed, "replica", static_cast<std::uint64_t>(replica));
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  m.memory.kind = model;
  m.memory.latent = latent;
  m.memory.context = task.action_width();
  m.memory.features = features;
  m.memory.hidden = hidden;
  m.memory.heads = heads;
  m.memory.slots = resolved_slots();
  m.encoder.kind = codec;
  m.encoder.image = task.image;
  m.encoder.features = features;
  m.head_hidden = head_hidden;
  return m;
}

void TrainConfig::validate() const {
  task.validate();
  if (batch < 1) throw std::invalid_argument("batch must be at least 1");
  if (steps < 1) throw std::invalid_argument("steps must be at least 1");
  if (eval_every < 1 || eval_batches < 1) throw std::invalid_argument("eval cadence and batches must be positive");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint interval must be >= 0");
  if (!(lr >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
  if (!(clip_norm >= 0.0)) throw std::invalid_argument("clip norm must be >= 0");
  if (replica < 0) throw std::invalid_argument("replica id must be >= 0");
  if (per_class < 1) throw std::invalid_argument("per-class count must be positive");
  model_config().validate();
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["model"] = to_string(model);
  j["task"] = {{"kind", to_string(task.kind)},
               {"l", task.l},
               {"k", task.k},
               {"grid", task.grid},
               {"map_steps", task.map_steps},
               {"rotation_steps", task.rotation_steps},
               {"panorama", task.panorama},
               {"image", {task.image.channels, task.image.height, task.image.width}},
               {"split", task.split == Split::train ? "train" : "test"}};
  j["latent"] = latent;
  j["heads"] = heads;
  j["slots"] = slots;
  j["resolved_slots"] = resolved_slots();
  j["hidden"] = hidden;
  j["features"] = features;
  j["head_hidden"] = head_hidden;
  j["codec"] = codec_name(codec);
  j["lr"] = lr;
  j["clip_norm"] = clip_norm;
  j["batch"] = batch;
  j["steps"] = steps;
  j["seed"] = seed;
  j["data_seed"] = data_seed ? nlohmann::json(*data_seed) : nlohmann::json(nullptr);
  j["replica"] = replica;
  j["eval_every"] = eval_every;
  j["eval_batches"] = eval_batches;
  j["checkpoint_every"] = checkpoint_every;
  j["dataset"] = dataset;
  j["per_class"] = per_class;
  j["precision"] = to_string(precision);
  j["wall_clock"] = wall_clock;
  j["out"] = out;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.model = parse_memory_kind(j.at("model").get<std::string>());
  const auto& t = j.at("task");
  c.task.kind = parse_task_kind(t.at("kind").get<std::string>());
  c.task.l = t.at("l").get<Index>();
  c.task.k = t.at("k").get<Index>();
  c.task.grid = t.at("grid").get<Index>();
  c.task.map_steps = t.at("map_steps").get<Index>();
  c.task.rotation_steps = t.at("rotation_steps").get<Index>();
  c.task.panorama = t.at("panorama").get<Index>();
  const auto img = t.at("image").get<std::vector<Index>>();
  if (img.size() != 3) throw std::invalid_argument("config: image must be [channels, height, width]");
  c.task.image = {img[0], img[1], img[2]};
  c.task.split = t.at("split").get<std::string>() == "test" ? Split::test : Split::train;
  c.latent = j.at("latent").get<Index>();
  c.heads = j.at("heads").get<Index>();
  c.slots = j.at("slots").get<Index>();
  c.hidden = j.at("hidden").get<Index>();
  c.features = j.at("features").get<Index>();
  c.head_hidden = j.at("head_hidden").get<Index>();
  c.codec = parse_codec(j.at("codec").get<std::string>());
  c.lr = j.at("lr").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.batch = j.at("batch").get<Index>();
  c.steps = j.at("steps").get<Index>();
  c.seed = j.at("seed").get<std::uint64_t>();
  if (!j.at("data_seed").is_null()) c.data_seed = j.at("data_seed").get<std::uint64_t>();
  c.replica = j.at("replica").get<Index>();
  c.eval_every = j.at("eval_every").get<Index>();
  c.eval_batches = j.at("eval_batches").get<Index>();
  c.checkpoint_every = j.at("checkpoint_every").get<Index>();
  c.dataset = j.at("dataset").get<std::string>();
  c.per_class = j.at("per_class").get<Index>();
  c.precision = parse_precision(j.at("precision").get<std::string>());
  c.wall_clock = j.at("wall_clock").get<bool>();
  c.out = j.value("out", "");
  return c;
}

DatasetSource build_dataset(const TrainConfig& cfg) {
  if (!needs_dataset(cfg.task.kind)) {
    DatasetSource empty;
    empty.dims = cfg.task.image;
    return empty;
  }
  if (cfg.dataset == "synthetic") {
    if (cfg.task.kind == TaskKind::one_shot) {
      return synth_alphabets(10, 10, cfg.per_class, cfg.task.image, cfg.dataset_seed());
    }
    return synth_glyphs(10, cfg.per_class, cfg.task.image, cfg.dataset_seed());
  }
  DatasetSource ds = load_idx_dir(cfg.dataset, cfg.task.image);
  if (cfg.task.kind == TaskKind::one_shot) {
    // IDX data has no alphabets; hold out the last three classes.
    for (Index c = std::max<Index>(0, ds.classes() - 3); c < ds.classes(); ++c) ds.holdout[static_cast<std::size_t>(c)] = true;
  }
  return ds;
}

}  // namespace gtmm

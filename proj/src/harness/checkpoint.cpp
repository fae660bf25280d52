#include "gtmm/harness/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace gtmm {

namespace {

constexpr const char* kFormat = "gtmm-checkpoint-1";

void put_le(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_le(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t{static_cast<unsigned char>(p[i])} << (8 * i);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

template <typename S>
Checkpoint make_checkpoint(const ParameterStore<S>& store, const nlohmann::json& config, Index step) {
  Checkpoint c;
  c.config = config;
  c.step = step;
  c.values.reserve(static_cast<std::size_t>(store.total_size()));
  for (const auto& e : store.entries()) {
    c.manifest.emplace_back(e.name, e.tensor.shape());
    for (Index i = 0; i < e.tensor.size(); ++i) c.values.push_back(static_cast<float>(e.tensor.value()[i]));
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header{{"format", kFormat}, {"config", ckpt.config}, {"step", ckpt.step}};
  header["manifest"] = nlohmann::json::array();
  for (const auto& [name, shape] : ckpt.manifest) header["manifest"].push_back({{"name", name}, {"shape", shape}});
  std::string payload;
  payload.reserve(ckpt.values.size() * 4);
  for (float v : ckpt.values) put_le(payload, v);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << header.dump() << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": missing checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed checkpoint header: " + e.what());
  }
  if (header.value("format", "") != kFormat) throw std::runtime_error(path.string() + ": not a gtmm checkpoint");
  Checkpoint c;
  c.config = header.at("config");
  c.step = header.at("step").get<Index>();
  std::size_t expected = 0;
  for (const auto& m : header.at("manifest")) {
    Shape shape = m.at("shape").get<Shape>();
    expected += static_cast<std::size_t>(numel(shape));
    c.manifest.emplace_back(m.at("name").get<std::string>(), std::move(shape));
  }
  const std::string payload{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (payload.size() != expected * 4) {
    throw std::runtime_error(path.string() + ": payload holds " + std::to_string(payload.size()) + " bytes, expected " +
                             std::to_string(expected * 4) + " (truncated or corrupt)");
  }
  c.values.resize(expected);
  for (std::size_t i = 0; i < expected; ++i) c.values[i] = get_le(payload.data() + 4 * i);
  return c;
}

template <typename S>
void apply_checkpoint(const Checkpoint& ckpt, ParameterStore<S>& store) {
  const auto& entries = store.entries();
  if (entries.size() != ckpt.manifest.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(ckpt.manifest.size()) + " tensors, model has " +
                             std::to_string(entries.size()));
  }
  std::size_t at = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, shape] = ckpt.manifest[i];
    if (entries[i].name != name || entries[i].tensor.shape() != shape) {
      throw std::runtime_error("checkpoint tensor " + name + " " + to_string(shape) + " does not match model tensor " +
                               entries[i].name + " " + to_string(entries[i].tensor.shape()));
    }
  }
  for (const auto& e : entries) {
    Tensor<S> t = e.tensor;
    Vec<S>& v = t.mutable_value();
    for (Index j = 0; j < v.size(); ++j) v[j] = static_cast<S>(ckpt.values[at++]);
  }
}

template Checkpoint make_checkpoint<float>(const ParameterStore<float>&, const nlohmann::json&, Index);
template Checkpoint make_checkpoint<double>(const ParameterStore<double>&, const nlohmann::json&, Index);
template void apply_checkpoint<float>(const Checkpoint&, ParameterStore<float>&);
template void apply_checkpoint<double>(const Checkpoint&, ParameterStore<double>&);

}  // namespace gtmm

#include "gtmm/tasks/tasks.hpp"

#include "gtmm/harness/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace gtmm {

std::span<const float> DatasetSource::image(Index i) const {
  const Index P = dims.pixels();
  if (i < 0 || i >= size()) throw std::out_of_range("image index " + std::to_string(i) + " out of range");
  return {pixels.data() + i * P, static_cast<std::size_t>(P)};
}

void DatasetSource::index_classes() {
  if (static_cast<Index>(pixels.size()) != size() * dims.pixels()) {
    throw std::invalid_argument("dataset: pixel count does not match labels x dims");
  }
  int top = -1;
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("dataset: negative label");
    top = std::max(top, l);
  }
  by_class.assign(static_cast<std::size_t>(top + 1), {});
  for (Index i = 0; i < size(); ++i) by_class[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(i);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) throw std::invalid_argument("dataset: class " + std::to_string(c) + " has no images");
  }
  holdout.resize(by_class.size(), false);
}

std::vector<int> DatasetSource::classes_in(std::optional<bool> holdout_flag) const {
  std::vector<int> out;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (!holdout_flag || holdout[c] == *holdout_flag) out.push_back(static_cast<int>(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX ingestion.

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  if (at + 4 > b.size()) throw std::runtime_error("IDX file truncated in header");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

}  // namespace

std::vector<float> area_resize(std::span<const float> src, Index src_h, Index src_w, Index dst_h, Index dst_w) {
  if (static_cast<Index>(src.size()) != src_h * src_w) throw std::invalid_argument("area_resize: size mismatch");
  if (dst_h == src_h && dst_w == src_w) return {src.begin(), src.end()};
  const double sy = static_cast<double>(src_h) / static_cast<double>(dst_h);
  const double sx = static_cast<double>(src_w) / static_cast<double>(dst_w);
  std::vector<float> out(static_cast<std::size_t>(dst_h * dst_w));
  for (Index i = 0; i < dst_h; ++i) {
    const double y0 = i * sy, y1 = (i + 1) * sy;
    for (Index j = 0; j < dst_w; ++j) {
      const double x0 = j * sx, x1 = (j + 1) * sx;
      double acc = 0.0;
      for (Index y = static_cast<Index>(y0); y < src_h && y < y1; ++y) {
        const double wy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
        for (Index x = static_cast<Index>(x0); x < src_w && x < x1; ++x) {
          const double wx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
          acc += wy * wx * src[static_cast<std::size_t>(y * src_w + x)];
        }
      }
      out[static_cast<std::size_t>(i * dst_w + j)] = static_cast<float>(acc / (sy * sx));
    }
  }
  return out;
}

DatasetSource load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::optional<ImageDims> target) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  if (be32(img, 0) != 0x00000803u) throw std::runtime_error(images.string() + ": bad IDX image magic");
  if (be32(lab, 0) != 0x00000801u) throw std::runtime_error(labels.string() + ": bad IDX label magic");
  const std::size_t n = be32(img, 4), h = be32(img, 8), w = be32(img, 12);
  const std::size_t n_labels = be32(lab, 4);
  if (n != n_labels) {
    throw std::runtime_error("IDX image count " + std::to_string(n) + " != label count " + std::to_string(n_labels));
  }
  if (h == 0 || w == 0) throw std::runtime_error("IDX images have zero size");
  if (img.size() < 16 + n * h * w) throw std::runtime_error(images.string() + ": truncated payload");
  if (lab.size() < 8 + n) throw std::runtime_error(labels.string() + ": truncated payload");

  DatasetSource ds;
  ds.dims = target.value_or(ImageDims{1, static_cast<Index>(h), static_cast<Index>(w)});
  if (ds.dims.channels != 1) throw std::invalid_argument("IDX images are single channel");
  ds.labels.resize(n);
  ds.pixels.reserve(n * static_cast<std::size_t>(ds.dims.pixels()));
  std::vector<float> raw(h * w);
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    for (std::size_t p = 0; p < h * w; ++p) raw[p] = static_cast<float>(img[16 + i * h * w + p]) / 255.0f;
    const auto scaled = area_resize(raw, static_cast<Index>(h), static_cast<Index>(w), ds.dims.height, ds.dims.width);
    ds.pixels.insert(ds.pixels.end(), scaled.begin(), scaled.end());
  }
  ds.index_classes();
  return ds;
}

DatasetSource load_idx_dir(const std::filesystem::path& dir, std::optional<ImageDims> target) {
  return load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", target);
}

// ---------------------------------------------------------------------------
// Synthetic glyphs.

namespace {

using Point = std::array<double, 2>;  // (row, col) in pixel-centre coordinates

std::vector<Point> glyph_template(Index cls, ImageDims dims, std::uint64_t seed) {
  Rng rng = seeded_rng(seed, "glyph-class", static_cast<std::uint64_t>(cls));
  const double margin = 1.5;
  const double hi_r = static_cast<double>(dims.height) - 1.0 - margin;
  const double hi_c = static_cast<double>(dims.width) - 1.0 - margin;
  const double min_len = 0.8 * static_cast<double>(std::min(dims.height, dims.width));
  std::vector<Point> pts(4);
  for (;;) {
    for (auto& p : pts) p = {rng.uniform(margin, hi_r), rng.uniform(margin, hi_c)};
    double len = 0.0;
    bool short_segment = false;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      const double d = std::hypot(pts[i][0] - pts[i - 1][0], pts[i][1] - pts[i - 1][1]);
      short_segment |= d < 1.0;
      len += d;
    }
    if (len >= min_len && !short_segment) return pts;
  }
}

double segment_distance(const Point& p, const Point& a, const Point& b) {
  const double vr = b[0] - a[0], vc = b[1] - a[1];
  const double len2 = vr * vr + vc * vc;
  double t = len2 > 0 ? ((p[0] - a[0]) * vr + (p[1] - a[1]) * vc) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p[0] - (a[0] + t * vr), p[1] - (a[1] + t * vc));
}

}  // namespace

std::vector<float> render_glyph(Index cls, Index instance, ImageDims dims, std::uint64_t seed) {
  if (dims.height < 6 || dims.width < 6 || dims.channels != 1) {
    throw std::invalid_argument("synthetic glyphs need a single channel of at least 6 x 6");
  }
  const auto pts = glyph_template(cls, dims, seed);
  Rng rng = seeded_rng(seed, "glyph-instance", static_cast<std::uint64_t>(cls) * 1000003u +
                                                   static_cast<std::uint64_t>(instance));
  const double dr = static_cast<double>(rng.uniform_index(3) - 1);
  const double dc = static_cast<double>(rng.uniform_index(3) - 1);
  std::vector<float> img(static_cast<std::size_t>(dims.pixels()));
  for (Index r = 0; r < dims.height; ++r) {
    for (Index c = 0; c < dims.width; ++c) {
      const Point p{static_cast<double>(r) - dr, static_cast<double>(c) - dc};
      double d = 1e9;
      for (std::size_t i = 1; i < pts.size(); ++i) d = std::min(d, segment_distance(p, pts[i - 1], pts[i]));
      // Anti-aliased stroke: full ink within half a pixel, linear falloff over the next.
      const double ink = std::clamp(1.5 - d, 0.0, 1.0);
      const double v = ink + 0.05 * rng.normal();
      img[static_cast<std::size_t>(r * dims.width + c)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

DatasetSource synth_glyphs(Index n_classes, Index per_class, ImageDims dims, std::uint64_t seed) {
  if (n_classes < 1 || per_class < 1) throw std::invalid_argument("synth_glyphs: counts must be positive");
  DatasetSource ds;
  ds.dims = dims;
  ds.pixels.reserve(static_cast<std::size_t>(n_classes * per_class * dims.pixels()));
  for (Index c = 0; c < n_classes; ++c) {
    for (Index i = 0; i < per_class; ++i) {
      const auto img = render_glyph(c, i, dims, seed);
      ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  ds.index_classes();
  return ds;
}

DatasetSource synth_alphabets(Index alphabets, Index glyphs, Index per_class, ImageDims dims, std::uint64_t seed,
                              Index holdout_per_alphabet) {
  if (glyphs < 4) throw std::invalid_argument("synth_alphabets: alphabets need at least 4 glyphs");
  if (holdout_per_alphabet < 1 || holdout_per_alphabet >= glyphs) {
    throw std::invalid_argument("synth_alphabets: holdout must leave training glyphs");
  }
  DatasetSource ds = synth_glyphs(alphabets * glyphs, per_class, dims, seed);
  for (Index a = 0; a < alphabets; ++a) {
    for (Index g = glyphs - holdout_per_alphabet; g < glyphs; ++g) ds.holdout[static_cast<std::size_t>(a * glyphs + g)] = true;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Task configuration.

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::perfect_recall: return "perfect-recall";
    case TaskKind::parity_recall: return "parity-recall";
    case TaskKind::one_shot: return "one-shot";
    case TaskKind::dynamic_dependency: return "dynamic-dependency";
    case TaskKind::similarity_recall: return "similarity-recall";
    case TaskKind::mnist_map: return "mnist-map";
    case TaskKind::rotation: return "rotation";
  }
  return "unknown";
}

TaskKind parse_task_kind(const std::string& name) {
  for (TaskKind k : {TaskKind::perfect_recall, TaskKind::parity_recall, TaskKind::one_shot,
                     TaskKind::dynamic_dependency, TaskKind::similarity_recall, TaskKind::mnist_map,
                     TaskKind::rotation}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown task '" + name + "'");
}

bool needs_dataset(TaskKind kind) { return kind != TaskKind::rotation; }

bool is_copy_task(TaskKind kind) {
  return kind == TaskKind::perfect_recall || kind == TaskKind::one_shot || kind == TaskKind::dynamic_dependency ||
         kind == TaskKind::similarity_recall;
}

Index TaskConfig::length() const {
  switch (kind) {
    case TaskKind::mnist_map: return map_steps + 1;
    case TaskKind::rotation: return rotation_steps;
    default: return l + k;
  }
}

Index TaskConfig::action_width() const {
  switch (kind) {
    case TaskKind::mnist_map: return 4;
    case TaskKind::rotation: return 1;
    default: return 0;
  }
}

void TaskConfig::validate() const {
  switch (kind) {
    case TaskKind::mnist_map:
      if (grid < 2 || map_steps < 1) throw std::invalid_argument("map task needs grid >= 2 and steps >= 1");
      break;
    case TaskKind::rotation:
      if (rotation_steps < 2) throw std::invalid_argument("rotation needs at least 2 steps");
      if (image.channels != 1) throw std::invalid_argument("rotation frames are single channel");
      if (panorama < 4 * image.width) throw std::invalid_argument("panorama must be at least 4x the frame width");
      break;
    default:
      if (k < 1 || k > l) throw std::invalid_argument("recall tasks need 1 <= k <= l");
      if (kind == TaskKind::dynamic_dependency && l < 10) {
        throw std::invalid_argument("dynamic dependency needs l >= 10 so every digit is a valid address");
      }
      if (kind == TaskKind::similarity_recall && l <= k) throw std::invalid_argument("similarity recall needs l > k");
  }
}

std::span<const float> SequenceSample::frame(Index t) const {
  const Index P = dims.pixels();
  return {frames.data() + t * P, static_cast<std::size_t>(P)};
}

std::span<const float> SequenceSample::action(Index t) const {
  return {actions.data() + t * action_width, static_cast<std::size_t>(action_width)};
}

// ---------------------------------------------------------------------------
// Generators.

namespace {

SequenceSample blank(const TaskConfig& cfg, ImageDims dims, std::uint64_t seed) {
  cfg.validate();
  SequenceSample s;
  s.task = cfg.kind;
  s.seed = seed;
  s.dims = dims;
  s.T = cfg.length();
  s.action_width = cfg.action_width();
  s.frames.reserve(static_cast<std::size_t>(s.T * dims.pixels()));
  s.actions.assign(static_cast<std::size_t>(s.T * s.action_width), 0.0f);
  s.labels.reserve(static_cast<std::size_t>(s.T));
  s.sources.reserve(static_cast<std::size_t>(s.T));
  return s;
}

void check_dataset(const DatasetSource& ds, const TaskConfig& cfg) {
  if (ds.size() == 0) throw std::invalid_argument("empty dataset");
  if (!(ds.dims == cfg.image)) throw std::invalid_argument("dataset dims do not match task image dims");
}

// Class uniformly from `classes`, then an instance of it uniformly.
Index draw_instance(const DatasetSource& ds, const std::vector<int>& classes, Rng& rng) {
  const int c = classes[static_cast<std::size_t>(rng.uniform_index(static_cast<std::int64_t>(classes.size())))];
  const auto& pool = ds.by_class[static_cast<std::size_t>(c)];
  return pool[static_cast<std::size_t>(rng.uniform_index(static_cast<std::int64_t>(pool.size())))];
}

Index draw_of_class(const DatasetSource& ds, int cls, Rng& rng) {
  if (cls < 0 || cls >= ds.classes()) throw std::invalid_argument("class " + std::to_string(cls) + " not in dataset");
  const auto& pool = ds.by_class[static_cast<std::size_t>(cls)];
  return pool[static_cast<std::size_t>(rng.uniform_index(static_cast<std::int64_t>(pool.size())))];
}

void push_image(SequenceSample& s, const DatasetSource& ds, Index idx, int source = -1) {
  const auto img = ds.image(idx);
  s.frames.insert(s.frames.end(), img.begin(), img.end());
  s.labels.push_back(ds.labels[static_cast<std::size_t>(idx)]);
  s.sources.push_back(source);
}

void push_copy(SequenceSample& s, Index from) {
  const Index P = s.dims.pixels();
  const std::size_t at = s.frames.size();
  s.frames.resize(at + static_cast<std::size_t>(P));
  std::copy_n(s.frames.begin() + static_cast<std::ptrdiff_t>(from * P), P, s.frames.begin() + static_cast<std::ptrdiff_t>(at));
  s.labels.push_back(s.labels[static_cast<std::size_t>(from)]);
  s.sources.push_back(static_cast<int>(from));
}

void require_digits(const DatasetSource& ds) {
  if (ds.classes() < 10) throw std::invalid_argument("this task needs digit classes 0-9");
}

SequenceSample recall_prefix(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed,
                             const std::vector<int>& classes, Rng& rng) {
  check_dataset(ds, cfg);
  if (classes.empty()) throw std::invalid_argument("no classes available for this split");
  SequenceSample s = blank(cfg, ds.dims, seed);
  for (Index t = 0; t < cfg.l; ++t) push_image(s, ds, draw_instance(ds, classes, rng));
  return s;
}

}  // namespace

SequenceSample gen_perfect_recall(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed) {
  Rng rng = seeded_rng(seed, "perfect-recall", 0);
  SequenceSample s = recall_prefix(ds, cfg, seed, ds.classes_in(std::nullopt), rng);
  for (Index j = 0; j < cfg.k; ++j) push_copy(s, j);
  return s;
}

int parity_label(int digit) { return digit % 2 == 0 ? 1 : 0; }

SequenceSample gen_parity_recall(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed) {
  require_digits(ds);
  Rng rng = seeded_rng(seed, "parity-recall", 0);
  SequenceSample s = recall_prefix(ds, cfg, seed, ds.classes_in(std::nullopt), rng);
  for (Index j = 0; j < cfg.k; ++j) push_image(s, ds, draw_of_class(ds, parity_label(s.labels[static_cast<std::size_t>(j)]), rng));
  return s;
}

SequenceSample gen_one_shot(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed) {
  Rng rng = seeded_rng(seed, "one-shot", 0);
  const auto classes = ds.classes_in(cfg.split == Split::test);
  SequenceSample s = recall_prefix(ds, cfg, seed, classes, rng);
  for (Index j = 0; j < cfg.k; ++j) push_copy(s, j);
  return s;
}

SequenceSample gen_dynamic_dependency(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed) {
  require_digits(ds);
  Rng rng = seeded_rng(seed, "dynamic-dependency", 0);
  std::vector<int> digits(10);
  for (int d = 0; d < 10; ++d) digits[static_cast<std::size_t>(d)] = d;
  SequenceSample s = recall_prefix(ds, cfg, seed, digits, rng);
  for (Index j = 0; j < cfg.k; ++j) push_copy(s, s.labels.back());
  return s;
}

SequenceSample gen_similarity_recall(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed) {
  Rng rng = seeded_rng(seed, "similarity-recall", 0);
  SequenceSample s = recall_prefix(ds, cfg, seed, ds.classes_in(std::nullopt), rng);
  s.offset = rng.uniform_index(cfg.l - cfg.k);  // 1-based r in [1, l - k] minus one
  for (Index j = 0; j < cfg.k; ++j) push_copy(s, s.offset + j);
  return s;
}

namespace {

constexpr std::array<std::array<int, 2>, 4> kMoves{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};  // up, down, left, right

}  // namespace

SequenceSample gen_mnist_map(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed) {
  require_digits(ds);
  check_dataset(ds, cfg);
  Rng rng = seeded_rng(seed, "mnist-map", 0);
  SequenceSample s = blank(cfg, ds.dims, seed);
  const Index g = cfg.grid;
  const auto classes = ds.classes_in(std::nullopt);
  std::vector<Index> cell_image(static_cast<std::size_t>(g * g));
  for (auto& c : cell_image) c = draw_instance(ds, classes, rng);
  int r = static_cast<int>(rng.uniform_index(g)), c = static_cast<int>(rng.uniform_index(g));
  for (Index t = 0; t < s.T; ++t) {
    if (t > 0) {
      int m = 0;
      for (;;) {
        m = static_cast<int>(rng.uniform_index(4));
        const int nr = r + kMoves[static_cast<std::size_t>(m)][0], nc = c + kMoves[static_cast<std::size_t>(m)][1];
        if (nr >= 0 && nr < g && nc >= 0 && nc < g) break;
      }
      r += kMoves[static_cast<std::size_t>(m)][0];
      c += kMoves[static_cast<std::size_t>(m)][1];
      s.actions[static_cast<std::size_t>(t * 4 + m)] = 1.0f;
    }
    push_image(s, ds, cell_image[static_cast<std::size_t>(r * g + c)]);
    s.cells.push_back(r);
    s.cells.push_back(c);
  }
  return s;
}

double rotation_angle(Index t, Index T) {
  const double u = static_cast<double>(t) / static_cast<double>(T);
  return 4.0 * std::numbers::pi * u * u * (3.0 - 2.0 * u);
}

std::vector<float> render_view(std::span<const float> panorama, Index H, Index P, Index W, double angle) {
  const double turns = angle / (2.0 * std::numbers::pi);
  double start = (turns - std::floor(turns)) * static_cast<double>(P);
  std::vector<float> out(static_cast<std::size_t>(H * W));
  for (Index col = 0; col < W; ++col) {
    const double x = start + static_cast<double>(col);
    const double base = std::floor(x);
    const double frac = x - base;
    const Index x0 = static_cast<Index>(base) % P;
    const Index x1 = (x0 + 1) % P;
    for (Index row = 0; row < H; ++row) {
      const double a = panorama[static_cast<std::size_t>(row * P + x0)];
      const double b = panorama[static_cast<std::size_t>(row * P + x1)];
      out[static_cast<std::size_t>(row * W + col)] = static_cast<float>((1.0 - frac) * a + frac * b);
    }
  }
  return out;
}

SequenceSample gen_rotation_standin(const TaskConfig& cfg, std::uint64_t seed) {
  Rng rng = seeded_rng(seed, "rotation", 0);
  const Index H = cfg.image.height, W = cfg.image.width, P = cfg.panorama;
  SequenceSample s = blank(cfg, cfg.image, seed);

  // Smoothed noise texture, circular along columns.
  std::vector<double> noise(static_cast<std::size_t>(H * P));
  for (auto& v : noise) v = rng.uniform();
  std::vector<float> pano(static_cast<std::size_t>(H * P));
  for (Index row = 0; row < H; ++row) {
    for (Index col = 0; col < P; ++col) {
      double acc = 0.0;
      int n = 0;
      for (Index dr = -1; dr <= 1; ++dr) {
        const Index rr = row + dr;
        if (rr < 0 || rr >= H) continue;
        for (Index dc = -1; dc <= 1; ++dc) {
          acc += noise[static_cast<std::size_t>(rr * P + (col + dc + P) % P)];
          ++n;
        }
      }
      pano[static_cast<std::size_t>(row * P + col)] = static_cast<float>(0.5 * acc / n);
    }
  }
  // Two landmark bars.
  for (int bar = 0; bar < 2; ++bar) {
    const Index col = rng.uniform_index(P);
    const Index top = rng.uniform_index(H / 2);
    for (Index row = top; row < H; ++row) {
      pano[static_cast<std::size_t>(row * P + col)] = 1.0f;
      pano[static_cast<std::size_t>(row * P + (col + 1) % P)] = 1.0f;
    }
  }

  double prev = 0.0;
  for (Index t = 0; t < s.T; ++t) {
    const double theta = rotation_angle(t, s.T);
    const auto view = render_view(pano, H, P, W, theta);
    s.frames.insert(s.frames.end(), view.begin(), view.end());
    s.actions[static_cast<std::size_t>(t)] = static_cast<float>(t == 0 ? 0.0 : theta - prev);
    s.angles.push_back(theta);
    s.labels.push_back(-1);
    s.sources.push_back(-1);
    prev = theta;
  }
  return s;
}

SequenceSample generate_sample(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed) {
  switch (cfg.kind) {
    case TaskKind::perfect_recall: return gen_perfect_recall(ds, cfg, seed);
    case TaskKind::parity_recall: return gen_parity_recall(ds, cfg, seed);
    case TaskKind::one_shot: return gen_one_shot(ds, cfg, seed);
    case TaskKind::dynamic_dependency: return gen_dynamic_dependency(ds, cfg, seed);
    case TaskKind::similarity_recall: return gen_similarity_recall(ds, cfg, seed);
    case TaskKind::mnist_map: return gen_mnist_map(ds, cfg, seed);
    case TaskKind::rotation: return gen_rotation_standin(cfg, seed);
  }
  throw std::logic_error("unreachable");
}

// ---------------------------------------------------------------------------
// Validation.

namespace {

bool same_frame(const SequenceSample& s, Index a, Index b) {
  const auto fa = s.frame(a), fb = s.frame(b);
  return std::memcmp(fa.data(), fb.data(), fa.size_bytes()) == 0;
}

std::string check_copy(const SequenceSample& s, Index t, Index from) {
  if (s.sources[static_cast<std::size_t>(t)] != from) {
    return "frame " + std::to_string(t) + " records source " + std::to_string(s.sources[static_cast<std::size_t>(t)]) +
           ", expected " + std::to_string(from);
  }
  if (!same_frame(s, t, from)) return "frame " + std::to_string(t) + " is not a copy of frame " + std::to_string(from);
  if (s.labels[static_cast<std::size_t>(t)] != s.labels[static_cast<std::size_t>(from)]) {
    return "frame " + std::to_string(t) + " label differs from its source";
  }
  return {};
}

}  // namespace

std::string validate_sample(const SequenceSample& s, const TaskConfig& cfg) {
  const Index T = cfg.length(), P = s.dims.pixels();
  if (s.T != T) return "length " + std::to_string(s.T) + " != " + std::to_string(T);
  if (static_cast<Index>(s.frames.size()) != T * P) return "frame payload has the wrong size";
  if (static_cast<Index>(s.actions.size()) != T * cfg.action_width()) return "action payload has the wrong size";
  if (static_cast<Index>(s.labels.size()) != T) return "label count mismatch";
  for (float v : s.frames) {
    if (!(v >= 0.0f && v <= 1.0f)) return "pixel outside [0, 1]";
  }
  const auto label = [&](Index t) { return s.labels[static_cast<std::size_t>(t)]; };
  switch (cfg.kind) {
    case TaskKind::perfect_recall:
    case TaskKind::one_shot:
      for (Index j = 0; j < cfg.k; ++j) {
        if (auto e = check_copy(s, cfg.l + j, j); !e.empty()) return e;
      }
      return {};
    case TaskKind::dynamic_dependency: {
      Index from = label(cfg.l - 1);
      for (Index j = 0; j < cfg.k; ++j) {
        if (from < 0 || from >= cfg.l) return "address " + std::to_string(from) + " outside the prefix";
        if (auto e = check_copy(s, cfg.l + j, from); !e.empty()) return e;
        from = label(from);
      }
      return {};
    }
    case TaskKind::similarity_recall:
      if (s.offset < 0 || s.offset > cfg.l - cfg.k - 1) return "offset outside [0, l - k - 1]";
      for (Index j = 0; j < cfg.k; ++j) {
        if (auto e = check_copy(s, cfg.l + j, s.offset + j); !e.empty()) return e;
      }
      return {};
    case TaskKind::parity_recall:
      for (Index j = 0; j < cfg.k; ++j) {
        if (label(cfg.l + j) != parity_label(label(j))) {
          return "recall label at " + std::to_string(cfg.l + j) + " is not the parity of prefix label " +
                 std::to_string(label(j));
        }
      }
      return {};
    case TaskKind::mnist_map: {
      if (static_cast<Index>(s.cells.size()) != 2 * T) return "cell metadata size mismatch";
      const Index g = cfg.grid;
      std::vector<Index> first_visit(static_cast<std::size_t>(g * g), -1);
      int r = s.cells[0], c = s.cells[1];
      for (Index t = 0; t < T; ++t) {
        const auto a = s.action(t);
        if (t == 0) {
          if (std::any_of(a.begin(), a.end(), [](float v) { return v != 0.0f; })) return "first action is not zero";
        } else {
          int m = -1, hot = 0;
          for (int i = 0; i < 4; ++i) {
            if (a[static_cast<std::size_t>(i)] == 1.0f) m = i, ++hot;
            else if (a[static_cast<std::size_t>(i)] != 0.0f) return "action is not one-hot";
          }
          if (hot != 1) return "action is not one-hot";
          r += kMoves[static_cast<std::size_t>(m)][0];
          c += kMoves[static_cast<std::size_t>(m)][1];
        }
        if (r < 0 || r >= g || c < 0 || c >= g) return "walk leaves the grid at step " + std::to_string(t);
        if (s.cells[static_cast<std::size_t>(2 * t)] != r || s.cells[static_cast<std::size_t>(2 * t + 1)] != c) {
          return "replayed cell differs from recorded cell at step " + std::to_string(t);
        }
        Index& seen = first_visit[static_cast<std::size_t>(r * g + c)];
        if (seen < 0) seen = t;
        else if (!same_frame(s, t, seen)) return "revisited cell shows a different image at step " + std::to_string(t);
      }
      return {};
    }
    case TaskKind::rotation: {
      if (static_cast<Index>(s.angles.size()) != T) return "angle metadata size mismatch";
      for (Index t = 0; t < T; ++t) {
        const double expect = rotation_angle(t, T);
        if (std::abs(s.angles[static_cast<std::size_t>(t)] - expect) > 1e-12) return "angle schedule mismatch";
        const double d = t == 0 ? 0.0 : expect - rotation_angle(t - 1, T);
        if (std::abs(s.actions[static_cast<std::size_t>(t)] - d) > 1e-6) return "action is not the angle increment";
      }
      return {};
    }
  }
  return "unknown task";
}

// ---------------------------------------------------------------------------

void write_dataset(const std::filesystem::path& path, const TaskConfig& cfg, std::uint64_t seed,
                   const std::vector<SequenceSample>& samples) {
  nlohmann::json header{{"task", to_string(cfg.kind)},
                        {"config",
                         {{"l", cfg.l},
                          {"k", cfg.k},
                          {"grid", cfg.grid},
                          {"map_steps", cfg.map_steps},
                          {"rotation_steps", cfg.rotation_steps},
                          {"panorama", cfg.panorama},
                          {"split", cfg.split == Split::train ? "train" : "test"}}},
                        {"count", samples.size()},
                        {"seed", seed},
                        {"T", cfg.length()},
                        {"image", {cfg.image.channels, cfg.image.height, cfg.image.width}},
                        {"action_width", cfg.action_width()},
                        {"dtype", "float32-le"}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << header.dump() << '\n';
  const auto put = [&out](float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                           static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
    out.write(bytes, 4);
  };
  for (const auto& s : samples) {
    for (float v : s.frames) put(v);
    for (float v : s.actions) put(v);
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace gtmm

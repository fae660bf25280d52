#include "gtmm/tasks/tasks.hpp"
#include "gtmm/verify/verify.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

using namespace gtmm;
namespace fs = std::filesystem;

namespace {

const ImageDims kDims{1, 8, 8};

const DatasetSource& digits() {
  static const DatasetSource ds = synth_glyphs(10, 6, kDims, 17);
  return ds;
}

TaskConfig recall(TaskKind kind, Index l = 12, Index k = 4) {
  TaskConfig c;
  c.kind = kind;
  c.l = l;
  c.k = k;
  c.image = kDims;
  return c;
}

bool same(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xff));
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

struct IdxFiles {
  fs::path dir, images, labels;
};

// n images of h x w where image i has every byte equal to 10 * i; labels i % 10
IdxFiles make_idx(const std::string& tag, std::uint32_t n, std::uint32_t h, std::uint32_t w,
                  std::uint32_t image_magic = 0x803, std::uint32_t label_count = 0, std::size_t drop = 0) {
  IdxFiles f;
  f.dir = fs::temp_directory_path() / ("gtmm_idx_" + tag);
  fs::create_directories(f.dir);
  f.images = f.dir / "train-images-idx3-ubyte";
  f.labels = f.dir / "train-labels-idx1-ubyte";
  std::vector<unsigned char> img;
  put_be32(img, image_magic);
  put_be32(img, n);
  put_be32(img, h);
  put_be32(img, w);
  for (std::uint32_t i = 0; i < n; ++i) img.insert(img.end(), h * w, static_cast<unsigned char>(10 * i));
  img.resize(img.size() - drop);
  std::vector<unsigned char> lab;
  put_be32(lab, 0x801);
  put_be32(lab, label_count ? label_count : n);
  for (std::uint32_t i = 0; i < (label_count ? label_count : n); ++i) lab.push_back(static_cast<unsigned char>(i % 10));
  write_bytes(f.images, img);
  write_bytes(f.labels, lab);
  return f;
}

}  // namespace

TEST_CASE("perfect recall repeats the first k frames") {
  const TaskConfig cfg = recall(TaskKind::perfect_recall);
  const SequenceSample s = gen_perfect_recall(digits(), cfg, 5);
  REQUIRE(s.T == 16);
  for (Index j = 0; j < 4; ++j) {
    CHECK(same(s.frame(12 + j), s.frame(j)));
    CHECK(s.sources[static_cast<std::size_t>(12 + j)] == j);
  }
  CHECK(validate_sample(s, cfg).empty());
}

TEST_CASE("parity recall emits a digit of each prefix parity label") {
  const TaskConfig cfg = recall(TaskKind::parity_recall);
  const SequenceSample s = gen_parity_recall(digits(), cfg, 8);
  for (Index j = 0; j < 4; ++j) {
    const int want = parity_label(s.labels[static_cast<std::size_t>(j)]);
    CHECK(s.labels[static_cast<std::size_t>(12 + j)] == want);
  }
  CHECK(parity_label(4) == 1);
  CHECK(parity_label(7) == 0);
  CHECK(parity_label(0) == 1);
  CHECK(validate_sample(s, cfg).empty());
}

TEST_CASE("dynamic dependency follows the last label as an address") {
  const TaskConfig cfg = recall(TaskKind::dynamic_dependency, 12, 6);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SequenceSample s = gen_dynamic_dependency(digits(), cfg, seed);
    for (Index t = 12; t < 18; ++t) {
      const int addr = s.labels[static_cast<std::size_t>(t - 1)];
      CHECK(same(s.frame(t), s.frame(addr)));
    }
    CHECK(validate_sample(s, cfg).empty());
  }
}

TEST_CASE("similarity recall copies a contiguous block") {
  const TaskConfig cfg = recall(TaskKind::similarity_recall, 12, 4);
  std::set<Index> offsets;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const SequenceSample s = gen_similarity_recall(digits(), cfg, seed);
    REQUIRE(s.offset >= 0);
    REQUIRE(s.offset < 8);
    offsets.insert(s.offset);
    for (Index j = 0; j < 4; ++j) CHECK(same(s.frame(12 + j), s.frame(s.offset + j)));
  }
  CHECK(offsets.size() == 8);
}

TEST_CASE("one-shot splits use disjoint classes") {
  const DatasetSource ds = synth_alphabets(3, 6, 4, kDims, 2);
  TaskConfig cfg = recall(TaskKind::one_shot, 8, 3);
  std::set<int> train_labels, test_labels;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    cfg.split = Split::train;
    for (int l : gen_one_shot(ds, cfg, seed).labels) train_labels.insert(l);
    cfg.split = Split::test;
    const SequenceSample s = gen_one_shot(ds, cfg, seed);
    CHECK(validate_sample(s, cfg).empty());
    for (int l : s.labels) test_labels.insert(l);
  }
  for (int l : test_labels) {
    CHECK(ds.holdout[static_cast<std::size_t>(l)]);
    CHECK(train_labels.count(l) == 0);
  }
  CHECK(test_labels.size() == 9);
}

TEST_CASE("map walk stays on the grid and actions explain moves") {
  TaskConfig cfg;
  cfg.kind = TaskKind::mnist_map;
  cfg.grid = 3;
  cfg.map_steps = 40;
  cfg.image = kDims;
  const SequenceSample s = gen_mnist_map(digits(), cfg, 4);
  REQUIRE(s.T == 41);
  CHECK(s.action_width == 4);
  CHECK(std::all_of(s.actions.begin(), s.actions.begin() + 4, [](float a) { return a == 0.0f; }));
  const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
  for (Index t = 1; t < s.T; ++t) {
    const auto a = s.action(t);
    const int m = static_cast<int>(std::max_element(a.begin(), a.end()) - a.begin());
    CHECK(std::accumulate(a.begin(), a.end(), 0.0f) == 1.0f);
    const int r0 = s.cells[static_cast<std::size_t>(2 * t - 2)], c0 = s.cells[static_cast<std::size_t>(2 * t - 1)];
    const int r1 = s.cells[static_cast<std::size_t>(2 * t)], c1 = s.cells[static_cast<std::size_t>(2 * t + 1)];
    CHECK(r1 == r0 + dr[m]);
    CHECK(c1 == c0 + dc[m]);
    CHECK((r1 >= 0 && r1 < 3 && c1 >= 0 && c1 < 3));
  }
  // revisits show the same image
  for (Index a = 0; a < s.T; ++a) {
    for (Index b = a + 1; b < s.T; ++b) {
      if (s.cells[2 * a] == s.cells[2 * b] && s.cells[2 * a + 1] == s.cells[2 * b + 1]) {
        CHECK(same(s.frame(a), s.frame(b)));
      }
    }
  }
  CHECK(validate_sample(s, cfg).empty());
}

TEST_CASE("rotation schedule and view rendering") {
  CHECK(rotation_angle(0, 30) == 0.0);
  CHECK(rotation_angle(15, 30) == doctest::Approx(2 * std::numbers::pi));
  // panorama columns 0..7, window of 2 at a quarter turn starts at column 2
  std::vector<float> pano(8);
  for (int i = 0; i < 8; ++i) pano[static_cast<std::size_t>(i)] = static_cast<float>(i);
  const auto v = render_view(pano, 1, 8, 2, std::numbers::pi / 2);
  CHECK(v[0] == doctest::Approx(2.0));
  CHECK(v[1] == doctest::Approx(3.0));
  // wraparound interpolates between the last and first column
  const auto w = render_view(pano, 1, 8, 1, 2 * std::numbers::pi * 7.5 / 8);
  CHECK(w[0] == doctest::Approx(3.5));

  TaskConfig cfg;
  cfg.kind = TaskKind::rotation;
  cfg.image = kDims;
  const SequenceSample s = gen_rotation_standin(cfg, 3);
  CHECK(s.T == 30);
  CHECK(s.angles.back() < 4 * std::numbers::pi);
  CHECK(validate_sample(s, cfg).empty());
}

TEST_CASE("generators are deterministic in the seed") {
  for (TaskKind kind : {TaskKind::perfect_recall, TaskKind::parity_recall, TaskKind::dynamic_dependency,
                        TaskKind::similarity_recall}) {
    const TaskConfig cfg = recall(kind);
    const SequenceSample a = generate_sample(digits(), cfg, 42), b = generate_sample(digits(), cfg, 42);
    const SequenceSample c = generate_sample(digits(), cfg, 43);
    CHECK(a.frames == b.frames);
    CHECK(a.labels == b.labels);
    CHECK(a.frames != c.frames);
  }
}

TEST_CASE("validator catches corrupted samples") {
  const TaskConfig cfg = recall(TaskKind::perfect_recall);
  SequenceSample s = gen_perfect_recall(digits(), cfg, 1);
  s.frames[static_cast<std::size_t>(13 * 64 + 5)] += 0.5f;
  CHECK(!validate_sample(s, cfg).empty());
  SequenceSample p = gen_parity_recall(digits(), recall(TaskKind::parity_recall), 1);
  p.labels[12] = 1 - p.labels[12];
  CHECK(!validate_sample(p, recall(TaskKind::parity_recall)).empty());
  SequenceSample v = gen_perfect_recall(digits(), cfg, 1);
  v.frames[0] = 2.0f;
  CHECK(!validate_sample(v, cfg).empty());
}

TEST_CASE("task config validation") {
  CHECK_THROWS(recall(TaskKind::perfect_recall, 3, 5).validate());
  CHECK_THROWS(recall(TaskKind::dynamic_dependency, 8, 2).validate());
  CHECK_THROWS(recall(TaskKind::similarity_recall, 4, 4).validate());
  CHECK_NOTHROW(recall(TaskKind::similarity_recall, 5, 4).validate());
  for (TaskKind k : {TaskKind::perfect_recall, TaskKind::parity_recall, TaskKind::one_shot,
                     TaskKind::dynamic_dependency, TaskKind::similarity_recall, TaskKind::mnist_map,
                     TaskKind::rotation}) {
    CHECK(parse_task_kind(to_string(k)) == k);
  }
  CHECK_THROWS(parse_task_kind("copy"));
}

TEST_CASE("synthetic glyphs") {
  const DatasetSource a = synth_glyphs(10, 6, kDims, 17);
  CHECK(a.pixels == digits().pixels);
  CHECK(a.size() == 60);
  CHECK(a.classes() == 10);
  CHECK(std::all_of(a.pixels.begin(), a.pixels.end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));
  const auto r = render_glyph(3, 2, kDims, 17);
  const auto idx = a.by_class[3][2];
  CHECK(same(r, a.image(idx)));
  CHECK(synth_glyphs(10, 6, kDims, 18).pixels != a.pixels);
  // class means are further apart than instances of one class on average
  auto dist = [&](Index i, Index j) {
    double d = 0;
    for (Index p = 0; p < 64; ++p) d += std::pow(a.image(i)[p] - a.image(j)[p], 2);
    return d;
  };
  double within = 0, between = 0;
  int nw = 0, nb = 0;
  for (Index i = 0; i < a.size(); ++i) {
    for (Index j = i + 1; j < a.size(); ++j) {
      if (a.labels[i] == a.labels[j]) within += dist(i, j), ++nw;
      else between += dist(i, j), ++nb;
    }
  }
  CHECK(within / nw < between / nb);
  CHECK_THROWS(synth_glyphs(10, 2, ImageDims{1, 4, 4}, 1));
}

TEST_CASE("area resize averages blocks") {
  const std::vector<float> src{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};
  const auto out = area_resize(src, 4, 4, 2, 2);
  CHECK(out[0] == doctest::Approx((0 + 1 + 4 + 5) / 4.0));
  CHECK(out[3] == doctest::Approx((10 + 11 + 14 + 15) / 4.0));
  CHECK(area_resize(src, 4, 4, 4, 4) == src);
}

TEST_CASE("idx loading") {
  const IdxFiles f = make_idx("ok", 10, 4, 4);
  const DatasetSource ds = load_idx_dir(f.dir);
  CHECK(ds.size() == 10);
  CHECK(ds.dims == ImageDims{1, 4, 4});
  CHECK(ds.labels[7] == 7);
  CHECK(ds.image(3)[0] == doctest::Approx(30.0 / 255.0));
  const DatasetSource small = load_idx(f.images, f.labels, ImageDims{1, 2, 2});
  CHECK(small.image(9)[3] == doctest::Approx(90.0 / 255.0));

  CHECK_THROWS_WITH_AS(load_idx_dir(make_idx("magic", 10, 4, 4, 0x802).dir), doctest::Contains("magic"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(load_idx_dir(make_idx("trunc", 10, 4, 4, 0x803, 0, 7).dir), doctest::Contains("truncated"),
                       std::runtime_error);
  CHECK_THROWS_AS(load_idx_dir(make_idx("count", 10, 4, 4, 0x803, 9).dir), std::runtime_error);
  CHECK_THROWS(load_idx_dir(fs::temp_directory_path() / "gtmm_idx_missing_dir"));
  for (const char* tag : {"ok", "magic", "trunc", "count"}) fs::remove_all(fs::temp_directory_path() / ("gtmm_idx_" + std::string(tag)));
}

TEST_CASE("dataset file layout") {
  const TaskConfig cfg = recall(TaskKind::perfect_recall, 5, 2);
  std::vector<SequenceSample> samples{gen_perfect_recall(digits(), cfg, 1), gen_perfect_recall(digits(), cfg, 2)};
  const fs::path p = fs::temp_directory_path() / "gtmm_dataset_test.bin";
  write_dataset(p, cfg, 9, samples);
  std::ifstream in(p, std::ios::binary);
  std::string header;
  std::getline(in, header);
  const auto j = nlohmann::json::parse(header);
  CHECK(j.contains("seed"));
  std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(rest.size() == 2 * 7 * 64 * sizeof(float));
  float first;
  std::memcpy(&first, rest.data(), sizeof(float));
  CHECK(first == samples[0].frames[0]);
  fs::remove(p);
}

TEST_CASE("validator suite on a small sample count") {
  const SuiteReport r = task_validator_suite(3, 200);
  for (const Check& c : r.checks) {
    INFO(c.name << " " << c.value << " " << c.detail);
    CHECK(c.passed);
  }
}

#include "gtmm/harness/strip.hpp"
#include "gtmm/harness/train.hpp"
#include "gtmm/tensor/adam.hpp"
#include "gtmm/verify/verify.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace gtmm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::current_path() / "harness_scratch" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("rng streams") {
  Rng a(5), b(5);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(stream_key(1, "train", 0) != stream_key(1, "eval", 0));
  CHECK(stream_key(1, "train", 0) != stream_key(1, "train", 1));
  CHECK(stream_key(1, "train", 0) != stream_key(2, "train", 0));
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);

  Rng r = seeded_rng(3, "unit", 0);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  std::vector<int> counts(7, 0);
  bool in_range = true;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    in_range = in_range && u >= 0.0 && u < 1.0;
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
    const auto k = r.uniform_index(7);
    in_range = in_range && k >= 0 && k < 7;
    ++counts[static_cast<std::size_t>(k)];
  }
  CHECK(in_range);
  CHECK(std::abs(su / n - 0.5) < 0.005);
  CHECK(std::abs(sn / n) < 0.01);
  CHECK(std::abs(sn2 / n - 1.0) < 0.02);
  for (int c : counts) CHECK(std::abs(c / double(n) - 1.0 / 7) < 0.005);
}

TEST_CASE("quantization") {
  CHECK(quantize(0.0) == 0);
  CHECK(quantize(1.0) == 255);
  CHECK(quantize(0.5) == 128);  // 127.5 rounds up
  CHECK(quantize(-3.0) == 0);
  CHECK(quantize(7.0) == 255);
}

TEST_CASE("strip layout") {
  // two sequences of three 2 x 2 frames
  std::vector<std::vector<std::vector<float>>> seqs(2, std::vector<std::vector<float>>(3, std::vector<float>(4)));
  for (int s = 0; s < 2; ++s) {
    for (int t = 0; t < 3; ++t) {
      for (int p = 0; p < 4; ++p) seqs[s][t][p] = 0.1f * static_cast<float>(s * 3 + t);
    }
  }
  const GrayImage img = layout_strip(seqs, ImageDims{1, 2, 2});
  CHECK(img.width == 3 * 2 + 2);
  CHECK(img.height == 2 * 2 + 1);
  CHECK(img.pixels[2] == 255);                                // column separator
  CHECK(img.pixels[static_cast<std::size_t>(2 * img.width)] == 255);  // row separator
  CHECK(img.pixels[static_cast<std::size_t>(3 * img.width + 6)] == quantize(0.5));
  seqs[1].pop_back();
  CHECK_THROWS(layout_strip(seqs, ImageDims{1, 2, 2}));
}

TEST_CASE("image files round trip") {
  GrayImage img{3, 2, {0, 50, 100, 150, 200, 255}};
  const fs::path dir = scratch("images");
  for (const char* ext : {".pgm", ".ppm"}) {
    const fs::path p = dir / (std::string("strip") + ext);
    write_image(p, img);
    const GrayImage back = read_pnm(p);
    CHECK(back.width == 3);
    CHECK(back.height == 2);
    CHECK(back.pixels == img.pixels);
  }
  const fs::path png = dir / "strip.png";
  write_image(png, img);
  const std::string bytes = slurp(png);
  REQUIRE(bytes.size() > 8);
  CHECK(bytes.substr(1, 3) == "PNG");
  CHECK_THROWS(write_image(dir / "strip.bmp", img));
}

TEST_CASE("checkpoint round trip and mismatches") {
  TrainConfig cfg = smoke_config(MemoryKind::dnc, 4);
  Gtmm<double> model = build_model<double>(cfg);
  const Checkpoint c = make_checkpoint(model.parameters(), cfg.to_json(), 7);
  const fs::path p = scratch("ckpt") / "c.bin";
  save_checkpoint(p, c);
  const Checkpoint back = load_checkpoint(p);
  CHECK(back.step == 7);
  CHECK(back.values == c.values);
  CHECK(back.manifest == c.manifest);
  CHECK(back.config == c.config);

  Gtmm<double> other(cfg.model_config(), 999);
  apply_checkpoint(back, other.parameters());
  const auto& a = model.parameters().entries();
  const auto& b = other.parameters().entries();
  for (std::size_t i = 0; i < a.size(); ++i) {
    // float32 storage
    CHECK((a[i].tensor.value().cast<float>() == b[i].tensor.value().cast<float>()).all());
  }

  TrainConfig wider = cfg;
  wider.hidden += 1;
  Gtmm<double> mismatched = build_model<double>(wider);
  CHECK_THROWS(apply_checkpoint(back, mismatched.parameters()));

  const std::string bytes = slurp(p);
  {
    std::ofstream out(p, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 3);
  }
  CHECK_THROWS_WITH(load_checkpoint(p), doctest::Contains("payload"));
  {
    std::ofstream out(p, std::ios::binary);
    out << "{\"format\": \"other\"}\n";
  }
  CHECK_THROWS(load_checkpoint(p));
  CHECK_THROWS(load_checkpoint(p.parent_path() / "missing.bin"));
}

TEST_CASE("config json round trip") {
  TrainConfig cfg;
  cfg.model = MemoryKind::lru;
  cfg.task.kind = TaskKind::mnist_map;
  cfg.task.grid = 3;
  cfg.task.image = {1, 10, 10};
  cfg.codec = CodecKind::mlp;
  cfg.data_seed = 77;
  cfg.precision = Precision::f64;
  cfg.replica = 2;
  const TrainConfig back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.data_seed == 77u);
  CHECK(back.run_seed() == cfg.run_seed());
  cfg.replica = 1;
  CHECK(back.run_seed() != cfg.run_seed());
}

TEST_CASE("resolved slots") {
  TrainConfig cfg;
  cfg.task.l = 10;
  cfg.task.k = 5;
  CHECK(cfg.resolved_slots() == 15);
  cfg.model = MemoryKind::lru;
  CHECK(cfg.resolved_slots() == 75);
  cfg.slots = 9;
  CHECK(cfg.resolved_slots() == 9);
}

TEST_CASE("recall ratio") {
  // frames 2..4 of l = 4 average 2, recall frames average 1
  CHECK(recall_ratio({9, 2, 2, 2, 1, 1}, 4, 2) == doctest::Approx(0.5));
  CHECK_THROWS(recall_ratio({1, 2, 3}, 4, 2));
}

TEST_CASE("metrics header and rows") {
  CHECK(metrics_header(3) == "step,neg_elbo,last_frame_kl,wall_s,kl_f0,kl_f1,kl_f2");
  MetricsRow row{5, 1.5, {0.25, 0.5}, 0.0};
  const std::string line = format_row(row);
  CHECK(line.rfind("5,", 0) == 0);
  const fs::path p = scratch("metrics") / "metrics.csv";
  {
    std::ofstream out(p);
    out << metrics_header(2) << '\n' << line << '\n';
  }
  const auto rows = read_metrics(p);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].step == 5);
  CHECK(rows[0].kl[1] == doctest::Approx(0.5));
  CHECK(rows[0].last_frame_kl() == doctest::Approx(0.5));
}

TEST_CASE("training twice gives identical files") {
  const TrainConfig cfg = smoke_config(MemoryKind::introspection, 8);
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  train(cfg, a);
  train(cfg, b);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "ckpt_8.bin") == slurp(b / "ckpt_8.bin"));
  CHECK(fs::exists(a / "config.json"));
  const auto rows = read_metrics(a / "metrics.csv");
  CHECK(rows.size() == 5);
  CHECK(rows.front().step == 0);
  CHECK(rows.back().step == 8);
}

TEST_CASE("zero learning rate leaves the parameters alone") {
  TrainConfig cfg = smoke_config(MemoryKind::ntm, 3);
  cfg.lr = 0.0;
  const TrainResult r = train(cfg, "");
  const Gtmm<float> init = build_model<float>(cfg);
  const Checkpoint c = make_checkpoint(init.parameters(), nlohmann::json::object(), 0);
  CHECK(r.final_checkpoint.values == c.values);
}

TEST_CASE("evaluation and generation from a checkpoint") {
  const TrainConfig cfg = smoke_config(MemoryKind::lru, 4);
  const TrainResult r = train(cfg, "");
  const EvalResult e = evaluate(r.final_checkpoint, 3, 5);
  CHECK(e.batches == 3);
  CHECK(e.kl.size() == static_cast<std::size_t>(cfg.task.length()));
  CHECK(std::isfinite(e.neg_elbo));
  CHECK(e.neg_elbo_se >= 0.0);
  CHECK(evaluate(r.final_checkpoint, 3, 5).neg_elbo == e.neg_elbo);
  const auto seqs = generate_sequences(r.final_checkpoint, 2, 1, 2);
  REQUIRE(seqs.size() == 2);
  CHECK(seqs[0].size() == static_cast<std::size_t>(cfg.task.length()));
  CHECK(seqs[0][0].size() == static_cast<std::size_t>(cfg.task.image.pixels()));
}

TEST_CASE("batches are keyed by sample id") {
  const TrainConfig cfg = smoke_config(MemoryKind::vrnn, 1);
  const DatasetSource ds = build_dataset(cfg);
  const auto both = draw_samples(ds, cfg.task, 4, "train", {3, 9});
  const auto one = draw_samples(ds, cfg.task, 4, "train", {9});
  CHECK(both[1].frames == one[0].frames);
  const Batch<double> b = make_batch<double>(both, {3, 9});
  CHECK(b.frames.size() == static_cast<std::size_t>(cfg.task.length()));
  CHECK(b.frames[0].shape() == Shape{2, cfg.task.image.pixels()});
  CHECK(b.contexts.empty());
}

TEST_CASE("every model overfits a fixed batch") {
  for (MemoryKind kind : {MemoryKind::vrnn, MemoryKind::introspection, MemoryKind::ntm, MemoryKind::lru,
                          MemoryKind::dnc}) {
    CAPTURE(to_string(kind));
    const TrainConfig cfg = smoke_config(kind, 1);
    const DatasetSource ds = build_dataset(cfg);
    const std::vector<std::uint64_t> ids{0, 1};
    const Batch<float> batch = make_batch<float>(draw_samples(ds, cfg.task, 1, "train", ids), ids);
    Gtmm<float> model = build_model<float>(cfg);
    const Index T = cfg.task.length(), K = cfg.latent;
    const auto fixed = sample_noise<float>(1, "probe", ids, T, K);
    const auto loss_now = [&] { return model.sequence_elbo(batch.frames, batch.contexts, fixed).loss.item(); };
    const double before = loss_now();
    std::vector<Tensor<float>> params = model.parameters().tensors();
    AdamConfig ac;
    ac.lr = 3e-3;
    AdamState<float> st(ac, params);
    for (Index step = 0; step < 500; ++step) {
      model.parameters().zero_grad();
      const auto noise = sample_noise<float>(2, "overfit", {static_cast<std::uint64_t>(2 * step),
                                                            static_cast<std::uint64_t>(2 * step + 1)}, T, K);
      backward(model.sequence_elbo(batch.frames, batch.contexts, noise).loss);
      clip_grad_norm<float>(params, 10.0);
      adam_step<float>(params, st);
    }
    const double after = loss_now();
    CHECK(after < 0.8 * before);
  }
}

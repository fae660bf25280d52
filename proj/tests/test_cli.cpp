#include "gtmm/cli/cli.hpp"
#include "gtmm/harness/strip.hpp"
#include "gtmm/harness/train.hpp"

#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace gtmm;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::current_path() / "cli_scratch" / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> small_train(const fs::path& out, const std::string& model = "introspection") {
  return {"train", "--model", model, "--task", "perfect-recall", "--l", "4", "--k", "2", "--latent", "4",
          "--heads", "2", "--hidden", "16", "--features", "16", "--head-hidden", "16", "--batch", "2",
          "--steps", "4", "--eval-every", "2", "--per-class", "5", "--wall-clock", "off", "--quiet",
          "--out", out.string()};
}

}  // namespace

TEST_CASE("usage errors exit 1 and help exits 0") {
  CHECK(cli({}).code == 1);
  CHECK(cli({"bogus"}).code == 1);
  CHECK(cli({"train", "--no-such-flag"}).code == 1);
  CHECK(cli({"train", "--model", "gru", "--steps", "1", "--out", scratch("bad").string()}).code == 1);
  CHECK(cli({"train", "--image", "8by8"}).code == 1);
  CHECK(cli({"train", "--wall-clock", "maybe"}).code == 1);
  CHECK(cli({"train", "--l", "3", "--k", "5"}).code == 1);
  CHECK(cli({"eval"}).code == 1);
  const Run missing = cli({"eval", "--from", "no/such/ckpt.bin"});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("no such checkpoint") != std::string::npos);
  const Run help = cli({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("train") != std::string::npos);
  CHECK(cli({"train", "--help"}).code == 0);
}

TEST_CASE("runtime failures exit 2") {
  const fs::path bad = scratch("garbage.bin");
  std::ofstream(bad) << "not a checkpoint\n";
  CHECK(cli({"eval", "--from", bad.string()}).code == 2);
  const fs::path out = scratch("idx_missing");
  CHECK(cli({"train", "--dataset", (out / "nowhere").string(), "--steps", "1", "--out", out.string()}).code == 2);
}

TEST_CASE("train writes the run directory") {
  const fs::path out = scratch("train");
  const Run r = cli(small_train(out));
  REQUIRE(r.code == 0);
  CHECK(fs::exists(out / "metrics.csv"));
  CHECK(fs::exists(out / "ckpt_4.bin"));
  const auto j = nlohmann::json::parse(slurp(out / "config.json"));
  for (const char* key : {"model", "task", "latent", "heads", "slots", "resolved_slots", "hidden", "lr", "batch",
                          "steps", "seed", "dataset", "precision", "out"}) {
    CHECK_MESSAGE(j.contains(key), key);
  }
  CHECK(j["out"] == out.string());
  CHECK(j["resolved_slots"] == 6);
  CHECK(read_metrics(out / "metrics.csv").size() == 3);
}

TEST_CASE("progress rows carry the recall ratio") {
  auto args = small_train(scratch("progress"));
  args.erase(std::find(args.begin(), args.end(), "--quiet"));
  const Run r = cli(args);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("step      0") != std::string::npos);
  CHECK(r.out.find("recall_ratio") != std::string::npos);
}

TEST_CASE("repeated train runs give identical metrics") {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  REQUIRE(cli(small_train(a, "dnc")).code == 0);
  REQUIRE(cli(small_train(b, "dnc")).code == 0);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
}

TEST_CASE("eval and generate read a checkpoint") {
  const fs::path out = scratch("evalgen");
  REQUIRE(cli(small_train(out)).code == 0);
  const std::string ckpt = (out / "ckpt_4.bin").string();
  const Run e = cli({"eval", "--from", ckpt, "--batches", "2", "--out", (out / "eval.json").string()});
  REQUIRE(e.code == 0);
  const auto j = nlohmann::json::parse(e.out);
  CHECK(j["batches"] == 2);
  CHECK(j["kl"].size() == 6);
  CHECK(j.contains("recall_ratio"));
  CHECK(nlohmann::json::parse(slurp(out / "eval.json")) == j);

  const Run g = cli({"generate", "--from", ckpt, "--n", "3", "--seed", "5"});
  REQUIRE(g.code == 0);
  CHECK(fs::exists(out / "generated_s5.png"));
  const fs::path pgm = out / "gen.pgm";
  REQUIRE(cli({"generate", "--from", ckpt, "--n", "3", "--prefix", "2", "--out", pgm.string()}).code == 0);
  const GrayImage img = read_pnm(pgm);
  CHECK(img.height == 3 * 8 + 2);
  CHECK(img.width == 6 * 8 + 5);
}

TEST_CASE("gen-data writes samples and a preview") {
  const fs::path out = scratch("gen");
  const Run r = cli({"gen-data", "--task", "mnist-map", "--grid", "3", "--map-steps", "6", "--per-class", "3",
                     "--n", "4", "--out", out.string()});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(out / "dataset.bin"));
  CHECK(fs::exists(out / "preview.png"));
  CHECK(fs::exists(out / "config.json"));
  CHECK(cli({"gen-data", "--n", "0", "--out", out.string()}).code == 1);
}

TEST_CASE("gradcheck passes") {
  const Run r = cli({"gradcheck", "--seed", "3"});
  CHECK(r.code == 0);
  CHECK(r.out.find("all suites passed") != std::string::npos);
}

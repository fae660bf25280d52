#include "gtmm/cli/cli.hpp"

#include "gtmm/harness/strip.hpp"
#include "gtmm/harness/train.hpp"
#include "gtmm/verify/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <regex>

namespace gtmm {

namespace {

constexpr int kUsage = 1;
constexpr int kFailure = 2;

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Flags shared by gen-data and train, kept as strings where they need
/// parsing into enums.
struct Flags {
  TrainConfig cfg;
  std::string task = "perfect-recall";
  std::string model = "introspection";
  std::string precision = "f32";
  std::string codec = "small-conv";
  std::string image = "8x8";
  std::string split = "train";
  std::string wall_clock = "on";
  std::string data_seed = "none";
};

void add_shared(CLI::App& app, Flags& f) {
  auto& c = f.cfg;
  app.add_option("--task", f.task, "perfect-recall, parity-recall, one-shot, dynamic-dependency, "
                                   "similarity-recall, mnist-map or rotation")
      ->capture_default_str();
  app.add_option("--model", f.model, "vrnn, introspection, ntm, lru or dnc")->capture_default_str();
  app.add_option("--l", c.task.l, "pre-recall length")->capture_default_str();
  app.add_option("--k", c.task.k, "recall length")->capture_default_str();
  app.add_option("--latent", c.latent, "latent width K")->capture_default_str();
  app.add_option("--heads", c.heads, "read heads R")->capture_default_str();
  app.add_option("--slots", c.slots, "memory slots L, 0 picks from the sequence length")->capture_default_str();
  app.add_option("--hidden", c.hidden, "controller width H")->capture_default_str();
  app.add_option("--lr", c.lr, "Adam learning rate")->capture_default_str();
  app.add_option("--batch", c.batch, "sequences per step")->capture_default_str();
  app.add_option("--steps", c.steps, "training steps")->capture_default_str();
  app.add_option("--seed", c.seed, "run seed")->capture_default_str();
  app.add_option("--dataset", c.dataset, "IDX directory or 'synthetic'")->capture_default_str();
  app.add_option("--precision", f.precision, "f32 or f64")->capture_default_str();
  app.add_option("--image", f.image, "frame size HxW")->capture_default_str();
  app.add_option("--per-class", c.per_class, "synthetic images per class")->capture_default_str();
  app.add_option("--split", f.split, "one-shot split, train or test")->capture_default_str();
  app.add_option("--grid", c.task.grid, "map grid side")->capture_default_str();
  app.add_option("--map-steps", c.task.map_steps, "map walk steps")->capture_default_str();
  app.add_option("--data-seed", f.data_seed, "seed for the image set, 'none' follows --seed")->capture_default_str();
}

void add_model_flags(CLI::App& app, Flags& f) {
  auto& c = f.cfg;
  app.add_option("--features", c.features, "encoder feature width")->capture_default_str();
  app.add_option("--head-hidden", c.head_hidden, "prior/posterior head width")->capture_default_str();
  app.add_option("--codec", f.codec, "small-conv or mlp")->capture_default_str();
  app.add_option("--clip-norm", c.clip_norm, "global gradient norm cap, 0 disables")->capture_default_str();
  app.add_option("--replica", c.replica, "replica id mixed into the run seed")->capture_default_str();
  app.add_option("--eval-every", c.eval_every, "steps between metrics rows")->capture_default_str();
  app.add_option("--eval-batches", c.eval_batches, "held-out batches per metrics row")->capture_default_str();
  app.add_option("--checkpoint-every", c.checkpoint_every, "steps between checkpoints, 0 final only")
      ->capture_default_str();
  app.add_option("--wall-clock", f.wall_clock, "on or off; off zeroes wall_s for byte-identical metrics")
      ->capture_default_str();
}

ImageDims parse_image(const std::string& s) {
  std::smatch m;
  if (!std::regex_match(s, m, std::regex(R"((\d+)x(\d+))"))) throw UsageError("--image expects HxW, got '" + s + "'");
  return {1, std::stol(m[1]), std::stol(m[2])};
}

// Turns the string flags into enums; bad values are usage errors.
TrainConfig resolve(const Flags& f, const std::string& out) {
  TrainConfig c = f.cfg;
  try {
    c.task.kind = parse_task_kind(f.task);
    c.model = parse_memory_kind(f.model);
    c.precision = parse_precision(f.precision);
    c.codec = parse_codec(f.codec);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  c.task.image = parse_image(f.image);
  if (f.split != "train" && f.split != "test") throw UsageError("--split must be train or test");
  c.task.split = f.split == "test" ? Split::test : Split::train;
  if (f.wall_clock != "on" && f.wall_clock != "off") throw UsageError("--wall-clock must be on or off");
  c.wall_clock = f.wall_clock == "on";
  if (f.data_seed != "none") {
    try {
      c.data_seed = std::stoull(f.data_seed);
    } catch (const std::exception&) {
      throw UsageError("--data-seed must be a non-negative integer or 'none'");
    }
  }
  c.out = out;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return c;
}

std::string default_out(const Flags& f) {
  return "runs/" + f.task + "-" + f.model + "-s" + std::to_string(f.cfg.seed) + "-r" + std::to_string(f.cfg.replica);
}

int gen_data(const Flags& f, std::string out, Index n, std::ostream& os) {
  if (out.empty()) out = "data/" + f.task + "-s" + std::to_string(f.cfg.seed);
  const TrainConfig cfg = resolve(f, out);
  if (n < 1) throw UsageError("--n must be at least 1");
  const DatasetSource ds = build_dataset(cfg);
  std::vector<std::uint64_t> ids(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = static_cast<std::uint64_t>(i);
  const auto samples = draw_samples(ds, cfg.task, cfg.dataset_seed(), "gen-data", ids);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (std::string e = validate_sample(samples[i], cfg.task); !e.empty()) {
      throw std::runtime_error("generated sample " + std::to_string(i) + " is invalid: " + e);
    }
  }
  std::filesystem::create_directories(out);
  write_dataset(std::filesystem::path(out) / "dataset.bin", cfg.task, cfg.dataset_seed(), samples);
  std::ofstream(std::filesystem::path(out) / "config.json") << cfg.to_json().dump(2) << '\n';
  std::vector<std::vector<std::vector<float>>> preview;
  for (std::size_t i = 0; i < std::min<std::size_t>(samples.size(), 8); ++i) {
    auto& row = preview.emplace_back();
    for (Index t = 0; t < samples[i].T; ++t) {
      const auto fr = samples[i].frame(t);
      row.emplace_back(fr.begin(), fr.end());
    }
  }
  dump_sequence_strip(preview, cfg.task.image, std::filesystem::path(out) / "preview.png");
  os << "wrote " << n << " " << f.task << " sequences to " << out << "\n";
  return 0;
}

int train_verb(const Flags& f, std::string out, bool quiet, std::ostream& os) {
  if (out.empty()) out = default_out(f);
  const TrainConfig cfg = resolve(f, out);
  const Index l = cfg.task.l, k = cfg.task.k;
  const bool recall = cfg.task.kind != TaskKind::mnist_map && cfg.task.kind != TaskKind::rotation;
  const auto on_row = [&](const MetricsRow& row) {
    if (quiet) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "step %6ld  neg_elbo %9.4f  last_frame_kl %8.4f", static_cast<long>(row.step),
                  row.neg_elbo, row.last_frame_kl());
    os << buf;
    if (recall) {
      std::snprintf(buf, sizeof buf, "  recall_ratio %.3f", recall_ratio(row.kl, l, k));
      os << buf;
    }
    os << "\n" << std::flush;
  };
  train(cfg, out, on_row);
  os << "run written to " << out << "\n";
  return 0;
}

Checkpoint load_or_usage(const std::string& from) {
  if (from.empty()) throw UsageError("--from <checkpoint> is required");
  if (!std::filesystem::exists(from)) throw UsageError("no such checkpoint: " + from);
  return load_checkpoint(from);
}

int eval_verb(const std::string& from, Index batches, std::uint64_t seed, const std::string& out, std::ostream& os) {
  const Checkpoint ckpt = load_or_usage(from);
  if (batches < 1) throw UsageError("--batches must be at least 1");
  const EvalResult r = evaluate(ckpt, batches, seed);
  const TrainConfig cfg = TrainConfig::from_json(ckpt.config);
  nlohmann::json j{{"checkpoint", from},
                   {"step", ckpt.step},
                   {"batches", r.batches},
                   {"seed", seed},
                   {"neg_elbo", r.neg_elbo},
                   {"neg_elbo_se", r.neg_elbo_se},
                   {"kl", r.kl},
                   {"kl_se", r.kl_se}};
  if (cfg.task.kind != TaskKind::mnist_map && cfg.task.kind != TaskKind::rotation) {
    j["recall_ratio"] = recall_ratio(r.kl, cfg.task.l, cfg.task.k);
  }
  if (!out.empty()) std::ofstream(out) << j.dump(2) << '\n';
  os << j.dump(2) << '\n';
  return 0;
}

int generate_verb(const std::string& from, Index n, std::uint64_t seed, Index prefix, std::string out,
                  std::ostream& os) {
  const Checkpoint ckpt = load_or_usage(from);
  if (n < 1) throw UsageError("--n must be at least 1");
  const TrainConfig cfg = TrainConfig::from_json(ckpt.config);
  if (out.empty()) {
    out = (std::filesystem::path(from).parent_path() / ("generated_s" + std::to_string(seed) + ".png")).string();
  }
  const auto seqs = generate_sequences(ckpt, n, seed, prefix);
  dump_sequence_strip(seqs, cfg.task.image, out);
  os << "wrote " << n << " generated sequences to " << out << "\n";
  return 0;
}

int suites(const std::vector<SuiteReport>& reports, std::ostream& os) {
  bool ok = true;
  for (const auto& r : reports) ok = ok && r.passed();
  os << (ok ? "all suites passed" : "some suites FAILED") << "\n";
  return ok ? 0 : kFailure;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& os, std::ostream& err) {
  CLI::App app{"gtmm: variational sequence models with external memory"};
  app.require_subcommand(1);

  Flags gen_flags, train_flags;
  std::string gen_out, train_out;
  Index gen_n = 100;
  bool quiet = false;

  auto* gen = app.add_subcommand("gen-data", "generate task sequences into <out>/dataset.bin");
  add_shared(*gen, gen_flags);
  gen->add_option("--out", gen_out, "output directory (default data/<task>-s<seed>)");
  gen->add_option("--n", gen_n, "number of sequences")->capture_default_str();

  auto* tr = app.add_subcommand("train", "train a model; writes config.json, metrics.csv, ckpt_<step>.bin");
  add_shared(*tr, train_flags);
  add_model_flags(*tr, train_flags);
  tr->add_option("--out", train_out, "run directory (default runs/<task>-<model>-s<seed>-r<replica>)");
  tr->add_flag("--quiet", quiet, "no per-row progress");

  std::string from, eval_out, gen_png;
  Index batches = 10, n = 8, prefix = 0;
  std::uint64_t eval_seed = 1, gen_seed = 1, check_seed = 1;

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on held-out batches");
  ev->add_option("--from", from, "checkpoint file")->required();
  ev->add_option("--batches", batches, "number of batches")->capture_default_str();
  ev->add_option("--seed", eval_seed, "evaluation stream seed")->capture_default_str();
  ev->add_option("--out", eval_out, "also write the JSON result here");

  auto* gn = app.add_subcommand("generate", "sample sequences from the prior into a PNG strip");
  gn->add_option("--from", from, "checkpoint file")->required();
  gn->add_option("--n", n, "number of sequences")->capture_default_str();
  gn->add_option("--seed", gen_seed, "sampling seed")->capture_default_str();
  gn->add_option("--prefix", prefix, "frames teacher-forced from task data")->capture_default_str();
  gn->add_option("--out", gen_png, "image path (default next to the checkpoint)");

  auto* gc = app.add_subcommand("gradcheck", "64-bit finite-difference gradient suite");
  gc->add_option("--seed", check_seed, "case seed")->capture_default_str();

  bool verbose = false;
  std::string scratch = "selftest_scratch";
  auto* st = app.add_subcommand("selftest", "every property suite");
  st->add_option("--seed", check_seed, "case seed")->capture_default_str();
  st->add_option("--scratch", scratch, "temporary directory for the determinism runs")->capture_default_str();
  st->add_flag("--verbose", verbose, "print passing checks too");
  gc->add_flag("--verbose", verbose, "print passing checks too");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, os, err);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (gen->parsed()) return gen_data(gen_flags, gen_out, gen_n, os);
    if (tr->parsed()) return train_verb(train_flags, train_out, quiet, os);
    if (ev->parsed()) return eval_verb(from, batches, eval_seed, eval_out, os);
    if (gn->parsed()) return generate_verb(from, n, gen_seed, prefix, gen_png, os);
    if (gc->parsed()) {
      const SuiteReport r = gradient_suite(check_seed);
      print_report(os, r, verbose);
      return suites({r}, os);
    }
    if (st->parsed()) {
      std::vector<SuiteReport> reports;
      const auto run = [&](SuiteReport r) {
        print_report(os, r, verbose);
        os << std::flush;
        reports.push_back(std::move(r));
      };
      run(gradient_suite(check_seed));
      run(kl_oracle_suite(check_seed));
      run(elbo_oracle_suite(check_seed));
      run(memory_invariant_suite(check_seed));
      run(task_validator_suite(check_seed));
      for (MemoryKind kind : {MemoryKind::vrnn, MemoryKind::introspection, MemoryKind::ntm, MemoryKind::lru,
                              MemoryKind::dnc}) {
        TrainConfig cfg = smoke_config(kind, 20);
        cfg.seed = check_seed;
        run(determinism_suite(cfg, std::filesystem::path(scratch) / to_string(kind)));
      }
      std::filesystem::remove_all(scratch);
      return suites(reports, os);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace gtmm

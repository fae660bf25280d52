#include "gtmm/harness/train.hpp"

#include "gtmm/harness/rng.hpp"
#include "gtmm/tensor/adam.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace gtmm {

std::vector<SequenceSample> draw_samples(const DatasetSource& ds, const TaskConfig& task, std::uint64_t seed,
                                         std::string_view stream, const std::vector<std::uint64_t>& ids) {
  std::vector<SequenceSample> out;
  out.reserve(ids.size());
  for (std::uint64_t id : ids) out.push_back(generate_sample(ds, task, stream_key(seed, stream, id)));
  return out;
}

template <typename S>
Batch<S> make_batch(const std::vector<SequenceSample>& samples, const std::vector<std::uint64_t>& ids) {
  if (samples.empty()) throw std::invalid_argument("make_batch: no samples");
  const Index B = static_cast<Index>(samples.size());
  const Index T = samples.front().T, P = samples.front().dims.pixels(), A = samples.front().action_width;
  Batch<S> batch;
  batch.ids = ids;
  for (Index t = 0; t < T; ++t) {
    Vec<S> f(B * P);
    Vec<S> a(B * A);
    for (Index b = 0; b < B; ++b) {
      const auto& s = samples[static_cast<std::size_t>(b)];
      if (s.T != T || s.dims.pixels() != P || s.action_width != A) throw std::invalid_argument("make_batch: ragged samples");
      const auto frame = s.frame(t);
      for (Index p = 0; p < P; ++p) f[b * P + p] = static_cast<S>(frame[static_cast<std::size_t>(p)]);
      if (A > 0) {
        const auto act = s.action(t);
        for (Index i = 0; i < A; ++i) a[b * A + i] = static_cast<S>(act[static_cast<std::size_t>(i)]);
      }
    }
    batch.frames.push_back(Tensor<S>::constant({B, P}, std::move(f)));
    if (A > 0) batch.contexts.push_back(Tensor<S>::constant({B, A}, std::move(a)));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Metrics.

namespace {

std::string fmt(double v, const char* spec = "%.9g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<std::uint64_t> batch_ids(Index first, Index B) {
  std::vector<std::uint64_t> ids(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) ids[static_cast<std::size_t>(b)] = static_cast<std::uint64_t>(first + b);
  return ids;
}

}  // namespace

std::string metrics_header(Index T) {
  std::string h = "step,neg_elbo,last_frame_kl,wall_s";
  for (Index t = 0; t < T; ++t) h += ",kl_f" + std::to_string(t);
  return h;
}

std::string format_row(const MetricsRow& row) {
  std::string line = std::to_string(row.step) + "," + fmt(row.neg_elbo) + "," + fmt(row.last_frame_kl()) + "," +
                     fmt(row.wall_s, "%.3f");
  for (double k : row.kl) line += "," + fmt(k);
  return line;
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("step,neg_elbo,last_frame_kl,wall_s", 0) != 0) {
    throw std::runtime_error(path.string() + ": not a metrics file");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() < 5) throw std::runtime_error(path.string() + ": short row");
    MetricsRow r;
    r.step = static_cast<Index>(v[0]);
    r.neg_elbo = v[1];
    r.wall_s = v[3];
    r.kl.assign(v.begin() + 4, v.end());
    rows.push_back(std::move(r));
  }
  return rows;
}

double recall_ratio(const std::vector<double>& kl, Index l, Index k) {
  if (l < 2 || static_cast<Index>(kl.size()) < l + k) throw std::invalid_argument("recall_ratio: profile too short");
  double distract = 0.0, recall = 0.0;
  for (Index t = 1; t < l; ++t) distract += kl[static_cast<std::size_t>(t)];
  for (Index t = l; t < l + k; ++t) recall += kl[static_cast<std::size_t>(t)];
  return (recall / static_cast<double>(k)) / (distract / static_cast<double>(l - 1));
}

// ---------------------------------------------------------------------------

template <typename S>
Gtmm<S> build_model(const TrainConfig& cfg) {
  return Gtmm<S>(cfg.model_config(), cfg.run_seed());
}

template <typename S>
EvalResult evaluate_model(const Gtmm<S>& model, const TrainConfig& cfg, const DatasetSource& ds, std::uint64_t seed,
                          Index n_batches) {
  if (n_batches < 1) throw std::invalid_argument("evaluate: need at least one batch");
  const Index T = cfg.task.length(), B = cfg.batch, K = cfg.latent;
  std::vector<double> neg(static_cast<std::size_t>(n_batches));
  std::vector<std::vector<double>> kl(static_cast<std::size_t>(n_batches), std::vector<double>(static_cast<std::size_t>(T)));
  for (Index i = 0; i < n_batches; ++i) {
    const auto ids = batch_ids(i * B, B);
    const Batch<S> batch = make_batch<S>(draw_samples(ds, cfg.task, seed, "eval", ids), ids);
    const auto noise = sample_noise<S>(seed, "eval-noise", ids, T, K);
    const ElboBreakdown<S> e = model.sequence_elbo(batch.frames, batch.contexts, noise);
    neg[static_cast<std::size_t>(i)] = static_cast<double>(e.loss.item());
    for (Index t = 0; t < T; ++t) {
      kl[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] =
          e.per_step[static_cast<std::size_t>(t)].kl.value().template cast<double>().mean();
    }
  }
  const auto mean_se = [n_batches](const auto& get) {
    double m = 0.0;
    for (Index i = 0; i < n_batches; ++i) m += get(i);
    m /= static_cast<double>(n_batches);
    if (n_batches == 1) return std::pair{m, 0.0};
    double ss = 0.0;
    for (Index i = 0; i < n_batches; ++i) ss += (get(i) - m) * (get(i) - m);
    return std::pair{m, std::sqrt(ss / static_cast<double>(n_batches - 1) / static_cast<double>(n_batches))};
  };
  EvalResult r;
  r.batches = n_batches;
  std::tie(r.neg_elbo, r.neg_elbo_se) = mean_se([&](Index i) { return neg[static_cast<std::size_t>(i)]; });
  for (Index t = 0; t < T; ++t) {
    const auto [m, se] = mean_se([&](Index i) { return kl[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)]; });
    r.kl.push_back(m);
    r.kl_se.push_back(se);
  }
  return r;
}

namespace {

template <typename S>
TrainResult train_impl(const TrainConfig& cfg, const std::filesystem::path& out_dir, const RowCallback& on_row) {
  const DatasetSource ds = build_dataset(cfg);
  Gtmm<S> model = build_model<S>(cfg);
  std::vector<Tensor<S>> params = model.parameters().tensors();
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  AdamState<S> adam(adam_cfg, params);
  const Index T = cfg.task.length(), B = cfg.batch, K = cfg.latent;
  const std::uint64_t seed = cfg.run_seed();
  nlohmann::json config_json = cfg.to_json();
  const std::string out_echo = config_json["out"];
  config_json.erase("out");

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    nlohmann::json echo = config_json;
    echo["out"] = out_echo.empty() ? out_dir.string() : out_echo;
    std::ofstream(out_dir / "config.json") << echo.dump(2) << '\n';
    csv.open(out_dir / "metrics.csv");
    if (!csv) throw std::runtime_error("cannot write " + (out_dir / "metrics.csv").string());
    csv << metrics_header(T) << '\n';
  }

  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;
  const auto log_row = [&](Index step) {
    const EvalResult e = evaluate_model(model, cfg, ds, seed, cfg.eval_batches);
    MetricsRow row{step, e.neg_elbo, e.kl, 0.0};
    if (cfg.wall_clock) row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (csv.is_open()) csv << format_row(row) << '\n' << std::flush;
    if (on_row) on_row(row);
    result.rows.push_back(std::move(row));
  };
  const auto checkpoint = [&](Index step) {
    Checkpoint c = make_checkpoint(model.parameters(), config_json, step);
    if (!out_dir.empty()) save_checkpoint(out_dir / ("ckpt_" + std::to_string(step) + ".bin"), c);
    return c;
  };

  log_row(0);
  for (Index step = 1; step <= cfg.steps; ++step) {
    const auto ids = batch_ids((step - 1) * B, B);
    try {
      const Batch<S> batch = make_batch<S>(draw_samples(ds, cfg.task, seed, "train", ids), ids);
      const auto noise = sample_noise<S>(seed, "train-noise", ids, T, K);
      const ElboBreakdown<S> elbo = model.sequence_elbo(batch.frames, batch.contexts, noise);
      model.parameters().zero_grad();
      backward(elbo.loss);
      clip_grad_norm<S>(params, cfg.clip_norm);
      adam_step<S>(params, adam);
    } catch (const NumericError&) {
      checkpoint(step - 1);
      throw;
    }
    if (step % cfg.eval_every == 0 || step == cfg.steps) log_row(step);
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps) checkpoint(step);
  }
  result.final_checkpoint = checkpoint(cfg.steps);
  return result;
}

template <typename S>
Gtmm<S> model_from(const Checkpoint& ckpt, const TrainConfig& cfg) {
  Gtmm<S> model = build_model<S>(cfg);
  apply_checkpoint(ckpt, model.parameters());
  return model;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir, const RowCallback& on_row) {
  cfg.validate();
  return cfg.precision == Precision::f64 ? train_impl<double>(cfg, out_dir, on_row)
                                         : train_impl<float>(cfg, out_dir, on_row);
}

EvalResult evaluate(const Checkpoint& ckpt, Index n_batches, std::uint64_t seed) {
  const TrainConfig cfg = TrainConfig::from_json(ckpt.config);
  cfg.validate();
  const DatasetSource ds = build_dataset(cfg);
  if (cfg.precision == Precision::f64) return evaluate_model(model_from<double>(ckpt, cfg), cfg, ds, seed, n_batches);
  return evaluate_model(model_from<float>(ckpt, cfg), cfg, ds, seed, n_batches);
}

namespace {

template <typename S>
std::vector<std::vector<std::vector<float>>> generate_impl(const Checkpoint& ckpt, const TrainConfig& cfg, Index n,
                                                           std::uint64_t seed, Index prefix) {
  const DatasetSource ds = build_dataset(cfg);
  const Gtmm<S> model = model_from<S>(ckpt, cfg);
  const Index T = cfg.task.length();
  if (prefix < 0 || prefix > T) throw std::invalid_argument("prefix must lie in [0, T]");
  const auto ids = batch_ids(0, n);
  const Batch<S> batch = make_batch<S>(draw_samples(ds, cfg.task, seed, "generate", ids), ids);
  const auto noise = sample_noise<S>(seed, "generate-noise", ids, T, cfg.latent);
  const std::vector<Tensor<S>> forced(batch.frames.begin(), batch.frames.begin() + prefix);
  const Generation<S> g = model.generate(batch.contexts, noise, forced);
  const Index P = cfg.task.image.pixels();
  std::vector<std::vector<std::vector<float>>> out(static_cast<std::size_t>(n));
  for (Index b = 0; b < n; ++b) {
    for (Index t = 0; t < T; ++t) {
      const auto& v = g.means[static_cast<std::size_t>(t)].value();
      std::vector<float> f(static_cast<std::size_t>(P));
      for (Index p = 0; p < P; ++p) f[static_cast<std::size_t>(p)] = static_cast<float>(v[b * P + p]);
      out[static_cast<std::size_t>(b)].push_back(std::move(f));
    }
  }
  return out;
}

}  // namespace

std::vector<std::vector<std::vector<float>>> generate_sequences(const Checkpoint& ckpt, Index n, std::uint64_t seed,
                                                                 Index prefix) {
  if (n < 1) throw std::invalid_argument("generate: need at least one sequence");
  const TrainConfig cfg = TrainConfig::from_json(ckpt.config);
  cfg.validate();
  if (cfg.precision == Precision::f64) return generate_impl<double>(ckpt, cfg, n, seed, prefix);
  return generate_impl<float>(ckpt, cfg, n, seed, prefix);
}

template Batch<float> make_batch<float>(const std::vector<SequenceSample>&, const std::vector<std::uint64_t>&);
template Batch<double> make_batch<double>(const std::vector<SequenceSample>&, const std::vector<std::uint64_t>&);
template Gtmm<float> build_model<float>(const TrainConfig&);
template Gtmm<double> build_model<double>(const TrainConfig&);
template EvalResult evaluate_model<float>(const Gtmm<float>&, const TrainConfig&, const DatasetSource&, std::uint64_t,
                                          Index);
template EvalResult evaluate_model<double>(const Gtmm<double>&, const TrainConfig&, const DatasetSource&,
                                           std::uint64_t, Index);

}  // namespace gtmm

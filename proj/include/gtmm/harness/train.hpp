#pragma once

// Training, evaluation and generation drivers. Runs write
//   <out>/config.json, <out>/metrics.csv, <out>/ckpt_<step>.bin
// and are bit-for-bit reproducible when wall_clock is off.

#include "gtmm/harness/checkpoint.hpp"
#include "gtmm/harness/config.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace gtmm {

template <typename S>
struct Batch {
  std::vector<Tensor<S>> frames;    // T of [B, P]
  std::vector<Tensor<S>> contexts;  // empty or T of [B, A]
  std::vector<std::uint64_t> ids;
};

/// Samples ids[b] of a named stream; sample b is generated from
/// stream_key(seed, stream, ids[b]).
std::vector<SequenceSample> draw_samples(const DatasetSource& ds, const TaskConfig& task, std::uint64_t seed,
                                         std::string_view stream, const std::vector<std::uint64_t>& ids);

template <typename S>
Batch<S> make_batch(const std::vector<SequenceSample>& samples, const std::vector<std::uint64_t>& ids);

struct MetricsRow {
  Index step = 0;
  double neg_elbo = 0.0;          // nats per frame
  std::vector<double> kl;         // batch-mean KL per frame
  double wall_s = 0.0;

  double last_frame_kl() const { return kl.back(); }
};

std::string metrics_header(Index T);
std::string format_row(const MetricsRow& row);
/// Parses a metrics.csv written by train.
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

struct EvalResult {
  Index batches = 0;
  double neg_elbo = 0.0;
  double neg_elbo_se = 0.0;
  std::vector<double> kl;     // mean over batches of the batch-mean KL per frame
  std::vector<double> kl_se;  // standard error across batches
};

/// Mean recall-interval KL over mean KL of frames 2..l (1-based).
double recall_ratio(const std::vector<double>& kl, Index l, Index k);

template <typename S>
Gtmm<S> build_model(const TrainConfig& cfg);

/// Batches i = 0..n-1 use sample ids i * B + b of the "eval" streams of `seed`.
template <typename S>
EvalResult evaluate_model(const Gtmm<S>& model, const TrainConfig& cfg, const DatasetSource& ds, std::uint64_t seed,
                          Index n_batches);

struct TrainResult {
  std::vector<MetricsRow> rows;
  Checkpoint final_checkpoint;
};

using RowCallback = std::function<void(const MetricsRow&)>;

/// out_dir may be empty, in which case nothing is written. on_row sees each
/// metrics row as it is logged.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir, const RowCallback& on_row = {});

EvalResult evaluate(const Checkpoint& ckpt, Index n_batches, std::uint64_t seed);

/// Generates n sequences from the checkpoint's prior (task actions, if any,
/// come from freshly drawn task samples) and writes them as a strip.
/// The first `prefix` frames of each row are teacher-forced.
std::vector<std::vector<std::vector<float>>> generate_sequences(const Checkpoint& ckpt, Index n, std::uint64_t seed,
                                                                 Index prefix = 0);

}  // namespace gtmm

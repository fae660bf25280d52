#pragma once

// Seeded sequence generators for the recall and dependency benchmarks, plus
// image sources (synthetic glyphs or IDX files). Images are stored as float
// in [0, 1], row-major C x H x W.

#include "gtmm/nets/nets.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gtmm {

struct DatasetSource {
  ImageDims dims;
  std::vector<float> pixels;                  // N * P
  std::vector<int> labels;                    // N
  std::vector<std::vector<Index>> by_class;   // label -> image indices
  std::vector<bool> holdout;                  // per class

  Index size() const { return static_cast<Index>(labels.size()); }
  Index classes() const { return static_cast<Index>(by_class.size()); }
  std::span<const float> image(Index i) const;

  /// Rebuilds by_class from labels and sizes holdout to match; throws if a
  /// class in [0, max label] is empty.
  void index_classes();
  std::vector<int> classes_in(std::optional<bool> holdout_flag) const;
};

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Images are rescaled from bytes to [0, 1] and, when `target` differs from
/// the stored size, area-averaged to it.
DatasetSource load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::optional<ImageDims> target = std::nullopt);

/// Loads train-images-idx3-ubyte / train-labels-idx1-ubyte from a directory.
DatasetSource load_idx_dir(const std::filesystem::path& dir, std::optional<ImageDims> target = std::nullopt);

/// Area-average resampling of one single-channel image.
std::vector<float> area_resize(std::span<const float> src, Index src_h, Index src_w, Index dst_h, Index dst_w);

/// Class templates are random three-segment polylines seeded by (seed,
/// class); each instance adds an integer shift in {-1, 0, 1}^2 and mild
/// noise. Needs dims of at least 6 x 6, single channel.
DatasetSource synth_glyphs(Index n_classes, Index per_class, ImageDims dims, std::uint64_t seed);

/// One glyph image, as synth_glyphs would produce it.
std::vector<float> render_glyph(Index cls, Index instance, ImageDims dims, std::uint64_t seed);

/// Alphabets of `glyphs` classes each; the last `holdout_per_alphabet`
/// glyphs of every alphabet are held out.
DatasetSource synth_alphabets(Index alphabets, Index glyphs, Index per_class, ImageDims dims, std::uint64_t seed,
                              Index holdout_per_alphabet = 3);

enum class TaskKind { perfect_recall, parity_recall, one_shot, dynamic_dependency, similarity_recall, mnist_map,
                      rotation };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);
bool needs_dataset(TaskKind kind);
bool is_copy_task(TaskKind kind);

enum class Split { train, test };

struct TaskConfig {
  TaskKind kind = TaskKind::perfect_recall;
  Index l = 10;
  Index k = 5;
  Index grid = 4;
  Index map_steps = 25;
  Index rotation_steps = 30;
  Index panorama = 32;           // panorama columns
  ImageDims image;               // frame dims (rotation uses image.height x image.width)
  Split split = Split::train;    // one-shot only

  Index length() const;
  Index action_width() const;
  void validate() const;
};

struct SequenceSample {
  TaskKind task = TaskKind::perfect_recall;
  std::uint64_t seed = 0;
  ImageDims dims;
  Index T = 0;
  Index action_width = 0;
  std::vector<float> frames;    // T * P
  std::vector<float> actions;   // T * action_width
  std::vector<int> labels;      // T
  std::vector<int> sources;     // copy tasks: prefix position each frame copies, -1 otherwise
  std::vector<int> cells;       // map: (row, col) per frame, 2 * T
  std::vector<double> angles;   // rotation: camera angle per frame
  Index offset = -1;            // similarity: 0-based start of the recalled block

  std::span<const float> frame(Index t) const;
  std::span<const float> action(Index t) const;
};

SequenceSample gen_perfect_recall(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed);
SequenceSample gen_parity_recall(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed);
SequenceSample gen_one_shot(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed);
SequenceSample gen_dynamic_dependency(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed);
SequenceSample gen_similarity_recall(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed);
SequenceSample gen_mnist_map(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed);
SequenceSample gen_rotation_standin(const TaskConfig& cfg, std::uint64_t seed);

/// Dispatches on cfg.kind; rotation ignores ds.
SequenceSample generate_sample(const DatasetSource& ds, const TaskConfig& cfg, std::uint64_t seed);

/// 1 for even digits, 0 for odd.
int parity_label(int digit);

/// Smoothstep schedule of the rotation stand-in: 4 pi * s(t / T).
double rotation_angle(Index t, Index T);
/// W-column window of a P-column panorama at `angle`, linear interpolation
/// with wraparound. panorama is H x P row-major.
std::vector<float> render_view(std::span<const float> panorama, Index H, Index P, Index W, double angle);

/// Re-derives the structure of a sample and checks it. Returns an empty
/// string when valid, otherwise a description of the first violation.
std::string validate_sample(const SequenceSample& s, const TaskConfig& cfg);

/// One JSON header line then, per sample, T * P little-endian float32 frame
/// values followed by T * A action values.
void write_dataset(const std::filesystem::path& path, const TaskConfig& cfg, std::uint64_t seed,
                   const std::vector<SequenceSample>& samples);

}  // namespace gtmm

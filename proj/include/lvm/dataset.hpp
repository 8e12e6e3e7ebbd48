#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lvm/codebook.hpp"
#include "lvm/image.hpp"

namespace lvm {

enum class TaskId : int { seg_toy = 0, pose_toy = 1, derain_toy = 2 };

const char* task_name(TaskId task);
TaskId task_from_name(const std::string& name);
constexpr int kTaskCount = 3;

/// One training unit: input image plus its annotation image.
struct SamplePair {
  Image input;
  Image annotation;
  TaskId task = TaskId::seg_toy;
};

enum class Provenance : int { original = 0, resampled = 1, augmented = 2 };

/// A sample reference. Images are regenerated on demand from the seeds, so a
/// manifest fully determines the dataset.
struct ManifestEntry {
  TaskId task = TaskId::seg_toy;
  std::uint64_t source_seed = 0;
  Provenance provenance = Provenance::original;
  std::uint64_t augment_seed = 0;  // meaningful when provenance == augmented
};

struct TaskSpec {
  TaskId task = TaskId::seg_toy;
  int count = 1;
};

struct DatasetManifest {
  int image_size = 32;
  int tokens_per_image = 64;
  std::vector<ManifestEntry> entries;  // grouped by task in declaration order

  std::int64_t sample_count(TaskId task) const;
  std::int64_t token_count(TaskId task) const;  // samples * 2 * tokens_per_image
  std::vector<TaskId> tasks() const;            // distinct tasks in entry order
};

// --- synthetic generators -------------------------------------------------

/// Integer-geometry description of one seg-toy shape, exposed so tests can
/// rasterize the scene independently of the generator's painting code.
struct SegShape {
  enum Kind { circle = 0, rect = 1, triangle = 2 };
  int kind = circle;
  int cx = 0, cy = 0, r = 0;                           // circle
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;                  // rect, inclusive
  int ax = 0, ay = 0, bx = 0, by = 0, px = 0, py = 0;  // triangle
  float input_color[3] = {0, 0, 0};
  float annotation_color[3] = {0, 0, 0};
};

/// The shapes gen_seg_sample(seed, image_size) paints, in paint order.
std::vector<SegShape> seg_scene(std::uint64_t seed, int image_size);

SamplePair gen_seg_sample(std::uint64_t seed, int image_size);
SamplePair gen_pose_sample(std::uint64_t seed, int image_size);
SamplePair gen_derain_sample(std::uint64_t seed, int image_size);
SamplePair gen_sample(TaskId task, std::uint64_t seed, int image_size);

std::vector<SamplePair> gen_seg_toy(int n, std::uint64_t seed, int image_size);
std::vector<SamplePair> gen_pose_toy(int n, std::uint64_t seed, int image_size);
std::vector<SamplePair> gen_derain_toy(int n, std::uint64_t seed, int image_size);

// --- augmentation ----------------------------------------------------------

/// Geometry of one random-resized-crop draw; flip applies after the resize.
struct CropParams {
  int y0 = 0;
  int x0 = 0;
  int crop_h = 0;
  int crop_w = 0;
  bool flip = false;
};

CropParams sample_crop_params(std::uint64_t seed, int height, int width);
Image apply_crop(const Image& img, const CropParams& params);

/// Random resized crop (area scale in [0.6,1], aspect in [3/4,4/3]) plus a
/// coin-flip horizontal flip, identical geometry on both images of the pair.
SamplePair augment(const SamplePair& pair, std::uint64_t seed);

// --- manifests and balancing -----------------------------------------------

DatasetManifest make_manifest(const std::vector<TaskSpec>& tasks, std::uint64_t seed,
                              int image_size, int tokens_per_image);

/// Regenerates the images behind an entry (applying augmentation if any).
SamplePair materialize(const ManifestEntry& entry, int image_size);

/// Repeats tail-task entries verbatim until every task reaches the head
/// task's token count. Added entries carry resampled provenance.
DatasetManifest balance_by_resampling(const DatasetManifest& m);

/// Extends tail tasks with augmented copies (fresh per-copy seeds, originals
/// retained) until token parity. Throws if a task would need more than
/// max_factor copies per original.
DatasetManifest balance_by_augmentation(const DatasetManifest& m, std::uint64_t seed,
                                        int max_factor = 100);

/// Keeps a deterministic fraction of each task's original entries (seeded
/// permutation prefix, so fractions nest and their complements are disjoint).
DatasetManifest data_fraction(const DatasetManifest& m, double fraction, std::uint64_t seed);

/// Restricts a manifest to one task's entries.
DatasetManifest manifest_subset(const DatasetManifest& m, TaskId task);

/// Every entry repeated `times` in total (copies carry resampled provenance);
/// the x100 fine-tuning protocol is this applied to a small manifest.
DatasetManifest repeat_entries(const DatasetManifest& m, int times);

/// Each task extended with augmented copies to exactly `factor` times its
/// original count (factor 1 keeps originals only).
DatasetManifest extend_by_augmentation(const DatasetManifest& m, int factor, std::uint64_t seed);

// --- visual sentences --------------------------------------------------------

struct VisualSentence {
  std::vector<std::int32_t> tokens;     // exactly context_length ids
  TaskId task = TaskId::seg_toy;
  std::vector<std::int32_t> boundaries;  // image start offsets, multiples of tokens_per_image
};

/// Tokenizes every manifest entry as [input tokens | annotation tokens] and
/// packs consecutive pairs of one task into fixed-length sentences; the
/// trailing partial sentence is dropped. With shuffle, sample order is
/// randomized within each task and sentence order globally; without, sentences
/// follow manifest order (the continual-learning setting).
std::vector<VisualSentence> build_sentences(const DatasetManifest& m, const Codebook& cb,
                                            int context_length, bool shuffle,
                                            std::uint64_t seed);

// --- files -------------------------------------------------------------------

// Manifest: line-delimited JSON {task, source_seed, provenance, augment_seed?}.
void write_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& path);

// Token cache: "DETK0001", u32 sentence length, u32 count, u16 token ids.
// One cache file holds one task's sentences; the task travels in the file
// name, so reading takes it (and the boundary stride) as arguments.
void write_token_cache(const std::string& path, const std::vector<VisualSentence>& sentences);
std::vector<VisualSentence> read_token_cache(const std::string& path, TaskId task,
                                             int tokens_per_image = 0);

}  // namespace lvm

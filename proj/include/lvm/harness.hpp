#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lvm/config.hpp"
#include "lvm/infer.hpp"
#include "lvm/train.hpp"

namespace lvm {

/// Codebook plus train/val manifests derived from one DatasetConfig. The
/// codebook is fit on a capped subset of the original training pairs, before
/// any balancing, so every balancing mode shares the same tokenizer.
struct DataBundle {
  Codebook codebook;
  DatasetManifest train;
  DatasetManifest val;
};

DataBundle prepare_data(const DatasetConfig& cfg);

/// Couples a model config to the tokenizer/dataset geometry (vocab, code dim,
/// context) so they cannot drift apart.
ModelConfig bind_model(ModelConfig model, const DatasetConfig& data);

/// Runs cfg.total_steps optimizer steps over the training sentences (epoch
/// order derived statelessly from cfg.seed, so resuming reproduces the exact
/// stream), then evaluates. With a teacher, every step distills.
std::vector<EvalRecord> run_training(ModelParameters<float>& params, OptimizerState& state,
                                     const TrainConfig& cfg, const Codebook& cb,
                                     const std::vector<VisualSentence>& train_sentences,
                                     const std::vector<VisualSentence>& val_sentences,
                                     ModelParameters<float>* teacher = nullptr,
                                     MetricsWriter* metrics = nullptr,
                                     std::int64_t eval_every = 0);

// --- experiments -----------------------------------------------------------

struct BalanceOutcome {
  std::string mode;  // unbalanced | resample | augment
  std::uint64_t seed;
  std::vector<EvalRecord> records;
};

/// Trains the long-tail mixture under each balancing mode at fixed steps and
/// identical seeds; emits a per-task metric table per run.
std::vector<BalanceOutcome> run_balance(const ExperimentConfig& cfg,
                                        const std::string& out_dir);

struct KdOutcome {
  std::uint64_t seed;
  std::vector<EvalRecord> teacher;
  std::vector<EvalRecord> student_scratch;
  std::vector<EvalRecord> student_kd;
  std::string teacher_checkpoint;
};

/// Teacher first, then scratch and distilled students from one init seed.
std::vector<KdOutcome> run_kd(const ExperimentConfig& cfg, const std::string& out_dir);

/// Table-5-style matrix: one row of per-task EvalRecords per completed stage.
struct StageMatrix {
  std::vector<TaskId> stage_order;
  std::vector<TaskId> eval_tasks;
  std::vector<std::vector<EvalRecord>> rows;
};

struct ContinualOutcome {
  std::string scheme;  // continuous | rescaled
  StageMatrix matrix;
};

ContinualOutcome run_continual(const ExperimentConfig& cfg, const std::string& scheme,
                               const std::string& out_dir);

/// Per-stage (start, end) learning-rate ranges of the continuous scheme. For
/// three stages these are fixed fractions of peak_lr (at the default
/// 1.5e-4 -> 1.5e-5 pair: 1.5e-4~8e-5, 8e-5~5e-5, 5e-5~1.5e-5); other stage
/// counts sample one global cosine at equal boundaries.
std::vector<std::pair<double, double>> continual_stage_lrs(const TrainConfig& cfg,
                                                           std::size_t n_stages,
                                                           std::int64_t steps_per_stage);

struct ScalingPoint {
  std::string axis;  // fraction | augment
  double x = 0.0;
  std::int64_t train_tokens = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double perplexity = 0.0;
};

std::vector<ScalingPoint> run_scaling(const ExperimentConfig& cfg, const std::string& out_dir);

struct ForegroundOutcome {
  std::uint64_t seed;
  double ceiling_miou = 0.0;   // decode(encode(gt)) through the same pipeline
  double base_miou = 0.0;
  double finetuned_miou = 0.0;
  std::vector<double> base_ious;
  std::vector<double> finetuned_ious;
};

std::vector<ForegroundOutcome> run_foreground(const ExperimentConfig& cfg,
                                              const std::string& out_dir);

// --- reporting ----------------------------------------------------------------

/// Renders a CSV file as an aligned text table.
std::string render_csv_table(const std::string& csv_path);

/// Simple polyline plot of (x, y) series into a PPM image.
void write_line_plot(const std::string& path, const std::vector<double>& xs,
                     const std::vector<std::vector<double>>& series, int width = 480,
                     int height = 320);

}  // namespace lvm

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lvm/dataset.hpp"
#include "lvm/model.hpp"

namespace lvm {

struct KdConfig {
  std::string teacher_checkpoint;  // optional, teacher may be passed in-process
  double temperature = 1.0;
  double lambda = 0.5;
};

struct TrainConfig {
  double peak_lr = 1.5e-4;
  double final_lr = 1.5e-5;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double warmup_frac = 0.0056;
  std::int64_t total_steps = 1000;
  std::int64_t equivalent_batch_tokens = 512;
  std::int64_t micro_batch_tokens = 512;
  int grad_accum_steps = 1;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  bool debug_checks = false;  // fail fast on any non-finite op output
  std::optional<KdConfig> kd;
  // When set, the schedule is a plain cosine segment start->end with no
  // warmup; later stages of the continual-learning schedules use this.
  std::optional<std::pair<double, double>> lr_segment;
  // Optimizer steps already taken when this run starts. total_steps counts
  // the steps of THIS run; the schedule spans [offset, offset + total].
  std::int64_t schedule_offset = 0;

  void validate() const;
};

/// Per-parameter AdamW moments plus the accumulation counter.
struct OptimizerState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::int64_t step = 0;        // optimizer steps taken
  int micro_in_flight = 0;      // micro-batches accumulated since last step
};

OptimizerState make_optimizer_state(ModelParameters<float>& params);

/// Linear warmup to peak over ceil(warmup_frac * total) steps, then cosine
/// decay to final_lr. `step` counts completed steps, so lr(warmup_end) == peak
/// and lr(total_steps) == final.
double cosine_lr(std::int64_t step, const TrainConfig& cfg);

/// Cosine segment from lr_start to lr_end over `total` steps (no warmup);
/// the continual-learning schedules are stitched from these.
double cosine_segment_lr(std::int64_t step, std::int64_t total, double lr_start, double lr_end);

/// One bias-corrected AdamW update from the current grad buffers. Decoupled
/// weight decay applies to rank >= 2 weights only, never to norm gains.
void adamw_step(ModelParameters<float>& params, OptimizerState& state, double lr,
                const TrainConfig& cfg);

struct LossReport {
  double loss = 0.0;
  double accuracy = 0.0;  // percent of scored positions
  double lr = 0.0;        // of the optimizer step, when one happened
  bool stepped = false;
  std::int64_t tokens = 0;
};

/// A batch of same-length sentences flattened to [batch, len] ids.
struct TokenBatch {
  int batch = 0;
  int len = 0;
  std::vector<std::int32_t> tokens;
};

TokenBatch pack_batch(const std::vector<const VisualSentence*>& sentences);

/// One micro-step of next-token training: forward, shifted cross entropy,
/// backward, grad accumulation; every grad_accum_steps calls the grads are
/// averaged, clipped and applied. Aborts on a non-finite loss.
LossReport train_step(ModelParameters<float>& params, const TokenBatch& batch,
                      OptimizerState& state, const TrainConfig& cfg, const Codebook& cb);

/// Like train_step with loss (1-lambda)*CE + lambda*T^2*KL(teacher || student).
/// The teacher runs without a tape and must share the student's vocabulary.
LossReport distill_step(ModelParameters<float>& params, ModelParameters<float>& teacher,
                        const TokenBatch& batch, OptimizerState& state, const TrainConfig& cfg,
                        const Codebook& cb);

// --- checkpoints ("DELVM001") -------------------------------------------------

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  Codebook codebook;
  ModelParameters<float> params;
  std::optional<OptimizerState> optimizer;
  std::array<std::uint64_t, 4> rng_state{};
  std::uint64_t step = 0;
};

void save_checkpoint(const std::string& path, Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// --- metrics stream -----------------------------------------------------------

/// Append-only CSV: step,split,task,loss,accuracy,perplexity,lr,tokens_seen.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::string& path);
  void append(std::int64_t step, const std::string& split, const std::string& task, double loss,
              double accuracy, double perplexity, double lr, std::int64_t tokens_seen);

 private:
  std::string path_;
};

}  // namespace lvm

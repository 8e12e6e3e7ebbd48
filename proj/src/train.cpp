#include "lvm/train.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "lvm/config.hpp"
#include "lvm/ops.hpp"

namespace lvm {

void TrainConfig::validate() const {
  if (total_steps < 1) throw std::invalid_argument("train config: total_steps must be >= 1");
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) {
    throw std::invalid_argument("train config: warmup_frac must be in (0,1)");
  }
  if (micro_batch_tokens < 1 || grad_accum_steps < 1) {
    throw std::invalid_argument("train config: batch sizes must be >= 1");
  }
  if (equivalent_batch_tokens != micro_batch_tokens * grad_accum_steps) {
    throw std::invalid_argument(
        "train config: equivalent_batch_tokens (" + std::to_string(equivalent_batch_tokens) +
        ") != micro_batch_tokens (" + std::to_string(micro_batch_tokens) + ") x grad_accum_steps (" +
        std::to_string(grad_accum_steps) + ")");
  }
  if (kd.has_value() && !(kd->temperature > 0.0)) {
    throw std::invalid_argument("train config: kd temperature must be positive");
  }
  if (kd.has_value() && (kd->lambda < 0.0 || kd->lambda > 1.0)) {
    throw std::invalid_argument("train config: kd lambda must be in [0,1]");
  }
  if (schedule_offset < 0) {
    throw std::invalid_argument("train config: schedule_offset must be >= 0");
  }
}

double cosine_lr(std::int64_t step, const TrainConfig& cfg) {
  step -= cfg.schedule_offset;
  if (cfg.lr_segment.has_value()) {
    return cosine_segment_lr(step, cfg.total_steps, cfg.lr_segment->first,
                             cfg.lr_segment->second);
  }
  const std::int64_t warmup =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(
                                    std::ceil(cfg.warmup_frac * static_cast<double>(cfg.total_steps))));
  if (step <= warmup) {
    return cfg.peak_lr * static_cast<double>(std::max<std::int64_t>(step, 0)) /
           static_cast<double>(warmup);
  }
  if (step >= cfg.total_steps || cfg.total_steps <= warmup) return cfg.final_lr;
  const double t = static_cast<double>(step - warmup) / static_cast<double>(cfg.total_steps - warmup);
  return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + std::cos(M_PI * t));
}

double cosine_segment_lr(std::int64_t step, std::int64_t total, double lr_start, double lr_end) {
  if (total < 1) throw std::invalid_argument("cosine_segment_lr: total must be >= 1");
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return lr_end + (lr_start - lr_end) * 0.5 * (1.0 + std::cos(M_PI * t));
}

OptimizerState make_optimizer_state(ModelParameters<float>& params) {
  OptimizerState state;
  params.for_each([&](const std::string&, Tensor<float>& t) {
    state.m.emplace_back(static_cast<std::size_t>(t.numel()), 0.0f);
    state.v.emplace_back(static_cast<std::size_t>(t.numel()), 0.0f);
  });
  return state;
}

void adamw_step(ModelParameters<float>& params, OptimizerState& state, double lr,
                const TrainConfig& cfg) {
  const std::int64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const float beta1 = static_cast<float>(cfg.beta1);
  const float beta2 = static_cast<float>(cfg.beta2);
  const float eps = static_cast<float>(cfg.adam_eps);

  std::size_t slot = 0;
  params.for_each([&](const std::string&, Tensor<float>& p) {
    if (slot >= state.m.size() ||
        state.m[slot].size() != static_cast<std::size_t>(p.numel())) {
      throw std::invalid_argument("adamw_step: optimizer state does not match parameters");
    }
    auto& m = state.m[slot];
    auto& v = state.v[slot];
    const auto& g = p.grad_view();
    auto& w = p.value();
    const bool decay = p.rank() >= 2 && cfg.weight_decay > 0.0;
    const float wd_step = decay ? static_cast<float>(lr * cfg.weight_decay) : 0.0f;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
      const float mhat = static_cast<float>(m[i] / bc1);
      const float vhat = static_cast<float>(v[i] / bc2);
      w[i] -= static_cast<float>(lr) * (mhat / (std::sqrt(vhat) + eps));
      if (decay) w[i] -= wd_step * w[i];
    }
    ++slot;
  });
  state.step = t;
}

TokenBatch pack_batch(const std::vector<const VisualSentence*>& sentences) {
  if (sentences.empty()) throw std::invalid_argument("pack_batch: empty batch");
  TokenBatch batch;
  batch.batch = static_cast<int>(sentences.size());
  batch.len = static_cast<int>(sentences[0]->tokens.size());
  batch.tokens.reserve(static_cast<std::size_t>(batch.batch) * batch.len);
  for (const auto* s : sentences) {
    if (static_cast<int>(s->tokens.size()) != batch.len) {
      throw std::invalid_argument("pack_batch: sentences have mixed lengths");
    }
    batch.tokens.insert(batch.tokens.end(), s->tokens.begin(), s->tokens.end());
  }
  return batch;
}

namespace {

// targets[l] = tokens[l+1]; the final position has none and is skipped via
// ignore_last in the loss
std::vector<std::int32_t> shift_targets(const TokenBatch& batch) {
  std::vector<std::int32_t> targets(batch.tokens.size(), 0);
  for (int b = 0; b < batch.batch; ++b) {
    const std::size_t row = static_cast<std::size_t>(b) * batch.len;
    for (int l = 0; l + 1 < batch.len; ++l) {
      targets[row + l] = batch.tokens[row + l + 1];
    }
  }
  return targets;
}

double token_accuracy(const Tensor<float>& logits, const std::vector<std::int32_t>& targets) {
  const int b = logits.dim(0);
  const int l = logits.dim(1);
  const int v = logits.dim(2);
  std::int64_t correct = 0;
  std::int64_t total = 0;
  for (int bi = 0; bi < b; ++bi) {
    for (int li = 0; li + 1 < l; ++li) {
      const float* row = logits.value().data() + (static_cast<std::int64_t>(bi) * l + li) * v;
      int best = 0;
      for (int j = 1; j < v; ++j) {
        if (row[j] > row[best]) best = j;
      }
      correct += best == targets[static_cast<std::size_t>(bi) * l + li] ? 1 : 0;
      ++total;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

// Averages accumulated grads, applies global-norm clipping and one AdamW step.
void finish_accumulation(ModelParameters<float>& params, OptimizerState& state,
                         const TrainConfig& cfg, LossReport& report) {
  if (state.micro_in_flight < cfg.grad_accum_steps) return;
  if (cfg.grad_accum_steps > 1) {
    const float inv = 1.0f / static_cast<float>(cfg.grad_accum_steps);
    params.for_each([&](const std::string&, Tensor<float>& p) {
      for (auto& g : p.grad()) g *= inv;
    });
  }
  if (cfg.grad_clip > 0.0) {
    double sq = 0.0;
    params.for_each([&](const std::string&, Tensor<float>& p) {
      for (const float g : p.grad_view()) sq += static_cast<double>(g) * g;
    });
    const double norm = std::sqrt(sq);
    if (norm > cfg.grad_clip) {
      const float factor = static_cast<float>(cfg.grad_clip / norm);
      params.for_each([&](const std::string&, Tensor<float>& p) {
        for (auto& g : p.grad()) g *= factor;
      });
    }
  }
  const double lr = cosine_lr(state.step + 1, cfg);
  adamw_step(params, state, lr, cfg);
  params.zero_grad();
  state.micro_in_flight = 0;
  report.stepped = true;
  report.lr = lr;
}

struct DebugCheckGuard {
  explicit DebugCheckGuard(bool on) : prev(debug_checks_enabled()) {
    if (on) set_debug_checks(true);
  }
  ~DebugCheckGuard() { set_debug_checks(prev); }
  bool prev;
};

}  // namespace

LossReport train_step(ModelParameters<float>& params, const TokenBatch& batch,
                      OptimizerState& state, const TrainConfig& cfg, const Codebook& cb) {
  DebugCheckGuard debug(cfg.debug_checks);
  const std::vector<std::int32_t> targets = shift_targets(batch);
  params.set_requires_grad(true);

  Tape<float> tape;
  LossReport report;
  {
    TapeScope<float> scope(&tape);
    Tensor<float> logits = forward(params, batch.tokens, batch.batch, batch.len, cb);
    Tensor<float> loss = cross_entropy_next_token(logits, targets, /*ignore_last=*/true);
    report.loss = static_cast<double>(loss.item());
    if (!std::isfinite(report.loss)) {
      throw std::runtime_error("train_step: loss is not finite at optimizer step " +
                               std::to_string(state.step) + " (lr " +
                               std::to_string(cosine_lr(state.step + 1, cfg)) +
                               "); aborting run");
    }
    report.accuracy = token_accuracy(logits, targets);
    tape.backward(loss);
  }
  report.tokens = static_cast<std::int64_t>(batch.tokens.size());
  state.micro_in_flight += 1;
  finish_accumulation(params, state, cfg, report);
  return report;
}

LossReport distill_step(ModelParameters<float>& params, ModelParameters<float>& teacher,
                        const TokenBatch& batch, OptimizerState& state, const TrainConfig& cfg,
                        const Codebook& cb) {
  if (!cfg.kd.has_value()) {
    throw std::invalid_argument("distill_step: train config has no kd section");
  }
  if (teacher.config.vocab_size != params.config.vocab_size) {
    throw std::invalid_argument("distill_step: teacher vocab " +
                                std::to_string(teacher.config.vocab_size) +
                                " != student vocab " + std::to_string(params.config.vocab_size));
  }
  DebugCheckGuard debug(cfg.debug_checks);
  const std::vector<std::int32_t> targets = shift_targets(batch);
  const float lambda = static_cast<float>(cfg.kd->lambda);
  const float temperature = static_cast<float>(cfg.kd->temperature);

  // frozen teacher: no tape, no grads
  teacher.set_requires_grad(false);
  Tensor<float> teacher_logits;
  {
    TapeScope<float> off(nullptr);
    teacher_logits = forward(teacher, batch.tokens, batch.batch, batch.len, cb);
  }

  params.set_requires_grad(true);
  Tape<float> tape;
  LossReport report;
  {
    TapeScope<float> scope(&tape);
    Tensor<float> logits = forward(params, batch.tokens, batch.batch, batch.len, cb);
    Tensor<float> ce = cross_entropy_next_token(logits, targets, /*ignore_last=*/true);
    Tensor<float> kl = kd_kl_loss(logits, teacher_logits, temperature, /*ignore_last=*/true);
    Tensor<float> loss = add(scale(ce, 1.0f - lambda), scale(kl, lambda));
    report.loss = static_cast<double>(loss.item());
    if (!std::isfinite(report.loss)) {
      throw std::runtime_error("distill_step: loss is not finite at optimizer step " +
                               std::to_string(state.step) + "; aborting run");
    }
    report.accuracy = token_accuracy(logits, targets);
    tape.backward(loss);
  }
  report.tokens = static_cast<std::int64_t>(batch.tokens.size());
  state.micro_in_flight += 1;
  finish_accumulation(params, state, cfg, report);
  return report;
}

// --- checkpoints ----------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'E', 'L', 'V', 'M', '0', '0', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error(std::string("truncated checkpoint reading ") + what);
  return v;
}

void write_floats(std::ostream& out, const std::vector<float>& data) {
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
}

void read_floats(std::istream& in, std::vector<float>& data, const char* what) {
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw std::runtime_error(std::string("truncated checkpoint reading ") + what);
}

}  // namespace

void save_checkpoint(const std::string& path, Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_raw(out, kCheckpointVersion);
  write_raw(out, static_cast<std::uint64_t>(ckpt.step));

  nlohmann::json j{{"model", ckpt.model}, {"train", ckpt.train}};
  const std::string text = j.dump();
  write_raw(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  write_codebook_stream(out, ckpt.codebook);

  ckpt.params.for_each([&](const std::string&, Tensor<float>& t) { write_floats(out, t.value()); });

  const std::uint8_t has_opt = ckpt.optimizer.has_value() ? 1 : 0;
  write_raw(out, has_opt);
  if (has_opt) {
    for (const auto& m : ckpt.optimizer->m) write_floats(out, m);
    for (const auto& v : ckpt.optimizer->v) write_floats(out, v);
    write_raw(out, static_cast<std::int64_t>(ckpt.optimizer->step));
    write_raw(out, static_cast<std::int32_t>(ckpt.optimizer->micro_in_flight));
  }
  for (const std::uint64_t w : ckpt.rng_state) write_raw(out, w);
  if (!out) throw std::runtime_error("short write to '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("'" + path + "' is not a checkpoint (bad DELVM001 magic)");
  }
  const std::uint32_t version = read_raw<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.step = read_raw<std::uint64_t>(in, "step");

  const std::uint32_t json_len = read_raw<std::uint32_t>(in, "config length");
  std::string text(json_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(json_len));
  if (!in) throw std::runtime_error("truncated checkpoint reading config");
  const nlohmann::json j = nlohmann::json::parse(text);
  ckpt.model = j.at("model").get<ModelConfig>();
  ckpt.train = j.at("train").get<TrainConfig>();

  ckpt.codebook = read_codebook_stream(in);

  ckpt.params = make_params_like<float>(ckpt.model);
  ckpt.params.for_each(
      [&](const std::string& name, Tensor<float>& t) { read_floats(in, t.value(), name.c_str()); });

  const std::uint8_t has_opt = read_raw<std::uint8_t>(in, "optimizer flag");
  if (has_opt) {
    OptimizerState state = make_optimizer_state(ckpt.params);
    for (auto& m : state.m) read_floats(in, m, "optimizer m");
    for (auto& v : state.v) read_floats(in, v, "optimizer v");
    state.step = read_raw<std::int64_t>(in, "optimizer step");
    state.micro_in_flight = read_raw<std::int32_t>(in, "optimizer micro counter");
    ckpt.optimizer = std::move(state);
  }
  for (auto& w : ckpt.rng_state) w = read_raw<std::uint64_t>(in, "rng state");
  return ckpt;
}

// --- metrics -----------------------------------------------------------------------

MetricsWriter::MetricsWriter(const std::string& path) : path_(path) {
  if (path_.empty()) return;
  if (!std::filesystem::exists(path_)) {
    std::ofstream out(path_);
    if (!out) throw std::runtime_error("cannot open metrics file '" + path_ + "'");
    out << "step,split,task,loss,accuracy,perplexity,lr,tokens_seen\n";
  }
}

void MetricsWriter::append(std::int64_t step, const std::string& split, const std::string& task,
                           double loss, double accuracy, double perplexity, double lr,
                           std::int64_t tokens_seen) {
  if (path_.empty()) return;
  std::ofstream out(path_, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to metrics file '" + path_ + "'");
  out << step << "," << split << "," << task << "," << loss << "," << accuracy << ","
      << perplexity << "," << lr << "," << tokens_seen << "\n";
}

}  // namespace lvm

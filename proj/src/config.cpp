#include "lvm/config.hpp"

#include <fstream>
#include <stdexcept>

namespace lvm {

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  if (!j.is_object()) throw std::runtime_error(where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw std::runtime_error(where + ": unknown key '" + item.key() + "'");
    }
  }
}

namespace {

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{{"hidden_dim", cfg.hidden_dim},
                     {"mlp_dim", cfg.mlp_dim},
                     {"n_heads", cfg.n_heads},
                     {"n_layers", cfg.n_layers},
                     {"vocab_size", cfg.vocab_size},
                     {"context_length", cfg.context_length},
                     {"code_dim", cfg.code_dim},
                     {"rope_base", cfg.rope_base},
                     {"norm_eps", cfg.norm_eps},
                     {"learned_embedding", cfg.learned_embedding}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  reject_unknown_keys(j,
                      {"name", "hidden_dim", "mlp_dim", "n_heads", "n_layers", "vocab_size",
                       "context_length", "code_dim", "rope_base", "norm_eps",
                       "learned_embedding"},
                      "model config");
  if (j.contains("name")) cfg = named_config(j.at("name").get<std::string>());
  maybe(j, "hidden_dim", cfg.hidden_dim);
  maybe(j, "mlp_dim", cfg.mlp_dim);
  maybe(j, "n_heads", cfg.n_heads);
  maybe(j, "n_layers", cfg.n_layers);
  maybe(j, "vocab_size", cfg.vocab_size);
  maybe(j, "context_length", cfg.context_length);
  maybe(j, "code_dim", cfg.code_dim);
  maybe(j, "rope_base", cfg.rope_base);
  maybe(j, "norm_eps", cfg.norm_eps);
  maybe(j, "learned_embedding", cfg.learned_embedding);
  cfg.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
  j = nlohmann::json{{"peak_lr", cfg.peak_lr},
                     {"final_lr", cfg.final_lr},
                     {"weight_decay", cfg.weight_decay},
                     {"beta1", cfg.beta1},
                     {"beta2", cfg.beta2},
                     {"adam_eps", cfg.adam_eps},
                     {"warmup_frac", cfg.warmup_frac},
                     {"total_steps", cfg.total_steps},
                     {"equivalent_batch_tokens", cfg.equivalent_batch_tokens},
                     {"micro_batch_tokens", cfg.micro_batch_tokens},
                     {"grad_accum_steps", cfg.grad_accum_steps},
                     {"seed", cfg.seed},
                     {"grad_clip", cfg.grad_clip},
                     {"debug_checks", cfg.debug_checks},
                     {"schedule_offset", cfg.schedule_offset}};
  if (cfg.kd.has_value()) {
    j["kd"] = nlohmann::json{{"teacher_checkpoint", cfg.kd->teacher_checkpoint},
                             {"temperature", cfg.kd->temperature},
                             {"lambda", cfg.kd->lambda}};
  }
  if (cfg.lr_segment.has_value()) {
    j["lr_segment"] = nlohmann::json::array({cfg.lr_segment->first, cfg.lr_segment->second});
  }
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
  reject_unknown_keys(j,
                      {"peak_lr", "final_lr", "weight_decay", "beta1", "beta2", "adam_eps",
                       "warmup_frac", "total_steps", "equivalent_batch_tokens",
                       "micro_batch_tokens", "grad_accum_steps", "seed", "grad_clip",
                       "debug_checks", "kd", "lr_segment", "schedule_offset"},
                      "train config");
  maybe(j, "peak_lr", cfg.peak_lr);
  maybe(j, "final_lr", cfg.final_lr);
  maybe(j, "weight_decay", cfg.weight_decay);
  maybe(j, "beta1", cfg.beta1);
  maybe(j, "beta2", cfg.beta2);
  maybe(j, "adam_eps", cfg.adam_eps);
  maybe(j, "warmup_frac", cfg.warmup_frac);
  maybe(j, "total_steps", cfg.total_steps);
  maybe(j, "equivalent_batch_tokens", cfg.equivalent_batch_tokens);
  maybe(j, "micro_batch_tokens", cfg.micro_batch_tokens);
  maybe(j, "grad_accum_steps", cfg.grad_accum_steps);
  maybe(j, "seed", cfg.seed);
  maybe(j, "grad_clip", cfg.grad_clip);
  maybe(j, "debug_checks", cfg.debug_checks);
  maybe(j, "schedule_offset", cfg.schedule_offset);
  if (j.contains("kd") && !j.at("kd").is_null()) {
    const auto& jk = j.at("kd");
    reject_unknown_keys(jk, {"teacher_checkpoint", "temperature", "lambda"}, "kd config");
    KdConfig kd;
    maybe(jk, "teacher_checkpoint", kd.teacher_checkpoint);
    maybe(jk, "temperature", kd.temperature);
    maybe(jk, "lambda", kd.lambda);
    cfg.kd = kd;
  }
  if (j.contains("lr_segment") && !j.at("lr_segment").is_null()) {
    const auto& seg = j.at("lr_segment");
    if (!seg.is_array() || seg.size() != 2) {
      throw std::runtime_error("train config: lr_segment must be [start, end]");
    }
    cfg.lr_segment = std::make_pair(seg[0].get<double>(), seg[1].get<double>());
  }
  cfg.validate();
}

void DatasetConfig::validate() const {
  if (image_size < 4 || patch < 1 || image_size % patch != 0) {
    throw std::runtime_error("dataset config: image_size must be a positive multiple of patch");
  }
  if (codebook_k < 1 || codebook_k > 0xFFFF) {
    throw std::runtime_error("dataset config: codebook_k must fit a u16 token id");
  }
  if (codebook_iters < 1 || codebook_fit_samples < 1 || val_count < 1) {
    throw std::runtime_error("dataset config: counts must be >= 1");
  }
  const int pair = 2 * tokens_per_image();
  if (context_length < pair || context_length % pair != 0) {
    throw std::runtime_error("dataset config: context_length must be a positive multiple of " +
                             std::to_string(pair));
  }
  if (tasks.empty()) throw std::runtime_error("dataset config: no tasks");
}

void to_json(nlohmann::json& j, const DatasetConfig& cfg) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : cfg.tasks) {
    tasks.push_back({{"name", task_name(t.task)}, {"count", t.count}});
  }
  j = nlohmann::json{{"image_size", cfg.image_size},
                     {"patch", cfg.patch},
                     {"codebook_k", cfg.codebook_k},
                     {"codebook_iters", cfg.codebook_iters},
                     {"codebook_fit_samples", cfg.codebook_fit_samples},
                     {"context_length", cfg.context_length},
                     {"val_count", cfg.val_count},
                     {"tasks", tasks},
                     {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, DatasetConfig& cfg) {
  reject_unknown_keys(j,
                      {"image_size", "patch", "codebook_k", "codebook_iters",
                       "codebook_fit_samples", "context_length", "val_count", "tasks", "seed"},
                      "dataset config");
  maybe(j, "image_size", cfg.image_size);
  maybe(j, "patch", cfg.patch);
  maybe(j, "codebook_k", cfg.codebook_k);
  maybe(j, "codebook_iters", cfg.codebook_iters);
  maybe(j, "codebook_fit_samples", cfg.codebook_fit_samples);
  maybe(j, "context_length", cfg.context_length);
  maybe(j, "val_count", cfg.val_count);
  maybe(j, "seed", cfg.seed);
  if (j.contains("tasks")) {
    cfg.tasks.clear();
    for (const auto& jt : j.at("tasks")) {
      reject_unknown_keys(jt, {"name", "count"}, "task spec");
      TaskSpec spec;
      spec.task = task_from_name(jt.at("name").get<std::string>());
      if (jt.contains("count")) spec.count = jt.at("count").get<int>();
      cfg.tasks.push_back(spec);
    }
  }
  cfg.validate();
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  reject_unknown_keys(j, {"dataset", "model", "train", "experiment"}, "config");
  ExperimentConfig cfg;
  if (j.contains("dataset")) cfg.dataset = j.at("dataset").get<DatasetConfig>();
  if (j.contains("model")) cfg.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) cfg.train = j.at("train").get<TrainConfig>();
  if (j.contains("experiment")) cfg.experiment = j.at("experiment");
  return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

}  // namespace lvm

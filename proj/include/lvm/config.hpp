#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "lvm/dataset.hpp"
#include "lvm/model.hpp"
#include "lvm/train.hpp"

namespace lvm {

// JSON (de)serialization for the config types plus the experiment document.
// Parsing is strict: unknown keys are rejected with the offending key named.

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// Dataset geometry and task mixture for the generators and tokenizer.
struct DatasetConfig {
  int image_size = 32;
  int patch = 4;
  int codebook_k = 512;
  int codebook_iters = 25;
  int codebook_fit_samples = 256;  // pairs used for fitting (both images each)
  int context_length = 256;
  int val_count = 24;  // held-out samples per task
  std::vector<TaskSpec> tasks{{TaskId::seg_toy, 2000}, {TaskId::pose_toy, 100},
                              {TaskId::derain_toy, 50}};
  std::uint64_t seed = 1;

  int tokens_per_image() const {
    return (image_size / patch) * (image_size / patch);
  }
  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetConfig& cfg);
void from_json(const nlohmann::json& j, DatasetConfig& cfg);

/// The single JSON document accepted by the CLI: dataset / model / train /
/// experiment sections, each optional and strict.
struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model = named_config("tiny");
  TrainConfig train;
  nlohmann::json experiment;  // kind-specific keys, validated by the harness

  static ExperimentConfig from_file(const std::string& path);
  static ExperimentConfig from_json_text(const std::string& text);
};

/// Throws when `j` holds a key outside `allowed`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& where);

}  // namespace lvm

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lvm/dataset.hpp"
#include "lvm/model.hpp"

namespace lvm {

/// Example input/annotation pairs followed by the query image (§-style visual
/// prompting: the pairs define the task, the model completes the annotation).
struct Prompt {
  std::vector<SamplePair> examples;
  Image query;
};

struct EvalRecord {
  TaskId task = TaskId::seg_toy;
  double loss = 0.0;
  double accuracy = 0.0;    // percent
  double perplexity = 1.0;  // always exp(loss)
};

enum class DecodeMode { greedy, temperature };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Autoregressive continuation of `prompt_tokens` by n tokens through the KV
/// cache. Greedy picks the lowest-id maximum; temperature sampling is seeded.
std::vector<std::int32_t> generate(ModelParameters<float>& params,
                                   const std::vector<std::int32_t>& prompt_tokens, int n,
                                   const Codebook& cb, const DecodeOptions& opts = {});

/// Tokenizes examples + query, generates one image worth of tokens, decodes.
Image prompted_inference(ModelParameters<float>& params, const Codebook& cb,
                         const Prompt& prompt, const DecodeOptions& opts = {});

/// Re-synthesizes everything after the first keep_tokens tokens of an image.
Image inpaint(ModelParameters<float>& params, const Codebook& cb, const Image& image,
              int keep_tokens, const DecodeOptions& opts = {});

/// Per-task shifted cross-entropy metrics over held-out sentences.
std::vector<EvalRecord> evaluate(ModelParameters<float>& params,
                                 const std::vector<VisualSentence>& sentences, const Codebook& cb,
                                 int eval_batch_sentences = 8);

/// gray = (r+g+b)/3 > threshold. The default makes "very low threshold"
/// concrete for black-background prompts.
BinaryMask postprocess_binary(const Image& img, float threshold = 0.08f);

/// Foreground intersection over union; both-empty counts as perfect (1.0).
double miou(const BinaryMask& pred, const BinaryMask& gt);
double mean_miou(const std::vector<double>& ious);

}  // namespace lvm

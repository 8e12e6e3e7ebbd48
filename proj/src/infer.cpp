#include "lvm/infer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "lvm/ops.hpp"
#include "lvm/rng.hpp"
#include "lvm/train.hpp"

namespace lvm {

namespace {

int pick_token(const std::vector<float>& logits, const DecodeOptions& opts, Rng& rng) {
  if (opts.mode == DecodeMode::greedy) {
    int best = 0;
    for (int j = 1; j < static_cast<int>(logits.size()); ++j) {
      if (logits[static_cast<std::size_t>(j)] > logits[static_cast<std::size_t>(best)]) best = j;
    }
    return best;
  }
  // temperature sampling via inverse CDF over the softmax
  const double temp = std::max(opts.temperature, 1e-6);
  double mx = logits[0];
  for (const float v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> probs(logits.size());
  double denom = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    probs[j] = std::exp((static_cast<double>(logits[j]) - mx) / temp);
    denom += probs[j];
  }
  const double target = rng.uniform() * denom;
  double acc = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    acc += probs[j];
    if (acc >= target) return static_cast<int>(j);
  }
  return static_cast<int>(probs.size()) - 1;
}

}  // namespace

std::vector<std::int32_t> generate(ModelParameters<float>& params,
                                   const std::vector<std::int32_t>& prompt_tokens, int n,
                                   const Codebook& cb, const DecodeOptions& opts) {
  if (n < 0) throw std::invalid_argument("generate: n must be >= 0");
  if (prompt_tokens.empty()) throw std::invalid_argument("generate: empty prompt");
  if (static_cast<int>(prompt_tokens.size()) + n > params.config.context_length) {
    throw std::runtime_error("generate: prompt of " + std::to_string(prompt_tokens.size()) +
                             " plus " + std::to_string(n) + " new tokens exceeds context " +
                             std::to_string(params.config.context_length));
  }
  TapeScope<float> off(nullptr);
  KVCache cache = make_cache(params.config);
  std::vector<float> logits;
  for (const std::int32_t tok : prompt_tokens) {
    logits = forward_step(params, tok, cache, cb);
  }
  Rng rng(opts.seed);
  std::vector<std::int32_t> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int next = pick_token(logits, opts, rng);
    out.push_back(next);
    if (i + 1 < n) logits = forward_step(params, next, cache, cb);
  }
  return out;
}

Image prompted_inference(ModelParameters<float>& params, const Codebook& cb,
                         const Prompt& prompt, const DecodeOptions& opts) {
  const int tpi = tokens_per_image(cb, prompt.query.height, prompt.query.width);
  std::vector<std::int32_t> tokens;
  for (const auto& pair : prompt.examples) {
    const TokenGrid in_grid = encode(pair.input, cb);
    const TokenGrid ann_grid = encode(pair.annotation, cb);
    tokens.insert(tokens.end(), in_grid.ids.begin(), in_grid.ids.end());
    tokens.insert(tokens.end(), ann_grid.ids.begin(), ann_grid.ids.end());
  }
  const TokenGrid query_grid = encode(prompt.query, cb);
  tokens.insert(tokens.end(), query_grid.ids.begin(), query_grid.ids.end());

  if (static_cast<int>(tokens.size()) + tpi > params.config.context_length) {
    throw std::runtime_error(
        "prompted_inference: prompt of " + std::to_string(tokens.size()) + " tokens plus " +
        std::to_string(tpi) + " generated exceeds context " +
        std::to_string(params.config.context_length) + "; use fewer example pairs");
  }
  const std::vector<std::int32_t> generated = generate(params, tokens, tpi, cb, opts);
  TokenGrid out_grid = query_grid;
  out_grid.ids = generated;
  return decode(out_grid, cb);
}

Image inpaint(ModelParameters<float>& params, const Codebook& cb, const Image& image,
              int keep_tokens, const DecodeOptions& opts) {
  const int tpi = tokens_per_image(cb, image.height, image.width);
  if (keep_tokens <= 0 || keep_tokens >= tpi) {
    throw std::invalid_argument("inpaint: keep_tokens must be in (0, " + std::to_string(tpi) +
                                ")");
  }
  TokenGrid grid = encode(image, cb);
  std::vector<std::int32_t> prefix(grid.ids.begin(), grid.ids.begin() + keep_tokens);
  const std::vector<std::int32_t> rest = generate(params, prefix, tpi - keep_tokens, cb, opts);
  TokenGrid out = grid;
  std::copy(rest.begin(), rest.end(), out.ids.begin() + keep_tokens);
  std::copy(prefix.begin(), prefix.end(), out.ids.begin());
  return decode(out, cb);
}

std::vector<EvalRecord> evaluate(ModelParameters<float>& params,
                                 const std::vector<VisualSentence>& sentences, const Codebook& cb,
                                 int eval_batch_sentences) {
  if (sentences.empty()) throw std::invalid_argument("evaluate: no sentences");
  TapeScope<float> off(nullptr);
  params.set_requires_grad(false);

  struct Totals {
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    std::int64_t scored = 0;
  };
  std::map<TaskId, Totals> by_task;

  std::vector<const VisualSentence*> batch;
  auto flush = [&]() {
    if (batch.empty()) return;
    const TokenBatch tokens = pack_batch(batch);
    std::vector<std::int32_t> targets(tokens.tokens.size(), 0);
    for (int b = 0; b < tokens.batch; ++b) {
      for (int l = 0; l + 1 < tokens.len; ++l) {
        targets[static_cast<std::size_t>(b) * tokens.len + l] =
            tokens.tokens[static_cast<std::size_t>(b) * tokens.len + l + 1];
      }
    }
    Tensor<float> logits = forward(params, tokens.tokens, tokens.batch, tokens.len, cb);
    const int v = logits.dim(2);
    for (int b = 0; b < tokens.batch; ++b) {
      Totals& tt = by_task[batch[static_cast<std::size_t>(b)]->task];
      for (int l = 0; l + 1 < tokens.len; ++l) {
        const float* row =
            logits.value().data() + (static_cast<std::int64_t>(b) * tokens.len + l) * v;
        const std::int32_t target = targets[static_cast<std::size_t>(b) * tokens.len + l];
        // stable log-softmax for the target
        float mx = row[0];
        int best = 0;
        for (int j = 1; j < v; ++j) {
          if (row[j] > mx) mx = row[j];
          if (row[j] > row[best]) best = j;
        }
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        tt.loss_sum -= static_cast<double>(row[target]) - mx - std::log(denom);
        tt.correct += best == target ? 1 : 0;
        tt.scored += 1;
      }
    }
    batch.clear();
  };

  // batches are grouped per task so each flush feeds one accumulator group
  for (const auto& s : sentences) {
    if (!batch.empty() && (batch.back()->task != s.task ||
                           static_cast<int>(batch.size()) >= eval_batch_sentences)) {
      flush();
    }
    batch.push_back(&s);
  }
  flush();

  std::vector<EvalRecord> records;
  for (const auto& [task, totals] : by_task) {
    EvalRecord rec;
    rec.task = task;
    rec.loss = totals.loss_sum / static_cast<double>(totals.scored);
    rec.accuracy = 100.0 * static_cast<double>(totals.correct) / static_cast<double>(totals.scored);
    rec.perplexity = std::exp(rec.loss);
    records.push_back(rec);
  }
  return records;
}

BinaryMask postprocess_binary(const Image& img, float threshold) {
  BinaryMask mask(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const float gray = (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0f;
      mask.at(y, x) = gray > threshold ? 1 : 0;
    }
  }
  return mask;
}

double miou(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("miou: mask dimensions differ");
  }
  std::int64_t inter = 0;
  std::int64_t uni = 0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const bool p = pred.values[i] != 0;
    const bool g = gt.values[i] != 0;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  if (uni == 0) return 1.0;  // agreement on absence
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double mean_miou(const std::vector<double>& ious) {
  if (ious.empty()) throw std::invalid_argument("mean_miou: empty");
  double sum = 0.0;
  for (const double v : ious) sum += v;
  return sum / static_cast<double>(ious.size());
}

}  // namespace lvm

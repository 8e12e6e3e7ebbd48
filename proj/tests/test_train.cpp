#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lvm/model.hpp"
#include "lvm/ops.hpp"
#include "lvm/rng.hpp"
#include "lvm/train.hpp"

using namespace lvm;

namespace {

ModelConfig test_config(int context = 16) {
  ModelConfig cfg;
  cfg.hidden_dim = 32;
  cfg.mlp_dim = 48;
  cfg.n_heads = 4;
  cfg.n_layers = 2;
  cfg.vocab_size = 16;
  cfg.code_dim = 12;
  cfg.context_length = context;
  return cfg;
}

Codebook test_codebook(int k, std::uint64_t seed) {
  Codebook cb;
  cb.k = k;
  cb.patch = 2;
  cb.dim = 12;
  Rng rng(seed);
  cb.vectors.resize(static_cast<std::size_t>(k) * cb.dim);
  for (auto& v : cb.vectors) v = static_cast<float>(rng.uniform());
  return cb;
}

std::vector<VisualSentence> synth_sentences(int n, int len, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<VisualSentence> out(static_cast<std::size_t>(n));
  for (auto& s : out) {
    s.task = TaskId::seg_toy;
    for (int i = 0; i < len; ++i) s.tokens.push_back(static_cast<std::int32_t>(rng.below(vocab)));
  }
  return out;
}

TrainConfig quick_train_config(std::int64_t steps, std::int64_t micro_tokens, int accum) {
  TrainConfig cfg;
  cfg.total_steps = steps;
  cfg.micro_batch_tokens = micro_tokens;
  cfg.grad_accum_steps = accum;
  cfg.equivalent_batch_tokens = micro_tokens * accum;
  cfg.peak_lr = 1e-3;
  cfg.final_lr = 1e-4;
  cfg.seed = 5;
  return cfg;
}

bool params_bitwise_equal(ModelParameters<float>& a, ModelParameters<float>& b) {
  bool equal = true;
  std::vector<const Tensor<float>*> ta, tb;
  a.for_each([&](const std::string&, Tensor<float>& t) { ta.push_back(&t); });
  b.for_each([&](const std::string&, Tensor<float>& t) { tb.push_back(&t); });
  for (std::size_t i = 0; i < ta.size(); ++i) {
    for (std::int64_t j = 0; j < ta[i]->numel(); ++j) {
      if (ta[i]->value()[static_cast<std::size_t>(j)] !=
          tb[i]->value()[static_cast<std::size_t>(j)]) {
        equal = false;
      }
    }
  }
  return equal;
}

double max_rel_param_diff(ModelParameters<float>& a, ModelParameters<float>& b) {
  double worst = 0.0;
  std::vector<const Tensor<float>*> ta, tb;
  a.for_each([&](const std::string&, Tensor<float>& t) { ta.push_back(&t); });
  b.for_each([&](const std::string&, Tensor<float>& t) { tb.push_back(&t); });
  for (std::size_t i = 0; i < ta.size(); ++i) {
    for (std::int64_t j = 0; j < ta[i]->numel(); ++j) {
      const double va = ta[i]->value()[static_cast<std::size_t>(j)];
      const double vb = tb[i]->value()[static_cast<std::size_t>(j)];
      worst = std::max(worst, std::abs(va - vb) / std::max({std::abs(va), std::abs(vb), 1e-8}));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("cosine schedule hits the published endpoints") {
  TrainConfig cfg;
  cfg.peak_lr = 1.5e-4;
  cfg.final_lr = 1.5e-5;
  cfg.warmup_frac = 0.0056;
  cfg.total_steps = 10000;
  const std::int64_t warmup = static_cast<std::int64_t>(std::ceil(0.0056 * 10000));

  CHECK(cosine_lr(warmup, cfg) == doctest::Approx(1.5e-4).epsilon(1e-12));
  CHECK(cosine_lr(cfg.total_steps, cfg) == doctest::Approx(1.5e-5).epsilon(1e-12));
  // midpoint of the decay: final + (peak-final)*(1+cos(pi/2))/2
  const std::int64_t mid = warmup + (cfg.total_steps - warmup) / 2;
  CHECK(cosine_lr(mid, cfg) == doctest::Approx(8.25e-5).epsilon(1e-9));
  // warmup is linear from zero
  CHECK(cosine_lr(0, cfg) == 0.0);
  CHECK(cosine_lr(warmup / 2, cfg) < 1.5e-4);
}

TEST_CASE("cosine segments hit their endpoints and the offset shifts the schedule") {
  CHECK(cosine_segment_lr(0, 100, 8e-5, 5e-5) == doctest::Approx(8e-5));
  CHECK(cosine_segment_lr(100, 100, 8e-5, 5e-5) == doctest::Approx(5e-5));
  CHECK(cosine_segment_lr(50, 100, 8e-5, 5e-5) == doctest::Approx(6.5e-5));

  TrainConfig cfg;
  cfg.peak_lr = 1.5e-4;
  cfg.final_lr = 1.5e-5;
  cfg.total_steps = 100;
  cfg.lr_segment = std::make_pair(8e-5, 5e-5);
  cfg.schedule_offset = 100;
  CHECK(cosine_lr(100, cfg) == doctest::Approx(8e-5));
  CHECK(cosine_lr(200, cfg) == doctest::Approx(5e-5));
}

TEST_CASE("train config invariants are enforced") {
  TrainConfig cfg = quick_train_config(10, 16, 2);
  cfg.equivalent_batch_tokens = 16;  // != 16 * 2
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.equivalent_batch_tokens = 32;
  CHECK_NOTHROW(cfg.validate());
  cfg.warmup_frac = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("adamw: zero grads and zero decay leave parameters untouched") {
  const ModelConfig mcfg = test_config();
  ModelParameters<float> params = init_params<float>(mcfg, 1);
  ModelParameters<float> reference = init_params<float>(mcfg, 1);
  OptimizerState state = make_optimizer_state(params);
  TrainConfig cfg = quick_train_config(10, 16, 1);
  cfg.weight_decay = 0.0;
  params.zero_grad();
  adamw_step(params, state, 0.1, cfg);
  CHECK(params_bitwise_equal(params, reference));
  CHECK(state.step == 1);
}

TEST_CASE("adamw: single-element hand update") {
  const ModelConfig mcfg = test_config();
  ModelParameters<float> params = init_params<float>(mcfg, 1);
  OptimizerState state = make_optimizer_state(params);
  TrainConfig cfg = quick_train_config(10, 16, 1);
  cfg.weight_decay = 0.0;

  params.zero_grad();
  params.layers[0].wq.value()[0] = 0.0f;
  params.layers[0].wq.grad()[0] = 1.0f;
  adamw_step(params, state, 0.1, cfg);
  // bias-corrected first step moves by ~lr regardless of betas
  CHECK(params.layers[0].wq.value()[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("adamw: decoupled decay hits weights but not norm gains") {
  const ModelConfig mcfg = test_config();
  ModelParameters<float> params = init_params<float>(mcfg, 1);
  OptimizerState state = make_optimizer_state(params);
  TrainConfig cfg = quick_train_config(10, 16, 1);
  cfg.weight_decay = 0.1;

  params.zero_grad();
  params.layers[0].wq.value()[0] = 1.0f;
  adamw_step(params, state, 0.1, cfg);
  CHECK(params.layers[0].wq.value()[0] == doctest::Approx(0.99).epsilon(1e-6));
  CHECK(params.layers[0].attn_norm.value()[0] == 1.0f);  // norms never decay
}

TEST_CASE("train_step: untrained loss sits near ln(vocab)") {
  const ModelConfig mcfg = test_config();
  ModelParameters<float> params = init_params<float>(mcfg, 2);
  OptimizerState state = make_optimizer_state(params);
  const Codebook cb = test_codebook(mcfg.vocab_size, 3);
  const auto sentences = synth_sentences(2, 16, mcfg.vocab_size, 4);
  const TokenBatch batch = pack_batch({&sentences[0], &sentences[1]});
  const TrainConfig cfg = quick_train_config(10, 32, 1);

  const LossReport report = train_step(params, batch, state, cfg, cb);
  CHECK(report.loss == doctest::Approx(std::log(16.0)).epsilon(0.05));
  CHECK(report.stepped);
}

TEST_CASE("train_step: identically seeded runs are bitwise identical") {
  const ModelConfig mcfg = test_config();
  const Codebook cb = test_codebook(mcfg.vocab_size, 3);
  const auto sentences = synth_sentences(4, 16, mcfg.vocab_size, 4);
  const TrainConfig cfg = quick_train_config(100, 32, 1);

  auto run = [&]() {
    ModelParameters<float> params = init_params<float>(mcfg, 7);
    OptimizerState state = make_optimizer_state(params);
    for (int step = 0; step < 40; ++step) {
      const TokenBatch batch = pack_batch(
          {&sentences[static_cast<std::size_t>(step % 2) * 2],
           &sentences[static_cast<std::size_t>(step % 2) * 2 + 1]});
      train_step(params, batch, state, cfg, cb);
    }
    return params;
  };
  ModelParameters<float> a = run();
  ModelParameters<float> b = run();
  CHECK(params_bitwise_equal(a, b));
}

TEST_CASE("gradient accumulation matches the equivalent single batch") {
  const ModelConfig mcfg = test_config();
  const Codebook cb = test_codebook(mcfg.vocab_size, 3);
  const auto sentences = synth_sentences(4, 16, mcfg.vocab_size, 9);

  auto run_with_accum = [&](int accum) {
    ModelParameters<float> params = init_params<float>(mcfg, 11);
    OptimizerState state = make_optimizer_state(params);
    TrainConfig cfg = quick_train_config(1, 64 / accum, accum);
    const int per_micro = 4 / accum;
    for (int micro = 0; micro < accum; ++micro) {
      std::vector<const VisualSentence*> chunk;
      for (int i = 0; i < per_micro; ++i) {
        chunk.push_back(&sentences[static_cast<std::size_t>(micro * per_micro + i)]);
      }
      const LossReport report = train_step(params, pack_batch(chunk), state, cfg, cb);
      CHECK(report.stepped == (micro == accum - 1));
    }
    CHECK(state.step == 1);
    return params;
  };

  ModelParameters<float> full = run_with_accum(1);
  ModelParameters<float> halves = run_with_accum(2);
  ModelParameters<float> quarters = run_with_accum(4);
  CHECK(max_rel_param_diff(full, halves) <= 1e-5);
  CHECK(max_rel_param_diff(full, quarters) <= 1e-5);
}

TEST_CASE("train_step aborts on a non-finite loss") {
  const ModelConfig mcfg = test_config();
  ModelParameters<float> params = init_params<float>(mcfg, 2);
  params.output_head.value()[0] = std::numeric_limits<float>::quiet_NaN();
  OptimizerState state = make_optimizer_state(params);
  const Codebook cb = test_codebook(mcfg.vocab_size, 3);
  const auto sentences = synth_sentences(1, 16, mcfg.vocab_size, 4);
  const TokenBatch batch = pack_batch({&sentences[0]});
  const TrainConfig cfg = quick_train_config(10, 16, 1);
  CHECK_THROWS_WITH_AS(train_step(params, batch, state, cfg, cb),
                       doctest::Contains("not finite"), std::runtime_error);
}

TEST_CASE("distill_step with lambda=0 is bitwise identical to train_step") {
  const ModelConfig mcfg = test_config();
  const Codebook cb = test_codebook(mcfg.vocab_size, 3);
  const auto sentences = synth_sentences(2, 16, mcfg.vocab_size, 21);
  ModelParameters<float> teacher = init_params<float>(test_config(), 99);

  auto run = [&](bool with_kd) {
    ModelParameters<float> params = init_params<float>(mcfg, 13);
    OptimizerState state = make_optimizer_state(params);
    TrainConfig cfg = quick_train_config(20, 32, 1);
    if (with_kd) cfg.kd = KdConfig{"", 1.0, 0.0};  // lambda 0
    for (int step = 0; step < 10; ++step) {
      const TokenBatch batch = pack_batch({&sentences[0], &sentences[1]});
      if (with_kd) {
        distill_step(params, teacher, batch, state, cfg, cb);
      } else {
        train_step(params, batch, state, cfg, cb);
      }
    }
    return params;
  };
  ModelParameters<float> scratch = run(false);
  ModelParameters<float> distilled = run(true);
  CHECK(params_bitwise_equal(scratch, distilled));
}

TEST_CASE("distill_step: teacher equal to student reduces to (1-lambda)*CE") {
  const ModelConfig mcfg = test_config();
  const Codebook cb = test_codebook(mcfg.vocab_size, 3);
  const auto sentences = synth_sentences(1, 16, mcfg.vocab_size, 23);
  const TokenBatch batch = pack_batch({&sentences[0]});

  ModelParameters<float> student = init_params<float>(mcfg, 17);
  ModelParameters<float> teacher = init_params<float>(mcfg, 17);  // same weights

  // plain CE at the same parameters
  ModelParameters<float> probe = init_params<float>(mcfg, 17);
  OptimizerState ce_state = make_optimizer_state(probe);
  const TrainConfig ce_cfg = quick_train_config(10, 16, 1);
  const double ce = train_step(probe, batch, ce_state, ce_cfg, cb).loss;

  OptimizerState state = make_optimizer_state(student);
  TrainConfig cfg = quick_train_config(10, 16, 1);
  cfg.kd = KdConfig{"", 1.0, 0.5};
  const LossReport report = distill_step(student, teacher, batch, state, cfg, cb);
  CHECK(report.loss == doctest::Approx(0.5 * ce).epsilon(1e-5));
}

TEST_CASE("distill_step rejects a vocabulary mismatch") {
  const ModelConfig mcfg = test_config();
  ModelConfig other = mcfg;
  other.vocab_size = 8;
  ModelParameters<float> student = init_params<float>(mcfg, 1);
  ModelParameters<float> teacher = init_params<float>(other, 2);
  OptimizerState state = make_optimizer_state(student);
  TrainConfig cfg = quick_train_config(10, 16, 1);
  cfg.kd = KdConfig{};
  const Codebook cb = test_codebook(mcfg.vocab_size, 3);
  const auto sentences = synth_sentences(1, 16, mcfg.vocab_size, 4);
  const TokenBatch batch = pack_batch({&sentences[0]});
  CHECK_THROWS_AS(distill_step(student, teacher, batch, state, cfg, cb),
                  std::invalid_argument);
}

TEST_CASE("checkpoint: save/load round trip reproduces logits bitwise") {
  const ModelConfig mcfg = test_config();
  const Codebook cb = test_codebook(mcfg.vocab_size, 3);
  Checkpoint ckpt;
  ckpt.model = mcfg;
  ckpt.train = quick_train_config(10, 16, 1);
  ckpt.codebook = cb;
  ckpt.params = init_params<float>(mcfg, 29);
  ckpt.optimizer = make_optimizer_state(ckpt.params);
  ckpt.rng_state = Rng(5).state();
  ckpt.step = 7;

  const std::string path = (std::filesystem::temp_directory_path() / "train_test.ckpt").string();
  save_checkpoint(path, ckpt);
  Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.step == 7);
  CHECK(loaded.rng_state == Rng(5).state());
  CHECK(loaded.model.hidden_dim == mcfg.hidden_dim);
  CHECK(loaded.optimizer.has_value());

  Rng rng(31);
  std::vector<std::int32_t> tokens;
  for (int i = 0; i < 8; ++i) tokens.push_back(static_cast<std::int32_t>(rng.below(16)));
  const Tensor<float> before = forward(ckpt.params, tokens, 1, 8, cb);
  const Tensor<float> after = forward(loaded.params, tokens, 1, 8, loaded.codebook);
  for (std::int64_t i = 0; i < before.numel(); ++i) {
    CHECK(before.value()[static_cast<std::size_t>(i)] == after.value()[static_cast<std::size_t>(i)]);
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: resumed training equals the uninterrupted run") {
  const ModelConfig mcfg = test_config();
  const Codebook cb = test_codebook(mcfg.vocab_size, 3);
  const auto sentences = synth_sentences(2, 16, mcfg.vocab_size, 35);
  const TrainConfig cfg = quick_train_config(100, 32, 1);
  const std::string path = (std::filesystem::temp_directory_path() / "resume_test.ckpt").string();

  auto batch_for = [&](int) { return pack_batch({&sentences[0], &sentences[1]}); };

  ModelParameters<float> straight = init_params<float>(mcfg, 41);
  OptimizerState straight_state = make_optimizer_state(straight);
  for (int step = 0; step < 6; ++step) train_step(straight, batch_for(step), straight_state, cfg, cb);

  ModelParameters<float> first = init_params<float>(mcfg, 41);
  OptimizerState first_state = make_optimizer_state(first);
  for (int step = 0; step < 3; ++step) train_step(first, batch_for(step), first_state, cfg, cb);
  Checkpoint ckpt;
  ckpt.model = mcfg;
  ckpt.train = cfg;
  ckpt.codebook = cb;
  ckpt.params = first;
  ckpt.optimizer = first_state;
  ckpt.rng_state = Rng(cfg.seed).state();
  ckpt.step = 3;
  save_checkpoint(path, ckpt);

  Checkpoint resumed = load_checkpoint(path);
  OptimizerState resumed_state = *resumed.optimizer;
  for (int step = 3; step < 6; ++step) {
    train_step(resumed.params, batch_for(step), resumed_state, resumed.train, resumed.codebook);
  }
  CHECK(params_bitwise_equal(straight, resumed.params));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: corrupted magic and truncation are rejected") {
  const ModelConfig mcfg = test_config();
  Checkpoint ckpt;
  ckpt.model = mcfg;
  ckpt.train = quick_train_config(10, 16, 1);
  ckpt.codebook = test_codebook(mcfg.vocab_size, 3);
  ckpt.params = init_params<float>(mcfg, 1);
  const std::string path = (std::filesystem::temp_directory_path() / "corrupt_test.ckpt").string();
  save_checkpoint(path, ckpt);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("NOPE", 4);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"), std::runtime_error);

  save_checkpoint(path, ckpt);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("metrics stream appends the documented schema") {
  const std::string path = (std::filesystem::temp_directory_path() / "metrics_test.csv").string();
  std::filesystem::remove(path);
  MetricsWriter writer(path);
  writer.append(10, "val", "seg-toy", 1.5, 42.0, std::exp(1.5), 1e-4, 5120);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "step,split,task,loss,accuracy,perplexity,lr,tokens_seen");
  CHECK(row.substr(0, 15) == "10,val,seg-toy,");
  std::filesystem::remove(path);
}

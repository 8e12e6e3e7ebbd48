#include <doctest.h>

#include <cmath>

#include "lvm/gradcheck.hpp"
#include "lvm/model.hpp"
#include "lvm/ops.hpp"
#include "lvm/rng.hpp"

using namespace lvm;

namespace {

// small geometry that still exercises every code path
ModelConfig test_config() {
  ModelConfig cfg;
  cfg.hidden_dim = 32;
  cfg.mlp_dim = 48;
  cfg.n_heads = 4;
  cfg.n_layers = 2;
  cfg.vocab_size = 16;
  cfg.code_dim = 12;
  cfg.context_length = 24;
  return cfg;
}

Codebook test_codebook(int k, int patch, std::uint64_t seed) {
  Codebook cb;
  cb.k = k;
  cb.patch = patch;
  cb.dim = patch * patch * 3;
  Rng rng(seed);
  cb.vectors.resize(static_cast<std::size_t>(k) * cb.dim);
  for (auto& v : cb.vectors) v = static_cast<float>(rng.uniform());
  return cb;
}

std::vector<std::int32_t> random_tokens(Rng& rng, int n, int vocab) {
  std::vector<std::int32_t> out;
  for (int i = 0; i < n; ++i) out.push_back(static_cast<std::int32_t>(rng.below(vocab)));
  return out;
}

}  // namespace

TEST_CASE("named configs carry the published sizes") {
  const ModelConfig m300 = named_config("llama-300m");
  CHECK(m300.hidden_dim == 1024);
  CHECK(m300.mlp_dim == 2688);
  CHECK(m300.n_heads == 8);
  CHECK(m300.n_layers == 22);
  CHECK(m300.context_length == 2048);
  CHECK(m300.vocab_size == 8192);

  const ModelConfig m80 = named_config("llama-80m");
  CHECK(m80.hidden_dim == 768);
  CHECK(m80.mlp_dim == 3072);
  CHECK(m80.n_heads == 12);
  CHECK(m80.n_layers == 12);

  const ModelConfig m1b = named_config("llama-1b");
  CHECK(m1b.hidden_dim == 2048);
  CHECK(m1b.mlp_dim == 5504);
  CHECK(m1b.n_heads == 16);
  CHECK(m1b.n_layers == 22);

  const ModelConfig tiny = named_config("tiny");
  CHECK(tiny.hidden_dim == 64);
  CHECK(tiny.mlp_dim == 172);
  CHECK(tiny.n_heads == 4);
  CHECK(tiny.n_layers == 2);

  CHECK_THROWS_AS(named_config("llama-9000"), std::invalid_argument);
}

TEST_CASE("init is deterministic and norm gains start at one") {
  const ModelConfig cfg = named_config("tiny");
  ModelParameters<float> a = init_params<float>(cfg, 5);
  ModelParameters<float> b = init_params<float>(cfg, 5);
  bool all_equal = true;
  std::vector<const Tensor<float>*> ta, tb;
  a.for_each([&](const std::string&, Tensor<float>& t) { ta.push_back(&t); });
  b.for_each([&](const std::string&, Tensor<float>& t) { tb.push_back(&t); });
  REQUIRE(ta.size() == tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    for (std::int64_t j = 0; j < ta[i]->numel(); ++j) {
      if (ta[i]->value()[static_cast<std::size_t>(j)] != tb[i]->value()[static_cast<std::size_t>(j)]) {
        all_equal = false;
      }
    }
  }
  CHECK(all_equal);

  for (auto& layer : a.layers) {
    for (const float v : layer.attn_norm.value()) CHECK(v == 1.0f);
    for (const float v : layer.mlp_norm.value()) CHECK(v == 1.0f);
  }
  for (const float v : a.final_norm.value()) CHECK(v == 1.0f);

  ModelParameters<float> c = init_params<float>(cfg, 6);
  CHECK(c.output_head.value()[0] != a.output_head.value()[0]);
}

TEST_CASE("parameter count matches the closed-form expression") {
  // hidden 64, mlp 172, heads 4, layers 2, K=512, D=48
  const ModelConfig cfg = named_config("tiny");
  ModelParameters<float> params = init_params<float>(cfg, 1);
  const std::int64_t h = 64, m = 172, l = 2, k = 512, d = 48;
  const std::int64_t per_layer = 2 * h + 4 * h * h + 2 * h * m + m * h;
  const std::int64_t expected = d * h + l * per_layer + h + h * k;
  CHECK(params.parameter_count() == expected);
  CHECK(expected == 134976);
}

TEST_CASE("causality: future tokens cannot change earlier logits") {
  const ModelConfig cfg = test_config();
  ModelParameters<float> params = init_params<float>(cfg, 3);
  const Codebook cb = test_codebook(cfg.vocab_size, 2, 8);
  Rng rng(4);
  std::vector<std::int32_t> tokens = random_tokens(rng, 10, cfg.vocab_size);

  const Tensor<float> base = forward(params, tokens, 1, 10, cb);
  for (const int j : {3, 7, 9}) {
    std::vector<std::int32_t> perturbed = tokens;
    perturbed[static_cast<std::size_t>(j)] =
        (perturbed[static_cast<std::size_t>(j)] + 1) % cfg.vocab_size;
    const Tensor<float> out = forward(params, perturbed, 1, 10, cb);
    for (int l = 0; l < j; ++l) {
      for (int v = 0; v < cfg.vocab_size; ++v) {
        const std::size_t idx = static_cast<std::size_t>(l) * cfg.vocab_size + v;
        CHECK(std::abs(out.value()[idx] - base.value()[idx]) <= 1e-6f);
      }
    }
  }
}

TEST_CASE("batched forward equals stacked single-sentence forwards") {
  const ModelConfig cfg = test_config();
  ModelParameters<float> params = init_params<float>(cfg, 9);
  const Codebook cb = test_codebook(cfg.vocab_size, 2, 8);
  Rng rng(5);
  const auto row0 = random_tokens(rng, 8, cfg.vocab_size);
  const auto row1 = random_tokens(rng, 8, cfg.vocab_size);
  std::vector<std::int32_t> both = row0;
  both.insert(both.end(), row1.begin(), row1.end());

  const Tensor<float> batched = forward(params, both, 2, 8, cb);
  const Tensor<float> a = forward(params, row0, 1, 8, cb);
  const Tensor<float> b = forward(params, row1, 1, 8, cb);
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    CHECK(std::abs(batched.value()[static_cast<std::size_t>(i)] -
                   a.value()[static_cast<std::size_t>(i)]) <= 1e-6f);
    CHECK(std::abs(batched.value()[static_cast<std::size_t>(a.numel() + i)] -
                   b.value()[static_cast<std::size_t>(i)]) <= 1e-6f);
  }
}

TEST_CASE("incremental cached decode matches the full forward pass") {
  const ModelConfig cfg = test_config();
  ModelParameters<float> params = init_params<float>(cfg, 11);
  const Codebook cb = test_codebook(cfg.vocab_size, 2, 8);
  Rng rng(6);
  const int len = 16;
  const auto tokens = random_tokens(rng, len, cfg.vocab_size);

  const Tensor<float> full = forward(params, tokens, 1, len, cb);
  KVCache cache = make_cache(cfg);
  for (int l = 0; l < len; ++l) {
    const std::vector<float> logits = forward_step(params, tokens[static_cast<std::size_t>(l)], cache, cb);
    CHECK(cache.length == l + 1);
    for (int v = 0; v < cfg.vocab_size; ++v) {
      const float want = full.value()[static_cast<std::size_t>(l) * cfg.vocab_size + v];
      CHECK(std::abs(logits[static_cast<std::size_t>(v)] - want) <= 1e-4f);
    }
  }
}

TEST_CASE("empty-cache step equals a length-1 forward") {
  const ModelConfig cfg = test_config();
  ModelParameters<float> params = init_params<float>(cfg, 13);
  const Codebook cb = test_codebook(cfg.vocab_size, 2, 8);
  const Tensor<float> full = forward(params, {7}, 1, 1, cb);
  KVCache cache = make_cache(cfg);
  const std::vector<float> logits = forward_step(params, 7, cache, cb);
  for (int v = 0; v < cfg.vocab_size; ++v) {
    CHECK(std::abs(logits[static_cast<std::size_t>(v)] - full.value()[static_cast<std::size_t>(v)]) <= 1e-5f);
  }
}

TEST_CASE("over-length input and cache overflow raise errors") {
  ModelConfig cfg = test_config();
  cfg.context_length = 4;
  ModelParameters<float> params = init_params<float>(cfg, 1);
  const Codebook cb = test_codebook(cfg.vocab_size, 2, 8);
  const std::vector<std::int32_t> tokens(5, 1);
  CHECK_THROWS_AS(forward(params, tokens, 1, 5, cb), std::invalid_argument);

  KVCache cache = make_cache(cfg);
  for (int i = 0; i < 4; ++i) forward_step(params, 1, cache, cb);
  CHECK_THROWS_AS(forward_step(params, 1, cache, cb), std::runtime_error);
}

TEST_CASE("rotary attention scores depend only on relative position") {
  // identical content at every position: score(i,j) must be a function of i-j
  const int dh = 8, len = 6;
  Rng rng(15);
  Tensor<double> q({1, 1, len, dh});
  Tensor<double> k({1, 1, len, dh});
  std::vector<double> qv(dh), kv(dh);
  for (int i = 0; i < dh; ++i) {
    qv[static_cast<std::size_t>(i)] = rng.uniform(-1, 1);
    kv[static_cast<std::size_t>(i)] = rng.uniform(-1, 1);
  }
  for (int p = 0; p < len; ++p) {
    for (int i = 0; i < dh; ++i) {
      q.value()[static_cast<std::size_t>(p * dh + i)] = qv[static_cast<std::size_t>(i)];
      k.value()[static_cast<std::size_t>(p * dh + i)] = kv[static_cast<std::size_t>(i)];
    }
  }
  const Tensor<double> qr = rope(q, 0, 10000.0);
  const Tensor<double> kr = rope(k, 0, 10000.0);
  auto score = [&](int i, int j) {
    double s = 0;
    for (int d = 0; d < dh; ++d) {
      s += qr.value()[static_cast<std::size_t>(i * dh + d)] *
           kr.value()[static_cast<std::size_t>(j * dh + d)];
    }
    return s;
  };
  for (int delta = 0; delta < 4; ++delta) {
    const double ref = score(delta, 0);
    for (int j = 1; j + delta < len; ++j) {
      CHECK(score(j + delta, j) == doctest::Approx(ref).epsilon(1e-9));
    }
  }
}

TEST_CASE("learned-embedding variant runs and differs from the projection path") {
  ModelConfig cfg = test_config();
  const Codebook cb = test_codebook(cfg.vocab_size, 2, 8);
  ModelParameters<float> proj = init_params<float>(cfg, 21);
  cfg.learned_embedding = true;
  ModelParameters<float> learned = init_params<float>(cfg, 21);
  CHECK(learned.token_embedding.numel() == cfg.vocab_size * cfg.hidden_dim);

  Rng rng(7);
  const auto tokens = random_tokens(rng, 6, cfg.vocab_size);
  const Tensor<float> a = forward(proj, tokens, 1, 6, cb);
  const Tensor<float> b = forward(learned, tokens, 1, 6, cb);
  CHECK(a.numel() == b.numel());

  // cached decoding agrees in this mode too
  KVCache cache = make_cache(cfg);
  std::vector<float> logits;
  for (const auto t : tokens) logits = forward_step(learned, t, cache, cb);
  for (int v = 0; v < cfg.vocab_size; ++v) {
    const float want = b.value()[static_cast<std::size_t>(5) * cfg.vocab_size + v];
    CHECK(std::abs(logits[static_cast<std::size_t>(v)] - want) <= 1e-4f);
  }
}

TEST_CASE("full-model gradients pass finite-difference spot checks in 64-bit") {
  ModelConfig cfg = test_config();
  cfg.n_layers = 1;
  ModelParameters<double> params = init_params<double>(cfg, 31);
  const Codebook cb = test_codebook(cfg.vocab_size, 2, 8);
  Rng rng(17);
  const int len = 5;
  const auto tokens = random_tokens(rng, len, cfg.vocab_size);
  std::vector<std::int32_t> targets = random_tokens(rng, len, cfg.vocab_size);

  auto loss_value = [&]() {
    TapeScope<double> off(nullptr);
    const Tensor<double> logits = forward(params, tokens, 1, len, cb);
    return cross_entropy_next_token(logits, targets, true).item();
  };

  params.set_requires_grad(true);
  params.zero_grad();
  Tape<double> tape;
  {
    TapeScope<double> scope(&tape);
    const Tensor<double> logits = forward(params, tokens, 1, len, cb);
    tape.backward(cross_entropy_next_token(logits, targets, true));
  }

  std::vector<Tensor<double>*> tensors;
  params.for_each([&](const std::string&, Tensor<double>& t) { tensors.push_back(&t); });

  const double h = 1e-5;
  int checked = 0;
  for (int probe = 0; probe < 12; ++probe) {
    auto& tensor = *tensors[probe % tensors.size()];
    const std::int64_t idx = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(tensor.numel())));
    const double analytic = tensor.grad_view()[static_cast<std::size_t>(idx)];
    const double original = tensor.value()[static_cast<std::size_t>(idx)];
    tensor.value()[static_cast<std::size_t>(idx)] = original + h;
    const double fp = loss_value();
    tensor.value()[static_cast<std::size_t>(idx)] = original - h;
    const double fm = loss_value();
    tensor.value()[static_cast<std::size_t>(idx)] = original;
    const double fd = (fp - fm) / (2 * h);
    const double rel = std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-8});
    INFO("probe ", probe, " analytic ", analytic, " fd ", fd);
    CHECK(rel < 1e-3);
    ++checked;
  }
  CHECK(checked >= 10);
}

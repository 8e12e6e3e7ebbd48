#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lvm/codebook.hpp"
#include "lvm/ops.hpp"
#include "lvm/rng.hpp"
#include "lvm/tensor.hpp"

namespace lvm {

struct ModelConfig {
  int hidden_dim = 64;
  int mlp_dim = 172;
  int n_heads = 4;
  int n_layers = 2;
  int vocab_size = 512;
  int context_length = 512;
  int code_dim = 48;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  // Default input embedding is the frozen codebook vector through a learned
  // code_dim -> hidden projection; this switches to a learned id table.
  bool learned_embedding = false;

  int head_dim() const { return hidden_dim / n_heads; }
  void validate() const;
};

/// Architecture presets. The llama-* entries carry their published
/// hidden/MLP/head/layer counts and 8192-token codebooks at context 2048;
/// tiny and tiny-2x are the desk-scale sizes used by the experiment harness.
ModelConfig named_config(const std::string& name);

template <typename S>
struct LayerParams {
  Tensor<S> attn_norm;  // [hidden]
  Tensor<S> wq, wk, wv, wo;  // [hidden, hidden]
  Tensor<S> mlp_norm;   // [hidden]
  Tensor<S> w_gate, w_up;  // [hidden, mlp]
  Tensor<S> w_down;        // [mlp, hidden]
};

template <typename S>
struct ModelParameters {
  ModelConfig config;
  Tensor<S> input_proj;      // [code_dim, hidden]
  Tensor<S> token_embedding;  // [vocab, hidden], used when learned_embedding
  std::vector<LayerParams<S>> layers;
  Tensor<S> final_norm;  // [hidden]
  Tensor<S> output_head;  // [hidden, vocab]

  /// Visits every parameter tensor in the canonical (checkpoint) order.
  template <typename F>
  void for_each(F&& fn) {
    if (config.learned_embedding) {
      fn("token_embedding", token_embedding);
    } else {
      fn("input_proj", input_proj);
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      auto& l = layers[i];
      fn(p + "attn_norm", l.attn_norm);
      fn(p + "wq", l.wq);
      fn(p + "wk", l.wk);
      fn(p + "wv", l.wv);
      fn(p + "wo", l.wo);
      fn(p + "mlp_norm", l.mlp_norm);
      fn(p + "w_gate", l.w_gate);
      fn(p + "w_up", l.w_up);
      fn(p + "w_down", l.w_down);
    }
    fn("final_norm", final_norm);
    fn("output_head", output_head);
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    for_each([&](const std::string&, Tensor<S>& t) { n += t.numel(); });
    return n;
  }

  void set_requires_grad(bool on) {
    for_each([on](const std::string&, Tensor<S>& t) { t.set_requires_grad(on); });
  }

  void zero_grad() {
    for_each([](const std::string&, Tensor<S>& t) { t.zero_grad(); });
  }

  template <typename T2>
  ModelParameters<T2> cast() {
    ModelParameters<T2> out = make_params_like<T2>(config);
    std::vector<Tensor<T2>*> dst;
    out.for_each([&](const std::string&, Tensor<T2>& t) { dst.push_back(&t); });
    std::size_t i = 0;
    for_each([&](const std::string&, Tensor<S>& t) { *dst[i++] = t.template cast<T2>(); });
    return out;
  }
};

/// Allocates zeroed parameters with the right shapes.
template <typename S>
ModelParameters<S> make_params_like(const ModelConfig& cfg) {
  cfg.validate();
  ModelParameters<S> p;
  p.config = cfg;
  const int h = cfg.hidden_dim;
  if (cfg.learned_embedding) {
    p.token_embedding = Tensor<S>({cfg.vocab_size, h});
    p.input_proj = Tensor<S>({1});
  } else {
    p.input_proj = Tensor<S>({cfg.code_dim, h});
    p.token_embedding = Tensor<S>({1});
  }
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : p.layers) {
    l.attn_norm = Tensor<S>({h});
    l.wq = Tensor<S>({h, h});
    l.wk = Tensor<S>({h, h});
    l.wv = Tensor<S>({h, h});
    l.wo = Tensor<S>({h, h});
    l.mlp_norm = Tensor<S>({h});
    l.w_gate = Tensor<S>({h, cfg.mlp_dim});
    l.w_up = Tensor<S>({h, cfg.mlp_dim});
    l.w_down = Tensor<S>({cfg.mlp_dim, h});
  }
  p.final_norm = Tensor<S>({h});
  p.output_head = Tensor<S>({h, cfg.vocab_size});
  return p;
}

/// Truncated-normal init (std 0.02, clipped at 2 sigma), norm gains at 1.
template <typename S>
ModelParameters<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParameters<S> p = make_params_like<S>(cfg);
  Rng rng(seed);
  p.for_each([&](const std::string& name, Tensor<S>& t) {
    const bool is_norm = name.find("norm") != std::string::npos;
    for (auto& v : t.value()) {
      v = is_norm ? S(1) : static_cast<S>(rng.truncated_normal(0.02));
    }
  });
  return p;
}

/// Full causal forward pass: tokens [batch, len] -> logits [batch, len, vocab].
/// Records onto the active tape when parameters require gradients.
template <typename S>
Tensor<S> forward(ModelParameters<S>& params, const std::vector<std::int32_t>& tokens,
                  int batch, int len, const Codebook& cb);

/// Per-layer key/value memory for incremental decoding.
struct KVCache {
  int n_layers = 0;
  int n_heads = 0;
  int head_dim = 0;
  int capacity = 0;
  int length = 0;
  // per layer, [head][position][head_dim]
  std::vector<std::vector<float>> keys, values;
};

KVCache make_cache(const ModelConfig& cfg);

/// Appends one token and returns next-token logits [vocab]. Inference only;
/// equals the last position of a full forward over the same prefix.
std::vector<float> forward_step(ModelParameters<float>& params, std::int32_t token,
                                KVCache& cache, const Codebook& cb);

// --- implementation ----------------------------------------------------------

template <typename S>
Tensor<S> forward(ModelParameters<S>& params, const std::vector<std::int32_t>& tokens,
                  int batch, int len, const Codebook& cb) {
  const ModelConfig& cfg = params.config;
  if (len > cfg.context_length) {
    shape_error("forward: sequence length " + std::to_string(len) + " exceeds context " +
                std::to_string(cfg.context_length));
  }
  if (static_cast<std::int64_t>(tokens.size()) != static_cast<std::int64_t>(batch) * len) {
    shape_error("forward: token count does not match batch*len");
  }
  const int h = cfg.hidden_dim;
  const int nh = cfg.n_heads;
  const int dh = cfg.head_dim();

  Tensor<S> x;
  if (cfg.learned_embedding) {
    x = embedding_lookup(params.token_embedding, tokens, {batch, len});
  } else {
    // frozen codebook vectors -> learned projection into the hidden space
    Tensor<S> codes({batch, len, cfg.code_dim});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const std::int32_t id = tokens[i];
      if (id < 0 || id >= cb.k) {
        throw std::out_of_range("forward: token id " + std::to_string(id) +
                                " outside codebook of size " + std::to_string(cb.k));
      }
      for (int j = 0; j < cfg.code_dim; ++j) {
        codes.value()[i * static_cast<std::size_t>(cfg.code_dim) + j] =
            static_cast<S>(cb.code(id)[j]);
      }
    }
    x = matmul(codes, params.input_proj);
  }

  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (auto& layer : params.layers) {
    Tensor<S> hn = rmsnorm(x, layer.attn_norm, static_cast<S>(cfg.norm_eps));
    Tensor<S> q = transpose(reshape(matmul(hn, layer.wq), {batch, len, nh, dh}), 1, 2);
    Tensor<S> k = transpose(reshape(matmul(hn, layer.wk), {batch, len, nh, dh}), 1, 2);
    Tensor<S> v = transpose(reshape(matmul(hn, layer.wv), {batch, len, nh, dh}), 1, 2);
    q = rope(q, 0, cfg.rope_base);
    k = rope(k, 0, cfg.rope_base);
    Tensor<S> scores = scale(matmul(q, transpose(k, 2, 3)), inv_sqrt_dh);
    Tensor<S> probs = masked_causal_softmax(scores, 0);
    Tensor<S> ctx = reshape(transpose(matmul(probs, v), 1, 2), {batch, len, h});
    x = add(x, matmul(ctx, layer.wo));

    Tensor<S> mn = rmsnorm(x, layer.mlp_norm, static_cast<S>(cfg.norm_eps));
    Tensor<S> gated = mul(silu(matmul(mn, layer.w_gate)), matmul(mn, layer.w_up));
    x = add(x, matmul(gated, layer.w_down));
  }

  Tensor<S> fin = rmsnorm(x, params.final_norm, static_cast<S>(cfg.norm_eps));
  return matmul(fin, params.output_head);
}

}  // namespace lvm

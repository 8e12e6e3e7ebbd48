#include "lvm/model.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace lvm {

void ModelConfig::validate() const {
  if (hidden_dim < 1 || mlp_dim < 1 || n_heads < 1 || n_layers < 1 || vocab_size < 1 ||
      context_length < 1 || code_dim < 1) {
    throw std::invalid_argument("model config has a non-positive extent");
  }
  if (hidden_dim % n_heads != 0) {
    throw std::invalid_argument("hidden_dim " + std::to_string(hidden_dim) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (head_dim() % 2 != 0) {
    throw std::invalid_argument("head dim " + std::to_string(head_dim()) +
                                " must be even for rotary embeddings");
  }
  if (!(norm_eps > 0.0) || !(rope_base > 0.0)) {
    throw std::invalid_argument("norm_eps and rope_base must be positive");
  }
}

ModelConfig named_config(const std::string& name) {
  ModelConfig cfg;
  if (name == "llama-1b") {
    cfg.hidden_dim = 2048;
    cfg.mlp_dim = 5504;
    cfg.n_heads = 16;
    cfg.n_layers = 22;
  } else if (name == "llama-300m") {
    cfg.hidden_dim = 1024;
    cfg.mlp_dim = 2688;
    cfg.n_heads = 8;
    cfg.n_layers = 22;
  } else if (name == "llama-80m") {
    cfg.hidden_dim = 768;
    cfg.mlp_dim = 3072;
    cfg.n_heads = 12;
    cfg.n_layers = 12;
  } else if (name == "tiny") {
    cfg.hidden_dim = 64;
    cfg.mlp_dim = 172;
    cfg.n_heads = 4;
    cfg.n_layers = 2;
  } else if (name == "tiny-2x") {
    cfg.hidden_dim = 128;
    cfg.mlp_dim = 344;
    cfg.n_heads = 8;
    cfg.n_layers = 2;
  } else {
    throw std::invalid_argument("unknown model config '" + name + "'");
  }
  if (name.rfind("llama-", 0) == 0) {
    // published geometry: 8192-entry 64-dim codebook, 2048-token context
    cfg.vocab_size = 8192;
    cfg.code_dim = 64;
    cfg.context_length = 2048;
  } else {
    cfg.vocab_size = 512;
    cfg.code_dim = 48;
    cfg.context_length = 512;
  }
  cfg.validate();
  return cfg;
}

KVCache make_cache(const ModelConfig& cfg) {
  KVCache cache;
  cache.n_layers = cfg.n_layers;
  cache.n_heads = cfg.n_heads;
  cache.head_dim = cfg.head_dim();
  cache.capacity = cfg.context_length;
  cache.keys.assign(static_cast<std::size_t>(cfg.n_layers),
                    std::vector<float>(static_cast<std::size_t>(cfg.n_heads) * cfg.context_length *
                                       cfg.head_dim()));
  cache.values = cache.keys;
  return cache;
}

namespace {

using RowVecXf = Eigen::Matrix<float, 1, Eigen::Dynamic>;

RowVecXf rmsnorm_vec(const RowVecXf& x, const std::vector<float>& weight, float eps) {
  const float ms = x.squaredNorm() / static_cast<float>(x.size());
  const float inv = 1.0f / std::sqrt(ms + eps);
  RowVecXf out = x * inv;
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] *= weight[static_cast<std::size_t>(i)];
  return out;
}

// must match the angle arithmetic of the rope op bit for bit
void rope_rotate(float* head_vec, int head_dim, int pos, double base) {
  for (int i = 0; i < head_dim / 2; ++i) {
    const double theta =
        static_cast<double>(pos) *
        std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    const float c = static_cast<float>(std::cos(theta));
    const float s = static_cast<float>(std::sin(theta));
    const float x0 = head_vec[2 * i];
    const float x1 = head_vec[2 * i + 1];
    head_vec[2 * i] = x0 * c - x1 * s;
    head_vec[2 * i + 1] = x0 * s + x1 * c;
  }
}

}  // namespace

std::vector<float> forward_step(ModelParameters<float>& params, std::int32_t token,
                                KVCache& cache, const Codebook& cb) {
  const ModelConfig& cfg = params.config;
  if (cache.length >= cache.capacity) {
    throw std::runtime_error("forward_step: KV cache full at capacity " +
                             std::to_string(cache.capacity));
  }
  const int h = cfg.hidden_dim;
  const int nh = cfg.n_heads;
  const int dh = cfg.head_dim();
  const int pos = cache.length;
  const float eps = static_cast<float>(cfg.norm_eps);

  RowVecXf x(h);
  if (cfg.learned_embedding) {
    if (token < 0 || token >= cfg.vocab_size) {
      throw std::out_of_range("forward_step: token id out of range");
    }
    ConstMatMap<float> emb(params.token_embedding.value().data(), cfg.vocab_size, h);
    x = emb.row(token);
  } else {
    if (token < 0 || token >= cb.k) {
      throw std::out_of_range("forward_step: token id " + std::to_string(token) +
                              " outside codebook of size " + std::to_string(cb.k));
    }
    Eigen::Map<const Eigen::Matrix<float, 1, Eigen::Dynamic>> code(cb.code(token), cfg.code_dim);
    ConstMatMap<float> proj(params.input_proj.value().data(), cfg.code_dim, h);
    x = code * proj;
  }

  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  for (int li = 0; li < cfg.n_layers; ++li) {
    auto& layer = params.layers[static_cast<std::size_t>(li)];
    const RowVecXf hn = rmsnorm_vec(x, layer.attn_norm.value(), eps);

    ConstMatMap<float> wq(layer.wq.value().data(), h, h);
    ConstMatMap<float> wk(layer.wk.value().data(), h, h);
    ConstMatMap<float> wv(layer.wv.value().data(), h, h);
    RowVecXf q = hn * wq;
    RowVecXf k = hn * wk;
    RowVecXf v = hn * wv;
    for (int head = 0; head < nh; ++head) {
      rope_rotate(q.data() + head * dh, dh, pos, cfg.rope_base);
      rope_rotate(k.data() + head * dh, dh, pos, cfg.rope_base);
    }

    auto& lk = cache.keys[static_cast<std::size_t>(li)];
    auto& lv = cache.values[static_cast<std::size_t>(li)];
    for (int head = 0; head < nh; ++head) {
      const std::size_t off = (static_cast<std::size_t>(head) * cache.capacity + pos) * dh;
      std::copy_n(k.data() + head * dh, dh, lk.data() + off);
      std::copy_n(v.data() + head * dh, dh, lv.data() + off);
    }

    RowVecXf ctx(h);
    const int visible = pos + 1;
    std::vector<float> probs(static_cast<std::size_t>(visible));
    for (int head = 0; head < nh; ++head) {
      const float* kh = lk.data() + static_cast<std::size_t>(head) * cache.capacity * dh;
      const float* vh = lv.data() + static_cast<std::size_t>(head) * cache.capacity * dh;
      Eigen::Map<const Eigen::Matrix<float, 1, Eigen::Dynamic>> qh(q.data() + head * dh, dh);
      float mx = -std::numeric_limits<float>::infinity();
      for (int j = 0; j < visible; ++j) {
        Eigen::Map<const Eigen::Matrix<float, 1, Eigen::Dynamic>> kj(kh + static_cast<std::size_t>(j) * dh, dh);
        probs[static_cast<std::size_t>(j)] = qh.dot(kj) * inv_sqrt_dh;
        mx = std::max(mx, probs[static_cast<std::size_t>(j)]);
      }
      float denom = 0.0f;
      for (int j = 0; j < visible; ++j) {
        probs[static_cast<std::size_t>(j)] = std::exp(probs[static_cast<std::size_t>(j)] - mx);
        denom += probs[static_cast<std::size_t>(j)];
      }
      const float inv = 1.0f / denom;
      Eigen::Map<RowVecXf> ctx_head(ctx.data() + head * dh, dh);
      ctx_head.setZero();
      for (int j = 0; j < visible; ++j) {
        Eigen::Map<const Eigen::Matrix<float, 1, Eigen::Dynamic>> vj(vh + static_cast<std::size_t>(j) * dh, dh);
        ctx_head += (probs[static_cast<std::size_t>(j)] * inv) * vj;
      }
    }

    ConstMatMap<float> wo(layer.wo.value().data(), h, h);
    x += ctx * wo;

    const RowVecXf mn = rmsnorm_vec(x, layer.mlp_norm.value(), eps);
    ConstMatMap<float> wg(layer.w_gate.value().data(), h, cfg.mlp_dim);
    ConstMatMap<float> wu(layer.w_up.value().data(), h, cfg.mlp_dim);
    ConstMatMap<float> wd(layer.w_down.value().data(), cfg.mlp_dim, h);
    RowVecXf gate = mn * wg;
    const RowVecXf up = mn * wu;
    for (Eigen::Index i = 0; i < gate.size(); ++i) {
      const float g = gate[i];
      gate[i] = g / (1.0f + std::exp(-g)) * up[i];
    }
    x += gate * wd;
  }

  const RowVecXf fin = rmsnorm_vec(x, params.final_norm.value(), eps);
  ConstMatMap<float> head_w(params.output_head.value().data(), h, cfg.vocab_size);
  const RowVecXf logits = fin * head_w;

  cache.length += 1;
  return std::vector<float>(logits.data(), logits.data() + logits.size());
}

}  // namespace lvm

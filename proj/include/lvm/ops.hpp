#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lvm/tensor.hpp"

// Differentiable free functions over Tensor<S>. Forward results are plain
// tensors; when a tape is active and an input requires gradients, a backward
// closure is recorded that accumulates (+=) into input grad buffers.

namespace lvm {

namespace detail {

template <typename S>
inline void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    shape_error(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()) + " differ");
  }
}

struct AxisSpan {
  std::int64_t outer;   // lanes before the axis
  std::int64_t extent;  // length along the axis
  std::int64_t inner;   // stride of one step along the axis
};

inline AxisSpan axis_span(const Shape& shape, int axis, const char* op) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    shape_error(std::string(op) + ": axis " + std::to_string(axis) +
                " out of range for shape " + shape_str(shape));
  }
  AxisSpan s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) {
    s.inner *= shape[static_cast<std::size_t>(i)];
  }
  return s;
}

}  // namespace detail

template <typename S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "add");
  Tensor<S> out(a.shape());
  VecMap<S>(out.value().data(), out.numel()) =
      ConstVecMap<S>(a.value().data(), a.numel()) + ConstVecMap<S>(b.value().data(), b.numel());
  detail::finish_op(
      "add", out,
      [a, b, out]() mutable {
        ConstVecMap<S> g(out.grad_view().data(), out.numel());
        if (a.requires_grad()) VecMap<S>(a.grad().data(), a.numel()) += g;
        if (b.requires_grad()) VecMap<S>(b.grad().data(), b.numel()) += g;
      },
      a, b);
  return out;
}

template <typename S>
Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<S> out(a.shape());
  VecMap<S>(out.value().data(), out.numel()) =
      ConstVecMap<S>(a.value().data(), a.numel()) - ConstVecMap<S>(b.value().data(), b.numel());
  detail::finish_op(
      "sub", out,
      [a, b, out]() mutable {
        ConstVecMap<S> g(out.grad_view().data(), out.numel());
        if (a.requires_grad()) VecMap<S>(a.grad().data(), a.numel()) += g;
        if (b.requires_grad()) VecMap<S>(b.grad().data(), b.numel()) -= g;
      },
      a, b);
  return out;
}

template <typename S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<S> out(a.shape());
  VecMap<S>(out.value().data(), out.numel()) =
      ConstVecMap<S>(a.value().data(), a.numel()) * ConstVecMap<S>(b.value().data(), b.numel());
  detail::finish_op(
      "mul", out,
      [a, b, out]() mutable {
        ConstVecMap<S> g(out.grad_view().data(), out.numel());
        if (a.requires_grad()) {
          VecMap<S>(a.grad().data(), a.numel()) +=
              g * ConstVecMap<S>(b.value().data(), b.numel());
        }
        if (b.requires_grad()) {
          VecMap<S>(b.grad().data(), b.numel()) +=
              g * ConstVecMap<S>(a.value().data(), a.numel());
        }
      },
      a, b);
  return out;
}

template <typename S>
Tensor<S> scale(Tensor<S> a, S factor) {
  Tensor<S> out(a.shape());
  VecMap<S>(out.value().data(), out.numel()) =
      ConstVecMap<S>(a.value().data(), a.numel()) * factor;
  detail::finish_op(
      "scale", out,
      [a, out, factor]() mutable {
        if (!a.requires_grad()) return;
        VecMap<S>(a.grad().data(), a.numel()) +=
            ConstVecMap<S>(out.grad_view().data(), out.numel()) * factor;
      },
      a);
  return out;
}

template <typename S>
Tensor<S> silu(Tensor<S> x) {
  Tensor<S> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const S v = x.value()[static_cast<std::size_t>(i)];
    const S sig = S(1) / (S(1) + std::exp(-v));
    out.value()[static_cast<std::size_t>(i)] = v * sig;
  }
  detail::finish_op(
      "silu", out,
      [x, out]() mutable {
        if (!x.requires_grad()) return;
        auto& gx = x.grad();
        const auto& g = out.grad_view();
        for (std::int64_t i = 0; i < x.numel(); ++i) {
          const S v = x.value()[static_cast<std::size_t>(i)];
          const S sig = S(1) / (S(1) + std::exp(-v));
          gx[static_cast<std::size_t>(i)] +=
              g[static_cast<std::size_t>(i)] * sig * (S(1) + v * (S(1) - sig));
        }
      },
      x);
  return out;
}

/// y = x / sqrt(mean(x^2) + eps) * weight, normalized over the last axis.
template <typename S>
Tensor<S> rmsnorm(Tensor<S> x, Tensor<S> weight, S eps) {
  if (x.rank() < 1) shape_error("rmsnorm: input must have rank >= 1");
  const int d = x.dim(x.rank() - 1);
  if (weight.rank() != 1 || weight.dim(0) != d) {
    shape_error("rmsnorm: weight shape " + shape_str(weight.shape()) +
                " does not match feature extent " + std::to_string(d));
  }
  const std::int64_t rows = x.numel() / d;
  Tensor<S> out(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    ConstVecMap<S> xv(x.value().data() + r * d, d);
    const S ms = xv.square().mean();
    const S inv = S(1) / std::sqrt(ms + eps);
    VecMap<S>(out.value().data() + r * d, d) =
        xv * inv * ConstVecMap<S>(weight.value().data(), d);
  }
  detail::finish_op(
      "rmsnorm", out,
      [x, weight, out, eps, d, rows]() mutable {
        const auto& g = out.grad_view();
        for (std::int64_t r = 0; r < rows; ++r) {
          ConstVecMap<S> xv(x.value().data() + r * d, d);
          ConstVecMap<S> gv(g.data() + r * d, d);
          ConstVecMap<S> wv(weight.value().data(), d);
          const S ms = xv.square().mean();
          const S inv = S(1) / std::sqrt(ms + eps);
          // u = x * inv; dL/du = g .* w; dL/dx = inv*(gu - u * mean(gu .* u))
          if (x.requires_grad()) {
            const S dot = (gv * wv * xv).sum();  // sum(gu .* x)
            VecMap<S> gx(x.grad().data() + r * d, d);
            gx += inv * (gv * wv) - (inv * inv * inv * dot / S(d)) * xv;
          }
          if (weight.requires_grad()) {
            VecMap<S> gw(weight.grad().data(), d);
            gw += gv * xv * inv;
          }
        }
      },
      x, weight);
  return out;
}

/// Gathers rows of `table` ([vocab, dim]) for each id; output shape is
/// ids_shape + [dim]. Gradients scatter-add back into the table.
template <typename S>
Tensor<S> embedding_lookup(Tensor<S> table, const std::vector<std::int32_t>& ids,
                           const Shape& ids_shape) {
  if (table.rank() != 2) shape_error("embedding_lookup: table must be 2-D");
  if (shape_numel(ids_shape) != static_cast<std::int64_t>(ids.size())) {
    shape_error("embedding_lookup: ids length does not match ids shape " + shape_str(ids_shape));
  }
  const int vocab = table.dim(0);
  const int dim = table.dim(1);
  Shape out_shape = ids_shape;
  out_shape.push_back(dim);
  Tensor<S> out(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int32_t id = ids[i];
    if (id < 0 || id >= vocab) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                              " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(table.value().data() + static_cast<std::int64_t>(id) * dim, dim,
                out.value().data() + static_cast<std::int64_t>(i) * dim);
  }
  detail::finish_op(
      "embedding_lookup", out,
      [table, out, ids, dim]() mutable {
        if (!table.requires_grad()) return;
        auto& gt = table.grad();
        const auto& g = out.grad_view();
        for (std::size_t i = 0; i < ids.size(); ++i) {
          VecMap<S>(gt.data() + static_cast<std::int64_t>(ids[i]) * dim, dim) +=
              ConstVecMap<S>(g.data() + static_cast<std::int64_t>(i) * dim, dim);
        }
      },
      table);
  return out;
}

template <typename S>
Tensor<S> reshape(Tensor<S> x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  }
  Tensor<S> out = Tensor<S>::from_data(std::move(new_shape), x.value());
  detail::finish_op(
      "reshape", out,
      [x, out]() mutable {
        if (!x.requires_grad()) return;
        VecMap<S>(x.grad().data(), x.numel()) +=
            ConstVecMap<S>(out.grad_view().data(), out.numel());
      },
      x);
  return out;
}

namespace detail {

// Copies `src` into `dst` with two axes swapped; used by both directions of
// transpose so forward and backward share one kernel.
template <typename S>
void transpose_copy(const S* src, S* dst, const Shape& src_shape, int ax0, int ax1) {
  const int rank = static_cast<int>(src_shape.size());
  std::vector<std::int64_t> src_strides(static_cast<std::size_t>(rank), 1);
  for (int i = rank - 2; i >= 0; --i) {
    src_strides[static_cast<std::size_t>(i)] =
        src_strides[static_cast<std::size_t>(i + 1)] * src_shape[static_cast<std::size_t>(i + 1)];
  }
  Shape dst_shape = src_shape;
  std::swap(dst_shape[static_cast<std::size_t>(ax0)], dst_shape[static_cast<std::size_t>(ax1)]);
  std::vector<std::int64_t> walk_strides(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) walk_strides[static_cast<std::size_t>(i)] = src_strides[static_cast<std::size_t>(i)];
  std::swap(walk_strides[static_cast<std::size_t>(ax0)], walk_strides[static_cast<std::size_t>(ax1)]);

  const std::int64_t total = shape_numel(src_shape);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
  std::int64_t src_off = 0;
  for (std::int64_t flat = 0; flat < total; ++flat) {
    dst[flat] = src[src_off];
    for (int ax = rank - 1; ax >= 0; --ax) {
      idx[static_cast<std::size_t>(ax)]++;
      src_off += walk_strides[static_cast<std::size_t>(ax)];
      if (idx[static_cast<std::size_t>(ax)] < dst_shape[static_cast<std::size_t>(ax)]) break;
      src_off -= walk_strides[static_cast<std::size_t>(ax)] * dst_shape[static_cast<std::size_t>(ax)];
      idx[static_cast<std::size_t>(ax)] = 0;
    }
  }
}

}  // namespace detail

/// Swap two axes (copying).
template <typename S>
Tensor<S> transpose(Tensor<S> x, int ax0, int ax1) {
  const int rank = x.rank();
  if (ax0 < 0 || ax0 >= rank || ax1 < 0 || ax1 >= rank) {
    shape_error("transpose: axes (" + std::to_string(ax0) + "," + std::to_string(ax1) +
                ") out of range for shape " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  std::swap(out_shape[static_cast<std::size_t>(ax0)], out_shape[static_cast<std::size_t>(ax1)]);
  Tensor<S> out(out_shape);
  detail::transpose_copy(x.value().data(), out.value().data(), x.shape(), ax0, ax1);
  detail::finish_op(
      "transpose", out,
      [x, out, ax0, ax1]() mutable {
        if (!x.requires_grad()) return;
        std::vector<S> gsrc(static_cast<std::size_t>(x.numel()));
        detail::transpose_copy(out.grad_view().data(), gsrc.data(), out.shape(), ax0, ax1);
        VecMap<S>(x.grad().data(), x.numel()) += ConstVecMap<S>(gsrc.data(), x.numel());
      },
      x);
  return out;
}

template <typename S>
Tensor<S> slice(Tensor<S> x, int axis, int start, int len) {
  const auto span = detail::axis_span(x.shape(), axis, "slice");
  if (start < 0 || len < 1 || start + len > span.extent) {
    shape_error("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") invalid for extent " + std::to_string(span.extent));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor<S> out(out_shape);
  const std::int64_t block = span.inner;
  for (std::int64_t o = 0; o < span.outer; ++o) {
    const S* src = x.value().data() + (o * span.extent + start) * block;
    S* dst = out.value().data() + o * len * block;
    std::copy_n(src, static_cast<std::size_t>(len * block), dst);
  }
  detail::finish_op(
      "slice", out,
      [x, out, span, start, len]() mutable {
        if (!x.requires_grad()) return;
        const std::int64_t block = span.inner;
        auto& gx = x.grad();
        const auto& g = out.grad_view();
        for (std::int64_t o = 0; o < span.outer; ++o) {
          VecMap<S>(gx.data() + (o * span.extent + start) * block, len * block) +=
              ConstVecMap<S>(g.data() + o * len * block, len * block);
        }
      },
      x);
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) shape_error("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(out_shape.size())) {
    shape_error("concat: axis " + std::to_string(axis) + " out of range");
  }
  int total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    s[static_cast<std::size_t>(axis)] = 0;
    Shape ref = out_shape;
    ref[static_cast<std::size_t>(axis)] = 0;
    if (s != ref) {
      shape_error("concat: shape " + shape_str(p.shape()) + " incompatible with " +
                  shape_str(out_shape) + " along axis " + std::to_string(axis));
    }
    total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  Tensor<S> out(out_shape);
  const auto span = detail::axis_span(out_shape, axis, "concat");
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t ext = p.dim(axis);
    for (std::int64_t o = 0; o < span.outer; ++o) {
      std::copy_n(p.value().data() + o * ext * span.inner,
                  static_cast<std::size_t>(ext * span.inner),
                  out.value().data() + (o * span.extent + offset) * span.inner);
    }
    offset += ext;
  }
  bool any_grad = false;
  for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
  Tape<S>* tape = active_tape<S>();
  detail::check_finite(*out.impl(), "concat");
  if (tape != nullptr && any_grad) {
    out.set_requires_grad(true);
    auto parts_copy = parts;
    tape->record(out.impl(), [parts_copy, out, span]() mutable {
      const auto& g = out.grad_view();
      std::int64_t offset = 0;
      for (auto& p : parts_copy) {
        const std::int64_t ext = p.numel() / (span.outer * span.inner);
        if (p.requires_grad()) {
          auto& gp = p.grad();
          for (std::int64_t o = 0; o < span.outer; ++o) {
            VecMap<S>(gp.data() + o * ext * span.inner, ext * span.inner) +=
                ConstVecMap<S>(g.data() + (o * span.extent + offset) * span.inner,
                               ext * span.inner);
          }
        }
        offset += ext;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(Tensor<S> x) {
  Tensor<S> out = Tensor<S>::scalar(ConstVecMap<S>(x.value().data(), x.numel()).sum());
  detail::finish_op(
      "sum", out,
      [x, out]() mutable {
        if (!x.requires_grad()) return;
        VecMap<S>(x.grad().data(), x.numel()) += out.grad_view()[0];
      },
      x);
  return out;
}

template <typename S>
Tensor<S> mean(Tensor<S> x) {
  const S inv = S(1) / static_cast<S>(x.numel());
  Tensor<S> out = Tensor<S>::scalar(ConstVecMap<S>(x.value().data(), x.numel()).sum() * inv);
  detail::finish_op(
      "mean", out,
      [x, out, inv]() mutable {
        if (!x.requires_grad()) return;
        VecMap<S>(x.grad().data(), x.numel()) += out.grad_view()[0] * inv;
      },
      x);
  return out;
}

/// Batched matrix product [..,M,K] x [..,K,N] -> [..,M,N]. Leading batch
/// extents must match exactly, or the right operand may be a plain 2-D matrix
/// shared across the batch. No other broadcasting.
template <typename S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    shape_error("matmul: operands must have rank >= 2, got " + shape_str(sa) + " and " +
                shape_str(sb));
  }
  const int m = sa[sa.size() - 2];
  const int k = sa[sa.size() - 1];
  const int kb = sb[sb.size() - 2];
  const int n = sb[sb.size() - 1];
  if (k != kb) {
    shape_error("matmul: inner extents differ, " + shape_str(sa) + " x " + shape_str(sb));
  }
  const bool shared_rhs = sb.size() == 2;
  Shape batch(sa.begin(), sa.end() - 2);
  if (!shared_rhs) {
    Shape batch_b(sb.begin(), sb.end() - 2);
    if (batch != batch_b) {
      shape_error("matmul: batch extents differ, " + shape_str(sa) + " x " + shape_str(sb));
    }
  }
  const std::int64_t nbatch = shape_numel(batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<S> out(out_shape);

  for (std::int64_t i = 0; i < nbatch; ++i) {
    ConstMatMap<S> ma(a.value().data() + i * m * k, m, k);
    ConstMatMap<S> mb(b.value().data() + (shared_rhs ? 0 : i * k * n), k, n);
    MatMap<S> mo(out.value().data() + i * m * n, m, n);
    mo.noalias() = ma * mb;
  }

  detail::finish_op(
      "matmul", out,
      [a, b, out, m, k, n, nbatch, shared_rhs]() mutable {
        const auto& g = out.grad_view();
        for (std::int64_t i = 0; i < nbatch; ++i) {
          ConstMatMap<S> mg(g.data() + i * m * n, m, n);
          if (a.requires_grad()) {
            ConstMatMap<S> mb(b.value().data() + (shared_rhs ? 0 : i * k * n), k, n);
            MatMap<S> ga(a.grad().data() + i * m * k, m, k);
            ga.noalias() += mg * mb.transpose();
          }
          if (b.requires_grad()) {
            ConstMatMap<S> ma(a.value().data() + i * m * k, m, k);
            MatMap<S> gb(b.grad().data() + (shared_rhs ? 0 : i * k * n), k, n);
            gb.noalias() += ma.transpose() * mg;
          }
        }
      },
      a, b);
  return out;
}

namespace detail {

// Stable softmax of one strided lane.
template <typename S>
inline void softmax_lane(const S* x, S* out, std::int64_t n, std::int64_t stride) {
  S mx = x[0];
  for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i * stride]);
  S denom = S(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const S e = std::exp(x[i * stride] - mx);
    out[i * stride] = e;
    denom += e;
  }
  const S inv = S(1) / denom;
  for (std::int64_t i = 0; i < n; ++i) out[i * stride] *= inv;
}

}  // namespace detail

template <typename S>
Tensor<S> softmax(Tensor<S> x, int axis) {
  const auto span = detail::axis_span(x.shape(), axis, "softmax");
  Tensor<S> out(x.shape());
  for (std::int64_t o = 0; o < span.outer; ++o) {
    for (std::int64_t in = 0; in < span.inner; ++in) {
      const std::int64_t base = o * span.extent * span.inner + in;
      detail::softmax_lane(x.value().data() + base, out.value().data() + base, span.extent,
                           span.inner);
    }
  }
  detail::finish_op(
      "softmax", out,
      [x, out, span]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = out.grad_view();
        const auto& p = out.value();
        auto& gx = x.grad();
        for (std::int64_t o = 0; o < span.outer; ++o) {
          for (std::int64_t in = 0; in < span.inner; ++in) {
            const std::int64_t base = o * span.extent * span.inner + in;
            S dot = S(0);
            for (std::int64_t i = 0; i < span.extent; ++i) {
              dot += g[static_cast<std::size_t>(base + i * span.inner)] *
                     p[static_cast<std::size_t>(base + i * span.inner)];
            }
            for (std::int64_t i = 0; i < span.extent; ++i) {
              const std::size_t idx = static_cast<std::size_t>(base + i * span.inner);
              gx[idx] += p[idx] * (g[idx] - dot);
            }
          }
        }
      },
      x);
  return out;
}

template <typename S>
Tensor<S> log_softmax(Tensor<S> x, int axis) {
  const auto span = detail::axis_span(x.shape(), axis, "log_softmax");
  Tensor<S> out(x.shape());
  for (std::int64_t o = 0; o < span.outer; ++o) {
    for (std::int64_t in = 0; in < span.inner; ++in) {
      const std::int64_t base = o * span.extent * span.inner + in;
      const S* xp = x.value().data() + base;
      S* op = out.value().data() + base;
      S mx = xp[0];
      for (std::int64_t i = 1; i < span.extent; ++i) mx = std::max(mx, xp[i * span.inner]);
      S denom = S(0);
      for (std::int64_t i = 0; i < span.extent; ++i) denom += std::exp(xp[i * span.inner] - mx);
      const S lse = mx + std::log(denom);
      for (std::int64_t i = 0; i < span.extent; ++i) op[i * span.inner] = xp[i * span.inner] - lse;
    }
  }
  detail::finish_op(
      "log_softmax", out,
      [x, out, span]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = out.grad_view();
        const auto& lp = out.value();
        auto& gx = x.grad();
        for (std::int64_t o = 0; o < span.outer; ++o) {
          for (std::int64_t in = 0; in < span.inner; ++in) {
            const std::int64_t base = o * span.extent * span.inner + in;
            S gsum = S(0);
            for (std::int64_t i = 0; i < span.extent; ++i) {
              gsum += g[static_cast<std::size_t>(base + i * span.inner)];
            }
            for (std::int64_t i = 0; i < span.extent; ++i) {
              const std::size_t idx = static_cast<std::size_t>(base + i * span.inner);
              gx[idx] += g[idx] - std::exp(lp[idx]) * gsum;
            }
          }
        }
      },
      x);
  return out;
}

/// Softmax over the last axis of [B,H,Lq,Lk] scores restricted to the causal
/// set: query row i attends to keys j <= i + offset. Masked entries come out
/// exactly zero, so no -inf ever enters the arithmetic.
template <typename S>
Tensor<S> masked_causal_softmax(Tensor<S> scores, int offset) {
  if (scores.rank() < 2) shape_error("masked_causal_softmax: rank must be >= 2");
  if (offset < 0) shape_error("masked_causal_softmax: negative offset");
  const int lk = scores.dim(scores.rank() - 1);
  const int lq = scores.dim(scores.rank() - 2);
  const std::int64_t rows = scores.numel() / (static_cast<std::int64_t>(lq) * lk);
  Tensor<S> out(scores.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    for (int i = 0; i < lq; ++i) {
      const std::int64_t base = (r * lq + i) * lk;
      const int visible = std::min(lk, i + offset + 1);
      const S* xp = scores.value().data() + base;
      S* op = out.value().data() + base;
      S mx = xp[0];
      for (int j = 1; j < visible; ++j) mx = std::max(mx, xp[j]);
      S denom = S(0);
      for (int j = 0; j < visible; ++j) {
        const S e = std::exp(xp[j] - mx);
        op[j] = e;
        denom += e;
      }
      const S inv = S(1) / denom;
      for (int j = 0; j < visible; ++j) op[j] *= inv;
      for (int j = visible; j < lk; ++j) op[j] = S(0);
    }
  }
  detail::finish_op(
      "masked_causal_softmax", out,
      [scores, out, lq, lk, rows, offset]() mutable {
        if (!scores.requires_grad()) return;
        const auto& g = out.grad_view();
        const auto& p = out.value();
        auto& gx = scores.grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          for (int i = 0; i < lq; ++i) {
            const std::int64_t base = (r * lq + i) * lk;
            const int visible = std::min(lk, i + offset + 1);
            S dot = S(0);
            for (int j = 0; j < visible; ++j) {
              dot += g[static_cast<std::size_t>(base + j)] * p[static_cast<std::size_t>(base + j)];
            }
            for (int j = 0; j < visible; ++j) {
              const std::size_t idx = static_cast<std::size_t>(base + j);
              gx[idx] += p[idx] * (g[idx] - dot);
            }
          }
        }
      },
      scores);
  return out;
}

/// Rotary position embedding over [B,H,L,D] with absolute positions
/// pos_offset..pos_offset+L-1. D must be even; pairs (2i, 2i+1) rotate by
/// angle pos * base^(-2i/D).
template <typename S>
Tensor<S> rope(Tensor<S> x, int pos_offset, double base) {
  if (x.rank() != 4) shape_error("rope: expected [B,H,L,D], got " + shape_str(x.shape()));
  const int d = x.dim(3);
  const int l = x.dim(2);
  if (d % 2 != 0) shape_error("rope: head dim must be even, got " + std::to_string(d));
  const std::int64_t lanes = x.numel() / (static_cast<std::int64_t>(l) * d);

  // Angles are evaluated in double and cast, so float and double runs agree
  // up to rounding of the inputs.
  std::vector<S> cos_tab(static_cast<std::size_t>(l) * (d / 2));
  std::vector<S> sin_tab(static_cast<std::size_t>(l) * (d / 2));
  for (int p = 0; p < l; ++p) {
    for (int i = 0; i < d / 2; ++i) {
      const double theta = static_cast<double>(p + pos_offset) *
                           std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      cos_tab[static_cast<std::size_t>(p) * (d / 2) + i] = static_cast<S>(std::cos(theta));
      sin_tab[static_cast<std::size_t>(p) * (d / 2) + i] = static_cast<S>(std::sin(theta));
    }
  }

  Tensor<S> out(x.shape());
  for (std::int64_t lane = 0; lane < lanes; ++lane) {
    for (int p = 0; p < l; ++p) {
      const std::int64_t base_idx = (lane * l + p) * d;
      const S* xp = x.value().data() + base_idx;
      S* op = out.value().data() + base_idx;
      for (int i = 0; i < d / 2; ++i) {
        const S c = cos_tab[static_cast<std::size_t>(p) * (d / 2) + i];
        const S s = sin_tab[static_cast<std::size_t>(p) * (d / 2) + i];
        const S x0 = xp[2 * i];
        const S x1 = xp[2 * i + 1];
        op[2 * i] = x0 * c - x1 * s;
        op[2 * i + 1] = x0 * s + x1 * c;
      }
    }
  }
  detail::finish_op(
      "rope", out,
      [x, out, cos_tab, sin_tab, l, d, lanes]() mutable {
        if (!x.requires_grad()) return;
        const auto& g = out.grad_view();
        auto& gx = x.grad();
        for (std::int64_t lane = 0; lane < lanes; ++lane) {
          for (int p = 0; p < l; ++p) {
            const std::int64_t base_idx = (lane * l + p) * d;
            for (int i = 0; i < d / 2; ++i) {
              const S c = cos_tab[static_cast<std::size_t>(p) * (d / 2) + i];
              const S s = sin_tab[static_cast<std::size_t>(p) * (d / 2) + i];
              const S g0 = g[static_cast<std::size_t>(base_idx + 2 * i)];
              const S g1 = g[static_cast<std::size_t>(base_idx + 2 * i + 1)];
              // inverse rotation
              gx[static_cast<std::size_t>(base_idx + 2 * i)] += g0 * c + g1 * s;
              gx[static_cast<std::size_t>(base_idx + 2 * i + 1)] += -g0 * s + g1 * c;
            }
          }
        }
      },
      x);
  return out;
}

/// Mean next-token negative log-likelihood of logits [B,L,V] against
/// pre-shifted targets [B,L]. With ignore_last the final position of each row
/// carries no target and is excluded from the mean.
template <typename S>
Tensor<S> cross_entropy_next_token(Tensor<S> logits,
                                   const std::vector<std::int32_t>& targets, bool ignore_last) {
  if (logits.rank() != 3) {
    shape_error("cross_entropy_next_token: logits must be [B,L,V], got " +
                shape_str(logits.shape()));
  }
  const int b = logits.dim(0);
  const int l = logits.dim(1);
  const int v = logits.dim(2);
  if (static_cast<std::int64_t>(targets.size()) != static_cast<std::int64_t>(b) * l) {
    shape_error("cross_entropy_next_token: expected " + std::to_string(b * l) + " targets, got " +
                std::to_string(targets.size()));
  }
  const int scored = ignore_last ? l - 1 : l;
  if (scored < 1) shape_error("cross_entropy_next_token: no scored positions");

  // Probabilities are kept for the backward pass.
  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(b) * scored * v);
  double total = 0.0;
  for (int bi = 0; bi < b; ++bi) {
    for (int li = 0; li < scored; ++li) {
      const std::int32_t target = targets[static_cast<std::size_t>(bi) * l + li];
      if (target < 0 || target >= v) {
        throw std::out_of_range("cross_entropy_next_token: target id " + std::to_string(target) +
                                " outside vocabulary of size " + std::to_string(v));
      }
      const S* row = logits.value().data() + (static_cast<std::int64_t>(bi) * l + li) * v;
      S* prow = probs->data() + (static_cast<std::int64_t>(bi) * scored + li) * v;
      detail::softmax_lane(row, prow, v, 1);
      total -= std::log(static_cast<double>(prow[target]));
    }
  }
  const std::int64_t n_scored = static_cast<std::int64_t>(b) * scored;
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / static_cast<double>(n_scored)));
  detail::finish_op(
      "cross_entropy_next_token", out,
      [logits, out, probs, targets, b, l, v, scored, n_scored]() mutable {
        if (!logits.requires_grad()) return;
        const S gscale = out.grad_view()[0] / static_cast<S>(n_scored);
        auto& gx = logits.grad();
        for (int bi = 0; bi < b; ++bi) {
          for (int li = 0; li < scored; ++li) {
            const std::int32_t target = targets[static_cast<std::size_t>(bi) * l + li];
            const S* prow = probs->data() + (static_cast<std::int64_t>(bi) * scored + li) * v;
            S* grow = gx.data() + (static_cast<std::int64_t>(bi) * l + li) * v;
            for (int j = 0; j < v; ++j) grow[j] += gscale * prow[j];
            grow[target] -= gscale;
          }
        }
      },
      logits);
  return out;
}

/// Distillation term: T^2 * KL(softmax(teacher/T) || softmax(student/T)),
/// averaged over the same scored positions as the cross-entropy loss.
/// Gradients flow only into the student logits.
template <typename S>
Tensor<S> kd_kl_loss(Tensor<S> student_logits, Tensor<S> teacher_logits,
                     S temperature, bool ignore_last) {
  detail::check_same_shape(student_logits, teacher_logits, "kd_kl_loss");
  if (student_logits.rank() != 3) {
    shape_error("kd_kl_loss: logits must be [B,L,V], got " + shape_str(student_logits.shape()));
  }
  if (!(temperature > S(0))) shape_error("kd_kl_loss: temperature must be positive");
  const int b = student_logits.dim(0);
  const int l = student_logits.dim(1);
  const int v = student_logits.dim(2);
  const int scored = ignore_last ? l - 1 : l;
  if (scored < 1) shape_error("kd_kl_loss: no scored positions");
  const std::int64_t n_scored = static_cast<std::int64_t>(b) * scored;

  auto p_teacher = std::make_shared<std::vector<S>>(static_cast<std::size_t>(b) * scored * v);
  auto p_student = std::make_shared<std::vector<S>>(static_cast<std::size_t>(b) * scored * v);
  std::vector<S> scaled(static_cast<std::size_t>(v));
  double total = 0.0;
  const S inv_t = S(1) / temperature;
  for (int bi = 0; bi < b; ++bi) {
    for (int li = 0; li < scored; ++li) {
      const std::int64_t row_off = (static_cast<std::int64_t>(bi) * l + li) * v;
      const std::int64_t prow_off = (static_cast<std::int64_t>(bi) * scored + li) * v;
      for (int j = 0; j < v; ++j) scaled[static_cast<std::size_t>(j)] = teacher_logits.value()[row_off + j] * inv_t;
      detail::softmax_lane(scaled.data(), p_teacher->data() + prow_off, v, 1);
      for (int j = 0; j < v; ++j) scaled[static_cast<std::size_t>(j)] = student_logits.value()[row_off + j] * inv_t;
      detail::softmax_lane(scaled.data(), p_student->data() + prow_off, v, 1);
      for (int j = 0; j < v; ++j) {
        const double pt = static_cast<double>((*p_teacher)[prow_off + j]);
        if (pt > 0.0) {
          total += pt * (std::log(pt) - std::log(static_cast<double>((*p_student)[prow_off + j])));
        }
      }
    }
  }
  const double t2 = static_cast<double>(temperature) * static_cast<double>(temperature);
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(t2 * total / static_cast<double>(n_scored)));
  detail::finish_op(
      "kd_kl_loss", out,
      [student_logits, out, p_teacher, p_student, temperature, b, l, v, scored,
       n_scored]() mutable {
        if (!student_logits.requires_grad()) return;
        // d/dz_S of T^2*KL = T * (p_S - p_T) per scored position
        const S gscale = out.grad_view()[0] * temperature / static_cast<S>(n_scored);
        auto& gx = student_logits.grad();
        for (int bi = 0; bi < b; ++bi) {
          for (int li = 0; li < scored; ++li) {
            const std::int64_t row_off = (static_cast<std::int64_t>(bi) * l + li) * v;
            const std::int64_t prow_off = (static_cast<std::int64_t>(bi) * scored + li) * v;
            for (int j = 0; j < v; ++j) {
              gx[row_off + j] +=
                  gscale * ((*p_student)[prow_off + j] - (*p_teacher)[prow_off + j]);
            }
          }
        }
      },
      student_logits);
  return out;
}

}  // namespace lvm

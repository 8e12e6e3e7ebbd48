#pragma once

// Finite-difference sweep over every differentiable op, shared by the tensor
// unit tests and the acceptance suite. All checks run at 64-bit with h=1e-5
// against randomized small shapes.

#include <functional>
#include <string>
#include <vector>

#include "lvm/gradcheck.hpp"
#include "lvm/ops.hpp"
#include "lvm/rng.hpp"

namespace fd_suite {

using lvm::Rng;
using lvm::Shape;
using lvm::Tensor;

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.value()) v = rng.uniform(lo, hi);
  return t;
}

// Scalar probe: sum(op_output .* W) with a fixed random W touches every
// output element with a distinct weight.
inline Tensor<double> weighted_sum(const Tensor<double>& y, const Tensor<double>& w) {
  return lvm::sum(lvm::mul(y, w));
}

struct OpCheck {
  std::string name;
  double max_rel_err;
};

/// Runs `seeds` randomized finite-difference checks per differentiable op and
/// returns the worst relative error observed for each.
inline std::vector<OpCheck> run_fd_sweep(int seeds, double h = 1e-5) {
  std::vector<OpCheck> results;
  auto record = [&](const std::string& name, double err) {
    for (auto& r : results) {
      if (r.name == name) {
        r.max_rel_err = std::max(r.max_rel_err, err);
        return;
      }
    }
    results.push_back({name, err});
  };

  for (int s = 0; s < seeds; ++s) {
    Rng rng(0xFD0000u + static_cast<std::uint64_t>(s));
    const int m = 2 + static_cast<int>(rng.below(3));
    const int k = 2 + static_cast<int>(rng.below(3));
    const int n = 2 + static_cast<int>(rng.below(3));

    {
      const Tensor<double> b = random_tensor(rng, {k, n});
      const Tensor<double> w = random_tensor(rng, {m, n});
      record("matmul_lhs", lvm::finite_diff_check(
                               [&](const Tensor<double>& x) {
                                 return weighted_sum(lvm::matmul(x, b), w);
                               },
                               random_tensor(rng, {m, k}), h));
      const Tensor<double> a = random_tensor(rng, {m, k});
      record("matmul_rhs", lvm::finite_diff_check(
                               [&](const Tensor<double>& x) {
                                 return weighted_sum(lvm::matmul(a, x), w);
                               },
                               random_tensor(rng, {k, n}), h));
      const Tensor<double> ab = random_tensor(rng, {2, m, k});
      const Tensor<double> wb = random_tensor(rng, {2, m, n});
      record("matmul_batched", lvm::finite_diff_check(
                                   [&](const Tensor<double>& x) {
                                     return weighted_sum(lvm::matmul(ab, x), wb);
                                   },
                                   random_tensor(rng, {2, k, n}), h));
    }

    {
      const Tensor<double> other = random_tensor(rng, {m, n});
      const Tensor<double> w = random_tensor(rng, {m, n});
      record("add", lvm::finite_diff_check(
                        [&](const Tensor<double>& x) { return weighted_sum(lvm::add(x, other), w); },
                        random_tensor(rng, {m, n}), h));
      record("sub", lvm::finite_diff_check(
                        [&](const Tensor<double>& x) { return weighted_sum(lvm::sub(x, other), w); },
                        random_tensor(rng, {m, n}), h));
      record("mul", lvm::finite_diff_check(
                        [&](const Tensor<double>& x) { return weighted_sum(lvm::mul(x, other), w); },
                        random_tensor(rng, {m, n}), h));
      record("scale", lvm::finite_diff_check(
                          [&](const Tensor<double>& x) {
                            return weighted_sum(lvm::scale(x, 1.7), w);
                          },
                          random_tensor(rng, {m, n}), h));
      record("silu", lvm::finite_diff_check(
                         [&](const Tensor<double>& x) { return weighted_sum(lvm::silu(x), w); },
                         random_tensor(rng, {m, n}, -3.0, 3.0), h));
      record("mean", lvm::finite_diff_check(
                         [&](const Tensor<double>& x) { return lvm::mean(lvm::mul(x, x)); },
                         random_tensor(rng, {m, n}), h));
      record("sum", lvm::finite_diff_check(
                        [&](const Tensor<double>& x) { return lvm::sum(lvm::mul(x, x)); },
                        random_tensor(rng, {m, n}), h));
    }

    {
      const Tensor<double> w = random_tensor(rng, {m, k, n});
      record("reshape", lvm::finite_diff_check(
                            [&](const Tensor<double>& x) {
                              return weighted_sum(lvm::reshape(x, {m, k, n}), w);
                            },
                            random_tensor(rng, {m * k, n}), h));
      const Tensor<double> wt = random_tensor(rng, {n, k, m});
      record("transpose", lvm::finite_diff_check(
                              [&](const Tensor<double>& x) {
                                return weighted_sum(lvm::transpose(x, 0, 2), wt);
                              },
                              random_tensor(rng, {m, k, n}), h));
    }

    {
      const int axis = static_cast<int>(rng.below(2));
      const Tensor<double> w = random_tensor(rng, {m, n});
      record("softmax", lvm::finite_diff_check(
                            [&](const Tensor<double>& x) {
                              return weighted_sum(lvm::softmax(x, axis), w);
                            },
                            random_tensor(rng, {m, n}, -2.0, 2.0), h));
      record("log_softmax", lvm::finite_diff_check(
                                [&](const Tensor<double>& x) {
                                  return weighted_sum(lvm::log_softmax(x, axis), w);
                                },
                                random_tensor(rng, {m, n}, -2.0, 2.0), h));
    }

    {
      const Tensor<double> weight = random_tensor(rng, {n}, 0.5, 1.5);
      const Tensor<double> w = random_tensor(rng, {m, n});
      record("rmsnorm_x", lvm::finite_diff_check(
                              [&](const Tensor<double>& x) {
                                return weighted_sum(lvm::rmsnorm(x, weight, 1e-5), w);
                              },
                              random_tensor(rng, {m, n}), h));
      const Tensor<double> x0 = random_tensor(rng, {m, n});
      record("rmsnorm_w", lvm::finite_diff_check(
                              [&](const Tensor<double>& g) {
                                return weighted_sum(lvm::rmsnorm(x0, g, 1e-5), w);
                              },
                              random_tensor(rng, {n}, 0.5, 1.5), h));
    }

    {
      std::vector<std::int32_t> ids;
      for (int i = 0; i < m * 2; ++i) ids.push_back(static_cast<std::int32_t>(rng.below(5)));
      const Tensor<double> w = random_tensor(rng, {m, 2, n});
      record("embedding_lookup",
             lvm::finite_diff_check(
                 [&](const Tensor<double>& table) {
                   return weighted_sum(lvm::embedding_lookup(table, ids, {m, 2}), w);
                 },
                 random_tensor(rng, {5, n}), h));
    }

    {
      const Tensor<double> w = random_tensor(rng, {m, n});
      record("slice", lvm::finite_diff_check(
                          [&](const Tensor<double>& x) {
                            return weighted_sum(lvm::slice(x, 1, 1, n), w);
                          },
                          random_tensor(rng, {m, n + 2}), h));
      const Tensor<double> other = random_tensor(rng, {m, 2});
      const Tensor<double> wc = random_tensor(rng, {m, n + 2});
      record("concat", lvm::finite_diff_check(
                           [&](const Tensor<double>& x) {
                             return weighted_sum(lvm::concat<double>({x, other}, 1), wc);
                           },
                           random_tensor(rng, {m, n}), h));
    }

    {
      const int heads = 2, len = 3, dh = 4;
      const int offset = static_cast<int>(rng.below(3));
      const Tensor<double> w = random_tensor(rng, {1, heads, len, dh});
      record("rope", lvm::finite_diff_check(
                         [&](const Tensor<double>& x) {
                           return weighted_sum(lvm::rope(x, offset, 10000.0), w);
                         },
                         random_tensor(rng, {1, heads, len, dh}), h));
      const Tensor<double> ws = random_tensor(rng, {1, heads, len, len});
      record("masked_causal_softmax",
             lvm::finite_diff_check(
                 [&](const Tensor<double>& x) {
                   return weighted_sum(lvm::masked_causal_softmax(x, 0), ws);
                 },
                 random_tensor(rng, {1, heads, len, len}, -2.0, 2.0), h));
    }

    {
      const int b = 1, l = 3, v = 4;
      std::vector<std::int32_t> targets;
      for (int i = 0; i < b * l; ++i) targets.push_back(static_cast<std::int32_t>(rng.below(v)));
      record("cross_entropy_next_token",
             lvm::finite_diff_check(
                 [&](const Tensor<double>& x) {
                   return lvm::cross_entropy_next_token(x, targets, true);
                 },
                 random_tensor(rng, {b, l, v}, -2.0, 2.0), h));
      const Tensor<double> teacher = random_tensor(rng, {b, l, v}, -2.0, 2.0);
      record("kd_kl_loss", lvm::finite_diff_check(
                               [&](const Tensor<double>& x) {
                                 return lvm::kd_kl_loss(x, teacher, 2.0, true);
                               },
                               random_tensor(rng, {b, l, v}, -2.0, 2.0), h));
    }
  }
  return results;
}

}  // namespace fd_suite

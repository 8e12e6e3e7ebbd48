#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lvm {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int extent : shape) n *= extent;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

[[noreturn]] inline void shape_error(const std::string& msg) {
  throw std::invalid_argument(msg);
}

// Opt-in fail-fast on non-finite op outputs. Off by default; training turns it
// on through TrainConfig::debug_checks.
inline std::atomic<bool>& debug_check_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}
inline void set_debug_checks(bool on) { debug_check_flag().store(on); }
inline bool debug_checks_enabled() {
  return debug_check_flag().load(std::memory_order_relaxed);
}

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

/// Dense row-major tensor handle. Copies share the underlying buffer; the
/// scalar type selects 32-bit training or 64-bit verification arithmetic.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : impl_(std::make_shared<TensorImpl<S>>()) {
    impl_->shape = {};
    impl_->value.assign(1, S(0));
  }

  explicit Tensor(Shape shape, S fill = S(0)) {
    impl_ = std::make_shared<TensorImpl<S>>();
    impl_->shape = std::move(shape);
    const std::int64_t n = shape_numel(impl_->shape);
    if (n < 0) shape_error("tensor shape " + shape_str(impl_->shape) + " has a negative extent");
    impl_->value.assign(static_cast<std::size_t>(n), fill);
  }

  static Tensor from_data(Shape shape, std::vector<S> data) {
    Tensor t;
    t.impl_->shape = std::move(shape);
    if (shape_numel(t.impl_->shape) != static_cast<std::int64_t>(data.size())) {
      shape_error("data of length " + std::to_string(data.size()) +
                  " does not fill shape " + shape_str(t.impl_->shape));
    }
    t.impl_->value = std::move(data);
    return t;
  }

  static Tensor scalar(S v) {
    Tensor t;
    t.impl_->value[0] = v;
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return impl_->numel(); }

  std::vector<S>& value() { return impl_->value; }
  const std::vector<S>& value() const { return impl_->value; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<S>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  const std::vector<S>& grad_view() const {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.assign(impl_->value.size(), S(0)); }

  S item() const {
    if (numel() != 1) shape_error("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->value[0];
  }

  template <typename T2>
  Tensor<T2> cast() const {
    Tensor<T2> out(impl_->shape);
    for (std::size_t i = 0; i < impl_->value.size(); ++i) {
      out.value()[i] = static_cast<T2>(impl_->value[i]);
    }
    return out;
  }

  Tensor clone() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->value = impl_->value;
    return t;
  }

  const std::shared_ptr<TensorImpl<S>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<S>> impl_;
};

/// Linear record of executed ops. backward() walks it once in reverse,
/// which is a valid topological order by construction.
template <typename S>
class Tape {
 public:
  using ImplPtr = std::shared_ptr<TensorImpl<S>>;

  void record(ImplPtr output, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(output), std::move(backward)});
  }

  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) {
      shape_error("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // not on the path to the loss
      it->backward();
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    ImplPtr output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

template <typename S>
inline thread_local Tape<S>* t_active_tape = nullptr;

template <typename S>
Tape<S>* active_tape() {
  return t_active_tape<S>;
}

/// Activates a tape for the current thread; ops record onto it while any of
/// their inputs require gradients. Pass nullptr for inference-mode scopes.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>* tape) : prev_(t_active_tape<S>) { t_active_tape<S> = tape; }
  ~TapeScope() { t_active_tape<S> = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

namespace detail {

template <typename S>
inline void check_finite(const TensorImpl<S>& t, const char* op_name) {
  if (!debug_checks_enabled()) return;
  for (S v : t.value) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw std::runtime_error(std::string("non-finite value produced by op '") + op_name + "'");
    }
  }
}

template <typename S, typename... Inputs>
inline void finish_op(const char* name, Tensor<S>& out, std::function<void()> backward,
                      const Inputs&... inputs) {
  check_finite(*out.impl(), name);
  const bool needs_grad = (... || inputs.requires_grad());
  Tape<S>* tape = active_tape<S>();
  if (tape != nullptr && needs_grad) {
    out.set_requires_grad(true);
    tape->record(out.impl(), std::move(backward));
  }
}

}  // namespace detail

// Eigen views over tensor storage (row-major, matching the data layout).
template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<MatrixRM<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const MatrixRM<S>>;
template <typename S>
using VecMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstVecMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

}  // namespace lvm

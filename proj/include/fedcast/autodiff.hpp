#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fedcast/tensor.hpp"

// Tape-based reverse-mode automatic differentiation.
//
// Each Tape records nodes in creation order, which is already a topological
// order of the graph; backward() walks it once in reverse. A tape is
// single-threaded; independent tapes may be used from different threads.
namespace fedcast::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  /// Gradient accumulated by the last backward(); zero if unreached.
  const Tensor& grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an interior node. `backward` reads this node's gradient and
  /// accumulates into the inputs' gradients.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 and propagates. Root must hold one element.
  void backward(const Var& root);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const {
    return nodes_[id].inputs;
  }
  /// Mutable gradient buffer, allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t id);
  const Tensor& grad(std::size_t id) const;
  bool has_backward_run() const { return backward_done_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- core ops ---------------------------------------------------------

Var matmul(const Var& a, const Var& b);                 // [m,k] x [k,n]
Var bmm(const Var& a, const Var& b, bool trans_b = false);  // batched 3-D
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
/// a[..., j] + bias[j]
Var add_bias(const Var& a, const Var& bias);

Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope = 0.01);
/// Softmax along the last axis.
Var softmax(const Var& a);

Var reshape(const Var& a, Shape shape);
Var transpose(const Var& a);     // 2-D only
Var permute_0213(const Var& a);  // [a,b,c,d] -> [a,c,b,d]
/// Columns [begin, end) of the last axis.
Var slice(const Var& a, std::size_t begin, std::size_t end);
/// Concatenation along the last axis; leading dims must agree.
Var concat(std::span<const Var> parts);

Var sum(const Var& a);
Var reduce_mean(const Var& a);
/// Mean over axis 1 of a 3-D tensor: [b,t,d] -> [b,d].
Var mean_axis1(const Var& a);

/// mean((pred - target)^2) over every element.
Var mse(const Var& pred, const Tensor& target);
/// sum((a - anchor)^2)
Var squared_distance(const Var& a, const Tensor& anchor);

/// 2-D convolution, stride 1, zero "same" padding, odd square kernel.
/// x: [b, cin, h, w], weight: [cout, cin, k, k], bias: [cout].
Var conv2d(const Var& x, const Var& weight, const Var& bias);

struct BatchNormOptions {
  std::size_t channel_axis = 1;
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
  Tensor* running_mean = nullptr;  // updated in training mode
  Tensor* running_var = nullptr;
};

/// Normalizes each channel over every other axis. Training mode uses batch
/// statistics (and updates running statistics when given); eval mode uses
/// the running statistics.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta,
               const BatchNormOptions& options);

// ---- gradient checking ------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates skipped because one-sided differences disagree, i.e. the
  /// probe straddles a non-differentiable point such as a relu kink.
  std::size_t excluded = 0;
};

using ScalarGraph =
    std::function<Var(Tape& tape, std::span<const Var> params)>;

/// Compares tape gradients with central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) for every coordinate of every parameter.
GradCheckResult grad_check(const ScalarGraph& f, std::vector<Tensor> params,
                           double eps = 1e-5, double denom_floor = 1e-6);

}  // namespace fedcast::ad

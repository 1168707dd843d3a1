#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "dnd/tensor.hpp"

namespace dnd {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t numel() const { return value().numel(); }
};

enum class Activation { relu, sigmoid, tanh };
enum class LossKind { cross_entropy, mse };

/// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so
/// ids are already a topological order; backward() walks them in reverse.
/// A tape is rebuilt for every forward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable leaf. backward() accumulates d(loss)/d(t) into t.grad.
  /// `t` must outlive the tape.
  Var param(Tensor& t);
  /// Non-trainable leaf referencing external storage (no copy).
  Var constant_ref(const Tensor& t);
  /// Leaf owning a copy of `t`. If requires_grad, its gradient is readable
  /// through grad() after backward().
  Var input(Tensor t, bool requires_grad = false);

  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node; empty before backward() or if not required.
  std::vector<double>& grad(std::size_t id) { return nodes_[id].grad; }
  const std::vector<double>& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Populates gradients of every ancestor of `loss`, which must be a
  /// one-element value recorded on this tape. Throws ContractError otherwise.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor* sink = nullptr;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// Differentiable operations. All operands must live on the same tape.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// [m x n] + [n] broadcast over rows (also accepts a rank-1 `a` of length n).
Var add_bias(Var a, Var bias);
/// [c x h x w] + [c] broadcast over each channel plane.
Var add_channel_bias(Var a, Var bias);
Var activate(Var x, Activation kind);
Var exp(Var x);
Var square(Var x);
Var sum(Var x);
Var mean(Var x);
/// Softmax over the last axis of a rank-1 or rank-2 value (row-wise).
Var softmax(Var x);
Var reshape(Var x, Shape shape);
/// Cross-correlation with zero padding. input [c_in x h x w], kernels
/// [c_out x c_in x k x k].
Var conv2d(Var input, Var kernels, std::size_t stride, std::size_t padding);
/// Slice `i` of the leading axis.
Var select(Var x, std::size_t i);
/// Concatenate rank-2 values with equal column counts along rows.
Var concat_rows(std::span<const Var> parts);
/// cross_entropy: -sum t*log(p + 1e-12), averaged over rows for rank-2 input.
/// mse: mean((p - t)^2).
Var compute_loss(Var pred, Var target, LossKind kind);

/// Central-difference gradient of a scalar function, element by element.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double h = 1e-5);

/// Momentum SGD: v <- momentum*v + grad; p <- p - lr*v; grads cleared.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum);
  /// Throws ContractError if a parameter has no gradient.
  void step(std::span<Tensor* const> params);
  double lr() const noexcept { return lr_; }

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

/// Stateless single step (velocity supplied by the caller).
void sgd_step(std::span<Tensor* const> params, std::vector<std::vector<double>>& velocity,
              double lr, double momentum);

}  // namespace dnd

#pragma once

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "stemdiff/core/random.hpp"
#include "stemdiff/core/tensor.hpp"

/// Tape-free reverse-mode differentiation over Tensor values. Each op records its
/// inputs and a closure that scatters the output gradient into them; backward()
/// walks the graph in reverse topological order.
namespace stemdiff::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<T>(value.shape());
      has_grad = true;
    }
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  /// For optimizers and loaders; never call while a graph that reads this value is alive.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->has_grad; }
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() {
    node_->has_grad = false;
    node_->grad = Tensor<T>();
  }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }
  bool defined() const { return node_ != nullptr; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// While alive, ops produce plain values without recording a graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Seeds d(root)/d(root) = 1 (root must hold one element) and accumulates
/// gradients into every reachable node that requires them.
template <typename T>
void backward(const Var<T>& root);

using Triple = std::array<int, 3>;

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> silu(const Var<T>& x);
template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

/// x: [B, C, ...], bias: [B, C]; adds bias[b, c] to every element of channel c.
template <typename T> Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias);
/// x: [B, C, ...], addend: [C, ...] shared across the batch.
template <typename T> Var<T> add_broadcast_batch(const Var<T>& x, const Var<T>& addend);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> slice_channels(const Var<T>& x, int start, int count);

/// x: [B, Ci, D, H, W], weight: [Co, Ci, kd, kh, kw], bias: [Co] or undefined.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Triple stride, Triple pad);
template <typename T> Var<T> upsample_nearest(const Var<T>& x, Triple factor);
template <typename T> Var<T> avg_pool(const Var<T>& x, Triple factor);
/// x: [B, C, ...]; gamma, beta: [C].
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps);
/// x: [B, in], weight: [out, in], bias: [out].
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
/// Batched matrix product over rank-3 operands with optional transposes.
template <typename T> Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b);
template <typename T> Var<T> softmax_last(const Var<T>& x);
template <typename T> Var<T> dropout(const Var<T>& x, double p, Rng& rng);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
/// Mean of squared differences over all elements.
template <typename T> Var<T> mse(const Var<T>& prediction, const Var<T>& target);
/// Mean over elements of KL(N(mean, exp(logvar)) || N(0, 1)).
template <typename T> Var<T> gaussian_kl(const Var<T>& mean, const Var<T>& logvar);

}  // namespace stemdiff::ag

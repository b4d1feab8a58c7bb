#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "advseg/tensor.hpp"

namespace advseg {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode autodiff tape.
///
/// Every operation appends a node holding its forward value and a closure
/// that scatters the node's gradient into its inputs. Nodes only reference
/// earlier nodes, so a single reverse sweep from the loss visits them in
/// topological order. Gradients are only materialized for nodes that
/// (transitively) depend on a leaf created with `requires_grad = true`.
///
/// A tape is single-threaded; use one tape per image.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = false);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of the last backward() target w.r.t. `v`; zeros if unreached.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Cross-correlation of an H x W x Cin input with k x k x Cin x Cout
  /// kernels plus a per-channel bias.
  Var conv2d(Var input, Var kernels, Var bias, std::size_t stride, std::size_t padding);
  Var relu(Var x);
  /// Softmax over the trailing (class) axis of an H x W x |C| tensor.
  Var pixel_softmax(Var logits);
  /// Mean over pixels of -log p(label), with p clamped below at 1e-12.
  /// When `mask` is given only pixels with mask != 0 contribute and the
  /// mean is taken over those pixels; an empty mask yields 0.
  Var cross_entropy(Var probs, const LabelMap& labels, const std::vector<unsigned char>* mask = nullptr);

  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, double factor);
  Var sum(Var x);
  /// H x W x C -> C
  Var global_avg_pool(Var x);
  /// x[n] * W[n x m] + b[m] -> [m]
  Var dense(Var x, Var weights, Var bias);
  Var sigmoid(Var x);
  /// Binary cross entropy on a scalar logit: softplus(z) - target * z.
  Var bce_with_logit(Var logit, double target);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
  /// Throws ShapeError unless `loss` holds exactly one value.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::function<void(Tape&, std::size_t)> backward;
    // Set for pixel_softmax outputs: id of the logits node. Lets
    // cross_entropy route its gradient straight to the logits.
    std::ptrdiff_t softmax_of = -1;
  };

  Var push(Tensor value, bool requires_grad, std::function<void(Tape&, std::size_t)> backward);
  Tensor& grad_buffer(std::size_t id);
  const Tensor& incoming(std::size_t id) const { return nodes_[id].grad; }

  std::vector<Node> nodes_;
};

}  // namespace advseg

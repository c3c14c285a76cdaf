#pragma once

// Reverse-mode tape over Tensor values. Each recorded node keeps its forward value and a
// closure that pushes its output gradient into its inputs; backward() replays the closures in
// reverse creation order, which is a valid topological order by construction.

#include <functional>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "dr1mask/ops.hpp"

namespace dr1mask {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

template <typename Scalar>
class Tape {
 public:
  using TensorT = Tensor<Scalar>;
  using Backward = std::function<void(Tape&, const TensorT&)>;

  Var constant(TensorT value) { return push(std::move(value), false, {}); }
  Var variable(TensorT value) { return push(std::move(value), true, {}); }

  /// Records an op output. The closure only runs when some input requires a gradient.
  Var record(TensorT value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || (v.valid() && nodes_[v.id].requires_grad);
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return v.valid() && nodes_.at(v.id).requires_grad; }

  bool has_grad(Var v) const { return nodes_.at(v.id).grad.has_value(); }

  /// Gradient accumulated into v; zeros when nothing reached it.
  TensorT grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    return n.grad ? *n.grad : TensorT(n.value.shape());
  }

  void accumulate(Var v, const TensorT& g) {
    if (!requires_grad(v)) return;
    auto& n = nodes_[v.id];
    require_same_shape(g.shape(), n.value.shape(), "gradient accumulation");
    if (!n.grad) {
      n.grad = g;
    } else {
      n.grad->array() += g.array();
    }
  }

  void backward(Var root) { backward(root, TensorT::ones(value(root).shape())); }

  void backward(Var root, const TensorT& seed) {
    accumulate(root, seed);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.grad) continue;
      // Copy: the closure may accumulate into a node whose storage moves.
      const TensorT g = *n.grad;
      n.backward(*this, g);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorT value;
    bool requires_grad = false;
    Backward backward;
    std::optional<TensorT> grad;
  };

  Var push(TensorT value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(backward), std::nullopt});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

/// Convolution parameters living on a tape.
struct ConvVars {
  Var weights;
  std::optional<Var> bias;
};

namespace ad {

template <typename Scalar>
ConvKernel<Scalar> kernel_of(const Tape<Scalar>& t, const ConvVars& k) {
  ConvKernel<Scalar> kernel{t.value(k.weights), std::nullopt};
  if (k.bias) kernel.bias = t.value(*k.bias);
  return kernel;
}

template <typename Scalar>
Var conv2d(Tape<Scalar>& t, Var x, const ConvVars& k, Index stride = 1,
           Padding pad = Padding::kSame) {
  auto y = dr1mask::conv2d(t.value(x), kernel_of(t, k), stride, pad);
  const Var bias = k.bias.value_or(Var{});
  return t.record(std::move(y), {x, k.weights, bias},
                  [x, k, stride, pad](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    auto grads = conv2d_backward(tp.value(x), kernel_of(tp, k), g, stride, pad);
                    tp.accumulate(x, grads.x);
                    tp.accumulate(k.weights, grads.weights);
                    if (k.bias) tp.accumulate(*k.bias, *grads.bias);
                  });
}

template <typename Scalar>
Var add(Tape<Scalar>& t, Var a, Var b) {
  return t.record(dr1mask::add(t.value(a), t.value(b)), {a, b},
                  [a, b](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    tp.accumulate(a, g);
                    tp.accumulate(b, g);
                  });
}

template <typename Scalar>
Var scale(Tape<Scalar>& t, Var a, Scalar alpha) {
  return t.record(dr1mask::scale(t.value(a), alpha), {a},
                  [a, alpha](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    tp.accumulate(a, dr1mask::scale(g, alpha));
                  });
}

template <typename Scalar>
Var eltwise_mul(Tape<Scalar>& t, Var a, Var b) {
  return t.record(dr1mask::eltwise_mul(t.value(a), t.value(b)), {a, b},
                  [a, b](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    auto grads = eltwise_mul_backward(tp.value(a), tp.value(b), g);
                    tp.accumulate(a, grads.x);
                    tp.accumulate(b, grads.y);
                  });
}

template <typename Scalar>
Var relu(Tape<Scalar>& t, Var x) {
  return t.record(dr1mask::relu(t.value(x)), {x}, [x](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    tp.accumulate(x, relu_backward(tp.value(x), g));
  });
}

template <typename Scalar>
Var upsample2_nearest(Tape<Scalar>& t, Var x) {
  return t.record(dr1mask::upsample2_nearest(t.value(x)), {x},
                  [x](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    tp.accumulate(x, upsample2_nearest_backward(g));
                  });
}

template <typename Scalar>
Var resize_bilinear(Tape<Scalar>& t, Var x, Index out_h, Index out_w) {
  return t.record(dr1mask::resize_bilinear(t.value(x), out_h, out_w), {x},
                  [x](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    tp.accumulate(x, resize_bilinear_backward(g, tp.value(x).shape()));
                  });
}

template <typename Scalar>
Var crop_to(Tape<Scalar>& t, Var x, Index h, Index w) {
  if (t.value(x).shape().h == h && t.value(x).shape().w == w) return x;
  return t.record(dr1mask::crop_to(t.value(x), h, w), {x},
                  [x](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    tp.accumulate(x, crop_to_backward(g, tp.value(x).shape()));
                  });
}

template <typename Scalar>
Var roi_align(Tape<Scalar>& t, Var f, const Box& box, Index out_h, Index out_w, double stride) {
  return t.record(dr1mask::roi_align(t.value(f), box, out_h, out_w, stride), {f},
                  [f, box, stride](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    tp.accumulate(f, roi_align_backward(g, tp.value(f).shape(), box, stride));
                  });
}

template <typename Scalar>
Var slice_channels(Tape<Scalar>& t, Var x, Index begin, Index end) {
  return t.record(dr1mask::slice_channels(t.value(x), begin, end), {x},
                  [x, begin](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    tp.accumulate(x, slice_channels_backward(g, tp.value(x).shape(), begin));
                  });
}

template <typename Scalar>
Var gather_pixel(Tape<Scalar>& t, Var x, Index n, Index h, Index w) {
  return t.record(dr1mask::gather_pixel(t.value(x), n, h, w), {x},
                  [x, n, h, w](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    Tensor<Scalar> gx(tp.value(x).shape());
                    for (Index c = 0; c < gx.shape().c; ++c) gx(n, c, h, w) = g[c];
                    tp.accumulate(x, gx);
                  });
}

template <typename Scalar>
Var reshape(Tape<Scalar>& t, Var x, Shape shape) {
  return t.record(t.value(x).reshaped(shape), {x}, [x](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    tp.accumulate(x, g.reshaped(tp.value(x).shape()));
  });
}

/// Σ coeff_i · x_i over scalar (1,1,1,1) nodes.
template <typename Scalar>
Var weighted_sum(Tape<Scalar>& t, const std::vector<std::pair<Var, Scalar>>& terms) {
  Tensor<Scalar> total(Shape{1, 1, 1, 1});
  std::vector<Var> inputs;
  for (const auto& [v, c] : terms) {
    total[0] += c * t.value(v)[0];
    inputs.push_back(v);
  }
  return t.record(std::move(total), inputs, [terms](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    for (const auto& [v, c] : terms) tp.accumulate(v, dr1mask::scale(g, c));
  });
}

}  // namespace ad
}  // namespace dr1mask

#pragma once

// Dynamic rank-1 convolution.
//
// A static C x C kernel W is modulated at every position by a rank-1 factor pair: the fast
// path multiplies the input by A, runs the static convolution, then multiplies by B:
//
//   Y = (Conv_W(X ∘ A) + bias) ∘ B
//
// Alongside the fast path live two literal per-position transcriptions used as oracles, a
// naive path that materializes every per-position kernel, and analytic gradients.

#include <cstdint>
#include <string>

#include "dr1mask/autodiff.hpp"
#include "dr1mask/ops.hpp"

namespace dr1mask {

template <typename Scalar>
struct DR1ConvLayer {
  ConvKernel<Scalar> kernel;

  Index channels() const { return kernel.out_channels(); }

  void validate() const {
    kernel.validate();
    if (kernel.out_channels() != kernel.in_channels()) {
      throw InvalidArgument("DR1Conv layer must preserve channels, kernel is " +
                            kernel.weights.shape().str());
    }
  }
};

template <typename Scalar>
struct DynamicFactors {
  Tensor<Scalar> a_map;
  Tensor<Scalar> b_map;
};

namespace detail {
template <typename Scalar>
void check_dr1_inputs(const Tensor<Scalar>& x, const DynamicFactors<Scalar>& f,
                      const DR1ConvLayer<Scalar>& layer) {
  layer.validate();
  require_same_shape(x.shape(), f.a_map.shape(), "dr1conv (x vs A)");
  require_same_shape(x.shape(), f.b_map.shape(), "dr1conv (x vs B)");
  if (x.shape().c != layer.channels()) {
    throw InvalidArgument("dr1conv: input " + x.shape().str() + " incompatible with kernel " +
                          layer.kernel.weights.shape().str());
  }
}
}  // namespace detail

template <typename Scalar>
Tensor<Scalar> dr1conv_forward(const Tensor<Scalar>& x, const DynamicFactors<Scalar>& f,
                               const DR1ConvLayer<Scalar>& layer) {
  detail::check_dr1_inputs(x, f, layer);
  return eltwise_mul(conv2d(eltwise_mul(x, f.a_map), layer.kernel), f.b_map);
}

template <typename Scalar>
struct DR1ConvGrads {
  Tensor<Scalar> x;
  Tensor<Scalar> a;
  Tensor<Scalar> b;
  Tensor<Scalar> weights;
  std::optional<Tensor<Scalar>> bias;
};

template <typename Scalar>
DR1ConvGrads<Scalar> dr1conv_backward(const Tensor<Scalar>& x, const DynamicFactors<Scalar>& f,
                                      const DR1ConvLayer<Scalar>& layer,
                                      const Tensor<Scalar>& grad_out) {
  detail::check_dr1_inputs(x, f, layer);
  require_same_shape(grad_out.shape(), x.shape(), "dr1conv_backward");
  const Tensor<Scalar> modulated = eltwise_mul(x, f.a_map);
  const Tensor<Scalar> response = conv2d(modulated, layer.kernel);
  const Tensor<Scalar> grad_response = eltwise_mul(grad_out, f.b_map);
  auto conv = conv2d_backward(modulated, layer.kernel, grad_response);
  return {eltwise_mul(conv.x, f.a_map), eltwise_mul(conv.x, x), eltwise_mul(grad_out, response),
          std::move(conv.weights), std::move(conv.bias)};
}

/// Per-position 1x1 evaluation that materializes W'_hw = W ∘ (b_hw a_hwᵀ) at every (n, h, w)
/// and multiplies it with x_hw. `w` is C_out x C_in.
template <typename Scalar>
Tensor<Scalar> oracle_rank1_pointwise(const Tensor<Scalar>& x, const DynamicFactors<Scalar>& f,
                                      const Matrix<Scalar>& w) {
  require_same_shape(x.shape(), f.a_map.shape(), "oracle_rank1_pointwise (x vs A)");
  require_same_shape(x.shape(), f.b_map.shape(), "oracle_rank1_pointwise (x vs B)");
  const auto& s = x.shape();
  if (w.rows() != s.c || w.cols() != s.c) {
    throw InvalidArgument("oracle_rank1_pointwise: weight matrix is " + std::to_string(w.rows()) +
                          "x" + std::to_string(w.cols()) + ", input " + s.str());
  }
  Tensor<Scalar> y(s);
  Vector<Scalar> xv(s.c), av(s.c), bv(s.c);
  for (Index n = 0; n < s.n; ++n) {
    for (Index h = 0; h < s.h; ++h) {
      for (Index ww = 0; ww < s.w; ++ww) {
        for (Index c = 0; c < s.c; ++c) {
          xv[c] = x(n, c, h, ww);
          av[c] = f.a_map(n, c, h, ww);
          bv[c] = f.b_map(n, c, h, ww);
        }
        const Matrix<Scalar> modulation = bv * av.transpose();
        const Matrix<Scalar> w_eff = w.cwiseProduct(modulation);
        const Vector<Scalar> yv = w_eff * xv;
        for (Index c = 0; c < s.c; ++c) y(n, c, h, ww) = yv[c];
      }
    }
  }
  return y;
}

enum class KernelForm {
  kOutputModulated,  // B multiplies the summed response at the output position
  kInputModulated,   // B multiplies each tap at the input position it reads
};

/// Literal per-position summation over kernel taps, same padding, stride 1. For offsets
/// (dj, dk) in [-r, r] the tap weight is the stored kernel at (r - dj, r - dk), so
/// Σ W[dj,dk]·X[h-dj, w-dk] coincides with the cross-correlation layout of ConvKernel.
template <typename Scalar>
Tensor<Scalar> oracle_general_kernel(const Tensor<Scalar>& x, const DynamicFactors<Scalar>& f,
                                     const DR1ConvLayer<Scalar>& layer, KernelForm form) {
  detail::check_dr1_inputs(x, f, layer);
  const auto& s = x.shape();
  const auto& wt = layer.kernel.weights;
  const Index rj = layer.kernel.kernel_h() / 2;
  const Index rk = layer.kernel.kernel_w() / 2;
  Tensor<Scalar> y(s);
  for (Index n = 0; n < s.n; ++n) {
    for (Index co = 0; co < s.c; ++co) {
      const Scalar bias = layer.kernel.bias ? (*layer.kernel.bias)[co] : Scalar(0);
      for (Index h = 0; h < s.h; ++h) {
        for (Index w = 0; w < s.w; ++w) {
          Scalar acc = 0;
          for (Index dj = -rj; dj <= rj; ++dj) {
            for (Index dk = -rk; dk <= rk; ++dk) {
              const Index ih = h - dj;
              const Index iw = w - dk;
              if (ih < 0 || ih >= s.h || iw < 0 || iw >= s.w) continue;
              Scalar tap = 0;
              for (Index ci = 0; ci < s.c; ++ci) {
                tap += wt(co, ci, rj - dj, rk - dk) * x(n, ci, ih, iw) * f.a_map(n, ci, ih, iw);
              }
              acc += form == KernelForm::kInputModulated ? tap * f.b_map(n, co, ih, iw) : tap;
            }
          }
          if (form == KernelForm::kInputModulated) {
            y(n, co, h, w) = acc + bias * f.b_map(n, co, h, w);
          } else {
            y(n, co, h, w) = (acc + bias) * f.b_map(n, co, h, w);
          }
        }
      }
    }
  }
  return y;
}

/// Naive dynamic convolution: for every output position and tap, build the modulated C x C
/// kernel W[j,k] ∘ (b_out a_inᵀ) explicitly, then apply it as a matrix-vector product.
template <typename Scalar>
Tensor<Scalar> dr1conv_materialized(const Tensor<Scalar>& x, const DynamicFactors<Scalar>& f,
                                    const DR1ConvLayer<Scalar>& layer) {
  detail::check_dr1_inputs(x, f, layer);
  const auto& s = x.shape();
  const Index kh = layer.kernel.kernel_h();
  const Index kw = layer.kernel.kernel_w();
  const Index rj = kh / 2;
  const Index rk = kw / 2;
  const Index c = s.c;
  const auto& wt = layer.kernel.weights;
  Tensor<Scalar> y(s);
  std::vector<Scalar> w_eff(static_cast<std::size_t>(c * c));
  std::vector<Scalar> acc(static_cast<std::size_t>(c));
  for (Index n = 0; n < s.n; ++n) {
    for (Index h = 0; h < s.h; ++h) {
      for (Index w = 0; w < s.w; ++w) {
        std::fill(acc.begin(), acc.end(), Scalar(0));
        for (Index j = 0; j < kh; ++j) {
          for (Index k = 0; k < kw; ++k) {
            const Index ih = h + j - rj;
            const Index iw = w + k - rk;
            if (ih < 0 || ih >= s.h || iw < 0 || iw >= s.w) continue;
            for (Index co = 0; co < c; ++co) {
              const Scalar b = f.b_map(n, co, h, w);
              for (Index ci = 0; ci < c; ++ci) {
                w_eff[co * c + ci] = wt(co, ci, j, k) * (b * f.a_map(n, ci, ih, iw));
              }
            }
            for (Index co = 0; co < c; ++co) {
              Scalar sum = 0;
              for (Index ci = 0; ci < c; ++ci) sum += w_eff[co * c + ci] * x(n, ci, ih, iw);
              acc[co] += sum;
            }
          }
        }
        for (Index co = 0; co < c; ++co) {
          const Scalar bias = layer.kernel.bias ? (*layer.kernel.bias)[co] : Scalar(0);
          y(n, co, h, w) = acc[co] + bias * f.b_map(n, co, h, w);
        }
      }
    }
  }
  return y;
}

struct FlopCount {
  std::uint64_t fast = 0;
  std::uint64_t naive = 0;
};

/// Analytic FLOP model (one multiply-add = 2 FLOPs):
///   fast  = 2·C²·J·K·H·W  (static convolution)  +  2 · 2·C·H·W  (pre- and post-multiply)
///   naive = 2·C²·(J·K + 2)·H·W  (per-position kernel materialization plus matvec)
inline FlopCount flops_dr1conv(std::uint64_t c, std::uint64_t h, std::uint64_t w,
                               std::uint64_t j, std::uint64_t k) {
  if (c == 0 || h == 0 || w == 0 || j == 0 || k == 0) {
    throw InvalidArgument("flops_dr1conv: extents must be positive");
  }
  FlopCount f;
  f.fast = 2 * c * c * j * k * h * w + 2 * (2 * c * h * w);
  f.naive = 2 * c * c * (j * k + 2) * h * w;
  return f;
}

namespace ad {

/// DR1Conv on the tape; A and B are dynamic inputs with their own gradients.
template <typename Scalar>
Var dr1conv(Tape<Scalar>& t, Var x, Var a, Var b, const ConvVars& k) {
  auto layer_of = [](const Tape<Scalar>& tp, const ConvVars& kv) {
    return DR1ConvLayer<Scalar>{kernel_of(tp, kv)};
  };
  const DynamicFactors<Scalar> f{t.value(a), t.value(b)};
  auto y = dr1conv_forward(t.value(x), f, layer_of(t, k));
  const Var bias = k.bias.value_or(Var{});
  return t.record(std::move(y), {x, a, b, k.weights, bias},
                  [x, a, b, k, layer_of](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    const DynamicFactors<Scalar> fac{tp.value(a), tp.value(b)};
                    auto grads = dr1conv_backward(tp.value(x), fac, layer_of(tp, k), g);
                    tp.accumulate(x, grads.x);
                    tp.accumulate(a, grads.a);
                    tp.accumulate(b, grads.b);
                    tp.accumulate(k.weights, grads.weights);
                    if (k.bias) tp.accumulate(*k.bias, *grads.bias);
                  });
}

}  // namespace ad
}  // namespace dr1mask

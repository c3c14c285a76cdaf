#pragma once

// Numeric primitives over Tensor: convolution, element-wise arithmetic,
// resampling, cropping, reductions and activations. Every differentiable
// primitive has a matching *_backward returning input gradients.

#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "dr1mask/tensor.hpp"

namespace dr1mask {

enum class Padding { kSame, kValid };

/// Static convolution parameters; weights are (C_out, C_in, J, K) in cross-correlation order.
template <typename Scalar>
struct ConvKernel {
  Tensor<Scalar> weights;
  std::optional<Tensor<Scalar>> bias;  // (1, C_out, 1, 1)

  Index out_channels() const { return weights.shape().n; }
  Index in_channels() const { return weights.shape().c; }
  Index kernel_h() const { return weights.shape().h; }
  Index kernel_w() const { return weights.shape().w; }

  void validate() const {
    const auto& s = weights.shape();
    if (s.h % 2 == 0 || s.w % 2 == 0) {
      throw InvalidArgument("kernel extents must be odd, got " + s.str());
    }
    if (bias && !(bias->shape() == Shape{1, s.n, 1, 1})) {
      throw InvalidArgument("bias shape " + bias->shape().str() + " does not match C_out " +
                            std::to_string(s.n));
    }
  }
};

struct ConvGeometry {
  Index out_h = 0;
  Index out_w = 0;
  Index pad_top = 0;
  Index pad_left = 0;
};

/// Output extents and leading padding. Same padding puts any odd leftover row/column at the
/// bottom/right.
inline ConvGeometry conv_geometry(Index h, Index w, Index kh, Index kw, Index stride,
                                  Padding pad) {
  if (stride < 1) throw InvalidArgument("conv stride must be positive");
  ConvGeometry g;
  if (pad == Padding::kSame) {
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    const Index total_h = std::max<Index>((g.out_h - 1) * stride + kh - h, 0);
    const Index total_w = std::max<Index>((g.out_w - 1) * stride + kw - w, 0);
    g.pad_top = total_h / 2;
    g.pad_left = total_w / 2;
  } else {
    if (h < kh || w < kw) throw InvalidArgument("valid convolution input smaller than kernel");
    g.out_h = (h - kh) / stride + 1;
    g.out_w = (w - kw) / stride + 1;
  }
  return g;
}

namespace detail {

// Lowers sample n of x into a (C_in*J*K) x (out_h*out_w) row-major column matrix.
template <typename Scalar>
RowMatrix<Scalar> im2col(const Tensor<Scalar>& x, Index n, Index kh, Index kw, Index stride,
                         const ConvGeometry& g) {
  const auto& s = x.shape();
  RowMatrix<Scalar> cols(s.c * kh * kw, g.out_h * g.out_w);
  for (Index c = 0; c < s.c; ++c) {
    for (Index j = 0; j < kh; ++j) {
      for (Index k = 0; k < kw; ++k) {
        Scalar* row = cols.row((c * kh + j) * kw + k).data();
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * stride + j - g.pad_top;
          Scalar* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= s.h) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = x.raw() + x.offset(n, c, ih, 0);
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * stride + k - g.pad_left;
            dst[ow] = (iw >= 0 && iw < s.w) ? src[iw] : Scalar(0);
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im_accumulate(const RowMatrix<Scalar>& cols, Tensor<Scalar>& gx, Index n, Index kh,
                       Index kw, Index stride, const ConvGeometry& g) {
  const auto& s = gx.shape();
  for (Index c = 0; c < s.c; ++c) {
    for (Index j = 0; j < kh; ++j) {
      for (Index k = 0; k < kw; ++k) {
        const Scalar* row = cols.row((c * kh + j) * kw + k).data();
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * stride + j - g.pad_top;
          if (ih < 0 || ih >= s.h) continue;
          Scalar* dst = gx.raw() + gx.offset(n, c, ih, 0);
          const Scalar* src = row + oh * g.out_w;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * stride + k - g.pad_left;
            if (iw >= 0 && iw < s.w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <typename Scalar>
Eigen::Map<const RowMatrix<Scalar>> kernel_matrix(const Tensor<Scalar>& w) {
  const auto& s = w.shape();
  return {w.raw(), s.n, s.c * s.h * s.w};
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const ConvKernel<Scalar>& k, Index stride = 1,
                      Padding pad = Padding::kSame) {
  k.validate();
  if (x.shape().c != k.in_channels()) {
    throw InvalidArgument("conv2d: input " + x.shape().str() + " incompatible with kernel " +
                          k.weights.shape().str());
  }
  const auto& s = x.shape();
  const ConvGeometry g = conv_geometry(s.h, s.w, k.kernel_h(), k.kernel_w(), stride, pad);
  Tensor<Scalar> y(Shape{s.n, k.out_channels(), g.out_h, g.out_w});
  const auto wm = detail::kernel_matrix(k.weights);
  for (Index n = 0; n < s.n; ++n) {
    auto out = y.sample(n);
    if (k.kernel_h() == 1 && k.kernel_w() == 1 && stride == 1) {
      out.noalias() = wm * x.sample(n);
    } else {
      const RowMatrix<Scalar> cols = detail::im2col(x, n, k.kernel_h(), k.kernel_w(), stride, g);
      out.noalias() = wm * cols;
    }
    if (k.bias) {
      const Eigen::Map<const Vector<Scalar>> b(k.bias->raw(), k.out_channels());
      out.colwise() += b;
    }
  }
  return y;
}

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> x;
  Tensor<Scalar> weights;
  std::optional<Tensor<Scalar>> bias;
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& x, const ConvKernel<Scalar>& k,
                                  const Tensor<Scalar>& grad_out, Index stride = 1,
                                  Padding pad = Padding::kSame) {
  const auto& s = x.shape();
  const ConvGeometry g = conv_geometry(s.h, s.w, k.kernel_h(), k.kernel_w(), stride, pad);
  require_same_shape(grad_out.shape(), Shape{s.n, k.out_channels(), g.out_h, g.out_w},
                     "conv2d_backward");
  ConvGrads<Scalar> grads{Tensor<Scalar>(s), Tensor<Scalar>(k.weights.shape()), std::nullopt};
  const auto wm = detail::kernel_matrix(k.weights);
  Eigen::Map<RowMatrix<Scalar>> gw(grads.weights.raw(), wm.rows(), wm.cols());
  const bool pointwise = k.kernel_h() == 1 && k.kernel_w() == 1 && stride == 1;
  for (Index n = 0; n < s.n; ++n) {
    const auto gy = grad_out.sample(n);
    if (pointwise) {
      gw.noalias() += gy * x.sample(n).transpose();
      grads.x.sample(n).noalias() = wm.transpose() * gy;
    } else {
      const RowMatrix<Scalar> cols = detail::im2col(x, n, k.kernel_h(), k.kernel_w(), stride, g);
      gw.noalias() += gy * cols.transpose();
      const RowMatrix<Scalar> gcols = wm.transpose() * gy;
      detail::col2im_accumulate(gcols, grads.x, n, k.kernel_h(), k.kernel_w(), stride, g);
    }
  }
  if (k.bias) {
    Tensor<Scalar> gb(Shape{1, k.out_channels(), 1, 1});
    for (Index n = 0; n < s.n; ++n) {
      Eigen::Map<Vector<Scalar>>(gb.raw(), k.out_channels()) += grad_out.sample(n).rowwise().sum();
    }
    grads.bias = std::move(gb);
  }
  return grads;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& x, const Tensor<Scalar>& y) {
  require_same_shape(x.shape(), y.shape(), "add");
  Tensor<Scalar> z(x.shape());
  z.array() = x.array() + y.array();
  return z;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar alpha) {
  Tensor<Scalar> z(x.shape());
  z.array() = x.array() * alpha;
  return z;
}

namespace detail {
inline bool broadcasts_over_batch(const Shape& x, const Shape& y) {
  return y.n == 1 && x.c == y.c && x.h == y.h && x.w == y.w;
}
}  // namespace detail

/// Element-wise product; y may have N = 1 and is then broadcast over the batch of x.
template <typename Scalar>
Tensor<Scalar> eltwise_mul(const Tensor<Scalar>& x, const Tensor<Scalar>& y) {
  if (x.shape() == y.shape()) {
    Tensor<Scalar> z(x.shape());
    z.array() = x.array() * y.array();
    return z;
  }
  if (!detail::broadcasts_over_batch(x.shape(), y.shape())) {
    throw InvalidArgument("eltwise_mul: incompatible shapes " + x.shape().str() + " and " +
                          y.shape().str());
  }
  Tensor<Scalar> z(x.shape());
  const Index per = y.size();
  for (Index n = 0; n < x.shape().n; ++n) {
    for (Index i = 0; i < per; ++i) z[n * per + i] = x[n * per + i] * y[i];
  }
  return z;
}

template <typename Scalar>
struct PairGrads {
  Tensor<Scalar> x;
  Tensor<Scalar> y;
};

template <typename Scalar>
PairGrads<Scalar> eltwise_mul_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& y,
                                       const Tensor<Scalar>& grad_out) {
  require_same_shape(grad_out.shape(), x.shape(), "eltwise_mul_backward");
  if (x.shape() == y.shape()) {
    return {eltwise_mul(grad_out, y), eltwise_mul(grad_out, x)};
  }
  PairGrads<Scalar> g{eltwise_mul(grad_out, y), Tensor<Scalar>(y.shape())};
  const Index per = y.size();
  for (Index n = 0; n < x.shape().n; ++n) {
    for (Index i = 0; i < per; ++i) g.y[i] += grad_out[n * per + i] * x[n * per + i];
  }
  return g;
}

template <typename Scalar>
Tensor<Scalar> upsample2_nearest(const Tensor<Scalar>& x) {
  const auto& s = x.shape();
  if (s.numel() == 0) throw InvalidArgument("upsample2_nearest: empty tensor " + s.str());
  Tensor<Scalar> y(Shape{s.n, s.c, 2 * s.h, 2 * s.w});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index h = 0; h < 2 * s.h; ++h)
        for (Index w = 0; w < 2 * s.w; ++w) y(n, c, h, w) = x(n, c, h / 2, w / 2);
  return y;
}

template <typename Scalar>
Tensor<Scalar> upsample2_nearest_backward(const Tensor<Scalar>& grad_out) {
  const auto& s = grad_out.shape();
  Tensor<Scalar> g(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index h = 0; h < s.h; ++h)
        for (Index w = 0; w < s.w; ++w) g(n, c, h / 2, w / 2) += grad_out(n, c, h, w);
  return g;
}

namespace detail {
struct LinearTap {
  Index lo = 0;
  Index hi = 0;
  double frac = 0.0;  // weight of hi
};

// Half-pixel source coordinate for output index i, clamped to the input grid.
inline LinearTap resize_tap(Index i, Index in, Index out) {
  double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  if (src < 0) src = 0;
  LinearTap t;
  t.lo = std::min<Index>(static_cast<Index>(std::floor(src)), in - 1);
  t.hi = std::min<Index>(t.lo + 1, in - 1);
  t.frac = t.lo == t.hi ? 0.0 : src - static_cast<double>(t.lo);
  return t;
}
}  // namespace detail

/// Bilinear resize with half-pixel centers and edge clamping (align_corners = false).
template <typename Scalar>
Tensor<Scalar> resize_bilinear(const Tensor<Scalar>& x, Index out_h, Index out_w) {
  const auto& s = x.shape();
  if (s.h < 1 || s.w < 1 || out_h < 1 || out_w < 1) {
    throw InvalidArgument("resize_bilinear: empty extents");
  }
  Tensor<Scalar> y(Shape{s.n, s.c, out_h, out_w});
  for (Index oh = 0; oh < out_h; ++oh) {
    const auto ty = detail::resize_tap(oh, s.h, out_h);
    for (Index ow = 0; ow < out_w; ++ow) {
      const auto tx = detail::resize_tap(ow, s.w, out_w);
      const Scalar w00 = Scalar((1 - ty.frac) * (1 - tx.frac));
      const Scalar w01 = Scalar((1 - ty.frac) * tx.frac);
      const Scalar w10 = Scalar(ty.frac * (1 - tx.frac));
      const Scalar w11 = Scalar(ty.frac * tx.frac);
      for (Index n = 0; n < s.n; ++n)
        for (Index c = 0; c < s.c; ++c)
          y(n, c, oh, ow) = w00 * x(n, c, ty.lo, tx.lo) + w01 * x(n, c, ty.lo, tx.hi) +
                            w10 * x(n, c, ty.hi, tx.lo) + w11 * x(n, c, ty.hi, tx.hi);
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> resize_bilinear_backward(const Tensor<Scalar>& grad_out, Shape in_shape) {
  const auto& s = grad_out.shape();
  Tensor<Scalar> g(in_shape);
  for (Index oh = 0; oh < s.h; ++oh) {
    const auto ty = detail::resize_tap(oh, in_shape.h, s.h);
    for (Index ow = 0; ow < s.w; ++ow) {
      const auto tx = detail::resize_tap(ow, in_shape.w, s.w);
      const Scalar w00 = Scalar((1 - ty.frac) * (1 - tx.frac));
      const Scalar w01 = Scalar((1 - ty.frac) * tx.frac);
      const Scalar w10 = Scalar(ty.frac * (1 - tx.frac));
      const Scalar w11 = Scalar(ty.frac * tx.frac);
      for (Index n = 0; n < s.n; ++n)
        for (Index c = 0; c < s.c; ++c) {
          const Scalar go = grad_out(n, c, oh, ow);
          g(n, c, ty.lo, tx.lo) += w00 * go;
          g(n, c, ty.lo, tx.hi) += w01 * go;
          g(n, c, ty.hi, tx.lo) += w10 * go;
          g(n, c, ty.hi, tx.hi) += w11 * go;
        }
    }
  }
  return g;
}

/// Top-left anchored crop: keeps x[:, :, 0:h, 0:w].
template <typename Scalar>
Tensor<Scalar> crop_to(const Tensor<Scalar>& x, Index h, Index w) {
  const auto& s = x.shape();
  if (h > s.h || w > s.w || h < 0 || w < 0) {
    throw InvalidArgument("crop_to: target (" + std::to_string(h) + "," + std::to_string(w) +
                          ") exceeds " + s.str());
  }
  if (h == s.h && w == s.w) return x;
  Tensor<Scalar> y(Shape{s.n, s.c, h, w});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index i = 0; i < h; ++i)
        std::copy_n(x.raw() + x.offset(n, c, i, 0), w, y.raw() + y.offset(n, c, i, 0));
  return y;
}

/// Zero-pads at the bottom/right up to (h, w); the adjoint of crop_to.
template <typename Scalar>
Tensor<Scalar> pad_bottom_right(const Tensor<Scalar>& x, Index h, Index w) {
  const auto& s = x.shape();
  if (h < s.h || w < s.w) {
    throw InvalidArgument("pad_bottom_right: target smaller than " + s.str());
  }
  if (h == s.h && w == s.w) return x;
  Tensor<Scalar> y(Shape{s.n, s.c, h, w});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index i = 0; i < s.h; ++i)
        std::copy_n(x.raw() + x.offset(n, c, i, 0), s.w, y.raw() + y.offset(n, c, i, 0));
  return y;
}

template <typename Scalar>
Tensor<Scalar> crop_to_backward(const Tensor<Scalar>& grad_out, Shape in_shape) {
  return pad_bottom_right(grad_out, in_shape.h, in_shape.w);
}

/// Axis-aligned box in input-image pixel coordinates; (x1, y1) is exclusive.
struct Box {
  double x0 = 0;
  double y0 = 0;
  double x1 = 0;
  double y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double max_side() const { return std::max(width(), height()); }
  double center_x() const { return 0.5 * (x0 + x1); }
  double center_y() const { return 0.5 * (y0 + y1); }
  friend bool operator==(const Box&, const Box&) = default;
};

namespace detail {
struct BilinearSample {
  Index y_lo = 0, y_hi = 0, x_lo = 0, x_hi = 0;
  double w_ll = 0, w_lh = 0, w_hl = 0, w_hh = 0;
  bool inside = false;
};

// Samples further than one pixel outside the map read as zero; closer ones clamp to the edge.
inline BilinearSample bilinear_sample(double y, double x, Index h, Index w) {
  BilinearSample s;
  if (y < -1.0 || y > static_cast<double>(h) || x < -1.0 || x > static_cast<double>(w)) return s;
  s.inside = true;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  s.y_lo = static_cast<Index>(y);
  s.x_lo = static_cast<Index>(x);
  if (s.y_lo >= h - 1) {
    s.y_lo = s.y_hi = h - 1;
    y = static_cast<double>(s.y_lo);
  } else {
    s.y_hi = s.y_lo + 1;
  }
  if (s.x_lo >= w - 1) {
    s.x_lo = s.x_hi = w - 1;
    x = static_cast<double>(s.x_lo);
  } else {
    s.x_hi = s.x_lo + 1;
  }
  const double ly = y - static_cast<double>(s.y_lo);
  const double lx = x - static_cast<double>(s.x_lo);
  s.w_ll = (1 - ly) * (1 - lx);
  s.w_lh = (1 - ly) * lx;
  s.w_hl = ly * (1 - lx);
  s.w_hh = ly * lx;
  return s;
}

inline void check_roi(const Box& box, Index out_h, Index out_w, double stride) {
  if (!(box.width() > 0) || !(box.height() > 0)) {
    throw InvalidArgument("roi_align: degenerate box (" + std::to_string(box.x0) + "," +
                          std::to_string(box.y0) + "," + std::to_string(box.x1) + "," +
                          std::to_string(box.y1) + ")");
  }
  if (out_h < 1 || out_w < 1) throw InvalidArgument("roi_align: empty output extent");
  if (!(stride > 0)) throw InvalidArgument("roi_align: stride must be positive");
}

template <typename Fn>
void for_each_roi_sample(const Box& box, Index out_h, Index out_w, double stride, Index h,
                         Index w, Fn&& fn) {
  const double scale = 1.0 / stride;
  const double y_start = box.y0 * scale - 0.5;
  const double x_start = box.x0 * scale - 0.5;
  const double bin_h = box.height() * scale / static_cast<double>(out_h);
  const double bin_w = box.width() * scale / static_cast<double>(out_w);
  for (Index i = 0; i < out_h; ++i) {
    const double y = y_start + (static_cast<double>(i) + 0.5) * bin_h;
    for (Index j = 0; j < out_w; ++j) {
      const double x = x_start + (static_cast<double>(j) + 0.5) * bin_w;
      fn(i, j, bilinear_sample(y, x, h, w));
    }
  }
}
}  // namespace detail

/// Crops box (image pixels) from single-sample map f whose stride to the image is `stride`,
/// one bilinear sample at each output bin center.
template <typename Scalar>
Tensor<Scalar> roi_align(const Tensor<Scalar>& f, const Box& box, Index out_h, Index out_w,
                         double stride = 1.0) {
  detail::check_roi(box, out_h, out_w, stride);
  const auto& s = f.shape();
  if (s.n != 1) throw InvalidArgument("roi_align: expected a single-sample map, got " + s.str());
  Tensor<Scalar> y(Shape{1, s.c, out_h, out_w});
  detail::for_each_roi_sample(box, out_h, out_w, stride, s.h, s.w,
                              [&](Index i, Index j, const detail::BilinearSample& p) {
                                if (!p.inside) return;
                                for (Index c = 0; c < s.c; ++c) {
                                  y(0, c, i, j) = Scalar(p.w_ll) * f(0, c, p.y_lo, p.x_lo) +
                                                  Scalar(p.w_lh) * f(0, c, p.y_lo, p.x_hi) +
                                                  Scalar(p.w_hl) * f(0, c, p.y_hi, p.x_lo) +
                                                  Scalar(p.w_hh) * f(0, c, p.y_hi, p.x_hi);
                                }
                              });
  return y;
}

template <typename Scalar>
Tensor<Scalar> roi_align_backward(const Tensor<Scalar>& grad_out, Shape f_shape, const Box& box,
                                  double stride = 1.0) {
  const auto& s = grad_out.shape();
  detail::check_roi(box, s.h, s.w, stride);
  Tensor<Scalar> g(f_shape);
  detail::for_each_roi_sample(box, s.h, s.w, stride, f_shape.h, f_shape.w,
                              [&](Index i, Index j, const detail::BilinearSample& p) {
                                if (!p.inside) return;
                                for (Index c = 0; c < s.c; ++c) {
                                  const Scalar go = grad_out(0, c, i, j);
                                  g(0, c, p.y_lo, p.x_lo) += Scalar(p.w_ll) * go;
                                  g(0, c, p.y_lo, p.x_hi) += Scalar(p.w_lh) * go;
                                  g(0, c, p.y_hi, p.x_lo) += Scalar(p.w_hl) * go;
                                  g(0, c, p.y_hi, p.x_hi) += Scalar(p.w_hh) * go;
                                }
                              });
  return g;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  y.array() = x.array().max(Scalar(0));
  return y;
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> g(x.shape());
  g.array() = (x.array() > Scalar(0)).select(grad_out.array(), Scalar(0));
  return g;
}

template <typename Scalar>
Scalar sigmoid(Scalar v) {
  return v >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-v)) : std::exp(v) / (Scalar(1) + std::exp(v));
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

template <typename Scalar>
Tensor<Scalar> sigmoid_backward(const Tensor<Scalar>& y, const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> g(y.shape());
  g.array() = grad_out.array() * y.array() * (Scalar(1) - y.array());
  return g;
}

/// Softmax over the channel axis at every (n, h, w).
template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& x) {
  const auto& s = x.shape();
  Tensor<Scalar> y(s);
  for (Index n = 0; n < s.n; ++n) {
    const auto in = x.sample(n);
    auto out = y.sample(n);
    for (Index p = 0; p < s.plane(); ++p) {
      const Scalar m = in.col(p).maxCoeff();
      out.col(p) = (in.col(p).array() - m).exp();
      out.col(p) /= out.col(p).sum();
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> softmax_channels_backward(const Tensor<Scalar>& y, const Tensor<Scalar>& grad_out) {
  const auto& s = y.shape();
  Tensor<Scalar> g(s);
  for (Index n = 0; n < s.n; ++n) {
    const auto sy = y.sample(n);
    const auto go = grad_out.sample(n);
    auto out = g.sample(n);
    for (Index p = 0; p < s.plane(); ++p) {
      const Scalar dot = sy.col(p).dot(go.col(p));
      out.col(p) = sy.col(p).array() * (go.col(p).array() - dot);
    }
  }
  return g;
}

template <typename Scalar>
Tensor<Scalar> sum_channels(const Tensor<Scalar>& x) {
  const auto& s = x.shape();
  Tensor<Scalar> y(Shape{s.n, 1, s.h, s.w});
  for (Index n = 0; n < s.n; ++n) y.sample(n) = x.sample(n).colwise().sum();
  return y;
}

template <typename Scalar>
Tensor<Scalar> sum_channels_backward(const Tensor<Scalar>& grad_out, Index channels) {
  const auto& s = grad_out.shape();
  Tensor<Scalar> g(Shape{s.n, channels, s.h, s.w});
  for (Index n = 0; n < s.n; ++n) g.sample(n).rowwise() = grad_out.sample(n).row(0);
  return g;
}

/// Channels [begin, end) of x.
template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& x, Index begin, Index end) {
  const auto& s = x.shape();
  if (begin < 0 || end > s.c || begin > end) {
    throw InvalidArgument("slice_channels: [" + std::to_string(begin) + "," +
                          std::to_string(end) + ") outside " + s.str());
  }
  Tensor<Scalar> y(Shape{s.n, end - begin, s.h, s.w});
  for (Index n = 0; n < s.n; ++n) y.sample(n) = x.sample(n).middleRows(begin, end - begin);
  return y;
}

template <typename Scalar>
Tensor<Scalar> slice_channels_backward(const Tensor<Scalar>& grad_out, Shape in_shape,
                                       Index begin) {
  Tensor<Scalar> g(in_shape);
  for (Index n = 0; n < in_shape.n; ++n)
    g.sample(n).middleRows(begin, grad_out.shape().c) = grad_out.sample(n);
  return g;
}

/// The C-vector at (n, :, h, w) as a (1, C, 1, 1) tensor.
template <typename Scalar>
Tensor<Scalar> gather_pixel(const Tensor<Scalar>& x, Index n, Index h, Index w) {
  const auto& s = x.shape();
  if (n < 0 || n >= s.n || h < 0 || h >= s.h || w < 0 || w >= s.w) {
    throw InvalidArgument("gather_pixel: position outside " + s.str());
  }
  Tensor<Scalar> y(Shape{1, s.c, 1, 1});
  for (Index c = 0; c < s.c; ++c) y[c] = x(n, c, h, w);
  return y;
}

template <typename Scalar>
Matrix<Scalar> matmul(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw InvalidArgument("matmul: inner dimensions differ (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " by " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
  }
  return a * b;
}

template <typename Scalar>
struct MatmulGrads {
  Matrix<Scalar> a;
  Matrix<Scalar> b;
};

template <typename Scalar>
MatmulGrads<Scalar> matmul_backward(const Matrix<Scalar>& a, const Matrix<Scalar>& b,
                                    const Matrix<Scalar>& grad_out) {
  return {grad_out * b.transpose(), a.transpose() * grad_out};
}

}  // namespace dr1mask

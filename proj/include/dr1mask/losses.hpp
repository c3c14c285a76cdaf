#pragma once

// Mean binary cross-entropy with logits and mean per-pixel softmax cross-entropy, plus their
// tape-recorded forms.

#include <cmath>
#include <cstdint>
#include <vector>

#include "dr1mask/autodiff.hpp"

namespace dr1mask {

/// mean(max(x, 0) - x·y + log(1 + exp(-|x|))); targets must be 0 or 1.
template <typename Scalar>
double mask_loss(const Tensor<Scalar>& logits, const Tensor<Scalar>& target) {
  require_same_shape(logits.shape(), target.shape(), "mask_loss");
  if (logits.size() == 0) throw InvalidArgument("mask_loss: empty input");
  double acc = 0;
  for (Index i = 0; i < logits.size(); ++i) {
    const double x = logits[i], y = target[i];
    if (y != 0.0 && y != 1.0) throw InvalidArgument("mask_loss: target values must be 0 or 1");
    acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  return acc / double(logits.size());
}

template <typename Scalar>
Tensor<Scalar> mask_loss_backward(const Tensor<Scalar>& logits, const Tensor<Scalar>& target, Scalar g) {
  Tensor<Scalar> out(logits.shape());
  const Scalar n = static_cast<Scalar>(logits.size());
  for (Index i = 0; i < logits.size(); ++i) out[i] = g * (sigmoid(logits[i]) - target[i]) / n;
  return out;
}

namespace detail {
inline void check_labels(const Shape& s, const std::vector<std::int32_t>& labels) {
  if (s.n != 1) throw InvalidArgument("softmax cross-entropy expects a single sample, got " + s.str());
  if (Index(labels.size()) != s.plane()) {
    throw InvalidArgument("label map has " + std::to_string(labels.size()) + " entries for " + s.str());
  }
  for (auto l : labels) {
    if (l < 0 || l >= s.c) {
      throw InvalidArgument("label " + std::to_string(l) + " outside [0, " + std::to_string(s.c) + ")");
    }
  }
}
}  // namespace detail

/// Mean over pixels of logsumexp_c(x) - x_label.
template <typename Scalar>
double panoptic_loss(const Tensor<Scalar>& logits, const std::vector<std::int32_t>& labels) {
  const auto& s = logits.shape();
  detail::check_labels(s, labels);
  const Index plane = s.plane();
  double acc = 0;
  for (Index p = 0; p < plane; ++p) {
    double m = logits[p];
    for (Index c = 1; c < s.c; ++c) m = std::max(m, double(logits[c * plane + p]));
    double z = 0;
    for (Index c = 0; c < s.c; ++c) z += std::exp(double(logits[c * plane + p]) - m);
    acc += m + std::log(z) - double(logits[labels[std::size_t(p)] * plane + p]);
  }
  return acc / double(plane);
}

template <typename Scalar>
Tensor<Scalar> panoptic_loss_backward(const Tensor<Scalar>& logits, const std::vector<std::int32_t>& labels,
                                      Scalar g) {
  const auto& s = logits.shape();
  const Index plane = s.plane();
  Tensor<Scalar> out = softmax_channels(logits);
  const Scalar k = g / static_cast<Scalar>(plane);
  for (Index p = 0; p < plane; ++p) out[labels[std::size_t(p)] * plane + p] -= Scalar(1);
  out.array() *= k;
  return out;
}

namespace ad {

template <typename Scalar>
Var bce_with_logits(Tape<Scalar>& t, Var logits, const Tensor<Scalar>& target) {
  Tensor<Scalar> v(Shape{1, 1, 1, 1}, static_cast<Scalar>(mask_loss(t.value(logits), target)));
  return t.record(std::move(v), {logits}, [logits, target](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    tp.accumulate(logits, mask_loss_backward(tp.value(logits), target, g[0]));
  });
}

template <typename Scalar>
Var softmax_cross_entropy(Tape<Scalar>& t, Var logits, std::vector<std::int32_t> labels) {
  Tensor<Scalar> v(Shape{1, 1, 1, 1}, static_cast<Scalar>(panoptic_loss(t.value(logits), labels)));
  return t.record(std::move(v), {logits},
                  [logits, labels = std::move(labels)](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    tp.accumulate(logits, panoptic_loss_backward(tp.value(logits), labels, g[0]));
                  });
}

}  // namespace ad
}  // namespace dr1mask

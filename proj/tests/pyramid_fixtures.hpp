#pragma once

// Random pyramid parameters and a static top-down FPN reference shared by the pyramid tests
// and the acceptance run.

#include <optional>

#include "dr1mask/pyramid.hpp"
#include "oracles.hpp"

namespace fixtures {

using namespace dr1mask;

template <typename S>
ConvKernel<S> rand_kernel(std::mt19937_64& rng, Index co, Index ci, Index k, double scale = 0.3) {
  ConvKernel<S> kern{Tensor<S>::uniform(Shape{co, ci, k, k}, rng, S(-scale), S(scale)), std::nullopt};
  kern.bias = Tensor<S>::uniform(Shape{1, co, 1, 1}, rng, S(-0.1), S(0.1));
  return kern;
}

template <typename S>
BackboneParams<S> rand_backbone(std::mt19937_64& rng, Index cp) {
  BackboneParams<S> p;
  p.stem = {rand_kernel<S>(rng, 4, 3, 3), rand_kernel<S>(rng, 6, 4, 3), rand_kernel<S>(rng, cp, 6, 3)};
  for (int i = 0; i < 4; ++i) p.downs.push_back(rand_kernel<S>(rng, cp, cp, 3));
  return p;
}

template <typename S>
TowerParams<S> rand_tower(std::mt19937_64& rng, Index cp, Index cb, Index emb, Index depth) {
  TowerParams<S> p;
  for (Index i = 0; i < depth; ++i) p.blocks.push_back(rand_kernel<S>(rng, cp, cp, 3));
  p.top = rand_kernel<S>(rng, 2 * cb + emb, cp, 3);
  p.basis_width = cb;
  p.emb_dim = emb;
  return p;
}

template <typename S>
BasisParams<S> rand_basis(std::mt19937_64& rng, Index cp, Index cb) {
  BasisParams<S> p;
  for (int l = kMinLevel; l <= kMaxLevel; ++l) {
    p.lateral[l] = rand_kernel<S>(rng, cb, cp, 3);
    p.dr1[l] = DR1ConvLayer<S>{rand_kernel<S>(rng, cb, cb, 3)};
  }
  return p;
}

// Static FPN top-down path with no factor multiplications at all.
template <typename S>
Tensor<S> static_fpn(const FeaturePyramid<S>& pyr, const BasisParams<S>& p) {
  std::optional<Tensor<S>> above;
  for (int l = kMaxLevel; l >= kMinLevel; --l) {
    const auto& pl = pyr.levels.at(l);
    Tensor<S> merged = conv2d(pl, p.lateral.at(l));
    if (above) merged = add(merged, crop_to(upsample2_nearest(*above), pl.shape().h, pl.shape().w));
    above = conv2d(merged, p.dr1.at(l).kernel);
  }
  return crop_to(upsample2_nearest(*above), pyr.input_h / 4, pyr.input_w / 4);
}

// Loop-level reference for the same static path.
inline Tensor<double> static_fpn_loops(const FeaturePyramid<double>& pyr, const BasisParams<double>& p) {
  auto up_crop = [](const Tensor<double>& x, Index h, Index w) {
    Tensor<double> y(Shape{1, x.shape().c, h, w});
    for (Index c = 0; c < x.shape().c; ++c)
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j) y(0, c, i, j) = x(0, c, i / 2, j / 2);
    return y;
  };
  std::optional<Tensor<double>> above;
  for (int l = kMaxLevel; l >= kMinLevel; --l) {
    const auto& pl = pyr.levels.at(l);
    const auto& lat = p.lateral.at(l);
    Tensor<double> merged = oracle::conv2d_loops(pl, lat.weights, &*lat.bias, 1, true);
    if (above) {
      const auto u = up_crop(*above, pl.shape().h, pl.shape().w);
      for (Index i = 0; i < merged.size(); ++i) merged[i] += u[i];
    }
    const auto& k = p.dr1.at(l).kernel;
    above = oracle::conv2d_loops(merged, k.weights, &*k.bias, 1, true);
  }
  return up_crop(*above, pyr.input_h / 4, pyr.input_w / 4);
}


}  // namespace fixtures

#pragma once

// Feature plumbing: input padding, a strided backbone stub emitting P3..P7, the shared
// tower with its top layer emitting context factors and dense embeddings, and the DR1Basis
// top-down aggregation into the basis map F.
//
// Every downsample uses ceil extents with bottom/right padding, so each upsampled level is at
// least as large as the one below it and a bottom/right crop realigns them.

#include <map>
#include <string>
#include <vector>

#include "dr1mask/autodiff.hpp"
#include "dr1mask/dr1conv.hpp"

namespace dr1mask {

constexpr int kMinLevel = 3;
constexpr int kMaxLevel = 7;

enum class UpsampleMode { kNearest, kBilinear };

inline Index ceil_div(Index a, Index b) { return (a + b - 1) / b; }

/// Extent of level l for a padded input extent under the ceil size rule.
inline Index level_extent(Index padded, int level) {
  Index e = padded;
  for (int i = 0; i < level; ++i) e = ceil_div(e, 2);
  return e;
}

template <typename Scalar>
struct PaddedImage {
  Tensor<Scalar> image;
  Index original_h = 0;
  Index original_w = 0;
};

template <typename Scalar>
PaddedImage<Scalar> pad_input(const Tensor<Scalar>& image, Index divisibility = 4) {
  if (divisibility < 1) throw InvalidArgument("pad_input: divisibility must be >= 1");
  const auto& s = image.shape();
  const Index h = ceil_div(s.h, divisibility) * divisibility;
  const Index w = ceil_div(s.w, divisibility) * divisibility;
  return {pad_bottom_right(image, h, w), s.h, s.w};
}

template <typename Scalar>
struct FeaturePyramid {
  std::map<int, Tensor<Scalar>> levels;
  Index input_h = 0;  // padded input extents the pyramid was computed from
  Index input_w = 0;
};

template <typename Scalar>
struct ContextPyramid {
  std::map<int, DynamicFactors<Scalar>> context;
  std::map<int, Tensor<Scalar>> embeddings;
};

template <typename Scalar>
struct BasisOutput {
  Tensor<Scalar> f;
  int stride = 4;
  Index width() const { return f.shape().c; }
};

template <typename Scalar>
struct BackboneParams {
  std::vector<ConvKernel<Scalar>> stem;   // three stride-2 layers ending at P3
  std::vector<ConvKernel<Scalar>> downs;  // P3 -> P4 -> ... -> P7
};

template <typename Scalar>
struct TowerParams {
  std::vector<ConvKernel<Scalar>> blocks;  // shared across levels
  ConvKernel<Scalar> top;                  // emits [A : B : E]
  Index basis_width = 32;
  Index emb_dim = 32;
};

template <typename Scalar>
struct BasisParams {
  std::map<int, ConvKernel<Scalar>> lateral;  // C_p -> C_b, 3x3
  std::map<int, DR1ConvLayer<Scalar>> dr1;    // C_b -> C_b
  UpsampleMode upsample = UpsampleMode::kNearest;
  int emit_stride = 4;
};

struct BackboneVars {
  std::vector<ConvVars> stem;
  std::vector<ConvVars> downs;
};

struct TowerVars {
  std::vector<ConvVars> blocks;
  ConvVars top;
  Index basis_width = 32;
  Index emb_dim = 32;
};

struct BasisVars {
  std::map<int, ConvVars> lateral;
  std::map<int, ConvVars> dr1;
  UpsampleMode upsample = UpsampleMode::kNearest;
  int emit_stride = 4;
};

struct ContextVars {
  std::map<int, Var> a;
  std::map<int, Var> b;
  std::map<int, Var> e;
};

enum class Knockout { kNone, kAOnly, kBOnly, kBoth };

inline bool keeps_a(Knockout k) { return k == Knockout::kNone || k == Knockout::kAOnly; }
inline bool keeps_b(Knockout k) { return k == Knockout::kNone || k == Knockout::kBOnly; }

template <typename Scalar>
ConvVars put_kernel(Tape<Scalar>& t, const ConvKernel<Scalar>& k, bool trainable) {
  ConvVars v{trainable ? t.variable(k.weights) : t.constant(k.weights), std::nullopt};
  if (k.bias) v.bias = trainable ? t.variable(*k.bias) : t.constant(*k.bias);
  return v;
}

namespace ad {

template <typename Scalar>
std::map<int, Var> backbone(Tape<Scalar>& t, Var image, const BackboneVars& p) {
  const auto& s = t.value(image).shape();
  if (s.h < 1 || s.w < 1) {
    throw InvalidArgument("backbone_stub: image too small " + s.str());
  }
  if (p.stem.size() != 3 || p.downs.size() != kMaxLevel - kMinLevel) {
    throw InvalidArgument("backbone_stub: expected 3 stem and 4 downsampling layers");
  }
  Var x = image;
  for (const auto& k : p.stem) x = relu(t, conv2d(t, x, k, 2));
  std::map<int, Var> levels;
  levels[kMinLevel] = x;
  for (int l = kMinLevel + 1; l <= kMaxLevel; ++l) {
    x = relu(t, conv2d(t, x, p.downs[static_cast<std::size_t>(l - kMinLevel - 1)], 2));
    levels[l] = x;
  }
  return levels;
}

/// Tower then top layer per level; channels [0, C_b) are A, [C_b, 2C_b) are B, the rest E.
template <typename Scalar>
ContextVars tower_top(Tape<Scalar>& t, const std::map<int, Var>& levels, const TowerVars& p) {
  ContextVars out;
  const Index cb = p.basis_width;
  for (const auto& [l, pl] : levels) {
    Var x = pl;
    for (const auto& k : p.blocks) x = relu(t, conv2d(t, x, k));
    Var top = conv2d(t, x, p.top);
    const Index total = t.value(top).shape().c;
    if (total != 2 * cb + p.emb_dim) {
      throw InvalidArgument("tower_top: top layer emits " + std::to_string(total) +
                            " channels, expected " + std::to_string(2 * cb + p.emb_dim));
    }
    out.a[l] = slice_channels(t, top, 0, cb);
    out.b[l] = slice_channels(t, top, cb, 2 * cb);
    out.e[l] = slice_channels(t, top, 2 * cb, total);
  }
  return out;
}

template <typename Scalar>
Var upsample2(Tape<Scalar>& t, Var x, UpsampleMode mode) {
  if (mode == UpsampleMode::kNearest) return upsample2_nearest(t, x);
  const auto& s = t.value(x).shape();
  return resize_bilinear(t, x, 2 * s.h, 2 * s.w);
}

/// Top-down fold: F_8 = 0, F_l = DR1Conv(lateral(P_l) + crop(up(F_{l+1}))), then one extra
/// upsample of F_3 when emitting at stride 4. out_h/out_w are the padded input extents.
template <typename Scalar>
Var dr1basis(Tape<Scalar>& t, const std::map<int, Var>& levels, const ContextVars& ctx,
             const BasisVars& p, Index input_h, Index input_w) {
  std::optional<Var> above;
  for (int l = kMaxLevel; l >= kMinLevel; --l) {
    if (!levels.count(l) || !ctx.a.count(l) || !ctx.b.count(l)) {
      throw InvalidArgument("dr1basis: missing level " + std::to_string(l));
    }
    const Var pl = levels.at(l);
    const auto& ps = t.value(pl).shape();
    Var merged = conv2d(t, pl, p.lateral.at(l));
    if (above) {
      Var up = upsample2(t, *above, p.upsample);
      const auto& us = t.value(up).shape();
      if (us.h < ps.h || us.w < ps.w) {
        throw InvariantViolation("dr1basis: upsampled level " + std::to_string(l + 1) + " " +
                                 us.str() + " smaller than level " + std::to_string(l) + " " +
                                 ps.str());
      }
      merged = add(t, merged, crop_to(t, up, ps.h, ps.w));
    }
    above = dr1conv(t, merged, ctx.a.at(l), ctx.b.at(l), p.dr1.at(l));
  }
  if (p.emit_stride == 8) return *above;
  if (p.emit_stride != 4) throw InvalidArgument("dr1basis: emit_stride must be 4 or 8");
  if (input_h % 4 != 0 || input_w % 4 != 0) {
    throw InvalidArgument("dr1basis: stride-4 output needs input extents divisible by 4");
  }
  Var up = upsample2(t, *above, p.upsample);
  const auto& us = t.value(up).shape();
  if (us.h < input_h / 4 || us.w < input_w / 4) {
    throw InvariantViolation("dr1basis: final upsample " + us.str() + " below stride-4 extents");
  }
  return crop_to(t, up, input_h / 4, input_w / 4);
}

}  // namespace ad

template <typename Scalar>
BackboneVars put_backbone(Tape<Scalar>& t, const BackboneParams<Scalar>& p, bool trainable) {
  BackboneVars v;
  for (const auto& k : p.stem) v.stem.push_back(put_kernel(t, k, trainable));
  for (const auto& k : p.downs) v.downs.push_back(put_kernel(t, k, trainable));
  return v;
}

template <typename Scalar>
TowerVars put_tower(Tape<Scalar>& t, const TowerParams<Scalar>& p, bool trainable) {
  TowerVars v;
  for (const auto& k : p.blocks) v.blocks.push_back(put_kernel(t, k, trainable));
  v.top = put_kernel(t, p.top, trainable);
  v.basis_width = p.basis_width;
  v.emb_dim = p.emb_dim;
  return v;
}

template <typename Scalar>
BasisVars put_basis(Tape<Scalar>& t, const BasisParams<Scalar>& p, bool trainable) {
  BasisVars v;
  for (const auto& [l, k] : p.lateral) v.lateral[l] = put_kernel(t, k, trainable);
  for (const auto& [l, layer] : p.dr1) v.dr1[l] = put_kernel(t, layer.kernel, trainable);
  v.upsample = p.upsample;
  v.emit_stride = p.emit_stride;
  return v;
}

template <typename Scalar>
FeaturePyramid<Scalar> backbone_stub(const Tensor<Scalar>& image, const BackboneParams<Scalar>& p) {
  Tape<Scalar> t;
  const Var img = t.constant(image);
  const auto levels = ad::backbone(t, img, put_backbone(t, p, false));
  FeaturePyramid<Scalar> out;
  for (const auto& [l, v] : levels) out.levels[l] = t.value(v);
  out.input_h = image.shape().h;
  out.input_w = image.shape().w;
  return out;
}

template <typename Scalar>
ContextPyramid<Scalar> tower_top(const FeaturePyramid<Scalar>& pyr, const TowerParams<Scalar>& p) {
  Tape<Scalar> t;
  std::map<int, Var> levels;
  for (const auto& [l, v] : pyr.levels) levels[l] = t.constant(v);
  const auto ctx = ad::tower_top(t, levels, put_tower(t, p, false));
  ContextPyramid<Scalar> out;
  for (const auto& [l, v] : ctx.a) {
    out.context[l] = DynamicFactors<Scalar>{t.value(v), t.value(ctx.b.at(l))};
    out.embeddings[l] = t.value(ctx.e.at(l));
  }
  return out;
}

template <typename Scalar>
BasisOutput<Scalar> dr1basis(const FeaturePyramid<Scalar>& pyr, const ContextPyramid<Scalar>& c,
                             const BasisParams<Scalar>& p) {
  Tape<Scalar> t;
  std::map<int, Var> levels;
  ContextVars ctx;
  for (const auto& [l, v] : pyr.levels) levels[l] = t.constant(v);
  for (const auto& [l, f] : c.context) {
    ctx.a[l] = t.constant(f.a_map);
    ctx.b[l] = t.constant(f.b_map);
  }
  const Var out = ad::dr1basis(t, levels, ctx, put_basis(t, p, false), pyr.input_h, pyr.input_w);
  return {t.value(out), p.emit_stride};
}

/// Replaces the knocked-out factor maps with ones: kBoth removes A and B, kAOnly keeps
/// only A, kBOnly keeps only B, kNone leaves both.
template <typename Scalar>
ContextPyramid<Scalar> knockout(const ContextPyramid<Scalar>& c, Knockout which) {
  ContextPyramid<Scalar> out = c;
  for (auto& [l, f] : out.context) {
    if (!keeps_a(which)) f.a_map = Tensor<Scalar>::ones(f.a_map.shape());
    if (!keeps_b(which)) f.b_map = Tensor<Scalar>::ones(f.b_map.shape());
  }
  return out;
}

}  // namespace dr1mask

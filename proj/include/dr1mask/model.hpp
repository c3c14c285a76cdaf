#pragma once

// The trainable network: backbone stub, shared tower, DR1Basis, instance head, panoptic head
// and an auxiliary semantic classifier, all held as named parameter tensors.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dr1mask/config.hpp"
#include "dr1mask/data.hpp"
#include "dr1mask/heads.hpp"
#include "dr1mask/losses.hpp"
#include "dr1mask/pyramid.hpp"

namespace dr1mask {

template <typename Scalar>
using Params = std::map<std::string, Tensor<Scalar>>;
using VarMap = std::map<std::string, Var>;

inline std::string level_name(const char* prefix, int l) { return std::string(prefix) + std::to_string(l); }

/// Level owning a box: level 3 takes max side below level_base and each coarser level doubles
/// the bound; anything larger goes to the coarsest level.
inline int owning_level(double max_side, double level_base = 64) {
  for (int l = kMinLevel; l <= kMaxLevel; ++l) {
    if (max_side < std::ldexp(level_base, l - kMinLevel)) return l;
  }
  return kMaxLevel;
}

struct LevelCell {
  int level = kMinLevel;
  Index y = 0;
  Index x = 0;
};

/// Box-center cells of every owning level (exactly one with disjoint ranges).
inline std::vector<LevelCell> assign_cells(const Box& box, const std::map<int, std::pair<Index, Index>>& extents,
                                           double level_base = 64) {
  const int l = owning_level(box.max_side(), level_base);
  const auto it = extents.find(l);
  if (it == extents.end()) throw InvalidArgument("assign_cells: level " + std::to_string(l) + " missing");
  const double stride = std::ldexp(1.0, l);
  const auto cell = [](double c, double s, Index n) {
    return std::clamp<Index>(static_cast<Index>(std::floor(c / s)), 0, n - 1);
  };
  return {LevelCell{l, cell(box.center_y(), stride, it->second.first), cell(box.center_x(), stride, it->second.second)}};
}

/// Per-instance embedding lists read from a materialized context pyramid.
template <typename Scalar>
std::vector<std::vector<Tensor<Scalar>>> embedding_assignment(const Scene& scene, const ContextPyramid<Scalar>& ctx,
                                                                double level_base = 64) {
  std::map<int, std::pair<Index, Index>> extents;
  for (const auto& [l, e] : ctx.embeddings) extents[l] = {e.shape().h, e.shape().w};
  std::vector<std::vector<Tensor<Scalar>>> out;
  for (const auto& inst : scene.instances) {
    std::vector<Tensor<Scalar>> es;
    for (const auto& c : assign_cells(inst.box.to_box(), extents, level_base)) {
      es.push_back(gather_pixel(ctx.embeddings.at(c.level), 0, c.y, c.x));
    }
    out.push_back(std::move(es));
  }
  return out;
}

namespace detail {

template <typename Scalar>
void add_conv(Params<Scalar>& p, std::mt19937_64& rng, const std::string& name, Index co, Index ci, Index k,
              double stddev) {
  p[name + "/w"] = Tensor<Scalar>::normal(Shape{co, ci, k, k}, rng, stddev);
  p[name + "/b"] = Tensor<Scalar>(Shape{1, co, 1, 1});
}

inline double he(Index ci, Index k) { return std::sqrt(2.0 / double(ci * k * k)); }
inline double lecun(Index ci, Index k) { return std::sqrt(1.0 / double(ci * k * k)); }

}  // namespace detail

inline Index semantic_classes(const Config& c) { return c.n_stuff_classes + c.n_thing_classes; }

/// Seeded initialization. Convs feeding a ReLU use He scaling, linear ones LeCun scaling.
/// The top layer starts with A = B = 1 (small weights, unit bias) so training begins near a
/// plain FPN.
template <typename Scalar>
Params<Scalar> init_params(const Config& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  Params<Scalar> p;
  const Index sw = c.stem_width, tw = c.tower_width, cb = c.basis_width, emb = c.embedding_width();
  const Index stem_out[3] = {sw, 2 * sw, tw};
  Index ci = 3;
  for (int i = 0; i < 3; ++i) {
    detail::add_conv(p, rng, level_name("backbone/stem", i), stem_out[i], ci, 3, detail::he(ci, 3));
    ci = stem_out[i];
  }
  for (int l = kMinLevel + 1; l <= kMaxLevel; ++l) detail::add_conv(p, rng, level_name("backbone/down", l), tw, tw, 3, detail::he(tw, 3));
  for (Index i = 0; i < c.tower_depth; ++i) detail::add_conv(p, rng, level_name("tower/block", int(i)), tw, tw, 3, detail::he(tw, 3));
  detail::add_conv(p, rng, "tower/top", 2 * cb + emb, tw, 3, detail::lecun(tw, 3));
  {
    auto& w = p["tower/top/w"];
    auto& b = p["tower/top/b"];
    for (Index o = 0; o < 2 * cb; ++o) {
      for (Index k = 0; k < tw * 9; ++k) w[o * tw * 9 + k] *= Scalar(0.1);
      b[o] = Scalar(1);
    }
  }
  for (int l = kMinLevel; l <= kMaxLevel; ++l) {
    detail::add_conv(p, rng, level_name("basis/lateral", l), cb, tw, 3, detail::lecun(tw, 3));
    detail::add_conv(p, rng, level_name("basis/dr1_", l), cb, cb, 3, detail::lecun(cb, 3));
  }
  detail::add_conv(p, rng, "aux", semantic_classes(c), cb, 1, detail::lecun(cb, 1));
  if (c.head_kind == HeadKind::kVector) {
    p["heads/w_stuff"] = Tensor<Scalar>::normal(Shape{1, 1, cb, c.n_stuff_classes}, rng, detail::lecun(cb, 1));
    if (c.stuff_bias) p["heads/stuff_bias"] = Tensor<Scalar>(Shape{1, c.n_stuff_classes, 1, 1});
  }
  if (c.head_kind == HeadKind::kFactored) {
    const Shape uv{1, kProjChannels, kAttnRank, kAttnSize};
    p["heads/u"] = Tensor<Scalar>::uniform(uv, rng, Scalar(-0.5), Scalar(0.5));
    p["heads/v"] = Tensor<Scalar>::uniform(uv, rng, Scalar(-0.5), Scalar(0.5));
  }
  return p;
}

template <typename Scalar>
VarMap put_params(Tape<Scalar>& t, const Params<Scalar>& p, bool trainable) {
  VarMap v;
  for (const auto& [name, value] : p) v[name] = trainable ? t.variable(value) : t.constant(value);
  return v;
}

inline ConvVars conv_vars(const VarMap& v, const std::string& name) {
  const auto w = v.find(name + "/w");
  if (w == v.end()) throw InvalidArgument("missing parameter " + name + "/w");
  ConvVars k{w->second, std::nullopt};
  if (const auto b = v.find(name + "/b"); b != v.end()) k.bias = b->second;
  return k;
}

struct ForwardVars {
  Var f;               // basis map
  int stride = 4;
  std::map<int, Var> embeddings;
  std::map<int, std::pair<Index, Index>> level_extents;
  Var aux;             // semantic logits at basis resolution
  double level_base = 64;
  Index padded_h = 0;
  Index padded_w = 0;
  Index original_h = 0;
  Index original_w = 0;
};

/// Image (1, 3, H, W) in [0, 1] through backbone, tower and basis. Inputs are recentred to
/// [-1, 1] before the stem.
template <typename Scalar>
ForwardVars forward(Tape<Scalar>& t, const Config& c, const VarMap& v, const Tensor<Scalar>& image) {
  const auto padded = pad_input(image, c.divisibility);
  Tensor<Scalar> x = padded.image;
  for (auto& px : x.data()) px = Scalar(2) * px - Scalar(1);

  BackboneVars bb;
  for (int i = 0; i < 3; ++i) bb.stem.push_back(conv_vars(v, level_name("backbone/stem", i)));
  for (int l = kMinLevel + 1; l <= kMaxLevel; ++l) bb.downs.push_back(conv_vars(v, level_name("backbone/down", l)));
  const auto levels = ad::backbone(t, t.constant(std::move(x)), bb);

  TowerVars tv;
  for (Index i = 0; i < c.tower_depth; ++i) tv.blocks.push_back(conv_vars(v, level_name("tower/block", int(i))));
  tv.top = conv_vars(v, "tower/top");
  tv.basis_width = c.basis_width;
  tv.emb_dim = c.embedding_width();
  ContextVars ctx = ad::tower_top(t, levels, tv);

  const Index cb = c.basis_width;
  for (int l = kMinLevel; l <= kMaxLevel; ++l) {
    const Shape s = t.value(ctx.a[l]).shape();
    if (!keeps_a(c.knockout)) ctx.a[l] = t.constant(Tensor<Scalar>::ones(Shape{1, cb, s.h, s.w}));
    if (!keeps_b(c.knockout)) ctx.b[l] = t.constant(Tensor<Scalar>::ones(Shape{1, cb, s.h, s.w}));
  }

  BasisVars bv;
  for (int l = kMinLevel; l <= kMaxLevel; ++l) {
    bv.lateral[l] = conv_vars(v, level_name("basis/lateral", l));
    bv.dr1[l] = conv_vars(v, level_name("basis/dr1_", l));
  }
  bv.upsample = c.upsample_mode;
  bv.emit_stride = c.emit_stride;

  ForwardVars out;
  out.padded_h = padded.image.shape().h;
  out.padded_w = padded.image.shape().w;
  out.original_h = padded.original_h;
  out.original_w = padded.original_w;
  out.f = ad::dr1basis(t, levels, ctx, bv, out.padded_h, out.padded_w);
  out.stride = c.emit_stride;
  out.level_base = double(c.level_base);
  out.embeddings = ctx.e;
  for (const auto& [l, e] : ctx.e) out.level_extents[l] = {t.value(e).shape().h, t.value(e).shape().w};
  out.aux = ad::conv2d(t, out.f, conv_vars(v, "aux"));
  return out;
}

/// Embedding vars for one box under teacher forcing.
template <typename Scalar>
std::vector<Var> instance_embeddings(Tape<Scalar>& t, const ForwardVars& fw, const Box& box) {
  std::vector<Var> es;
  for (const auto& cell : assign_cells(box, fw.level_extents, fw.level_base)) {
    es.push_back(ad::gather_pixel(t, fw.embeddings.at(cell.level), 0, cell.y, cell.x));
  }
  return es;
}

/// Mask logits (1, 1, S, S) for a box crop under the configured head.
template <typename Scalar>
Var instance_mask_logits(Tape<Scalar>& t, const Config& c, const VarMap& v, const ForwardVars& fw, Var e,
                         const Box& box) {
  const Index s = c.crop_size;
  const Var crop = ad::roi_align(t, fw.f, box, s, s, static_cast<double>(fw.stride));
  const Index cb = c.basis_width;
  switch (c.head_kind) {
    case HeadKind::kVector:
      return ad::vector_blend(t, crop, e);
    case HeadKind::kFull: {
      const Var proj = ad::project(t, crop, ad::slice_channels(t, e, 0, cb * kProjChannels));
      const Var q_flat = ad::slice_channels(t, e, cb * kProjChannels, c.embedding_width());
      const Var q = ad::reshape(t, q_flat, Shape{1, kProjChannels, kAttnSize, kAttnSize});
      return ad::blend(t, proj, q);
    }
    case HeadKind::kFactored: {
      const Var proj = ad::project(t, crop, ad::slice_channels(t, e, 0, cb * kProjChannels));
      const Var sig = ad::slice_channels(t, e, cb * kProjChannels, c.embedding_width());
      const Var q = ad::assemble_attention(t, sig, v.at("heads/u"), v.at("heads/v"));
      return ad::blend(t, proj, q);
    }
  }
  throw InvalidArgument("unknown head kind");
}

/// Bilinear upsample from basis resolution to the padded input, then crop to the original extents.
template <typename Scalar>
Var to_image_resolution(Tape<Scalar>& t, const ForwardVars& fw, Var logits) {
  const Var up = ad::resize_bilinear(t, logits, fw.padded_h, fw.padded_w);
  return ad::crop_to(t, up, fw.original_h, fw.original_w);
}

template <typename Scalar>
Var panoptic_logits_image(Tape<Scalar>& t, const Config& c, const VarMap& v, const ForwardVars& fw,
                          const std::vector<Var>& things) {
  std::optional<Var> bias;
  if (const auto it = v.find("heads/stuff_bias"); c.stuff_bias && it != v.end()) bias = it->second;
  const Var y = ad::panoptic_logits(t, fw.f, fw.stride, v.at("heads/w_stuff"), bias, things);
  return to_image_resolution(t, fw, y);
}

/// Ground-truth crop of an instance mask: roi_align of the binary mask, binarized at 0.5.
template <typename Scalar>
Tensor<Scalar> mask_target(const Instance& inst, Index h, Index w, Index crop) {
  Tensor<Scalar> m(Shape{1, 1, h, w});
  for (Index k = 0; k < h * w; ++k) m[k] = inst.mask[static_cast<std::size_t>(k)] ? Scalar(1) : Scalar(0);
  Tensor<Scalar> r = roi_align(m, inst.box.to_box(), crop, crop, 1.0);
  for (auto& x : r.data()) x = x >= Scalar(0.5) ? Scalar(1) : Scalar(0);
  return r;
}

template <typename Scalar>
struct SceneLoss {
  Var total;
  Var mask;
  Var panoptic;
  Var aux;
  double mean_iou = 0;  // crop-space IoU of sigmoid >= 0.5 predictions, averaged over predictions
  Index predictions = 0;
};

/// Full teacher-forced loss for one scene.
template <typename Scalar>
SceneLoss<Scalar> scene_loss(Tape<Scalar>& t, const Config& c, const VarMap& v, const Scene& scene) {
  const Tensor<Scalar> image = scene.image.template cast<Scalar>();
  const ForwardVars fw = forward(t, c, v, image);
  const Tensor<Scalar> zero(Shape{1, 1, 1, 1});

  SceneLoss<Scalar> out;
  std::vector<std::pair<Var, Scalar>> mask_terms;
  std::vector<Var> things;
  double iou_sum = 0;
  for (const auto& inst : scene.instances) {
    const Box box = inst.box.to_box();
    const auto es = instance_embeddings(t, fw, box);
    const Tensor<Scalar> target = mask_target<Scalar>(inst, scene.h, scene.w, c.crop_size);
    std::vector<std::uint8_t> gt(static_cast<std::size_t>(target.size()));
    for (Index k = 0; k < target.size(); ++k) gt[std::size_t(k)] = target[k] > Scalar(0.5);
    for (Var e : es) {
      const Var logits = instance_mask_logits(t, c, v, fw, e, box);
      mask_terms.push_back({ad::bce_with_logits(t, logits, target), Scalar(1)});
      const auto& lv = t.value(logits);
      std::vector<std::uint8_t> pred(gt.size());
      for (Index k = 0; k < lv.size(); ++k) pred[std::size_t(k)] = lv[k] >= Scalar(0);
      iou_sum += iou(pred, gt);
    }
    if (c.panoptic_enabled()) things.push_back(ad::mean_embedding(t, es));
  }
  out.predictions = static_cast<Index>(mask_terms.size());
  out.mean_iou = mask_terms.empty() ? 0.0 : iou_sum / double(mask_terms.size());
  for (auto& term : mask_terms) term.second = Scalar(1) / static_cast<Scalar>(mask_terms.size());
  out.mask = mask_terms.empty() ? t.constant(zero) : ad::weighted_sum(t, mask_terms);

  if (c.panoptic_enabled()) {
    const Var logits = panoptic_logits_image(t, c, v, fw, things);
    out.panoptic = ad::softmax_cross_entropy(t, logits, panoptic_labels(scene, c.n_stuff_classes));
  } else {
    out.panoptic = t.constant(zero);
  }
  if (c.aux_weight > 0) {
    out.aux = ad::softmax_cross_entropy(t, to_image_resolution(t, fw, fw.aux), semantic_labels(scene, c.n_stuff_classes));
  } else {
    out.aux = t.constant(zero);
  }
  out.total = ad::weighted_sum(t, {{out.mask, Scalar(c.mask_weight)},
                                   {out.panoptic, Scalar(c.panoptic_enabled() ? c.panoptic_weight : 0.0)},
                                   {out.aux, Scalar(c.aux_weight)}});
  return out;
}

}  // namespace dr1mask

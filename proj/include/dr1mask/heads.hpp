#pragma once

// Instance prediction (vector, full attention, factored attention) and the unified panoptic
// layer built from static stuff columns plus dynamic per-instance thing columns.

#include <cstdint>
#include <string>
#include <vector>

#include "dr1mask/autodiff.hpp"
#include "dr1mask/ops.hpp"
#include "dr1mask/pyramid.hpp"

namespace dr1mask {

constexpr Index kProjChannels = 4;  // K: projected bases per instance
constexpr Index kAttnSize = 14;     // attention maps are 14 x 14
constexpr Index kAttnRank = 4;      // rows of U_k and V_k

enum class HeadKind { kVector, kFull, kFactored };

inline const char* head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::kVector: return "vector";
    case HeadKind::kFull: return "full";
    case HeadKind::kFactored: return "factored";
  }
  return "?";
}

/// Length of the per-instance embedding e for a head over a C_b-wide basis.
inline Index embedding_dim(HeadKind kind, Index basis_width) {
  switch (kind) {
    case HeadKind::kVector: return basis_width;
    case HeadKind::kFull: return basis_width * kProjChannels + kProjChannels * kAttnSize * kAttnSize;
    case HeadKind::kFactored: return basis_width * kProjChannels + kProjChannels * kAttnRank;
  }
  return 0;
}

/// U and V stacked as (1, K, rank, 14); shared by every instance.
template <typename Scalar>
struct SharedFactors {
  Tensor<Scalar> u;
  Tensor<Scalar> v;
};

template <typename Scalar>
struct PanopticHead {
  Tensor<Scalar> w_stuff;              // (1, 1, C_b, C_stuff)
  std::optional<Tensor<Scalar>> bias;  // (1, C_stuff, 1, 1)

  Index basis_width() const { return w_stuff.shape().h; }
  Index stuff_classes() const { return w_stuff.shape().w; }
};

template <typename Scalar>
Tensor<Scalar> crop_basis(const BasisOutput<Scalar>& basis, const Box& box, Index crop_size) {
  return roi_align(basis.f, box, crop_size, crop_size, static_cast<double>(basis.stride));
}

namespace detail {
template <typename Scalar>
Eigen::Map<const RowMatrix<Scalar>> projection_matrix(const Tensor<Scalar>& t, Index width) {
  if (t.size() != width * kProjChannels) {
    throw InvalidArgument("projection weights have length " + std::to_string(t.size()) +
                          ", expected " + std::to_string(width * kProjChannels));
  }
  return {t.raw(), kProjChannels, width};
}
}  // namespace detail

/// 1x1 convolution of the crop r (1, C_b, S, S) by t reshaped to (K, C_b).
template <typename Scalar>
Tensor<Scalar> project(const Tensor<Scalar>& r, const Tensor<Scalar>& t) {
  const auto& s = r.shape();
  const auto tm = detail::projection_matrix(t, s.c);
  Tensor<Scalar> y(Shape{1, kProjChannels, s.h, s.w});
  y.sample(0).noalias() = tm * r.sample(0);
  return y;
}

template <typename Scalar>
PairGrads<Scalar> project_backward(const Tensor<Scalar>& r, const Tensor<Scalar>& t,
                                   const Tensor<Scalar>& grad_out) {
  const auto tm = detail::projection_matrix(t, r.shape().c);
  PairGrads<Scalar> g{Tensor<Scalar>(r.shape()), Tensor<Scalar>(t.shape())};
  g.x.sample(0).noalias() = tm.transpose() * grad_out.sample(0);
  Eigen::Map<RowMatrix<Scalar>>(g.y.raw(), kProjChannels, r.shape().c).noalias() =
      grad_out.sample(0) * r.sample(0).transpose();
  return g;
}

namespace detail {
template <typename Scalar>
void check_factors(const Tensor<Scalar>& s, const SharedFactors<Scalar>& shared) {
  if (s.size() != kProjChannels * kAttnRank) {
    throw InvalidArgument("attention factors have length " + std::to_string(s.size()) +
                          ", expected " + std::to_string(kProjChannels * kAttnRank));
  }
  const Shape expect{1, kProjChannels, kAttnRank, kAttnSize};
  require_same_shape(shared.u.shape(), expect, "shared U");
  require_same_shape(shared.v.shape(), expect, "shared V");
}

template <typename Scalar>
Eigen::Map<const RowMatrix<Scalar>> factor_block(const Tensor<Scalar>& uv, Index k) {
  return {uv.raw() + k * kAttnRank * kAttnSize, kAttnRank, kAttnSize};
}
}  // namespace detail

/// Q_k = U_kᵀ diag(s[4k : 4k+4]) V_k for each of the K maps; returns (1, K, 14, 14).
template <typename Scalar>
Tensor<Scalar> assemble_attention(const Tensor<Scalar>& s, const SharedFactors<Scalar>& shared) {
  detail::check_factors(s, shared);
  Tensor<Scalar> q(Shape{1, kProjChannels, kAttnSize, kAttnSize});
  for (Index k = 0; k < kProjChannels; ++k) {
    const auto u = detail::factor_block(shared.u, k);
    const auto v = detail::factor_block(shared.v, k);
    const Eigen::Map<const Vector<Scalar>> sig(s.raw() + k * kAttnRank, kAttnRank);
    Eigen::Map<RowMatrix<Scalar>> qk(q.raw() + k * kAttnSize * kAttnSize, kAttnSize, kAttnSize);
    qk.noalias() = u.transpose() * sig.asDiagonal() * v;
  }
  return q;
}

template <typename Scalar>
struct AttentionGrads {
  Tensor<Scalar> s;
  Tensor<Scalar> u;
  Tensor<Scalar> v;
};

template <typename Scalar>
AttentionGrads<Scalar> assemble_attention_backward(const Tensor<Scalar>& s,
                                                   const SharedFactors<Scalar>& shared,
                                                   const Tensor<Scalar>& grad_q) {
  detail::check_factors(s, shared);
  AttentionGrads<Scalar> g{Tensor<Scalar>(s.shape()), Tensor<Scalar>(shared.u.shape()),
                           Tensor<Scalar>(shared.v.shape())};
  for (Index k = 0; k < kProjChannels; ++k) {
    const auto u = detail::factor_block(shared.u, k);
    const auto v = detail::factor_block(shared.v, k);
    const Eigen::Map<const RowMatrix<Scalar>> gq(grad_q.raw() + k * kAttnSize * kAttnSize,
                                                 kAttnSize, kAttnSize);
    const Eigen::Map<const Vector<Scalar>> sig(s.raw() + k * kAttnRank, kAttnRank);
    const RowMatrix<Scalar> ug = u * gq;                // rank x 14
    const RowMatrix<Scalar> vg = v * gq.transpose();    // rank x 14
    for (Index d = 0; d < kAttnRank; ++d) g.s[k * kAttnRank + d] = ug.row(d).dot(v.row(d));
    Eigen::Map<RowMatrix<Scalar>>(g.u.raw() + k * kAttnRank * kAttnSize, kAttnRank, kAttnSize) =
        sig.asDiagonal() * vg;
    Eigen::Map<RowMatrix<Scalar>>(g.v.raw() + k * kAttnRank * kAttnSize, kAttnRank, kAttnSize) =
        sig.asDiagonal() * ug;
  }
  return g;
}

/// Σ_k r_proj[k] ∘ q[k] for equally sized maps; returns (1, 1, S, S).
template <typename Scalar>
Tensor<Scalar> blend_product(const Tensor<Scalar>& r_proj, const Tensor<Scalar>& q) {
  require_same_shape(r_proj.shape(), q.shape(), "blend");
  return sum_channels(eltwise_mul(r_proj, q));
}

/// Mask logits: attention resized (bilinear) from 14 x 14 to the crop extent, multiplied with
/// the projected crop and summed over the K maps.
template <typename Scalar>
Tensor<Scalar> blend(const Tensor<Scalar>& r_proj, const Tensor<Scalar>& q) {
  const auto& s = r_proj.shape();
  if (q.shape().c != s.c) {
    throw InvalidArgument("blend: attention " + q.shape().str() + " vs projection " + s.str());
  }
  return blend_product(r_proj, resize_bilinear(q, s.h, s.w));
}

template <typename Scalar>
PairGrads<Scalar> blend_backward(const Tensor<Scalar>& r_proj, const Tensor<Scalar>& q,
                                 const Tensor<Scalar>& grad_out) {
  const auto& s = r_proj.shape();
  const Tensor<Scalar> qr = resize_bilinear(q, s.h, s.w);
  const Tensor<Scalar> g = sum_channels_backward(grad_out, s.c);
  return {eltwise_mul(g, qr), resize_bilinear_backward(eltwise_mul(g, r_proj), q.shape())};
}

template <typename Scalar>
Tensor<Scalar> vector_blend(const Tensor<Scalar>& r, const Tensor<Scalar>& e) {
  const auto& s = r.shape();
  if (e.size() != s.c) {
    throw InvalidArgument("vector_blend: embedding length " + std::to_string(e.size()) +
                          " vs basis width " + std::to_string(s.c));
  }
  Tensor<Scalar> y(Shape{1, 1, s.h, s.w});
  const Eigen::Map<const Vector<Scalar>> ev(e.raw(), s.c);
  y.sample(0).noalias() = ev.transpose() * r.sample(0);
  return y;
}

template <typename Scalar>
PairGrads<Scalar> vector_blend_backward(const Tensor<Scalar>& r, const Tensor<Scalar>& e,
                                        const Tensor<Scalar>& grad_out) {
  const auto& s = r.shape();
  PairGrads<Scalar> g{Tensor<Scalar>(s), Tensor<Scalar>(e.shape())};
  const Eigen::Map<const Vector<Scalar>> ev(e.raw(), s.c);
  g.x.sample(0).noalias() = ev * grad_out.sample(0);
  Eigen::Map<Vector<Scalar>>(g.y.raw(), s.c).noalias() = r.sample(0) * grad_out.sample(0).transpose();
  return g;
}

template <typename Scalar>
Tensor<Scalar> mean_embedding(const std::vector<Tensor<Scalar>>& es) {
  if (es.empty()) throw InvalidArgument("mean_embedding: empty embedding list");
  Tensor<Scalar> m(es.front().shape());
  for (const auto& e : es) {
    require_same_shape(e.shape(), m.shape(), "mean_embedding");
    m.array() += e.array();
  }
  m.array() /= static_cast<Scalar>(es.size());
  return m;
}

namespace detail {
template <typename Scalar>
Matrix<Scalar> panoptic_weights(const PanopticHead<Scalar>& head,
                                const std::vector<Tensor<Scalar>>& things) {
  const Index cb = head.basis_width();
  Matrix<Scalar> w(cb, head.stuff_classes() + static_cast<Index>(things.size()));
  w.leftCols(head.stuff_classes()) =
      Eigen::Map<const RowMatrix<Scalar>>(head.w_stuff.raw(), cb, head.stuff_classes());
  for (std::size_t i = 0; i < things.size(); ++i) {
    if (things[i].size() != cb) {
      throw InvalidArgument("panoptic_logits: thing embedding " + std::to_string(i) +
                            " has length " + std::to_string(things[i].size()) +
                            ", basis width is " + std::to_string(cb));
    }
    w.col(head.stuff_classes() + static_cast<Index>(i)) =
        Eigen::Map<const Vector<Scalar>>(things[i].raw(), cb);
  }
  return w;
}
}  // namespace detail

/// Y = [W_stuff, ē_1 .. ē_T]ᵀ F per pixel; stuff channels come first.
template <typename Scalar>
Tensor<Scalar> panoptic_logits(const BasisOutput<Scalar>& basis, const PanopticHead<Scalar>& head,
                               const std::vector<Tensor<Scalar>>& things) {
  const auto& f = basis.f;
  const auto& s = f.shape();
  if (s.n != 1 || s.c != head.basis_width()) {
    throw InvalidArgument("panoptic_logits: basis " + s.str() + " vs head width " +
                          std::to_string(head.basis_width()));
  }
  const Matrix<Scalar> w = detail::panoptic_weights(head, things);
  const Index cs = head.stuff_classes();
  Tensor<Scalar> y(Shape{1, w.cols(), s.h, s.w});
  // Separate products keep the stuff rows bitwise independent of how many things follow.
  y.sample(0).topRows(cs).noalias() = w.leftCols(cs).transpose() * f.sample(0);
  if (w.cols() > cs) y.sample(0).bottomRows(w.cols() - cs).noalias() = w.rightCols(w.cols() - cs).transpose() * f.sample(0);
  if (head.bias) {
    for (Index c = 0; c < head.stuff_classes(); ++c) y.sample(0).row(c).array() += (*head.bias)[c];
  }
  return y;
}

template <typename Scalar>
struct PanopticGrads {
  Tensor<Scalar> f;
  Tensor<Scalar> w_stuff;
  std::optional<Tensor<Scalar>> bias;
  std::vector<Tensor<Scalar>> things;
};

template <typename Scalar>
PanopticGrads<Scalar> panoptic_logits_backward(const BasisOutput<Scalar>& basis,
                                               const PanopticHead<Scalar>& head,
                                               const std::vector<Tensor<Scalar>>& things,
                                               const Tensor<Scalar>& grad_out) {
  const auto& f = basis.f;
  const Index cb = head.basis_width();
  const Index cs = head.stuff_classes();
  const Matrix<Scalar> w = detail::panoptic_weights(head, things);
  PanopticGrads<Scalar> g;
  g.f = Tensor<Scalar>(f.shape());
  g.f.sample(0).noalias() = w * grad_out.sample(0);
  const Matrix<Scalar> gw = f.sample(0) * grad_out.sample(0).transpose();  // C_b x C
  g.w_stuff = Tensor<Scalar>(head.w_stuff.shape());
  Eigen::Map<RowMatrix<Scalar>>(g.w_stuff.raw(), cb, cs) = gw.leftCols(cs);
  if (head.bias) {
    Tensor<Scalar> gb(head.bias->shape());
    for (Index c = 0; c < cs; ++c) gb[c] = grad_out.sample(0).row(c).sum();
    g.bias = std::move(gb);
  }
  for (std::size_t i = 0; i < things.size(); ++i) {
    Tensor<Scalar> ge(things[i].shape());
    Eigen::Map<Vector<Scalar>>(ge.raw(), cb) = gw.col(cs + static_cast<Index>(i));
    g.things.push_back(std::move(ge));
  }
  return g;
}

struct PanopticMaps {
  Index h = 0;
  Index w = 0;
  std::vector<std::int32_t> channel;   // winning channel per pixel
  std::vector<std::int32_t> semantic;  // stuff id, or -1 where a thing channel wins
  std::vector<std::int32_t> instance;  // 0 for stuff, i + 1 for thing channel i
};

/// Per-pixel argmax over all channels; ties go to the lowest channel index.
template <typename Scalar>
PanopticMaps panoptic_decode(const Tensor<Scalar>& logits, Index stuff_classes) {
  const auto& s = logits.shape();
  PanopticMaps out;
  out.h = s.h;
  out.w = s.w;
  const auto n = static_cast<std::size_t>(s.plane());
  out.channel.resize(n);
  out.semantic.resize(n);
  out.instance.resize(n);
  for (Index p = 0; p < s.plane(); ++p) {
    Index best = 0;
    Scalar best_v = logits[p];
    for (Index c = 1; c < s.c; ++c) {
      const Scalar v = logits[c * s.plane() + p];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    const auto i = static_cast<std::size_t>(p);
    out.channel[i] = static_cast<std::int32_t>(best);
    out.semantic[i] = best < stuff_classes ? static_cast<std::int32_t>(best) : -1;
    out.instance[i] = best < stuff_classes ? 0 : static_cast<std::int32_t>(best - stuff_classes + 1);
  }
  return out;
}

struct ParamCount {
  std::int64_t per_instance_attention = 0;   // values that shape the mask per instance
  std::int64_t per_instance_projection = 0;  // t, length C_b·K (0 for the vector head)
  std::int64_t shared = 0;                   // U and V
  std::int64_t per_instance_total() const { return per_instance_attention + per_instance_projection; }
};

inline ParamCount count_params(HeadKind kind, Index basis_width) {
  ParamCount p;
  switch (kind) {
    case HeadKind::kVector:
      p.per_instance_attention = basis_width;
      break;
    case HeadKind::kFull:
      p.per_instance_attention = kProjChannels * kAttnSize * kAttnSize;
      p.per_instance_projection = basis_width * kProjChannels;
      break;
    case HeadKind::kFactored:
      p.per_instance_attention = kProjChannels * kAttnRank;
      p.per_instance_projection = basis_width * kProjChannels;
      p.shared = 2 * kProjChannels * kAttnRank * kAttnSize;
      break;
  }
  return p;
}

namespace ad {

template <typename Scalar>
Var project(Tape<Scalar>& t, Var r, Var proj) {
  return t.record(dr1mask::project(t.value(r), t.value(proj)), {r, proj},
                  [r, proj](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    auto grads = project_backward(tp.value(r), tp.value(proj), g);
                    tp.accumulate(r, grads.x);
                    tp.accumulate(proj, grads.y);
                  });
}

template <typename Scalar>
Var assemble_attention(Tape<Scalar>& t, Var s, Var u, Var v) {
  const SharedFactors<Scalar> shared{t.value(u), t.value(v)};
  return t.record(dr1mask::assemble_attention(t.value(s), shared), {s, u, v},
                  [s, u, v](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    const SharedFactors<Scalar> sh{tp.value(u), tp.value(v)};
                    auto grads = assemble_attention_backward(tp.value(s), sh, g);
                    tp.accumulate(s, grads.s);
                    tp.accumulate(u, grads.u);
                    tp.accumulate(v, grads.v);
                  });
}

template <typename Scalar>
Var blend(Tape<Scalar>& t, Var r_proj, Var q) {
  return t.record(dr1mask::blend(t.value(r_proj), t.value(q)), {r_proj, q},
                  [r_proj, q](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    auto grads = blend_backward(tp.value(r_proj), tp.value(q), g);
                    tp.accumulate(r_proj, grads.x);
                    tp.accumulate(q, grads.y);
                  });
}

template <typename Scalar>
Var vector_blend(Tape<Scalar>& t, Var r, Var e) {
  return t.record(dr1mask::vector_blend(t.value(r), t.value(e)), {r, e},
                  [r, e](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    auto grads = vector_blend_backward(tp.value(r), tp.value(e), g);
                    tp.accumulate(r, grads.x);
                    tp.accumulate(e, grads.y);
                  });
}

template <typename Scalar>
Var mean_embedding(Tape<Scalar>& t, const std::vector<Var>& es) {
  std::vector<Tensor<Scalar>> values;
  for (Var e : es) values.push_back(t.value(e));
  return t.record(dr1mask::mean_embedding(values), es,
                  [es](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
                    const auto share = dr1mask::scale(g, Scalar(1) / static_cast<Scalar>(es.size()));
                    for (Var e : es) tp.accumulate(e, share);
                  });
}

template <typename Scalar>
Var panoptic_logits(Tape<Scalar>& t, Var f, int stride, Var w_stuff, std::optional<Var> bias,
                    const std::vector<Var>& things) {
  auto head_of = [w_stuff, bias](const Tape<Scalar>& tp) {
    PanopticHead<Scalar> h{tp.value(w_stuff), std::nullopt};
    if (bias) h.bias = tp.value(*bias);
    return h;
  };
  auto things_of = [things](const Tape<Scalar>& tp) {
    std::vector<Tensor<Scalar>> v;
    for (Var e : things) v.push_back(tp.value(e));
    return v;
  };
  std::vector<Var> inputs{f, w_stuff};
  if (bias) inputs.push_back(*bias);
  inputs.insert(inputs.end(), things.begin(), things.end());
  const BasisOutput<Scalar> basis{t.value(f), stride};
  return t.record(
      dr1mask::panoptic_logits(basis, head_of(t), things_of(t)), inputs,
      [f, stride, w_stuff, bias, things, head_of, things_of](Tape<Scalar>& tp,
                                                             const Tensor<Scalar>& g) {
        const BasisOutput<Scalar> b{tp.value(f), stride};
        auto grads = panoptic_logits_backward(b, head_of(tp), things_of(tp), g);
        tp.accumulate(f, grads.f);
        tp.accumulate(w_stuff, grads.w_stuff);
        if (bias) tp.accumulate(*bias, *grads.bias);
        for (std::size_t i = 0; i < things.size(); ++i) tp.accumulate(things[i], grads.things[i]);
      });
}

}  // namespace ad
}  // namespace dr1mask

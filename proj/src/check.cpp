#include "dr1mask/check.hpp"

#include <algorithm>
#include <cstdio>
#include <random>

#include "dr1mask/gradcheck.hpp"
#include "dr1mask/heads.hpp"
#include "dr1mask/losses.hpp"
#include "dr1mask/pyramid.hpp"

namespace dr1mask {

bool SuiteResult::pass() const {
  return std::all_of(cases.begin(), cases.end(), [](const CaseResult& c) { return c.pass; });
}

namespace {

using Rng = std::mt19937_64;

std::string fmt(const char* f, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

CaseResult bound(std::string name, double value, double limit) {
  return {std::move(name), value <= limit, fmt("%.3g", value) + " <= " + fmt("%.0e", limit)};
}

template <typename S>
Matrix<S> pointwise_matrix(const Tensor<S>& w) {
  const Index c = w.shape().n;
  Matrix<S> m(c, c);
  for (Index i = 0; i < c; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = w(i, j, 0, 0);
  return m;
}

template <typename S>
double dr1conv_worst(Rng& rng, int cases) {
  std::uniform_int_distribution<Index> ext(1, 16), pick(0, 4);
  const Index channels[] = {1, 2, 4, 8, 32};
  double worst = 0;
  for (int i = 0; i < cases; ++i) {
    const Index c = channels[pick(rng)], k = i % 2 ? 3 : 1;
    const Shape s{1, c, ext(rng), ext(rng)};
    const Tensor<S> x = Tensor<S>::uniform(s, rng);
    const DynamicFactors<S> f{Tensor<S>::uniform(s, rng), Tensor<S>::uniform(s, rng)};
    DR1ConvLayer<S> layer{{Tensor<S>::uniform(Shape{c, c, k, k}, rng), std::nullopt}};
    if (k == 3) layer.kernel.bias = Tensor<S>::uniform(Shape{1, c, 1, 1}, rng);
    const Tensor<S> fast = dr1conv_forward(x, f, layer);
    const Tensor<S> ref = k == 1 ? oracle_rank1_pointwise(x, f, pointwise_matrix(layer.kernel.weights))
                                 : oracle_general_kernel(x, f, layer, KernelForm::kOutputModulated);
    worst = std::max(worst, max_relative_error(fast, ref));
  }
  return worst;
}

SuiteResult dr1conv_suite(Rng& rng) {
  SuiteResult s{"dr1conv", {}};
  s.cases.push_back(bound("fast path vs oracles, float (100 cases)", dr1conv_worst<float>(rng, 100), 1e-5));
  s.cases.push_back(bound("fast path vs oracles, double (100 cases)", dr1conv_worst<double>(rng, 100), 1e-10));

  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    const Shape sh{1, 3, 5, 6};
    const TensorD x = TensorD::uniform(sh, rng);
    const DynamicFactors<double> f{TensorD::uniform(sh, rng), TensorD::uniform(sh, rng)};
    const DR1ConvLayer<double> layer{{TensorD::uniform(Shape{3, 3, 3, 3}, rng), TensorD::uniform(Shape{1, 3, 1, 1}, rng)}};
    worst = std::max(worst, max_relative_error(dr1conv_materialized(x, f, layer), dr1conv_forward(x, f, layer)));
  }
  s.cases.push_back(bound("materialized per-position kernels", worst, 1e-10));

  // Informational: how far the input-modulated transcription sits from the canonical form.
  double gap = 0;
  for (int i = 0; i < 20; ++i) {
    const Shape sh{1, 4, 8, 8};
    const TensorD x = TensorD::uniform(sh, rng);
    const DynamicFactors<double> f{TensorD::uniform(sh, rng), TensorD::uniform(sh, rng)};
    const DR1ConvLayer<double> layer{{TensorD::uniform(Shape{4, 4, 3, 3}, rng), std::nullopt}};
    gap = std::max(gap, max_relative_error(oracle_general_kernel(x, f, layer, KernelForm::kInputModulated),
                                           oracle_general_kernel(x, f, layer, KernelForm::kOutputModulated)));
  }
  s.cases.push_back({"input- vs output-modulated 3x3 forms (reported only)", true, fmt("max relative gap %.3g", gap)});

  std::uniform_int_distribution<Index> dim(2, 8);
  double minor = 0;
  for (int i = 0; i < 1000; ++i) {
    const Index n = dim(rng);
    const Vector<double> a = Vector<double>::NullaryExpr(n, [&] { return std::uniform_real_distribution<>(-1, 1)(rng); });
    const Vector<double> b = Vector<double>::NullaryExpr(n, [&] { return std::uniform_real_distribution<>(-1, 1)(rng); });
    const Matrix<double> m = b * a.transpose();
    for (Index r0 = 0; r0 < n; ++r0)
      for (Index r1 = r0 + 1; r1 < n; ++r1)
        for (Index c0 = 0; c0 < n; ++c0)
          for (Index c1 = c0 + 1; c1 < n; ++c1)
            minor = std::max(minor, std::abs(m(r0, c0) * m(r1, c1) - m(r0, c1) * m(r1, c0)) / m.norm());
  }
  s.cases.push_back(bound("rank-1 modulation 2x2 minors / |M| (1000 samples)", minor, 1e-6));

  const Shape sh{1, 4, 7, 7};
  const TensorF x = TensorF::uniform(sh, rng);
  const DR1ConvLayer<float> layer{{TensorF::uniform(Shape{4, 4, 3, 3}, rng), TensorF::uniform(Shape{1, 4, 1, 1}, rng)}};
  const bool same = dr1conv_forward(x, {TensorF::ones(sh), TensorF::ones(sh)}, layer) == conv2d(x, layer.kernel);
  s.cases.push_back({"unit factors equal the static convolution", same, same ? "bitwise" : "differs"});
  return s;
}

// sum(y ∘ r) as a 1x1 convolution over the flattened tensor.
Var contract(Tape<double>& t, Var y, const TensorD& r) {
  const Index n = t.value(y).size();
  const Var flat = ad::reshape(t, y, Shape{1, n, 1, 1});
  return ad::conv2d(t, flat, ConvVars{t.constant(r.reshaped(Shape{1, n, 1, 1})), std::nullopt});
}

SuiteResult gradcheck_suite(Rng& rng, const CheckOptions& opt) {
  SuiteResult s{"gradcheck", {}};
  const bool bad = opt.corrupt_backward;
  auto maybe_corrupt = [bad](Tape<double>& t, Var v) { return bad ? ad::corrupt_backward(t, v) : v; };
  auto u = [&](Shape sh) { return TensorD::uniform(sh, rng); };
  auto run = [&](const std::string& name, Params<double> p, Shape out, auto&& op, double tol = 1e-4) {
    const TensorD r = u(out);
    GradcheckOptions g;
    g.tolerance = tol;
    const auto report = gradcheck(p, [&](Tape<double>& t, const VarMap& v) { return contract(t, maybe_corrupt(t, op(t, v)), r); }, g);
    s.cases.push_back({name, report.pass(), fmt("worst %.3g", report.worst()) + fmt(" (tol %.0e)", tol)});
  };

  const Shape x5{1, 3, 5, 5};
  run("dr1conv", {{"x", u(x5)}, {"a", u(x5)}, {"b", u(x5)}, {"k/w", u(Shape{3, 3, 3, 3})}, {"k/b", u(Shape{1, 3, 1, 1})}},
      x5, [](Tape<double>& t, const VarMap& v) { return ad::dr1conv(t, v.at("x"), v.at("a"), v.at("b"), conv_vars(v, "k")); });
  run("conv2d stride 2", {{"x", u(Shape{1, 2, 7, 6})}, {"k/w", u(Shape{3, 2, 3, 3})}, {"k/b", u(Shape{1, 3, 1, 1})}},
      Shape{1, 3, 4, 3}, [](Tape<double>& t, const VarMap& v) { return ad::conv2d(t, v.at("x"), conv_vars(v, "k"), 2); });
  run("roi_align", {{"f", u(Shape{1, 2, 6, 6})}}, Shape{1, 2, 5, 5},
      [](Tape<double>& t, const VarMap& v) { return ad::roi_align(t, v.at("f"), Box{3.3, 2.1, 17.5, 20.2}, 5, 5, 4.0); });
  run("project", {{"r", u(Shape{1, 4, 5, 5})}, {"t", u(Shape{1, 1, 1, 16})}}, Shape{1, 4, 5, 5},
      [](Tape<double>& t, const VarMap& v) { return ad::project(t, v.at("r"), v.at("t")); });
  run("assemble_attention", {{"s", u(Shape{1, 1, 1, 16})}, {"u", u(Shape{1, 4, 4, 14})}, {"v", u(Shape{1, 4, 4, 14})}},
      Shape{1, 4, 14, 14}, [](Tape<double>& t, const VarMap& v) { return ad::assemble_attention(t, v.at("s"), v.at("u"), v.at("v")); });
  run("blend", {{"r", u(Shape{1, 4, 6, 6})}, {"q", u(Shape{1, 4, 6, 6})}}, Shape{1, 1, 6, 6},
      [](Tape<double>& t, const VarMap& v) { return ad::blend(t, v.at("r"), v.at("q")); });
  run("vector_blend", {{"r", u(Shape{1, 5, 4, 4})}, {"e", u(Shape{1, 1, 1, 5})}}, Shape{1, 1, 4, 4},
      [](Tape<double>& t, const VarMap& v) { return ad::vector_blend(t, v.at("r"), v.at("e")); });
  run("panoptic_logits",
      {{"f", u(Shape{1, 4, 3, 5})}, {"w", u(Shape{1, 1, 4, 3})}, {"bias", u(Shape{1, 3, 1, 1})}, {"e0", u(Shape{1, 1, 1, 4})},
       {"e1", u(Shape{1, 1, 1, 4})}},
      Shape{1, 5, 3, 5}, [](Tape<double>& t, const VarMap& v) {
        return ad::panoptic_logits(t, v.at("f"), 4, v.at("w"), v.at("bias"), {v.at("e0"), v.at("e1")});
      });
  const TensorD target = [&] {
    TensorD y(Shape{1, 1, 4, 4});
    for (Index i = 0; i < y.size(); ++i) y[i] = double(i % 3 == 0);
    return y;
  }();
  run("bce_with_logits", {{"x", u(Shape{1, 1, 4, 4})}}, Shape{1, 1, 1, 1},
      [target](Tape<double>& t, const VarMap& v) { return ad::bce_with_logits(t, v.at("x"), target); });
  run("softmax_cross_entropy", {{"x", u(Shape{1, 4, 3, 3})}}, Shape{1, 1, 1, 1}, [](Tape<double>& t, const VarMap& v) {
    return ad::softmax_cross_entropy<double>(t, v.at("x"), {0, 1, 2, 3, 0, 1, 2, 3, 3});
  });

  GradcheckOptions e2e;
  e2e.tolerance = 1e-3;
  e2e.max_entries_per_group = opt.gradcheck_entries;
  for (auto head : {HeadKind::kVector, HeadKind::kFull, HeadKind::kFactored}) {
    const auto report = end_to_end_gradcheck(head, e2e, bad);
    s.cases.push_back({std::string("end-to-end tiny model, ") + head_kind_name(head) + " head", report.pass(),
                       fmt("worst %.3g (tol 1e-03)", report.worst())});
  }
  return s;
}

SuiteResult shapes_suite(Rng& rng) {
  SuiteResult s{"shapes", {}};
  auto kernel = [&](Index co, Index ci) {
    return ConvKernel<float>{TensorF::uniform(Shape{co, ci, 3, 3}, rng, -0.3f, 0.3f), TensorF::uniform(Shape{1, co, 1, 1}, rng)};
  };
  BackboneParams<float> bb;
  bb.stem = {kernel(2, 3), kernel(2, 2), kernel(2, 2)};
  for (int i = 0; i < 4; ++i) bb.downs.push_back(kernel(2, 2));
  TowerParams<float> tower;
  tower.top = kernel(5, 2);
  tower.basis_width = 2;
  tower.emb_dim = 1;
  BasisParams<float> basis;
  for (int l = kMinLevel; l <= kMaxLevel; ++l) {
    basis.lateral[l] = kernel(2, 2);
    basis.dr1[l] = DR1ConvLayer<float>{kernel(2, 2)};
  }
  std::uniform_int_distribution<Index> ext(16, 257);
  int bad = 0;
  std::string first;
  for (int trial = 0; trial < 200; ++trial) {
    const Index h = ext(rng), w = ext(rng);
    const auto padded = pad_input(TensorF(Shape{1, 3, h, w}, 0.5f), 4);
    const auto pyr = backbone_stub(padded.image, bb);
    try {
      const auto f = dr1basis(pyr, tower_top(pyr, tower), basis);
      if (!(f.f.shape() == Shape{1, 2, padded.image.shape().h / 4, padded.image.shape().w / 4})) throw InvariantViolation("extent");
    } catch (const std::exception& e) {
      if (!bad++) first = std::to_string(h) + "x" + std::to_string(w) + ": " + e.what();
    }
  }
  s.cases.push_back({"basis extent is padded/4 for 200 random inputs", bad == 0, bad ? first : "200 / 200"});

  // Both factors knocked out must reproduce a plain top-down FPN.
  const auto pyr = backbone_stub(TensorF::uniform(Shape{1, 3, 64, 100}, rng), bb);
  std::optional<TensorF> above;
  for (int l = kMaxLevel; l >= kMinLevel; --l) {
    const auto& pl = pyr.levels.at(l);
    TensorF merged = conv2d(pl, basis.lateral.at(l));
    if (above) merged = add(merged, crop_to(upsample2_nearest(*above), pl.shape().h, pl.shape().w));
    above = conv2d(merged, basis.dr1.at(l).kernel);
  }
  const TensorF fpn = crop_to(upsample2_nearest(*above), 16, 25);
  const bool same = dr1basis(pyr, knockout(tower_top(pyr, tower), Knockout::kBoth), basis).f == fpn;
  s.cases.push_back({"A = B = 1 reduces the basis to a static FPN", same, same ? "bitwise" : "differs"});
  return s;
}

SuiteResult params_suite(Rng& rng) {
  SuiteResult s{"params", {}};
  const auto full = count_params(HeadKind::kFull, 32).per_instance_attention;
  const auto fac = count_params(HeadKind::kFactored, 32).per_instance_attention;
  s.cases.push_back({"full attention values per instance", full == 784, std::to_string(full)});
  s.cases.push_back({"factored attention values per instance", fac == 16, std::to_string(fac)});

  const SharedFactors<double> sh{TensorD::uniform(Shape{1, 4, 4, 14}, rng), TensorD::uniform(Shape{1, 4, 4, 14}, rng)};
  const TensorD sv = TensorD::uniform(Shape{1, 1, 1, 16}, rng);
  const TensorD q = assemble_attention(sv, sh);
  double worst = 0;
  for (Index k = 0; k < 4; ++k) {
    Matrix<double> u(4, 14), v(4, 14), sig = Matrix<double>::Zero(4, 4);
    for (Index d = 0; d < 4; ++d) {
      sig(d, d) = sv[k * 4 + d];
      for (Index i = 0; i < 14; ++i) {
        u(d, i) = sh.u(0, k, d, i);
        v(d, i) = sh.v(0, k, d, i);
      }
    }
    const Matrix<double> dense = u.transpose() * sig * v;
    for (Index i = 0; i < 14; ++i)
      for (Index j = 0; j < 14; ++j) worst = std::max(worst, std::abs(dense(i, j) - q(0, k, i, j)));
  }
  s.cases.push_back(bound("factored attention vs dense product", worst, 1e-6));

  const Index cb = 6, cs = 3;
  const BasisOutput<double> basis{TensorD::uniform(Shape{1, cb, 5, 4}, rng), 4};
  const PanopticHead<double> head{TensorD::uniform(Shape{1, 1, cb, cs}, rng), std::nullopt};
  const std::vector<TensorD> things{TensorD::uniform(Shape{1, 1, 1, cb}, rng), TensorD::uniform(Shape{1, 1, 1, cb}, rng)};
  const TensorD y = panoptic_logits(basis, head, things);
  double pw = 0;
  for (Index p = 0; p < 20; ++p)
    for (Index c = 0; c < cs + 2; ++c) {
      double acc = 0;
      for (Index j = 0; j < cb; ++j) acc += (c < cs ? head.w_stuff[j * cs + c] : things[std::size_t(c - cs)][j]) * basis.f[j * 20 + p];
      pw = std::max(pw, std::abs(acc - y[c * 20 + p]));
    }
  s.cases.push_back(bound("panoptic logits vs per-pixel matvec", pw, 1e-5));
  const bool invariant = slice_channels(y, 0, cs) == panoptic_logits(basis, head, {});
  s.cases.push_back({"stuff logits ignore thing embeddings", invariant, invariant ? "bitwise" : "differs"});
  return s;
}

}  // namespace

const std::vector<std::string>& check_suite_names() {
  static const std::vector<std::string> names{"dr1conv", "gradcheck", "shapes", "params"};
  return names;
}

std::vector<SuiteResult> run_checks(const CheckOptions& opt) {
  for (const auto& n : opt.only) {
    const auto& all = check_suite_names();
    if (std::find(all.begin(), all.end(), n) == all.end()) throw InvalidArgument("unknown check suite '" + n + "'");
  }
  auto wanted = [&](const std::string& n) {
    return opt.only.empty() || std::find(opt.only.begin(), opt.only.end(), n) != opt.only.end();
  };
  std::vector<SuiteResult> out;
  Rng rng(opt.seed);
  if (wanted("dr1conv")) out.push_back(dr1conv_suite(rng));
  if (wanted("gradcheck")) out.push_back(gradcheck_suite(rng, opt));
  if (wanted("shapes")) out.push_back(shapes_suite(rng));
  if (wanted("params")) out.push_back(params_suite(rng));
  return out;
}

std::string format_check_table(const std::vector<SuiteResult>& suites) {
  std::size_t width = 0;
  for (const auto& s : suites)
    for (const auto& c : s.cases) width = std::max(width, s.name.size() + c.name.size() + 2);
  std::string out;
  for (const auto& s : suites) {
    for (const auto& c : s.cases) {
      std::string label = s.name + ": " + c.name;
      label.resize(width, ' ');
      out += (c.pass ? "PASS  " : "FAIL  ") + label + "  " + c.detail + "\n";
    }
  }
  return out;
}

}  // namespace dr1mask

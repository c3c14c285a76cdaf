#include <doctest.h>

#include "dr1mask/pyramid.hpp"
#include "oracles.hpp"
#include "pyramid_fixtures.hpp"

using namespace dr1mask;
using namespace fixtures;

TEST_CASE("pad_input extents") {
  const auto a = pad_input(TensorF(Shape{1, 3, 64, 100}, 1.0f), 4);
  CHECK(a.image.shape() == Shape{1, 3, 64, 100});
  const auto b = pad_input(TensorF(Shape{1, 3, 50, 50}, 1.0f), 4);
  CHECK(b.image.shape() == Shape{1, 3, 52, 52});
  CHECK(b.original_h == 50);
  CHECK(b.original_w == 50);
  CHECK(b.image(0, 0, 51, 10) == 0.0f);
  CHECK(b.image(0, 2, 10, 50) == 0.0f);
  CHECK(b.image(0, 1, 49, 49) == 1.0f);
  const auto c = pad_input(TensorF(Shape{1, 3, 50, 50}), 32);
  CHECK(c.image.shape() == Shape{1, 3, 64, 64});
  // 800 px at divisibility 128 pads to 896: about 25% more area.
  const double growth = std::pow(double(ceil_div(800, 128) * 128) / 800.0, 2) - 1.0;
  CHECK(growth == doctest::Approx(0.2544).epsilon(1e-3));
  CHECK_THROWS_AS(pad_input(TensorF(Shape{1, 3, 4, 4}), 0), InvalidArgument);
}

TEST_CASE("backbone level extents follow the ceil rule") {
  auto rng = oracle::rng(1);
  const auto bb = rand_backbone<float>(rng, 8);
  const auto p64 = backbone_stub(TensorF::uniform(Shape{1, 3, 64, 64}, rng), bb);
  const Index expect[] = {8, 4, 2, 1, 1};
  for (int l = 3; l <= 7; ++l) {
    CHECK(p64.levels.at(l).shape() == Shape{1, 8, expect[l - 3], expect[l - 3]});
  }
  const auto p52 = backbone_stub(TensorF::uniform(Shape{1, 3, 52, 52}, rng), bb);
  CHECK(p52.levels.at(3).shape().h == 7);
  const auto img = TensorF::uniform(Shape{1, 3, 40, 24}, rng);
  CHECK(backbone_stub(img, bb).levels.at(5) == backbone_stub(img, bb).levels.at(5));
  CHECK_THROWS_AS(backbone_stub(TensorF(Shape{1, 3, 0, 8}), bb), InvalidArgument);
}

TEST_CASE("tower_top channel split") {
  auto rng = oracle::rng(2);
  const auto bb = rand_backbone<float>(rng, 8);
  const auto pyr = backbone_stub(TensorF::uniform(Shape{1, 3, 64, 64}, rng), bb);
  const auto tower = rand_tower<float>(rng, 8, 32, 16, 2);
  const auto ctx = tower_top(pyr, tower);
  for (int l = 3; l <= 7; ++l) {
    const auto& ps = pyr.levels.at(l).shape();
    CHECK(ctx.context.at(l).a_map.shape() == Shape{1, 32, ps.h, ps.w});
    CHECK(ctx.context.at(l).b_map.shape() == Shape{1, 32, ps.h, ps.w});
    CHECK(ctx.embeddings.at(l).shape() == Shape{1, 16, ps.h, ps.w});
  }
  // Reference: run the tower by hand and slice the 80-channel top output.
  TensorF x = pyr.levels.at(4);
  for (const auto& k : tower.blocks) x = relu(conv2d(x, k));
  const TensorF top = conv2d(x, tower.top);
  CHECK(top.shape().c == 80);
  CHECK(ctx.context.at(4).a_map == slice_channels(top, 0, 32));
  CHECK(ctx.context.at(4).b_map == slice_channels(top, 32, 64));
  CHECK(ctx.embeddings.at(4) == slice_channels(top, 64, 80));
}

TEST_CASE("both-factor knockout equals a static FPN") {
  auto rng = oracle::rng(3);
  const Index cp = 6, cb = 5;
  const auto bb = rand_backbone<double>(rng, cp);
  const auto pyr = backbone_stub(TensorD::uniform(Shape{1, 3, 64, 100}, rng), bb);
  const auto ctx = tower_top(pyr, rand_tower<double>(rng, cp, cb, 4, 1));
  const auto basis = rand_basis<double>(rng, cp, cb);
  const auto ko = knockout(ctx, Knockout::kBoth);
  const auto f = dr1basis(pyr, ko, basis);
  CHECK(f.f.shape() == Shape{1, cb, 16, 25});
  CHECK(f.f == static_fpn(pyr, basis));
  CHECK(max_abs_difference(f.f, static_fpn_loops(pyr, basis)) < 1e-10);
  // With live factors the output differs.
  CHECK(max_abs_difference(dr1basis(pyr, ctx, basis).f, f.f) > 1e-6);
}

TEST_CASE("knockout definitions") {
  auto rng = oracle::rng(4);
  ContextPyramid<float> c;
  c.context[3] = {TensorF::uniform(Shape{1, 2, 3, 3}, rng), TensorF::uniform(Shape{1, 2, 3, 3}, rng)};
  const auto a = knockout(c, Knockout::kAOnly);
  CHECK(a.context.at(3).a_map == c.context.at(3).a_map);
  CHECK(a.context.at(3).b_map == TensorF::ones(Shape{1, 2, 3, 3}));
  const auto b = knockout(c, Knockout::kBOnly);
  CHECK(b.context.at(3).a_map == TensorF::ones(Shape{1, 2, 3, 3}));
  CHECK(b.context.at(3).b_map == c.context.at(3).b_map);
  CHECK(knockout(c, Knockout::kNone).context.at(3).a_map == c.context.at(3).a_map);
  for (auto k : {Knockout::kNone, Knockout::kAOnly, Knockout::kBOnly, Knockout::kBoth}) {
    const auto once = knockout(c, k);
    const auto twice = knockout(once, k);
    CHECK(once.context.at(3).a_map == twice.context.at(3).a_map);
    CHECK(once.context.at(3).b_map == twice.context.at(3).b_map);
  }
}

TEST_CASE("basis output is padded extent / 4 for random extents") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<Index> ext(16, 257);
  const auto bb = rand_backbone<float>(rng, 2);
  const auto tower = rand_tower<float>(rng, 2, 2, 1, 0);
  auto basis = rand_basis<float>(rng, 2, 2);
  for (int trial = 0; trial < 200; ++trial) {
    const Index h = ext(rng), w = ext(rng);
    const auto padded = pad_input(TensorF(Shape{1, 3, h, w}, 0.5f), 4);
    const Index ph = padded.image.shape().h, pw = padded.image.shape().w;
    for (int l = 3; l < 7; ++l) {
      CHECK(2 * level_extent(ph, l + 1) >= level_extent(ph, l));
      CHECK(2 * level_extent(pw, l + 1) >= level_extent(pw, l));
    }
    if (trial % 20 == 0) {
      const auto pyr = backbone_stub(padded.image, bb);
      for (int l = 3; l <= 7; ++l) CHECK(pyr.levels.at(l).shape().h == level_extent(ph, l));
      basis.upsample = trial % 40 == 0 ? UpsampleMode::kBilinear : UpsampleMode::kNearest;
      const auto f = dr1basis(pyr, tower_top(pyr, tower), basis);
      CHECK(f.f.shape() == Shape{1, 2, ph / 4, pw / 4});
    }
  }
}

TEST_CASE("stride-8 emission skips the final upsample") {
  auto rng = oracle::rng(6);
  const auto pyr = backbone_stub(TensorF::uniform(Shape{1, 3, 48, 40}, rng), rand_backbone<float>(rng, 3));
  auto basis = rand_basis<float>(rng, 3, 4);
  basis.emit_stride = 8;
  const auto f = dr1basis(pyr, tower_top(pyr, rand_tower<float>(rng, 3, 4, 2, 1)), basis);
  CHECK(f.f.shape() == Shape{1, 4, 6, 5});
  CHECK(f.stride == 8);
}

TEST_CASE("zero tower and top give a zero basis") {
  auto rng = oracle::rng(7);
  const auto pyr = backbone_stub(TensorD::uniform(Shape{1, 3, 32, 32}, rng), rand_backbone<double>(rng, 4));
  auto tower = rand_tower<double>(rng, 4, 3, 2, 2);
  for (auto& k : tower.blocks) {
    k.weights = TensorD(k.weights.shape());
    k.bias = TensorD(k.bias->shape());
  }
  tower.top.weights = TensorD(tower.top.weights.shape());
  tower.top.bias = TensorD(tower.top.bias->shape());
  const auto ctx = tower_top(pyr, tower);
  const auto f = dr1basis(pyr, ctx, rand_basis<double>(rng, 4, 3));
  for (double v : f.f.data()) CHECK(v == 0.0);
}

TEST_CASE("1x1 pyramid reduces to a scalar chain") {
  FeaturePyramid<double> pyr;
  pyr.input_h = pyr.input_w = 4;
  ContextPyramid<double> ctx;
  BasisParams<double> basis;
  const double p[] = {0.5, -1.0, 2.0, 0.25, 1.5};
  const double lat[] = {1.0, 2.0, -0.5, 3.0, 0.75};
  const double dw[] = {0.5, 1.5, -1.0, 2.0, 0.2};
  const double a[] = {2.0, 0.5, 1.0, -1.0, 3.0};
  const double b[] = {1.0, -2.0, 0.5, 1.5, 0.1};
  auto centered = [](double v) {
    TensorD k(Shape{1, 1, 3, 3});
    k(0, 0, 1, 1) = v;
    return ConvKernel<double>{k, std::nullopt};
  };
  for (int l = 3; l <= 7; ++l) {
    const int i = l - 3;
    pyr.levels[l] = TensorD(Shape{1, 1, 1, 1}, p[i]);
    ctx.context[l] = {TensorD(Shape{1, 1, 1, 1}, a[i]), TensorD(Shape{1, 1, 1, 1}, b[i])};
    basis.lateral[l] = centered(lat[i]);
    basis.dr1[l] = DR1ConvLayer<double>{centered(dw[i])};
  }
  double f = 0;
  for (int i = 4; i >= 0; --i) f = b[i] * dw[i] * a[i] * (lat[i] * p[i] + f);
  const auto out = dr1basis(pyr, ctx, basis);
  CHECK(out.f.shape() == Shape{1, 1, 1, 1});
  CHECK(out.f[0] == doctest::Approx(f).epsilon(1e-14));
}

TEST_CASE("dr1basis finite-difference gradients") {
  auto rng = oracle::rng(8);
  const Index cp = 2, cb = 2;
  const auto pyr = backbone_stub(TensorD::uniform(Shape{1, 3, 32, 24}, rng), rand_backbone<double>(rng, cp));
  const auto ctx = tower_top(pyr, rand_tower<double>(rng, cp, cb, 1, 1));
  const auto basis = rand_basis<double>(rng, cp, cb);
  const auto probe_shape = dr1basis(pyr, ctx, basis).f.shape();
  const auto r = TensorD::uniform(probe_shape, rng);

  auto loss_of = [&](const FeaturePyramid<double>& p, const ContextPyramid<double>& c, const BasisParams<double>& bp) {
    return oracle::contract(dr1basis(p, c, bp).f, r);
  };

  Tape<double> t;
  std::map<int, Var> lv;
  ContextVars cv;
  for (const auto& [l, v] : pyr.levels) lv[l] = t.variable(v);
  for (const auto& [l, f] : ctx.context) {
    cv.a[l] = t.variable(f.a_map);
    cv.b[l] = t.variable(f.b_map);
  }
  const auto bv = put_basis(t, basis, true);
  const Var out = ad::dr1basis(t, lv, cv, bv, pyr.input_h, pyr.input_w);
  t.backward(out, r);

  for (int l : {3, 5, 7}) {
    auto fp = [&](const TensorD& x) { auto q = pyr; q.levels[l] = x; return loss_of(q, ctx, basis); };
    CHECK(oracle::grad_error(t.grad(lv[l]), oracle::numeric_gradient(fp, pyr.levels.at(l))) < 1e-3);
    auto fa = [&](const TensorD& x) { auto q = ctx; q.context[l].a_map = x; return loss_of(pyr, q, basis); };
    CHECK(oracle::grad_error(t.grad(cv.a[l]), oracle::numeric_gradient(fa, ctx.context.at(l).a_map)) < 1e-3);
    auto fb = [&](const TensorD& x) { auto q = ctx; q.context[l].b_map = x; return loss_of(pyr, q, basis); };
    CHECK(oracle::grad_error(t.grad(cv.b[l]), oracle::numeric_gradient(fb, ctx.context.at(l).b_map)) < 1e-3);
    auto fw = [&](const TensorD& x) { auto q = basis; q.dr1[l].kernel.weights = x; return loss_of(pyr, ctx, q); };
    CHECK(oracle::grad_error(t.grad(bv.dr1.at(l).weights), oracle::numeric_gradient(fw, basis.dr1.at(l).kernel.weights)) < 1e-3);
    auto fl = [&](const TensorD& x) { auto q = basis; q.lateral[l].bias = x; return loss_of(pyr, ctx, q); };
    CHECK(oracle::grad_error(t.grad(*bv.lateral.at(l).bias), oracle::numeric_gradient(fl, *basis.lateral.at(l).bias)) < 1e-3);
  }
}

TEST_CASE("dr1basis rejects incomplete pyramids") {
  auto rng = oracle::rng(9);
  auto pyr = backbone_stub(TensorF::uniform(Shape{1, 3, 32, 32}, rng), rand_backbone<float>(rng, 2));
  const auto ctx = tower_top(pyr, rand_tower<float>(rng, 2, 2, 1, 0));
  pyr.levels.erase(6);
  CHECK_THROWS_AS(dr1basis(pyr, ctx, rand_basis<float>(rng, 2, 2)), InvalidArgument);
}

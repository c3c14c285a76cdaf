#include <doctest.h>

#include "dr1mask/dr1conv.hpp"
#include "oracles.hpp"

using namespace dr1mask;

namespace {

template <typename Scalar>
struct Case {
  Tensor<Scalar> x;
  DynamicFactors<Scalar> f;
  DR1ConvLayer<Scalar> layer;
};

template <typename Scalar>
Case<Scalar> random_case(std::mt19937_64& rng, Shape s, Index k, bool bias) {
  Case<Scalar> c;
  c.x = Tensor<Scalar>::uniform(s, rng);
  c.f.a_map = Tensor<Scalar>::uniform(s, rng);
  c.f.b_map = Tensor<Scalar>::uniform(s, rng);
  c.layer.kernel.weights = Tensor<Scalar>::uniform(Shape{s.c, s.c, k, k}, rng);
  if (bias) c.layer.kernel.bias = Tensor<Scalar>::uniform(Shape{1, s.c, 1, 1}, rng);
  return c;
}

template <typename Scalar>
Matrix<Scalar> pointwise_matrix(const DR1ConvLayer<Scalar>& layer) {
  const Index c = layer.channels();
  Matrix<Scalar> w(c, c);
  for (Index i = 0; i < c; ++i)
    for (Index j = 0; j < c; ++j) w(i, j) = layer.kernel.weights(i, j, 0, 0);
  return w;
}

}  // namespace

TEST_CASE("unit factors reduce to the static convolution bit for bit") {
  auto rng = oracle::rng(1);
  auto c = random_case<float>(rng, Shape{2, 4, 6, 6}, 3, true);
  c.f.a_map = TensorF::ones(c.x.shape());
  c.f.b_map = TensorF::ones(c.x.shape());
  CHECK(dr1conv_forward(c.x, c.f, c.layer) == conv2d(c.x, c.layer.kernel));
}

TEST_CASE("identity 1x1 kernel collapses to x ∘ A ∘ B") {
  auto rng = oracle::rng(2);
  auto c = random_case<float>(rng, Shape{1, 3, 4, 5}, 1, false);
  TensorF eye(Shape{3, 3, 1, 1});
  for (Index i = 0; i < 3; ++i) eye(i, i, 0, 0) = 1.0f;
  c.layer.kernel.weights = eye;
  const TensorF y = dr1conv_forward(c.x, c.f, c.layer);
  CHECK(max_abs_difference(y, eltwise_mul(eltwise_mul(c.x, c.f.a_map), c.f.b_map)) < 1e-7);
}

TEST_CASE("pointwise oracle") {
  SUBCASE("scalar hand arithmetic") {
    const TensorD x(Shape{1, 1, 1, 1}, 7.0);
    const DynamicFactors<double> f{TensorD(Shape{1, 1, 1, 1}, 3.0), TensorD(Shape{1, 1, 1, 1}, 5.0)};
    Matrix<double> w(1, 1);
    w(0, 0) = 2.0;
    CHECK(oracle_rank1_pointwise(x, f, w)[0] == 210.0);
  }
  SUBCASE("unit factors give W x") {
    auto rng = oracle::rng(3);
    auto c = random_case<double>(rng, Shape{1, 4, 3, 3}, 1, false);
    c.f.a_map = TensorD::ones(c.x.shape());
    c.f.b_map = TensorD::ones(c.x.shape());
    CHECK(max_abs_difference(oracle_rank1_pointwise(c.x, c.f, pointwise_matrix(c.layer)),
                             conv2d(c.x, c.layer.kernel)) < 1e-12);
  }
  SUBCASE("fast path agrees with per-position materialization") {
    auto rng = oracle::rng(4);
    const auto c = random_case<float>(rng, Shape{2, 4, 6, 6}, 1, false);
    const TensorF fast = dr1conv_forward(c.x, c.f, c.layer);
    CHECK(max_abs_difference(fast, oracle_rank1_pointwise(c.x, c.f, pointwise_matrix(c.layer))) < 1e-6);
    CHECK(max_relative_error(fast, oracle_rank1_pointwise(c.x, c.f, pointwise_matrix(c.layer))) < 1e-5);
    const auto d = random_case<double>(rng, Shape{2, 8, 5, 4}, 1, false);
    CHECK(max_relative_error(dr1conv_forward(d.x, d.f, d.layer),
                             oracle_rank1_pointwise(d.x, d.f, pointwise_matrix(d.layer))) < 1e-10);
  }
}

TEST_CASE("general-kernel transcriptions") {
  auto rng = oracle::rng(5);
  SUBCASE("1x1: input and output modulation coincide") {
    const auto c = random_case<double>(rng, Shape{1, 3, 5, 5}, 1, true);
    CHECK(max_abs_difference(oracle_general_kernel(c.x, c.f, c.layer, KernelForm::kInputModulated),
                             oracle_general_kernel(c.x, c.f, c.layer, KernelForm::kOutputModulated)) < 1e-6);
  }
  SUBCASE("spatially constant B commutes with the tap sum") {
    auto c = random_case<double>(rng, Shape{1, 3, 6, 6}, 3, false);
    for (Index ch = 0; ch < 3; ++ch) {
      const double v = c.f.b_map(0, ch, 0, 0);
      for (Index h = 0; h < 6; ++h)
        for (Index w = 0; w < 6; ++w) c.f.b_map(0, ch, h, w) = v;
    }
    CHECK(max_abs_difference(oracle_general_kernel(c.x, c.f, c.layer, KernelForm::kInputModulated),
                             oracle_general_kernel(c.x, c.f, c.layer, KernelForm::kOutputModulated)) < 1e-6);
  }
  SUBCASE("3x3 fast path equals the output-modulated form") {
    const auto c = random_case<float>(rng, Shape{2, 4, 7, 6}, 3, true);
    CHECK(max_relative_error(dr1conv_forward(c.x, c.f, c.layer),
                             oracle_general_kernel(c.x, c.f, c.layer, KernelForm::kOutputModulated)) < 1e-5);
  }
  SUBCASE("3x3 forms genuinely differ for varying B") {
    const auto c = random_case<double>(rng, Shape{1, 2, 5, 5}, 3, false);
    CHECK(max_relative_error(oracle_general_kernel(c.x, c.f, c.layer, KernelForm::kInputModulated),
                             oracle_general_kernel(c.x, c.f, c.layer, KernelForm::kOutputModulated)) > 1e-3);
  }
  SUBCASE("materialized per-position kernels") {
    for (Index k : {1, 3, 5}) {
      const auto c = random_case<double>(rng, Shape{1, 3, 6, 5}, k, true);
      CHECK(max_relative_error(dr1conv_materialized(c.x, c.f, c.layer),
                               dr1conv_forward(c.x, c.f, c.layer)) < 1e-10);
    }
  }
}

TEST_CASE("rank-1 modulation matrices have vanishing 2x2 minors") {
  auto rng = oracle::rng(6);
  const auto c = random_case<double>(rng, Shape{1, 5, 4, 4}, 1, false);
  for (Index h = 0; h < 4; ++h)
    for (Index w = 0; w < 4; ++w) {
      Vector<double> a(5), b(5);
      for (Index i = 0; i < 5; ++i) {
        a[i] = c.f.a_map(0, i, h, w);
        b[i] = c.f.b_map(0, i, h, w);
      }
      const Matrix<double> m = b * a.transpose();
      for (Index i = 0; i < 5; ++i)
        for (Index j = i + 1; j < 5; ++j)
          for (Index k = 0; k < 5; ++k)
            for (Index l = k + 1; l < 5; ++l)
              CHECK(std::abs(m(i, k) * m(j, l) - m(i, l) * m(j, k)) <= 1e-12 * m.norm());
    }
}

TEST_CASE("trilinear in X, A and B") {
  auto rng = oracle::rng(7);
  const auto c = random_case<double>(rng, Shape{1, 3, 5, 5}, 3, false);
  const TensorD other = TensorD::uniform(c.x.shape(), rng);
  const double alpha = 0.6, beta = -1.7;
  auto combo = [&](const TensorD& p, const TensorD& q) { return add(scale(p, alpha), scale(q, beta)); };

  const TensorD y = dr1conv_forward(c.x, c.f, c.layer);
  const TensorD lin_x = dr1conv_forward(combo(c.x, other), c.f, c.layer);
  const TensorD ref_x = combo(y, dr1conv_forward(other, c.f, c.layer));
  CHECK(max_relative_error(lin_x, ref_x) < 1e-10);

  const DynamicFactors<double> fa{combo(c.f.a_map, other), c.f.b_map};
  const DynamicFactors<double> fa2{other, c.f.b_map};
  CHECK(max_relative_error(dr1conv_forward(c.x, fa, c.layer),
                           combo(y, dr1conv_forward(c.x, fa2, c.layer))) < 1e-10);

  const DynamicFactors<double> fb{c.f.a_map, combo(c.f.b_map, other)};
  const DynamicFactors<double> fb2{c.f.a_map, other};
  CHECK(max_relative_error(dr1conv_forward(c.x, fb, c.layer),
                           combo(y, dr1conv_forward(c.x, fb2, c.layer))) < 1e-10);
}

TEST_CASE("dr1conv rejects mismatched shapes and non-square layers") {
  auto rng = oracle::rng(8);
  auto c = random_case<float>(rng, Shape{1, 3, 4, 4}, 3, false);
  DynamicFactors<float> bad{TensorF(Shape{1, 3, 4, 5}), c.f.b_map};
  CHECK_THROWS_AS(dr1conv_forward(c.x, bad, c.layer), InvalidArgument);
  DR1ConvLayer<float> wide{ConvKernel<float>{TensorF(Shape{4, 3, 3, 3}), std::nullopt}};
  CHECK_THROWS_AS(dr1conv_forward(c.x, c.f, wide), InvalidArgument);
}

TEST_CASE("dr1conv backward") {
  auto rng = oracle::rng(9);
  SUBCASE("zero upstream gradient") {
    const auto c = random_case<double>(rng, Shape{1, 2, 4, 4}, 3, true);
    const auto g = dr1conv_backward(c.x, c.f, c.layer, TensorD(c.x.shape()));
    for (const TensorD* t : {&g.x, &g.a, &g.b, &g.weights, &*g.bias})
      for (double v : t->data()) CHECK(v == 0.0);
  }
  SUBCASE("unit factors reduce to plain convolution backward") {
    auto c = random_case<double>(rng, Shape{1, 2, 4, 4}, 3, true);
    c.f.a_map = TensorD::ones(c.x.shape());
    c.f.b_map = TensorD::ones(c.x.shape());
    const TensorD probe = TensorD::uniform(c.x.shape(), rng);
    const auto g = dr1conv_backward(c.x, c.f, c.layer, probe);
    const auto ref = conv2d_backward(c.x, c.layer.kernel, probe);
    CHECK(g.x == ref.x);
    CHECK(g.weights == ref.weights);
  }
  SUBCASE("central differences for all inputs") {
    for (Index k : {1, 3}) {
      const auto c = random_case<double>(rng, Shape{2, 3, 5, 4}, k, true);
      const TensorD probe = TensorD::uniform(c.x.shape(), rng);
      const auto g = dr1conv_backward(c.x, c.f, c.layer, probe);
      auto fx = [&](const TensorD& v) { return oracle::contract(dr1conv_forward(v, c.f, c.layer), probe); };
      auto fa = [&](const TensorD& v) {
        return oracle::contract(dr1conv_forward(c.x, DynamicFactors<double>{v, c.f.b_map}, c.layer), probe);
      };
      auto fb = [&](const TensorD& v) {
        return oracle::contract(dr1conv_forward(c.x, DynamicFactors<double>{c.f.a_map, v}, c.layer), probe);
      };
      auto fw = [&](const TensorD& v) {
        return oracle::contract(
            dr1conv_forward(c.x, c.f, DR1ConvLayer<double>{ConvKernel<double>{v, c.layer.kernel.bias}}), probe);
      };
      auto fbias = [&](const TensorD& v) {
        return oracle::contract(
            dr1conv_forward(c.x, c.f, DR1ConvLayer<double>{ConvKernel<double>{c.layer.kernel.weights, v}}), probe);
      };
      CHECK(oracle::grad_error(g.x, oracle::numeric_gradient(fx, c.x)) < 1e-4);
      CHECK(oracle::grad_error(g.a, oracle::numeric_gradient(fa, c.f.a_map)) < 1e-4);
      CHECK(oracle::grad_error(g.b, oracle::numeric_gradient(fb, c.f.b_map)) < 1e-4);
      CHECK(oracle::grad_error(g.weights, oracle::numeric_gradient(fw, c.layer.kernel.weights)) < 1e-4);
      CHECK(oracle::grad_error(*g.bias, oracle::numeric_gradient(fbias, *c.layer.kernel.bias)) < 1e-4);
    }
  }
}

TEST_CASE("FLOP model") {
  // fast = 2·1·1·1·1 + 4·1 = 6; naive = 2·1·3·1 = 6
  const auto tiny = flops_dr1conv(1, 1, 1, 1, 1);
  CHECK(tiny.fast == 6);
  CHECK(tiny.naive == 6);

  const auto mid = flops_dr1conv(32, 64, 64, 3, 3);
  CHECK(mid.naive > mid.fast);

  for (std::uint64_t k : {1, 3, 5}) {
    double prev = 0;
    for (std::uint64_t c = 1; c <= 256; ++c) {
      const auto f = flops_dr1conv(c, 16, 16, k, k);
      const double ratio = static_cast<double>(f.naive) / static_cast<double>(f.fast);
      CHECK(ratio >= prev);
      prev = ratio;
    }
  }
  // Fast-path FLOPs are linear in H·W and quadratic in C (up to the elementwise term).
  CHECK(flops_dr1conv(8, 32, 32, 3, 3).fast == 4 * flops_dr1conv(8, 16, 16, 3, 3).fast);
  const auto c1 = flops_dr1conv(16, 8, 8, 3, 3).fast - 4 * 16 * 64;
  const auto c2 = flops_dr1conv(32, 8, 8, 3, 3).fast - 4 * 32 * 64;
  CHECK(c2 == 4 * c1);
  CHECK_THROWS_AS(flops_dr1conv(0, 1, 1, 1, 1), InvalidArgument);
}

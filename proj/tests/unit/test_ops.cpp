#include <doctest.h>

#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "wnet/adam.hpp"
#include "wnet/gradcheck.hpp"
#include "wnet/kernels/dispatch.hpp"
#include "wnet/kernels/scalar.hpp"
#include "wnet/ops.hpp"

using namespace wnet;
using wnet::test::random_tensor;

namespace {

Var cst(Shape s, std::vector<float> v) { return Var::constant(Tensor(s, std::move(v))); }

Var undefined_bias() { return Var(); }

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(double(a[i]) - double(b[i])) <= tol);
}

// Direct bilinear oracle with half-pixel centers and edge clamping.
double bilinear_at(const Tensor& x, int c, int oy, int ox) {
  const Shape s = x.shape();
  auto sample = [&](double p, int n) {
    double src = (p + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > n - 1) i0 = n - 1;
    const int i1 = std::min(i0 + 1, n - 1);
    return std::tuple<int, int, double>{i0, i1, src - i0};
  };
  const auto [y0, y1, fy] = sample(oy, s.h);
  const auto [x0, x1, fx] = sample(ox, s.w);
  const double a = x.at(0, c, y0, x0), b = x.at(0, c, y0, x1);
  const double d = x.at(0, c, y1, x0), e = x.at(0, c, y1, x1);
  return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * d + fx * e);
}

GradCheckResult gradcheck_f32(const std::string& name, std::vector<Tensor> inputs,
                              std::function<Var(const std::vector<Var>&)> fn, std::uint64_t seed = 11) {
  GradCheckCase<float> c;
  c.name = name;
  c.inputs = std::move(inputs);
  c.differentiable.assign(c.inputs.size(), true);
  c.fn = std::move(fn);
  Rng rng(seed);
  return run_gradcheck(c, 1e-3, 1e-3, rng);
}

}  // namespace

TEST_CASE("conv2d identity kernel with padding reproduces the input") {
  const Var x = cst({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
  const Var w = cst({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
  const Var y = ops::conv2d(x, w, undefined_bias());
  CHECK(y.value() == x.value());
}

TEST_CASE("conv2d 1x1 scalar affine") {
  const Var x = cst({1, 1, 2, 2}, {1, 2, 3, 4});
  const Var y = ops::conv2d(x, cst({1, 1, 1, 1}, {2}), cst({1, 1, 1, 1}, {1}), 1, 0);
  CHECK(y.value() == Tensor({1, 1, 2, 2}, {3, 5, 7, 9}));
}

TEST_CASE("conv2d gradients on 2x4x8x8 input with 8x4x3x3 kernel") {
  const auto r = gradcheck_f32(
      "conv",
      {random_tensor({2, 4, 8, 8}, 1), random_tensor({8, 4, 3, 3}, 2), random_tensor({1, 8, 1, 1}, 3)},
      [](const std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2]); });
  CHECK(r.passed);
  CHECK(r.relative_error < 1e-3);
}

TEST_CASE("maxpool") {
  CHECK(ops::maxpool2x2(Var::constant(Tensor({1, 2, 4, 4}, 0.7f))).value() == Tensor({1, 2, 2, 2}, 0.7f));
  CHECK(ops::maxpool2x2(cst({1, 1, 2, 2}, {1, 2, 3, 4})).value() == Tensor({1, 1, 1, 1}, 4.0f));

  const Tensor x = random_tensor({1, 2, 6, 6}, 4);
  const Tensor y = ops::maxpool2x2(Var::constant(x)).value();
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        float m = -std::numeric_limits<float>::infinity();
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) m = std::max(m, x.at(0, c, 2 * i + dy, 2 * j + dx));
        CHECK(y.at(0, c, i, j) == m);
      }
    }
  }
  CHECK(
      gradcheck_f32("maxpool", {x}, [](const std::vector<Var>& v) { return ops::maxpool2x2(v[0]); }).passed);
}

TEST_CASE("maxpool ties route the gradient to the first row-major argmax") {
  Var x = Var::parameter(Tensor({1, 1, 2, 2}, 1.0f));
  ops::maxpool2x2(x).backward();
  CHECK(x.grad() == Tensor({1, 1, 2, 2}, {1, 0, 0, 0}));
}

TEST_CASE("bilinear upsample") {
  CHECK(ops::upsample_bilinear2x(Var::constant(Tensor({1, 3, 3, 5}, -0.25f))).value() ==
        Tensor({1, 3, 6, 10}, -0.25f));
  CHECK(ops::upsample_bilinear2x(cst({1, 1, 1, 1}, {5})).value() == Tensor({1, 1, 2, 2}, 5.0f));

  const Tensor x = random_tensor({1, 1, 3, 3}, 5);
  const Tensor y = ops::upsample_bilinear2x(Var::constant(x)).value();
  REQUIRE(y.shape() == Shape{1, 1, 6, 6});
  for (int oy = 0; oy < 6; ++oy)
    for (int ox = 0; ox < 6; ++ox)
      CHECK(y.at(0, 0, oy, ox) == doctest::Approx(bilinear_at(x, 0, oy, ox)).epsilon(1e-6));
}

TEST_CASE("global average pool") {
  CHECK(ops::global_avg_pool(Var::constant(Tensor({2, 3, 4, 4}, 1.5f))).value() ==
        Tensor({2, 3, 1, 1}, 1.5f));
  CHECK(ops::global_avg_pool(cst({1, 1, 2, 2}, {1, 2, 3, 4})).value().item() == 2.5f);
  const Tensor x = random_tensor({2, 3, 5, 7}, 6);
  const Tensor y = ops::global_avg_pool(Var::constant(x)).value();
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (int i = 0; i < 35; ++i) s += x.plane(n, c)[i];
      CHECK(y.at(n, c, 0, 0) == doctest::Approx(s / 35.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("fully connected") {
  const Tensor x = random_tensor({2, 3, 1, 1}, 7);
  Tensor eye({3, 3, 1, 1});
  for (int i = 0; i < 3; ++i) eye.at(i, i, 0, 0) = 1.0f;
  CHECK(ops::fully_connected(Var::constant(x), Var::constant(eye), Var::constant(Tensor({1, 3, 1, 1})))
            .value() == x);
  CHECK(ops::fully_connected(cst({1, 2, 1, 1}, {3, 4}), cst({1, 2, 1, 1}, {1, 1}), cst({1, 1, 1, 1}, {0}))
            .value()
            .item() == 7.0f);
  CHECK(gradcheck_f32(
            "fc",
            {random_tensor({2, 6, 1, 1}, 8), random_tensor({4, 6, 1, 1}, 9), random_tensor({1, 4, 1, 1}, 10)},
            [](const std::vector<Var>& v) { return ops::fully_connected(v[0], v[1], v[2]); })
            .passed);
}

TEST_CASE("prelu") {
  const Var slope = cst({1, 1, 1, 1}, {0.2f});
  CHECK(ops::prelu(cst({1, 1, 1, 1}, {3}), slope).value().item() == 3.0f);
  CHECK(ops::prelu(cst({1, 1, 1, 1}, {-1}), slope).value().item() == doctest::Approx(-0.2));
  CHECK(gradcheck_f32("prelu", {random_tensor({1, 3, 4, 4}, 11), Tensor({1, 1, 1, 1}, 0.2f)},
                      [](const std::vector<Var>& v) { return ops::prelu(v[0], v[1]); })
            .passed);
}

TEST_CASE("sigmoid") {
  CHECK(ops::sigmoid(cst({1, 1, 1, 1}, {0})).value().item() == 0.5f);
  const Tensor big = ops::sigmoid(cst({1, 1, 1, 2}, {80.0f, 1000.0f})).value();
  for (float v : big.data()) {
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(1.0));
  }
  CHECK(std::isfinite(ops::sigmoid(cst({1, 1, 1, 1}, {-1000.0f})).value().item()));

  Var x = Var::parameter(random_tensor({1, 2, 3, 3}, 12, -3, 3));
  ops::sigmoid(x).backward(Tensor(x.shape(), 1.0f));
  for (std::size_t i = 0; i < x.value().numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-double(x.value()[i])));
    CHECK(x.grad()[i] == doctest::Approx(s * (1 - s)).epsilon(1e-5));
  }
  CHECK(gradcheck_f32("sigmoid", {random_tensor({1, 2, 3, 3}, 13, -3, 3)}, [](const std::vector<Var>& v) {
          return ops::sigmoid(v[0]);
        }).passed);
}

TEST_CASE("mul and concat") {
  const Tensor a = random_tensor({1, 3, 4, 4}, 14);
  CHECK(ops::mul(Var::constant(a), Var::constant(Tensor({1, 3, 1, 1}, 1.0f))).value() == a);
  CHECK(ops::concat_channels(Var::constant(Tensor({1, 2, 4, 4})), Var::constant(Tensor({1, 3, 4, 4})))
            .shape() == Shape{1, 5, 4, 4});

  const Tensor g = random_tensor({1, 3, 1, 1}, 15);
  const Tensor y = ops::mul(Var::constant(a), Var::constant(g)).value();
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) CHECK(y.at(0, c, i, j) == a.at(0, c, i, j) * g.at(0, c, 0, 0));
  CHECK(gradcheck_f32("mul_bcast", {a, g}, [](const std::vector<Var>& v) {
          return ops::mul(v[0], v[1]);
        }).passed);
}

TEST_CASE("average pool") {
  CHECK(ops::avgpool2x2(Var::constant(Tensor({1, 1, 4, 6}, 3.0f))).value() == Tensor({1, 1, 2, 3}, 3.0f));
  CHECK(ops::avgpool2x2(cst({1, 1, 2, 2}, {1, 2, 3, 4})).value().item() == 2.5f);
  const Tensor x = random_tensor({2, 2, 4, 4}, 16);
  const Tensor y = ops::avgpool2x2(Var::constant(x)).value();
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
          const double m = (double(x.at(n, c, 2 * i, 2 * j)) + x.at(n, c, 2 * i, 2 * j + 1) +
                            x.at(n, c, 2 * i + 1, 2 * j) + x.at(n, c, 2 * i + 1, 2 * j + 1)) /
                           4.0;
          CHECK(y.at(n, c, i, j) == doctest::Approx(m).epsilon(1e-6));
        }
}

TEST_CASE("linear ops are linear") {
  const double alpha = 0.7, beta = -1.3;
  const Tensor x = random_tensor({1, 2, 4, 4}, 17), y = random_tensor({1, 2, 4, 4}, 18);
  const Tensor w = random_tensor({3, 2, 3, 3}, 19);
  Tensor mix(x.shape());
  for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = static_cast<float>(alpha * x[i] + beta * y[i]);
  const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&)>>> cases = {
      {"conv",
       [&](const Tensor& t) { return ops::conv2d(Var::constant(t), Var::constant(w), Var()).value(); }},
      {"upsample", [](const Tensor& t) { return ops::upsample_bilinear2x(Var::constant(t)).value(); }},
      {"avgpool", [](const Tensor& t) { return ops::avgpool2x2(Var::constant(t)).value(); }},
      {"add", [&](const Tensor& t) { return ops::add(Var::constant(t), Var::constant(t)).value(); }},
      {"concat",
       [](const Tensor& t) { return ops::concat_channels(Var::constant(t), Var::constant(t)).value(); }},
  };
  for (const auto& [name, f] : cases) {
    CAPTURE(name);
    const Tensor fx = f(x), fy = f(y), fm = f(mix);
    for (std::size_t i = 0; i < fm.numel(); ++i)
      CHECK(std::abs(fm[i] - (alpha * fx[i] + beta * fy[i])) < 1e-5);
  }
}

TEST_CASE("backward through an op chain gives gradients shaped like their parameters") {
  ParameterSet params;
  Var w1 = params.add("w1", random_tensor({4, 3, 3, 3}, 20));
  Var b1 = params.add("b1", Tensor({1, 4, 1, 1}));
  Var slope = params.add("slope", Tensor({1, 1, 1, 1}, 0.2f));
  Var fc = params.add("fc", random_tensor({4, 4, 1, 1}, 21));
  Var fcb = params.add("fcb", Tensor({1, 4, 1, 1}));
  Var w2 = params.add("w2", random_tensor({2, 8, 1, 1}, 22));
  const Var x = Var::constant(random_tensor({2, 3, 8, 8}, 23));
  Var h = ops::prelu(ops::conv2d(x, w1, b1), slope);
  Var g = ops::sigmoid(ops::fully_connected(ops::global_avg_pool(h), fc, fcb));
  h = ops::mul(h, g);
  Var u = ops::upsample_bilinear2x(ops::maxpool2x2(h));
  Var y = ops::conv2d(ops::concat_channels(u, h), w2, Var(), 1, 0);
  ops::l1_mean(y, Var::constant(Tensor(y.shape()))).backward();
  for (const auto& p : params.items()) {
    CAPTURE(p.name);
    REQUIRE(p.var.has_grad());
    CHECK(p.var.grad().shape() == p.var.shape());
  }
}

TEST_CASE("shape contracts are enforced") {
  CHECK_THROWS_AS(ops::add(Var::constant(Tensor({1, 1, 2, 2})), Var::constant(Tensor({1, 1, 2, 3}))),
                  ContractError);
  CHECK_THROWS_AS(ops::maxpool2x2(Var::constant(Tensor({1, 1, 3, 4}))), ContractError);
  CHECK_THROWS_AS(
      ops::conv2d(Var::constant(Tensor({1, 2, 4, 4})), Var::constant(Tensor({1, 3, 3, 3})), Var()),
      ContractError);
}

TEST_CASE("NoGradGuard stops graph recording") {
  Var x = Var::parameter(Tensor({1, 1, 2, 2}, 1.0f));
  NoGradGuard guard;
  const Var y = ops::add(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("Adam with zero gradient only advances the step count") {
  std::vector<Tensor> params{Tensor({1, 1, 1, 3}, {1, 2, 3})};
  const std::vector<Tensor> grads{Tensor({1, 1, 1, 3})};
  std::vector<AdamState> states{AdamState::zeros(params[0].shape())};
  const Tensor before = params[0];
  adam_step<float>(params, grads, states, 0.1);
  CHECK(params[0] == before);
  CHECK(states[0].first_moment == Tensor({1, 1, 1, 3}));
  CHECK(states[0].second_moment == Tensor({1, 1, 1, 3}));
  CHECK(states[0].step_count == 1);
}

TEST_CASE("Adam first step moves by lr times the gradient sign") {
  for (double g : {0.37, -5.0, 1e-3}) {
    std::vector<BasicTensor<double>> params{BasicTensor<double>::scalar(1.0)};
    const std::vector<BasicTensor<double>> grads{BasicTensor<double>::scalar(g)};
    std::vector<BasicAdamState<double>> states{BasicAdamState<double>::zeros(params[0].shape())};
    adam_step<double>(params, grads, states, 0.01);
    CHECK(params[0].item() == doctest::Approx(1.0 - 0.01 * (g > 0 ? 1 : -1)).epsilon(1e-6));
  }
}

TEST_CASE("Adam minimizes a quadratic like a reference scalar Adam") {
  std::vector<BasicTensor<double>> params{BasicTensor<double>::scalar(0.0)};
  std::vector<BasicAdamState<double>> states{BasicAdamState<double>::zeros(params[0].shape())};
  double x = 0, m = 0, v = 0;
  for (int t = 1; t <= 100; ++t) {
    const std::vector<BasicTensor<double>> grads{BasicTensor<double>::scalar(2.0 * (params[0].item() - 3.0))};
    adam_step<double>(params, grads, states, 0.1);
    const double g = 2.0 * (x - 3.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    CHECK(states[0].step_count == t);
  }
  CHECK(std::abs(params[0].item() - 3.0) < 0.05);
  CHECK(params[0].item() == doctest::Approx(x).epsilon(1e-9));
}

TEST_CASE("Adam rejects a NaN gradient without modifying anything") {
  ParameterSet ps;
  Var p = ps.add("p", Tensor({1, 1, 1, 2}, 1.0f));
  Adam adam(ps);
  p.grad() = Tensor({1, 1, 1, 2}, {0.5f, std::numeric_limits<float>::quiet_NaN()});
  CHECK_THROWS_AS(adam.step(0.1), NumericError);
  CHECK(p.value() == Tensor({1, 1, 1, 2}, 1.0f));
  CHECK(adam.states()[0].step_count == 0);
}

TEST_CASE("vector kernels match the scalar reference") {
  const auto& ref = kernels::scalar_table();
  const auto tables = kernels::available_tables();
  CHECK(tables.front() == &ref);
  for (const auto* t : tables) {
    CAPTURE(t->name);
    for (std::size_t n : {0u, 1u, 3u, 7u, 8u, 9u, 15u, 16u, 17u, 33u, 100u, 1027u}) {
      CAPTURE(n);
      const Tensor xa = random_tensor({1, 1, 1, static_cast<int>(n + 2)}, 100 + n);
      const Tensor xb = random_tensor({1, 1, 1, static_cast<int>(n + 2)}, 200 + n);
      const float* x = xa.raw();
      const float* y0 = xb.raw();
      std::vector<float> r(y0, y0 + n), s(y0, y0 + n);
      const double tol = 1e-5 * (1.0 + std::sqrt(double(n)));

      ref.axpy(n, 0.3f, x, r.data());
      t->axpy(n, 0.3f, x, s.data());
      for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(r[i] - s[i]) <= tol);

      CHECK(std::abs(ref.dot(n, x, y0) - t->dot(n, x, y0)) <= tol);
      CHECK(std::abs(ref.sum(n, x) - t->sum(n, x)) <= tol);

      r.assign(y0, y0 + n);
      s.assign(y0, y0 + n);
      ref.fma3(n, 0.2f, -0.5f, 0.7f, x, r.data());
      t->fma3(n, 0.2f, -0.5f, 0.7f, x, s.data());
      for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(r[i] - s[i]) <= tol);

      float ra[3] = {0.1f, 0.2f, 0.3f}, sa[3] = {0.1f, 0.2f, 0.3f};
      ref.dot3(n, y0, x, ra);
      t->dot3(n, y0, x, sa);
      for (int k = 0; k < 3; ++k) CHECK(std::abs(ra[k] - sa[k]) <= tol);

      r.assign(y0, y0 + n);
      s.assign(y0, y0 + n);
      ref.add(n, x, r.data());
      t->add(n, x, s.data());
      CHECK(r == s);

      ref.mul(n, x, y0, r.data());
      t->mul(n, x, y0, s.data());
      CHECK(r == s);

      ref.prelu(n, 0.2f, x, r.data());
      t->prelu(n, 0.2f, x, s.data());
      CHECK(r == s);
    }
  }
}

TEST_CASE("conv2d agrees across kernel variants") {
  const std::string original = kernels::active().name;
  const Tensor x = random_tensor({2, 5, 9, 13}, 30), w = random_tensor({6, 5, 3, 3}, 31);
  const Tensor b = random_tensor({1, 6, 1, 1}, 32);
  REQUIRE(kernels::select("scalar"));
  Var xs = Var::parameter(x), ws = Var::parameter(w);
  const Var ys = ops::conv2d(xs, ws, Var::constant(b));
  ys.backward(random_tensor(ys.shape(), 33));
  for (const auto* t : kernels::available_tables()) {
    CAPTURE(t->name);
    REQUIRE(kernels::select(t->name));
    Var xv = Var::parameter(x), wv = Var::parameter(w);
    const Var yv = ops::conv2d(xv, wv, Var::constant(b));
    yv.backward(random_tensor(yv.shape(), 33));
    check_close(yv.value(), ys.value(), 1e-4);
    check_close(xv.grad(), xs.grad(), 1e-4);
    check_close(wv.grad(), ws.grad(), 1e-3);
  }
  kernels::select(original);
}

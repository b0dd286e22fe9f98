#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "wnet/metrics.hpp"

using namespace wnet;
using wnet::test::random_tensor;

namespace {

// Scalar-loop references, written independently of the library.
double ref_psnr(const Tensor& a, const Tensor& b) {
  long double se = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const long double d = static_cast<long double>(a[i]) - b[i];
    se += d * d;
  }
  return static_cast<double>(10.0L * std::log10(1.0L / (se / a.numel())));
}

double ref_ssim(const Tensor& a, const Tensor& b) {
  const Shape s = a.shape();
  const double c1 = (0.01 * 1.0) * (0.01 * 1.0), c2 = (0.03 * 1.0) * (0.03 * 1.0);
  double g[11][11], gsum = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
      gsum += g[i][j];
    }
  double total = 0;
  int count = 0;
  for (int n = 0; n < s.n; ++n) {
    auto y = [&](const Tensor& t, int r, int c) {
      return 0.299 * t.at(n, 0, r, c) + 0.587 * t.at(n, 1, r, c) + 0.114 * t.at(n, 2, r, c);
    };
    for (int r0 = 0; r0 + 11 <= s.h; ++r0)
      for (int c0 = 0; c0 + 11 <= s.w; ++c0) {
        double mx = 0, my = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const double w = g[i][j] / gsum;
            mx += w * y(a, r0 + i, c0 + j);
            my += w * y(b, r0 + i, c0 + j);
          }
        double vx = 0, vy = 0, cxy = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const double w = g[i][j] / gsum;
            const double dx = y(a, r0 + i, c0 + j) - mx, dy = y(b, r0 + i, c0 + j) - my;
            vx += w * dx * dx;
            vy += w * dy * dy;
            cxy += w * dx * dy;
          }
        total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
  }
  return total / count;
}

}  // namespace

TEST_CASE("metrics match brute-force references on random 16x16 images") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Tensor a = random_tensor({1, 3, 16, 16}, seed, 0, 1);
    const Tensor b = random_tensor({1, 3, 16, 16}, seed + 50, 0, 1);
    Tensor near = a;
    Rng rng(seed + 100);
    for (auto& v : near.data()) v = std::clamp(v + static_cast<float>(0.05 * rng.normal()), 0.0f, 1.0f);
    for (const Tensor* other : {&b, static_cast<const Tensor*>(&near)}) {
      CAPTURE(seed);
      CHECK(std::abs(psnr(a, *other) - ref_psnr(a, *other)) < 1e-6);
      CHECK(std::abs(ssim(a, *other) - ref_ssim(a, *other)) < 1e-6);
    }
  }
  const Tensor batch_a = random_tensor({2, 3, 16, 16}, 7, 0, 1),
               batch_b = random_tensor({2, 3, 16, 16}, 8, 0, 1);
  CHECK(std::abs(ssim(batch_a, batch_b) - ref_ssim(batch_a, batch_b)) < 1e-6);
}

TEST_CASE("identical images") {
  const Tensor a = random_tensor({2, 3, 16, 16}, 9, 0, 1);
  CHECK(ssim(a, a) == 1.0);
  CHECK(psnr(a, a) == kPsnrIdentical);
  CHECK(std::isinf(psnr(a, a)));
}

TEST_CASE("PSNR arithmetic") {
  Tensor zero({1, 3, 8, 8}), tenth({1, 3, 8, 8}, 0.1f);
  CHECK(psnr(tenth, zero) == doctest::Approx(20.0).epsilon(1e-6));
  CHECK(mse(tenth, zero) == doctest::Approx(0.01).epsilon(1e-6));

  // Dyadic values keep x + c and the squared error exact.
  Tensor x({1, 3, 8, 8});
  Rng rng(10);
  for (auto& v : x.data()) v = static_cast<float>(rng.below(64)) / 128.0f;
  for (double c : {0.5, 0.25, 0.125, 0.375, 0.0625}) {
    Tensor shifted = x;
    for (auto& v : shifted.data()) v += static_cast<float>(c);
    CAPTURE(c);
    CHECK(psnr(x, shifted) == 10.0 * std::log10(1.0 / (c * c)));
  }
  CHECK(psnr(tenth, zero, 255.0) > psnr(tenth, zero));
}

TEST_CASE("SSIM input contract") {
  CHECK_THROWS_AS(ssim(Tensor({1, 3, 10, 16}), Tensor({1, 3, 10, 16})), ContractError);
  CHECK_THROWS_AS(ssim(Tensor({1, 1, 16, 16}), Tensor({1, 1, 16, 16})), ContractError);
  const auto w = ssim_window();
  REQUIRE(w.size() == 121);
  double s = 0;
  for (double v : w) s += v;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w[60] > w[59]);
}

TEST_CASE("ensemble average") {
  const Tensor p = random_tensor({1, 3, 8, 8}, 11, 0, 1);
  const std::vector<Tensor> one{p};
  CHECK(ensemble_average(one) == p);
  const std::vector<Tensor> copies{p, p, p};
  CHECK(ensemble_average(copies) == p);

  // x in [1, 2] keeps 2 - x exact.
  const Tensor x = random_tensor({1, 3, 8, 8}, 12, 1, 2);
  Tensor mirror = x;
  for (auto& v : mirror.data()) v = 2.0f - v;
  const std::vector<Tensor> pair{x, mirror};
  CHECK(ensemble_average(pair) == Tensor(x.shape(), 1.0f));

  const std::vector<Tensor> mismatch{p, Tensor({1, 3, 8, 4})};
  CHECK_THROWS_AS(ensemble_average(mismatch), ContractError);
  CHECK_THROWS_AS(ensemble_average(std::vector<Tensor>{}), ContractError);
}

TEST_CASE("averaging three noisy predictions divides the noise power by three") {
  const double sigma = 0.1;
  const Tensor truth = random_tensor({1, 3, 64, 64}, 13, 0.2, 0.8);
  Rng rng(14);
  std::vector<Tensor> preds;
  for (int k = 0; k < 3; ++k) {
    Tensor t = truth;
    for (auto& v : t.data()) v += static_cast<float>(sigma * rng.normal());
    preds.push_back(std::move(t));
  }
  const double m = mse(ensemble_average(preds), truth);
  CHECK(std::abs(m / (sigma * sigma / 3.0) - 1.0) < 0.2);
}

TEST_CASE("mean absolute Laplacian") {
  Tensor img({1, 1, 5, 5});
  img.at(0, 0, 2, 2) = 1.0f;
  // Interior pixels: the spike scores 4, its four neighbours 1 each.
  CHECK(mean_abs_laplacian(img) == doctest::Approx(8.0 / 9.0));
  CHECK(mean_abs_laplacian(img, 2) == doctest::Approx(4.0));
  CHECK(mean_abs_laplacian(Tensor({1, 3, 6, 6}, 0.3f)) == 0.0);
  CHECK_THROWS_AS(mean_abs_laplacian(img, 0), ContractError);
  CHECK_THROWS_AS(mean_abs_laplacian(img, 3), ContractError);
}

TEST_CASE("clamp and luma") {
  const Tensor t({1, 3, 1, 2}, {-0.5f, 0.5f, 2.0f, 0.25f, 1.0f, 0.0f});
  CHECK(clamp_unit(t) == Tensor({1, 3, 1, 2}, {0.0f, 0.5f, 1.0f, 0.25f, 1.0f, 0.0f}));
  const auto y = luma(Tensor({1, 3, 1, 1}, {1.0f, 1.0f, 1.0f}));
  CHECK(y[0][0] == doctest::Approx(1.0));
}

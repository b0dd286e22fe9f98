#include "wnet/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace wnet {
namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  require(a.shape() == b.shape(),
          std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

}  // namespace

double mse(const Tensor& pred, const Tensor& target) {
  require_same(pred, target, "mse");
  require(pred.numel() > 0, "mse: empty tensors");
  double sum = 0.0;
  const auto& a = pred.data();
  const auto& b = target.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    sum += d * d;
  }
  return sum / static_cast<double>(a.size());
}

double psnr(const Tensor& pred, const Tensor& target, double peak) {
  require(peak > 0.0, "psnr: peak must be positive");
  const double e = mse(pred, target);
  if (e == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(peak * peak / e);
}

std::vector<std::vector<double>> luma(const Tensor& rgb) {
  const Shape s = rgb.shape();
  require(s.c == 3, "luma: expected 3 channels, got " + s.str());
  std::vector<std::vector<double>> out(static_cast<std::size_t>(s.n), std::vector<double>(s.plane()));
  for (int n = 0; n < s.n; ++n) {
    const float* r = rgb.plane(n, 0);
    const float* g = rgb.plane(n, 1);
    const float* b = rgb.plane(n, 2);
    for (std::size_t i = 0; i < s.plane(); ++i) out[n][i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  }
  return out;
}

std::vector<double> ssim_window() {
  std::vector<double> w(kWindow * kWindow);
  double total = 0.0;
  const int half = kWindow / 2;
  for (int y = 0; y < kWindow; ++y) {
    for (int x = 0; x < kWindow; ++x) {
      const double d2 = (y - half) * (y - half) + (x - half) * (x - half);
      w[y * kWindow + x] = std::exp(-d2 / (2.0 * kSigma * kSigma));
      total += w[y * kWindow + x];
    }
  }
  for (auto& v : w) v /= total;
  return w;
}

double ssim(const Tensor& pred, const Tensor& target) {
  require_same(pred, target, "ssim");
  const Shape s = pred.shape();
  require(s.h >= kWindow && s.w >= kWindow, "ssim: images must be at least 11x11, got " + s.str());
  const auto w = ssim_window();
  const auto lx = luma(pred);
  const auto ly = luma(target);
  const int oh = s.h - kWindow + 1, ow = s.w - kWindow + 1;
  double sum = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const double* x = lx[n].data();
    const double* y = ly[n].data();
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double mx = 0, my = 0, exx = 0, eyy = 0, exy = 0;
        for (int ky = 0; ky < kWindow; ++ky) {
          for (int kx = 0; kx < kWindow; ++kx) {
            const double wk = w[ky * kWindow + kx];
            const std::size_t i = static_cast<std::size_t>(oy + ky) * s.w + (ox + kx);
            mx += wk * x[i];
            my += wk * y[i];
            exx += wk * (x[i] * x[i]);
            eyy += wk * (y[i] * y[i]);
            exy += wk * (x[i] * y[i]);
          }
        }
        // Both factors are formed symmetrically so x == y gives num == den.
        const double mxy = mx * my;
        const double sxy = exy - mxy;
        const double sxx = exx - mx * mx;
        const double syy = eyy - my * my;
        const double num = (2.0 * mxy + kC1) * (2.0 * sxy + kC2);
        const double den = (mx * mx + my * my + kC1) * (sxx + syy + kC2);
        sum += num / den;
      }
    }
  }
  return sum / (static_cast<double>(s.n) * oh * ow);
}

Tensor ensemble_average(std::span<const Tensor> predictions) {
  require(!predictions.empty(), "ensemble_average: no predictions");
  const Shape s = predictions.front().shape();
  for (std::size_t k = 1; k < predictions.size(); ++k) {
    require(predictions[k].shape() == s, "ensemble_average: prediction " + std::to_string(k) + " has shape " +
                                             predictions[k].shape().str() + ", expected " + s.str());
  }
  std::vector<double> acc(s.numel(), 0.0);
  for (const auto& p : predictions) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p.data()[i];
  }
  Tensor out(s);
  const double k = static_cast<double>(predictions.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.data()[i] = static_cast<float>(acc[i] / k);
  return out;
}

double mean_abs_laplacian(const Tensor& img, int border) {
  const Shape s = img.shape();
  require(border >= 1, "mean_abs_laplacian: border must be at least 1");
  require(s.h > 2 * border && s.w > 2 * border, "mean_abs_laplacian: image " + s.str() + " has no interior");
  double sum = 0.0;
  std::size_t count = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = border; y < s.h - border; ++y) {
        for (int x = border; x < s.w - border; ++x) {
          const double lap = static_cast<double>(img.at(n, c, y - 1, x)) + img.at(n, c, y + 1, x) +
                             img.at(n, c, y, x - 1) + img.at(n, c, y, x + 1) - 4.0 * img.at(n, c, y, x);
          sum += std::abs(lap);
          ++count;
        }
      }
    }
  }
  return sum / static_cast<double>(count);
}

Tensor clamp_unit(const Tensor& t) {
  Tensor out = t;
  for (auto& v : out.data()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

}  // namespace wnet

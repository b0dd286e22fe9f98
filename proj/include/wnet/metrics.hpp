#pragma once

#include <limits>
#include <span>
#include <vector>

#include "wnet/tensor.hpp"

namespace wnet {

/// PSNR of identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// Mean squared error over all elements, accumulated in double.
double mse(const Tensor& pred, const Tensor& target);

/// 10 log10(peak^2 / MSE); kPsnrIdentical when MSE is zero.
double psnr(const Tensor& pred, const Tensor& target, double peak = 1.0);

/// Luma 0.299 R + 0.587 G + 0.114 B of an (N, 3, H, W) tensor, in double.
/// Result is indexed [n][y * W + x].
std::vector<std::vector<double>> luma(const Tensor& rgb);

/// Normalized 11x11 Gaussian window with sigma 1.5, row-major.
std::vector<double> ssim_window();

/// Mean local SSIM over every valid 11x11 window position of every image,
/// on luma, with K1 = 0.01, K2 = 0.03 and dynamic range 1. Images must be
/// RGB and at least 11x11. Identical inputs give exactly 1.
double ssim(const Tensor& pred, const Tensor& target);

/// Pixelwise arithmetic mean of same-shaped predictions, in double.
Tensor ensemble_average(std::span<const Tensor> predictions);

/// Mean |4-neighbour Laplacian| of every channel over pixels at least
/// `border` (>= 1) pixels away from the image edge.
double mean_abs_laplacian(const Tensor& img, int border = 1);

/// Elementwise clamp to [0, 1].
Tensor clamp_unit(const Tensor& t);

}  // namespace wnet

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wnet/autograd.hpp"
#include "wnet/rng.hpp"

namespace wnet {

/// Central finite-difference check of one function's gradients.
///
/// The function output y is reduced to the scalar sum_i r_i * y_i with a
/// fixed random projection r (accumulated in long double). Analytic
/// gradients come from backward(r); numeric ones from
/// (f(x + eps) - f(x - eps)) / (x_plus - x_minus) using the perturbed values
/// actually representable in S. The reported error is the norm-wise
/// relative error ||g_a - g_n|| / max(||g_a||, ||g_n||) over every checked
/// element of every differentiable input. Elements with a kink inside the
/// perturbation (detected from one-sided slopes at eps and eps/2) are
/// skipped and counted; a case fails if more than a quarter are skipped.
template <class S>
struct GradCheckCase {
  std::string name;
  std::vector<BasicTensor<S>> inputs;
  std::vector<bool> differentiable;
  std::function<BasicVar<S>(const std::vector<BasicVar<S>>&)> fn;
  /// Optional 64-bit evaluation of the same function. When set, the
  /// difference quotients use it on the inputs widened to double, so the
  /// analytic gradient is compared against an oracle free of S roundoff.
  std::function<BasicVar<double>(const std::vector<BasicVar<double>>&)> reference;
};

struct GradCheckResult {
  std::string name;
  std::string precision;  ///< "f32" or "f64"
  double relative_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked_elements = 0;
  std::size_t skipped_elements = 0;
  bool passed = false;
};

template <class S>
GradCheckResult run_gradcheck(const GradCheckCase<S>& c, double eps, double tolerance, Rng& rng,
                              std::size_t max_elements_per_input = 256);

/// Every differentiable op and loss at the given precision, seeded inputs.
/// 32-bit: eps 1e-3, tolerance 1e-3, 64-bit reference quotients.
/// 64-bit: eps 1e-6, tolerance 1e-6.
std::vector<GradCheckResult> gradcheck_suite_f32(std::uint64_t seed);
std::vector<GradCheckResult> gradcheck_suite_f64(std::uint64_t seed);

/// Both precisions.
std::vector<GradCheckResult> gradcheck_suite(std::uint64_t seed);

}  // namespace wnet

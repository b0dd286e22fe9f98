
#include "wnet/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <type_traits>

#include "wnet/losses.hpp"
#include "wnet/ops.hpp"

namespace wnet {
namespace {

template <class S>
long double project(const BasicTensor<S>& y, const BasicTensor<S>& r) {
  long double acc = 0.0L;
  for (std::size_t i = 0; i < y.numel(); ++i) acc += static_cast<long double>(y[i]) * r[i];
  return acc;
}

template <class S>
BasicTensor<S> uniform(Shape s, Rng& rng, double lo, double hi) {
  BasicTensor<S> t(s);
  for (auto& v : t.data()) v = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

// Values with |x| >= margin, so perturbations never cross a kink at 0.
template <class S>
BasicTensor<S> away_from_zero(Shape s, Rng& rng, double margin) {
  BasicTensor<S> t(s);
  for (auto& v : t.data()) {
    const double u = rng.uniform(-1.0, 1.0);
    v = static_cast<S>((u < 0 ? -1.0 : 1.0) * (margin + std::abs(u) * (1.0 - margin)));
  }
  return t;
}

// Pairwise separated values (spacing 0.05) in shuffled order; no ties in any window.
template <class S>
BasicTensor<S> distinct(Shape s, Rng& rng) {
  BasicTensor<S> t(s);
  std::vector<std::size_t> order(t.numel());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  for (std::size_t i = 0; i < order.size(); ++i) t[order[i]] = static_cast<S>(0.05 * i - 1.0);
  return t;
}

template <class S>
BasicTensor<S> clamp_safe(Shape s, Rng& rng) {
  BasicTensor<S> t(s);
  for (auto& v : t.data()) {
    double x;
    do {
      x = rng.uniform(-0.5, 1.5);
    } while (std::abs(x) < 0.05 || std::abs(x - 1.0) < 0.05);
    v = static_cast<S>(x);
  }
  return t;
}

template <class S>
std::vector<GradCheckCase<S>> make_cases(Rng& rng) {
  using V = BasicVar<S>;
  using Vs = std::vector<V>;
  std::vector<GradCheckCase<S>> cases;
  auto add = [&](std::string name, std::vector<BasicTensor<S>> inputs, std::vector<bool> differentiable,
                 std::function<V(const Vs&)> fn) {
    GradCheckCase<S> c;
    c.name = std::move(name);
    c.inputs = std::move(inputs);
    c.differentiable = std::move(differentiable);
    c.fn = std::move(fn);
    cases.push_back(std::move(c));
  };

  add("conv2d_3x3",
      {uniform<S>({2, 4, 8, 8}, rng, -1, 1), uniform<S>({8, 4, 3, 3}, rng, -0.5, 0.5),
       uniform<S>({1, 8, 1, 1}, rng, -0.5, 0.5)},
      {true, true, true}, [](const Vs& v) { return ops::conv2d(v[0], v[1], v[2], 1, 1); });
  add("conv2d_1x1",
      {uniform<S>({2, 3, 5, 5}, rng, -1, 1), uniform<S>({4, 3, 1, 1}, rng, -0.5, 0.5),
       uniform<S>({1, 4, 1, 1}, rng, -0.5, 0.5)},
      {true, true, true}, [](const Vs& v) { return ops::conv2d(v[0], v[1], v[2], 1, 0); });
  add("conv2d_3x3_stride2",
      {uniform<S>({1, 2, 6, 6}, rng, -1, 1), uniform<S>({3, 2, 3, 3}, rng, -0.5, 0.5),
       uniform<S>({1, 3, 1, 1}, rng, -0.5, 0.5)},
      {true, true, true}, [](const Vs& v) { return ops::conv2d(v[0], v[1], v[2], 2, 1); });
  add("maxpool2x2", {distinct<S>({1, 2, 6, 6}, rng)}, {true},
      [](const Vs& v) { return ops::maxpool2x2(v[0]); });
  add("avgpool2x2", {uniform<S>({1, 2, 6, 6}, rng, -1, 1)}, {true},
      [](const Vs& v) { return ops::avgpool2x2(v[0]); });
  add("upsample_bilinear2x", {uniform<S>({1, 2, 3, 3}, rng, -1, 1)}, {true},
      [](const Vs& v) { return ops::upsample_bilinear2x(v[0]); });
  add("global_avg_pool", {uniform<S>({2, 3, 4, 4}, rng, -1, 1)}, {true},
      [](const Vs& v) { return ops::global_avg_pool(v[0]); });
  add("fully_connected",
      {uniform<S>({2, 6, 1, 1}, rng, -1, 1), uniform<S>({4, 6, 1, 1}, rng, -0.5, 0.5),
       uniform<S>({1, 4, 1, 1}, rng, -0.5, 0.5)},
      {true, true, true}, [](const Vs& v) { return ops::fully_connected(v[0], v[1], v[2]); });
  add("prelu", {away_from_zero<S>({2, 3, 4, 4}, rng, 0.05), BasicTensor<S>::scalar(S(0.2))}, {true, true},
      [](const Vs& v) { return ops::prelu(v[0], v[1]); });
  add("relu", {away_from_zero<S>({2, 3, 4, 4}, rng, 0.05)}, {true},
      [](const Vs& v) { return ops::relu(v[0]); });
  add("sigmoid", {uniform<S>({2, 3, 4, 4}, rng, -4, 4)}, {true},
      [](const Vs& v) { return ops::sigmoid(v[0]); });
  add("add", {uniform<S>({1, 3, 4, 4}, rng, -1, 1), uniform<S>({1, 3, 4, 4}, rng, -1, 1)}, {true, true},
      [](const Vs& v) { return ops::add(v[0], v[1]); });
  add("mul", {uniform<S>({1, 3, 4, 4}, rng, -1, 1), uniform<S>({1, 3, 4, 4}, rng, -1, 1)}, {true, true},
      [](const Vs& v) { return ops::mul(v[0], v[1]); });
  add("mul_broadcast", {uniform<S>({1, 3, 4, 4}, rng, -1, 1), uniform<S>({1, 3, 1, 1}, rng, -1, 1)},
      {true, true}, [](const Vs& v) { return ops::mul(v[0], v[1]); });
  add("concat_channels", {uniform<S>({1, 2, 4, 4}, rng, -1, 1), uniform<S>({1, 3, 4, 4}, rng, -1, 1)},
      {true, true}, [](const Vs& v) { return ops::concat_channels(v[0], v[1]); });
  add("clamp", {clamp_safe<S>({1, 3, 4, 4}, rng)}, {true},
      [](const Vs& v) { return ops::clamp(v[0], S(0), S(1)); });
  add("channel_affine", {uniform<S>({2, 3, 4, 4}, rng, -1, 1)}, {true}, [](const Vs& v) {
    return ops::channel_affine<S>(v[0], {S(2), S(-0.5), S(0.25)}, {S(0.1), S(0), S(-1)});
  });
  {
    auto a = uniform<S>({2, 3, 4, 4}, rng, -1, 1);
    auto b = a;
    const auto offset = away_from_zero<S>(a.shape(), rng, 0.05);
    for (std::size_t i = 0; i < b.numel(); ++i) b[i] += offset[i];
    add("l1_mean", {a, b}, {true, true}, [](const Vs& v) { return ops::l1_mean(v[0], v[1]); });
    add("pixel_loss", {a, b}, {true, true}, [](const Vs& v) { return pixel_loss(v[0], v[1]); });
  }
  add("cosine_distance", {uniform<S>({2, 3, 4, 4}, rng, 0.05, 1), uniform<S>({2, 3, 4, 4}, rng, 0.05, 1)},
      {true, true}, [](const Vs& v) { return ops::cosine_distance(v[0], v[1], S(1e-6)); });
  add("color_loss", {uniform<S>({1, 3, 4, 4}, rng, 0.05, 1), uniform<S>({1, 3, 4, 4}, rng, 0.05, 1)},
      {true, true}, [](const Vs& v) { return color_loss(v[0], v[1], S(1e-6)); });

  auto fx = std::make_shared<BasicFeatureExtractor<S>>(
      FeatureExtractor::random(7, 16, FeatureTap::relu5_1).cast<S>());
  const auto p8 = uniform<S>({1, 3, 8, 8}, rng, 0.1, 0.9);
  const auto p16 = uniform<S>({1, 3, 16, 16}, rng, 0.1, 0.9);
  add("feature_loss_relu4_1", {p8, uniform<S>({1, 3, 8, 8}, rng, 0.1, 0.9)}, {true, false},
      [fx](const Vs& v) { return feature_loss(v[0], v[1], *fx, FeatureTap::relu4_1); });
  add("feature_loss_relu5_1", {p16, uniform<S>({1, 3, 16, 16}, rng, 0.1, 0.9)}, {true, false},
      [fx](const Vs& v) { return feature_loss(v[0], v[1], *fx, FeatureTap::relu5_1); });
  add("total_loss", {p8, uniform<S>({1, 3, 8, 8}, rng, 0.1, 0.9)}, {true, false}, [fx](const Vs& v) {
    LossConfig cfg;
    cfg.use_pixel = cfg.use_feat = cfg.use_color = true;
    return total_loss(v[0], v[1], cfg, fx.get()).total;
  });
  return cases;
}

// Finite-difference side of a check, evaluated in T.
template <class T>
struct Oracle {
  std::vector<BasicTensor<T>> inputs;
  std::function<BasicVar<T>(const std::vector<BasicVar<T>>&)> fn;
  BasicTensor<T> r;

  long double eval(std::size_t i, std::size_t k, T x) const {
    NoGradGuard guard;
    std::vector<BasicVar<T>> probe;
    for (std::size_t j = 0; j < inputs.size(); ++j) probe.push_back(BasicVar<T>::constant(inputs[j]));
    probe[i].mutable_value()[k] = x;
    return project(fn(probe).value(), r);
  }
  long double eval0() const {
    NoGradGuard guard;
    std::vector<BasicVar<T>> probe;
    for (const auto& t : inputs) probe.push_back(BasicVar<T>::constant(t));
    return project(fn(probe).value(), r);
  }
};

// Roundoff level of the projected objective near the inputs. A few
// elements are nudged by 4-ulp steps, where the true change is negligible;
// the largest residual from a straight line through the five values is the
// noise estimate. Floored at one ulp of f0.
template <class T>
long double objective_noise(const Oracle<T>& o, const std::vector<bool>& differentiable, long double f0,
                            Rng& rng) {
  constexpr T inf = std::numeric_limits<T>::infinity();
  long double noise = std::numeric_limits<T>::epsilon() * std::max(std::abs(f0), 1e-30L);
  for (std::size_t i = 0; i < o.inputs.size(); ++i) {
    if (!differentiable[i]) continue;
    for (int s = 0; s < 4; ++s) {
      const std::size_t k = rng.below(o.inputs[i].numel());
      const T x0 = o.inputs[i][k];
      std::array<long double, 5> xs{}, fs{};
      for (int m = -2; m <= 2; ++m) {
        T x = x0;
        for (int u = 0; u < 4 * std::abs(m); ++u) x = std::nextafter(x, m < 0 ? -inf : inf);
        xs[m + 2] = x;
        fs[m + 2] = m == 0 ? f0 : o.eval(i, k, x);
      }
      const long double slope = (fs[4] - fs[0]) / (xs[4] - xs[0]);
      for (int j = 0; j < 5; ++j) noise = std::max(noise, std::abs(fs[j] - fs[0] - slope * (xs[j] - xs[0])));
    }
  }
  return noise;
}

// Central difference at element k of input i, or nullopt when a kink lies
// inside the step. For smooth f the gap between the one-sided slopes is
// f'' h, so gap(h) / h is the same at h, h/2 and h/4 up to O(h^2). A
// ReLU/PReLU or max-pool switch at any distance within the step breaks at
// least one of the two equalities.
template <class T>
std::optional<long double> central_difference(const Oracle<T>& o, std::size_t i, std::size_t k, double eps,
                                              long double f0, long double noise) {
  const T x0 = o.inputs[i][k];
  std::array<long double, 3> curv{}, curv_noise{};
  long double central = 0;
  for (int level = 0; level < 3; ++level) {
    const double h = eps / (1 << level);
    const T xp = static_cast<T>(x0 + h), xm = static_cast<T>(x0 - h);
    // Steps actually taken after rounding to T.
    const long double hp = static_cast<long double>(xp) - x0, hm = static_cast<long double>(x0) - xm;
    const long double fp = o.eval(i, k, xp), fm = o.eval(i, k, xm);
    const long double half = (hp + hm) / 2;
    curv[level] = ((fp - f0) / hp - (f0 - fm) / hm) / half;
    curv_noise[level] = 4 * noise / (std::min(hp, hm) * half);
    if (level == 0) central = (fp - fm) / (hp + hm);
  }
  for (int level = 0; level < 2; ++level) {
    const long double mismatch = std::abs(curv[level] - curv[level + 1]);
    // Kinks whose slope jump is below 1e-4 of the slope move the quotient
    // far less than any tolerance in use and are kept.
    const long double allowed = 2 * (curv_noise[level] + curv_noise[level + 1]) +
                                0.05L * std::abs(curv[level]) + 1e-4L * std::abs(central) / eps;
    if (mismatch > allowed) return std::nullopt;
  }
  return central;
}

template <class S, class T>
Oracle<T> widen(const GradCheckCase<S>& c, const BasicTensor<S>& r,
                std::function<BasicVar<T>(const std::vector<BasicVar<T>>&)> fn) {
  Oracle<T> o{{}, std::move(fn), r.template cast<T>()};
  for (const auto& t : c.inputs) o.inputs.push_back(t.template cast<T>());
  return o;
}

template <class S, class T>
GradCheckResult compare(const GradCheckCase<S>& c, const std::vector<BasicVar<S>>& vars, const Oracle<T>& o,
                        double eps, double tolerance, Rng& rng, std::size_t max_elements_per_input) {
  GradCheckResult res;
  res.name = c.name;
  res.precision = std::is_same_v<S, float> ? "f32" : "f64";
  res.tolerance = tolerance;

  const long double f0 = o.eval0();
  const long double noise = objective_noise(o, c.differentiable, f0, rng);
  long double diff2 = 0, ana2 = 0, num2 = 0;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    if (!c.differentiable[i]) continue;
    const std::size_t n = c.inputs[i].numel();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n > max_elements_per_input) {
      for (std::size_t k = 0; k < max_elements_per_input; ++k) std::swap(idx[k], idx[k + rng.below(n - k)]);
      idx.resize(max_elements_per_input);
    }
    const BasicTensor<S> analytic = vars[i].has_grad() ? vars[i].grad() : BasicTensor<S>(c.inputs[i].shape());
    for (std::size_t k : idx) {
      // A kink sits at a fixed distance, so a shorter step usually clears it.
      std::optional<long double> numeric;
      for (double step = eps; !numeric && step >= eps / 100; step /= 10)
        numeric = central_difference(o, i, k, step, f0, noise);
      if (!numeric) {
        ++res.skipped_elements;
        continue;
      }
      const long double a = analytic[k];
      diff2 += (a - *numeric) * (a - *numeric);
      ana2 += a * a;
      num2 += *numeric * *numeric;
      ++res.checked_elements;
    }
  }
  const long double denom = std::max({std::sqrt(ana2), std::sqrt(num2), 1e-30L});
  res.relative_error = static_cast<double>(std::sqrt(diff2) / denom);
  // Most elements must be checkable, otherwise the case proves nothing.
  const bool enough = res.checked_elements > 0 && res.checked_elements >= 3 * res.skipped_elements;
  res.passed = enough && std::isfinite(res.relative_error) && res.relative_error < tolerance;
  return res;
}

}  // namespace

template <class S>
GradCheckResult run_gradcheck(const GradCheckCase<S>& c, double eps, double tolerance, Rng& rng,
                              std::size_t max_elements_per_input) {
  std::vector<BasicVar<S>> vars;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    vars.push_back(c.differentiable[i] ? BasicVar<S>::parameter(c.inputs[i])
                                       : BasicVar<S>::constant(c.inputs[i]));
  }
  BasicVar<S> y = c.fn(vars);
  BasicTensor<S> r(y.shape());
  for (auto& v : r.data()) v = static_cast<S>(rng.uniform(-1.0, 1.0));
  y.backward(r);

  if (c.reference) {
    return compare(c, vars, widen<S, double>(c, r, c.reference), eps, tolerance, rng, max_elements_per_input);
  }
  return compare(c, vars, widen<S, S>(c, r, c.fn), eps, tolerance, rng, max_elements_per_input);
}

template GradCheckResult run_gradcheck(const GradCheckCase<float>&, double, double, Rng&, std::size_t);
template GradCheckResult run_gradcheck(const GradCheckCase<double>&, double, double, Rng&, std::size_t);

std::vector<GradCheckResult> gradcheck_suite_f32(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 32));
  // Same draws at both precisions; the 64-bit twin of each case serves as
  // its difference-quotient reference.
  Rng twin = rng;
  auto cases = make_cases<float>(rng);
  auto wide = make_cases<double>(twin);
  std::vector<GradCheckResult> out;
  for (std::size_t j = 0; j < cases.size(); ++j) {
    cases[j].reference = wide[j].fn;
    out.push_back(run_gradcheck(cases[j], 1e-3, 1e-3, rng));
  }
  return out;
}

std::vector<GradCheckResult> gradcheck_suite_f64(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 64));
  std::vector<GradCheckResult> out;
  for (const auto& c : make_cases<double>(rng)) out.push_back(run_gradcheck(c, 1e-6, 1e-6, rng));
  return out;
}

std::vector<GradCheckResult> gradcheck_suite(std::uint64_t seed) {
  auto out = gradcheck_suite_f32(seed);
  auto d = gradcheck_suite_f64(seed);
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

}  // namespace wnet

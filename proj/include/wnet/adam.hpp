#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "wnet/parameters.hpp"
#include "wnet/tensor.hpp"

namespace wnet {

/// Raised when training produces non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates for one parameter tensor.
template <class S>
struct BasicAdamState {
  BasicTensor<S> first_moment;
  BasicTensor<S> second_moment;
  std::int64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static BasicAdamState zeros(const Shape& shape, const AdamConfig& cfg = {}) {
    return {BasicTensor<S>(shape), BasicTensor<S>(shape), 0, cfg.beta1, cfg.beta2, cfg.epsilon};
  }
};

using AdamState = BasicAdamState<float>;

/// One bias-corrected Adam update of every parameter. An empty gradient
/// tensor counts as zero. Throws NumericError naming `names[i]` (or the
/// index) when a gradient holds NaN or Inf; nothing is modified then.
template <class S>
void adam_step(std::span<BasicTensor<S>> params, std::span<const BasicTensor<S>> grads,
               std::span<BasicAdamState<S>> states, double lr, std::span<const std::string> names = {});

/// Adam over the learnable entries of a ParameterSet.
class Adam {
 public:
  Adam(const ParameterSet& params, AdamConfig cfg = {});

  /// Applies one update using the gradients currently stored on the parameters.
  void step(double lr);

  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::vector<AdamState>& states() { return states_; }
  const std::vector<AdamState>& states() const { return states_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<NamedParameter> params_;
  std::vector<AdamState> states_;
  AdamConfig cfg_;
};

}  // namespace wnet

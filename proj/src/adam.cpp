#include "wnet/adam.hpp"

#include <cmath>

namespace wnet {

template <class S>
void adam_step(std::span<BasicTensor<S>> params, std::span<const BasicTensor<S>> grads,
               std::span<BasicAdamState<S>> states, double lr, std::span<const std::string> names) {
  require(params.size() == grads.size() && params.size() == states.size(),
          "adam_step: params/grads/states length mismatch");
  require(lr > 0.0, "adam_step: learning rate must be positive");
  auto label = [&](std::size_t i) { return i < names.size() ? names[i] : "#" + std::to_string(i); };
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& ps = params[i].shape();
    require(grads[i].empty() || grads[i].shape() == ps, "adam_step: gradient shape " +
                                                            grads[i].shape().str() + " != parameter " +
                                                            ps.str() + " for " + label(i));
    require(states[i].first_moment.shape() == ps && states[i].second_moment.shape() == ps,
            "adam_step: moment shape mismatch for " + label(i));
    if (!all_finite(grads[i])) throw NumericError("non-finite gradient in parameter " + label(i));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& st = states[i];
    st.step_count += 1;
    if (grads[i].empty()) continue;  // zero gradient: moments decay from zero, stay zero
    const double b1 = st.beta1, b2 = st.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step_count));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step_count));
    auto& p = params[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double gk = g[k];
      const double m = b1 * st.first_moment[k] + (1.0 - b1) * gk;
      const double v = b2 * st.second_moment[k] + (1.0 - b2) * gk * gk;
      st.first_moment[k] = static_cast<S>(m);
      st.second_moment[k] = static_cast<S>(v);
      const double mhat = m / c1;
      const double vhat = v / c2;
      p[k] = static_cast<S>(p[k] - lr * mhat / (std::sqrt(vhat) + st.epsilon));
    }
  }
}

template void adam_step(std::span<BasicTensor<float>>, std::span<const BasicTensor<float>>,
                        std::span<BasicAdamState<float>>, double, std::span<const std::string>);
template void adam_step(std::span<BasicTensor<double>>, std::span<const BasicTensor<double>>,
                        std::span<BasicAdamState<double>>, double, std::span<const std::string>);

Adam::Adam(const ParameterSet& params, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& p : params.items()) {
    if (!p.var.requires_grad()) continue;
    params_.push_back(p);
    states_.push_back(AdamState::zeros(p.var.shape(), cfg_));
  }
}

void Adam::step(double lr) {
  std::vector<Tensor> values;
  std::vector<Tensor> grads;
  std::vector<std::string> names;
  values.reserve(params_.size());
  for (auto& p : params_) {
    values.push_back(std::move(p.var.mutable_value()));
    grads.push_back(p.var.grad());
    names.push_back(p.name);
  }
  try {
    adam_step<float>(values, grads, states_, lr, names);
  } catch (...) {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].var.mutable_value() = std::move(values[i]);
    throw;
  }
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].var.mutable_value() = std::move(values[i]);
}

}  // namespace wnet

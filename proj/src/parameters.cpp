#include "wnet/parameters.hpp"

namespace wnet {

Var ParameterSet::add(std::string name, Tensor init) {
  require(find(name) == nullptr, "duplicate parameter name '" + name + "'");
  Var v = Var::parameter(std::move(init));
  items_.push_back({std::move(name), v});
  return v;
}

const NamedParameter* ParameterSet::find(std::string_view name) const {
  for (const auto& p : items_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

Var ParameterSet::at(std::string_view name) const {
  const NamedParameter* p = find(name);
  require(p != nullptr, "unknown parameter '" + std::string(name) + "'");
  return p->var;
}

std::size_t ParameterSet::total_elements() const {
  std::size_t total = 0;
  for (const auto& p : items_) total += p.var.value().numel();
  return total;
}

void ParameterSet::set_requires_grad(bool on) {
  for (auto& p : items_) p.var.set_requires_grad(on);
}

void ParameterSet::zero_grad() {
  for (auto& p : items_) p.var.zero_grad();
}

void ParameterSet::extend(const ParameterSet& other) {
  for (const auto& p : other.items_) {
    require(find(p.name) == nullptr, "duplicate parameter name '" + p.name + "'");
    items_.push_back(p);
  }
}

}  // namespace wnet

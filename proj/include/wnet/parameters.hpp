#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "wnet/autograd.hpp"

namespace wnet {

struct NamedParameter {
  std::string name;
  Var var;
};

/// Ordered, uniquely named collection of learnable tensors.
class ParameterSet {
 public:
  /// Registers a new parameter; throws ContractError on a duplicate name.
  Var add(std::string name, Tensor init);

  const std::vector<NamedParameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  /// nullptr when absent.
  const NamedParameter* find(std::string_view name) const;
  Var at(std::string_view name) const;

  std::size_t total_elements() const;

  void set_requires_grad(bool on);
  void zero_grad();

  /// Appends every entry of `other`, rejecting name collisions.
  void extend(const ParameterSet& other);

 private:
  std::vector<NamedParameter> items_;
};

}  // namespace wnet

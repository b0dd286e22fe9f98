#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace wnet {

/// Raised when an operation's shape or value preconditions are not met.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// (N, C, H, W) extent of a dense tensor.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense row-major (N, C, H, W) array. Value type; copies are deep.
template <class Scalar>
class BasicTensor {
 public:
  using value_type = Scalar;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0));
  BasicTensor(Shape shape, std::vector<Scalar> values);

  static BasicTensor scalar(Scalar v) { return BasicTensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  Scalar& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  Scalar at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  Scalar* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const Scalar* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  /// Scalar value of a single-element tensor.
  Scalar item() const;

  void fill(Scalar v);

  /// Same data viewed under a new shape with equal element count.
  BasicTensor reshaped(Shape shape) const;

  /// Slice of batch entries [begin, end).
  BasicTensor batch_slice(int begin, int end) const;

  template <class Other>
  BasicTensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return BasicTensor<Other>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  Shape shape_{};
  std::vector<Scalar> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Stacks equally shaped (1, C, H, W) tensors along the batch axis.
template <class Scalar>
BasicTensor<Scalar> stack_batch(std::span<const BasicTensor<Scalar>> items);

/// True when every element is finite.
template <class Scalar>
bool all_finite(const BasicTensor<Scalar>& t);

/// Throws ContractError with `what` unless `cond` holds.
inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace wnet

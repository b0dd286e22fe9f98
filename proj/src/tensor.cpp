#include "wnet/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace wnet {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

template <class Scalar>
BasicTensor<Scalar>::BasicTensor(Shape shape, Scalar fill) : shape_(shape) {
  require(shape.n >= 0 && shape.c >= 0 && shape.h >= 0 && shape.w >= 0,
          "negative tensor extent " + shape.str());
  data_.assign(shape.numel(), fill);
}

template <class Scalar>
BasicTensor<Scalar>::BasicTensor(Shape shape, std::vector<Scalar> values)
    : shape_(shape), data_(std::move(values)) {
  require(data_.size() == shape.numel(),
          "tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape.str());
}

template <class Scalar>
Scalar BasicTensor<Scalar>::item() const {
  require(data_.size() == 1, "item() on tensor of shape " + shape_.str());
  return data_[0];
}

template <class Scalar>
void BasicTensor<Scalar>::fill(Scalar v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <class Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::reshaped(Shape shape) const {
  require(shape.numel() == shape_.numel(), "cannot reshape " + shape_.str() + " to " + shape.str());
  return BasicTensor(shape, data_);
}

template <class Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::batch_slice(int begin, int end) const {
  require(0 <= begin && begin <= end && end <= shape_.n, "batch slice [" + std::to_string(begin) + "," +
                                                             std::to_string(end) + ") out of range for " +
                                                             shape_.str());
  const std::size_t per = static_cast<std::size_t>(shape_.c) * shape_.plane();
  Shape s = shape_;
  s.n = end - begin;
  return BasicTensor(s, std::vector<Scalar>(data_.begin() + static_cast<std::ptrdiff_t>(begin * per),
                                            data_.begin() + static_cast<std::ptrdiff_t>(end * per)));
}

template <class Scalar>
BasicTensor<Scalar> stack_batch(std::span<const BasicTensor<Scalar>> items) {
  require(!items.empty(), "stack_batch of zero tensors");
  Shape s = items.front().shape();
  std::vector<Scalar> out;
  out.reserve(s.numel() * items.size());
  int n = 0;
  for (const auto& t : items) {
    Shape ts = t.shape();
    require(ts.c == s.c && ts.h == s.h && ts.w == s.w,
            "stack_batch shape mismatch " + ts.str() + " vs " + s.str());
    out.insert(out.end(), t.data().begin(), t.data().end());
    n += ts.n;
  }
  s.n = n;
  return BasicTensor<Scalar>(s, std::move(out));
}

template <class Scalar>
bool all_finite(const BasicTensor<Scalar>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](Scalar v) { return std::isfinite(v); });
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<float> stack_batch(std::span<const BasicTensor<float>>);
template BasicTensor<double> stack_batch(std::span<const BasicTensor<double>>);
template bool all_finite(const BasicTensor<float>&);
template bool all_finite(const BasicTensor<double>&);

}  // namespace wnet

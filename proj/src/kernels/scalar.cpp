#include "wnet/kernels/scalar.hpp"

#include "wnet/kernels/dispatch.hpp"

namespace wnet::kernels {

const KernelTable& scalar_table() {
  static const KernelTable table{
      "scalar",
      &scalar::axpy<float>,
      &scalar::dot<float>,
      &scalar::fma3<float>,
      &scalar::dot3<float>,
      &scalar::add<float>,
      &scalar::mul<float>,
      &scalar::sum<float>,
      &scalar::prelu<float>,
  };
  return table;
}

}  // namespace wnet::kernels

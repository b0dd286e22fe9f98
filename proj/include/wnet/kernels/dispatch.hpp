#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

namespace wnet::kernels {

/// Function table for the float inner loops. One table per instruction set;
/// semantics are defined by the templates in kernels/scalar.hpp.
struct KernelTable {
  const char* name;
  void (*axpy)(std::size_t n, float a, const float* x, float* y);
  float (*dot)(std::size_t n, const float* x, const float* y);
  void (*fma3)(std::size_t n, float w0, float w1, float w2, const float* x, float* y);
  void (*dot3)(std::size_t n, const float* g, const float* x, float* acc);
  void (*add)(std::size_t n, const float* x, float* y);
  void (*mul)(std::size_t n, const float* a, const float* b, float* out);
  float (*sum)(std::size_t n, const float* x);
  void (*prelu)(std::size_t n, float slope, const float* x, float* out);
};

const KernelTable& scalar_table();

/// nullptr when the variant was not compiled in or the CPU lacks support.
const KernelTable* avx2_table();
const KernelTable* neon_table();

/// Every table usable on this machine, scalar first.
std::vector<const KernelTable*> available_tables();

/// The table ops use. Chosen once at first use: the widest supported
/// variant, unless the WNET_KERNELS environment variable names another
/// ("scalar", "avx2", "neon").
const KernelTable& active();

/// Overrides the active table; returns false if `name` is unavailable.
bool select(std::string_view name);

}  // namespace wnet::kernels

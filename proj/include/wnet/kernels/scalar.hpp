#pragma once

#include <cstddef>

// Reference inner loops. These are the semantics every vectorized variant
// must reproduce (up to floating-point reassociation), and they are the
// only path for 64-bit builds.
namespace wnet::kernels::scalar {

/// y[i] += a * x[i]
template <class T>
void axpy(std::size_t n, T a, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
T dot(std::size_t n, const T* x, const T* y) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

/// y[i] += w0 * x[i] + w1 * x[i + 1] + w2 * x[i + 2]
template <class T>
void fma3(std::size_t n, T w0, T w1, T w2, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += w0 * x[i] + w1 * x[i + 1] + w2 * x[i + 2];
}

/// acc[k] += sum_i g[i] * x[i + k] for k = 0, 1, 2
template <class T>
void dot3(std::size_t n, const T* g, const T* x, T* acc) {
  T a0 = T(0), a1 = T(0), a2 = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    a0 += g[i] * x[i];
    a1 += g[i] * x[i + 1];
    a2 += g[i] * x[i + 2];
  }
  acc[0] += a0;
  acc[1] += a1;
  acc[2] += a2;
}

/// y[i] += x[i]
template <class T>
void add(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
}

/// out[i] = a[i] * b[i]
template <class T>
void mul(std::size_t n, const T* a, const T* b, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <class T>
T sum(std::size_t n, const T* x) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

/// out[i] = x[i] >= 0 ? x[i] : slope * x[i]
template <class T>
void prelu(std::size_t n, T slope, const T* x, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] >= T(0) ? x[i] : slope * x[i];
}

}  // namespace wnet::kernels::scalar

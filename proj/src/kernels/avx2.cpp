// Built with -mavx2 -mfma; only reached after a runtime CPU check.
#include <immintrin.h>

#include "wnet/kernels/dispatch.hpp"
#include "wnet/kernels/scalar.hpp"

namespace wnet::kernels {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

void axpy(std::size_t n, float a, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vy = _mm256_loadu_ps(y + i);
    vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vy);
    _mm256_storeu_ps(y + i, vy);
  }
  scalar::axpy(n - i, a, x + i, y + i);
}

float dot(std::size_t n, const float* x, const float* y) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
  }
  return hsum(_mm256_add_ps(acc0, acc1)) + scalar::dot(n - i, x + i, y + i);
}

void fma3(std::size_t n, float w0, float w1, float w2, const float* x, float* y) {
  const __m256 v0 = _mm256_set1_ps(w0);
  const __m256 v1 = _mm256_set1_ps(w1);
  const __m256 v2 = _mm256_set1_ps(w2);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vy = _mm256_loadu_ps(y + i);
    vy = _mm256_fmadd_ps(v0, _mm256_loadu_ps(x + i), vy);
    vy = _mm256_fmadd_ps(v1, _mm256_loadu_ps(x + i + 1), vy);
    vy = _mm256_fmadd_ps(v2, _mm256_loadu_ps(x + i + 2), vy);
    _mm256_storeu_ps(y + i, vy);
  }
  scalar::fma3(n - i, w0, w1, w2, x + i, y + i);
}

void dot3(std::size_t n, const float* g, const float* x, float* acc) {
  __m256 a0 = _mm256_setzero_ps();
  __m256 a1 = _mm256_setzero_ps();
  __m256 a2 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 vg = _mm256_loadu_ps(g + i);
    a0 = _mm256_fmadd_ps(vg, _mm256_loadu_ps(x + i), a0);
    a1 = _mm256_fmadd_ps(vg, _mm256_loadu_ps(x + i + 1), a1);
    a2 = _mm256_fmadd_ps(vg, _mm256_loadu_ps(x + i + 2), a2);
  }
  acc[0] += hsum(a0);
  acc[1] += hsum(a1);
  acc[2] += hsum(a2);
  scalar::dot3(n - i, g + i, x + i, acc);
}

void add(std::size_t n, const float* x, float* y) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), _mm256_loadu_ps(x + i)));
  }
  scalar::add(n - i, x + i, y + i);
}

void mul(std::size_t n, const float* a, const float* b, float* out) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  scalar::mul(n - i, a + i, b + i, out + i);
}

float sum(std::size_t n, const float* x) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  return hsum(acc) + scalar::sum(n - i, x + i);
}

void prelu(std::size_t n, float slope, const float* x, float* out) {
  const __m256 vs = _mm256_set1_ps(slope);
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 neg = _mm256_cmp_ps(v, zero, _CMP_LT_OQ);
    _mm256_storeu_ps(out + i, _mm256_blendv_ps(v, _mm256_mul_ps(v, vs), neg));
  }
  scalar::prelu(n - i, slope, x + i, out + i);
}

}  // namespace

const KernelTable& avx2_table_unchecked() {
  static const KernelTable table{"avx2", &axpy, &dot, &fma3, &dot3, &add, &mul, &sum, &prelu};
  return table;
}

}  // namespace wnet::kernels

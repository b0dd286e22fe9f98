#include <arm_neon.h>

#include "wnet/kernels/dispatch.hpp"
#include "wnet/kernels/scalar.hpp"

namespace wnet::kernels {
namespace {

void axpy(std::size_t n, float a, const float* x, float* y) {
  const float32x4_t va = vdupq_n_f32(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vfmaq_f32(vld1q_f32(y + i), va, vld1q_f32(x + i)));
  scalar::axpy(n - i, a, x + i, y + i);
}

float dot(std::size_t n, const float* x, const float* y) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vfmaq_f32(acc, vld1q_f32(x + i), vld1q_f32(y + i));
  return vaddvq_f32(acc) + scalar::dot(n - i, x + i, y + i);
}

void fma3(std::size_t n, float w0, float w1, float w2, const float* x, float* y) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t vy = vld1q_f32(y + i);
    vy = vfmaq_n_f32(vy, vld1q_f32(x + i), w0);
    vy = vfmaq_n_f32(vy, vld1q_f32(x + i + 1), w1);
    vy = vfmaq_n_f32(vy, vld1q_f32(x + i + 2), w2);
    vst1q_f32(y + i, vy);
  }
  scalar::fma3(n - i, w0, w1, w2, x + i, y + i);
}

void dot3(std::size_t n, const float* g, const float* x, float* acc) {
  float32x4_t a0 = vdupq_n_f32(0.0f), a1 = vdupq_n_f32(0.0f), a2 = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float32x4_t vg = vld1q_f32(g + i);
    a0 = vfmaq_f32(a0, vg, vld1q_f32(x + i));
    a1 = vfmaq_f32(a1, vg, vld1q_f32(x + i + 1));
    a2 = vfmaq_f32(a2, vg, vld1q_f32(x + i + 2));
  }
  acc[0] += vaddvq_f32(a0);
  acc[1] += vaddvq_f32(a1);
  acc[2] += vaddvq_f32(a2);
  scalar::dot3(n - i, g + i, x + i, acc);
}

void add(std::size_t n, const float* x, float* y) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vaddq_f32(vld1q_f32(y + i), vld1q_f32(x + i)));
  scalar::add(n - i, x + i, y + i);
}

void mul(std::size_t n, const float* a, const float* b, float* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  scalar::mul(n - i, a + i, b + i, out + i);
}

float sum(std::size_t n, const float* x) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vaddq_f32(acc, vld1q_f32(x + i));
  return vaddvq_f32(acc) + scalar::sum(n - i, x + i);
}

void prelu(std::size_t n, float slope, const float* x, float* out) {
  const float32x4_t zero = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float32x4_t v = vld1q_f32(x + i);
    const uint32x4_t neg = vcltq_f32(v, zero);
    vst1q_f32(out + i, vbslq_f32(neg, vmulq_n_f32(v, slope), v));
  }
  scalar::prelu(n - i, slope, x + i, out + i);
}

}  // namespace

const KernelTable& neon_table_unchecked() {
  static const KernelTable table{"neon", &axpy, &dot, &fma3, &dot3, &add, &mul, &sum, &prelu};
  return table;
}

}  // namespace wnet::kernels

#pragma once

#include <vector>

#include "wnet/autograd.hpp"

// Differentiable operations over (N, C, H, W) tensors. Every op validates
// its shape contract before computing and throws ContractError naming the
// offending dimensions. Gradients are recorded only when an input requires
// grad and no NoGradGuard is active.
namespace wnet::ops {

/// Cross-correlation with zero padding. `weight` is (outC, inC, kH, kW) with
/// kH, kW in {1, 3}; `bias` is (1, outC, 1, 1) or undefined.
template <class S>
BasicVar<S> conv2d(const BasicVar<S>& input, const BasicVar<S>& weight, const BasicVar<S>& bias,
                   int stride = 1, int padding = 1);

/// 2x2 window max, stride 2. Gradient goes to the first row-major argmax.
template <class S>
BasicVar<S> maxpool2x2(const BasicVar<S>& input);

/// 2x2 window mean, stride 2.
template <class S>
BasicVar<S> avgpool2x2(const BasicVar<S>& input);

/// x2 bilinear resize, half-pixel centers (align_corners = false).
template <class S>
BasicVar<S> upsample_bilinear2x(const BasicVar<S>& input);

/// Mean over H and W; output (N, C, 1, 1).
template <class S>
BasicVar<S> global_avg_pool(const BasicVar<S>& input);

/// Affine map of (N, C, 1, 1) input; `weight` is (outC, C, 1, 1), `bias` (1, outC, 1, 1).
template <class S>
BasicVar<S> fully_connected(const BasicVar<S>& input, const BasicVar<S>& weight, const BasicVar<S>& bias);

/// Leaky rectifier with one learnable slope, `slope` shaped (1, 1, 1, 1).
template <class S>
BasicVar<S> prelu(const BasicVar<S>& input, const BasicVar<S>& slope);

template <class S>
BasicVar<S> relu(const BasicVar<S>& input);

template <class S>
BasicVar<S> sigmoid(const BasicVar<S>& input);

/// Elementwise sum of identically shaped tensors.
template <class S>
BasicVar<S> add(const BasicVar<S>& a, const BasicVar<S>& b);

/// Elementwise product; `b` may be (N, C, 1, 1) and is then broadcast over H, W.
template <class S>
BasicVar<S> mul(const BasicVar<S>& a, const BasicVar<S>& b);

/// Channel concatenation, `a` first.
template <class S>
BasicVar<S> concat_channels(const BasicVar<S>& a, const BasicVar<S>& b);

/// Clamp to [lo, hi]; gradient passes only where lo < x < hi.
template <class S>
BasicVar<S> clamp(const BasicVar<S>& input, S lo, S hi);

/// y[:, c] = x[:, c] * scale[c] + shift[c] with constant per-channel factors.
template <class S>
BasicVar<S> channel_affine(const BasicVar<S>& input, const std::vector<S>& scale,
                           const std::vector<S>& shift);

/// Mean absolute difference over all elements; (1, 1, 1, 1) output.
template <class S>
BasicVar<S> l1_mean(const BasicVar<S>& a, const BasicVar<S>& b);

/// 1 - mean over pixels of cos(a_px, b_px), with the cosine taken over the
/// channel vector at each (n, y, x). Each norm is floored at `eps`.
template <class S>
BasicVar<S> cosine_distance(const BasicVar<S>& a, const BasicVar<S>& b, S eps);

}  // namespace wnet::ops

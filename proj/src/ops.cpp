#include "wnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "wnet/kernels/dispatch.hpp"
#include "wnet/kernels/scalar.hpp"

namespace wnet::ops {
namespace {

// float goes through the dispatched table; double always runs the reference loops.
inline void k_axpy(std::size_t n, float a, const float* x, float* y) { kernels::active().axpy(n, a, x, y); }
inline void k_axpy(std::size_t n, double a, const double* x, double* y) { kernels::scalar::axpy(n, a, x, y); }
inline float k_dot(std::size_t n, const float* x, const float* y) { return kernels::active().dot(n, x, y); }
inline double k_dot(std::size_t n, const double* x, const double* y) { return kernels::scalar::dot(n, x, y); }
inline void k_fma3(std::size_t n, float w0, float w1, float w2, const float* x, float* y) {
  kernels::active().fma3(n, w0, w1, w2, x, y);
}
inline void k_fma3(std::size_t n, double w0, double w1, double w2, const double* x, double* y) {
  kernels::scalar::fma3(n, w0, w1, w2, x, y);
}
inline void k_dot3(std::size_t n, const float* g, const float* x, float* acc) {
  kernels::active().dot3(n, g, x, acc);
}
inline void k_dot3(std::size_t n, const double* g, const double* x, double* acc) {
  kernels::scalar::dot3(n, g, x, acc);
}
inline void k_add(std::size_t n, const float* x, float* y) { kernels::active().add(n, x, y); }
inline void k_add(std::size_t n, const double* x, double* y) { kernels::scalar::add(n, x, y); }
inline void k_mul(std::size_t n, const float* a, const float* b, float* out) {
  kernels::active().mul(n, a, b, out);
}
inline void k_mul(std::size_t n, const double* a, const double* b, double* out) {
  kernels::scalar::mul(n, a, b, out);
}
inline float k_sum(std::size_t n, const float* x) { return kernels::active().sum(n, x); }
inline double k_sum(std::size_t n, const double* x) { return kernels::scalar::sum(n, x); }
inline void k_prelu(std::size_t n, float s, const float* x, float* out) {
  kernels::active().prelu(n, s, x, out);
}
inline void k_prelu(std::size_t n, double s, const double* x, double* out) {
  kernels::scalar::prelu(n, s, x, out);
}

template <class S>
using NodePtr = typename BasicVar<S>::NodePtr;

template <class S>
bool wants_grad(const BasicVar<S>& v) {
  return v.defined() && v.requires_grad();
}

// Wraps an op result; attaches `fn` only if some input needs a gradient.
template <class S, class Fn>
BasicVar<S> make_result(BasicTensor<S> value, std::initializer_list<const BasicVar<S>*> inputs, Fn&& fn) {
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(value);
  bool need = false;
  if (NoGradGuard::grad_enabled()) {
    for (const BasicVar<S>* in : inputs) need = need || wants_grad(*in);
  }
  if (need) {
    node->requires_grad = true;
    for (const BasicVar<S>* in : inputs) {
      if (wants_grad(*in)) node->inputs.push_back(in->node());
    }
    node->backward_fn = std::forward<Fn>(fn);
  }
  return BasicVar<S>(std::move(node));
}

// Returns the grad buffer of `p` if it participates in backward, else nullptr.
template <class S>
S* grad_target(const NodePtr<S>& p) {
  if (!p || !p->requires_grad) return nullptr;
  return p->ensure_grad().raw();
}

void check_defined(bool defined, const char* op, const char* what) {
  require(defined, std::string(op) + ": " + what + " is undefined");
}

template <class S>
void conv3x3_forward_rows(const S* in, const S* w, S* out, int H, int W) {
  for (int ky = 0; ky < 3; ++ky) {
    const S w0 = w[ky * 3 + 0], w1 = w[ky * 3 + 1], w2 = w[ky * 3 + 2];
    for (int oy = 0; oy < H; ++oy) {
      const int iy = oy + ky - 1;
      if (iy < 0 || iy >= H) continue;
      const S* irow = in + static_cast<std::size_t>(iy) * W;
      S* orow = out + static_cast<std::size_t>(oy) * W;
      orow[0] += w1 * irow[0] + w2 * irow[1];
      k_fma3(static_cast<std::size_t>(W - 2), w0, w1, w2, irow, orow + 1);
      orow[W - 1] += w0 * irow[W - 2] + w1 * irow[W - 1];
    }
  }
}

template <class S>
void conv3x3_backward_input_rows(const S* gout, const S* w, S* gin, int H, int W) {
  for (int ky = 0; ky < 3; ++ky) {
    const S w0 = w[ky * 3 + 0], w1 = w[ky * 3 + 1], w2 = w[ky * 3 + 2];
    for (int oy = 0; oy < H; ++oy) {
      const int iy = oy + ky - 1;
      if (iy < 0 || iy >= H) continue;
      const S* grow = gout + static_cast<std::size_t>(oy) * W;
      S* irow = gin + static_cast<std::size_t>(iy) * W;
      irow[0] += w1 * grow[0] + w0 * grow[1];
      k_fma3(static_cast<std::size_t>(W - 2), w2, w1, w0, grow, irow + 1);
      irow[W - 1] += w2 * grow[W - 2] + w1 * grow[W - 1];
    }
  }
}

template <class S>
void conv3x3_backward_weight_rows(const S* gout, const S* in, S* gw, int H, int W) {
  for (int ky = 0; ky < 3; ++ky) {
    S acc[3] = {S(0), S(0), S(0)};
    for (int oy = 0; oy < H; ++oy) {
      const int iy = oy + ky - 1;
      if (iy < 0 || iy >= H) continue;
      const S* grow = gout + static_cast<std::size_t>(oy) * W;
      const S* irow = in + static_cast<std::size_t>(iy) * W;
      acc[1] += grow[0] * irow[0];
      acc[2] += grow[0] * irow[1];
      k_dot3(static_cast<std::size_t>(W - 2), grow + 1, irow, acc);
      acc[0] += grow[W - 1] * irow[W - 2];
      acc[1] += grow[W - 1] * irow[W - 1];
    }
    gw[ky * 3 + 0] += acc[0];
    gw[ky * 3 + 1] += acc[1];
    gw[ky * 3 + 2] += acc[2];
  }
}

struct ConvGeom {
  int n, ic, h, w, oc, kh, kw, oh, ow, stride, pad;
  bool fast3x3() const { return kh == 3 && kw == 3 && stride == 1 && pad == 1 && w >= 2; }
  bool fast1x1() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <class S>
void conv_generic_forward(const ConvGeom& g, const S* in, const S* wt, S* out) {
  for (int n = 0; n < g.n; ++n)
    for (int o = 0; o < g.oc; ++o)
      for (int i = 0; i < g.ic; ++i)
        for (int ky = 0; ky < g.kh; ++ky)
          for (int kx = 0; kx < g.kw; ++kx) {
            const S wv = wt[((static_cast<std::size_t>(o) * g.ic + i) * g.kh + ky) * g.kw + kx];
            for (int oy = 0; oy < g.oh; ++oy) {
              const int iy = oy * g.stride + ky - g.pad;
              if (iy < 0 || iy >= g.h) continue;
              for (int ox = 0; ox < g.ow; ++ox) {
                const int ix = ox * g.stride + kx - g.pad;
                if (ix < 0 || ix >= g.w) continue;
                out[((static_cast<std::size_t>(n) * g.oc + o) * g.oh + oy) * g.ow + ox] +=
                    wv * in[((static_cast<std::size_t>(n) * g.ic + i) * g.h + iy) * g.w + ix];
              }
            }
          }
}

template <class S>
void conv_generic_backward(const ConvGeom& g, const S* in, const S* wt, const S* gout, S* gin, S* gw) {
  for (int n = 0; n < g.n; ++n)
    for (int o = 0; o < g.oc; ++o)
      for (int i = 0; i < g.ic; ++i)
        for (int ky = 0; ky < g.kh; ++ky)
          for (int kx = 0; kx < g.kw; ++kx) {
            const std::size_t wi = ((static_cast<std::size_t>(o) * g.ic + i) * g.kh + ky) * g.kw + kx;
            S acc = S(0);
            for (int oy = 0; oy < g.oh; ++oy) {
              const int iy = oy * g.stride + ky - g.pad;
              if (iy < 0 || iy >= g.h) continue;
              for (int ox = 0; ox < g.ow; ++ox) {
                const int ix = ox * g.stride + kx - g.pad;
                if (ix < 0 || ix >= g.w) continue;
                const std::size_t ii = ((static_cast<std::size_t>(n) * g.ic + i) * g.h + iy) * g.w + ix;
                const S go = gout[((static_cast<std::size_t>(n) * g.oc + o) * g.oh + oy) * g.ow + ox];
                if (gin) gin[ii] += wt[wi] * go;
                acc += go * in[ii];
              }
            }
            if (gw) gw[wi] += acc;
          }
}

}  // namespace

template <class S>
BasicVar<S> conv2d(const BasicVar<S>& input, const BasicVar<S>& weight, const BasicVar<S>& bias, int stride,
                   int padding) {
  check_defined(input.defined(), "conv2d", "input");
  check_defined(weight.defined(), "conv2d", "weight");
  const Shape xs = input.shape();
  const Shape ws = weight.shape();
  require(ws.c == xs.c, "conv2d: input channels " + std::to_string(xs.c) + " != weight in-channels " +
                            std::to_string(ws.c) + " (input " + xs.str() + ", weight " + ws.str() + ")");
  require((ws.h == 1 || ws.h == 3) && (ws.w == 1 || ws.w == 3),
          "conv2d: kernel must be 1x1 or 3x3, got " + std::to_string(ws.h) + "x" + std::to_string(ws.w));
  require(stride >= 1 && padding >= 0, "conv2d: stride must be >= 1 and padding >= 0");
  if (bias.defined()) {
    require(bias.value().numel() == static_cast<std::size_t>(ws.n),
            "conv2d: bias has " + std::to_string(bias.value().numel()) + " entries, expected " +
                std::to_string(ws.n));
  }
  const int oh = (xs.h + 2 * padding - ws.h) / stride + 1;
  const int ow = (xs.w + 2 * padding - ws.w) / stride + 1;
  require(oh >= 1 && ow >= 1, "conv2d: empty output for input " + xs.str());

  const ConvGeom g{xs.n, xs.c, xs.h, xs.w, ws.n, ws.h, ws.w, oh, ow, stride, padding};
  BasicTensor<S> out(Shape{g.n, g.oc, oh, ow});
  const S* in = input.value().raw();
  const S* wt = weight.value().raw();
  const std::size_t oplane = static_cast<std::size_t>(oh) * ow;
  const std::size_t iplane = xs.plane();
  const std::size_t ksize = static_cast<std::size_t>(g.kh) * g.kw;

  for (int n = 0; n < g.n; ++n) {
    for (int o = 0; o < g.oc; ++o) {
      S* op = out.plane(n, o);
      if (bias.defined()) std::fill(op, op + oplane, bias.value()[o]);
    }
  }
  if (g.fast3x3() || g.fast1x1()) {
    for (int n = 0; n < g.n; ++n)
      for (int o = 0; o < g.oc; ++o) {
        S* op = out.plane(n, o);
        for (int i = 0; i < g.ic; ++i) {
          const S* ip = in + (static_cast<std::size_t>(n) * g.ic + i) * iplane;
          const S* wp = wt + (static_cast<std::size_t>(o) * g.ic + i) * ksize;
          if (g.fast3x3()) {
            conv3x3_forward_rows(ip, wp, op, g.h, g.w);
          } else {
            k_axpy(iplane, wp[0], ip, op);
          }
        }
      }
  } else {
    conv_generic_forward(g, in, wt, out.raw());
  }

  NodePtr<S> xn = input.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : nullptr;
  return make_result<S>(std::move(out), {&input, &weight, &bias}, [=](Node<S>& self) {
    const S* gout = self.grad.raw();
    S* gin = grad_target<S>(xn);
    S* gw = grad_target<S>(wn);
    S* gb = grad_target<S>(bn);
    const S* x = xn->value.raw();
    const S* w = wn->value.raw();
    if (gb) {
      for (int n = 0; n < g.n; ++n)
        for (int o = 0; o < g.oc; ++o)
          gb[o] += k_sum(oplane, gout + (static_cast<std::size_t>(n) * g.oc + o) * oplane);
    }
    if (!(g.fast3x3() || g.fast1x1())) {
      conv_generic_backward(g, x, w, gout, gin, gw);
      return;
    }
    for (int n = 0; n < g.n; ++n)
      for (int o = 0; o < g.oc; ++o) {
        const S* gp = gout + (static_cast<std::size_t>(n) * g.oc + o) * oplane;
        for (int i = 0; i < g.ic; ++i) {
          const std::size_t ioff = (static_cast<std::size_t>(n) * g.ic + i) * iplane;
          const std::size_t woff = (static_cast<std::size_t>(o) * g.ic + i) * ksize;
          if (g.fast3x3()) {
            if (gin) conv3x3_backward_input_rows(gp, w + woff, gin + ioff, g.h, g.w);
            if (gw) conv3x3_backward_weight_rows(gp, x + ioff, gw + woff, g.h, g.w);
          } else {
            if (gin) k_axpy(iplane, w[woff], gp, gin + ioff);
            if (gw) gw[woff] += k_dot(iplane, gp, x + ioff);
          }
        }
      }
  });
}

template <class S>
BasicVar<S> maxpool2x2(const BasicVar<S>& input) {
  check_defined(input.defined(), "maxpool2x2", "input");
  const Shape xs = input.shape();
  require(xs.h % 2 == 0 && xs.w % 2 == 0 && xs.h > 0 && xs.w > 0,
          "maxpool2x2: H and W must be even and positive, got " + xs.str());
  const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
  BasicTensor<S> out(os);
  std::vector<std::size_t> argmax(os.numel());
  const auto& x = input.value();
  std::size_t k = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      for (int oy = 0; oy < os.h; ++oy)
        for (int ox = 0; ox < os.w; ++ox, ++k) {
          std::size_t best = x.index(n, c, 2 * oy, 2 * ox);
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx = x.index(n, c, 2 * oy + dy, 2 * ox + dx);
              if (x[idx] > x[best]) best = idx;  // strict: first argmax wins ties
            }
          argmax[k] = best;
          out[k] = x[best];
        }
  NodePtr<S> xn = input.node();
  return make_result<S>(std::move(out), {&input}, [xn, argmax = std::move(argmax)](Node<S>& self) {
    S* gin = grad_target<S>(xn);
    for (std::size_t i = 0; i < argmax.size(); ++i) gin[argmax[i]] += self.grad[i];
  });
}

template <class S>
BasicVar<S> avgpool2x2(const BasicVar<S>& input) {
  check_defined(input.defined(), "avgpool2x2", "input");
  const Shape xs = input.shape();
  require(xs.h % 2 == 0 && xs.w % 2 == 0 && xs.h > 0 && xs.w > 0,
          "avgpool2x2: H and W must be even and positive, got " + xs.str());
  const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
  BasicTensor<S> out(os);
  const auto& x = input.value();
  std::size_t k = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      for (int oy = 0; oy < os.h; ++oy)
        for (int ox = 0; ox < os.w; ++ox, ++k) {
          out[k] = (x.at(n, c, 2 * oy, 2 * ox) + x.at(n, c, 2 * oy, 2 * ox + 1) +
                    x.at(n, c, 2 * oy + 1, 2 * ox) + x.at(n, c, 2 * oy + 1, 2 * ox + 1)) *
                   S(0.25);
        }
  NodePtr<S> xn = input.node();
  return make_result<S>(std::move(out), {&input}, [xn, xs, os](Node<S>& self) {
    S* gin = grad_target<S>(xn);
    const auto& xv = xn->value;
    std::size_t k = 0;
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c)
        for (int oy = 0; oy < os.h; ++oy)
          for (int ox = 0; ox < os.w; ++ox, ++k) {
            const S g = self.grad[k] * S(0.25);
            gin[xv.index(n, c, 2 * oy, 2 * ox)] += g;
            gin[xv.index(n, c, 2 * oy, 2 * ox + 1)] += g;
            gin[xv.index(n, c, 2 * oy + 1, 2 * ox)] += g;
            gin[xv.index(n, c, 2 * oy + 1, 2 * ox + 1)] += g;
          }
  });
}

namespace {

struct Tap {
  int lo, hi;
  double frac;  // weight of hi
};

// Half-pixel source taps for a x2 enlargement of an axis of length `len`.
std::vector<Tap> upsample_taps(int len) {
  std::vector<Tap> taps(static_cast<std::size_t>(2 * len));
  for (int o = 0; o < 2 * len; ++o) {
    double src = (o + 0.5) * 0.5 - 0.5;
    if (src < 0) src = 0;
    const int lo = std::min(static_cast<int>(src), len - 1);
    const int hi = std::min(lo + 1, len - 1);
    taps[static_cast<std::size_t>(o)] = Tap{lo, hi, src - lo};
  }
  return taps;
}

}  // namespace

template <class S>
BasicVar<S> upsample_bilinear2x(const BasicVar<S>& input) {
  check_defined(input.defined(), "upsample_bilinear2x", "input");
  const Shape xs = input.shape();
  require(xs.h >= 1 && xs.w >= 1, "upsample_bilinear2x: empty input " + xs.str());
  const Shape os{xs.n, xs.c, 2 * xs.h, 2 * xs.w};
  const auto ty = upsample_taps(xs.h);
  const auto tx = upsample_taps(xs.w);
  BasicTensor<S> out(os);
  const auto& x = input.value();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const S* ip = x.plane(n, c);
      S* op = out.plane(n, c);
      for (int oy = 0; oy < os.h; ++oy) {
        const Tap& a = ty[static_cast<std::size_t>(oy)];
        const S fy = static_cast<S>(a.frac);
        const S* r0 = ip + static_cast<std::size_t>(a.lo) * xs.w;
        const S* r1 = ip + static_cast<std::size_t>(a.hi) * xs.w;
        for (int ox = 0; ox < os.w; ++ox) {
          const Tap& b = tx[static_cast<std::size_t>(ox)];
          const S fx = static_cast<S>(b.frac);
          const S top = r0[b.lo] * (S(1) - fx) + r0[b.hi] * fx;
          const S bot = r1[b.lo] * (S(1) - fx) + r1[b.hi] * fx;
          op[static_cast<std::size_t>(oy) * os.w + ox] = top * (S(1) - fy) + bot * fy;
        }
      }
    }
  NodePtr<S> xn = input.node();
  return make_result<S>(std::move(out), {&input}, [xn, xs, os, ty, tx](Node<S>& self) {
    S* gin = grad_target<S>(xn);
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        S* ip = gin + xn->value.index(n, c, 0, 0);
        const S* gp = self.grad.plane(n, c);
        for (int oy = 0; oy < os.h; ++oy) {
          const Tap& a = ty[static_cast<std::size_t>(oy)];
          const S fy = static_cast<S>(a.frac);
          S* r0 = ip + static_cast<std::size_t>(a.lo) * xs.w;
          S* r1 = ip + static_cast<std::size_t>(a.hi) * xs.w;
          for (int ox = 0; ox < os.w; ++ox) {
            const Tap& b = tx[static_cast<std::size_t>(ox)];
            const S fx = static_cast<S>(b.frac);
            const S g = gp[static_cast<std::size_t>(oy) * os.w + ox];
            const S gt = g * (S(1) - fy), gb = g * fy;
            r0[b.lo] += gt * (S(1) - fx);
            r0[b.hi] += gt * fx;
            r1[b.lo] += gb * (S(1) - fx);
            r1[b.hi] += gb * fx;
          }
        }
      }
  });
}

template <class S>
BasicVar<S> global_avg_pool(const BasicVar<S>& input) {
  check_defined(input.defined(), "global_avg_pool", "input");
  const Shape xs = input.shape();
  require(xs.plane() > 0, "global_avg_pool: empty spatial extent " + xs.str());
  BasicTensor<S> out(Shape{xs.n, xs.c, 1, 1});
  const S inv = S(1) / static_cast<S>(xs.plane());
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) out.at(n, c, 0, 0) = k_sum(xs.plane(), input.value().plane(n, c)) * inv;
  NodePtr<S> xn = input.node();
  return make_result<S>(std::move(out), {&input}, [xn, xs, inv](Node<S>& self) {
    S* gin = grad_target<S>(xn);
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        const S g = self.grad.at(n, c, 0, 0) * inv;
        S* p = gin + xn->value.index(n, c, 0, 0);
        for (std::size_t i = 0; i < xs.plane(); ++i) p[i] += g;
      }
  });
}

template <class S>
BasicVar<S> fully_connected(const BasicVar<S>& input, const BasicVar<S>& weight, const BasicVar<S>& bias) {
  check_defined(input.defined(), "fully_connected", "input");
  check_defined(weight.defined(), "fully_connected", "weight");
  const Shape xs = input.shape();
  const Shape ws = weight.shape();
  require(xs.h == 1 && xs.w == 1, "fully_connected: input spatial dims must be 1x1, got " + xs.str());
  require(ws.c == xs.c && ws.h == 1 && ws.w == 1,
          "fully_connected: weight " + ws.str() + " incompatible with input " + xs.str());
  if (bias.defined()) {
    require(bias.value().numel() == static_cast<std::size_t>(ws.n),
            "fully_connected: bias has " + std::to_string(bias.value().numel()) + " entries, expected " +
                std::to_string(ws.n));
  }
  const int in_c = xs.c, out_c = ws.n;
  BasicTensor<S> out(Shape{xs.n, out_c, 1, 1});
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < out_c; ++o) {
      S v = k_dot(static_cast<std::size_t>(in_c), weight.value().raw() + static_cast<std::size_t>(o) * in_c,
                  input.value().raw() + static_cast<std::size_t>(n) * in_c);
      if (bias.defined()) v += bias.value()[o];
      out.at(n, o, 0, 0) = v;
    }
  NodePtr<S> xn = input.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : nullptr;
  const int batch = xs.n;
  return make_result<S>(std::move(out), {&input, &weight, &bias}, [=](Node<S>& self) {
    S* gin = grad_target<S>(xn);
    S* gw = grad_target<S>(wn);
    S* gb = grad_target<S>(bn);
    for (int n = 0; n < batch; ++n)
      for (int o = 0; o < out_c; ++o) {
        const S g = self.grad[static_cast<std::size_t>(n) * out_c + o];
        if (gb) gb[o] += g;
        const std::size_t wo = static_cast<std::size_t>(o) * in_c;
        const std::size_t xo = static_cast<std::size_t>(n) * in_c;
        if (gw) k_axpy(static_cast<std::size_t>(in_c), g, xn->value.raw() + xo, gw + wo);
        if (gin) k_axpy(static_cast<std::size_t>(in_c), g, wn->value.raw() + wo, gin + xo);
      }
  });
}

template <class S>
BasicVar<S> prelu(const BasicVar<S>& input, const BasicVar<S>& slope) {
  check_defined(input.defined(), "prelu", "input");
  check_defined(slope.defined(), "prelu", "slope");
  require(slope.value().numel() == 1, "prelu: slope must be a single value, got " + slope.shape().str());
  const S a = slope.value()[0];
  BasicTensor<S> out(input.shape());
  k_prelu(out.numel(), a, input.value().raw(), out.raw());
  NodePtr<S> xn = input.node(), sn = slope.node();
  return make_result<S>(std::move(out), {&input, &slope}, [xn, sn](Node<S>& self) {
    S* gin = grad_target<S>(xn);
    S* gs = grad_target<S>(sn);
    const S a = sn->value[0];
    const auto& x = xn->value;
    S acc = S(0);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const S g = self.grad[i];
      if (x[i] >= S(0)) {
        if (gin) gin[i] += g;
      } else {
        if (gin) gin[i] += a * g;
        acc += g * x[i];
      }
    }
    if (gs) gs[0] += acc;
  });
}

template <class S>
BasicVar<S> relu(const BasicVar<S>& input) {
  check_defined(input.defined(), "relu", "input");
  BasicTensor<S> out(input.shape());
  k_prelu(out.numel(), S(0), input.value().raw(), out.raw());
  NodePtr<S> xn = input.node();
  return make_result<S>(std::move(out), {&input}, [xn](Node<S>& self) {
    S* gin = grad_target<S>(xn);
    const auto& x = xn->value;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      if (x[i] > S(0)) gin[i] += self.grad[i];
    }
  });
}

template <class S>
BasicVar<S> sigmoid(const BasicVar<S>& input) {
  check_defined(input.defined(), "sigmoid", "input");
  const auto& x = input.value();
  BasicTensor<S> out(x.shape());
  // Kept strictly inside (0, 1) even where the exact value rounds to an endpoint.
  const S hi = std::nextafter(S(1), S(0));
  const S lo = std::numeric_limits<S>::min();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    S y;
    if (x[i] >= S(0)) {
      y = S(1) / (S(1) + std::exp(-x[i]));
    } else {
      const S e = std::exp(x[i]);
      y = e / (S(1) + e);
    }
    out[i] = std::clamp(y, lo, hi);
  }
  NodePtr<S> xn = input.node();
  return make_result<S>(std::move(out), {&input}, [xn](Node<S>& self) {
    S* gin = grad_target<S>(xn);
    for (std::size_t i = 0; i < self.value.numel(); ++i) {
      const S s = self.value[i];
      gin[i] += self.grad[i] * s * (S(1) - s);
    }
  });
}

template <class S>
BasicVar<S> add(const BasicVar<S>& a, const BasicVar<S>& b) {
  check_defined(a.defined() && b.defined(), "add", "operand");
  require(a.shape() == b.shape(), "add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  BasicTensor<S> out = a.value();
  k_add(out.numel(), b.value().raw(), out.raw());
  NodePtr<S> an = a.node(), bn = b.node();
  return make_result<S>(std::move(out), {&a, &b}, [an, bn](Node<S>& self) {
    if (S* ga = grad_target<S>(an)) k_add(self.grad.numel(), self.grad.raw(), ga);
    if (S* gb = grad_target<S>(bn)) k_add(self.grad.numel(), self.grad.raw(), gb);
  });
}

template <class S>
BasicVar<S> mul(const BasicVar<S>& a, const BasicVar<S>& b) {
  check_defined(a.defined() && b.defined(), "mul", "operand");
  const Shape as = a.shape(), bs = b.shape();
  const bool same = as == bs;
  const bool bcast = bs.n == as.n && bs.c == as.c && bs.h == 1 && bs.w == 1;
  require(same || bcast,
          "mul: shapes " + as.str() + " and " + bs.str() + " are neither equal nor (N,C,1,1)-broadcastable");
  BasicTensor<S> out(as);
  if (same) {
    k_mul(out.numel(), a.value().raw(), b.value().raw(), out.raw());
  } else {
    for (int n = 0; n < as.n; ++n)
      for (int c = 0; c < as.c; ++c) {
        const S s = b.value().at(n, c, 0, 0);
        const S* ap = a.value().plane(n, c);
        S* op = out.plane(n, c);
        for (std::size_t i = 0; i < as.plane(); ++i) op[i] = ap[i] * s;
      }
  }
  NodePtr<S> an = a.node(), bn = b.node();
  return make_result<S>(std::move(out), {&a, &b}, [an, bn, as, same](Node<S>& self) {
    S* ga = grad_target<S>(an);
    S* gb = grad_target<S>(bn);
    const auto& av = an->value;
    const auto& bv = bn->value;
    if (same) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        if (ga) ga[i] += self.grad[i] * bv[i];
        if (gb) gb[i] += self.grad[i] * av[i];
      }
      return;
    }
    for (int n = 0; n < as.n; ++n)
      for (int c = 0; c < as.c; ++c) {
        const std::size_t off = av.index(n, c, 0, 0);
        const S* gp = self.grad.raw() + off;
        if (ga) k_axpy(as.plane(), bv.at(n, c, 0, 0), gp, ga + off);
        if (gb) gb[static_cast<std::size_t>(n) * as.c + c] += k_dot(as.plane(), gp, av.raw() + off);
      }
  });
}

template <class S>
BasicVar<S> concat_channels(const BasicVar<S>& a, const BasicVar<S>& b) {
  check_defined(a.defined() && b.defined(), "concat_channels", "operand");
  const Shape as = a.shape(), bs = b.shape();
  require(as.n == bs.n && as.h == bs.h && as.w == bs.w,
          "concat_channels: shapes " + as.str() + " and " + bs.str() + " differ outside C");
  const Shape os{as.n, as.c + bs.c, as.h, as.w};
  BasicTensor<S> out(os);
  const std::size_t asz = static_cast<std::size_t>(as.c) * as.plane();
  const std::size_t bsz = static_cast<std::size_t>(bs.c) * bs.plane();
  for (int n = 0; n < as.n; ++n) {
    std::copy_n(a.value().raw() + n * asz, asz, out.plane(n, 0));
    std::copy_n(b.value().raw() + n * bsz, bsz, out.plane(n, as.c));
  }
  NodePtr<S> an = a.node(), bn = b.node();
  return make_result<S>(std::move(out), {&a, &b}, [an, bn, as, asz, bsz](Node<S>& self) {
    S* ga = grad_target<S>(an);
    S* gb = grad_target<S>(bn);
    for (int n = 0; n < as.n; ++n) {
      const S* gp = self.grad.plane(n, 0);
      if (ga) k_add(asz, gp, ga + n * asz);
      if (gb) k_add(bsz, gp + asz, gb + n * bsz);
    }
  });
}

template <class S>
BasicVar<S> clamp(const BasicVar<S>& input, S lo, S hi) {
  check_defined(input.defined(), "clamp", "input");
  require(lo <= hi, "clamp: lo > hi");
  BasicTensor<S> out(input.shape());
  const auto& x = input.value();
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::clamp(x[i], lo, hi);
  NodePtr<S> xn = input.node();
  return make_result<S>(std::move(out), {&input}, [xn, lo, hi](Node<S>& self) {
    S* gin = grad_target<S>(xn);
    const auto& x = xn->value;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      if (x[i] > lo && x[i] < hi) gin[i] += self.grad[i];
    }
  });
}

template <class S>
BasicVar<S> channel_affine(const BasicVar<S>& input, const std::vector<S>& scale,
                           const std::vector<S>& shift) {
  check_defined(input.defined(), "channel_affine", "input");
  const Shape xs = input.shape();
  require(scale.size() == static_cast<std::size_t>(xs.c) && shift.size() == scale.size(),
          "channel_affine: expected " + std::to_string(xs.c) + " factors, got " +
              std::to_string(scale.size()) + "/" + std::to_string(shift.size()));
  BasicTensor<S> out(xs);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const S* ip = input.value().plane(n, c);
      S* op = out.plane(n, c);
      for (std::size_t i = 0; i < xs.plane(); ++i) op[i] = ip[i] * scale[c] + shift[c];
    }
  NodePtr<S> xn = input.node();
  return make_result<S>(std::move(out), {&input}, [xn, xs, scale](Node<S>& self) {
    S* gin = grad_target<S>(xn);
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        const std::size_t off = xn->value.index(n, c, 0, 0);
        k_axpy(xs.plane(), scale[c], self.grad.raw() + off, gin + off);
      }
  });
}

template <class S>
BasicVar<S> l1_mean(const BasicVar<S>& a, const BasicVar<S>& b) {
  check_defined(a.defined() && b.defined(), "l1_mean", "operand");
  require(a.shape() == b.shape(), "l1_mean: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  const std::size_t count = a.value().numel();
  require(count > 0, "l1_mean: empty operands");
  double acc = 0.0;
  for (std::size_t i = 0; i < count; ++i) acc += std::abs(double(a.value()[i]) - double(b.value()[i]));
  BasicTensor<S> out = BasicTensor<S>::scalar(static_cast<S>(acc / static_cast<double>(count)));
  NodePtr<S> an = a.node(), bn = b.node();
  return make_result<S>(std::move(out), {&a, &b}, [an, bn, count](Node<S>& self) {
    S* ga = grad_target<S>(an);
    S* gb = grad_target<S>(bn);
    const S g = self.grad[0] / static_cast<S>(count);
    for (std::size_t i = 0; i < count; ++i) {
      const S d = an->value[i] - bn->value[i];
      const S s = d > S(0) ? g : (d < S(0) ? -g : S(0));
      if (ga) ga[i] += s;
      if (gb) gb[i] -= s;
    }
  });
}

template <class S>
BasicVar<S> cosine_distance(const BasicVar<S>& a, const BasicVar<S>& b, S eps) {
  check_defined(a.defined() && b.defined(), "cosine_distance", "operand");
  require(a.shape() == b.shape(),
          "cosine_distance: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  const Shape s = a.shape();
  const std::size_t pixels = static_cast<std::size_t>(s.n) * s.plane();
  require(pixels > 0 && s.c > 0, "cosine_distance: empty operands");
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t plane = s.plane();

  // Per-pixel dot product and floored norms, retained for backward.
  std::vector<S> dots(pixels), na(pixels), nb(pixels);
  double total = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      S d = S(0), aa = S(0), bb = S(0);
      for (int c = 0; c < s.c; ++c) {
        const S x = av.plane(n, c)[p], y = bv.plane(n, c)[p];
        d += x * y;
        aa += x * x;
        bb += y * y;
      }
      const std::size_t k = static_cast<std::size_t>(n) * plane + p;
      dots[k] = d;
      na[k] = std::sqrt(aa);
      nb[k] = std::sqrt(bb);
      // Cauchy-Schwarz bound; rounding can push equal vectors just past 1.
      total += std::clamp(static_cast<double>(d / (std::max(na[k], eps) * std::max(nb[k], eps))), -1.0, 1.0);
    }
  BasicTensor<S> out = BasicTensor<S>::scalar(static_cast<S>(1.0 - total / static_cast<double>(pixels)));
  NodePtr<S> an = a.node(), bn = b.node();
  return make_result<S>(std::move(out), {&a, &b},
                        [an, bn, s, eps, pixels, plane, dots = std::move(dots), na = std::move(na),
                         nb = std::move(nb)](Node<S>& self) {
                          S* ga = grad_target<S>(an);
                          S* gb = grad_target<S>(bn);
                          const S g = -self.grad[0] / static_cast<S>(pixels);
                          for (int n = 0; n < s.n; ++n)
                            for (std::size_t p = 0; p < plane; ++p) {
                              const std::size_t k = static_cast<std::size_t>(n) * plane + p;
                              const S da = std::max(na[k], eps), db = std::max(nb[k], eps);
                              const S inv = S(1) / (da * db);
                              const S cosv = dots[k] * inv;
                              // d(da)/dx = x / |x| only where the floor is inactive.
                              const S ka = na[k] > eps ? cosv / (na[k] * da) : S(0);
                              const S kb = nb[k] > eps ? cosv / (nb[k] * db) : S(0);
                              for (int c = 0; c < s.c; ++c) {
                                const std::size_t i = an->value.index(n, c, 0, 0) + p;
                                const S x = an->value[i], y = bn->value[i];
                                if (ga) ga[i] += g * (y * inv - ka * x);
                                if (gb) gb[i] += g * (x * inv - kb * y);
                              }
                            }
                        });
}

#define WNET_INSTANTIATE_OPS(S)                                                                          \
  template BasicVar<S> conv2d(const BasicVar<S>&, const BasicVar<S>&, const BasicVar<S>&, int, int);     \
  template BasicVar<S> maxpool2x2(const BasicVar<S>&);                                                   \
  template BasicVar<S> avgpool2x2(const BasicVar<S>&);                                                   \
  template BasicVar<S> upsample_bilinear2x(const BasicVar<S>&);                                          \
  template BasicVar<S> global_avg_pool(const BasicVar<S>&);                                              \
  template BasicVar<S> fully_connected(const BasicVar<S>&, const BasicVar<S>&, const BasicVar<S>&);      \
  template BasicVar<S> prelu(const BasicVar<S>&, const BasicVar<S>&);                                    \
  template BasicVar<S> relu(const BasicVar<S>&);                                                         \
  template BasicVar<S> sigmoid(const BasicVar<S>&);                                                      \
  template BasicVar<S> add(const BasicVar<S>&, const BasicVar<S>&);                                      \
  template BasicVar<S> mul(const BasicVar<S>&, const BasicVar<S>&);                                      \
  template BasicVar<S> concat_channels(const BasicVar<S>&, const BasicVar<S>&);                          \
  template BasicVar<S> clamp(const BasicVar<S>&, S, S);                                                  \
  template BasicVar<S> channel_affine(const BasicVar<S>&, const std::vector<S>&, const std::vector<S>&); \
  template BasicVar<S> l1_mean(const BasicVar<S>&, const BasicVar<S>&);                                  \
  template BasicVar<S> cosine_distance(const BasicVar<S>&, const BasicVar<S>&, S);

WNET_INSTANTIATE_OPS(float)
WNET_INSTANTIATE_OPS(double)

}  // namespace wnet::ops

#pragma once

// Small reverse-mode tape over dense (channels x length) tensors. One tape
// records one example's forward pass; backward() replays the recorded
// closures in reverse and accumulates into caller-owned gradient buffers.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "embgen/common.hpp"

namespace embgen::ad {

struct Shape {
  std::size_t channels = 1;
  std::size_t length = 1;
  std::size_t size() const noexcept { return channels * length; }
  bool operator==(const Shape&) const = default;
};

struct Var {
  std::uint32_t id = 0;
};

class Tape {
 public:
  Tape() { nodes_.reserve(256); }

  void clear() { nodes_.clear(); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Leaf with no gradient.
  Var constant(std::vector<double> value, Shape shape) {
    assert(value.size() == shape.size());
    Node n;
    n.shape = shape;
    n.own = std::move(value);
    return push(std::move(n));
  }

  /// Leaf viewing external storage; gradients are added into `grad_accum`
  /// (may be empty to treat the leaf as constant).
  Var parameter(std::span<const double> value, std::span<double> grad_accum, Shape shape) {
    assert(value.size() == shape.size());
    Node n;
    n.shape = shape;
    n.ext = value;
    Var v = push(std::move(n));
    if (!grad_accum.empty() && track_) {
      nodes_[v.id].backward = [this, v, grad_accum] {
        const auto& g = nodes_[v.id].grad;
        for (std::size_t i = 0; i < g.size(); ++i) grad_accum[i] += g[i];
      };
    }
    return v;
  }

  std::span<const double> value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.ext.data() != nullptr ? n.ext : std::span<const double>(n.own);
  }
  Shape shape(Var v) const { return nodes_[v.id].shape; }
  double scalar(Var v) const { return value(v)[0]; }

  /// When false, no backward closures are recorded (inference only).
  void set_tracking(bool on) { track_ = on; }
  bool tracking() const noexcept { return track_; }

  /// Seeds d(root)/d(root) = seed and propagates to every recorded leaf.
  void backward(Var root, double seed = 1.0) {
    for (auto& n : nodes_) n.grad.assign(n.shape.size(), 0.0);
    nodes_[root.id].grad[0] = seed;
    for (std::size_t i = nodes_.size(); i-- > 0;)
      if (nodes_[i].backward) nodes_[i].backward();
  }

  // Internal access for op implementations.
  Var emit(Shape shape, std::vector<double> value) {
    Node n;
    n.shape = shape;
    n.own = std::move(value);
    return push(std::move(n));
  }
  void on_backward(Var v, std::function<void()> fn) {
    if (track_) nodes_[v.id].backward = std::move(fn);
  }
  std::vector<double>& grad(Var v) { return nodes_[v.id].grad; }

 private:
  struct Node {
    Shape shape;
    std::vector<double> own;
    std::span<const double> ext;
    std::vector<double> grad;
    std::function<void()> backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  bool track_ = true;
};

// ---------------------------------------------------------------------------
// Ops

/// y = W x + b with x viewed flat (n), W (m x n) row-major, b (m).
/// Output shape is `out_shape` (size m).
inline Var linear(Tape& t, Var x, Var w, Var b, Shape out_shape) {
  const auto xv = t.value(x), wv = t.value(w), bv = t.value(b);
  const std::size_t n = xv.size(), m = bv.size();
  assert(wv.size() == m * n && out_shape.size() == m);
  std::vector<double> y(m);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = bv[i];
    const double* row = wv.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) acc += row[j] * xv[j];
    y[i] = acc;
  }
  Var out = t.emit(out_shape, std::move(y));
  t.on_backward(out, [&t, x, w, b, out, n, m] {
    const auto& gy = t.grad(out);
    const auto xv = t.value(x), wv = t.value(w);
    auto& gx = t.grad(x);
    auto& gw = t.grad(w);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < m; ++i) {
      const double g = gy[i];
      if (g == 0.0) continue;
      gb[i] += g;
      const double* row = wv.data() + i * n;
      double* grow = gw.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        grow[j] += g * xv[j];
        gx[j] += g * row[j];
      }
    }
  });
  return out;
}

/// 1D convolution. x (Cin x L), w (Cout x Cin*K) laid out [co][ci][k], b (Cout).
/// Zero padding `pad` on both sides; output length (L + 2 pad - K)/stride + 1.
inline Var conv1d(Tape& t, Var x, Var w, Var b, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const Shape xs = t.shape(x);
  const std::size_t cin = xs.channels, len = xs.length;
  const std::size_t cout = t.value(b).size();
  assert(t.value(w).size() == cout * cin * kernel);
  const std::size_t lout = (len + 2 * pad - kernel) / stride + 1;
  const auto xv = t.value(x), wv = t.value(w), bv = t.value(b);
  std::vector<double> y(cout * lout);
  for (std::size_t co = 0; co < cout; ++co) {
    double* yrow = y.data() + co * lout;
    std::fill(yrow, yrow + lout, bv[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* xrow = xv.data() + ci * len;
      const double* wk = wv.data() + (co * cin + ci) * kernel;
      for (std::size_t k = 0; k < kernel; ++k) {
        const double wval = wk[k];
        for (std::size_t o = 0; o < lout; ++o) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(o * stride + k) - static_cast<std::ptrdiff_t>(pad);
          if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) yrow[o] += wval * xrow[pos];
        }
      }
    }
  }
  Var out = t.emit({cout, lout}, std::move(y));
  t.on_backward(out, [&t, x, w, b, out, cin, len, cout, lout, kernel, stride, pad] {
    const auto& gy = t.grad(out);
    const auto xv = t.value(x), wv = t.value(w);
    auto& gx = t.grad(x);
    auto& gw = t.grad(w);
    auto& gb = t.grad(b);
    for (std::size_t co = 0; co < cout; ++co) {
      const double* gyrow = gy.data() + co * lout;
      for (std::size_t o = 0; o < lout; ++o) gb[co] += gyrow[o];
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* xrow = xv.data() + ci * len;
        double* gxrow = gx.data() + ci * len;
        const std::size_t widx = (co * cin + ci) * kernel;
        for (std::size_t k = 0; k < kernel; ++k) {
          const double wval = wv[widx + k];
          double gwacc = 0.0;
          for (std::size_t o = 0; o < lout; ++o) {
            const std::ptrdiff_t pos =
                static_cast<std::ptrdiff_t>(o * stride + k) - static_cast<std::ptrdiff_t>(pad);
            if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) {
              gwacc += gyrow[o] * xrow[pos];
              gxrow[pos] += gyrow[o] * wval;
            }
          }
          gw[widx + k] += gwacc;
        }
      }
    }
  });
  return out;
}

inline Var add(Tape& t, Var a, Var b) {
  const auto av = t.value(a), bv = t.value(b);
  assert(av.size() == bv.size());
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  Var out = t.emit(t.shape(a), std::move(y));
  t.on_backward(out, [&t, a, b, out] {
    const auto& g = t.grad(out);
    auto& ga = t.grad(a);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
  return out;
}

/// x * sigmoid(x)
inline Var swish(Tape& t, Var a) {
  const auto av = t.value(a);
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] / (1.0 + std::exp(-av[i]));
  Var out = t.emit(t.shape(a), std::move(y));
  t.on_backward(out, [&t, a, out] {
    const auto& g = t.grad(out);
    const auto av = t.value(a);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-av[i]));
      ga[i] += g[i] * (s + av[i] * s * (1.0 - s));
    }
  });
  return out;
}

inline Var tanh(Tape& t, Var a) {
  const auto av = t.value(a);
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(av[i]);
  Var out = t.emit(t.shape(a), std::move(y));
  t.on_backward(out, [&t, a, out] {
    const auto& g = t.grad(out);
    const auto yv = t.value(out);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - yv[i] * yv[i]);
  });
  return out;
}

/// Elementwise clamp; gradient passes only strictly inside (lo, hi).
inline Var clamp(Tape& t, Var a, double lo, double hi) {
  const auto av = t.value(a);
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::clamp(av[i], lo, hi);
  Var out = t.emit(t.shape(a), std::move(y));
  t.on_backward(out, [&t, a, out, lo, hi] {
    const auto& g = t.grad(out);
    const auto av = t.value(a);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] > lo && av[i] < hi) ga[i] += g[i];
  });
  return out;
}

/// Contiguous sub-range [offset, offset + count) of the flattened tensor.
inline Var slice(Tape& t, Var a, std::size_t offset, std::size_t count) {
  const auto av = t.value(a);
  assert(offset + count <= av.size());
  std::vector<double> y(av.begin() + offset, av.begin() + offset + count);
  Var out = t.emit({count, 1}, std::move(y));
  t.on_backward(out, [&t, a, out, offset] {
    const auto& g = t.grad(out);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
  });
  return out;
}

/// Same data, new shape.
inline Var reshape(Tape& t, Var a, Shape s) {
  const auto av = t.value(a);
  assert(av.size() == s.size());
  Var out = t.emit(s, std::vector<double>(av.begin(), av.end()));
  t.on_backward(out, [&t, a, out] {
    const auto& g = t.grad(out);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

/// Channel concatenation of tensors with equal length.
inline Var concat_channels(Tape& t, Var a, Var b) {
  const Shape as = t.shape(a), bs = t.shape(b);
  assert(as.length == bs.length);
  const auto av = t.value(a), bv = t.value(b);
  std::vector<double> y;
  y.reserve(av.size() + bv.size());
  y.insert(y.end(), av.begin(), av.end());
  y.insert(y.end(), bv.begin(), bv.end());
  Var out = t.emit({as.channels + bs.channels, as.length}, std::move(y));
  const std::size_t na = av.size();
  t.on_backward(out, [&t, a, b, out, na] {
    const auto& g = t.grad(out);
    auto& ga = t.grad(a);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    for (std::size_t i = na; i < g.size(); ++i) gb[i - na] += g[i];
  });
  return out;
}

/// Averages equal-width windows along length: (C x L) -> (C x bins); L % bins == 0.
inline Var avg_pool(Tape& t, Var a, std::size_t bins) {
  const Shape s = t.shape(a);
  assert(s.length % bins == 0);
  const std::size_t width = s.length / bins;
  if (width == 1) return a;
  const auto av = t.value(a);
  std::vector<double> y(s.channels * bins, 0.0);
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t i = 0; i < s.length; ++i) y[c * bins + i / width] += av[c * s.length + i] / width;
  Var out = t.emit({s.channels, bins}, std::move(y));
  t.on_backward(out, [&t, a, out, s, bins, width] {
    const auto& g = t.grad(out);
    auto& ga = t.grad(a);
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t i = 0; i < s.length; ++i) ga[c * s.length + i] += g[c * bins + i / width] / width;
  });
  return out;
}

/// Nearest-neighbour upsampling along length: (C x P) -> (C x L); L % P == 0.
inline Var upsample(Tape& t, Var a, std::size_t length) {
  const Shape s = t.shape(a);
  assert(length % s.length == 0);
  const std::size_t factor = length / s.length;
  if (factor == 1) return a;
  const auto av = t.value(a);
  std::vector<double> y(s.channels * length);
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t i = 0; i < length; ++i) y[c * length + i] = av[c * s.length + i / factor];
  Var out = t.emit({s.channels, length}, std::move(y));
  t.on_backward(out, [&t, a, out, s, length, factor] {
    const auto& g = t.grad(out);
    auto& ga = t.grad(a);
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t i = 0; i < length; ++i) ga[c * s.length + i / factor] += g[c * length + i];
  });
  return out;
}

/// mean + exp(0.5 logvar) * noise, with `noise` held constant.
inline Var reparameterize(Tape& t, Var mean, Var logvar, std::span<const double> noise) {
  const auto mv = t.value(mean), lv = t.value(logvar);
  assert(mv.size() == lv.size() && noise.size() == mv.size());
  std::vector<double> y(mv.size());
  std::vector<double> eps(noise.begin(), noise.end());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = mv[i] + std::exp(0.5 * lv[i]) * eps[i];
  Var out = t.emit(t.shape(mean), std::move(y));
  t.on_backward(out, [&t, mean, logvar, out, eps = std::move(eps)] {
    const auto& g = t.grad(out);
    const auto lv = t.value(logvar);
    auto& gm = t.grad(mean);
    auto& gl = t.grad(logvar);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gm[i] += g[i];
      gl[i] += g[i] * 0.5 * std::exp(0.5 * lv[i]) * eps[i];
    }
  });
  return out;
}

/// Scalar Σ_i log N(x_i; mean_i, exp(logvar_i)), x constant.
inline Var gaussian_log_density(Tape& t, std::span<const double> x, Var mean, Var logvar) {
  const auto mv = t.value(mean), lv = t.value(logvar);
  assert(mv.size() == x.size() && lv.size() == x.size());
  constexpr double log2pi = 1.8378770664093454835606594728112;
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mv[i];
    acc += -0.5 * (log2pi + lv[i] + d * d * std::exp(-lv[i]));
  }
  std::vector<double> xs(x.begin(), x.end());
  Var out = t.emit({1, 1}, {acc});
  t.on_backward(out, [&t, mean, logvar, out, xs = std::move(xs)] {
    const double g = t.grad(out)[0];
    const auto mv = t.value(mean), lv = t.value(logvar);
    auto& gm = t.grad(mean);
    auto& gl = t.grad(logvar);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double d = xs[i] - mv[i];
      const double inv = std::exp(-lv[i]);
      gm[i] += g * d * inv;
      gl[i] += g * (-0.5 + 0.5 * d * d * inv);
    }
  });
  return out;
}

/// Closed-form KL(N(mq, e^lq) || N(mp, e^lp)) summed over dimensions.
inline double kl_diag_value(std::span<const double> mq, std::span<const double> lq, std::span<const double> mp,
                            std::span<const double> lp) {
  double acc = 0.0;
  for (std::size_t i = 0; i < mq.size(); ++i) {
    const double d = mq[i] - mp[i];
    acc += 0.5 * (lp[i] - lq[i] + (std::exp(lq[i]) + d * d) * std::exp(-lp[i]) - 1.0);
  }
  return acc;
}

/// Scalar KL between diagonal Gaussians; pass the same Var twice for neither.
inline Var kl_diag(Tape& t, Var mq, Var lq, Var mp, Var lp) {
  Var out = t.emit({1, 1}, {kl_diag_value(t.value(mq), t.value(lq), t.value(mp), t.value(lp))});
  t.on_backward(out, [&t, mq, lq, mp, lp, out] {
    const double g = t.grad(out)[0];
    const auto mqv = t.value(mq), lqv = t.value(lq), mpv = t.value(mp), lpv = t.value(lp);
    auto& gmq = t.grad(mq);
    auto& glq = t.grad(lq);
    auto& gmp = t.grad(mp);
    auto& glp = t.grad(lp);
    for (std::size_t i = 0; i < mqv.size(); ++i) {
      const double inv = std::exp(-lpv[i]);
      const double d = mqv[i] - mpv[i];
      gmq[i] += g * d * inv;
      gmp[i] -= g * d * inv;
      glq[i] += g * 0.5 * (std::exp(lqv[i]) * inv - 1.0);
      glp[i] += g * 0.5 * (1.0 - (std::exp(lqv[i]) + d * d) * inv);
    }
  });
  return out;
}

/// max(a, floor) for a scalar; gradient passes only when a > floor.
inline Var floor_at(Tape& t, Var a, double floor) {
  const double av = t.scalar(a);
  Var out = t.emit({1, 1}, {std::max(av, floor)});
  t.on_backward(out, [&t, a, out, floor] {
    if (t.scalar(a) > floor) t.grad(a)[0] += t.grad(out)[0];
  });
  return out;
}

/// Σ_i coeffs[i] * terms[i] over scalars.
inline Var weighted_sum(Tape& t, std::span<const Var> terms, std::span<const double> coeffs) {
  assert(terms.size() == coeffs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) acc += coeffs[i] * t.scalar(terms[i]);
  Var out = t.emit({1, 1}, {acc});
  std::vector<Var> ts(terms.begin(), terms.end());
  std::vector<double> cs(coeffs.begin(), coeffs.end());
  t.on_backward(out, [&t, out, ts = std::move(ts), cs = std::move(cs)] {
    const double g = t.grad(out)[0];
    for (std::size_t i = 0; i < ts.size(); ++i) t.grad(ts[i])[0] += g * cs[i];
  });
  return out;
}

}  // namespace embgen::ad

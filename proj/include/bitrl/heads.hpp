#pragma once

// Trainable policy and value heads: in -> 256 -> 128 -> out MLPs with tanh
// hidden activations, exact manual backprop and an Adam optimizer with
// global-norm gradient clipping. These are the only trained parameters.
//
// Weights are stored input-major (in x out) so a batch forward is X * W + b.
// After every optimizer step parameters are rounded to float32.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "bitrl/backbone.hpp"
#include "bitrl/error.hpp"
#include "bitrl/tensor.hpp"

namespace bitrl {

inline constexpr std::size_t kHeadHidden1 = 256;
inline constexpr std::size_t kHeadHidden2 = 128;

enum class HeadActivation { tanh, identity };

struct DenseLayer {
  DenseMatrix w;  // in x out
  DenseVector b;  // out

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct HeadParams {
  std::array<DenseLayer, 3> layers;
  HeadActivation activation = HeadActivation::tanh;

  std::size_t input_dim() const { return layers[0].w.rows(); }
  std::size_t output_dim() const { return layers[2].w.cols(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.w.size() + l.b.size();
    return n;
  }

  friend bool operator==(const HeadParams&, const HeadParams&) = default;
};

// Same shapes as HeadParams.
struct HeadGradients {
  std::array<DenseLayer, 3> layers;

  static HeadGradients zeros_like(const HeadParams& p) {
    HeadGradients g;
    for (std::size_t i = 0; i < 3; ++i) {
      g.layers[i].w = DenseMatrix(p.layers[i].w.rows(), p.layers[i].w.cols());
      g.layers[i].b = DenseVector(p.layers[i].b.size(), 0.0);
    }
    return g;
  }

  void scale(double s) {
    for (auto& l : layers) {
      for (double& v : l.w.data()) v *= s;
      for (double& v : l.b) v *= s;
    }
  }

  void add(const HeadGradients& o) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t k = 0; k < layers[i].w.size(); ++k) layers[i].w.data()[k] += o.layers[i].w.data()[k];
      for (std::size_t k = 0; k < layers[i].b.size(); ++k) layers[i].b[k] += o.layers[i].b[k];
    }
  }

  double sum_of_squares() const {
    double s = 0.0;
    for (const auto& l : layers) {
      const double nw = norm2(l.w.data());
      const double nb = norm2(l.b);
      s += nw * nw + nb * nb;
    }
    return s;
  }

  bool all_finite() const {
    for (const auto& l : layers) {
      if (!l.w.all_finite()) return false;
      for (double v : l.b) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }
};

namespace detail {

// in x out matrix with orthonormal columns (in >= out) or rows (in < out),
// scaled by gain. Modified Gram-Schmidt on a Gaussian draw.
inline DenseMatrix orthogonal(std::size_t in, std::size_t out, double gain, RngStream& rng) {
  const std::size_t tall = std::max(in, out);
  const std::size_t narrow = std::min(in, out);
  DenseMatrix a = random_normal(narrow, tall, rng);  // rows are the vectors to orthonormalize
  for (std::size_t i = 0; i < narrow; ++i) {
    auto vi = a.row(i);
    for (std::size_t j = 0; j < i; ++j) {
      const auto vj = a.row(j);
      const double p = dot(vi, vj);
      for (std::size_t k = 0; k < tall; ++k) vi[k] -= p * vj[k];
    }
    const double n = norm2(vi);
    if (!(n > 1e-12)) throw Error(ErrorKind::degenerate_input, "orthogonal init: rank-deficient draw");
    for (double& v : vi) v /= n;
  }
  DenseMatrix w(in, out);
  for (std::size_t i = 0; i < narrow; ++i) {
    for (std::size_t k = 0; k < tall; ++k) {
      const double v = round_to_float(gain * a(i, k));
      if (in >= out) w(k, i) = v;
      else w(i, k) = v;
    }
  }
  return w;
}

// y = x * w + b for every row of x; inner loop runs over outputs.
inline void affine(const DenseMatrix& x, const DenseLayer& l, DenseMatrix& y) {
  const std::size_t n = x.rows(), in = l.w.rows(), out = l.w.cols();
  if (x.cols() != in) throw Error(ErrorKind::dimension_mismatch, "head: input width mismatch");
  y = DenseMatrix(n, out);
  for (std::size_t r = 0; r < n; ++r) {
    double* yr = y.row(r).data();
    for (std::size_t j = 0; j < out; ++j) yr[j] = l.b[j];
    const double* xr = x.row(r).data();
    for (std::size_t k = 0; k < in; ++k) {
      const double xv = xr[k];
      const double* wk = l.w.row(k).data();
      for (std::size_t j = 0; j < out; ++j) yr[j] += xv * wk[j];
    }
  }
}

inline void activate(HeadActivation act, DenseMatrix& z) {
  if (act == HeadActivation::tanh) {
    for (double& v : z.data()) v = std::tanh(v);
  }
}

}  // namespace detail

// Hidden layers orthogonal with gain sqrt(2), output layer orthogonal with
// output_gain (0.01 for policies, 1.0 for values), zero biases.
inline HeadParams make_head(std::size_t in, std::size_t out, double output_gain, RngStream& rng) {
  if (in == 0 || out == 0) throw Error(ErrorKind::invalid_argument, "make_head: zero dimension");
  HeadParams p;
  const double g = std::sqrt(2.0);
  p.layers[0] = {detail::orthogonal(in, kHeadHidden1, g, rng), DenseVector(kHeadHidden1, 0.0)};
  p.layers[1] = {detail::orthogonal(kHeadHidden1, kHeadHidden2, g, rng), DenseVector(kHeadHidden2, 0.0)};
  p.layers[2] = {detail::orthogonal(kHeadHidden2, out, output_gain, rng), DenseVector(out, 0.0)};
  return p;
}

inline constexpr double kPolicyOutputGain = 0.01;
inline constexpr double kValueOutputGain = 1.0;

inline HeadParams make_policy_head(std::size_t in, std::size_t actions, RngStream& rng) {
  if (actions < 2) throw Error(ErrorKind::invalid_argument, "policy head needs at least 2 actions");
  return make_head(in, actions, kPolicyOutputGain, rng);
}

inline HeadParams make_value_head(std::size_t in, RngStream& rng) { return make_head(in, 1, kValueOutputGain, rng); }

// Activations kept by forward for backward.
struct HeadCache {
  DenseMatrix input, hidden1, hidden2;
  bool valid = false;
};

// Batch forward: rows of x are latents, rows of the result are head outputs.
inline DenseMatrix head_forward(const HeadParams& p, const DenseMatrix& x, HeadCache* cache = nullptr) {
  DenseMatrix a1, a2, out;
  detail::affine(x, p.layers[0], a1);
  detail::activate(p.activation, a1);
  detail::affine(a1, p.layers[1], a2);
  detail::activate(p.activation, a2);
  detail::affine(a2, p.layers[2], out);
  if (cache) {
    cache->input = x;
    cache->hidden1 = std::move(a1);
    cache->hidden2 = std::move(a2);
    cache->valid = true;
  }
  return out;
}

inline DenseMatrix as_row(std::span<const double> h) { return DenseMatrix(1, h.size(), DenseVector(h.begin(), h.end())); }

inline DenseVector policy_logits(const HeadParams& p, std::span<const double> h) {
  return head_forward(p, as_row(h)).data();
}

inline DenseVector policy_forward(const HeadParams& p, std::span<const double> h) {
  if (p.output_dim() < 2) throw Error(ErrorKind::invalid_argument, "policy_forward: out dim must be >= 2");
  return softmax(policy_logits(p, h));
}

inline double value_forward(const HeadParams& p, std::span<const double> h) {
  if (p.output_dim() != 1) throw Error(ErrorKind::invalid_argument, "value_forward: out dim must be 1");
  return head_forward(p, as_row(h))(0, 0);
}

// Gradients of sum_r <d_out[r], f(x_r)> with respect to every parameter,
// accumulated over the batch. If d_input is given it receives the gradient
// with respect to the head input rows.
inline HeadGradients backward(const HeadParams& p, const HeadCache& cache, const DenseMatrix& d_out,
                              DenseMatrix* d_input = nullptr) {
  if (!cache.valid) throw Error(ErrorKind::invalid_argument, "backward: no forward cache");
  const std::size_t n = cache.input.rows();
  if (d_out.rows() != n || d_out.cols() != p.output_dim()) {
    throw Error(ErrorKind::dimension_mismatch, "backward: upstream gradient shape");
  }
  HeadGradients g = HeadGradients::zeros_like(p);
  const DenseMatrix* acts[3] = {&cache.input, &cache.hidden1, &cache.hidden2};

  DenseMatrix delta = d_out;  // gradient w.r.t. the pre-activation of the current layer
  for (std::size_t li = 3; li-- > 0;) {
    const DenseLayer& layer = p.layers[li];
    DenseLayer& gl = g.layers[li];
    const DenseMatrix& a = *acts[li];
    const std::size_t in = layer.w.rows(), out = layer.w.cols();
    for (std::size_t r = 0; r < n; ++r) {
      const double* dr = delta.row(r).data();
      const double* ar = a.row(r).data();
      for (std::size_t k = 0; k < in; ++k) {
        const double av = ar[k];
        double* gw = gl.w.row(k).data();
        for (std::size_t j = 0; j < out; ++j) gw[j] += av * dr[j];
      }
      for (std::size_t j = 0; j < out; ++j) gl.b[j] += dr[j];
    }
    if (li == 0 && !d_input) break;
    // Back through the weights: d_prev[r][k] = sum_j w[k][j] delta[r][j].
    const DenseMatrix wt = transpose(layer.w);
    DenseMatrix prev(n, in);
    for (std::size_t r = 0; r < n; ++r) {
      const double* dr = delta.row(r).data();
      double* pr = prev.row(r).data();
      for (std::size_t j = 0; j < out; ++j) {
        const double dv = dr[j];
        const double* wj = wt.row(j).data();
        for (std::size_t k = 0; k < in; ++k) pr[k] += dv * wj[k];
      }
    }
    if (li == 0) {
      *d_input = std::move(prev);
      break;
    }
    if (p.activation == HeadActivation::tanh) {
      for (std::size_t i = 0; i < prev.size(); ++i) {
        const double y = a.data()[i];
        prev.data()[i] *= 1.0 - y * y;
      }
    }
    delta = std::move(prev);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Optimizer.

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  HeadGradients m, v;
  std::uint64_t t = 0;

  static AdamState for_params(const HeadParams& p) {
    return {HeadGradients::zeros_like(p), HeadGradients::zeros_like(p), 0};
  }
};

struct UpdateOutcome {
  double grad_norm = 0.0;     // before clipping
  double applied_norm = 0.0;  // after clipping
  bool applied = false;       // false when the gradient was non-finite
};

inline double global_norm(const HeadGradients& g) { return std::sqrt(g.sum_of_squares()); }

// Clips g in place to global norm max_norm (max_norm <= 0 disables clipping).
inline double clip_global_norm(HeadGradients& g, double max_norm) {
  const double n = global_norm(g);
  if (max_norm > 0.0 && n > max_norm) {
    g.scale(max_norm / n);
    return max_norm;
  }
  return n;
}

// One Adam step on a clipped copy of grads. Non-finite gradients leave params
// and optimizer state untouched and report applied = false.
inline UpdateOutcome apply_update(HeadParams& p, HeadGradients grads, AdamState& st, double lr, double max_norm,
                                  const AdamConfig& cfg = {}) {
  if (!(lr > 0.0)) throw Error(ErrorKind::invalid_argument, "apply_update: lr must be > 0");
  UpdateOutcome out;
  if (!grads.all_finite()) {
    out.grad_norm = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  out.grad_norm = global_norm(grads);
  out.applied_norm = clip_global_norm(grads, max_norm);
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  auto step = [&](std::span<double> w, std::span<const double> g, std::span<double> m, std::span<double> v) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] = round_to_float(w[i] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  };
  for (std::size_t li = 0; li < 3; ++li) {
    step(p.layers[li].w.data(), grads.layers[li].w.data(), st.m.layers[li].w.data(), st.v.layers[li].w.data());
    step(p.layers[li].b, grads.layers[li].b, st.m.layers[li].b, st.v.layers[li].b);
  }
  out.applied = true;
  return out;
}

// Flattened parameters in layer order (w then b per layer).
inline DenseVector flatten(const std::array<DenseLayer, 3>& layers) {
  DenseVector out;
  for (const auto& l : layers) {
    out.insert(out.end(), l.w.data().begin(), l.w.data().end());
    out.insert(out.end(), l.b.begin(), l.b.end());
  }
  return out;
}

}  // namespace bitrl

#pragma once

// Deterministic numerical kernels shared by all model modules: dense linear
// algebra, activations, the LSTM cell with its backward pass, losses, the
// SGD optimizer with gradient clipping, inverted dropout, and a
// finite-difference gradient checker. Everything here is a pure function
// over its inputs; state (velocity, rng) is passed explicitly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vqakit/core.hpp"

namespace vqakit::numkit {

inline float sigmoidf(float x) {
  return x >= 0.0f ? 1.0f / (1.0f + std::exp(-x))
                   : std::exp(x) / (1.0f + std::exp(x));
}

// ---------------------------------------------------------------------------
// Dense linear algebra on row-major matrices.

// y = W x (+ y if accumulate). W is {m, n}, x has n entries, y has m.
inline void matvec(const Tensor& w, std::span<const float> x, std::span<float> y,
                   bool accumulate = false) {
  VQAKIT_REQUIRE(w.shape().size() == 2, "matvec: W must be 2-D");
  const int m = w.rows(), n = w.cols();
  VQAKIT_REQUIRE(static_cast<int>(x.size()) == n && static_cast<int>(y.size()) == m,
                 "matvec: dimension mismatch");
  for (int i = 0; i < m; ++i) {
    const float* row = w.data() + static_cast<std::size_t>(i) * n;
    double acc = accumulate ? y[i] : 0.0;
    for (int j = 0; j < n; ++j) acc += static_cast<double>(row[j]) * x[j];
    y[i] = static_cast<float>(acc);
  }
}

// x = W^T dy (+ x if accumulate). W is {m, n}, dy has m entries, x has n.
inline void matvec_t(const Tensor& w, std::span<const float> dy, std::span<float> dx,
                     bool accumulate = false) {
  const int m = w.rows(), n = w.cols();
  VQAKIT_REQUIRE(static_cast<int>(dy.size()) == m && static_cast<int>(dx.size()) == n,
                 "matvec_t: dimension mismatch");
  if (!accumulate) std::fill(dx.begin(), dx.end(), 0.0f);
  for (int i = 0; i < m; ++i) {
    const float* row = w.data() + static_cast<std::size_t>(i) * n;
    const float d = dy[i];
    if (d == 0.0f) continue;
    for (int j = 0; j < n; ++j) dx[j] += d * row[j];
  }
}

// dW += dy x^T. dW is {m, n}.
inline void outer_acc(Tensor& dw, std::span<const float> dy, std::span<const float> x) {
  const int m = dw.rows(), n = dw.cols();
  VQAKIT_REQUIRE(static_cast<int>(dy.size()) == m && static_cast<int>(x.size()) == n,
                 "outer_acc: dimension mismatch");
  for (int i = 0; i < m; ++i) {
    float* row = dw.data() + static_cast<std::size_t>(i) * n;
    const float d = dy[i];
    if (d == 0.0f) continue;
    for (int j = 0; j < n; ++j) row[j] += d * x[j];
  }
}

inline void axpy(float a, std::span<const float> x, std::span<float> y) {
  VQAKIT_REQUIRE(x.size() == y.size(), "axpy: size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

// ---------------------------------------------------------------------------
// softmax / cross-entropy

// Max-shifted softmax. Output is nonnegative, sums to 1 within 1e-6, and is
// invariant under adding a constant to all logits.
inline std::vector<float> softmax(std::span<const float> logits) {
  VQAKIT_REQUIRE(!logits.empty(), "softmax: empty input");
  float mx = logits[0];
  for (float v : logits) {
    VQAKIT_REQUIRE(std::isfinite(v), "softmax: non-finite logit");
    mx = std::max(mx, v);
  }
  std::vector<float> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  const float inv = static_cast<float>(1.0 / sum);
  for (float& v : out) v *= inv;
  return out;
}

// -log p[target], with p clamped below at 1e-12 before the log.
inline float cross_entropy(std::span<const float> probs, int target) {
  VQAKIT_REQUIRE(target >= 0 && target < static_cast<int>(probs.size()),
                 "cross_entropy: target out of range");
  const double p = std::max(static_cast<double>(probs[target]), 1e-12);
  return static_cast<float>(-std::log(p));
}

// Fused softmax + cross-entropy: returns the loss and writes the gradient
// w.r.t. the logits (p - onehot(target)) into dlogits.
inline float softmax_xent(std::span<const float> logits, int target,
                          std::span<float> dlogits) {
  const std::vector<float> p = softmax(logits);
  VQAKIT_REQUIRE(dlogits.size() == p.size(), "softmax_xent: gradient size mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) dlogits[i] = p[i];
  dlogits[static_cast<std::size_t>(target)] -= 1.0f;
  return cross_entropy(p, target);
}

// ---------------------------------------------------------------------------
// LSTM cell
//
// Standard formulation, gate order [input, forget, candidate, output] stacked
// along the first axis of each parameter:
//   i = sigmoid(Wx_i x + Wh_i h + b_i)      f = sigmoid(.....)
//   g = tanh   (Wx_g x + Wh_g h + b_g)      o = sigmoid(.....)
//   c' = f*c + i*g                          h' = o * tanh(c')
// Forget-gate bias is initialized to 1.

struct LstmState {
  std::vector<float> h;
  std::vector<float> c;

  LstmState() = default;
  explicit LstmState(int d_h) : h(d_h, 0.0f), c(d_h, 0.0f) {}
};

struct LstmParams {
  Tensor w_x;  // {4H, D}
  Tensor w_h;  // {4H, H}
  Tensor b;    // {4H}

  int input_dim() const { return w_x.cols(); }
  int hidden_dim() const { return w_h.cols(); }

  static LstmParams init(int d_in, int d_h, Rng& rng, float scale = 0.08f,
                         float forget_bias = 1.0f) {
    LstmParams p;
    p.w_x = Tensor({4 * d_h, d_in});
    p.w_h = Tensor({4 * d_h, d_h});
    p.b = Tensor({4 * d_h});
    rng.fill_uniform(p.w_x, -scale, scale);
    rng.fill_uniform(p.w_h, -scale, scale);
    for (int i = d_h; i < 2 * d_h; ++i) p.b[i] = forget_bias;
    return p;
  }
};

struct LstmGrads {
  Tensor w_x, w_h, b;

  explicit LstmGrads(const LstmParams& p)
      : w_x(p.w_x.shape()), w_h(p.w_h.shape()), b(p.b.shape()) {}
};

// Per-step values the backward pass needs.
struct LstmCellCache {
  std::vector<float> x;
  std::vector<float> h_prev, c_prev;
  std::vector<float> i, f, g, o;
  std::vector<float> c_new, tanh_c;
};

inline LstmState lstm_cell(const LstmParams& p, std::span<const float> x,
                           const LstmState& prev, LstmCellCache* cache = nullptr) {
  const int d_h = p.hidden_dim();
  VQAKIT_REQUIRE(static_cast<int>(x.size()) == p.input_dim(),
                 "lstm_cell: input dimension mismatch");
  VQAKIT_REQUIRE(static_cast<int>(prev.h.size()) == d_h &&
                     static_cast<int>(prev.c.size()) == d_h,
                 "lstm_cell: state dimension mismatch");

  std::vector<float> z(4 * d_h);
  for (int k = 0; k < 4 * d_h; ++k) z[k] = p.b[k];
  matvec(p.w_x, x, z, /*accumulate=*/true);
  matvec(p.w_h, prev.h, z, /*accumulate=*/true);

  LstmState out(d_h);
  std::vector<float> gi(d_h), gf(d_h), gg(d_h), go(d_h), tc(d_h);
  for (int k = 0; k < d_h; ++k) {
    gi[k] = sigmoidf(z[k]);
    gf[k] = sigmoidf(z[d_h + k]);
    gg[k] = std::tanh(z[2 * d_h + k]);
    go[k] = sigmoidf(z[3 * d_h + k]);
    out.c[k] = gf[k] * prev.c[k] + gi[k] * gg[k];
    tc[k] = std::tanh(out.c[k]);
    out.h[k] = go[k] * tc[k];
  }
  if (cache) {
    cache->x.assign(x.begin(), x.end());
    cache->h_prev = prev.h;
    cache->c_prev = prev.c;
    cache->i = std::move(gi);
    cache->f = std::move(gf);
    cache->g = std::move(gg);
    cache->o = std::move(go);
    cache->c_new = out.c;
    cache->tanh_c = std::move(tc);
  }
  return out;
}

// Backward through one cell step. dh/dc are gradients w.r.t. the step's
// outputs; gradients w.r.t. the step's inputs are written to dx/dh_prev and
// dc is overwritten with the gradient w.r.t. the previous cell vector.
// Parameter gradients accumulate into g.
inline void lstm_cell_backward(const LstmParams& p, const LstmCellCache& cc,
                               std::span<const float> dh, std::vector<float>& dc,
                               LstmGrads& g, std::span<float> dx,
                               std::vector<float>& dh_prev) {
  const int d_h = p.hidden_dim();
  std::vector<float> dz(4 * d_h);
  for (int k = 0; k < d_h; ++k) {
    const float do_ = dh[k] * cc.tanh_c[k];
    const float dc_total = dc[k] + dh[k] * cc.o[k] * (1.0f - cc.tanh_c[k] * cc.tanh_c[k]);
    const float di = dc_total * cc.g[k];
    const float df = dc_total * cc.c_prev[k];
    const float dg = dc_total * cc.i[k];
    dz[k] = di * cc.i[k] * (1.0f - cc.i[k]);
    dz[d_h + k] = df * cc.f[k] * (1.0f - cc.f[k]);
    dz[2 * d_h + k] = dg * (1.0f - cc.g[k] * cc.g[k]);
    dz[3 * d_h + k] = do_ * cc.o[k] * (1.0f - cc.o[k]);
    dc[k] = dc_total * cc.f[k];
  }
  outer_acc(g.w_x, dz, cc.x);
  outer_acc(g.w_h, dz, cc.h_prev);
  for (int k = 0; k < 4 * d_h; ++k) g.b[k] += dz[k];
  matvec_t(p.w_x, dz, dx, /*accumulate=*/true);
  dh_prev.assign(d_h, 0.0f);
  matvec_t(p.w_h, dz, dh_prev, /*accumulate=*/true);
}

// ---------------------------------------------------------------------------
// Optimizer

// Global-L2-norm clipping across a set of gradient tensors. If the norm is
// above max_norm every component is scaled by max_norm/norm; the direction
// is preserved exactly. Returns the applied scale.
inline float clip_gradients(std::vector<Tensor*> grads, float max_norm) {
  VQAKIT_REQUIRE(max_norm > 0.0f, "clip_gradients: max_norm must be positive");
  double sq = 0.0;
  for (const Tensor* g : grads)
    for (std::size_t i = 0; i < g->numel(); ++i)
      sq += static_cast<double>((*g)[i]) * (*g)[i];
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return 1.0f;
  const float scale = static_cast<float>(max_norm / norm);
  for (Tensor* g : grads)
    for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] *= scale;
  return scale;
}

// SGD with classical momentum: v <- mu*v + g, p <- p - lr*v. With mu = 0 the
// velocity drops out and the update is plain p <- p - lr*g.
inline void sgd_step(Tensor& params, const Tensor& grads, float lr, float momentum,
                     Tensor& velocity) {
  VQAKIT_REQUIRE(params.same_shape(grads), "sgd_step: param/grad shape mismatch");
  if (velocity.numel() == 0) velocity = Tensor(params.shape());
  VQAKIT_REQUIRE(params.same_shape(velocity), "sgd_step: param/velocity shape mismatch");
  for (std::size_t i = 0; i < params.numel(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

// ---------------------------------------------------------------------------
// Dropout

// Inverted dropout: entries are 0 with probability p_drop, else
// 1/(1 - p_drop), so the expected value of each entry is 1. Masks are only
// ever applied in training mode.
inline std::vector<float> dropout_mask(Rng& rng, float p_drop, std::size_t size) {
  VQAKIT_REQUIRE(p_drop >= 0.0f && p_drop < 1.0f, "dropout_mask: p_drop must be in [0,1)");
  std::vector<float> mask(size, 1.0f);
  if (p_drop == 0.0f) return mask;
  const float keep = 1.0f / (1.0f - p_drop);
  for (std::size_t i = 0; i < size; ++i)
    mask[i] = (rng.next_double() < p_drop) ? 0.0f : keep;
  return mask;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckReport {
  struct Entry {
    std::string name;
    float max_rel_error = 0.0f;
  };
  std::vector<Entry> per_param;
  float max_rel_error = 0.0f;
  std::string worst_param;

  bool ok(float tol) const { return max_rel_error < tol; }
};

// Compares analytic gradients against central differences
// (loss(p+eps) - loss(p-eps)) / 2eps on a sampled subset of coordinates
// (at least 64 per tensor, or all if fewer). loss_fn must be deterministic
// (dropout disabled); this is verified by evaluating it twice up front.
// Relative error per coordinate: |ga - gn| / max(|ga| + |gn|, 1e-8).
// The model runs in float32; loss_fn returns double so the final reduction
// does not quantize away the perturbation signal.
inline GradCheckReport finite_diff_check(
    const std::function<double()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor*>>& params,
    const std::vector<const Tensor*>& analytic, float eps, Rng& rng,
    std::size_t coords_per_tensor = 64) {
  VQAKIT_REQUIRE(eps > 0.0f, "finite_diff_check: eps must be positive");
  VQAKIT_REQUIRE(params.size() == analytic.size(),
                 "finite_diff_check: params/analytic size mismatch");

  const double l0 = loss_fn();
  const double l1 = loss_fn();
  if (l0 != l1)
    throw ContractViolation("finite_diff_check: loss function is not deterministic");

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* t = params[pi].second;
    const Tensor* ga = analytic[pi];
    VQAKIT_REQUIRE(t->same_shape(*ga), "finite_diff_check: analytic grad shape mismatch");

    std::set<std::size_t> coords;
    if (t->numel() <= coords_per_tensor) {
      for (std::size_t i = 0; i < t->numel(); ++i) coords.insert(i);
    } else {
      while (coords.size() < coords_per_tensor)
        coords.insert(static_cast<std::size_t>(rng.next_below(t->numel())));
    }

    float worst = 0.0f;
    for (std::size_t i : coords) {
      const float saved = (*t)[i];
      (*t)[i] = saved + eps;
      const double lp = loss_fn();
      (*t)[i] = saved - eps;
      const double lm = loss_fn();
      (*t)[i] = saved;
      const double gn = (lp - lm) / (2.0 * eps);
      const double g = (*ga)[i];
      const double denom = std::max(std::fabs(g) + std::fabs(gn), 1e-8);
      worst = std::max(worst, static_cast<float>(std::fabs(g - gn) / denom));
    }
    report.per_param.push_back({params[pi].first, worst});
    if (worst >= report.max_rel_error) {
      report.max_rel_error = worst;
      report.worst_param = params[pi].first;
    }
  }
  return report;
}

}  // namespace vqakit::numkit

#pragma once

// Differentiable kernels. Each op computes its forward result eagerly and,
// when the tape is recording and an input requires grad, registers a backward
// rule that accumulates into the inputs' gradient buffers.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "ttd/rng.hpp"
#include "ttd/tensor.hpp"

namespace ttd {

namespace kernels {

// C[m,n] (+)= A[m,k] * B[k,n]
template <class Real>
void mm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, Real{0});
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    const Real* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      if (av == Real{0}) continue;
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <class Real>
void mm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* brow = b + j * k;
      Real acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      if (accumulate) c[i * n + j] += acc;
      else c[i * n + j] = acc;
    }
  }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <class Real>
void mm_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, Real{0});
  for (std::size_t p = 0; p < k; ++p) {
    const Real* arow = a + p * m;
    const Real* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const Real av = arow[i];
      if (av == Real{0}) continue;
      Real* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

namespace detail {

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

template <class Real>
Tensor<Real> with_shape_of(const Tensor<Real>& like) {
  return Tensor<Real>::zeros(like.shape());
}

}  // namespace detail

template <class Real>
Tensor<Real> matmul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_rank("matmul", a.shape(), 2);
  detail::require_rank("matmul", b.shape(), 2);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = Tensor<Real>::zeros({m, n});
  kernels::mm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n, false);
  if (tape.wants(a, b)) {
    tape.record({a, b}, out, [a, b, out, m, k, n]() mutable {
      const Real* g = out.grad().data();
      if (a.requires_grad()) kernels::mm_nt(g, b.data().data(), a.mutable_grad().data(), m, n, k, true);
      if (b.requires_grad()) kernels::mm_tn(a.data().data(), g, b.mutable_grad().data(), k, m, n, true);
    });
  }
  return out;
}

/// x[..., in] * W[in, out] + bias[out]
template <class Real>
Tensor<Real> linear(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& bias) {
  detail::require_rank("linear", w.shape(), 2);
  const auto in = w.dim(0), outd = w.dim(1);
  if (x.shape().back() != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  if (bias.numel() != outd) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  const auto rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  std::vector<Real> y(rows * outd);
  for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), y.begin() + r * outd);
  kernels::mm_nn(x.data().data(), w.data().data(), y.data(), rows, in, outd, true);
  Tensor<Real> out(std::move(out_shape), std::move(y));
  if (tape.wants(x, w, bias)) {
    tape.record({x, w, bias}, out, [x, w, bias, out, rows, in, outd]() mutable {
      const Real* g = out.grad().data();
      if (x.requires_grad()) kernels::mm_nt(g, w.data().data(), x.mutable_grad().data(), rows, outd, in, true);
      if (w.requires_grad()) kernels::mm_tn(x.data().data(), g, w.mutable_grad().data(), in, rows, outd, true);
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < outd; ++j) gb[j] += g[r * outd + j];
      }
    });
  }
  return out;
}

/// out[n] = alpha * a[n] * op(b[n]) for a leading batch dimension n, where
/// op transposes the last two axes when `transpose_b` is set.
template <class Real>
Tensor<Real> batched_matmul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b, bool transpose_b = false,
                            Real alpha = Real{1}) {
  detail::require_rank("batched_matmul", a.shape(), 3);
  detail::require_rank("batched_matmul", b.shape(), 3);
  const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const auto bk = transpose_b ? b.dim(2) : b.dim(1);
  const auto n = transpose_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != batch || bk != k) {
    throw DimensionError("batched_matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  auto out = Tensor<Real>::zeros({batch, m, n});
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < batch; ++i) {
    const Real* ap = a.data().data() + i * m * k;
    const Real* bp = b.data().data() + i * k * n;
    Real* cp = y.data() + i * m * n;
    if (transpose_b) kernels::mm_nt(ap, bp, cp, m, k, n, false);
    else kernels::mm_nn(ap, bp, cp, m, k, n, false);
    if (alpha != Real{1})
      for (std::size_t j = 0; j < m * n; ++j) cp[j] *= alpha;
  }
  if (tape.wants(a, b)) {
    tape.record({a, b}, out, [a, b, out, batch, m, k, n, transpose_b, alpha]() mutable {
      std::vector<Real> gs(out.grad().begin(), out.grad().end());
      if (alpha != Real{1})
        for (auto& v : gs) v *= alpha;
      for (std::size_t i = 0; i < batch; ++i) {
        const Real* g = gs.data() + i * m * n;
        const Real* ap = a.data().data() + i * m * k;
        const Real* bp = b.data().data() + i * k * n;
        if (a.requires_grad()) {
          Real* ga = a.mutable_grad().data() + i * m * k;
          // dA = dC * op(B)^T
          if (transpose_b) kernels::mm_nn(g, bp, ga, m, n, k, true);
          else kernels::mm_nt(g, bp, ga, m, n, k, true);
        }
        if (b.requires_grad()) {
          Real* gb = b.mutable_grad().data() + i * k * n;
          if (transpose_b) kernels::mm_tn(g, ap, gb, n, m, k, true);  // dB[n,k] = dC^T A
          else kernels::mm_tn(ap, g, gb, k, m, n, true);              // dB[k,n] = A^T dC
        }
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> add(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  std::vector<Real> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  Tensor<Real> out(a.shape(), std::move(y));
  if (tape.wants(a, b)) {
    tape.record({a, b}, out, [a, b, out]() mutable {
      const auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

/// x[..., n] + bias[n], broadcasting the bias over leading axes.
template <class Real>
Tensor<Real> add_bias(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& bias) {
  const auto n = bias.numel();
  if (x.shape().back() != n) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " vs bias " + shape_str(bias.shape()));
  }
  std::vector<Real> y(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias[i % n];
  Tensor<Real> out(x.shape(), std::move(y));
  if (tape.wants(x, bias)) {
    tape.record({x, bias}, out, [x, bias, out, n]() mutable {
      const auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> mul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  std::vector<Real> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  Tensor<Real> out(a.shape(), std::move(y));
  if (tape.wants(a, b)) {
    tape.record({a, b}, out, [a, b, out]() mutable {
      const auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> scale(Tape<Real>& tape, const Tensor<Real>& x, Real factor) {
  std::vector<Real> y(x.data().begin(), x.data().end());
  for (auto& v : y) v *= factor;
  Tensor<Real> out(x.shape(), std::move(y));
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out, factor]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

template <class Real>
Tensor<Real> relu(Tape<Real>& tape, const Tensor<Real>& x) {
  std::vector<Real> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > Real{0} ? x[i] : Real{0};
  Tensor<Real> out(x.shape(), std::move(y));
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > Real{0}) gx[i] += g[i];
    });
  }
  return out;
}

template <class Real>
Real sigmoid_scalar(Real z) {
  if (z >= Real{0}) return Real{1} / (Real{1} + std::exp(-z));
  const Real e = std::exp(z);
  return e / (Real{1} + e);
}

template <class Real>
Tensor<Real> sigmoid(Tape<Real>& tape, const Tensor<Real>& x) {
  std::vector<Real> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = sigmoid_scalar(x[i]);
  Tensor<Real> out(x.shape(), std::move(y));
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * out[i] * (Real{1} - out[i]);
    });
  }
  return out;
}

template <class Real>
Tensor<Real> softmax_lastdim(Tape<Real>& tape, const Tensor<Real>& x) {
  const auto n = x.shape().back();
  const auto rows = x.numel() / n;
  std::vector<Real> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data().data() + r * n;
    Real* yr = y.data() + r * n;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xr[j]);
    Real total{0};
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
  }
  Tensor<Real> out(x.shape(), std::move(y));
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out, rows, n]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * n;
        Real dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j] * out[base + j];
        for (std::size_t j = 0; j < n; ++j) gx[base + j] += out[base + j] * (g[base + j] - dot);
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> layer_norm(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                        std::type_identity_t<Real> eps) {
  const auto d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: feature size " + std::to_string(d) + " vs gamma " + shape_str(gamma.shape()) +
                         " / beta " + shape_str(beta.shape()));
  }
  if (!(eps > Real{0})) throw ContractError("layer_norm: eps must be positive");
  const auto rows = x.numel() / d;
  std::vector<Real> y(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data().data() + r * d;
    Real mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<Real>(d);
    Real var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<Real>(d);
    const Real inv = Real{1} / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = (xr[j] - mean) * inv;
      xhat[r * d + j] = h;
      y[r * d + j] = gamma[j] * h + beta[j];
    }
  }
  Tensor<Real> out(x.shape(), std::move(y));
  if (tape.wants(x, gamma, beta)) {
    tape.record({x, gamma, beta}, out,
                [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d]() mutable {
                  const auto g = out.grad();
                  if (gamma.requires_grad() || beta.requires_grad()) {
                    auto gg = gamma.mutable_grad();
                    auto gb = beta.mutable_grad();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      gg[i % d] += g[i] * xhat[i];
                      gb[i % d] += g[i];
                    }
                  }
                  if (!x.requires_grad()) return;
                  auto gx = x.mutable_grad();
                  const Real inv_d = Real{1} / static_cast<Real>(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t base = r * d;
                    Real sum_dh{0}, sum_dh_h{0};
                    for (std::size_t j = 0; j < d; ++j) {
                      const Real dh = g[base + j] * gamma[j];
                      sum_dh += dh;
                      sum_dh_h += dh * xhat[base + j];
                    }
                    for (std::size_t j = 0; j < d; ++j) {
                      const Real dh = g[base + j] * gamma[j];
                      gx[base + j] += inv_std[r] * inv_d *
                                      (static_cast<Real>(d) * dh - sum_dh - xhat[base + j] * sum_dh_h);
                    }
                  }
                });
  }
  return out;
}

/// Inverted dropout. Element i is kept iff draw i of `rng` is >= rate, and
/// kept values are scaled by 1/(1-rate). Outside training, or with rate 0,
/// the input is returned unchanged.
template <class Real>
Tensor<Real> dropout(Tape<Real>& tape, const Tensor<Real>& x, double rate, const CounterRng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - rate));
  std::vector<Real> mask(x.numel());
  std::vector<Real> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) {
    mask[i] = unit_at(rng, i) >= rate ? keep_scale : Real{0};
    y[i] = x[i] * mask[i];
  }
  Tensor<Real> out(x.shape(), std::move(y));
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out, mask = std::move(mask)]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

/// Mean over the last axis: [..., n] -> [...] (rank-1 input yields shape [1]).
template <class Real>
Tensor<Real> mean_lastdim(Tape<Real>& tape, const Tensor<Real>& x) {
  const auto n = x.shape().back();
  const auto rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<Real> y(rows, Real{0});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) y[r] += x[r * n + j];
    y[r] /= static_cast<Real>(n);
  }
  Tensor<Real> out(std::move(out_shape), std::move(y));
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out, rows, n]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      const Real inv = Real{1} / static_cast<Real>(n);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r] * inv;
    });
  }
  return out;
}

template <class Real>
Tensor<Real> sum(Tape<Real>& tape, const Tensor<Real>& x) {
  Real total{0};
  for (auto v : x.data()) total += v;
  auto out = Tensor<Real>::scalar(total);
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out]() mutable {
      const Real g = out.grad()[0];
      for (auto& v : x.mutable_grad()) v += g;
    });
  }
  return out;
}

/// Swaps the last two axes.
template <class Real>
Tensor<Real> transpose_last2(Tape<Real>& tape, const Tensor<Real>& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2 for " + shape_str(x.shape()));
  const auto m = x.dim(x.rank() - 2), n = x.dim(x.rank() - 1);
  const auto blocks = x.numel() / (m * n);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  std::vector<Real> y(x.numel());
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) y[b * m * n + j * m + i] = x[b * m * n + i * n + j];
  Tensor<Real> out(std::move(out_shape), std::move(y));
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out, blocks, m, n]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gx[b * m * n + i * n + j] += g[b * m * n + j * m + i];
    });
  }
  return out;
}

template <class Real>
Tensor<Real> reshape(Tape<Real>& tape, const Tensor<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<Real> out(std::move(shape), std::vector<Real>(x.data().begin(), x.data().end()));
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

/// Gathers rows of `table` [V, D] for `ids` laid out as `prefix` -> prefix + [D].
template <class Real>
Tensor<Real> embedding_lookup(Tape<Real>& tape, const Tensor<Real>& table, std::span<const std::int32_t> ids,
                              Shape prefix) {
  detail::require_rank("embedding_lookup", table.shape(), 2);
  if (shape_numel(prefix) != ids.size()) {
    throw DimensionError("embedding_lookup: " + std::to_string(ids.size()) + " ids for shape " + shape_str(prefix));
  }
  const auto vocab = table.dim(0), d = table.dim(1);
  std::vector<Real> y(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ValidationError("embedding_lookup: id " + std::to_string(ids[i]) + " outside [0, " +
                            std::to_string(vocab) + ")");
    }
    const auto row = table.data().subspan(static_cast<std::size_t>(ids[i]) * d, d);
    std::copy(row.begin(), row.end(), y.begin() + i * d);
  }
  prefix.push_back(d);
  Tensor<Real> out(std::move(prefix), std::move(y));
  if (tape.wants(table)) {
    tape.record({table}, out, [table, out, ids = std::vector<std::int32_t>(ids.begin(), ids.end()), d]() mutable {
      const auto g = out.grad();
      auto gt = table.mutable_grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        Real* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
      }
    });
  }
  return out;
}

/// [B, T, H*dh] -> [B*H, T, dh]
template <class Real>
Tensor<Real> split_heads(Tape<Real>& tape, const Tensor<Real>& x, std::size_t heads) {
  detail::require_rank("split_heads", x.shape(), 3);
  const auto batch = x.dim(0), len = x.dim(1), width = x.dim(2);
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("split_heads: width " + std::to_string(width) + " not divisible by " + std::to_string(heads));
  }
  const auto dh = width / heads;
  auto index = [=](std::size_t b, std::size_t t, std::size_t h, std::size_t j) {
    return std::pair{(b * len + t) * width + h * dh + j, ((b * heads + h) * len + t) * dh + j};
  };
  std::vector<Real> y(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dh; ++j) {
          const auto [src, dst] = index(b, t, h, j);
          y[dst] = x[src];
        }
  Tensor<Real> out({batch * heads, len, dh}, std::move(y));
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out, index, batch, len, heads, dh]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t j = 0; j < dh; ++j) {
              const auto [src, dst] = index(b, t, h, j);
              gx[src] += g[dst];
            }
    });
  }
  return out;
}

/// [B*H, T, dh] -> [B, T, H*dh]
template <class Real>
Tensor<Real> merge_heads(Tape<Real>& tape, const Tensor<Real>& x, std::size_t heads) {
  detail::require_rank("merge_heads", x.shape(), 3);
  if (heads == 0 || x.dim(0) % heads != 0) {
    throw DimensionError("merge_heads: leading dim " + std::to_string(x.dim(0)) + " not divisible by " +
                         std::to_string(heads));
  }
  const auto batch = x.dim(0) / heads, len = x.dim(1), dh = x.dim(2), width = heads * dh;
  auto index = [=](std::size_t b, std::size_t t, std::size_t h, std::size_t j) {
    return std::pair{((b * heads + h) * len + t) * dh + j, (b * len + t) * width + h * dh + j};
  };
  std::vector<Real> y(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dh; ++j) {
          const auto [src, dst] = index(b, t, h, j);
          y[dst] = x[src];
        }
  Tensor<Real> out({batch, len, width}, std::move(y));
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out, index, batch, len, heads, dh]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t j = 0; j < dh; ++j) {
              const auto [src, dst] = index(b, t, h, j);
              gx[src] += g[dst];
            }
    });
  }
  return out;
}

/// Sets attention scores [B*H, T, T] to -inf wherever the key position is
/// padding according to `mask` [B, T].
template <class Real>
Tensor<Real> mask_keys(Tape<Real>& tape, const Tensor<Real>& scores, std::span<const float> mask, std::size_t heads) {
  detail::require_rank("mask_keys", scores.shape(), 3);
  const auto groups = scores.dim(0), len = scores.dim(2);
  if (heads == 0 || groups % heads != 0 || mask.size() != (groups / heads) * len || scores.dim(1) != len) {
    throw DimensionError("mask_keys: scores " + shape_str(scores.shape()) + " vs mask of " +
                         std::to_string(mask.size()) + " entries");
  }
  std::vector<Real> y(scores.data().begin(), scores.data().end());
  const Real neg_inf = -std::numeric_limits<Real>::infinity();
  for (std::size_t gidx = 0; gidx < groups; ++gidx) {
    const float* m = mask.data() + (gidx / heads) * len;
    for (std::size_t q = 0; q < len; ++q)
      for (std::size_t k = 0; k < len; ++k)
        if (m[k] == 0.0f) y[(gidx * len + q) * len + k] = neg_inf;
  }
  Tensor<Real> out(scores.shape(), std::move(y));
  if (tape.wants(scores)) {
    tape.record({scores}, out, [scores, out]() mutable {
      const auto g = out.grad();
      auto gs = scores.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (std::isfinite(out[i])) gs[i] += g[i];
    });
  }
  return out;
}

/// Mean over content positions: x [B, T, D], mask [B, T] -> [B, D].
template <class Real>
Tensor<Real> masked_mean_pool(Tape<Real>& tape, const Tensor<Real>& x, std::span<const float> mask) {
  detail::require_rank("masked_mean_pool", x.shape(), 3);
  const auto batch = x.dim(0), len = x.dim(1), d = x.dim(2);
  if (mask.size() != batch * len) {
    throw DimensionError("masked_mean_pool: " + shape_str(x.shape()) + " vs mask of " + std::to_string(mask.size()));
  }
  std::vector<Real> weights(batch * len);
  for (std::size_t b = 0; b < batch; ++b) {
    Real count{0};
    for (std::size_t t = 0; t < len; ++t) count += static_cast<Real>(mask[b * len + t]);
    if (count == Real{0}) throw ValidationError("masked_mean_pool: row " + std::to_string(b) + " has no content tokens");
    for (std::size_t t = 0; t < len; ++t) weights[b * len + t] = static_cast<Real>(mask[b * len + t]) / count;
  }
  std::vector<Real> y(batch * d, Real{0});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t) {
      const Real w = weights[b * len + t];
      if (w == Real{0}) continue;
      for (std::size_t j = 0; j < d; ++j) y[b * d + j] += w * x[(b * len + t) * d + j];
    }
  Tensor<Real> out({batch, d}, std::move(y));
  if (tape.wants(x)) {
    tape.record({x}, out, [x, out, weights = std::move(weights), batch, len, d]() mutable {
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t) {
          const Real w = weights[b * len + t];
          for (std::size_t j = 0; j < d; ++j) gx[(b * len + t) * d + j] += w * g[b * d + j];
        }
    });
  }
  return out;
}

inline constexpr double kProbabilityClamp = 1e-7;

/// Mean binary cross-entropy between probabilities `p` and 0/1 `labels`.
/// Probabilities are clamped to [1e-7, 1-1e-7]. Positive examples are
/// weighted by `positive_weight`.
template <class Real>
Tensor<Real> bce_loss(Tape<Real>& tape, const Tensor<Real>& p, std::span<const float> labels,
                      double positive_weight = 1.0) {
  if (labels.size() != p.numel()) {
    throw DimensionError("bce_loss: " + std::to_string(p.numel()) + " probabilities vs " +
                         std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0.0f && labels[i] != 1.0f) {
      throw ValidationError("bce_loss: label at index " + std::to_string(i) + " is " + std::to_string(labels[i]) +
                            ", expected 0 or 1");
    }
  }
  const Real lo = static_cast<Real>(kProbabilityClamp), hi = Real{1} - static_cast<Real>(kProbabilityClamp);
  const auto n = p.numel();
  Real total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const Real q = std::clamp(p[i], lo, hi);
    const Real y = static_cast<Real>(labels[i]);
    const Real w = y == Real{1} ? static_cast<Real>(positive_weight) : Real{1};
    total -= w * (y * std::log(q) + (Real{1} - y) * std::log(Real{1} - q));
  }
  auto out = Tensor<Real>::scalar(total / static_cast<Real>(n));
  if (tape.wants(p)) {
    tape.record({p}, out, [p, out, lbl = std::vector<float>(labels.begin(), labels.end()), positive_weight, lo, hi,
                           n]() mutable {
      const Real g = out.grad()[0] / static_cast<Real>(n);
      auto gp = p.mutable_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const Real q = std::clamp(p[i], lo, hi);
        const Real y = static_cast<Real>(lbl[i]);
        const Real w = y == Real{1} ? static_cast<Real>(positive_weight) : Real{1};
        gp[i] += g * w * (-y / q + (Real{1} - y) / (Real{1} - q));
      }
    });
  }
  return out;
}

}  // namespace ttd

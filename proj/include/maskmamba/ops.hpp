#pragma once

#include <cblas.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "maskmamba/tensor.hpp"

namespace maskmamba {

enum class ConvMode { Causal, Standard };

namespace detail {

inline void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, float alpha,
                 const float* a, Index lda, const float* b, Index ldb, float beta, float* c,
                 Index ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              beta, c, static_cast<int>(ldc));
}

inline void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, double alpha,
                 const double* a, Index lda, const double* b, Index ldb, double beta, double* c,
                 Index ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              beta, c, static_cast<int>(ldc));
}

// Numerically stabilized softmax over one contiguous row.
template <class T>
inline void softmax_row(const T* x, T* out, Index n) {
  T mx = x[0];
  for (Index i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
  T sum = T(0);
  for (Index i = 0; i < n; ++i) {
    out[i] = fast_exp(x[i] - mx);
    sum += out[i];
  }
  const T inv = T(1) / sum;
  for (Index i = 0; i < n; ++i) out[i] *= inv;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

// x [..., M, K] times w [K, N] -> [..., M, N]; leading dims are flattened.
template <class T>
inline Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.ndim() < 2 || w.ndim() != 2 || x.dim(x.ndim() - 1) != w.dim(0))
    shape_error("matmul", x.shape(), w.shape());
  const Index k = w.dim(0), n = w.dim(1);
  const Index m = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<T> out = detail::make_result<T>(std::move(out_shape), "matmul", {&x, &w});
  detail::gemm(false, false, m, n, k, T(1), x.data().data(), k, w.data().data(), n, T(0),
               out.data().data(), n);
  detail::check_finite(out, "matmul");
  if (out.requires_grad()) {
    auto xn = x.node();
    auto wn = w.node();
    auto on = out.node().get();
    out.node()->backward_fn = [xn, wn, on, m, n, k]() {
      if (xn->requires_grad) {
        xn->ensure_grad();
        detail::gemm(false, true, m, k, n, T(1), on->grad.data(), n, wn->data.data(), n, T(1),
                     xn->grad.data(), k);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        detail::gemm(true, false, k, n, m, T(1), xn->data.data(), k, on->grad.data(), n, T(1),
                     wn->grad.data(), n);
      }
    };
  }
  return out;
}

// y = x.w + b with b [N] broadcast over rows.
template <class T>
inline Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.ndim() < 2 || w.ndim() != 2 || x.dim(x.ndim() - 1) != w.dim(0))
    shape_error("linear", x.shape(), w.shape());
  if (b.numel() != w.dim(1)) shape_error("linear bias", w.shape(), b.shape());
  const Index k = w.dim(0), n = w.dim(1);
  const Index m = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<T> out = detail::make_result<T>(std::move(out_shape), "linear", {&x, &w, &b});
  T* po = out.data().data();
  const T* pb = b.data().data();
  detail::gemm(false, false, m, n, k, T(1), x.data().data(), k, w.data().data(), n, T(0), po, n);
  for (Index r = 0; r < m; ++r)
    for (Index i = 0; i < n; ++i) po[r * n + i] += pb[i];
  detail::check_finite(out, "linear");
  if (out.requires_grad()) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    auto on = out.node().get();
    out.node()->backward_fn = [xn, wn, bn, on, m, n, k]() {
      if (xn->requires_grad) {
        xn->ensure_grad();
        detail::gemm(false, true, m, k, n, T(1), on->grad.data(), n, wn->data.data(), n, T(1),
                     xn->grad.data(), k);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        detail::gemm(true, false, k, n, m, T(1), xn->data.data(), k, on->grad.data(), n, T(1),
                     wn->grad.data(), n);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (Index r = 0; r < m; ++r)
          for (Index i = 0; i < n; ++i) bn->grad[i] += on->grad[r * n + i];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// depthwise conv1d
// ---------------------------------------------------------------------------

// x [B,L,C], kernel [K,C], per-channel convolution. Standard mode pads
// (K-1)/2 on both sides (K odd); Causal pads K-1 on the left, so output t
// sees inputs <= t only. Output length equals input length.
template <class T>
inline Tensor<T> conv1d_depthwise(const Tensor<T>& x, const Tensor<T>& kernel, ConvMode mode) {
  if (x.ndim() != 3 || kernel.ndim() != 2 || kernel.dim(1) != x.dim(2))
    shape_error("conv1d", x.shape(), kernel.shape());
  const Index B = x.dim(0), L = x.dim(1), C = x.dim(2), K = kernel.dim(0);
  if (K < 1) throw std::invalid_argument("conv1d: kernel size must be >= 1");
  if (mode == ConvMode::Standard && K % 2 == 0)
    throw std::invalid_argument("conv1d: Standard mode requires odd kernel size");
  const Index left = mode == ConvMode::Causal ? K - 1 : (K - 1) / 2;

  Tensor<T> out = detail::make_result<T>(x.shape(), "conv1d", {&x, &kernel});
  const T* px = x.data().data();
  const T* pk = kernel.data().data();
  T* po = out.data().data();
  for (Index b = 0; b < B; ++b) {
    const T* xb = px + b * L * C;
    T* ob = po + b * L * C;
    for (Index t = 0; t < L; ++t) {
      T* orow = ob + t * C;
      for (Index c = 0; c < C; ++c) orow[c] = T(0);
      for (Index j = 0; j < K; ++j) {
        const Index src = t - left + j;
        if (src < 0 || src >= L) continue;
        const T* xrow = xb + src * C;
        const T* krow = pk + j * C;
        for (Index c = 0; c < C; ++c) orow[c] += xrow[c] * krow[c];
      }
    }
  }
  detail::check_finite(out, "conv1d");
  if (out.requires_grad()) {
    auto xn = x.node();
    auto kn = kernel.node();
    auto on = out.node().get();
    out.node()->backward_fn = [xn, kn, on, B, L, C, K, left]() {
      if (xn->requires_grad) xn->ensure_grad();
      if (kn->requires_grad) kn->ensure_grad();
      for (Index b = 0; b < B; ++b)
        for (Index t = 0; t < L; ++t) {
          const T* g = on->grad.data() + (b * L + t) * C;
          for (Index j = 0; j < K; ++j) {
            const Index src = t - left + j;
            if (src < 0 || src >= L) continue;
            if (xn->requires_grad) {
              T* dx = xn->grad.data() + (b * L + src) * C;
              const T* krow = kn->data.data() + j * C;
              for (Index c = 0; c < C; ++c) dx[c] += g[c] * krow[c];
            }
            if (kn->requires_grad) {
              T* dk = kn->grad.data() + j * C;
              const T* xrow = xn->data.data() + (b * L + src) * C;
              for (Index c = 0; c < C; ++c) dk[c] += g[c] * xrow[c];
            }
          }
        }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

template <class T>
inline Tensor<T> softmax(const Tensor<T>& x, Index axis) {
  Index nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd)
    throw std::invalid_argument("softmax: axis out of range for " + shape_str(x.shape()));
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= x.dim(i);
  for (Index i = axis + 1; i < nd; ++i) inner *= x.dim(i);
  const Index n = x.dim(axis);

  Tensor<T> out = detail::make_result<T>(x.shape(), "softmax", {&x});
  const T* px = x.data().data();
  T* po = out.data().data();
  if (inner == 1) {
    for (Index o = 0; o < outer; ++o) detail::softmax_row(px + o * n, po + o * n, n);
  } else {
    for (Index o = 0; o < outer; ++o)
      for (Index j = 0; j < inner; ++j) {
        const T* xr = px + o * n * inner + j;
        T* orow = po + o * n * inner + j;
        T mx = xr[0];
        for (Index i = 1; i < n; ++i) mx = std::max(mx, xr[i * inner]);
        T sum = T(0);
        for (Index i = 0; i < n; ++i) {
          orow[i * inner] = fast_exp(xr[i * inner] - mx);
          sum += orow[i * inner];
        }
        const T inv = T(1) / sum;
        for (Index i = 0; i < n; ++i) orow[i * inner] *= inv;
      }
  }
  detail::check_finite(out, "softmax");
  if (out.requires_grad()) {
    auto xn = x.node();
    auto on = out.node().get();
    out.node()->backward_fn = [xn, on, outer, n, inner]() {
      xn->ensure_grad();
      for (Index o = 0; o < outer; ++o)
        for (Index j = 0; j < inner; ++j) {
          const T* p = on->data.data() + o * n * inner + j;
          const T* g = on->grad.data() + o * n * inner + j;
          T* d = xn->grad.data() + o * n * inner + j;
          T dot = T(0);
          for (Index i = 0; i < n; ++i) dot += p[i * inner] * g[i * inner];
          for (Index i = 0; i < n; ++i)
            d[i * inner] += p[i * inner] * (g[i * inner] - dot);
        }
    };
  }
  return out;
}

// Normalizes over the last axis; gamma/beta have that axis's length.
template <class T>
inline Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                            T eps = T(1e-5)) {
  const Index C = x.dim(x.ndim() - 1);
  if (gamma.numel() != C || beta.numel() != C) shape_error("layer_norm", x.shape(), gamma.shape());
  const Index rows = x.numel() / C;
  Tensor<T> out = detail::make_result<T>(x.shape(), "layer_norm", {&x, &gamma, &beta});
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  T* po = out.data().data();

  Buffer<T> inv_std(static_cast<std::size_t>(rows));
  Buffer<T> means(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const T* xr = px + r * C;
    T m = T(0);
    for (Index c = 0; c < C; ++c) m += xr[c];
    m /= static_cast<T>(C);
    T var = T(0);
    for (Index c = 0; c < C; ++c) {
      const T d = xr[c] - m;
      var += d * d;
    }
    var /= static_cast<T>(C);
    const T is = T(1) / std::sqrt(var + eps);
    means[static_cast<std::size_t>(r)] = m;
    inv_std[static_cast<std::size_t>(r)] = is;
    T* orow = po + r * C;
    for (Index c = 0; c < C; ++c) orow[c] = (xr[c] - m) * is * pg[c] + pb[c];
  }
  detail::check_finite(out, "layer_norm");
  if (out.requires_grad()) {
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto on = out.node().get();
    auto ms = std::make_shared<Buffer<T>>(std::move(means));
    auto is = std::make_shared<Buffer<T>>(std::move(inv_std));
    out.node()->backward_fn = [xn, gn, bn, on, ms, is, rows, C]() {
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (Index r = 0; r < rows; ++r) {
        const T* xr = xn->data.data() + r * C;
        const T* g = on->grad.data() + r * C;
        const T m = (*ms)[static_cast<std::size_t>(r)];
        const T s = (*is)[static_cast<std::size_t>(r)];
        if (gn->requires_grad || bn->requires_grad) {
          for (Index c = 0; c < C; ++c) {
            const T xhat = (xr[c] - m) * s;
            if (gn->requires_grad) gn->grad[c] += g[c] * xhat;
            if (bn->requires_grad) bn->grad[c] += g[c];
          }
        }
        if (xn->requires_grad) {
          // dxhat = g * gamma; dx = s*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          T sum_dh = T(0), sum_dh_xhat = T(0);
          for (Index c = 0; c < C; ++c) {
            const T dh = g[c] * gn->data[c];
            const T xhat = (xr[c] - m) * s;
            sum_dh += dh;
            sum_dh_xhat += dh * xhat;
          }
          const T inv_c = T(1) / static_cast<T>(C);
          T* dx = xn->grad.data() + r * C;
          for (Index c = 0; c < C; ++c) {
            const T dh = g[c] * gn->data[c];
            const T xhat = (xr[c] - m) * s;
            dx[c] += s * (dh - sum_dh * inv_c - xhat * sum_dh_xhat * inv_c);
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// embedding / masked cross-entropy
// ---------------------------------------------------------------------------

// table [V,C] rows selected by ids (shape ids_shape, values in [0,V)).
template <class T>
inline Tensor<T> embedding(const Tensor<T>& table, const std::vector<Index>& ids,
                           Shape ids_shape) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding: table must be rank 2");
  if (numel_of(ids_shape) != static_cast<Index>(ids.size()))
    throw std::invalid_argument("embedding: ids/shape mismatch");
  const Index V = table.dim(0), C = table.dim(1);
  for (Index id : ids)
    if (id < 0 || id >= V)
      throw std::out_of_range("embedding: id " + std::to_string(id) + " out of range [0," +
                              std::to_string(V) + ")");
  Shape out_shape = std::move(ids_shape);
  out_shape.push_back(C);
  Tensor<T> out = detail::make_result<T>(std::move(out_shape), "embedding", {&table});
  const T* pt = table.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(pt + ids[i] * C, pt + (ids[i] + 1) * C, po + static_cast<Index>(i) * C);
  if (out.requires_grad()) {
    auto tn = table.node();
    auto on = out.node().get();
    auto ids_copy = ids;
    out.node()->backward_fn = [tn, on, ids_copy, C]() {
      tn->ensure_grad();
      for (std::size_t i = 0; i < ids_copy.size(); ++i) {
        const T* g = on->grad.data() + static_cast<Index>(i) * C;
        T* d = tn->grad.data() + ids_copy[i] * C;
        for (Index c = 0; c < C; ++c) d[c] += g[c];
      }
    };
  }
  return out;
}

// Mean negative log-likelihood over positions where mask is true; other
// positions contribute exactly zero loss and exactly zero gradient.
template <class T>
inline Tensor<T> masked_cross_entropy(const Tensor<T>& logits, const std::vector<Index>& targets,
                                      const std::vector<std::uint8_t>& mask) {
  const Index V = logits.dim(logits.ndim() - 1);
  const Index rows = logits.numel() / V;
  if (static_cast<Index>(targets.size()) != rows || static_cast<Index>(mask.size()) != rows)
    throw std::invalid_argument("masked_cross_entropy: targets/mask must have one entry per row");
  Index n_masked = 0;
  for (auto m : mask) n_masked += m ? 1 : 0;
  if (n_masked == 0) throw std::invalid_argument("masked_cross_entropy: empty mask");
  for (Index r = 0; r < rows; ++r)
    if (mask[static_cast<std::size_t>(r)] && (targets[static_cast<std::size_t>(r)] < 0 ||
                                              targets[static_cast<std::size_t>(r)] >= V))
      throw std::out_of_range("masked_cross_entropy: target id out of range");

  Tensor<T> out = detail::make_result<T>({1}, "masked_cross_entropy", {&logits});
  const T* pl = logits.data().data();
  // Save the softmax probabilities of masked rows for the backward rule.
  auto probs = std::make_shared<Buffer<T>>();
  const bool recording = out.requires_grad();
  if (recording) probs->assign(static_cast<std::size_t>(n_masked) * V, T(0));

  double loss = 0.0;
  Buffer<T> row(static_cast<std::size_t>(V));
  Index mi = 0;
  for (Index r = 0; r < rows; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const T* lr = pl + r * V;
    T mx = lr[0];
    for (Index v = 1; v < V; ++v) mx = std::max(mx, lr[v]);
    T sum = T(0);
    for (Index v = 0; v < V; ++v) {
      row[static_cast<std::size_t>(v)] = fast_exp(lr[v] - mx);
      sum += row[static_cast<std::size_t>(v)];
    }
    const Index t = targets[static_cast<std::size_t>(r)];
    loss += -static_cast<double>(lr[t] - mx) + std::log(static_cast<double>(sum));
    if (recording) {
      T* pr = probs->data() + mi * V;
      const T inv = T(1) / sum;
      for (Index v = 0; v < V; ++v) pr[v] = row[static_cast<std::size_t>(v)] * inv;
    }
    ++mi;
  }
  out.data()[0] = static_cast<T>(loss / static_cast<double>(n_masked));
  detail::check_finite(out, "masked_cross_entropy");
  if (recording) {
    auto ln = logits.node();
    auto on = out.node().get();
    auto targets_copy = targets;
    auto mask_copy = mask;
    out.node()->backward_fn = [ln, on, probs, targets_copy, mask_copy, rows, V, n_masked]() {
      ln->ensure_grad();
      const T g = on->grad[0] / static_cast<T>(n_masked);
      Index mi = 0;
      for (Index r = 0; r < rows; ++r) {
        if (!mask_copy[static_cast<std::size_t>(r)]) continue;
        const T* pr = probs->data() + mi * V;
        T* d = ln->grad.data() + r * V;
        for (Index v = 0; v < V; ++v) d[v] += g * pr[v];
        d[targets_copy[static_cast<std::size_t>(r)]] -= g;
        ++mi;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// multi-head self-attention (fused)
// ---------------------------------------------------------------------------

// q,k,v [B,L,C] already projected; full bidirectional attention, no mask.
// Heads are processed one at a time against a reused [L,L] scratch so
// inference peak memory is one score matrix; probabilities are retained per
// head only when gradients are being recorded.
template <class T>
inline Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                      Index n_heads) {
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.ndim() != 3)
    shape_error("multi_head_attention", q.shape(), k.shape());
  const Index B = q.dim(0), L = q.dim(1), C = q.dim(2);
  if (C % n_heads != 0)
    throw std::invalid_argument("multi_head_attention: C=" + std::to_string(C) +
                                " not divisible by heads=" + std::to_string(n_heads));
  const Index D = C / n_heads;
  const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(D)));

  Tensor<T> out = detail::make_result<T>(q.shape(), "mha", {&q, &k, &v});
  const bool recording = out.requires_grad();
  auto saved_probs = std::make_shared<Buffer<T>>();
  if (recording) saved_probs->resize(static_cast<std::size_t>(B * n_heads * L * L));

  {
    Buffer<T> scores(static_cast<std::size_t>(L * L));
    for (Index b = 0; b < B; ++b) {
      const T* qb = q.data().data() + b * L * C;
      const T* kb = k.data().data() + b * L * C;
      const T* vb = v.data().data() + b * L * C;
      T* ob = out.data().data() + b * L * C;
      for (Index h = 0; h < n_heads; ++h) {
        const T* qh = qb + h * D;  // strided [L,D], ld C
        const T* kh = kb + h * D;
        const T* vh = vb + h * D;
        detail::gemm(false, true, L, L, D, scale, qh, C, kh, C, T(0), scores.data(), L);
        for (Index i = 0; i < L; ++i)
          detail::softmax_row(scores.data() + i * L, scores.data() + i * L, L);
        if (recording)
          std::copy(scores.begin(), scores.end(),
                    saved_probs->begin() + static_cast<std::size_t>((b * n_heads + h) * L * L));
        detail::gemm(false, false, L, D, L, T(1), scores.data(), L, vh, C, T(0), ob + h * D, C);
      }
    }
  }
  detail::check_finite(out, "mha");
  if (recording) {
    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    auto on = out.node().get();
    out.node()->backward_fn = [qn, kn, vn, on, saved_probs, B, L, C, n_heads, D, scale]() {
      qn->ensure_grad();
      kn->ensure_grad();
      vn->ensure_grad();
      Buffer<T> dscores(static_cast<std::size_t>(L * L));
      for (Index b = 0; b < B; ++b) {
        for (Index h = 0; h < n_heads; ++h) {
          const T* probs = saved_probs->data() + static_cast<std::size_t>((b * n_heads + h) * L * L);
          const T* go = on->grad.data() + b * L * C + h * D;
          const T* qh = qn->data.data() + b * L * C + h * D;
          const T* kh = kn->data.data() + b * L * C + h * D;
          const T* vh = vn->data.data() + b * L * C + h * D;
          // dV += P^T dO
          detail::gemm(true, false, L, D, L, T(1), probs, L, go, C, T(1),
                       vn->grad.data() + b * L * C + h * D, C);
          // dP = dO V^T, then dS = P * (dP - rowsum(dP*P))
          detail::gemm(false, true, L, L, D, T(1), go, C, vh, C, T(0), dscores.data(), L);
          for (Index i = 0; i < L; ++i) {
            T* ds = dscores.data() + i * L;
            const T* p = probs + i * L;
            T dot = T(0);
            for (Index j = 0; j < L; ++j) dot += ds[j] * p[j];
            for (Index j = 0; j < L; ++j) ds[j] = p[j] * (ds[j] - dot);
          }
          // dQ += scale * dS K ; dK += scale * dS^T Q
          detail::gemm(false, false, L, D, L, scale, dscores.data(), L, kh, C, T(1),
                       qn->grad.data() + b * L * C + h * D, C);
          detail::gemm(true, false, L, D, L, scale, dscores.data(), L, qh, C, T(1),
                       kn->grad.data() + b * L * C + h * D, C);
        }
      }
    };
  }
  return out;
}

// Attention probabilities [B,heads,L,L] for introspection/tests.
template <class T>
inline Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, Index n_heads) {
  NoGradGuard ng;
  const Index B = q.dim(0), L = q.dim(1), C = q.dim(2);
  const Index D = C / n_heads;
  const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(D)));
  Tensor<T> probs = Tensor<T>::uninit({B, n_heads, L, L}, "attention_probs");
  for (Index b = 0; b < B; ++b)
    for (Index h = 0; h < n_heads; ++h) {
      T* ps = probs.data().data() + ((b * n_heads + h) * L) * L;
      detail::gemm(false, true, L, L, D, scale, q.data().data() + b * L * C + h * D, C,
                   k.data().data() + b * L * C + h * D, C, T(0), ps, L);
      for (Index i = 0; i < L; ++i) detail::softmax_row(ps + i * L, ps + i * L, L);
    }
  return probs;
}

}  // namespace maskmamba

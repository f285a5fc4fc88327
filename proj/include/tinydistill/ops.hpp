#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tinydistill/tensor.hpp"

namespace tinydistill {

// Kernel catalog: exactly the differentiable ops the student network and the
// training objectives need, each with its reverse-mode rule. All ops take an
// optional Tape; passing nullptr runs them gradient-free (eval paths, frozen
// teachers, finite-difference probes).

namespace detail {

template <class T>
inline bool want_grad(Tape<T>* tape, std::initializer_list<const Tensor<T>*> ins) {
  if (!tape) return false;
  for (const auto* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Leading-axis broadcast: b may omit leading dims of a; trailing dims must
// match exactly. Returns the number of leading elements of a per full copy
// of b (1 when shapes are identical).
template <class T>
inline std::int64_t broadcast_lead(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (b.rank() > a.rank()) {
    throw shape_error(std::string(op) + ": rhs rank exceeds lhs, " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  }
  std::size_t off = a.rank() - b.rank();
  for (std::size_t i = 0; i < b.rank(); ++i) {
    if (a.shape()[off + i] != b.shape()[i]) {
      throw shape_error(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()) + " differ beyond the leading batch axis");
    }
  }
  std::int64_t lead = 1;
  for (std::size_t i = 0; i < off; ++i) lead *= a.shape()[i];
  return lead;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  const std::int64_t lead = detail::broadcast_lead(a, b, "add");
  const std::int64_t n = b.numel();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t l = 0; l < lead; ++l)
    for (std::int64_t i = 0; i < n; ++i) po[l * n + i] = pa[l * n + i] + pb[i];
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record(out, [ac, bc, oc, lead, n]() mutable {
      const T* g = oc.grad();
      if (ac.requires_grad()) {
        T* ga = ac.grad();
        for (std::int64_t i = 0; i < lead * n; ++i) ga[i] += g[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        for (std::int64_t l = 0; l < lead; ++l)
          for (std::int64_t i = 0; i < n; ++i) gb[i] += g[l * n + i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  const std::int64_t lead = detail::broadcast_lead(a, b, "sub");
  const std::int64_t n = b.numel();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t l = 0; l < lead; ++l)
    for (std::int64_t i = 0; i < n; ++i) po[l * n + i] = pa[l * n + i] - pb[i];
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record(out, [ac, bc, oc, lead, n]() mutable {
      const T* g = oc.grad();
      if (ac.requires_grad()) {
        T* ga = ac.grad();
        for (std::int64_t i = 0; i < lead * n; ++i) ga[i] += g[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        for (std::int64_t l = 0; l < lead; ++l)
          for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[l * n + i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  const std::int64_t lead = detail::broadcast_lead(a, b, "mul");
  const std::int64_t n = b.numel();
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t l = 0; l < lead; ++l)
    for (std::int64_t i = 0; i < n; ++i) po[l * n + i] = pa[l * n + i] * pb[i];
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record(out, [ac, bc, oc, lead, n]() mutable {
      const T* g = oc.grad();
      const T* pa2 = ac.data();
      const T* pb2 = bc.data();
      if (ac.requires_grad()) {
        T* ga = ac.grad();
        for (std::int64_t l = 0; l < lead; ++l)
          for (std::int64_t i = 0; i < n; ++i) ga[l * n + i] += g[l * n + i] * pb2[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        for (std::int64_t l = 0; l < lead; ++l)
          for (std::int64_t i = 0; i < n; ++i) gb[i] += g[l * n + i] * pa2[l * n + i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = c * px[i];
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record(out, [xc, oc, c, n]() mutable {
      const T* g = oc.grad();
      T* gx = xc.grad();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += c * g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] + c;
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record(out, [xc, oc, n]() mutable {
      const T* g = oc.grad();
      T* gx = xc.grad();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record(out, [xc, oc, n]() mutable {
      const T* g = oc.grad();
      const T* px2 = xc.data();
      T* gx = xc.grad();
      for (std::int64_t i = 0; i < n; ++i)
        if (px2[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> relu6(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = std::min(std::max(px[i], T(0)), T(6));
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record(out, [xc, oc, n]() mutable {
      const T* g = oc.grad();
      const T* px2 = xc.data();
      T* gx = xc.grad();
      for (std::int64_t i = 0; i < n; ++i)
        if (px2[i] > T(0) && px2[i] < T(6)) gx[i] += g[i];
    });
  }
  return out;
}

// Copying reshape with an identity backward rule.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape, Tape<T>* tape = nullptr) {
  if (shape_numel(new_shape) != x.numel()) {
    throw shape_error("reshape: " + shape_str(x.shape()) + " to " + shape_str(new_shape) +
                      " changes element count");
  }
  Tensor<T> out = Tensor<T>::from_data(std::move(new_shape), x.storage());
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    const std::int64_t n = x.numel();
    tape->record(out, [xc, oc, n]() mutable {
      const T* g = oc.grad();
      T* gx = xc.grad();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  const T* px = x.data();
  const std::int64_t n = x.numel();
  T s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += px[i];
  Tensor<T> out = Tensor<T>::scalar(s);
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record(out, [xc, oc, n]() mutable {
      const T g = oc.grad()[0];
      T* gx = xc.grad();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  const std::int64_t n = x.numel();
  if (n == 0) throw contract_error("mean_all: empty tensor");
  Tensor<T> s = sum_all(x, tape);
  return scale(s, T(1) / static_cast<T>(n), tape);
}

// Per-row dot product of two [B, d] tensors -> [B].
template <class T>
Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape() != b.shape()) {
    throw shape_error("rowwise_dot: shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + " must be equal rank-2");
  }
  const std::int64_t B = a.dim(0), d = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros({B});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < B; ++i) {
    T s = 0;
    for (std::int64_t j = 0; j < d; ++j) s += pa[i * d + j] * pb[i * d + j];
    po[i] = s;
  }
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record(out, [ac, bc, oc, B, d]() mutable {
      const T* g = oc.grad();
      const T* pa2 = ac.data();
      const T* pb2 = bc.data();
      if (ac.requires_grad()) {
        T* ga = ac.grad();
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t j = 0; j < d; ++j) ga[i * d + j] += g[i] * pb2[i * d + j];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t j = 0; j < d; ++j) gb[i * d + j] += g[i] * pa2[i * d + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// out[M,N] = a[M,K] * b[K,N].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw shape_error("matmul: inner dimensions of " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + " do not match");
  }
  const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({M, N});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < M; ++i)
    for (std::int64_t k = 0; k < K; ++k) {
      const T av = pa[i * K + k];
      const T* brow = pb + k * N;
      T* orow = po + i * N;
      for (std::int64_t j = 0; j < N; ++j) orow[j] += av * brow[j];
    }
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record(out, [ac, bc, oc, M, K, N]() mutable {
      const T* g = oc.grad();
      const T* pa2 = ac.data();
      const T* pb2 = bc.data();
      if (ac.requires_grad()) {
        // da = g * b^T
        T* ga = ac.grad();
        for (std::int64_t i = 0; i < M; ++i)
          for (std::int64_t k = 0; k < K; ++k) {
            T s = 0;
            const T* grow = g + i * N;
            const T* brow = pb2 + k * N;
            for (std::int64_t j = 0; j < N; ++j) s += grow[j] * brow[j];
            ga[i * K + k] += s;
          }
      }
      if (bc.requires_grad()) {
        // db = a^T * g
        T* gb = bc.grad();
        for (std::int64_t i = 0; i < M; ++i)
          for (std::int64_t k = 0; k < K; ++k) {
            const T av = pa2[i * K + k];
            const T* grow = g + i * N;
            T* gbrow = gb + k * N;
            for (std::int64_t j = 0; j < N; ++j) gbrow[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

// out[M,N] = a[M,K] * b[N,K]^T. Realizes x.W^T linear layers and similarity
// matrices without materializing transposes.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw shape_error("matmul_nt: inner dimensions of " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + "^T do not match");
  }
  const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
  Tensor<T> out = Tensor<T>::zeros({M, N});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < M; ++i)
    for (std::int64_t j = 0; j < N; ++j) {
      T s = 0;
      const T* arow = pa + i * K;
      const T* brow = pb + j * K;
      for (std::int64_t k = 0; k < K; ++k) s += arow[k] * brow[k];
      po[i * N + j] = s;
    }
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record(out, [ac, bc, oc, M, K, N]() mutable {
      const T* g = oc.grad();
      const T* pa2 = ac.data();
      const T* pb2 = bc.data();
      if (ac.requires_grad()) {
        // da = g * b
        T* ga = ac.grad();
        for (std::int64_t i = 0; i < M; ++i)
          for (std::int64_t j = 0; j < N; ++j) {
            const T gv = g[i * N + j];
            const T* brow = pb2 + j * K;
            T* garow = ga + i * K;
            for (std::int64_t k = 0; k < K; ++k) garow[k] += gv * brow[k];
          }
      }
      if (bc.requires_grad()) {
        // db = g^T * a
        T* gb = bc.grad();
        for (std::int64_t i = 0; i < M; ++i)
          for (std::int64_t j = 0; j < N; ++j) {
            const T gv = g[i * N + j];
            const T* arow = pa2 + i * K;
            T* gbrow = gb + j * K;
            for (std::int64_t k = 0; k < K; ++k) gbrow[k] += gv * arow[k];
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// concatenation (rank-2 only: embedding plumbing for the contrastive losses)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw shape_error("concat_rows: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                      " must share the column count");
  }
  const std::int64_t ra = a.dim(0), rb = b.dim(0), d = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros({ra + rb, d});
  std::copy(a.data(), a.data() + ra * d, out.data());
  std::copy(b.data(), b.data() + rb * d, out.data() + ra * d);
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record(out, [ac, bc, oc, ra, rb, d]() mutable {
      const T* g = oc.grad();
      if (ac.requires_grad()) {
        T* ga = ac.grad();
        for (std::int64_t i = 0; i < ra * d; ++i) ga[i] += g[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        for (std::int64_t i = 0; i < rb * d; ++i) gb[i] += g[ra * d + i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw shape_error("concat_cols: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                      " must share the row count");
  }
  const std::int64_t B = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({B, ca + cb});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < B; ++i) {
    std::copy(pa + i * ca, pa + (i + 1) * ca, po + i * (ca + cb));
    std::copy(pb + i * cb, pb + (i + 1) * cb, po + i * (ca + cb) + ca);
  }
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record(out, [ac, bc, oc, B, ca, cb]() mutable {
      const T* g = oc.grad();
      if (ac.requires_grad()) {
        T* ga = ac.grad();
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * (ca + cb) + j];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * (ca + cb) + ca + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

inline std::int64_t conv_out_dim(std::int64_t in, std::int64_t k, std::int64_t stride,
                                 std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Cross-correlation (no kernel flip). x: [B,C,H,W], w: [O,C,k,k].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad,
                 Tape<T>* tape = nullptr) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw shape_error("conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) +
                      " and " + shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw shape_error("conv2d: input channels " + shape_str(x.shape()) +
                      " do not match kernel " + shape_str(w.shape()));
  }
  if (stride < 1) throw contract_error("conv2d: stride must be >= 1");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (kh > H + 2 * pad || kw > W + 2 * pad) {
    throw shape_error("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                      shape_str(x.shape()) + " at pad " + std::to_string(pad));
  }
  const std::int64_t Ho = conv_out_dim(H, kh, stride, pad);
  const std::int64_t Wo = conv_out_dim(W, kw, stride, pad);
  Tensor<T> out = Tensor<T>::zeros({B, O, Ho, Wo});
  const T* px = x.data();
  const T* pw = w.data();
  T* po = out.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t o = 0; o < O; ++o) {
      T* omap = po + ((b * O + o) * Ho) * Wo;
      for (std::int64_t c = 0; c < C; ++c) {
        const T* xmap = px + ((b * C + c) * H) * W;
        const T* wk = pw + ((o * C + c) * kh) * kw;
        for (std::int64_t r = 0; r < kh; ++r)
          for (std::int64_t s = 0; s < kw; ++s) {
            const T wv = wk[r * kw + s];
            for (std::int64_t oh = 0; oh < Ho; ++oh) {
              const std::int64_t ih = oh * stride - pad + r;
              if (ih < 0 || ih >= H) continue;
              const T* xrow = xmap + ih * W;
              T* orow = omap + oh * Wo;
              for (std::int64_t ow = 0; ow < Wo; ++ow) {
                const std::int64_t iw = ow * stride - pad + s;
                if (iw < 0 || iw >= W) continue;
                orow[ow] += wv * xrow[iw];
              }
            }
          }
      }
    }
  if (detail::want_grad(tape, {&x, &w})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, oc = out;
    const int st = stride, pd = pad;
    tape->record(out, [xc, wc, oc, B, C, H, W, O, kh, kw, Ho, Wo, st, pd]() mutable {
      const T* g = oc.grad();
      const T* px2 = xc.data();
      const T* pw2 = wc.data();
      const bool gx_on = xc.requires_grad();
      const bool gw_on = wc.requires_grad();
      T* gx = gx_on ? xc.grad() : nullptr;
      T* gw = gw_on ? wc.grad() : nullptr;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t o = 0; o < O; ++o) {
          const T* gmap = g + ((b * O + o) * Ho) * Wo;
          for (std::int64_t c = 0; c < C; ++c) {
            const T* xmap = px2 + ((b * C + c) * H) * W;
            const T* wk = pw2 + ((o * C + c) * kh) * kw;
            T* gxmap = gx_on ? gx + ((b * C + c) * H) * W : nullptr;
            T* gwk = gw_on ? gw + ((o * C + c) * kh) * kw : nullptr;
            for (std::int64_t r = 0; r < kh; ++r)
              for (std::int64_t s = 0; s < kw; ++s) {
                const T wv = wk[r * kw + s];
                T wsum = 0;
                for (std::int64_t oh = 0; oh < Ho; ++oh) {
                  const std::int64_t ih = oh * st - pd + r;
                  if (ih < 0 || ih >= H) continue;
                  const T* grow = gmap + oh * Wo;
                  const T* xrow = xmap + ih * W;
                  T* gxrow = gx_on ? gxmap + ih * W : nullptr;
                  for (std::int64_t ow = 0; ow < Wo; ++ow) {
                    const std::int64_t iw = ow * st - pd + s;
                    if (iw < 0 || iw >= W) continue;
                    const T gv = grow[ow];
                    if (gx_on) gxrow[iw] += gv * wv;
                    if (gw_on) wsum += gv * xrow[iw];
                  }
                }
                if (gw_on) gwk[r * kw + s] += wsum;
              }
          }
        }
    });
  }
  return out;
}

// Depthwise cross-correlation: each channel convolved independently.
// x: [B,C,H,W], w: [C,1,k,k].
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad,
                           Tape<T>* tape = nullptr) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != 1 || x.dim(1) != w.dim(0)) {
    throw shape_error("depthwise_conv2d: expected x [B,C,H,W] and w [C,1,k,k], got " +
                      shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (stride < 1) throw contract_error("depthwise_conv2d: stride must be >= 1");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t kh = w.dim(2), kw = w.dim(3);
  if (kh > H + 2 * pad || kw > W + 2 * pad) {
    throw shape_error("depthwise_conv2d: kernel " + shape_str(w.shape()) +
                      " larger than padded input " + shape_str(x.shape()));
  }
  const std::int64_t Ho = conv_out_dim(H, kh, stride, pad);
  const std::int64_t Wo = conv_out_dim(W, kw, stride, pad);
  Tensor<T> out = Tensor<T>::zeros({B, C, Ho, Wo});
  const T* px = x.data();
  const T* pw = w.data();
  T* po = out.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* xmap = px + ((b * C + c) * H) * W;
      const T* wk = pw + (c * kh) * kw;
      T* omap = po + ((b * C + c) * Ho) * Wo;
      for (std::int64_t r = 0; r < kh; ++r)
        for (std::int64_t s = 0; s < kw; ++s) {
          const T wv = wk[r * kw + s];
          for (std::int64_t oh = 0; oh < Ho; ++oh) {
            const std::int64_t ih = oh * stride - pad + r;
            if (ih < 0 || ih >= H) continue;
            const T* xrow = xmap + ih * W;
            T* orow = omap + oh * Wo;
            for (std::int64_t ow = 0; ow < Wo; ++ow) {
              const std::int64_t iw = ow * stride - pad + s;
              if (iw < 0 || iw >= W) continue;
              orow[ow] += wv * xrow[iw];
            }
          }
        }
    }
  if (detail::want_grad(tape, {&x, &w})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, oc = out;
    const int st = stride, pd = pad;
    tape->record(out, [xc, wc, oc, B, C, H, W, kh, kw, Ho, Wo, st, pd]() mutable {
      const T* g = oc.grad();
      const T* px2 = xc.data();
      const T* pw2 = wc.data();
      const bool gx_on = xc.requires_grad();
      const bool gw_on = wc.requires_grad();
      T* gx = gx_on ? xc.grad() : nullptr;
      T* gw = gw_on ? wc.grad() : nullptr;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
          const T* gmap = g + ((b * C + c) * Ho) * Wo;
          const T* xmap = px2 + ((b * C + c) * H) * W;
          const T* wk = pw2 + (c * kh) * kw;
          T* gxmap = gx_on ? gx + ((b * C + c) * H) * W : nullptr;
          T* gwk = gw_on ? gw + (c * kh) * kw : nullptr;
          for (std::int64_t r = 0; r < kh; ++r)
            for (std::int64_t s = 0; s < kw; ++s) {
              const T wv = wk[r * kw + s];
              T wsum = 0;
              for (std::int64_t oh = 0; oh < Ho; ++oh) {
                const std::int64_t ih = oh * st - pd + r;
                if (ih < 0 || ih >= H) continue;
                const T* grow = gmap + oh * Wo;
                const T* xrow = xmap + ih * W;
                T* gxrow = gx_on ? gxmap + ih * W : nullptr;
                for (std::int64_t ow = 0; ow < Wo; ++ow) {
                  const std::int64_t iw = ow * st - pd + s;
                  if (iw < 0 || iw >= W) continue;
                  const T gv = grow[ow];
                  if (gx_on) gxrow[iw] += gv * wv;
                  if (gw_on) wsum += gv * xrow[iw];
                }
              }
              if (gw_on) gwk[r * kw + s] += wsum;
            }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization and pooling
// ---------------------------------------------------------------------------

// Batch normalization over [B,C,H,W] with per-channel affine. Training mode
// normalizes with batch statistics and updates the running buffers in place
// (momentum convention: running <- (1-m)*running + m*batch). Eval mode uses
// the running buffers and treats them as constants.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                      T momentum, T eps, Tape<T>* tape = nullptr) {
  if (x.rank() != 4) throw shape_error("batchnorm2d: expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C) {
    throw shape_error("batchnorm2d: affine/running buffers do not match " + std::to_string(C) +
                      " channels");
  }
  const std::int64_t HW = H * W;
  const std::int64_t count = B * HW;
  std::vector<T> mean(C), inv_std(C);
  if (training) {
    for (std::int64_t c = 0; c < C; ++c) {
      T s = 0;
      for (std::int64_t b = 0; b < B; ++b) {
        const T* m = x.data() + ((b * C + c) * HW);
        for (std::int64_t i = 0; i < HW; ++i) s += m[i];
      }
      const T mu = s / static_cast<T>(count);
      T v = 0;
      for (std::int64_t b = 0; b < B; ++b) {
        const T* m = x.data() + ((b * C + c) * HW);
        for (std::int64_t i = 0; i < HW; ++i) {
          const T d = m[i] - mu;
          v += d * d;
        }
      }
      const T var = v / static_cast<T>(count);
      mean[c] = mu;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
      running_mean.data()[c] = (T(1) - momentum) * running_mean.data()[c] + momentum * mu;
      running_var.data()[c] = (T(1) - momentum) * running_var.data()[c] + momentum * unbiased;
    }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      inv_std[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
    }
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const T mu = mean[c], is = inv_std[c], gm = pg[c], bt = pb[c];
      const T* xm = px + ((b * C + c) * HW);
      T* om = po + ((b * C + c) * HW);
      for (std::int64_t i = 0; i < HW; ++i) om[i] = gm * (xm[i] - mu) * is + bt;
    }
  if (detail::want_grad(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, gc = gamma, bc2 = beta, oc = out;
    auto mean_s = std::make_shared<std::vector<T>>(std::move(mean));
    auto istd_s = std::make_shared<std::vector<T>>(std::move(inv_std));
    const bool train_mode = training;
    tape->record(out, [xc, gc, bc2, oc, mean_s, istd_s, B, C, HW, count, train_mode]() mutable {
      const T* g = oc.grad();
      const T* px2 = xc.data();
      const T* pg2 = gc.data();
      const bool gx_on = xc.requires_grad();
      T* gx = gx_on ? xc.grad() : nullptr;
      T* gg = gc.requires_grad() ? gc.grad() : nullptr;
      T* gb = bc2.requires_grad() ? bc2.grad() : nullptr;
      for (std::int64_t c = 0; c < C; ++c) {
        const T mu = (*mean_s)[c], is = (*istd_s)[c];
        T sum_g = 0, sum_gxh = 0;
        for (std::int64_t b = 0; b < B; ++b) {
          const T* gm = g + ((b * C + c) * HW);
          const T* xm = px2 + ((b * C + c) * HW);
          for (std::int64_t i = 0; i < HW; ++i) {
            sum_g += gm[i];
            sum_gxh += gm[i] * (xm[i] - mu) * is;
          }
        }
        if (gg) gg[c] += sum_gxh;
        if (gb) gb[c] += sum_g;
        if (gx_on) {
          const T gm_c = pg2[c];
          if (train_mode) {
            const T n = static_cast<T>(count);
            for (std::int64_t b = 0; b < B; ++b) {
              const T* gm = g + ((b * C + c) * HW);
              const T* xm = px2 + ((b * C + c) * HW);
              T* gxm = gx + ((b * C + c) * HW);
              for (std::int64_t i = 0; i < HW; ++i) {
                const T xh = (xm[i] - mu) * is;
                gxm[i] += gm_c * is / n * (n * gm[i] - sum_g - xh * sum_gxh);
              }
            }
          } else {
            for (std::int64_t b = 0; b < B; ++b) {
              const T* gm = g + ((b * C + c) * HW);
              T* gxm = gx + ((b * C + c) * HW);
              for (std::int64_t i = 0; i < HW; ++i) gxm[i] += gm_c * is * gm[i];
            }
          }
        }
      }
    });
  }
  return out;
}

// [B,C,H,W] -> [B,C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  if (x.rank() != 4) {
    throw shape_error("global_avg_pool: expected [B,C,H,W], got " + shape_str(x.shape()));
  }
  const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({B, C});
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    T s = 0;
    const T* m = px + bc * HW;
    for (std::int64_t i = 0; i < HW; ++i) s += m[i];
    po[bc] = s / static_cast<T>(HW);
  }
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record(out, [xc, oc, B, C, HW]() mutable {
      const T* g = oc.grad();
      T* gx = xc.grad();
      for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const T gv = g[bc] / static_cast<T>(HW);
        T* m = gx + bc * HW;
        for (std::int64_t i = 0; i < HW; ++i) m[i] += gv;
      }
    });
  }
  return out;
}

// Divides every slice along `axis` by max(||slice||_2, eps).
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis, T eps, Tape<T>* tape = nullptr) {
  if (axis < 0 || static_cast<std::size_t>(axis) >= x.rank()) {
    throw shape_error("l2_normalize: axis " + std::to_string(axis) + " invalid for " +
                      shape_str(x.shape()));
  }
  const std::int64_t n = x.shape()[axis];
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  // Stored norms are negated for slices where the eps clamp fired, so the
  // backward pass can tell the two Jacobians apart.
  auto norms = std::make_shared<std::vector<T>>(outer * inner);
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      T s = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        const T v = px[base + j * inner];
        s += v * v;
      }
      const T raw = std::sqrt(s);
      const bool clamped = raw < eps;
      const T nor = clamped ? eps : raw;
      (*norms)[o * inner + in] = clamped ? -nor : nor;
      for (std::int64_t j = 0; j < n; ++j) po[base + j * inner] = px[base + j * inner] / nor;
    }
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record(out, [xc, oc, norms, outer, inner, n]() mutable {
      const T* g = oc.grad();
      const T* py = oc.data();
      T* gx = xc.grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * n * inner + in;
          const T stored = (*norms)[o * inner + in];
          if (stored < T(0)) {
            // clamped slice: y = x / eps is plain scaling
            for (std::int64_t j = 0; j < n; ++j) {
              const std::int64_t idx = base + j * inner;
              gx[idx] += g[idx] / (-stored);
            }
            continue;
          }
          T gy = 0;
          for (std::int64_t j = 0; j < n; ++j) gy += g[base + j * inner] * py[base + j * inner];
          for (std::int64_t j = 0; j < n; ++j) {
            const std::int64_t idx = base + j * inner;
            gx[idx] += (g[idx] - gy * py[idx]) / stored;
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// classification losses (fused, numerically stabilized by max subtraction)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::int64_t>& labels,
                                Tape<T>* tape = nullptr) {
  if (logits.rank() != 2) {
    throw shape_error("softmax_cross_entropy: expected [B,C] logits, got " +
                      shape_str(logits.shape()));
  }
  const std::int64_t B = logits.dim(0), C = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B) {
    throw shape_error("softmax_cross_entropy: " + std::to_string(labels.size()) +
                      " labels for batch " + std::to_string(B));
  }
  for (std::int64_t i = 0; i < B; ++i) {
    if (labels[i] < 0 || labels[i] >= C) {
      throw contract_error("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                           " out of range [0," + std::to_string(C) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(B * C);
  const T* pl = logits.data();
  T loss = 0;
  for (std::int64_t i = 0; i < B; ++i) {
    const T* row = pl + i * C;
    T mx = row[0];
    for (std::int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::int64_t j = 0; j < C; ++j) z += std::exp(row[j] - mx);
    const T logz = std::log(z) + mx;
    loss += logz - row[labels[i]];
    for (std::int64_t j = 0; j < C; ++j) (*probs)[i * C + j] = std::exp(row[j] - logz);
  }
  Tensor<T> out = Tensor<T>::scalar(loss / static_cast<T>(B));
  if (detail::want_grad(tape, {&logits})) {
    out.set_requires_grad(true);
    Tensor<T> lc = logits, oc = out;
    auto labs = std::make_shared<std::vector<std::int64_t>>(labels);
    tape->record(out, [lc, oc, probs, labs, B, C]() mutable {
      const T g = oc.grad()[0] / static_cast<T>(B);
      T* gl = lc.grad();
      for (std::int64_t i = 0; i < B; ++i) {
        for (std::int64_t j = 0; j < C; ++j) gl[i * C + j] += g * (*probs)[i * C + j];
        gl[i * C + (*labs)[i]] -= g;
      }
    });
  }
  return out;
}

// Cross-entropy against fixed probability targets (rows of `targets` need not
// sum to one; no gradient flows into the targets).
template <class T>
Tensor<T> softmax_cross_entropy_soft(const Tensor<T>& logits, const Tensor<T>& targets,
                                     Tape<T>* tape = nullptr) {
  if (logits.rank() != 2 || targets.rank() != 2 || logits.shape() != targets.shape()) {
    throw shape_error("softmax_cross_entropy_soft: logits " + shape_str(logits.shape()) +
                      " vs targets " + shape_str(targets.shape()));
  }
  const std::int64_t B = logits.dim(0), C = logits.dim(1);
  auto probs = std::make_shared<std::vector<T>>(B * C);
  auto tsum = std::make_shared<std::vector<T>>(B);
  const T* pl = logits.data();
  const T* pt = targets.data();
  T loss = 0;
  for (std::int64_t i = 0; i < B; ++i) {
    const T* row = pl + i * C;
    T mx = row[0];
    for (std::int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::int64_t j = 0; j < C; ++j) z += std::exp(row[j] - mx);
    const T logz = std::log(z) + mx;
    T s = 0;
    for (std::int64_t j = 0; j < C; ++j) {
      const T t = pt[i * C + j];
      loss -= t * (row[j] - logz);
      s += t;
      (*probs)[i * C + j] = std::exp(row[j] - logz);
    }
    (*tsum)[i] = s;
  }
  Tensor<T> out = Tensor<T>::scalar(loss / static_cast<T>(B));
  if (detail::want_grad(tape, {&logits})) {
    out.set_requires_grad(true);
    Tensor<T> lc = logits, oc = out;
    Tensor<T> tc = targets.detach();
    tape->record(out, [lc, oc, tc, probs, tsum, B, C]() mutable {
      const T g = oc.grad()[0] / static_cast<T>(B);
      T* gl = lc.grad();
      const T* pt2 = tc.data();
      for (std::int64_t i = 0; i < B; ++i)
        for (std::int64_t j = 0; j < C; ++j)
          gl[i * C + j] += g * ((*tsum)[i] * (*probs)[i * C + j] - pt2[i * C + j]);
    });
  }
  return out;
}

// Plain row softmax, gradient-free helper (teacher targets, probes).
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) {
    throw shape_error("softmax_rows: expected [B,C], got " + shape_str(logits.shape()));
  }
  const std::int64_t B = logits.dim(0), C = logits.dim(1);
  Tensor<T> out = Tensor<T>::zeros(logits.shape());
  const T* pl = logits.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < B; ++i) {
    const T* row = pl + i * C;
    T mx = row[0];
    for (std::int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::int64_t j = 0; j < C; ++j) z += std::exp(row[j] - mx);
    for (std::int64_t j = 0; j < C; ++j) po[i * C + j] = std::exp(row[j] - mx) / z;
  }
  return out;
}

}  // namespace tinydistill

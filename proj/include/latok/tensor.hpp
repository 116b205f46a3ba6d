#pragma once
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define LATOK_GEMM_AVX2 1
#endif

#include "latok/attention.hpp"

namespace latok {

// Dense row-major tensor with reverse-mode gradients. Default scalar is
// float; the double instantiation exists so tests can run the identical
// graph code at a precision where finite differences are trustworthy.
template <typename S>
struct TensorDataT {
  std::vector<int> shape;
  std::vector<S> v;
  std::vector<S> g;
  bool rg = false;
};

template <typename S>
struct TensorT {
  std::shared_ptr<TensorDataT<S>> d;

  TensorT() = default;

  // Handle semantics: a TensorT is a shared reference to its storage, so the
  // accessors are shallow-const like a smart pointer's.
  bool defined() const { return (bool)d; }
  int dim() const { return (int)d->shape.size(); }
  int shape(int i) const { return d->shape[i]; }
  size_t size() const { return d->v.size(); }
  S* data() const { return const_cast<S*>(d->v.data()); }
  S* grad() const { return const_cast<S*>(d->g.data()); }
  bool wants_grad() const { return d && d->rg; }

  void ensure_grad() const {
    auto& dd = *const_cast<TensorDataT<S>*>(d.get());
    if (dd.g.size() != dd.v.size()) dd.g.assign(dd.v.size(), S(0));
  }
  void zero_grad() const {
    auto& dd = *const_cast<TensorDataT<S>*>(d.get());
    if (!dd.g.empty()) std::fill(dd.g.begin(), dd.g.end(), S(0));
  }

  S item() const {
    if (size() != 1) throw std::runtime_error("Tensor::item: tensor is not scalar");
    return d->v[0];
  }

  static size_t count(const std::vector<int>& shape) {
    size_t n = 1;
    for (int s : shape) {
      if (s <= 0) throw std::runtime_error("Tensor: non-positive dimension");
      n *= (size_t)s;
    }
    return n;
  }

  static TensorT zeros(std::vector<int> shape, bool rg = false) {
    TensorT t;
    t.d = std::make_shared<TensorDataT<S>>();
    t.d->shape = std::move(shape);
    t.d->v.assign(count(t.d->shape), S(0));
    t.d->rg = rg;
    if (rg) t.ensure_grad();
    return t;
  }

  static TensorT from(std::vector<int> shape, std::vector<S> vals, bool rg = false) {
    TensorT t = zeros(std::move(shape), rg);
    if (vals.size() != t.size()) throw std::runtime_error("Tensor::from: value count mismatch");
    t.d->v = std::move(vals);
    if (rg) t.ensure_grad();
    return t;
  }
};

using Tensor = TensorT<float>;

// Ordered record of primitive applications. Creation order is topological by
// construction, so backward is a single reverse sweep. One tape per thread is
// active at a time; with no active tape, ops run without recording.
template <typename S>
class TapeT {
 public:
  static TapeT*& current() {
    thread_local TapeT* cur = nullptr;
    return cur;
  }

  struct Scope {
    TapeT* prev;
    explicit Scope(TapeT& t) : prev(current()) { current() = &t; }
    ~Scope() { current() = prev; }
    Scope(const Scope&) = delete;
  };

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  size_t size() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1 and accumulates into every recorded input grad.
  // Single use: a second sweep would double-count.
  void backward(TensorT<S>& root) {
    if (root.size() != 1) throw std::runtime_error("backward: root must be scalar");
    if (done_) throw std::runtime_error("backward: tape already consumed");
    done_ = true;
    root.ensure_grad();
    root.grad()[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool done_ = false;
};

using Tape = TapeT<float>;

namespace detail {

template <typename S>
inline bool recording() {
  return TapeT<S>::current() != nullptr;
}

template <typename S>
inline void record(std::function<void()> fn) {
  TapeT<S>::current()->record(std::move(fn));
}

template <typename S>
inline TensorT<S> make_out(std::vector<int> shape, bool rg) {
  return TensorT<S>::zeros(std::move(shape), rg && recording<S>());
}

inline void require(bool ok, const char* msg) {
  if (!ok) throw std::runtime_error(msg);
}

// ---- GEMM kernels -------------------------------------------------------
// All loops have a fixed accumulation order, so results are bit-identical
// across runs of the same build regardless of anything runtime.

#ifdef LATOK_GEMM_AVX2
inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}
#endif

// C (MxN) = A (MxK) * B (KxN), optionally accumulating into C.
template <typename S>
void gemm_nn(int M, int N, int K, const S* A, int lda, const S* B, int ldb, S* C, int ldc, bool acc) {
#ifdef LATOK_GEMM_AVX2
  if constexpr (std::is_same_v<S, float>) {
    int i = 0;
    for (; i + 4 <= M; i += 4) {
      const float* a0 = A + (size_t)(i + 0) * lda;
      const float* a1 = A + (size_t)(i + 1) * lda;
      const float* a2 = A + (size_t)(i + 2) * lda;
      const float* a3 = A + (size_t)(i + 3) * lda;
      float* c0 = C + (size_t)(i + 0) * ldc;
      float* c1 = C + (size_t)(i + 1) * ldc;
      float* c2 = C + (size_t)(i + 2) * ldc;
      float* c3 = C + (size_t)(i + 3) * ldc;
      int j = 0;
      for (; j + 16 <= N; j += 16) {
        __m256 v00, v01, v10, v11, v20, v21, v30, v31;
        if (acc) {
          v00 = _mm256_loadu_ps(c0 + j);
          v01 = _mm256_loadu_ps(c0 + j + 8);
          v10 = _mm256_loadu_ps(c1 + j);
          v11 = _mm256_loadu_ps(c1 + j + 8);
          v20 = _mm256_loadu_ps(c2 + j);
          v21 = _mm256_loadu_ps(c2 + j + 8);
          v30 = _mm256_loadu_ps(c3 + j);
          v31 = _mm256_loadu_ps(c3 + j + 8);
        } else {
          v00 = v01 = v10 = v11 = v20 = v21 = v30 = v31 = _mm256_setzero_ps();
        }
        for (int k = 0; k < K; ++k) {
          const float* b = B + (size_t)k * ldb + j;
          __m256 b0 = _mm256_loadu_ps(b);
          __m256 b1 = _mm256_loadu_ps(b + 8);
          __m256 s0 = _mm256_broadcast_ss(a0 + k);
          __m256 s1 = _mm256_broadcast_ss(a1 + k);
          __m256 s2 = _mm256_broadcast_ss(a2 + k);
          __m256 s3 = _mm256_broadcast_ss(a3 + k);
          v00 = _mm256_fmadd_ps(s0, b0, v00);
          v01 = _mm256_fmadd_ps(s0, b1, v01);
          v10 = _mm256_fmadd_ps(s1, b0, v10);
          v11 = _mm256_fmadd_ps(s1, b1, v11);
          v20 = _mm256_fmadd_ps(s2, b0, v20);
          v21 = _mm256_fmadd_ps(s2, b1, v21);
          v30 = _mm256_fmadd_ps(s3, b0, v30);
          v31 = _mm256_fmadd_ps(s3, b1, v31);
        }
        _mm256_storeu_ps(c0 + j, v00);
        _mm256_storeu_ps(c0 + j + 8, v01);
        _mm256_storeu_ps(c1 + j, v10);
        _mm256_storeu_ps(c1 + j + 8, v11);
        _mm256_storeu_ps(c2 + j, v20);
        _mm256_storeu_ps(c2 + j + 8, v21);
        _mm256_storeu_ps(c3 + j, v30);
        _mm256_storeu_ps(c3 + j + 8, v31);
      }
      for (; j < N; ++j) {
        float s0 = acc ? c0[j] : 0.f, s1 = acc ? c1[j] : 0.f;
        float s2 = acc ? c2[j] : 0.f, s3 = acc ? c3[j] : 0.f;
        for (int k = 0; k < K; ++k) {
          float b = B[(size_t)k * ldb + j];
          s0 += a0[k] * b;
          s1 += a1[k] * b;
          s2 += a2[k] * b;
          s3 += a3[k] * b;
        }
        c0[j] = s0;
        c1[j] = s1;
        c2[j] = s2;
        c3[j] = s3;
      }
    }
    for (; i < M; ++i) {
      const float* a = A + (size_t)i * lda;
      float* c = C + (size_t)i * ldc;
      if (!acc) std::memset(c, 0, sizeof(float) * N);
      for (int k = 0; k < K; ++k) {
        __m256 s = _mm256_broadcast_ss(a + k);
        const float* b = B + (size_t)k * ldb;
        int j = 0;
        for (; j + 8 <= N; j += 8)
          _mm256_storeu_ps(c + j, _mm256_fmadd_ps(s, _mm256_loadu_ps(b + j), _mm256_loadu_ps(c + j)));
        for (; j < N; ++j) c[j] += a[k] * b[j];
      }
    }
    return;
  }
#endif
  for (int i = 0; i < M; ++i) {
    S* c = C + (size_t)i * ldc;
    if (!acc)
      for (int j = 0; j < N; ++j) c[j] = S(0);
    const S* a = A + (size_t)i * lda;
    for (int k = 0; k < K; ++k) {
      S av = a[k];
      const S* b = B + (size_t)k * ldb;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C (MxN) = A (MxK) * B^T, where B is stored (NxK).
template <typename S>
void gemm_nt(int M, int N, int K, const S* A, int lda, const S* B, int ldb, S* C, int ldc, bool acc) {
#ifdef LATOK_GEMM_AVX2
  if constexpr (std::is_same_v<S, float>) {
    for (int i = 0; i < M; ++i) {
      const float* a = A + (size_t)i * lda;
      float* c = C + (size_t)i * ldc;
      int j = 0;
      for (; j + 4 <= N; j += 4) {
        const float* b0 = B + (size_t)(j + 0) * ldb;
        const float* b1 = B + (size_t)(j + 1) * ldb;
        const float* b2 = B + (size_t)(j + 2) * ldb;
        const float* b3 = B + (size_t)(j + 3) * ldb;
        __m256 s0 = _mm256_setzero_ps(), s1 = _mm256_setzero_ps();
        __m256 s2 = _mm256_setzero_ps(), s3 = _mm256_setzero_ps();
        int k = 0;
        for (; k + 8 <= K; k += 8) {
          __m256 av = _mm256_loadu_ps(a + k);
          s0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b0 + k), s0);
          s1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b1 + k), s1);
          s2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b2 + k), s2);
          s3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b3 + k), s3);
        }
        float r0 = hsum8(s0), r1 = hsum8(s1), r2 = hsum8(s2), r3 = hsum8(s3);
        for (; k < K; ++k) {
          float av = a[k];
          r0 += av * b0[k];
          r1 += av * b1[k];
          r2 += av * b2[k];
          r3 += av * b3[k];
        }
        if (acc) {
          c[j + 0] += r0;
          c[j + 1] += r1;
          c[j + 2] += r2;
          c[j + 3] += r3;
        } else {
          c[j + 0] = r0;
          c[j + 1] = r1;
          c[j + 2] = r2;
          c[j + 3] = r3;
        }
      }
      for (; j < N; ++j) {
        const float* b = B + (size_t)j * ldb;
        __m256 s = _mm256_setzero_ps();
        int k = 0;
        for (; k + 8 <= K; k += 8) s = _mm256_fmadd_ps(_mm256_loadu_ps(a + k), _mm256_loadu_ps(b + k), s);
        float r = hsum8(s);
        for (; k < K; ++k) r += a[k] * b[k];
        c[j] = acc ? c[j] + r : r;
      }
    }
    return;
  }
#endif
  for (int i = 0; i < M; ++i) {
    const S* a = A + (size_t)i * lda;
    S* c = C + (size_t)i * ldc;
    for (int j = 0; j < N; ++j) {
      const S* b = B + (size_t)j * ldb;
      S r = S(0);
      for (int k = 0; k < K; ++k) r += a[k] * b[k];
      c[j] = acc ? c[j] + r : r;
    }
  }
}

// C (K1xN) (+)= A^T * B, where A is stored (MxK1) and B is (MxN).
template <typename S>
void gemm_tn(int M, int N, int K1, const S* A, int lda, const S* B, int ldb, S* C, int ldc, bool acc) {
  if (!acc)
    for (int k = 0; k < K1; ++k) std::memset(C + (size_t)k * ldc, 0, sizeof(S) * N);
  for (int m = 0; m < M; ++m) {
    const S* a = A + (size_t)m * lda;
    const S* b = B + (size_t)m * ldb;
    for (int k = 0; k < K1; ++k) {
      S av = a[k];
      S* c = C + (size_t)k * ldc;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

// ---- Primitives ----------------------------------------------------------

// matmul: (M,K) x (K,N) -> (M,N)
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require(a.dim() == 2 && b.dim() == 2, "matmul: operands must be 2-D");
  detail::require(a.shape(1) == b.shape(0), "matmul: inner dimensions differ");
  int M = a.shape(0), K = a.shape(1), N = b.shape(1);
  TensorT<S> out = detail::make_out<S>({M, N}, a.wants_grad() || b.wants_grad());
  detail::gemm_nn<S>(M, N, K, a.data(), K, b.data(), N, out.data(), N, false);
  if (out.wants_grad()) {
    detail::record<S>([a, b, out, M, K, N]() mutable {
      if (a.wants_grad())
        detail::gemm_nt<S>(M, K, N, out.grad(), N, b.data(), N, a.grad(), K, true);
      if (b.wants_grad())
        detail::gemm_tn<S>(M, N, K, a.data(), K, out.grad(), N, b.grad(), N, true);
    });
  }
  return out;
}

// linear: y = x W + bias; bias optional (undefined tensor skips it).
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias) {
  detail::require(x.dim() == 2 && w.dim() == 2, "linear: x and w must be 2-D");
  detail::require(x.shape(1) == w.shape(0), "linear: inner dimensions differ");
  int M = x.shape(0), K = x.shape(1), N = w.shape(1);
  bool rg = x.wants_grad() || w.wants_grad();
  if (bias.defined()) {
    detail::require(bias.dim() == 1 && bias.shape(0) == N, "linear: bias shape mismatch");
    rg = rg || bias.wants_grad();
  }
  TensorT<S> out = detail::make_out<S>({M, N}, rg);
  detail::gemm_nn<S>(M, N, K, x.data(), K, w.data(), N, out.data(), N, false);
  if (bias.defined()) {
    const S* bv = bias.data();
    for (int i = 0; i < M; ++i) {
      S* o = out.data() + (size_t)i * N;
      for (int j = 0; j < N; ++j) o[j] += bv[j];
    }
  }
  if (out.wants_grad()) {
    detail::record<S>([x, w, bias, out, M, K, N]() mutable {
      if (x.wants_grad())
        detail::gemm_nt<S>(M, K, N, out.grad(), N, w.data(), N, x.grad(), K, true);
      if (w.wants_grad())
        detail::gemm_tn<S>(M, N, K, x.data(), K, out.grad(), N, w.grad(), N, true);
      if (bias.defined() && bias.wants_grad()) {
        S* bg = bias.grad();
        for (int i = 0; i < M; ++i) {
          const S* og = out.grad() + (size_t)i * N;
          for (int j = 0; j < N; ++j) bg[j] += og[j];
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require(a.d->shape == b.d->shape, "add: shape mismatch");
  TensorT<S> out = detail::make_out<S>(a.d->shape, a.wants_grad() || b.wants_grad());
  const S* av = a.data();
  const S* bv = b.data();
  S* ov = out.data();
  for (size_t i = 0; i < out.size(); ++i) ov[i] = av[i] + bv[i];
  if (out.wants_grad()) {
    detail::record<S>([a, b, out]() mutable {
      const S* og = out.grad();
      if (a.wants_grad()) {
        S* ag = a.grad();
        for (size_t i = 0; i < out.size(); ++i) ag[i] += og[i];
      }
      if (b.wants_grad()) {
        S* bg = b.grad();
        for (size_t i = 0; i < out.size(); ++i) bg[i] += og[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  TensorT<S> out = detail::make_out<S>(a.d->shape, a.wants_grad());
  const S* av = a.data();
  S* ov = out.data();
  for (size_t i = 0; i < out.size(); ++i) ov[i] = av[i] * c;
  if (out.wants_grad()) {
    detail::record<S>([a, out, c]() mutable {
      const S* og = out.grad();
      S* ag = a.grad();
      for (size_t i = 0; i < out.size(); ++i) ag[i] += og[i] * c;
    });
  }
  return out;
}

// Row gather from an embedding table: out[r, :] = table[ids[r], :].
template <typename S>
TensorT<S> embed_rows(const TensorT<S>& table, const std::vector<int>& ids) {
  detail::require(table.dim() == 2, "embed_rows: table must be 2-D");
  int V = table.shape(0), H = table.shape(1);
  int R = (int)ids.size();
  for (int id : ids) detail::require(id >= 0 && id < V, "embed_rows: id out of range");
  TensorT<S> out = detail::make_out<S>({R, H}, table.wants_grad());
  for (int r = 0; r < R; ++r)
    std::memcpy(out.data() + (size_t)r * H, table.data() + (size_t)ids[r] * H, sizeof(S) * H);
  if (out.wants_grad()) {
    detail::record<S>([table, out, ids, H]() mutable {
      S* tg = table.grad();
      for (size_t r = 0; r < ids.size(); ++r) {
        const S* og = out.grad() + r * H;
        S* dst = tg + (size_t)ids[r] * H;
        for (int j = 0; j < H; ++j) dst[j] += og[j];
      }
    });
  }
  return out;
}

// y = (x - mean) / sqrt(var + eps) * gain + bias, per row. eps sits inside
// the square root, so an all-constant row maps to bias exactly.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, S eps = S(1e-5)) {
  detail::require(x.dim() == 2, "layer_norm: x must be 2-D");
  int R = x.shape(0), H = x.shape(1);
  detail::require(gain.dim() == 1 && gain.shape(0) == H, "layer_norm: gain shape mismatch");
  detail::require(bias.dim() == 1 && bias.shape(0) == H, "layer_norm: bias shape mismatch");
  bool rg = x.wants_grad() || gain.wants_grad() || bias.wants_grad();
  TensorT<S> out = detail::make_out<S>({R, H}, rg);
  auto stats = std::make_shared<std::vector<S>>((size_t)R * 2);
  for (int r = 0; r < R; ++r) {
    const S* xv = x.data() + (size_t)r * H;
    S mean = S(0);
    for (int j = 0; j < H; ++j) mean += xv[j];
    mean /= S(H);
    S var = S(0);
    for (int j = 0; j < H; ++j) {
      S d = xv[j] - mean;
      var += d * d;
    }
    var /= S(H);
    S rstd = S(1) / std::sqrt(var + eps);
    (*stats)[(size_t)r * 2] = mean;
    (*stats)[(size_t)r * 2 + 1] = rstd;
    S* ov = out.data() + (size_t)r * H;
    const S* gv = gain.data();
    const S* bv = bias.data();
    for (int j = 0; j < H; ++j) ov[j] = (xv[j] - mean) * rstd * gv[j] + bv[j];
  }
  if (out.wants_grad()) {
    detail::record<S>([x, gain, bias, out, stats, R, H]() mutable {
      for (int r = 0; r < R; ++r) {
        const S* xv = x.data() + (size_t)r * H;
        const S* og = out.grad() + (size_t)r * H;
        const S* gv = gain.data();
        S mean = (*stats)[(size_t)r * 2];
        S rstd = (*stats)[(size_t)r * 2 + 1];
        if (gain.wants_grad() || bias.wants_grad()) {
          S* gg = gain.wants_grad() ? gain.grad() : nullptr;
          S* bg = bias.wants_grad() ? bias.grad() : nullptr;
          for (int j = 0; j < H; ++j) {
            S xhat = (xv[j] - mean) * rstd;
            if (gg) gg[j] += og[j] * xhat;
            if (bg) bg[j] += og[j];
          }
        }
        if (x.wants_grad()) {
          S sum_dg = S(0), sum_dgx = S(0);
          for (int j = 0; j < H; ++j) {
            S dg = og[j] * gv[j];
            S xhat = (xv[j] - mean) * rstd;
            sum_dg += dg;
            sum_dgx += dg * xhat;
          }
          sum_dg /= S(H);
          sum_dgx /= S(H);
          S* xg = x.grad() + (size_t)r * H;
          for (int j = 0; j < H; ++j) {
            S dg = og[j] * gv[j];
            S xhat = (xv[j] - mean) * rstd;
            xg[j] += rstd * (dg - sum_dg - xhat * sum_dgx);
          }
        }
      }
    });
  }
  return out;
}

// tanh-form gelu.
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  TensorT<S> out = detail::make_out<S>(x.d->shape, x.wants_grad());
  const S* xv = x.data();
  S* ov = out.data();
  for (size_t i = 0; i < out.size(); ++i) {
    S v = xv[i];
    S t = std::tanh(S(kC) * (v + S(kA) * v * v * v));
    ov[i] = S(0.5) * v * (S(1) + t);
  }
  if (out.wants_grad()) {
    detail::record<S>([x, out]() mutable {
      const S* xv2 = x.data();
      const S* og = out.grad();
      S* xg = x.grad();
      for (size_t i = 0; i < out.size(); ++i) {
        S v = xv2[i];
        S t = std::tanh(S(kC) * (v + S(kA) * v * v * v));
        S dt = (S(1) - t * t) * S(kC) * (S(1) + S(3) * S(kA) * v * v);
        xg[i] += og[i] * (S(0.5) * (S(1) + t) + S(0.5) * v * dt);
      }
    });
  }
  return out;
}

// Slice one section (0 = q, 1 = k, 2 = v) of a packed qkv activation
// (B*L, 3*H*D) into per-head groups (B*heads, L, D).
template <typename S>
TensorT<S> split_heads(const TensorT<S>& x, int B, int L, int heads, int section) {
  detail::require(x.dim() == 2 && x.shape(0) == B * L, "split_heads: row count mismatch");
  detail::require(x.shape(1) % (3 * heads) == 0, "split_heads: width not divisible");
  detail::require(section >= 0 && section < 3, "split_heads: bad section");
  int H = x.shape(1) / 3;
  int D = H / heads;
  TensorT<S> out = detail::make_out<S>({B * heads, L, D}, x.wants_grad());
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h)
      for (int l = 0; l < L; ++l) {
        const S* src = x.data() + (size_t)(b * L + l) * x.shape(1) + section * H + h * D;
        S* dst = out.data() + ((size_t)(b * heads + h) * L + l) * D;
        std::memcpy(dst, src, sizeof(S) * D);
      }
  if (out.wants_grad()) {
    int W = x.shape(1);
    detail::record<S>([x, out, B, L, heads, section, H, D, W]() mutable {
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
          for (int l = 0; l < L; ++l) {
            S* dst = x.grad() + (size_t)(b * L + l) * W + section * H + h * D;
            const S* src = out.grad() + ((size_t)(b * heads + h) * L + l) * D;
            for (int j = 0; j < D; ++j) dst[j] += src[j];
          }
    });
  }
  return out;
}

// Inverse of split_heads on the value path: (B*heads, L, D) -> (B*L, heads*D).
template <typename S>
TensorT<S> merge_heads(const TensorT<S>& x, int B, int L, int heads) {
  detail::require(x.dim() == 3 && x.shape(0) == B * heads && x.shape(1) == L, "merge_heads: shape mismatch");
  int D = x.shape(2);
  int H = heads * D;
  TensorT<S> out = detail::make_out<S>({B * L, H}, x.wants_grad());
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h)
      for (int l = 0; l < L; ++l)
        std::memcpy(out.data() + (size_t)(b * L + l) * H + h * D,
                    x.data() + ((size_t)(b * heads + h) * L + l) * D, sizeof(S) * D);
  if (out.wants_grad()) {
    detail::record<S>([x, out, B, L, heads, D, H]() mutable {
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
          for (int l = 0; l < L; ++l) {
            S* dst = x.grad() + ((size_t)(b * heads + h) * L + l) * D;
            const S* src = out.grad() + (size_t)(b * L + l) * H + h * D;
            for (int j = 0; j < D; ++j) dst[j] += src[j];
          }
    });
  }
  return out;
}

// scores[g] = q[g] k[g]^T * scale for each group g.
template <typename S>
TensorT<S> attn_scores(const TensorT<S>& q, const TensorT<S>& k, S scl) {
  detail::require(q.dim() == 3 && k.dim() == 3, "attn_scores: operands must be 3-D");
  detail::require(q.d->shape == k.d->shape, "attn_scores: shape mismatch");
  int G = q.shape(0), L = q.shape(1), D = q.shape(2);
  TensorT<S> out = detail::make_out<S>({G, L, L}, q.wants_grad() || k.wants_grad());
  for (int g = 0; g < G; ++g)
    detail::gemm_nt<S>(L, L, D, q.data() + (size_t)g * L * D, D, k.data() + (size_t)g * L * D, D,
                       out.data() + (size_t)g * L * L, L, false);
  S* ov = out.data();
  for (size_t i = 0; i < out.size(); ++i) ov[i] *= scl;
  if (out.wants_grad()) {
    detail::record<S>([q, k, out, G, L, D, scl]() mutable {
      std::vector<S> sg((size_t)L * L);
      for (int g = 0; g < G; ++g) {
        const S* og = out.grad() + (size_t)g * L * L;
        for (size_t i = 0; i < sg.size(); ++i) sg[i] = og[i] * scl;
        if (q.wants_grad())
          detail::gemm_nn<S>(L, D, L, sg.data(), L, k.data() + (size_t)g * L * D, D,
                             q.grad() + (size_t)g * L * D, D, true);
        if (k.wants_grad())
          detail::gemm_tn<S>(L, D, L, sg.data(), L, q.data() + (size_t)g * L * D, D,
                             k.grad() + (size_t)g * L * D, D, true);
      }
    });
  }
  return out;
}

// Renormalizing masked softmax: probabilities over visible keys only,
// invisible entries exactly zero. masks[g] applies to group g; a single mask
// may be shared by passing it for every group.
template <typename S>
TensorT<S> masked_softmax(const TensorT<S>& scores, const std::vector<const AttentionMask*>& masks) {
  detail::require(scores.dim() == 3, "masked_softmax: scores must be (G, L, L)");
  int G = scores.shape(0), L = scores.shape(1);
  detail::require(scores.shape(2) == L, "masked_softmax: scores must be square per group");
  detail::require((int)masks.size() == G, "masked_softmax: one mask per group required");
  for (const AttentionMask* m : masks) detail::require(m && m->len == L, "masked_softmax: mask size mismatch");
  TensorT<S> out = detail::make_out<S>({G, L, L}, scores.wants_grad());
  for (int g = 0; g < G; ++g) {
    const AttentionMask& m = *masks[g];
    for (int i = 0; i < L; ++i) {
      const S* sv = scores.data() + ((size_t)g * L + i) * L;
      S* ov = out.data() + ((size_t)g * L + i) * L;
      const uint8_t* vis = m.row(i);
      S mx = -std::numeric_limits<S>::infinity();
      for (int j = 0; j < L; ++j)
        if (vis[j] && sv[j] > mx) mx = sv[j];
      if (mx == -std::numeric_limits<S>::infinity())
        throw std::runtime_error("masked_softmax: row with no visible key");
      S sum = S(0);
      for (int j = 0; j < L; ++j) {
        if (vis[j]) {
          S e = std::exp(sv[j] - mx);
          ov[j] = e;
          sum += e;
        } else {
          ov[j] = S(0);
        }
      }
      S inv = S(1) / sum;
      for (int j = 0; j < L; ++j) ov[j] *= inv;
    }
  }
  if (out.wants_grad()) {
    detail::record<S>([scores, out, G, L]() mutable {
      for (int g = 0; g < G; ++g)
        for (int i = 0; i < L; ++i) {
          const S* p = out.data() + ((size_t)g * L + i) * L;
          const S* og = out.grad() + ((size_t)g * L + i) * L;
          S* sg = scores.grad() + ((size_t)g * L + i) * L;
          S dot = S(0);
          for (int j = 0; j < L; ++j) dot += og[j] * p[j];
          for (int j = 0; j < L; ++j) sg[j] += p[j] * (og[j] - dot);
        }
    });
  }
  return out;
}

// Single-matrix overload: scores (L, L) with one mask.
template <typename S>
TensorT<S> masked_softmax(const TensorT<S>& scores, const AttentionMask& mask) {
  detail::require(scores.dim() == 2 && scores.shape(0) == scores.shape(1),
                  "masked_softmax: scores must be square");
  int L = scores.shape(0);
  detail::require(mask.len == L, "masked_softmax: mask size mismatch");
  TensorT<S> out = detail::make_out<S>({L, L}, scores.wants_grad());
  auto vis_mask = std::make_shared<AttentionMask>(mask);
  for (int i = 0; i < L; ++i) {
    const S* sv = scores.data() + (size_t)i * L;
    S* ov = out.data() + (size_t)i * L;
    const uint8_t* vis = vis_mask->row(i);
    S mx = -std::numeric_limits<S>::infinity();
    for (int j = 0; j < L; ++j)
      if (vis[j] && sv[j] > mx) mx = sv[j];
    if (mx == -std::numeric_limits<S>::infinity())
      throw std::runtime_error("masked_softmax: row with no visible key");
    S sum = S(0);
    for (int j = 0; j < L; ++j) {
      if (vis[j]) {
        S e = std::exp(sv[j] - mx);
        ov[j] = e;
        sum += e;
      } else {
        ov[j] = S(0);
      }
    }
    S inv = S(1) / sum;
    for (int j = 0; j < L; ++j) ov[j] *= inv;
  }
  if (out.wants_grad()) {
    detail::record<S>([scores, out, L]() mutable {
      for (int i = 0; i < L; ++i) {
        const S* p = out.data() + (size_t)i * L;
        const S* og = out.grad() + (size_t)i * L;
        S* sg = scores.grad() + (size_t)i * L;
        S dot = S(0);
        for (int j = 0; j < L; ++j) dot += og[j] * p[j];
        for (int j = 0; j < L; ++j) sg[j] += p[j] * (og[j] - dot);
      }
    });
  }
  return out;
}

// out[g] = p[g] v[g] for each group.
template <typename S>
TensorT<S> attn_mix(const TensorT<S>& p, const TensorT<S>& v) {
  detail::require(p.dim() == 3 && v.dim() == 3, "attn_mix: operands must be 3-D");
  int G = p.shape(0), L = p.shape(1), D = v.shape(2);
  detail::require(p.shape(2) == L && v.shape(0) == G && v.shape(1) == L, "attn_mix: shape mismatch");
  TensorT<S> out = detail::make_out<S>({G, L, D}, p.wants_grad() || v.wants_grad());
  for (int g = 0; g < G; ++g)
    detail::gemm_nn<S>(L, D, L, p.data() + (size_t)g * L * L, L, v.data() + (size_t)g * L * D, D,
                       out.data() + (size_t)g * L * D, D, false);
  if (out.wants_grad()) {
    detail::record<S>([p, v, out, G, L, D]() mutable {
      for (int g = 0; g < G; ++g) {
        const S* og = out.grad() + (size_t)g * L * D;
        if (p.wants_grad())
          detail::gemm_nt<S>(L, L, D, og, D, v.data() + (size_t)g * L * D, D,
                             p.grad() + (size_t)g * L * L, L, true);
        if (v.wants_grad())
          detail::gemm_tn<S>(L, D, L, p.data() + (size_t)g * L * L, L, og, D,
                             v.grad() + (size_t)g * L * D, D, true);
      }
    });
  }
  return out;
}

// Per-row cross entropy against integer targets. Rows with active[r] == 0
// contribute an exact zero loss and an exact zero gradient.
template <typename S>
TensorT<S> cross_entropy_rows(const TensorT<S>& logits, const std::vector<int>& targets,
                              const std::vector<uint8_t>& active) {
  detail::require(logits.dim() == 2, "cross_entropy_rows: logits must be 2-D");
  int R = logits.shape(0), V = logits.shape(1);
  detail::require((int)targets.size() == R && (int)active.size() == R,
                  "cross_entropy_rows: row metadata mismatch");
  TensorT<S> out = detail::make_out<S>({R}, logits.wants_grad());
  auto probs = std::make_shared<std::vector<S>>();
  bool keep = out.wants_grad();
  if (keep) probs->assign((size_t)R * V, S(0));
  for (int r = 0; r < R; ++r) {
    if (!active[r]) {
      out.data()[r] = S(0);
      continue;
    }
    detail::require(targets[r] >= 0 && targets[r] < V, "cross_entropy_rows: target out of range");
    const S* lv = logits.data() + (size_t)r * V;
    S mx = lv[0];
    for (int j = 1; j < V; ++j)
      if (lv[j] > mx) mx = lv[j];
    S sum = S(0);
    for (int j = 0; j < V; ++j) sum += std::exp(lv[j] - mx);
    S lse = mx + std::log(sum);
    out.data()[r] = lse - lv[targets[r]];
    if (keep) {
      S* pv = probs->data() + (size_t)r * V;
      for (int j = 0; j < V; ++j) pv[j] = std::exp(lv[j] - lse);
    }
  }
  if (out.wants_grad()) {
    detail::record<S>([logits, out, probs, targets, active, R, V]() mutable {
      for (int r = 0; r < R; ++r) {
        if (!active[r]) continue;
        S go = out.grad()[r];
        if (go == S(0)) continue;
        const S* pv = probs->data() + (size_t)r * V;
        S* lg = logits.grad() + (size_t)r * V;
        for (int j = 0; j < V; ++j) lg[j] += go * pv[j];
        lg[targets[r]] -= go;
      }
    });
  }
  return out;
}

// Scalar reduction sum_i w[i] * x[i] over the flattened tensor.
template <typename S>
TensorT<S> weighted_sum(const TensorT<S>& x, const std::vector<S>& w) {
  detail::require(w.size() == x.size(), "weighted_sum: weight count mismatch");
  TensorT<S> out = detail::make_out<S>({1}, x.wants_grad());
  S acc = S(0);
  const S* xv = x.data();
  for (size_t i = 0; i < x.size(); ++i) acc += w[i] * xv[i];
  out.data()[0] = acc;
  if (out.wants_grad()) {
    detail::record<S>([x, out, w]() mutable {
      S go = out.grad()[0];
      S* xg = x.grad();
      for (size_t i = 0; i < x.size(); ++i) xg[i] += go * w[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
  return weighted_sum(x, std::vector<S>(x.size(), S(1)));
}

}  // namespace latok

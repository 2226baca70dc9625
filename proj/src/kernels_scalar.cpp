#include "kernelvis/kernels.hpp"

// Scalar reference kernels. These define the exact arithmetic order every
// other variant must reproduce (gemm/conv accumulate over the reduction index
// in increasing order, one output element at a time).

namespace kv::kernels {
namespace {

template <typename T>
void gemm_scalar(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (size_t p = 0; p < k; ++p) acc = acc + a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <typename T>
void gemm_acc_scalar(const T* a, const T* b, T* c, size_t m, size_t k,
                     size_t n) {
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) {
      T acc = c[i * n + j];
      for (size_t p = 0; p < k; ++p) acc = acc + a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <typename T>
void conv2d_scalar(const T* in, size_t cin, size_t ph, size_t pw, const T* w,
                   const T* bias, size_t cout, size_t kh, size_t kw,
                   size_t stride, T* out, size_t oh, size_t ow) {
  for (size_t co = 0; co < cout; ++co) {
    const T b = bias ? bias[co] : T(0);
    T* dst = out + co * oh * ow;
    const T* wc = w + co * cin * kh * kw;
    for (size_t oy = 0; oy < oh; ++oy) {
      for (size_t ox = 0; ox < ow; ++ox) {
        T acc = b;
        for (size_t ci = 0; ci < cin; ++ci) {
          const T* src = in + ci * ph * pw + oy * stride * pw + ox * stride;
          const T* wk = wc + ci * kh * kw;
          for (size_t ky = 0; ky < kh; ++ky) {
            for (size_t kx = 0; kx < kw; ++kx) {
              acc = acc + src[ky * pw + kx] * wk[ky * kw + kx];
            }
          }
        }
        dst[oy * ow + ox] = acc;
      }
    }
  }
}

template <typename T>
void conv2d_grad_weight_scalar(const T* in, size_t cin, size_t ph, size_t pw,
                               const T* gout, size_t cout, size_t oh,
                               size_t ow, size_t kh, size_t kw, size_t stride,
                               T* gw) {
  for (size_t co = 0; co < cout; ++co) {
    const T* g = gout + co * oh * ow;
    for (size_t ci = 0; ci < cin; ++ci) {
      const T* src = in + ci * ph * pw;
      T* gwc = gw + (co * cin + ci) * kh * kw;
      for (size_t ky = 0; ky < kh; ++ky) {
        for (size_t kx = 0; kx < kw; ++kx) {
          T acc = T(0);
          for (size_t oy = 0; oy < oh; ++oy) {
            const T* row = src + (oy * stride + ky) * pw + kx;
            const T* grow = g + oy * ow;
            for (size_t ox = 0; ox < ow; ++ox) {
              acc = acc + grow[ox] * row[ox * stride];
            }
          }
          gwc[ky * kw + kx] += acc;
        }
      }
    }
  }
}

template <typename T>
void add_scalar_k(const T* a, const T* b, T* o, size_t n) {
  for (size_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
}

template <typename T>
void sub_scalar_k(const T* a, const T* b, T* o, size_t n) {
  for (size_t i = 0; i < n; ++i) o[i] = a[i] - b[i];
}

template <typename T>
void mul_scalar_k(const T* a, const T* b, T* o, size_t n) {
  for (size_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
}

template <typename T>
void scale_scalar_k(const T* a, T s, T* o, size_t n) {
  for (size_t i = 0; i < n; ++i) o[i] = a[i] * s;
}

template <typename T>
void axpy_scalar_k(T a, const T* x, T* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = y[i] + a * x[i];
}

template <typename T>
void mul_acc_scalar_k(const T* a, const T* b, T* o, size_t n) {
  for (size_t i = 0; i < n; ++i) o[i] = o[i] + a[i] * b[i];
}

template <typename T>
void relu_scalar_k(const T* a, T* o, size_t n) {
  for (size_t i = 0; i < n; ++i) o[i] = a[i] > T(0) ? a[i] : T(0);
}

template <typename T>
void relu_bwd_scalar_k(const T* x, const T* g, T* gx, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    if (x[i] > T(0)) gx[i] = gx[i] + g[i];
  }
}

}  // namespace

template <typename T>
Table<T> make_scalar_table() {
  Table<T> t;
  t.gemm = &gemm_scalar<T>;
  t.gemm_acc = &gemm_acc_scalar<T>;
  t.conv2d = &conv2d_scalar<T>;
  t.conv2d_grad_weight = &conv2d_grad_weight_scalar<T>;
  t.add = &add_scalar_k<T>;
  t.sub = &sub_scalar_k<T>;
  t.mul = &mul_scalar_k<T>;
  t.scale = &scale_scalar_k<T>;
  t.axpy = &axpy_scalar_k<T>;
  t.mul_acc = &mul_acc_scalar_k<T>;
  t.relu = &relu_scalar_k<T>;
  t.relu_bwd = &relu_bwd_scalar_k<T>;
  return t;
}

template Table<float> make_scalar_table<float>();
template Table<double> make_scalar_table<double>();

}  // namespace kv::kernels

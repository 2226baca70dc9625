#include "kernelvis/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define KV_X86 1
#include <immintrin.h>
#else
#define KV_X86 0
#endif

// AVX2 kernel variants. Outputs are vectorized across independent elements
// (gemm: output columns; conv: output x positions) while the reduction index
// runs in the same order as the scalar reference, so results are bit-exact
// against it. The one exception is conv2d_grad_weight, which blocks its
// (oy, ox) reduction across lanes.

namespace kv::kernels {

template <typename T>
Table<T> make_scalar_table();

#if KV_X86

namespace {

void gemm_avx2_f32(const float* a, const float* b, float* c, size_t m,
                   size_t k, size_t n) {
  const size_t nv = n & ~size_t(7);
  for (size_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    float* ci = c + i * n;
    for (size_t j = 0; j < nv; j += 8) {
      __m256 acc = _mm256_setzero_ps();
      for (size_t p = 0; p < k; ++p) {
        const __m256 av = _mm256_set1_ps(ai[p]);
        const __m256 bv = _mm256_loadu_ps(b + p * n + j);
        acc = _mm256_add_ps(acc, _mm256_mul_ps(av, bv));
      }
      _mm256_storeu_ps(ci + j, acc);
    }
    for (size_t j = nv; j < n; ++j) {
      float acc = 0.0f;
      for (size_t p = 0; p < k; ++p) acc = acc + ai[p] * b[p * n + j];
      ci[j] = acc;
    }
  }
}

void gemm_acc_avx2_f32(const float* a, const float* b, float* c, size_t m,
                       size_t k, size_t n) {
  const size_t nv = n & ~size_t(7);
  for (size_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    float* ci = c + i * n;
    for (size_t j = 0; j < nv; j += 8) {
      __m256 acc = _mm256_loadu_ps(ci + j);
      for (size_t p = 0; p < k; ++p) {
        const __m256 av = _mm256_set1_ps(ai[p]);
        const __m256 bv = _mm256_loadu_ps(b + p * n + j);
        acc = _mm256_add_ps(acc, _mm256_mul_ps(av, bv));
      }
      _mm256_storeu_ps(ci + j, acc);
    }
    for (size_t j = nv; j < n; ++j) {
      float acc = ci[j];
      for (size_t p = 0; p < k; ++p) acc = acc + ai[p] * b[p * n + j];
      ci[j] = acc;
    }
  }
}

void gemm_avx2_f64(const double* a, const double* b, double* c, size_t m,
                   size_t k, size_t n) {
  const size_t nv = n & ~size_t(3);
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (size_t j = 0; j < nv; j += 4) {
      __m256d acc = _mm256_setzero_pd();
      for (size_t p = 0; p < k; ++p) {
        const __m256d av = _mm256_set1_pd(ai[p]);
        const __m256d bv = _mm256_loadu_pd(b + p * n + j);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(av, bv));
      }
      _mm256_storeu_pd(ci + j, acc);
    }
    for (size_t j = nv; j < n; ++j) {
      double acc = 0.0;
      for (size_t p = 0; p < k; ++p) acc = acc + ai[p] * b[p * n + j];
      ci[j] = acc;
    }
  }
}

void gemm_acc_avx2_f64(const double* a, const double* b, double* c, size_t m,
                       size_t k, size_t n) {
  const size_t nv = n & ~size_t(3);
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (size_t j = 0; j < nv; j += 4) {
      __m256d acc = _mm256_loadu_pd(ci + j);
      for (size_t p = 0; p < k; ++p) {
        const __m256d av = _mm256_set1_pd(ai[p]);
        const __m256d bv = _mm256_loadu_pd(b + p * n + j);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(av, bv));
      }
      _mm256_storeu_pd(ci + j, acc);
    }
    for (size_t j = nv; j < n; ++j) {
      double acc = ci[j];
      for (size_t p = 0; p < k; ++p) acc = acc + ai[p] * b[p * n + j];
      ci[j] = acc;
    }
  }
}

// even elements of 16 consecutive floats starting at p
inline __m256 load_stride2_ps(const float* p) {
  const __m256 lo = _mm256_loadu_ps(p);
  const __m256 hi = _mm256_loadu_ps(p + 8);
  const __m256 t = _mm256_shuffle_ps(lo, hi, _MM_SHUFFLE(2, 0, 2, 0));
  return _mm256_castpd_ps(
      _mm256_permute4x64_pd(_mm256_castps_pd(t), _MM_SHUFFLE(3, 1, 2, 0)));
}

template <size_t kStride>
void conv2d_avx2_f32_impl(const float* in, size_t cin, size_t ph, size_t pw,
                          const float* w, const float* bias, size_t cout,
                          size_t kh, size_t kw, float* out, size_t oh,
                          size_t ow) {
  const size_t owv = ow & ~size_t(7);
  for (size_t co = 0; co < cout; ++co) {
    const float b = bias ? bias[co] : 0.0f;
    float* dst = out + co * oh * ow;
    const float* wc = w + co * cin * kh * kw;
    for (size_t oy = 0; oy < oh; ++oy) {
      size_t ox = 0;
      for (; ox < owv; ox += 8) {
        __m256 acc = _mm256_set1_ps(b);
        for (size_t ci = 0; ci < cin; ++ci) {
          const float* src =
              in + ci * ph * pw + oy * kStride * pw + ox * kStride;
          const float* wk = wc + ci * kh * kw;
          for (size_t ky = 0; ky < kh; ++ky) {
            for (size_t kx = 0; kx < kw; ++kx) {
              const float* p = src + ky * pw + kx;
              const __m256 v = kStride == 1 ? _mm256_loadu_ps(p)
                                            : load_stride2_ps(p);
              acc = _mm256_add_ps(
                  acc, _mm256_mul_ps(v, _mm256_set1_ps(wk[ky * kw + kx])));
            }
          }
        }
        _mm256_storeu_ps(dst + oy * ow + ox, acc);
      }
      for (; ox < ow; ++ox) {
        float acc = b;
        for (size_t ci = 0; ci < cin; ++ci) {
          const float* src =
              in + ci * ph * pw + oy * kStride * pw + ox * kStride;
          const float* wk = wc + ci * kh * kw;
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

void conv2d_avx2_f32(const float* in, size_t cin, size_t ph, size_t pw,
                     const float* w, const float* bias, size_t cout, size_t kh,
                     size_t kw, size_t stride, float* out, size_t oh,
                     size_t ow) {
  if (stride == 1) {
    conv2d_avx2_f32_impl<1>(in, cin, ph, pw, w, bias, cout, kh, kw, out, oh,
                            ow);
  } else if (stride == 2) {
    conv2d_avx2_f32_impl<2>(in, cin, ph, pw, w, bias, cout, kh, kw, out, oh,
                            ow);
  } else {
    make_scalar_table<float>().conv2d(in, cin, ph, pw, w, bias, cout, kh, kw,
                                      stride, out, oh, ow);
  }
}

void conv2d_avx2_f64(const double* in, size_t cin, size_t ph, size_t pw,
                     const double* w, const double* bias, size_t cout,
                     size_t kh, size_t kw, size_t stride, double* out,
                     size_t oh, size_t ow) {
  if (stride != 1) {
    make_scalar_table<double>().conv2d(in, cin, ph, pw, w, bias, cout, kh, kw,
                                       stride, out, oh, ow);
    return;
  }
  const size_t owv = ow & ~size_t(3);
  for (size_t co = 0; co < cout; ++co) {
    const double b = bias ? bias[co] : 0.0;
    double* dst = out + co * oh * ow;
    const double* wc = w + co * cin * kh * kw;
    for (size_t oy = 0; oy < oh; ++oy) {
      size_t ox = 0;
      for (; ox < owv; ox += 4) {
        __m256d acc = _mm256_set1_pd(b);
        for (size_t ci = 0; ci < cin; ++ci) {
          const double* src = in + ci * ph * pw + oy * pw + ox;
          const double* wk = wc + ci * kh * kw;
          for (size_t ky = 0; ky < kh; ++ky) {
            for (size_t kx = 0; kx < kw; ++kx) {
              const __m256d v = _mm256_loadu_pd(src + ky * pw + kx);
              acc = _mm256_add_pd(
                  acc, _mm256_mul_pd(v, _mm256_set1_pd(wk[ky * kw + kx])));
            }
          }
        }
        _mm256_storeu_pd(dst + oy * ow + ox, acc);
      }
      for (; ox < ow; ++ox) {
        double acc = b;
        for (size_t ci = 0; ci < cin; ++ci) {
          const double* src = in + ci * ph * pw + oy * pw + ox;
          const double* wk = wc + ci * kh * kw;
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

float hsum_ordered(__m256 v) {
  alignas(32) float lanes[8];
  _mm256_store_ps(lanes, v);
  float s = 0.0f;
  for (int i = 0; i < 8; ++i) s += lanes[i];
  return s;
}

double hsum_ordered(__m256d v) {
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, v);
  double s = 0.0;
  for (int i = 0; i < 4; ++i) s += lanes[i];
  return s;
}

void conv2d_grad_weight_avx2_f32(const float* in, size_t cin, size_t ph,
                                 size_t pw, const float* gout, size_t cout,
                                 size_t oh, size_t ow, size_t kh, size_t kw,
                                 size_t stride, float* gw) {
  if (stride != 1) {
    make_scalar_table<float>().conv2d_grad_weight(in, cin, ph, pw, gout, cout,
                                                  oh, ow, kh, kw, stride, gw);
    return;
  }
  const size_t owv = ow & ~size_t(7);
  for (size_t co = 0; co < cout; ++co) {
    const float* g = gout + co * oh * ow;
    for (size_t ci = 0; ci < cin; ++ci) {
      const float* src = in + ci * ph * pw;
      float* gwc = gw + (co * cin + ci) * kh * kw;
      for (size_t ky = 0; ky < kh; ++ky) {
        for (size_t kx = 0; kx < kw; ++kx) {
          __m256 accv = _mm256_setzero_ps();
          float tail = 0.0f;
          for (size_t oy = 0; oy < oh; ++oy) {
            const float* row = src + (oy + ky) * pw + kx;
            const float* grow = g + oy * ow;
            size_t ox = 0;
            for (; ox < owv; ox += 8) {
              accv = _mm256_add_ps(accv,
                                   _mm256_mul_ps(_mm256_loadu_ps(grow + ox),
                                                 _mm256_loadu_ps(row + ox)));
            }
            for (; ox < ow; ++ox) tail += grow[ox] * row[ox];
          }
          gwc[ky * kw + kx] += hsum_ordered(accv) + tail;
        }
      }
    }
  }
}

void conv2d_grad_weight_avx2_f64(const double* in, size_t cin, size_t ph,
                                 size_t pw, const double* gout, size_t cout,
                                 size_t oh, size_t ow, size_t kh, size_t kw,
                                 size_t stride, double* gw) {
  if (stride != 1) {
    make_scalar_table<double>().conv2d_grad_weight(in, cin, ph, pw, gout, cout,
                                                   oh, ow, kh, kw, stride, gw);
    return;
  }
  const size_t owv = ow & ~size_t(3);
  for (size_t co = 0; co < cout; ++co) {
    const double* g = gout + co * oh * ow;
    for (size_t ci = 0; ci < cin; ++ci) {
      const double* src = in + ci * ph * pw;
      double* gwc = gw + (co * cin + ci) * kh * kw;
      for (size_t ky = 0; ky < kh; ++ky) {
        for (size_t kx = 0; kx < kw; ++kx) {
          __m256d accv = _mm256_setzero_pd();
          double tail = 0.0;
          for (size_t oy = 0; oy < oh; ++oy) {
            const double* row = src + (oy + ky) * pw + kx;
            const double* grow = g + oy * ow;
            size_t ox = 0;
            for (; ox < owv; ox += 4) {
              accv = _mm256_add_pd(accv,
                                   _mm256_mul_pd(_mm256_loadu_pd(grow + ox),
                                                 _mm256_loadu_pd(row + ox)));
            }
            for (; ox < ow; ++ox) tail += grow[ox] * row[ox];
          }
          gwc[ky * kw + kx] += hsum_ordered(accv) + tail;
        }
      }
    }
  }
}

void add_avx2_f32(const float* a, const float* b, float* o, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(
        o + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) o[i] = a[i] + b[i];
}

void sub_avx2_f32(const float* a, const float* b, float* o, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(
        o + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) o[i] = a[i] - b[i];
}

void mul_avx2_f32(const float* a, const float* b, float* o, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(
        o + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) o[i] = a[i] * b[i];
}

void scale_avx2_f32(const float* a, float s, float* o, size_t n) {
  const __m256 sv = _mm256_set1_ps(s);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(o + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), sv));
  }
  for (; i < n; ++i) o[i] = a[i] * s;
}

void axpy_avx2_f32(float a, const float* x, float* y, size_t n) {
  const __m256 av = _mm256_set1_ps(a);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 prod = _mm256_mul_ps(av, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + a * x[i];
}

void mul_acc_avx2_f32(const float* a, const float* b, float* o, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 prod =
        _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i));
    _mm256_storeu_ps(o + i, _mm256_add_ps(_mm256_loadu_ps(o + i), prod));
  }
  for (; i < n; ++i) o[i] = o[i] + a[i] * b[i];
}

void relu_avx2_f32(const float* a, float* o, size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(o + i, _mm256_max_ps(_mm256_loadu_ps(a + i), zero));
  }
  for (; i < n; ++i) o[i] = a[i] > 0.0f ? a[i] : 0.0f;
}

void relu_bwd_avx2_f32(const float* x, const float* g, float* gx, size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    const __m256 cur = _mm256_loadu_ps(gx + i);
    const __m256 upd = _mm256_add_ps(cur, _mm256_loadu_ps(g + i));
    _mm256_storeu_ps(gx + i, _mm256_blendv_ps(cur, upd, mask));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0f) gx[i] = gx[i] + g[i];
  }
}

void add_avx2_f64(const double* a, const double* b, double* o, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(
        o + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) o[i] = a[i] + b[i];
}

void sub_avx2_f64(const double* a, const double* b, double* o, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(
        o + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) o[i] = a[i] - b[i];
}

void mul_avx2_f64(const double* a, const double* b, double* o, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(
        o + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) o[i] = a[i] * b[i];
}

void scale_avx2_f64(const double* a, double s, double* o, size_t n) {
  const __m256d sv = _mm256_set1_pd(s);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(o + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), sv));
  }
  for (; i < n; ++i) o[i] = a[i] * s;
}

void axpy_avx2_f64(double a, const double* x, double* y, size_t n) {
  const __m256d av = _mm256_set1_pd(a);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(av, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + a * x[i];
}

void mul_acc_avx2_f64(const double* a, const double* b, double* o, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod =
        _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    _mm256_storeu_pd(o + i, _mm256_add_pd(_mm256_loadu_pd(o + i), prod));
  }
  for (; i < n; ++i) o[i] = o[i] + a[i] * b[i];
}

void relu_avx2_f64(const double* a, double* o, size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(o + i, _mm256_max_pd(_mm256_loadu_pd(a + i), zero));
  }
  for (; i < n; ++i) o[i] = a[i] > 0.0 ? a[i] : 0.0;
}

void relu_bwd_avx2_f64(const double* x, const double* g, double* gx,
                       size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d mask =
        _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    const __m256d cur = _mm256_loadu_pd(gx + i);
    const __m256d upd = _mm256_add_pd(cur, _mm256_loadu_pd(g + i));
    _mm256_storeu_pd(gx + i, _mm256_blendv_pd(cur, upd, mask));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0) gx[i] = gx[i] + g[i];
  }
}

}  // namespace

template <typename T>
Table<T> make_avx2_table();

template <>
Table<float> make_avx2_table<float>() {
  Table<float> t;
  t.gemm = &gemm_avx2_f32;
  t.gemm_acc = &gemm_acc_avx2_f32;
  t.conv2d = &conv2d_avx2_f32;
  t.conv2d_grad_weight = &conv2d_grad_weight_avx2_f32;
  t.add = &add_avx2_f32;
  t.sub = &sub_avx2_f32;
  t.mul = &mul_avx2_f32;
  t.scale = &scale_avx2_f32;
  t.axpy = &axpy_avx2_f32;
  t.mul_acc = &mul_acc_avx2_f32;
  t.relu = &relu_avx2_f32;
  t.relu_bwd = &relu_bwd_avx2_f32;
  return t;
}

template <>
Table<double> make_avx2_table<double>() {
  Table<double> t;
  t.gemm = &gemm_avx2_f64;
  t.gemm_acc = &gemm_acc_avx2_f64;
  t.conv2d = &conv2d_avx2_f64;
  t.conv2d_grad_weight = &conv2d_grad_weight_avx2_f64;
  t.add = &add_avx2_f64;
  t.sub = &sub_avx2_f64;
  t.mul = &mul_avx2_f64;
  t.scale = &scale_avx2_f64;
  t.axpy = &axpy_avx2_f64;
  t.mul_acc = &mul_acc_avx2_f64;
  t.relu = &relu_avx2_f64;
  t.relu_bwd = &relu_bwd_avx2_f64;
  return t;
}

#else  // !KV_X86

template <>
Table<float> make_avx2_table<float>() {
  return make_scalar_table<float>();
}

template <>
Table<double> make_avx2_table<double>() {
  return make_scalar_table<double>();
}

#endif

}  // namespace kv::kernels

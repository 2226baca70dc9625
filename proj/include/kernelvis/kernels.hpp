#pragma once

#include <cstddef>
#include <cstdint>

namespace kv::kernels {

enum class Level { scalar = 0, avx2 = 1 };

const char* level_name(Level level);
bool cpu_supports(Level level);

// Inner-loop kernel table. One scalar reference table and one AVX2 table per
// element type; the active table is picked once at startup (override with
// KERNELVIS_SIMD=scalar|avx2|auto or set_level()).
//
// Every kernel except conv2d_grad_weight is order-preserving: the AVX2
// variant performs the identical sequence of rounding operations per output
// element as the scalar reference, so the two tables are bit-identical.
// conv2d_grad_weight is a reduction and uses lane-blocked accumulation; it is
// equivalence-tested at tolerance instead.
template <typename T>
struct Table {
  // c[m,n] = a[m,k] * b[k,n], row-major, accumulation over k in index order
  void (*gemm)(const T* a, const T* b, T* c, size_t m, size_t k, size_t n);
  // c[m,n] += a[m,k] * b[k,n]
  void (*gemm_acc)(const T* a, const T* b, T* c, size_t m, size_t k, size_t n);
  // input is pre-padded: [cin, ph, pw]; out: [cout, oh, ow]; weights
  // [cout, cin, kh, kw]; bias may be null. Accumulation order: ci, ky, kx.
  void (*conv2d)(const T* in, size_t cin, size_t ph, size_t pw, const T* w,
                 const T* bias, size_t cout, size_t kh, size_t kw,
                 size_t stride, T* out, size_t oh, size_t ow);
  // gw[cout, cin, kh, kw] += correlation of padded input with gout
  void (*conv2d_grad_weight)(const T* in, size_t cin, size_t ph, size_t pw,
                             const T* gout, size_t cout, size_t oh, size_t ow,
                             size_t kh, size_t kw, size_t stride, T* gw);
  void (*add)(const T* a, const T* b, T* o, size_t n);
  void (*sub)(const T* a, const T* b, T* o, size_t n);
  void (*mul)(const T* a, const T* b, T* o, size_t n);
  void (*scale)(const T* a, T s, T* o, size_t n);
  void (*axpy)(T a, const T* x, T* y, size_t n);            // y += a*x
  void (*mul_acc)(const T* a, const T* b, T* o, size_t n);  // o += a*b
  void (*relu)(const T* a, T* o, size_t n);
  void (*relu_bwd)(const T* x, const T* g, T* gx, size_t n);  // gx += (x>0)*g
};

template <typename T>
const Table<T>& table();  // active table

template <typename T>
const Table<T>& table(Level level);  // explicit table, for equivalence tests

Level active_level();
void set_level(Level level);  // throws ArgumentError if unsupported

}  // namespace kv::kernels

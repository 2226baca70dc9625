#include "kernelvis/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>

#include "kernelvis/flops.hpp"
#include "kernelvis/kernels.hpp"

namespace kv {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <typename T>
bool want_grad(Tape<T>* tape, std::initializer_list<const Tensor<T>*> ins) {
  if (!tape) return false;
  for (const Tensor<T>* t : ins) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// --- broadcasting -----------------------------------------------------------

struct BPlan {
  Shape out;
  std::vector<size_t> out_strides;
  std::vector<size_t> a_strides;  // in out-rank space, 0 on broadcast dims
  std::vector<size_t> b_strides;
  bool same = false;
};

BPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  BPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const size_t rank = std::max(a.size(), b.size());
  p.out.resize(rank);
  for (size_t i = 0; i < rank; ++i) {
    const size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(strfmt("%s: shapes %s and %s are not broadcastable", op,
                              shape_str(a).c_str(), shape_str(b).c_str()));
    }
    p.out[i] = std::max(da, db);
  }
  p.out_strides = row_major_strides(p.out);
  const auto sa = row_major_strides(a);
  const auto sb = row_major_strides(b);
  p.a_strides.assign(rank, 0);
  p.b_strides.assign(rank, 0);
  for (size_t i = 0; i < rank; ++i) {
    if (i >= rank - a.size()) {
      const size_t j = i - (rank - a.size());
      p.a_strides[i] = a[j] == 1 ? 0 : sa[j];
    }
    if (i >= rank - b.size()) {
      const size_t j = i - (rank - b.size());
      p.b_strides[i] = b[j] == 1 ? 0 : sb[j];
    }
  }
  return p;
}

// Calls fn(out_index, a_index, b_index) for every output element, row-major.
template <typename F>
void broadcast_walk(const BPlan& p, F fn) {
  const size_t n = numel(p.out);
  const size_t rank = p.out.size();
  for (size_t flat = 0; flat < n; ++flat) {
    size_t rem = flat, ai = 0, bi = 0;
    for (size_t d = 0; d < rank; ++d) {
      const size_t idx = rem / p.out_strides[d];
      rem -= idx * p.out_strides[d];
      ai += idx * p.a_strides[d];
      bi += idx * p.b_strides[d];
    }
    fn(flat, ai, bi);
  }
}

enum class Bin { add, sub, mul, div };

template <typename T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape,
                    Bin kind, const char* name) {
  BPlan plan = broadcast_plan(a.shape(), b.shape(), name);
  Tensor<T> out = Tensor<T>::zeros(plan.out);
  const size_t n = out.size();
  const auto& k = kernels::table<T>();
  if (plan.same) {
    switch (kind) {
      case Bin::add: k.add(a.data(), b.data(), out.data(), n); break;
      case Bin::sub: k.sub(a.data(), b.data(), out.data(), n); break;
      case Bin::mul: k.mul(a.data(), b.data(), out.data(), n); break;
      case Bin::div: {
        const T* pa = a.data();
        const T* pb = b.data();
        T* po = out.data();
        for (size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
        break;
      }
    }
  } else {
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    broadcast_walk(plan, [&](size_t o, size_t ai, size_t bi) {
      switch (kind) {
        case Bin::add: po[o] = pa[ai] + pb[bi]; break;
        case Bin::sub: po[o] = pa[ai] - pb[bi]; break;
        case Bin::mul: po[o] = pa[ai] * pb[bi]; break;
        case Bin::div: po[o] = pa[ai] / pb[bi]; break;
      }
    });
  }
  flops::add(n);
  if (want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, tb = b, to = out;
    tape->record(out, [ta, tb, to, plan, kind]() mutable {
      const T* g = to.grad();
      const size_t n = to.size();
      const auto& k = kernels::table<T>();
      const bool ga = ta.requires_grad();
      const bool gb = tb.requires_grad();
      if (plan.same) {
        switch (kind) {
          case Bin::add:
            if (ga) k.axpy(T(1), g, ta.grad(), n);
            if (gb) k.axpy(T(1), g, tb.grad(), n);
            break;
          case Bin::sub:
            if (ga) k.axpy(T(1), g, ta.grad(), n);
            if (gb) k.axpy(T(-1), g, tb.grad(), n);
            break;
          case Bin::mul:
            if (ga) k.mul_acc(g, tb.data(), ta.grad(), n);
            if (gb) k.mul_acc(g, ta.data(), tb.grad(), n);
            break;
          case Bin::div: {
            const T* pa = ta.data();
            const T* pb = tb.data();
            T* pga = ga ? ta.grad() : nullptr;
            T* pgb = gb ? tb.grad() : nullptr;
            for (size_t i = 0; i < n; ++i) {
              if (pga) pga[i] += g[i] / pb[i];
              if (pgb) pgb[i] -= g[i] * pa[i] / (pb[i] * pb[i]);
            }
            break;
          }
        }
        return;
      }
      const T* pa = ta.data();
      const T* pb = tb.data();
      T* pga = ga ? ta.grad() : nullptr;
      T* pgb = gb ? tb.grad() : nullptr;
      broadcast_walk(plan, [&](size_t o, size_t ai, size_t bi) {
        switch (kind) {
          case Bin::add:
            if (pga) pga[ai] += g[o];
            if (pgb) pgb[bi] += g[o];
            break;
          case Bin::sub:
            if (pga) pga[ai] += g[o];
            if (pgb) pgb[bi] -= g[o];
            break;
          case Bin::mul:
            if (pga) pga[ai] += g[o] * pb[bi];
            if (pgb) pgb[bi] += g[o] * pa[ai];
            break;
          case Bin::div:
            if (pga) pga[ai] += g[o] / pb[bi];
            if (pgb) pgb[bi] -= g[o] * pa[ai] / (pb[bi] * pb[bi]);
            break;
        }
      });
    });
  }
  return out;
}

// --- generic unary ----------------------------------------------------------

template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& a, Tape<T>* tape, uint64_t flops_per, F f,
                   DF df) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* x = a.data();
  T* y = out.data();
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) y[i] = f(x[i]);
  flops::add(flops_per * n);
  if (want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    tape->record(out, [ta, to, df]() mutable {
      const T* g = to.grad();
      const T* x = ta.data();
      const T* y = to.data();
      T* gx = ta.grad();
      const size_t n = ta.size();
      for (size_t i = 0; i < n; ++i) gx[i] += g[i] * df(x[i], y[i]);
    });
  }
  return out;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
  if (x > T(0)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

// --- binary suite -----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  return binary_op(a, b, tape, Bin::add, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  return binary_op(a, b, tape, Bin::sub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  return binary_op(a, b, tape, Bin::mul, "mul");
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  return binary_op(a, b, tape, Bin::div, "div");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s, Tape<T>* tape) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  kernels::table<T>().scale(a.data(), s, out.data(), a.size());
  flops::add(a.size());
  if (want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    tape->record(out, [ta, to, s]() mutable {
      kernels::table<T>().axpy(s, to.grad(), ta.grad(), ta.size());
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c, Tape<T>* tape) {
  return unary_op(
      a, tape, 1, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a, Tape<T>* tape) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  kernels::table<T>().relu(a.data(), out.data(), a.size());
  flops::add(a.size());
  if (want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    tape->record(out, [ta, to]() mutable {
      kernels::table<T>().relu_bwd(ta.data(), to.grad(), ta.grad(), ta.size());
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a, Tape<T>* tape) {
  return unary_op(
      a, tape, 6,
      [](T x) {
        return T(0.5) * x * (T(1) + std::erf(x * T(kInvSqrt2)));
      },
      [](T x, T) {
        const T phi = T(0.5) * (T(1) + std::erf(x * T(kInvSqrt2)));
        const T pdf = T(kInvSqrt2Pi) * std::exp(T(-0.5) * x * x);
        return phi + x * pdf;
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a, Tape<T>* tape) {
  return unary_op(
      a, tape, 4, [](T x) { return stable_sigmoid(x); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& a, Tape<T>* tape) {
  return unary_op(
      a, tape, 4, [](T x) { return std::exp(x); },
      [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_t(const Tensor<T>& a, Tape<T>* tape) {
  return unary_op(
      a, tape, 4, [](T x) { return std::log(x); },
      [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& a, Tape<T>* tape) {
  return unary_op(
      a, tape, 4, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a, Tape<T>* tape) {
  return unary_op(
      a, tape, 4, [](T x) { return stable_softplus(x); },
      [](T x, T) { return stable_sigmoid(x); });
}

template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T p, Tape<T>* tape) {
  return unary_op(
      a, tape, 8, [p](T x) { return std::pow(x, p); },
      [p](T x, T) { return p * std::pow(x, p - T(1)); });
}

// --- matmul -----------------------------------------------------------------

namespace {

template <typename T>
void transpose_mat(const T* src, size_t rows, size_t cols, T* dst) {
  for (size_t r = 0; r < rows; ++r) {
    for (size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

struct MatmulPlan {
  size_t m, k, n, nbatch;
  Shape out;
  // per-output-batch element offsets into a and b (in matrices)
  std::vector<size_t> a_off, b_off;
};

MatmulPlan matmul_plan(const Shape& as, const Shape& bs) {
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeError(strfmt("matmul: operands must have rank >= 2, got %s x %s",
                            shape_str(as).c_str(), shape_str(bs).c_str()));
  }
  MatmulPlan p;
  p.m = as[as.size() - 2];
  p.k = as[as.size() - 1];
  const size_t k2 = bs[bs.size() - 2];
  p.n = bs[bs.size() - 1];
  if (p.k != k2) {
    throw ShapeError(strfmt("matmul: inner dimensions disagree: %s x %s",
                            shape_str(as).c_str(), shape_str(bs).c_str()));
  }
  const Shape ab(as.begin(), as.end() - 2);
  const Shape bb(bs.begin(), bs.end() - 2);
  BPlan bp = broadcast_plan(ab, bb, "matmul(batch)");
  if (bp.same) {
    bp.out = ab;
    bp.out_strides = row_major_strides(ab);
    bp.a_strides = bp.out_strides;
    bp.b_strides = bp.out_strides;
  }
  p.nbatch = numel(bp.out);
  p.out = bp.out;
  p.out.push_back(p.m);
  p.out.push_back(p.n);
  p.a_off.resize(p.nbatch);
  p.b_off.resize(p.nbatch);
  const size_t rank = bp.out.size();
  for (size_t flat = 0; flat < p.nbatch; ++flat) {
    size_t rem = flat, ai = 0, bi = 0;
    for (size_t d = 0; d < rank; ++d) {
      const size_t idx = rem / bp.out_strides[d];
      rem -= idx * bp.out_strides[d];
      ai += idx * bp.a_strides[d];
      bi += idx * bp.b_strides[d];
    }
    p.a_off[flat] = ai;
    p.b_off[flat] = bi;
  }
  return p;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  MatmulPlan plan = matmul_plan(a.shape(), b.shape());
  Tensor<T> out = Tensor<T>::zeros(plan.out);
  const auto& kt = kernels::table<T>();
  const size_t msz = plan.m * plan.k, bsz = plan.k * plan.n,
               osz = plan.m * plan.n;
  for (size_t i = 0; i < plan.nbatch; ++i) {
    kt.gemm(a.data() + plan.a_off[i] * msz, b.data() + plan.b_off[i] * bsz,
            out.data() + i * osz, plan.m, plan.k, plan.n);
  }
  flops::add(uint64_t(2) * plan.m * plan.k * plan.n * plan.nbatch);
  if (want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, tb = b, to = out;
    tape->record(out, [ta, tb, to, plan]() mutable {
      const auto& kt = kernels::table<T>();
      const size_t msz = plan.m * plan.k, bsz = plan.k * plan.n,
                   osz = plan.m * plan.n;
      const T* g = to.grad();
      std::vector<T> scratch;
      if (ta.requires_grad()) {
        scratch.resize(bsz);
        T* ga = ta.grad();
        for (size_t i = 0; i < plan.nbatch; ++i) {
          // ga += g x b^T
          transpose_mat(tb.data() + plan.b_off[i] * bsz, plan.k, plan.n,
                        scratch.data());
          kt.gemm_acc(g + i * osz, scratch.data(),
                      ga + plan.a_off[i] * msz, plan.m, plan.n, plan.k);
        }
        flops::add(uint64_t(2) * plan.m * plan.k * plan.n * plan.nbatch);
      }
      if (tb.requires_grad()) {
        scratch.resize(msz);
        T* gb = tb.grad();
        for (size_t i = 0; i < plan.nbatch; ++i) {
          // gb += a^T x g
          transpose_mat(ta.data() + plan.a_off[i] * msz, plan.m, plan.k,
                        scratch.data());
          kt.gemm_acc(scratch.data(), g + i * osz,
                      gb + plan.b_off[i] * bsz, plan.k, plan.m, plan.n);
        }
        flops::add(uint64_t(2) * plan.m * plan.k * plan.n * plan.nbatch);
      }
    });
  }
  return out;
}

// --- conv2d -----------------------------------------------------------------

namespace {

template <typename T>
std::shared_ptr<std::vector<T>> pad_image(const T* src, size_t c, size_t h,
                                          size_t w, size_t pt, size_t pl,
                                          size_t pb, size_t pr) {
  const size_t ph = h + pt + pb, pw = w + pl + pr;
  auto out = std::make_shared<std::vector<T>>(c * ph * pw, T(0));
  for (size_t ci = 0; ci < c; ++ci) {
    for (size_t y = 0; y < h; ++y) {
      std::copy_n(src + (ci * h + y) * w, w,
                  out->data() + (ci * ph + y + pt) * pw + pl);
    }
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> conv2d_asym(const Tensor<T>& input, const Tensor<T>& weight,
                      const Tensor<T>& bias, size_t stride, size_t pad_top,
                      size_t pad_left, size_t pad_bottom, size_t pad_right,
                      Tape<T>* tape) {
  if (input.rank() != 3 || weight.rank() != 4) {
    throw ShapeError(strfmt("conv2d: expected input [c,h,w] and weight "
                            "[co,ci,kh,kw], got %s and %s",
                            shape_str(input.shape()).c_str(),
                            shape_str(weight.shape()).c_str()));
  }
  const size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin) {
    throw ShapeError(strfmt("conv2d: weight expects %zu input channels, "
                            "input %s has %zu",
                            weight.dim(1), shape_str(input.shape()).c_str(),
                            cin));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ArgumentError(strfmt("conv2d: kernel sizes must be odd, got %zux%zu",
                               kh, kw));
  }
  if (stride == 0) throw ArgumentError("conv2d: stride must be >= 1");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError(strfmt("conv2d: bias shape %s does not match %zu output "
                            "channels",
                            shape_str(bias.shape()).c_str(), cout));
  }
  const size_t ph = h + pad_top + pad_bottom, pw = w + pad_left + pad_right;
  if (ph < kh || pw < kw || (ph - kh) % stride != 0 ||
      (pw - kw) % stride != 0) {
    throw ShapeError(strfmt(
        "conv2d: non-integral output size for input %s, kernel %zux%zu, "
        "stride %zu, pad (%zu,%zu,%zu,%zu)",
        shape_str(input.shape()).c_str(), kh, kw, stride, pad_top, pad_left,
        pad_bottom, pad_right));
  }
  const size_t oh = (ph - kh) / stride + 1, ow = (pw - kw) / stride + 1;
  auto padded = pad_image(input.data(), cin, h, w, pad_top, pad_left,
                          pad_bottom, pad_right);
  Tensor<T> out = Tensor<T>::zeros({cout, oh, ow});
  kernels::table<T>().conv2d(padded->data(), cin, ph, pw, weight.data(),
                             bias.defined() ? bias.data() : nullptr, cout, kh,
                             kw, stride, out.data(), oh, ow);
  flops::add(uint64_t(2) * cout * oh * ow * cin * kh * kw +
             uint64_t(cout) * oh * ow);
  if (want_grad(tape, {&input, &weight, &bias})) {
    out.set_requires_grad(true);
    Tensor<T> tin = input, tw = weight, tb = bias, to = out;
    tape->record(out, [tin, tw, tb, to, padded, stride, pad_top, pad_left, cin,
                       h, w, cout, kh, kw, ph, pw, oh, ow]() mutable {
      const T* g = to.grad();
      if (tb.defined() && tb.requires_grad()) {
        T* gb = tb.grad();
        for (size_t co = 0; co < cout; ++co) {
          T s = T(0);
          const T* gc = g + co * oh * ow;
          for (size_t i = 0; i < oh * ow; ++i) s += gc[i];
          gb[co] += s;
        }
      }
      if (tw.requires_grad()) {
        kernels::table<T>().conv2d_grad_weight(padded->data(), cin, ph, pw, g,
                                               cout, oh, ow, kh, kw, stride,
                                               tw.grad());
        flops::add(uint64_t(2) * cout * oh * ow * cin * kh * kw);
      }
      if (tin.requires_grad()) {
        // grad wrt padded input = conv(pad(dilate(g)), flipped weights)
        std::vector<T> wflip(cin * cout * kh * kw);
        const T* wd = tw.data();
        for (size_t co = 0; co < cout; ++co) {
          for (size_t ci = 0; ci < cin; ++ci) {
            for (size_t ky = 0; ky < kh; ++ky) {
              for (size_t kx = 0; kx < kw; ++kx) {
                wflip[((ci * cout + co) * kh + (kh - 1 - ky)) * kw +
                      (kw - 1 - kx)] = wd[((co * cin + ci) * kh + ky) * kw + kx];
              }
            }
          }
        }
        const size_t dh = (oh - 1) * stride + 1, dw = (ow - 1) * stride + 1;
        const size_t gh = dh + 2 * (kh - 1), gw = dw + 2 * (kw - 1);
        std::vector<T> dil(cout * gh * gw, T(0));
        for (size_t co = 0; co < cout; ++co) {
          for (size_t oy = 0; oy < oh; ++oy) {
            for (size_t ox = 0; ox < ow; ++ox) {
              dil[(co * gh + oy * stride + kh - 1) * gw + ox * stride + kw -
                  1] = g[(co * oh + oy) * ow + ox];
            }
          }
        }
        std::vector<T> gpad(cin * ph * pw);
        kernels::table<T>().conv2d(dil.data(), cout, gh, gw, wflip.data(),
                                   nullptr, cin, kh, kw, 1, gpad.data(), ph,
                                   pw);
        flops::add(uint64_t(2) * cin * ph * pw * cout * kh * kw);
        T* gi = tin.grad();
        for (size_t ci = 0; ci < cin; ++ci) {
          for (size_t y = 0; y < h; ++y) {
            const T* row = gpad.data() + (ci * ph + y + pad_top) * pw + pad_left;
            T* dst = gi + (ci * h + y) * w;
            for (size_t x = 0; x < w; ++x) dst[x] += row[x];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, size_t stride, size_t pad,
                 Tape<T>* tape) {
  return conv2d_asym(input, weight, bias, stride, pad, pad, pad, pad, tape);
}

// --- pooling ----------------------------------------------------------------

namespace {

template <typename T>
void check_pool(const Tensor<T>& input, size_t k, const char* name) {
  if (input.rank() != 3) {
    throw ShapeError(strfmt("%s: expected input [c,h,w], got %s", name,
                            shape_str(input.shape()).c_str()));
  }
  if (k == 0) throw ArgumentError(strfmt("%s: window must be >= 1", name));
  if (input.dim(1) % k != 0 || input.dim(2) % k != 0) {
    throw ShapeError(strfmt("%s: spatial size %s not divisible by window %zu",
                            name, shape_str(input.shape()).c_str(), k));
  }
}

}  // namespace

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, size_t k, Tape<T>* tape) {
  check_pool(input, k, "max_pool2d");
  const size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const size_t oh = h / k, ow = w / k;
  Tensor<T> out = Tensor<T>::zeros({c, oh, ow});
  auto argmax = std::make_shared<std::vector<uint32_t>>(c * oh * ow);
  const T* x = input.data();
  T* y = out.data();
  for (size_t ci = 0; ci < c; ++ci) {
    for (size_t oy = 0; oy < oh; ++oy) {
      for (size_t ox = 0; ox < ow; ++ox) {
        size_t best = (ci * h + oy * k) * w + ox * k;
        T bv = x[best];
        for (size_t wy = 0; wy < k; ++wy) {
          for (size_t wx = 0; wx < k; ++wx) {
            const size_t idx = (ci * h + oy * k + wy) * w + ox * k + wx;
            if (x[idx] > bv) {  // first occurrence wins ties
              bv = x[idx];
              best = idx;
            }
          }
        }
        y[(ci * oh + oy) * ow + ox] = bv;
        (*argmax)[(ci * oh + oy) * ow + ox] = static_cast<uint32_t>(best);
      }
    }
  }
  flops::add(input.size());
  if (want_grad(tape, {&input})) {
    out.set_requires_grad(true);
    Tensor<T> ti = input, to = out;
    tape->record(out, [ti, to, argmax]() mutable {
      const T* g = to.grad();
      T* gi = ti.grad();
      for (size_t i = 0; i < to.size(); ++i) gi[(*argmax)[i]] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, size_t k, Tape<T>* tape) {
  check_pool(input, k, "avg_pool2d");
  const size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const size_t oh = h / k, ow = w / k;
  Tensor<T> out = Tensor<T>::zeros({c, oh, ow});
  const T win = T(k * k);
  const T* x = input.data();
  T* y = out.data();
  for (size_t ci = 0; ci < c; ++ci) {
    for (size_t oy = 0; oy < oh; ++oy) {
      for (size_t ox = 0; ox < ow; ++ox) {
        T s = T(0);
        for (size_t wy = 0; wy < k; ++wy) {
          for (size_t wx = 0; wx < k; ++wx) {
            s += x[(ci * h + oy * k + wy) * w + ox * k + wx];
          }
        }
        y[(ci * oh + oy) * ow + ox] = s / win;
      }
    }
  }
  flops::add(input.size());
  if (want_grad(tape, {&input})) {
    out.set_requires_grad(true);
    Tensor<T> ti = input, to = out;
    tape->record(out, [ti, to, k, win]() mutable {
      const size_t c = ti.dim(0), h = ti.dim(1), w = ti.dim(2);
      const size_t oh = h / k, ow = w / k;
      const T* g = to.grad();
      T* gi = ti.grad();
      for (size_t ci = 0; ci < c; ++ci) {
        for (size_t oy = 0; oy < oh; ++oy) {
          for (size_t ox = 0; ox < ow; ++ox) {
            const T gv = g[(ci * oh + oy) * ow + ox] / win;
            for (size_t wy = 0; wy < k; ++wy) {
              for (size_t wx = 0; wx < k; ++wx) {
                gi[(ci * h + oy * k + wy) * w + ox * k + wx] += gv;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// --- bilinear upsample ------------------------------------------------------

namespace {

struct LerpAxis {
  std::vector<size_t> i0, i1;
  std::vector<double> t;
};

LerpAxis lerp_axis(size_t in, size_t factor) {
  LerpAxis ax;
  const size_t out = in * factor;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.t.resize(out);
  for (size_t o = 0; o < out; ++o) {
    const double src = (o + 0.5) / factor - 0.5;
    double fl = std::floor(src);
    double t = src - fl;
    long i0 = static_cast<long>(fl);
    long i1 = i0 + 1;
    i0 = std::clamp(i0, 0L, static_cast<long>(in) - 1);
    i1 = std::clamp(i1, 0L, static_cast<long>(in) - 1);
    ax.i0[o] = static_cast<size_t>(i0);
    ax.i1[o] = static_cast<size_t>(i1);
    ax.t[o] = t;
  }
  return ax;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, size_t factor,
                            Tape<T>* tape) {
  if (input.rank() != 3) {
    throw ShapeError(strfmt("bilinear_upsample: expected [c,h,w], got %s",
                            shape_str(input.shape()).c_str()));
  }
  if (factor == 0) {
    throw ArgumentError("bilinear_upsample: factor must be >= 1");
  }
  const size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const size_t oh = h * factor, ow = w * factor;
  const LerpAxis ay = lerp_axis(h, factor);
  const LerpAxis ax = lerp_axis(w, factor);
  Tensor<T> out = Tensor<T>::zeros({c, oh, ow});
  const T* x = input.data();
  T* y = out.data();
  for (size_t ci = 0; ci < c; ++ci) {
    const T* src = x + ci * h * w;
    T* dst = y + ci * oh * ow;
    for (size_t oy = 0; oy < oh; ++oy) {
      const T ty = static_cast<T>(ay.t[oy]);
      const size_t y0 = ay.i0[oy], y1 = ay.i1[oy];
      for (size_t ox = 0; ox < ow; ++ox) {
        const T tx = static_cast<T>(ax.t[ox]);
        const size_t x0 = ax.i0[ox], x1 = ax.i1[ox];
        const T top = (T(1) - tx) * src[y0 * w + x0] + tx * src[y0 * w + x1];
        const T bot = (T(1) - tx) * src[y1 * w + x0] + tx * src[y1 * w + x1];
        dst[oy * ow + ox] = (T(1) - ty) * top + ty * bot;
      }
    }
  }
  flops::add(uint64_t(8) * out.size());
  if (want_grad(tape, {&input})) {
    out.set_requires_grad(true);
    Tensor<T> ti = input, to = out;
    tape->record(out, [ti, to, ay, ax, factor]() mutable {
      const size_t c = ti.dim(0), h = ti.dim(1), w = ti.dim(2);
      const size_t oh = h * factor, ow = w * factor;
      const T* g = to.grad();
      T* gi = ti.grad();
      for (size_t ci = 0; ci < c; ++ci) {
        const T* gsrc = g + ci * oh * ow;
        T* gdst = gi + ci * h * w;
        for (size_t oy = 0; oy < oh; ++oy) {
          const T ty = static_cast<T>(ay.t[oy]);
          const size_t y0 = ay.i0[oy], y1 = ay.i1[oy];
          for (size_t ox = 0; ox < ow; ++ox) {
            const T tx = static_cast<T>(ax.t[ox]);
            const size_t x0 = ax.i0[ox], x1 = ax.i1[ox];
            const T gv = gsrc[oy * ow + ox];
            gdst[y0 * w + x0] += (T(1) - ty) * (T(1) - tx) * gv;
            gdst[y0 * w + x1] += (T(1) - ty) * tx * gv;
            gdst[y1 * w + x0] += ty * (T(1) - tx) * gv;
            gdst[y1 * w + x1] += ty * tx * gv;
          }
        }
      }
    });
  }
  return out;
}

// --- softmax / layer norm ---------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, size_t axis, Tape<T>* tape) {
  if (axis >= x.rank()) {
    throw ArgumentError(strfmt("softmax: axis %zu out of range for shape %s",
                               axis, shape_str(x.shape()).c_str()));
  }
  const size_t d = x.dim(axis);
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* py = out.data();
  for (size_t o = 0; o < outer; ++o) {
    for (size_t i = 0; i < inner; ++i) {
      const size_t base = o * d * inner + i;
      T m = px[base];
      for (size_t j = 1; j < d; ++j) m = std::max(m, px[base + j * inner]);
      T s = T(0);
      for (size_t j = 0; j < d; ++j) {
        const T e = std::exp(px[base + j * inner] - m);
        py[base + j * inner] = e;
        s += e;
      }
      const T inv = T(1) / s;
      for (size_t j = 0; j < d; ++j) py[base + j * inner] *= inv;
    }
  }
  flops::add(uint64_t(5) * x.size());
  if (want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> ti = x, to = out;
    tape->record(out, [ti, to, outer, d, inner]() mutable {
      const T* g = to.grad();
      const T* y = to.data();
      T* gx = ti.grad();
      for (size_t o = 0; o < outer; ++o) {
        for (size_t i = 0; i < inner; ++i) {
          const size_t base = o * d * inner + i;
          T dot = T(0);
          for (size_t j = 0; j < d; ++j) {
            dot += g[base + j * inner] * y[base + j * inner];
          }
          for (size_t j = 0; j < d; ++j) {
            const size_t idx = base + j * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, Tape<T>* tape) {
  if (x.rank() < 1) throw ShapeError("layer_norm: input must have rank >= 1");
  const size_t d = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 ||
      bias.dim(0) != d) {
    throw ShapeError(strfmt(
        "layer_norm: gain %s / bias %s must match feature width %zu",
        shape_str(gain.shape()).c_str(), shape_str(bias.shape()).c_str(), d));
  }
  const size_t rows = x.size() / d;
  constexpr double kEps = 1e-5;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto norm = std::make_shared<std::vector<T>>(x.size());   // pre-affine
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const T* px = x.data();
  const T* pg = gain.data();
  const T* pb = bias.data();
  T* py = out.data();
  for (size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T m = T(0);
    for (size_t j = 0; j < d; ++j) m += row[j];
    m /= T(d);
    T v = T(0);
    for (size_t j = 0; j < d; ++j) v += (row[j] - m) * (row[j] - m);
    v /= T(d);
    const T inv = T(1) / std::sqrt(v + T(kEps));
    (*inv_std)[r] = inv;
    for (size_t j = 0; j < d; ++j) {
      const T n = (row[j] - m) * inv;
      (*norm)[r * d + j] = n;
      py[r * d + j] = n * pg[j] + pb[j];
    }
  }
  flops::add(uint64_t(10) * x.size());
  if (want_grad(tape, {&x, &gain, &bias})) {
    out.set_requires_grad(true);
    Tensor<T> ti = x, tg = gain, tb = bias, to = out;
    tape->record(out, [ti, tg, tb, to, norm, inv_std, rows, d]() mutable {
      const T* g = to.grad();
      const T* pg = tg.data();
      T* gx = ti.requires_grad() ? ti.grad() : nullptr;
      T* ggain = tg.requires_grad() ? tg.grad() : nullptr;
      T* gbias = tb.requires_grad() ? tb.grad() : nullptr;
      std::vector<T> dn(d);
      for (size_t r = 0; r < rows; ++r) {
        const T* grow = g + r * d;
        const T* nrow = norm->data() + r * d;
        if (ggain || gbias) {
          for (size_t j = 0; j < d; ++j) {
            if (ggain) ggain[j] += grow[j] * nrow[j];
            if (gbias) gbias[j] += grow[j];
          }
        }
        if (gx) {
          T m1 = T(0), m2 = T(0);
          for (size_t j = 0; j < d; ++j) {
            dn[j] = grow[j] * pg[j];
            m1 += dn[j];
            m2 += dn[j] * nrow[j];
          }
          m1 /= T(d);
          m2 /= T(d);
          const T inv = (*inv_std)[r];
          T* gxr = gx + r * d;
          for (size_t j = 0; j < d; ++j) {
            gxr[j] += inv * (dn[j] - m1 - nrow[j] * m2);
          }
        }
      }
    });
  }
  return out;
}

// --- reductions -------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a, Tape<T>* tape) {
  T s = T(0);
  const T* x = a.data();
  for (size_t i = 0; i < a.size(); ++i) s += x[i];
  Tensor<T> out = Tensor<T>::scalar(s);
  flops::add(a.size());
  if (want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor<T> ti = a, to = out;
    tape->record(out, [ti, to]() mutable {
      const T g = to.grad()[0];
      T* gx = ti.grad();
      for (size_t i = 0; i < ti.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, Tape<T>* tape) {
  Tensor<T> s = sum(a, tape);
  return scale(s, T(1) / T(a.size()), tape);
}

template <typename T>
Tensor<T> sum_last(const Tensor<T>& a, Tape<T>* tape) {
  if (a.rank() < 1) throw ShapeError("sum_last: input must have rank >= 1");
  const size_t d = a.dim(a.rank() - 1);
  const size_t rows = a.size() / d;
  Shape oshape = a.shape();
  oshape.back() = 1;
  Tensor<T> out = Tensor<T>::zeros(oshape);
  const T* x = a.data();
  T* y = out.data();
  for (size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (size_t j = 0; j < d; ++j) s += x[r * d + j];
    y[r] = s;
  }
  flops::add(a.size());
  if (want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor<T> ti = a, to = out;
    tape->record(out, [ti, to, rows, d]() mutable {
      const T* g = to.grad();
      T* gx = ti.grad();
      for (size_t r = 0; r < rows; ++r) {
        for (size_t j = 0; j < d; ++j) gx[r * d + j] += g[r];
      }
    });
  }
  return out;
}

// --- layout -----------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape, Tape<T>* tape) {
  if (numel(shape) != a.size()) {
    throw ShapeError(strfmt("reshape: cannot view %s as %s",
                            shape_str(a.shape()).c_str(),
                            shape_str(shape).c_str()));
  }
  Tensor<T> out = Tensor<T>::from(std::move(shape), a.vec());
  if (want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor<T> ti = a, to = out;
    tape->record(out, [ti, to]() mutable {
      kernels::table<T>().axpy(T(1), to.grad(), ti.grad(), ti.size());
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<size_t>& perm,
                  Tape<T>* tape) {
  const size_t rank = a.rank();
  if (perm.size() != rank) {
    throw ArgumentError(strfmt("permute: got %zu axes for rank-%zu tensor",
                               perm.size(), rank));
  }
  std::vector<bool> seen(rank, false);
  for (size_t p : perm) {
    if (p >= rank || seen[p]) {
      throw ArgumentError("permute: axes must be a permutation of dimensions");
    }
    seen[p] = true;
  }
  Shape oshape(rank);
  for (size_t i = 0; i < rank; ++i) oshape[i] = a.dim(perm[i]);
  const auto in_strides = row_major_strides(a.shape());
  const auto out_strides = row_major_strides(oshape);
  std::vector<size_t> map(rank);
  for (size_t i = 0; i < rank; ++i) map[i] = in_strides[perm[i]];
  Tensor<T> out = Tensor<T>::zeros(oshape);
  const T* x = a.data();
  T* y = out.data();
  const size_t n = a.size();
  for (size_t flat = 0; flat < n; ++flat) {
    size_t rem = flat, src = 0;
    for (size_t d = 0; d < rank; ++d) {
      const size_t idx = rem / out_strides[d];
      rem -= idx * out_strides[d];
      src += idx * map[d];
    }
    y[flat] = x[src];
  }
  if (want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor<T> ti = a, to = out;
    tape->record(out, [ti, to, out_strides, map, rank]() mutable {
      const T* g = to.grad();
      T* gx = ti.grad();
      const size_t n = to.size();
      for (size_t flat = 0; flat < n; ++flat) {
        size_t rem = flat, src = 0;
        for (size_t d = 0; d < rank; ++d) {
          const size_t idx = rem / out_strides[d];
          rem -= idx * out_strides[d];
          src += idx * map[d];
        }
        gx[src] += g[flat];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<size_t>& rows,
                      Tape<T>* tape) {
  if (a.rank() < 1) throw ShapeError("gather_rows: input must have rank >= 1");
  const size_t n = a.dim(0);
  const size_t rowsz = a.size() / std::max<size_t>(n, 1);
  for (size_t r : rows) {
    if (r >= n) {
      throw ArgumentError(strfmt("gather_rows: index %zu out of range %zu", r,
                                 n));
    }
  }
  Shape oshape = a.shape();
  oshape[0] = rows.size();
  Tensor<T> out = Tensor<T>::zeros(oshape);
  const T* x = a.data();
  T* y = out.data();
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x + rows[i] * rowsz, rowsz, y + i * rowsz);
  }
  if (want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor<T> ti = a, to = out;
    auto idx = std::make_shared<std::vector<size_t>>(rows);
    tape->record(out, [ti, to, idx, rowsz]() mutable {
      const T* g = to.grad();
      T* gx = ti.grad();
      for (size_t i = 0; i < idx->size(); ++i) {
        kernels::table<T>().axpy(T(1), g + i * rowsz,
                                 gx + (*idx)[i] * rowsz, rowsz);
      }
    });
  }
  return out;
}

// --- explicit instantiation -------------------------------------------------

#define KV_INSTANTIATE_OPS(T)                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&, Tape<T>*);       \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&, Tape<T>*);       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&, Tape<T>*);       \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&, Tape<T>*);       \
  template Tensor<T> scale(const Tensor<T>&, T, Tape<T>*);                    \
  template Tensor<T> add_scalar(const Tensor<T>&, T, Tape<T>*);               \
  template Tensor<T> relu(const Tensor<T>&, Tape<T>*);                        \
  template Tensor<T> gelu(const Tensor<T>&, Tape<T>*);                        \
  template Tensor<T> sigmoid(const Tensor<T>&, Tape<T>*);                     \
  template Tensor<T> exp_t(const Tensor<T>&, Tape<T>*);                       \
  template Tensor<T> log_t(const Tensor<T>&, Tape<T>*);                       \
  template Tensor<T> sqrt_t(const Tensor<T>&, Tape<T>*);                      \
  template Tensor<T> softplus(const Tensor<T>&, Tape<T>*);                    \
  template Tensor<T> pow_scalar(const Tensor<T>&, T, Tape<T>*);               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, Tape<T>*);    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,               \
                            const Tensor<T>&, size_t, size_t, Tape<T>*);      \
  template Tensor<T> conv2d_asym(const Tensor<T>&, const Tensor<T>&,          \
                                 const Tensor<T>&, size_t, size_t, size_t,    \
                                 size_t, size_t, Tape<T>*);                   \
  template Tensor<T> max_pool2d(const Tensor<T>&, size_t, Tape<T>*);          \
  template Tensor<T> avg_pool2d(const Tensor<T>&, size_t, Tape<T>*);          \
  template Tensor<T> bilinear_upsample(const Tensor<T>&, size_t, Tape<T>*);   \
  template Tensor<T> softmax(const Tensor<T>&, size_t, Tape<T>*);             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&,           \
                                const Tensor<T>&, Tape<T>*);                  \
  template Tensor<T> sum(const Tensor<T>&, Tape<T>*);                         \
  template Tensor<T> mean(const Tensor<T>&, Tape<T>*);                        \
  template Tensor<T> sum_last(const Tensor<T>&, Tape<T>*);                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape, Tape<T>*);              \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<size_t>&,    \
                             Tape<T>*);                                       \
  template Tensor<T> gather_rows(const Tensor<T>&,                            \
                                 const std::vector<size_t>&, Tape<T>*);

KV_INSTANTIATE_OPS(float)
KV_INSTANTIATE_OPS(double)

}  // namespace kv

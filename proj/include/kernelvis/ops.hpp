#pragma once

#include <cstddef>
#include <vector>

#include "kernelvis/tape.hpp"
#include "kernelvis/tensor.hpp"

namespace kv {

// Forward ops. Every op allocates a fresh output tensor; when `tape` is
// non-null and any input requires grad, the op records its adjoint step.
// Shapes follow numpy right-aligned broadcasting for the binary suite.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> relu(const Tensor<T>& a, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> gelu(const Tensor<T>& a, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> exp_t(const Tensor<T>& a, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> log_t(const Tensor<T>& a, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& a, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> softplus(const Tensor<T>& a, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T p, Tape<T>* tape = nullptr);

// [..., m, k] x [..., k, n] -> [..., m, n]; batch dims broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b,
                 Tape<T>* tape = nullptr);

// input [cin, h, w], weight [cout, cin, kh, kw] (odd kernels), optional bias
// [cout]. Cross-correlation. Output size must divide exactly.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, size_t stride, size_t pad,
                 Tape<T>* tape = nullptr);

// asymmetric zero padding (top/left/bottom/right); used by the stride-2
// downsample blocks where symmetric padding cannot produce an exact halving
template <typename T>
Tensor<T> conv2d_asym(const Tensor<T>& input, const Tensor<T>& weight,
                      const Tensor<T>& bias, size_t stride, size_t pad_top,
                      size_t pad_left, size_t pad_bottom, size_t pad_right,
                      Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, size_t k, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, size_t k, Tape<T>* tape = nullptr);

// align-corners-false; factor 1 is the identity
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, size_t factor,
                            Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, size_t axis, Tape<T>* tape = nullptr);

// normalizes the last axis; gain/bias have that axis's width
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> sum(const Tensor<T>& a, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> mean(const Tensor<T>& a, Tape<T>* tape = nullptr);
// sum over the last axis, keepdim: [..., d] -> [..., 1]
template <typename T>
Tensor<T> sum_last(const Tensor<T>& a, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<size_t>& perm,
                  Tape<T>* tape = nullptr);
// rows of a [n, rest...] selected by index; duplicates allowed
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<size_t>& rows,
                      Tape<T>* tape = nullptr);

}  // namespace kv

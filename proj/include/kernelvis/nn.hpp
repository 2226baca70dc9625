#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "kernelvis/ops.hpp"
#include "kernelvis/rng.hpp"
#include "kernelvis/tape.hpp"
#include "kernelvis/tensor.hpp"

namespace kv {

// Registry of named parameter tensors. Layers register their tensors at
// construction; the optimizer, checkpoints and the gradient checker iterate
// the registry. Entries share storage with the layer members.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    entries_.emplace_back(name, t);
    return t;
  }

  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const {
    return entries_;
  }

  size_t tensor_count() const { return entries_.size(); }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

template <typename T>
struct Linear {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]

  Linear() = default;
  Linear(ParamStore<T>& ps, Rng& rng, const std::string& prefix, size_t in,
         size_t out, T bias_init = T(0)) {
    w = ps.add(prefix + ".w",
               Tensor<T>::randn({in, out}, rng, std::sqrt(1.0 / double(in))));
    b = ps.add(prefix + ".b", Tensor<T>::full({out}, bias_init));
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const {
    return add(matmul(x, w, tape), b, tape);
  }
};

template <typename T>
struct LayerNormLayer {
  Tensor<T> gain, bias;

  LayerNormLayer() = default;
  LayerNormLayer(ParamStore<T>& ps, const std::string& prefix, size_t d) {
    gain = ps.add(prefix + ".gain", Tensor<T>::full({d}, T(1)));
    bias = ps.add(prefix + ".bias", Tensor<T>::zeros({d}));
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const {
    return layer_norm(x, gain, bias, tape);
  }
};

// 2-D convolution layer. halve=true selects the stride-2 exact-halving form
// (asymmetric pad 1 top/left); otherwise stride-1 size-preserving.
template <typename T>
struct ConvLayer {
  Tensor<T> w;  // [cout, cin, k, k]
  Tensor<T> b;  // [cout]
  size_t k = 3;
  bool halve = false;

  ConvLayer() = default;
  ConvLayer(ParamStore<T>& ps, Rng& rng, const std::string& prefix, size_t cin,
            size_t cout, size_t kernel, bool halve_in = false)
      : k(kernel), halve(halve_in) {
    const double stddev = std::sqrt(2.0 / double(cin * kernel * kernel));
    w = ps.add(prefix + ".w",
               Tensor<T>::randn({cout, cin, kernel, kernel}, rng, stddev));
    b = ps.add(prefix + ".b", Tensor<T>::zeros({cout}));
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const {
    if (halve) return conv2d_asym(x, w, b, 2, 1, 1, 0, 0, tape);
    return conv2d(x, w, b, 1, k / 2, tape);
  }
};

template <typename T>
struct MultiheadAttention {
  Linear<T> q_proj, k_proj, v_proj, out_proj;
  size_t d = 0;
  size_t heads = 1;

  MultiheadAttention() = default;
  MultiheadAttention(ParamStore<T>& ps, Rng& rng, const std::string& prefix,
                     size_t d_model, size_t kv_width, size_t n_heads)
      : d(d_model), heads(n_heads) {
    if (d_model % n_heads != 0) {
      throw ArgumentError(strfmt("attention width %zu not divisible by %zu "
                                 "heads",
                                 d_model, n_heads));
    }
    q_proj = Linear<T>(ps, rng, prefix + ".q", d_model, d_model);
    k_proj = Linear<T>(ps, rng, prefix + ".k", kv_width, d_model);
    v_proj = Linear<T>(ps, rng, prefix + ".v", kv_width, d_model);
    out_proj = Linear<T>(ps, rng, prefix + ".out", d_model, d_model);
  }

  // q [n, d]; feats [m, kv_width]; pos (optional) added to the key inputs
  // only. attn_out, when given, receives the [heads, n, m] attention map.
  Tensor<T> forward(const Tensor<T>& q, const Tensor<T>& feats,
                    const Tensor<T>& pos, Tape<T>* tape,
                    Tensor<T>* attn_out = nullptr) const {
    Tensor<T> qq = q_proj.forward(q, tape);
    Tensor<T> key_in = pos.defined() ? add(feats, pos, tape) : feats;
    Tensor<T> kk = k_proj.forward(key_in, tape);
    Tensor<T> vv = v_proj.forward(feats, tape);
    const size_t n = qq.dim(0), m = kk.dim(0), dh = d / heads;
    Tensor<T> qh = permute(reshape(qq, {n, heads, dh}, tape), {1, 0, 2}, tape);
    Tensor<T> kh = permute(reshape(kk, {m, heads, dh}, tape), {1, 2, 0}, tape);
    Tensor<T> vh = permute(reshape(vv, {m, heads, dh}, tape), {1, 0, 2}, tape);
    Tensor<T> scores = scale(matmul(qh, kh, tape),
                             T(1.0 / std::sqrt(double(dh))), tape);
    Tensor<T> attn = softmax(scores, 2, tape);
    if (attn_out) *attn_out = attn;
    Tensor<T> ctx = matmul(attn, vh, tape);
    Tensor<T> merged = reshape(permute(ctx, {1, 0, 2}, tape), {n, d}, tape);
    return out_proj.forward(merged, tape);
  }

  Tensor<T> self_forward(const Tensor<T>& x, Tape<T>* tape) const {
    return forward(x, x, Tensor<T>(), tape);
  }
};

template <typename T>
struct FeedForward {
  Linear<T> fc1, fc2;

  FeedForward() = default;
  FeedForward(ParamStore<T>& ps, Rng& rng, const std::string& prefix, size_t d,
              size_t hidden) {
    fc1 = Linear<T>(ps, rng, prefix + ".fc1", d, hidden);
    fc2 = Linear<T>(ps, rng, prefix + ".fc2", hidden, d);
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const {
    return fc2.forward(gelu(fc1.forward(x, tape), tape), tape);
  }
};

// Pre-norm transformer encoder block over a token matrix [m, d].
template <typename T>
struct TransformerBlock {
  LayerNormLayer<T> ln1, ln2;
  MultiheadAttention<T> attn;
  FeedForward<T> ffn;

  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& ps, Rng& rng, const std::string& prefix,
                   size_t d, size_t heads, size_t ffn_hidden) {
    ln1 = LayerNormLayer<T>(ps, prefix + ".ln1", d);
    ln2 = LayerNormLayer<T>(ps, prefix + ".ln2", d);
    attn = MultiheadAttention<T>(ps, rng, prefix + ".attn", d, d, heads);
    ffn = FeedForward<T>(ps, rng, prefix + ".ffn", d, ffn_hidden);
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const {
    Tensor<T> h = add(x, attn.self_forward(ln1.forward(x, tape), tape), tape);
    return add(h, ffn.forward(ln2.forward(h, tape), tape), tape);
  }
};

// [c, h, w] feature map -> [h*w, c] token matrix
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& fmap, Tape<T>* tape) {
  const size_t c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
  return reshape(permute(fmap, {1, 2, 0}, tape), {h * w, c}, tape);
}

// Global-norm gradient clipping over a parameter set.
template <typename T>
double clip_grad_norm(std::vector<std::pair<std::string, Tensor<T>>>& params,
                      double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    const auto& g = t.grad_vec();
    for (T v : g) sq += double(v) * double(v);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [name, t] : params) {
      if (!t.has_grad()) continue;
      T* g = t.grad();
      for (size_t i = 0; i < t.size(); ++i) g[i] *= s;
    }
  }
  return norm;
}

}  // namespace kv

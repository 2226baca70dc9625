#include "kernelvis/instance_decoder.hpp"

#include <cmath>

#include "kernelvis/flops.hpp"

namespace kv {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kTemperature = 10000.0;
}  // namespace

template <typename T>
Tensor<T> sine_position_embedding(size_t h, size_t w, size_t d) {
  if (d % 4 != 0) {
    throw ArgumentError(strfmt(
        "sine_position_embedding: d must be a multiple of 4 "
        "(d/4 frequencies per axis), got %zu",
        d));
  }
  const size_t freqs = d / 4;
  std::vector<double> omega(freqs);
  for (size_t f = 0; f < freqs; ++f) {
    omega[f] = 1.0 / std::pow(kTemperature, double(f) / double(freqs));
  }
  Tensor<T> out = Tensor<T>::zeros({d, h, w});
  T* p = out.data();
  const size_t plane = h * w;
  for (size_t y = 0; y < h; ++y) {
    const double ynorm = kTwoPi * double(y) / double(h);
    for (size_t x = 0; x < w; ++x) {
      const double xnorm = kTwoPi * double(x) / double(w);
      const size_t at = y * w + x;
      for (size_t f = 0; f < freqs; ++f) {
        const double xv = xnorm * omega[f];
        const double yv = ynorm * omega[f];
        p[(2 * f) * plane + at] = static_cast<T>(std::sin(xv));
        p[(2 * f + 1) * plane + at] = static_cast<T>(std::cos(xv));
        p[(d / 2 + 2 * f) * plane + at] = static_cast<T>(std::sin(yv));
        p[(d / 2 + 2 * f + 1) * plane + at] = static_cast<T>(std::cos(yv));
      }
    }
  }
  flops::add(uint64_t(4) * d * h * w);
  return out;
}

template <typename T>
Tensor<T> sine_position_tokens(size_t h, size_t w, size_t d) {
  Tensor<T> pe = sine_position_embedding<T>(h, w, d);
  return to_tokens(pe, static_cast<Tape<T>*>(nullptr));
}

template <typename T>
Tensor<T> extract_local_features(const Tensor<T>& x_mask, PoolMode mode,
                                 size_t k, Tape<T>* tape) {
  return mode == PoolMode::max ? max_pool2d(x_mask, k, tape)
                               : avg_pool2d(x_mask, k, tape);
}

template <typename T>
Tensor<T> segment(const Tensor<T>& kernels, const Tensor<T>& x_mask,
                  Tape<T>* tape) {
  if (kernels.rank() != 2 || x_mask.rank() != 3 ||
      kernels.dim(1) != x_mask.dim(0)) {
    throw ShapeError(strfmt("segment: kernel width of %s must match mask "
                            "feature channels of %s",
                            shape_str(kernels.shape()).c_str(),
                            shape_str(x_mask.shape()).c_str()));
  }
  const size_t n = kernels.dim(0), dk = x_mask.dim(0);
  const size_t h = x_mask.dim(1), w = x_mask.dim(2);
  Tensor<T> flat = reshape(x_mask, {dk, h * w}, tape);
  return reshape(matmul(kernels, flat, tape), {n, h, w}, tape);
}

template <typename T>
DecoderStage<T>::DecoderStage(ParamStore<T>& ps, Rng& rng,
                              const std::string& prefix, size_t d,
                              size_t feat_width, size_t heads,
                              size_t ffn_hidden) {
  ln_self = LayerNormLayer<T>(ps, prefix + ".ln_self", d);
  ln_cross = LayerNormLayer<T>(ps, prefix + ".ln_cross", d);
  ln_ffn = LayerNormLayer<T>(ps, prefix + ".ln_ffn", d);
  self_attn = MultiheadAttention<T>(ps, rng, prefix + ".self", d, d, heads);
  cross_attn =
      MultiheadAttention<T>(ps, rng, prefix + ".cross", d, feat_width, heads);
  ffn = FeedForward<T>(ps, rng, prefix + ".ffn", d, ffn_hidden);
}

template <typename T>
Tensor<T> DecoderStage<T>::forward(const Tensor<T>& q,
                                   const Tensor<T>& feat_tokens,
                                   const Tensor<T>& pos_tokens, Tape<T>* tape,
                                   Tensor<T>* cross_attn_out) const {
  Tensor<T> nq = ln_self.forward(q, tape);
  Tensor<T> x = add(q, self_attn.self_forward(nq, tape), tape);
  Tensor<T> nx = ln_cross.forward(x, tape);
  x = add(x,
          cross_attn.forward(nx, feat_tokens, pos_tokens, tape,
                             cross_attn_out),
          tape);
  return add(x, ffn.forward(ln_ffn.forward(x, tape), tape), tape);
}

template <typename T>
PredictionHeads<T>::PredictionHeads(ParamStore<T>& ps, Rng& rng,
                                    const std::string& prefix, size_t d,
                                    size_t num_classes, size_t d_k) {
  cls = Linear<T>(ps, rng, prefix + ".cls", d, num_classes, T(-2));
  kernel = Linear<T>(ps, rng, prefix + ".kernel", d, d_k);
  obj = Linear<T>(ps, rng, prefix + ".obj", d, 1);
}

template <typename T>
InstanceDecoder<T>::InstanceDecoder(ParamStore<T>& ps, Rng& rng,
                                    const InstanceDecoderConfig& cfg)
    : cfg_(cfg) {
  if (cfg.d % cfg.heads != 0) {
    throw ArgumentError(strfmt("instance decoder: d=%zu not divisible by %zu "
                               "heads",
                               cfg.d, cfg.heads));
  }
  switch (cfg.mode) {
    case DecoderMode::global_local:
      kinds_[0] = StageKind::global;
      kinds_[1] = StageKind::local;
      num_stages_ = 2;
      break;
    case DecoderMode::local_local:
      kinds_[0] = kinds_[1] = StageKind::local;
      num_stages_ = 2;
      break;
    case DecoderMode::global_global:
      kinds_[0] = kinds_[1] = StageKind::global;
      num_stages_ = 2;
      break;
    case DecoderMode::global_only:
      kinds_[0] = StageKind::global;
      num_stages_ = 1;
      break;
    case DecoderMode::local_only:
      kinds_[0] = StageKind::local;
      num_stages_ = 1;
      break;
  }
  queries_ = ps.add("decoder.queries",
                    Tensor<T>::randn({cfg.num_queries, cfg.d}, rng, 0.1));
  for (size_t i = 0; i < num_stages_; ++i) {
    const size_t feat_width =
        kinds_[i] == StageKind::global ? cfg.c6 : cfg.d_k;
    stages_[i] = DecoderStage<T>(ps, rng, strfmt("decoder.stage%zu", i),
                                 cfg.d, feat_width, cfg.heads, cfg.ffn_hidden);
  }
  heads_ = PredictionHeads<T>(ps, rng, "decoder.heads", cfg.d,
                              cfg.num_classes, cfg.d_k);
}

template <typename T>
Tensor<T> InstanceDecoder<T>::run_stage(size_t i, const Tensor<T>& q,
                                        const Tensor<T>& x_global,
                                        const Tensor<T>& x_local,
                                        Tape<T>* tape) const {
  const Tensor<T>& fmap =
      kinds_[i] == StageKind::global ? x_global : x_local;
  const size_t c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
  Tensor<T> tokens = to_tokens(fmap, tape);
  Tensor<T> pos = sine_position_tokens<T>(h, w, c);
  return stages_[i].forward(q, tokens, pos, tape);
}

template <typename T>
Tensor<T> InstanceDecoder<T>::run_stage1(const Tensor<T>& x_global,
                                         const Tensor<T>& x_local,
                                         Tape<T>* tape) const {
  return run_stage(0, queries_, x_global, x_local, tape);
}

template <typename T>
Tensor<T> InstanceDecoder<T>::run_stage2(const Tensor<T>& q,
                                         const Tensor<T>& x_global,
                                         const Tensor<T>& x_local,
                                         Tape<T>* tape) const {
  if (!has_stage2()) {
    throw ArgumentError("instance decoder: mode has no second stage");
  }
  return run_stage(1, q, x_global, x_local, tape);
}

template <typename T>
typename InstanceDecoder<T>::DecodeOut InstanceDecoder<T>::decode(
    const Tensor<T>& x_global, const Tensor<T>& x_local, Tape<T>* tape) const {
  DecodeOut out;
  out.q_stage1 = run_stage1(x_global, x_local, tape);
  out.q_final = has_stage2()
                    ? run_stage2(out.q_stage1, x_global, x_local, tape)
                    : out.q_stage1;
  return out;
}

template <typename T>
InstancePrediction<T> InstanceDecoder<T>::predict(const Tensor<T>& q,
                                                  Tape<T>* tape) const {
  InstancePrediction<T> pred;
  pred.class_logits = heads_.cls.forward(q, tape);
  pred.kernels = heads_.kernel.forward(q, tape);
  pred.objectness = heads_.obj.forward(q, tape);
  // score fusion: sqrt(sigmoid(max class logit) * sigmoid(objectness))
  const size_t n = q.dim(0), c = cfg_.num_classes;
  pred.scores = Tensor<T>::zeros({n});
  const T* cl = pred.class_logits.data();
  const T* ob = pred.objectness.data();
  T* sc = pred.scores.data();
  for (size_t i = 0; i < n; ++i) {
    T m = cl[i * c];
    for (size_t j = 1; j < c; ++j) m = std::max(m, cl[i * c + j]);
    const double p = 1.0 / (1.0 + std::exp(-double(m)));
    const double o = 1.0 / (1.0 + std::exp(-double(ob[i])));
    sc[i] = static_cast<T>(std::sqrt(p * o));
  }
  return pred;
}

template <typename T>
Tensor<T> InstanceDecoder<T>::kernels_only(const Tensor<T>& q,
                                           Tape<T>* tape) const {
  return heads_.kernel.forward(q, tape);
}

#define KV_INSTANTIATE_DECODER(T)                                             \
  template Tensor<T> sine_position_embedding<T>(size_t, size_t, size_t);      \
  template Tensor<T> sine_position_tokens<T>(size_t, size_t, size_t);         \
  template Tensor<T> extract_local_features(const Tensor<T>&, PoolMode,       \
                                            size_t, Tape<T>*);               \
  template Tensor<T> segment(const Tensor<T>&, const Tensor<T>&, Tape<T>*);  \
  template struct DecoderStage<T>;                                           \
  template struct PredictionHeads<T>;                                        \
  template class InstanceDecoder<T>;

KV_INSTANTIATE_DECODER(float)
KV_INSTANTIATE_DECODER(double)

}  // namespace kv

#pragma once

#include <string>
#include <vector>

#include "kernelvis/nn.hpp"

namespace kv {

enum class PoolMode { max, avg };
enum class DecoderMode {
  global_local,  // default 2-stage dual decoder
  local_local,
  global_global,
  global_only,
  local_only,
};

// Per-query outputs of the prediction heads. scores is the inference-time
// fusion sqrt(sigmoid(max class logit) * sigmoid(objectness)), never taped.
template <typename T>
struct InstancePrediction {
  Tensor<T> class_logits;  // [n, num_classes]
  Tensor<T> kernels;       // [n, d_k]
  Tensor<T> objectness;    // [n, 1]
  Tensor<T> scores;        // [n]
};

// Interleaved sin/cos embedding of normalized x/y coordinates, d/4
// frequencies per axis: channels [0, d/2) encode x, [d/2, d) encode y.
template <typename T>
Tensor<T> sine_position_embedding(size_t h, size_t w, size_t d);

// token-matrix layout [h*w, d] matching to_tokens()
template <typename T>
Tensor<T> sine_position_tokens(size_t h, size_t w, size_t d);

// X_L = f_pool(X_mask): downsamples stride-8 mask features by k
template <typename T>
Tensor<T> extract_local_features(const Tensor<T>& x_mask, PoolMode mode,
                                 size_t k, Tape<T>* tape = nullptr);

// mask logits M = K . X_mask at every location
template <typename T>
Tensor<T> segment(const Tensor<T>& kernels, const Tensor<T>& x_mask,
                  Tape<T>* tape = nullptr);

// One decoder stage: query self-attention, cross-attention to flattened
// features + position embedding, feed-forward; pre-norm residuals.
template <typename T>
struct DecoderStage {
  LayerNormLayer<T> ln_self, ln_cross, ln_ffn;
  MultiheadAttention<T> self_attn;
  MultiheadAttention<T> cross_attn;
  FeedForward<T> ffn;

  DecoderStage() = default;
  DecoderStage(ParamStore<T>& ps, Rng& rng, const std::string& prefix,
               size_t d, size_t feat_width, size_t heads, size_t ffn_hidden);

  Tensor<T> forward(const Tensor<T>& q, const Tensor<T>& feat_tokens,
                    const Tensor<T>& pos_tokens, Tape<T>* tape,
                    Tensor<T>* cross_attn_out = nullptr) const;
};

template <typename T>
struct PredictionHeads {
  Linear<T> cls, kernel, obj;

  PredictionHeads() = default;
  PredictionHeads(ParamStore<T>& ps, Rng& rng, const std::string& prefix,
                  size_t d, size_t num_classes, size_t d_k);
};

struct InstanceDecoderConfig {
  size_t num_queries = 25;
  size_t d = 128;
  size_t d_k = 128;
  size_t heads = 4;
  size_t ffn_hidden = 256;
  size_t num_classes = 3;
  size_t c6 = 96;  // global feature width
  DecoderMode mode = DecoderMode::global_local;
  PoolMode pool = PoolMode::max;
  size_t pool_k = 8;
};

// Dual transformer instance decoder: stage kinds derive from the mode
// (global stages attend to X_G, local stages to X_L).
template <typename T>
class InstanceDecoder {
 public:
  enum class StageKind { global, local };

  InstanceDecoder() = default;
  InstanceDecoder(ParamStore<T>& ps, Rng& rng,
                  const InstanceDecoderConfig& cfg);

  struct DecodeOut {
    Tensor<T> q_stage1;  // retained for temporal query passing
    Tensor<T> q_final;
  };

  // x_global: X6 map; x_local: pooled mask features map
  DecodeOut decode(const Tensor<T>& x_global, const Tensor<T>& x_local,
                   Tape<T>* tape) const;

  Tensor<T> run_stage1(const Tensor<T>& x_global, const Tensor<T>& x_local,
                       Tape<T>* tape) const;
  Tensor<T> run_stage2(const Tensor<T>& q, const Tensor<T>& x_global,
                       const Tensor<T>& x_local, Tape<T>* tape) const;
  bool has_stage2() const { return num_stages_ == 2; }

  InstancePrediction<T> predict(const Tensor<T>& q, Tape<T>* tape) const;
  Tensor<T> kernels_only(const Tensor<T>& q, Tape<T>* tape) const;

  const Tensor<T>& initial_queries() const { return queries_; }
  const InstanceDecoderConfig& config() const { return cfg_; }
  StageKind stage_kind(size_t i) const { return kinds_[i]; }

 private:
  Tensor<T> run_stage(size_t i, const Tensor<T>& q, const Tensor<T>& x_global,
                      const Tensor<T>& x_local, Tape<T>* tape) const;

  InstanceDecoderConfig cfg_;
  Tensor<T> queries_;  // [n, d] learnable
  DecoderStage<T> stages_[2];
  StageKind kinds_[2] = {StageKind::global, StageKind::local};
  size_t num_stages_ = 2;
  PredictionHeads<T> heads_;
};

}  // namespace kv

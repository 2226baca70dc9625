#pragma once

#include <atomic>
#include <cstdint>

#include "kernelvis/backbone.hpp"
#include "kernelvis/instance_decoder.hpp"
#include "kernelvis/mask_decoder.hpp"

namespace kv {

struct ModelConfig {
  BackboneConfig backbone;
  size_t d = 128;
  size_t d_k = 128;
  size_t heads = 4;
  size_t ffn_hidden = 256;
  size_t num_queries = 25;
  size_t num_classes = 3;
  DecoderMode decoder_mode = DecoderMode::global_local;
  PoolMode pool = PoolMode::max;
  size_t pool_k = 8;
  bool enhancer = true;
  MaskDecoderKind mask_decoder = MaskDecoderKind::iterative;
  uint64_t init_seed = 7;
};

// Whole per-frame model: backbone -> mask decoder -> dual instance decoder.
template <typename T>
class Network {
 public:
  explicit Network(const ModelConfig& cfg);

  struct Features {
    FeaturePyramid<T> pyramid;
    Tensor<T> x_mask;  // [d_k, H/8, W/8]
  };

  struct Forward {
    Features feats;
    Tensor<T> x_local;
    Tensor<T> q_stage1;
    Tensor<T> q_final;
    InstancePrediction<T> pred;
    Tensor<T> mask_logits;  // [n, H/8, W/8]
  };

  // keyframe path: everything
  Forward forward_full(const Tensor<T>& image, Tape<T>* tape) const;
  // non-keyframe path: backbone + mask decoder only
  Features forward_features(const Tensor<T>& image, Tape<T>* tape) const;

  // temporal query passing support
  Tensor<T> stage1_queries(const Features& f, Tape<T>* tape) const;
  Tensor<T> stage2_from(const Tensor<T>& q_stage1, const Features& f,
                        Tape<T>* tape) const;
  InstancePrediction<T> predict(const Tensor<T>& q, Tape<T>* tape) const;
  Tensor<T> kernels_only(const Tensor<T>& q, Tape<T>* tape) const;

  Tensor<T> local_features(const Tensor<T>& x_mask, Tape<T>* tape) const;

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  const InstanceDecoder<T>& decoder() const { return decoder_; }

  // full instance-decoder invocations (keyframe decodes)
  uint64_t decoder_invocations() const { return decoder_invocations_.load(); }
  void reset_decoder_invocations() { decoder_invocations_ = 0; }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  Backbone<T> backbone_;
  MaskDecoder<T> mask_decoder_;
  InstanceDecoder<T> decoder_;
  mutable std::atomic<uint64_t> decoder_invocations_{0};
};

}  // namespace kv

#pragma once

#include <string>

#include "kernelvis/backbone.hpp"
#include "kernelvis/nn.hpp"

namespace kv {

enum class MaskDecoderKind {
  iterative,  // top-down + bottom-up fusion with semantic enhancers
  fpn,        // plain top-down FPN, one output conv (ablation baseline)
};

// Gated additive injection of global semantics:
//   x * sigmoid(gate(X6) upsampled) + proj(X6) upsampled.
// The 1x1 projections run at X6 resolution; pointwise projection and bilinear
// upsampling commute, and projecting first keeps the enhancer cheap.
template <typename T>
struct SemanticEnhancer {
  ConvLayer<T> gate, proj;  // 1x1, c6 -> width

  SemanticEnhancer() = default;
  SemanticEnhancer(ParamStore<T>& ps, Rng& rng, const std::string& prefix,
                   size_t c6, size_t width);

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& x6,
                    Tape<T>* tape) const;
};

struct MaskDecoderConfig {
  size_t c3 = 32, c4 = 48, c5 = 64, c6 = 96;
  size_t width = 128;  // d_k, the mask feature width
  bool enhancer = true;
  MaskDecoderKind kind = MaskDecoderKind::iterative;
};

// Fuses X3..X5 (with X6 semantics) into single-level stride-8 mask features.
template <typename T>
class MaskDecoder {
 public:
  MaskDecoder() = default;
  MaskDecoder(ParamStore<T>& ps, Rng& rng, const MaskDecoderConfig& cfg);

  // returns X_mask [width, H/8, W/8]
  Tensor<T> forward(const FeaturePyramid<T>& pyr, Tape<T>* tape) const;

  const MaskDecoderConfig& config() const { return cfg_; }

 private:
  MaskDecoderConfig cfg_;
  ConvLayer<T> lat3_, lat4_, lat5_;
  SemanticEnhancer<T> en3_, en4_, en5_;
  ConvLayer<T> td4_, td3_;
  ConvLayer<T> down4_, down5_;
  ConvLayer<T> bu4_, bu5_;
  ConvLayer<T> out_;
};

}  // namespace kv

#pragma once

#include <vector>

#include "kernelvis/nn.hpp"

namespace kv {

// Output contract of the backbone: local features X3..X5 at strides 8/16/32
// and global features X6 at stride 64.
template <typename T>
struct FeaturePyramid {
  Tensor<T> x3, x4, x5, x6;
};

struct BackboneConfig {
  size_t c3 = 32, c4 = 48, c5 = 64, c6 = 96;
  size_t convs_per_stage = 1;  // strided conv + (n-1) stride-1 convs per stage
  size_t tf_blocks = 1;        // transformer blocks on the X6 branch
  size_t heads = 2;
};

// Toy stand-in for the mobile transformer backbones: strided 3x3 conv stages
// down to stride 64 plus self-attention blocks on the deepest level.
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParamStore<T>& ps, Rng& rng, const BackboneConfig& cfg);

  FeaturePyramid<T> forward(const Tensor<T>& image, Tape<T>* tape) const;

  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  // six downsample stages (stride 2 each); stage i holds its strided conv
  // followed by optional stride-1 convs
  std::vector<std::vector<ConvLayer<T>>> stages_;
  std::vector<TransformerBlock<T>> tf_;
};

}  // namespace kv

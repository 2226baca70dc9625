#include "kernelvis/backbone.hpp"

namespace kv {

template <typename T>
Backbone<T>::Backbone(ParamStore<T>& ps, Rng& rng, const BackboneConfig& cfg)
    : cfg_(cfg) {
  if (cfg.c3 == 0 || cfg.c4 == 0 || cfg.c5 == 0 || cfg.c6 == 0) {
    throw ArgumentError("backbone: channel widths must be positive");
  }
  if (cfg.c6 % cfg.heads != 0) {
    throw ArgumentError(strfmt("backbone: c6=%zu not divisible by %zu heads",
                               cfg.c6, cfg.heads));
  }
  // channel plan per stride-2 stage: 3 -> c3 -> c3 -> c3 (stride 8)
  //                                  -> c4 (16) -> c5 (32) -> c6 (64)
  const size_t widths[7] = {3, cfg.c3, cfg.c3, cfg.c3, cfg.c4, cfg.c5, cfg.c6};
  stages_.resize(6);
  for (size_t s = 0; s < 6; ++s) {
    auto& stage = stages_[s];
    stage.emplace_back(ps, rng, strfmt("backbone.s%zu.down", s), widths[s],
                       widths[s + 1], 3, /*halve=*/true);
    for (size_t e = 1; e < cfg.convs_per_stage; ++e) {
      stage.emplace_back(ps, rng, strfmt("backbone.s%zu.conv%zu", s, e),
                         widths[s + 1], widths[s + 1], 3);
    }
  }
  for (size_t b = 0; b < cfg.tf_blocks; ++b) {
    tf_.emplace_back(ps, rng, strfmt("backbone.tf%zu", b), cfg.c6, cfg.heads,
                     2 * cfg.c6);
  }
}

template <typename T>
FeaturePyramid<T> Backbone<T>::forward(const Tensor<T>& image,
                                       Tape<T>* tape) const {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError(strfmt("backbone: expected image [3,h,w], got %s",
                            shape_str(image.shape()).c_str()));
  }
  if (image.dim(1) % 64 != 0 || image.dim(2) % 64 != 0) {
    throw ShapeError(strfmt("backbone: image size %s must be divisible by 64",
                            shape_str(image.shape()).c_str()));
  }
  FeaturePyramid<T> pyr;
  Tensor<T> x = image;
  for (size_t s = 0; s < 6; ++s) {
    for (const auto& conv : stages_[s]) {
      x = gelu(conv.forward(x, tape), tape);
    }
    if (s == 2) pyr.x3 = x;
    if (s == 3) pyr.x4 = x;
    if (s == 4) pyr.x5 = x;
  }
  // self-attention over the stride-64 tokens
  const size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> tokens = to_tokens(x, tape);
  for (const auto& block : tf_) tokens = block.forward(tokens, tape);
  pyr.x6 = permute(reshape(tokens, {h, w, c}, tape), {2, 0, 1}, tape);
  return pyr;
}

template class Backbone<float>;
template class Backbone<double>;

}  // namespace kv

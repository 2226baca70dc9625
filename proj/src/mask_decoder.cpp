#include "kernelvis/mask_decoder.hpp"

namespace kv {

template <typename T>
SemanticEnhancer<T>::SemanticEnhancer(ParamStore<T>& ps, Rng& rng,
                                      const std::string& prefix, size_t c6,
                                      size_t width) {
  gate = ConvLayer<T>(ps, rng, prefix + ".gate", c6, width, 1);
  proj = ConvLayer<T>(ps, rng, prefix + ".proj", c6, width, 1);
}

template <typename T>
Tensor<T> SemanticEnhancer<T>::forward(const Tensor<T>& x, const Tensor<T>& x6,
                                       Tape<T>* tape) const {
  if (x.dim(1) % x6.dim(1) != 0 || x.dim(2) % x6.dim(2) != 0 ||
      x.dim(1) / x6.dim(1) != x.dim(2) / x6.dim(2)) {
    throw ShapeError(strfmt("semantic_enhance: x6 %s does not upsample to %s",
                            shape_str(x6.shape()).c_str(),
                            shape_str(x.shape()).c_str()));
  }
  const size_t factor = x.dim(1) / x6.dim(1);
  Tensor<T> g = bilinear_upsample(gate.forward(x6, tape), factor, tape);
  Tensor<T> a = bilinear_upsample(proj.forward(x6, tape), factor, tape);
  return add(mul(x, sigmoid(g, tape), tape), a, tape);
}

template <typename T>
MaskDecoder<T>::MaskDecoder(ParamStore<T>& ps, Rng& rng,
                            const MaskDecoderConfig& cfg)
    : cfg_(cfg) {
  const size_t w = cfg.width;
  lat3_ = ConvLayer<T>(ps, rng, "maskdec.lat3", cfg.c3, w, 1);
  lat4_ = ConvLayer<T>(ps, rng, "maskdec.lat4", cfg.c4, w, 1);
  lat5_ = ConvLayer<T>(ps, rng, "maskdec.lat5", cfg.c5, w, 1);
  if (cfg.kind == MaskDecoderKind::iterative) {
    if (cfg.enhancer) {
      en3_ = SemanticEnhancer<T>(ps, rng, "maskdec.en3", cfg.c6, w);
      en4_ = SemanticEnhancer<T>(ps, rng, "maskdec.en4", cfg.c6, w);
      en5_ = SemanticEnhancer<T>(ps, rng, "maskdec.en5", cfg.c6, w);
    }
    td4_ = ConvLayer<T>(ps, rng, "maskdec.td4", w, w, 3);
    td3_ = ConvLayer<T>(ps, rng, "maskdec.td3", w, w, 3);
    down4_ = ConvLayer<T>(ps, rng, "maskdec.down4", w, w, 3, /*halve=*/true);
    down5_ = ConvLayer<T>(ps, rng, "maskdec.down5", w, w, 3, /*halve=*/true);
    bu4_ = ConvLayer<T>(ps, rng, "maskdec.bu4", w, w, 3);
    bu5_ = ConvLayer<T>(ps, rng, "maskdec.bu5", w, w, 3);
  }
  out_ = ConvLayer<T>(ps, rng, "maskdec.out", w, w, 3);
}

template <typename T>
Tensor<T> MaskDecoder<T>::forward(const FeaturePyramid<T>& pyr,
                                  Tape<T>* tape) const {
  Tensor<T> l3 = lat3_.forward(pyr.x3, tape);
  Tensor<T> l4 = lat4_.forward(pyr.x4, tape);
  Tensor<T> l5 = lat5_.forward(pyr.x5, tape);
  if (cfg_.kind == MaskDecoderKind::fpn) {
    Tensor<T> p4 = add(l4, bilinear_upsample(l5, 2, tape), tape);
    Tensor<T> p3 = add(l3, bilinear_upsample(p4, 2, tape), tape);
    return out_.forward(p3, tape);
  }
  if (cfg_.enhancer) {
    l3 = en3_.forward(l3, pyr.x6, tape);
    l4 = en4_.forward(l4, pyr.x6, tape);
    l5 = en5_.forward(l5, pyr.x6, tape);
  }
  // top-down: stride 32 -> 8
  Tensor<T> p5 = l5;
  Tensor<T> p4 =
      gelu(td4_.forward(add(l4, bilinear_upsample(p5, 2, tape), tape), tape),
           tape);
  Tensor<T> p3 =
      gelu(td3_.forward(add(l3, bilinear_upsample(p4, 2, tape), tape), tape),
           tape);
  // bottom-up: stride 8 -> 32
  Tensor<T> n3 = p3;
  Tensor<T> n4 =
      gelu(bu4_.forward(add(p4, down4_.forward(n3, tape), tape), tape), tape);
  Tensor<T> n5 =
      gelu(bu5_.forward(add(p5, down5_.forward(n4, tape), tape), tape), tape);
  // single-level stride-8 output
  Tensor<T> agg = add(add(n3, bilinear_upsample(n4, 2, tape), tape),
                      bilinear_upsample(n5, 4, tape), tape);
  return out_.forward(agg, tape);
}

template struct SemanticEnhancer<float>;
template struct SemanticEnhancer<double>;
template class MaskDecoder<float>;
template class MaskDecoder<double>;

}  // namespace kv

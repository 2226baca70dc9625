#include "kernelvis/network.hpp"

namespace kv {

namespace {

bool uses_local(DecoderMode mode) {
  return mode == DecoderMode::global_local ||
         mode == DecoderMode::local_local || mode == DecoderMode::local_only;
}

}  // namespace

template <typename T>
Network<T>::Network(const ModelConfig& cfg) : cfg_(cfg) {
  Rng rng(cfg.init_seed);
  Rng rng_backbone = rng.fork(1);
  Rng rng_mask = rng.fork(2);
  Rng rng_decoder = rng.fork(3);
  backbone_ = Backbone<T>(params_, rng_backbone, cfg.backbone);
  MaskDecoderConfig mcfg;
  mcfg.c3 = cfg.backbone.c3;
  mcfg.c4 = cfg.backbone.c4;
  mcfg.c5 = cfg.backbone.c5;
  mcfg.c6 = cfg.backbone.c6;
  mcfg.width = cfg.d_k;
  mcfg.enhancer = cfg.enhancer;
  mcfg.kind = cfg.mask_decoder;
  mask_decoder_ = MaskDecoder<T>(params_, rng_mask, mcfg);
  InstanceDecoderConfig dcfg;
  dcfg.num_queries = cfg.num_queries;
  dcfg.d = cfg.d;
  dcfg.d_k = cfg.d_k;
  dcfg.heads = cfg.heads;
  dcfg.ffn_hidden = cfg.ffn_hidden;
  dcfg.num_classes = cfg.num_classes;
  dcfg.c6 = cfg.backbone.c6;
  dcfg.mode = cfg.decoder_mode;
  dcfg.pool = cfg.pool;
  dcfg.pool_k = cfg.pool_k;
  decoder_ = InstanceDecoder<T>(params_, rng_decoder, dcfg);
}

template <typename T>
typename Network<T>::Features Network<T>::forward_features(
    const Tensor<T>& image, Tape<T>* tape) const {
  Features f;
  f.pyramid = backbone_.forward(image, tape);
  f.x_mask = mask_decoder_.forward(f.pyramid, tape);
  return f;
}

template <typename T>
Tensor<T> Network<T>::local_features(const Tensor<T>& x_mask,
                                     Tape<T>* tape) const {
  return extract_local_features(x_mask, cfg_.pool, cfg_.pool_k, tape);
}

template <typename T>
Tensor<T> Network<T>::stage1_queries(const Features& f, Tape<T>* tape) const {
  Tensor<T> x_local;
  if (uses_local(cfg_.decoder_mode)) {
    x_local = local_features(f.x_mask, tape);
  }
  return decoder_.run_stage1(f.pyramid.x6, x_local, tape);
}

template <typename T>
Tensor<T> Network<T>::stage2_from(const Tensor<T>& q_stage1, const Features& f,
                                  Tape<T>* tape) const {
  Tensor<T> x_local;
  if (uses_local(cfg_.decoder_mode)) {
    x_local = local_features(f.x_mask, tape);
  }
  return decoder_.run_stage2(q_stage1, f.pyramid.x6, x_local, tape);
}

template <typename T>
InstancePrediction<T> Network<T>::predict(const Tensor<T>& q,
                                          Tape<T>* tape) const {
  return decoder_.predict(q, tape);
}

template <typename T>
Tensor<T> Network<T>::kernels_only(const Tensor<T>& q, Tape<T>* tape) const {
  return decoder_.kernels_only(q, tape);
}

template <typename T>
typename Network<T>::Forward Network<T>::forward_full(const Tensor<T>& image,
                                                      Tape<T>* tape) const {
  Forward out;
  out.feats = forward_features(image, tape);
  if (uses_local(cfg_.decoder_mode)) {
    out.x_local = local_features(out.feats.x_mask, tape);
  }
  auto decoded =
      decoder_.decode(out.feats.pyramid.x6, out.x_local, tape);
  ++decoder_invocations_;
  out.q_stage1 = decoded.q_stage1;
  out.q_final = decoded.q_final;
  out.pred = decoder_.predict(out.q_final, tape);
  out.mask_logits = segment(out.pred.kernels, out.feats.x_mask, tape);
  return out;
}

template class Network<float>;
template class Network<double>;

}  // namespace kv

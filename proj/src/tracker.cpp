#include "kernelvis/tracker.hpp"

#include <chrono>
#include <cmath>

#include "kernelvis/flops.hpp"
#include "kernelvis/losses.hpp"

namespace kv {

template <typename T>
std::vector<size_t> associate_kernels(const Tensor<T>& prev,
                                      const Tensor<T>& curr,
                                      std::vector<double>* similarity_out) {
  if (prev.rank() != 2 || !same_shape(prev, curr)) {
    throw ShapeError(strfmt("associate_kernels: shape mismatch %s vs %s",
                            shape_str(prev.shape()).c_str(),
                            shape_str(curr.shape()).c_str()));
  }
  const size_t n = prev.dim(0), d = prev.dim(1);
  constexpr double kNormFloor = 1e-12;
  std::vector<double> pnorm(n), cnorm(n);
  for (size_t i = 0; i < n; ++i) {
    double sp = 0.0, sc = 0.0;
    for (size_t j = 0; j < d; ++j) {
      sp += double(prev.data()[i * d + j]) * double(prev.data()[i * d + j]);
      sc += double(curr.data()[i * d + j]) * double(curr.data()[i * d + j]);
    }
    pnorm[i] = std::max(std::sqrt(sp), kNormFloor);
    cnorm[i] = std::max(std::sqrt(sc), kNormFloor);
  }
  std::vector<double> cost(n * n);  // -cosine similarity
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (size_t k = 0; k < d; ++k) {
        dot += double(prev.data()[i * d + k]) * double(curr.data()[j * d + k]);
      }
      cost[i * n + j] = -dot / (pnorm[i] * cnorm[j]);
    }
  }
  const Assignment assign = hungarian_match(cost, n, n);
  std::vector<size_t> perm(n);
  if (similarity_out) similarity_out->assign(n, 0.0);
  for (const auto& [pi, cj] : assign.pairs) {
    perm[cj] = pi;
    if (similarity_out) (*similarity_out)[cj] = -cost[pi * n + cj];
  }
  return perm;
}

TrackedFrameResult filter_predictions(const TrackedFrameResult& result,
                                      double threshold) {
  TrackedFrameResult out;
  out.frame_index = result.frame_index;
  for (const auto& inst : result.instances) {
    if (inst.score > threshold) out.instances.push_back(inst);
  }
  return out;
}

template <typename T>
Tracker<T>::Tracker(const Network<T>& net, TrackerConfig cfg)
    : net_(&net), cfg_(cfg) {
  if (cfg.reuse_interval < 1) {
    throw ArgumentError("tracker: reuse interval T must be >= 1");
  }
}

template <typename T>
TrackedFrameResult Tracker<T>::process_frame(const Tensor<T>& frame,
                                             TrackState<T>& state) const {
  if (!state.initialized && state.frames_processed != 0) {
    throw StateError("tracker: state was not initialized on the first frame");
  }
  const bool keyframe = state.frames_since_keyframe == 0;
  Tensor<T> mask_logits;
  if (keyframe) {
    auto fwd = net_->forward_full(frame, nullptr);
    const Tensor<T>& kernels = fwd.pred.kernels;
    const size_t n = kernels.dim(0);
    const size_t c = fwd.pred.class_logits.dim(1);
    std::vector<double> scores(n);
    std::vector<int> cats(n);
    for (size_t i = 0; i < n; ++i) {
      scores[i] = double(fwd.pred.scores.data()[i]);
      const T* row = fwd.pred.class_logits.data() + i * c;
      size_t best = 0;
      for (size_t j = 1; j < c; ++j) {
        if (row[j] > row[best]) best = j;
      }
      cats[i] = int(best);
    }
    if (!state.initialized) {
      state.track_ids.resize(n);
      for (size_t i = 0; i < n; ++i) state.track_ids[i] = int64_t(i);
      state.next_free_id = int64_t(n);
      state.initialized = true;
    } else {
      std::vector<double> sims;
      const auto perm = associate_kernels(state.keyframe_kernels, kernels,
                                          &sims);
      std::vector<int64_t> new_ids(n);
      for (size_t j = 0; j < n; ++j) {
        if (cfg_.strict_new_tracks && sims[j] < cfg_.tau_new) {
          new_ids[j] = state.next_free_id++;
        } else {
          new_ids[j] = state.track_ids[perm[j]];
        }
      }
      state.track_ids = std::move(new_ids);
    }
    state.keyframe_kernels = kernels;
    state.keyframe_scores = std::move(scores);
    state.keyframe_categories = std::move(cats);
    mask_logits = fwd.mask_logits;
  } else {
    auto feats = net_->forward_features(frame, nullptr);
    mask_logits = segment<T>(state.keyframe_kernels, feats.x_mask, nullptr);
  }

  TrackedFrameResult result;
  result.frame_index = state.frames_processed;
  const size_t n = mask_logits.dim(0);
  const size_t h = mask_logits.dim(1), w = mask_logits.dim(2);
  for (size_t i = 0; i < n; ++i) {
    InstanceResult inst;
    inst.track_id = state.track_ids[i];
    inst.category = state.keyframe_categories[i];
    inst.score = state.keyframe_scores[i];
    inst.h = h;
    inst.w = w;
    inst.mask.resize(h * w);
    inst.logits.resize(h * w);
    const T* row = mask_logits.data() + i * h * w;
    for (size_t p = 0; p < h * w; ++p) {
      inst.mask[p] = row[p] > T(0) ? 1 : 0;  // sigmoid > 0.5
      inst.logits[p] = double(row[p]);
    }
    result.instances.push_back(std::move(inst));
  }
  state.frames_since_keyframe =
      (state.frames_since_keyframe + 1) % cfg_.reuse_interval;
  ++state.frames_processed;
  return filter_predictions(result, cfg_.score_threshold);
}

template <typename T>
typename Tracker<T>::SequenceOut Tracker<T>::run_sequence(
    const std::vector<Tensor<T>>& frames) const {
  if (frames.empty()) {
    throw ArgumentError("run_sequence: empty frame list");
  }
  for (const auto& f : frames) {
    if (!same_shape(f, frames[0])) {
      throw ShapeError(strfmt("run_sequence: frame shape %s differs from %s",
                              shape_str(f.shape()).c_str(),
                              shape_str(frames[0].shape()).c_str()));
    }
  }
  SequenceOut out;
  const uint64_t invocations_before = net_->decoder_invocations();
  for (const auto& frame : frames) {
    const bool keyframe = out.final_state.frames_since_keyframe == 0;
    const auto t0 = std::chrono::steady_clock::now();
    flops::Scope scope;
    out.results.push_back(process_frame(frame, out.final_state));
    const uint64_t f = scope.elapsed();
    const double ms =
        std::chrono::duration<double, std::milli>(
            std::chrono::steady_clock::now() - t0)
            .count();
    out.stats.per_frame_flops.push_back(f);
    out.stats.per_frame_ms.push_back(ms);
    out.stats.is_keyframe.push_back(keyframe ? 1 : 0);
    if (keyframe) {
      out.stats.keyframe_flops += f;
      ++out.stats.keyframes;
    } else {
      out.stats.nonkeyframe_flops += f;
      ++out.stats.nonkeyframes;
    }
  }
  out.stats.decoder_invocations =
      net_->decoder_invocations() - invocations_before;
  return out;
}

template std::vector<size_t> associate_kernels(const Tensor<float>&,
                                               const Tensor<float>&,
                                               std::vector<double>*);
template std::vector<size_t> associate_kernels(const Tensor<double>&,
                                               const Tensor<double>&,
                                               std::vector<double>*);
template class Tracker<float>;
template class Tracker<double>;

}  // namespace kv

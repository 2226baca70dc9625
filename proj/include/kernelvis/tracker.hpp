#pragma once

#include <cstdint>
#include <vector>

#include "kernelvis/network.hpp"
#include "kernelvis/rle.hpp"

namespace kv {

struct TrackerConfig {
  size_t reuse_interval = 3;     // T: keyframe every T frames
  double score_threshold = 0.4;  // output filter
  double tau_new = 0.1;          // strict mode: mint a new id below this
  bool strict_new_tracks = false;
};

// Carried across frames of one sequence: the last keyframe's kernels, scores
// and categories, stable track ids, and the position within the reuse clip.
template <typename T>
struct TrackState {
  Tensor<T> keyframe_kernels;  // [n, d_k]
  std::vector<double> keyframe_scores;
  std::vector<int> keyframe_categories;
  std::vector<int64_t> track_ids;
  size_t frames_since_keyframe = 0;  // always in [0, T)
  int64_t next_free_id = 0;
  size_t frames_processed = 0;
  bool initialized = false;
};

// Cosine-similarity kernel association between consecutive keyframes.
// Returns perm with perm[j] = index of the prev kernel matched to curr row j
// (maximum total similarity, injective). similarity_out, when given, receives
// the matched cosine similarities per curr row.
template <typename T>
std::vector<size_t> associate_kernels(const Tensor<T>& prev,
                                      const Tensor<T>& curr,
                                      std::vector<double>* similarity_out =
                                          nullptr);

// Pure per-instance score thresholding (score > threshold); NMS-free.
TrackedFrameResult filter_predictions(const TrackedFrameResult& result,
                                      double threshold);

// Online tracker: keyframes run the full decoder and associate kernels;
// the T-1 frames after a keyframe reuse its kernels (M = K_key . X_mask).
template <typename T>
class Tracker {
 public:
  Tracker(const Network<T>& net, TrackerConfig cfg);

  TrackedFrameResult process_frame(const Tensor<T>& frame,
                                   TrackState<T>& state) const;

  struct SequenceStats {
    uint64_t decoder_invocations = 0;
    uint64_t keyframe_flops = 0;
    uint64_t nonkeyframe_flops = 0;
    size_t keyframes = 0;
    size_t nonkeyframes = 0;
    std::vector<uint64_t> per_frame_flops;
    std::vector<double> per_frame_ms;
    std::vector<uint8_t> is_keyframe;
  };

  struct SequenceOut {
    std::vector<TrackedFrameResult> results;
    TrackState<T> final_state;
    SequenceStats stats;
  };

  SequenceOut run_sequence(const std::vector<Tensor<T>>& frames) const;

  const TrackerConfig& config() const { return cfg_; }

 private:
  const Network<T>* net_;
  TrackerConfig cfg_;
};

}  // namespace kv

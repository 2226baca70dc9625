#pragma once

#include <vector>

#include "kernelvis/losses.hpp"
#include "kernelvis/rle.hpp"

namespace kv {

struct EvalReport {
  double mean_iou = 0.0;           // matched pairs (IoU >= 0.5) only
  double track_consistency = 0.0;  // gt tracks whose predicted id never switches
  double ap_lite = 0.0;            // 11-point AP at IoU 0.5
  size_t misses = 0;
  size_t false_positives = 0;
  size_t matched = 0;
};

// Per-frame Hungarian matching on mask IoU; a pair counts when IoU >= 0.5.
template <typename T>
EvalReport evaluate_clip(const std::vector<TrackedFrameResult>& pred,
                         const std::vector<GroundTruthFrame<T>>& gt);

// Pools matches and detection ranking across clips.
template <typename T>
EvalReport evaluate_clips(
    const std::vector<std::vector<TrackedFrameResult>>& preds,
    const std::vector<std::vector<GroundTruthFrame<T>>>& gts);

}  // namespace kv

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "kernelvis/network.hpp"

namespace kv {

// Ground truth for one frame: binary masks at stride 8 plus category ids and
// (in video mode) persistent track ids.
template <typename T>
struct GroundTruthFrame {
  std::vector<Tensor<T>> masks;  // each [h8, w8], values in {0, 1}
  std::vector<int> categories;
  std::vector<int64_t> track_ids;  // empty in image mode

  size_t size() const { return masks.size(); }
  bool has_track_ids() const {
    return !masks.empty() && track_ids.size() == masks.size();
  }
};

// Injective query<->gt assignment; length min(N, G).
struct Assignment {
  std::vector<std::pair<size_t, size_t>> pairs;  // (query, gt), by query
  std::vector<size_t> unmatched_queries;
};

// Exact minimum-cost rectangular assignment (Kuhn-Munkres with potentials).
// cost is row-major [n_rows x n_cols]; throws ArgumentError on non-finite
// entries.
Assignment hungarian_match(const std::vector<double>& cost, size_t n_rows,
                           size_t n_cols);

struct LossWeights {
  double lambda_cls = 2.0;
  double lambda_mask = 2.0;
  double lambda_obj = 1.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double cost_alpha = 0.8;  // class-probability exponent in the matching cost
  double cost_beta = 0.8;   // dice-similarity exponent
};

// cost[i][j] = -(p_i(c_j))^alpha * Dice(m_i, g_j)^beta; empty when G == 0
template <typename T>
std::vector<double> matching_cost(const InstancePrediction<T>& pred,
                                  const Tensor<T>& mask_logits,
                                  const GroundTruthFrame<T>& gt,
                                  const LossWeights& w);

template <typename T>
Assignment match_predictions(const InstancePrediction<T>& pred,
                             const Tensor<T>& mask_logits,
                             const GroundTruthFrame<T>& gt,
                             const LossWeights& w);

// sigmoid focal loss over all (query, class) cells, normalized by matched
// count (floor 1)
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& class_logits, const Assignment& assign,
                     const GroundTruthFrame<T>& gt, const LossWeights& w,
                     Tape<T>* tape = nullptr);

// per-pair ops on a post-sigmoid mask
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred_prob, const Tensor<T>& gt_mask,
                    Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> bce_mask_loss(const Tensor<T>& pred_prob, const Tensor<T>& gt_mask,
                        Tape<T>* tape = nullptr);

// L_mask = sum over matched pairs of (dice + bce), / max(1, matched);
// computed from logits for stability
template <typename T>
Tensor<T> mask_loss(const Tensor<T>& mask_logits, const Assignment& assign,
                    const GroundTruthFrame<T>& gt, Tape<T>* tape = nullptr);

// IoU of the 0.5-binarized predicted mask with its matched gt (0 unmatched)
template <typename T>
std::vector<T> objectness_targets(const Tensor<T>& mask_logits,
                                  const Assignment& assign,
                                  const GroundTruthFrame<T>& gt);

template <typename T>
Tensor<T> objectness_loss(const Tensor<T>& objectness,
                          const std::vector<T>& targets,
                          Tape<T>* tape = nullptr);

template <typename T>
struct LossBreakdown {
  Tensor<T> total, cls, mask, obj;
  Assignment assignment;
};

// L = lambda_c * L_cls + lambda_mask * L_mask + lambda_obj * L_obj.
// fixed_assignment / fixed_obj_targets freeze the non-differentiable pieces
// (used by the finite-difference checks).
template <typename T>
LossBreakdown<T> total_loss(const InstancePrediction<T>& pred,
                            const Tensor<T>& mask_logits,
                            const GroundTruthFrame<T>& gt,
                            const LossWeights& w, Tape<T>* tape = nullptr,
                            const Assignment* fixed_assignment = nullptr,
                            const std::vector<T>* fixed_obj_targets = nullptr);

template <typename T>
struct TemporalPassingLoss {
  Tensor<T> passing_mask_loss;
  Assignment assignment;  // frame t+delta assignment the targets came from
};

// Runs frame t through the first decoder stage, feeds those queries into
// frame t+delta's second stage, and supervises the resulting masks with
// frame t+delta's targets. Requires a two-stage decoder mode and track-linked
// ground truth.
template <typename T>
TemporalPassingLoss<T> temporal_query_passing_loss(
    const Network<T>& net, const Tensor<T>& frame_t, const Tensor<T>& frame_td,
    const GroundTruthFrame<T>& gt_td, const LossWeights& w,
    Tape<T>* tape = nullptr);

}  // namespace kv

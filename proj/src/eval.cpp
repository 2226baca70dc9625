#include "kernelvis/eval.hpp"

#include <algorithm>
#include <map>

namespace kv {

namespace {

struct Detection {
  double score;
  bool tp;
};

template <typename T>
double mask_iou(const InstanceResult& pred, const Tensor<T>& gt) {
  size_t inter = 0, uni = 0;
  const T* g = gt.data();
  for (size_t p = 0; p < pred.mask.size(); ++p) {
    const bool pm = pred.mask[p] != 0;
    const bool gm = g[p] > T(0.5);
    inter += pm && gm;
    uni += pm || gm;
  }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

struct Accum {
  std::vector<Detection> detections;
  double iou_sum = 0.0;
  size_t matched = 0;
  size_t misses = 0;
  size_t false_positives = 0;
  size_t total_gt = 0;
  size_t total_tracks = 0;
  size_t consistent_tracks = 0;
};

template <typename T>
void accumulate_clip(const std::vector<TrackedFrameResult>& pred,
                     const std::vector<GroundTruthFrame<T>>& gt, Accum& acc) {
  if (pred.size() != gt.size()) {
    throw ArgumentError(strfmt("evaluate_clip: %zu predicted frames vs %zu "
                               "ground-truth frames",
                               pred.size(), gt.size()));
  }
  // per gt track: predicted ids seen at matched frames
  std::map<int64_t, std::vector<int64_t>> track_matches;
  for (size_t f = 0; f < gt.size(); ++f) {
    for (int64_t tid : gt[f].track_ids) track_matches[tid];  // register track
  }
  for (size_t f = 0; f < pred.size(); ++f) {
    const auto& instances = pred[f].instances;
    const size_t np = instances.size();
    const size_t ng = gt[f].size();
    acc.total_gt += ng;
    for (size_t i = 0; i < np; ++i) {
      if (ng > 0 && instances[i].mask.size() != gt[f].masks[0].size()) {
        throw ArgumentError("evaluate_clip: prediction grid does not match "
                            "ground truth");
      }
    }
    std::vector<double> iou(np * ng, 0.0);
    std::vector<double> cost(np * ng, 0.0);
    for (size_t i = 0; i < np; ++i) {
      for (size_t j = 0; j < ng; ++j) {
        iou[i * ng + j] = mask_iou(instances[i], gt[f].masks[j]);
        cost[i * ng + j] = -iou[i * ng + j];
      }
    }
    const Assignment assign = hungarian_match(cost, np, ng);
    std::vector<char> pred_matched(np, 0), gt_matched(ng, 0);
    for (const auto& [pi, gj] : assign.pairs) {
      if (iou[pi * ng + gj] >= 0.5) {
        pred_matched[pi] = 1;
        gt_matched[gj] = 1;
        acc.iou_sum += iou[pi * ng + gj];
        ++acc.matched;
        track_matches[gt[f].track_ids[gj]].push_back(instances[pi].track_id);
      }
    }
    for (size_t i = 0; i < np; ++i) {
      acc.detections.push_back({instances[i].score, pred_matched[i] != 0});
      if (!pred_matched[i]) ++acc.false_positives;
    }
    for (size_t j = 0; j < ng; ++j) {
      if (!gt_matched[j]) ++acc.misses;
    }
  }
  for (const auto& [tid, ids] : track_matches) {
    ++acc.total_tracks;
    if (!ids.empty() &&
        std::all_of(ids.begin(), ids.end(),
                    [&](int64_t id) { return id == ids.front(); })) {
      ++acc.consistent_tracks;
    }
  }
}

EvalReport finalize(Accum& acc) {
  EvalReport rep;
  rep.matched = acc.matched;
  rep.misses = acc.misses;
  rep.false_positives = acc.false_positives;
  rep.mean_iou = acc.matched ? acc.iou_sum / double(acc.matched) : 0.0;
  rep.track_consistency =
      acc.total_tracks ? double(acc.consistent_tracks) / double(acc.total_tracks)
                       : 1.0;
  if (acc.total_gt == 0) {
    rep.ap_lite = acc.detections.empty() ? 1.0 : 0.0;
    return rep;
  }
  // rank pooled detections by score (stable: input order breaks ties)
  std::stable_sort(acc.detections.begin(), acc.detections.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.score > b.score;
                   });
  std::vector<double> precision, recall;
  size_t tp = 0;
  for (size_t i = 0; i < acc.detections.size(); ++i) {
    if (acc.detections[i].tp) ++tp;
    precision.push_back(double(tp) / double(i + 1));
    recall.push_back(double(tp) / double(acc.total_gt));
  }
  double ap = 0.0;
  for (int r = 0; r <= 10; ++r) {
    const double level = r / 10.0;
    double best = 0.0;
    for (size_t i = 0; i < recall.size(); ++i) {
      if (recall[i] >= level && precision[i] > best) best = precision[i];
    }
    ap += best;
  }
  rep.ap_lite = ap / 11.0;
  return rep;
}

}  // namespace

template <typename T>
EvalReport evaluate_clip(const std::vector<TrackedFrameResult>& pred,
                         const std::vector<GroundTruthFrame<T>>& gt) {
  Accum acc;
  accumulate_clip(pred, gt, acc);
  return finalize(acc);
}

template <typename T>
EvalReport evaluate_clips(
    const std::vector<std::vector<TrackedFrameResult>>& preds,
    const std::vector<std::vector<GroundTruthFrame<T>>>& gts) {
  if (preds.size() != gts.size()) {
    throw ArgumentError("evaluate_clips: clip count mismatch");
  }
  Accum acc;
  for (size_t c = 0; c < preds.size(); ++c) {
    accumulate_clip(preds[c], gts[c], acc);
  }
  return finalize(acc);
}

template EvalReport evaluate_clip(const std::vector<TrackedFrameResult>&,
                                  const std::vector<GroundTruthFrame<float>>&);
template EvalReport evaluate_clip(const std::vector<TrackedFrameResult>&,
                                  const std::vector<GroundTruthFrame<double>>&);
template EvalReport evaluate_clips(
    const std::vector<std::vector<TrackedFrameResult>>&,
    const std::vector<std::vector<GroundTruthFrame<float>>>&);
template EvalReport evaluate_clips(
    const std::vector<std::vector<TrackedFrameResult>>&,
    const std::vector<std::vector<GroundTruthFrame<double>>>&);

}  // namespace kv

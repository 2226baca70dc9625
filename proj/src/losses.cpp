#include "kernelvis/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kv {

namespace {

constexpr double kDiceEps = 1e-6;

// Shortest-augmenting-path Hungarian for n <= m; returns row -> col.
std::vector<int> solve_rect(const std::vector<double>& cost, int n, int m) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  }
  return row_to_col;
}

template <typename T>
double sigmoid_d(T x) {
  return 1.0 / (1.0 + std::exp(-double(x)));
}

}  // namespace

Assignment hungarian_match(const std::vector<double>& cost, size_t n_rows,
                           size_t n_cols) {
  if (cost.size() != n_rows * n_cols) {
    throw ArgumentError(strfmt("hungarian_match: cost has %zu entries, "
                               "expected %zu x %zu",
                               cost.size(), n_rows, n_cols));
  }
  for (double c : cost) {
    if (!std::isfinite(c)) {
      throw ArgumentError("hungarian_match: cost contains non-finite values");
    }
  }
  Assignment out;
  if (n_rows == 0 || n_cols == 0) {
    for (size_t q = 0; q < n_rows; ++q) out.unmatched_queries.push_back(q);
    return out;
  }
  std::vector<char> matched(n_rows, 0);
  if (n_rows <= n_cols) {
    const auto rc = solve_rect(cost, int(n_rows), int(n_cols));
    for (size_t i = 0; i < n_rows; ++i) {
      if (rc[i] >= 0) {
        out.pairs.emplace_back(i, size_t(rc[i]));
        matched[i] = 1;
      }
    }
  } else {
    std::vector<double> t(n_cols * n_rows);
    for (size_t i = 0; i < n_rows; ++i) {
      for (size_t j = 0; j < n_cols; ++j) t[j * n_rows + i] = cost[i * n_cols + j];
    }
    const auto cr = solve_rect(t, int(n_cols), int(n_rows));
    for (size_t j = 0; j < n_cols; ++j) {
      if (cr[j] >= 0) {
        out.pairs.emplace_back(size_t(cr[j]), j);
        matched[size_t(cr[j])] = 1;
      }
    }
    std::sort(out.pairs.begin(), out.pairs.end());
  }
  for (size_t q = 0; q < n_rows; ++q) {
    if (!matched[q]) out.unmatched_queries.push_back(q);
  }
  return out;
}

template <typename T>
std::vector<double> matching_cost(const InstancePrediction<T>& pred,
                                  const Tensor<T>& mask_logits,
                                  const GroundTruthFrame<T>& gt,
                                  const LossWeights& w) {
  const size_t n = pred.class_logits.dim(0);
  const size_t g = gt.size();
  std::vector<double> cost(n * g, 0.0);
  if (g == 0) return cost;
  const size_t hw = mask_logits.dim(1) * mask_logits.dim(2);
  // per-query sigmoid masks and their sums
  std::vector<double> probs(n * hw);
  std::vector<double> psum(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t p = 0; p < hw; ++p) {
      const double v = sigmoid_d(mask_logits.data()[i * hw + p]);
      probs[i * hw + p] = v;
      psum[i] += v;
    }
  }
  std::vector<double> gsum(g, 0.0);
  for (size_t j = 0; j < g; ++j) {
    if (gt.masks[j].size() != hw) {
      throw ShapeError(strfmt("matching_cost: gt mask %s does not match "
                              "prediction grid %s",
                              shape_str(gt.masks[j].shape()).c_str(),
                              shape_str(mask_logits.shape()).c_str()));
    }
    for (size_t p = 0; p < hw; ++p) gsum[j] += double(gt.masks[j].data()[p]);
  }
  const size_t c = pred.class_logits.dim(1);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < g; ++j) {
      const int cat = gt.categories[j];
      if (cat < 0 || size_t(cat) >= c) {
        throw ArgumentError(strfmt("matching_cost: category %d out of range "
                                   "%zu",
                                   cat, c));
      }
      const double p_cls = sigmoid_d(pred.class_logits.data()[i * c + cat]);
      double inter = 0.0;
      const double* pi = probs.data() + i * hw;
      const T* gj = gt.masks[j].data();
      for (size_t p = 0; p < hw; ++p) inter += pi[p] * double(gj[p]);
      const double dice =
          (2.0 * inter + kDiceEps) / (psum[i] + gsum[j] + kDiceEps);
      cost[i * g + j] =
          -std::pow(p_cls, w.cost_alpha) * std::pow(dice, w.cost_beta);
    }
  }
  return cost;
}

template <typename T>
Assignment match_predictions(const InstancePrediction<T>& pred,
                             const Tensor<T>& mask_logits,
                             const GroundTruthFrame<T>& gt,
                             const LossWeights& w) {
  return hungarian_match(matching_cost(pred, mask_logits, gt, w),
                         pred.class_logits.dim(0), gt.size());
}

template <typename T>
Tensor<T> focal_loss(const Tensor<T>& class_logits, const Assignment& assign,
                     const GroundTruthFrame<T>& gt, const LossWeights& w,
                     Tape<T>* tape) {
  const size_t n = class_logits.dim(0), c = class_logits.dim(1);
  Tensor<T> targets = Tensor<T>::zeros({n, c});
  for (const auto& [qi, gi] : assign.pairs) {
    targets.data()[qi * c + gt.categories[gi]] = T(1);
  }
  const T alpha = T(w.focal_alpha);
  const T gamma = T(w.focal_gamma);
  // positives: alpha * (1-p)^gamma * -log p      = alpha * e^{-g*sp(x)} * sp(-x)
  // negatives: (1-alpha) * p^gamma * -log(1-p)   = (1-alpha) * e^{-g*sp(-x)} * sp(x)
  Tensor<T> sp_pos = softplus(class_logits, tape);
  Tensor<T> sp_neg = softplus(scale(class_logits, T(-1), tape), tape);
  Tensor<T> pos =
      mul(exp_t(scale(sp_pos, -gamma, tape), tape), sp_neg, tape);
  Tensor<T> neg =
      mul(exp_t(scale(sp_neg, -gamma, tape), tape), sp_pos, tape);
  Tensor<T> ones = Tensor<T>::full({n, c}, T(1));
  Tensor<T> elems =
      add(mul(targets, scale(pos, alpha, tape), tape),
          mul(sub(ones, targets, tape), scale(neg, T(1) - alpha, tape), tape),
          tape);
  const T norm = T(1) / T(std::max<size_t>(assign.pairs.size(), 1));
  return scale(sum(elems, tape), norm, tape);
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred_prob, const Tensor<T>& gt_mask,
                    Tape<T>* tape) {
  if (!same_shape(pred_prob, gt_mask)) {
    throw ShapeError(strfmt("dice_loss: shape mismatch %s vs %s",
                            shape_str(pred_prob.shape()).c_str(),
                            shape_str(gt_mask.shape()).c_str()));
  }
  Tensor<T> inter = sum(mul(pred_prob, gt_mask, tape), tape);
  Tensor<T> denom =
      add(sum(pred_prob, tape), sum(gt_mask, tape), tape);
  Tensor<T> ratio = div(add_scalar(scale(inter, T(2), tape), T(kDiceEps), tape),
                        add_scalar(denom, T(kDiceEps), tape), tape);
  return add_scalar(scale(ratio, T(-1), tape), T(1), tape);
}

template <typename T>
Tensor<T> bce_mask_loss(const Tensor<T>& pred_prob, const Tensor<T>& gt_mask,
                        Tape<T>* tape) {
  if (!same_shape(pred_prob, gt_mask)) {
    throw ShapeError(strfmt("bce_mask_loss: shape mismatch %s vs %s",
                            shape_str(pred_prob.shape()).c_str(),
                            shape_str(gt_mask.shape()).c_str()));
  }
  Tensor<T> ones = Tensor<T>::full(pred_prob.shape(), T(1));
  Tensor<T> pos = mul(gt_mask, log_t(pred_prob, tape), tape);
  Tensor<T> neg = mul(sub(ones, gt_mask, tape),
                      log_t(sub(ones, pred_prob, tape), tape), tape);
  return scale(mean(add(pos, neg, tape), tape), T(-1), tape);
}

namespace {

// logits-based dice + bce for one matched pair; numerically safe at any logit
template <typename T>
Tensor<T> pair_mask_loss(const Tensor<T>& logits_row, const Tensor<T>& gt_mask,
                         Tape<T>* tape) {
  Tensor<T> prob = sigmoid(logits_row, tape);
  Tensor<T> dice = dice_loss(prob, gt_mask, tape);
  // bce with logits: mean(softplus(x) - x*g)
  Tensor<T> bce = mean(
      sub(softplus(logits_row, tape), mul(logits_row, gt_mask, tape), tape),
      tape);
  return add(dice, bce, tape);
}

}  // namespace

template <typename T>
Tensor<T> mask_loss(const Tensor<T>& mask_logits, const Assignment& assign,
                    const GroundTruthFrame<T>& gt, Tape<T>* tape) {
  const size_t h = mask_logits.dim(1), w = mask_logits.dim(2);
  Tensor<T> acc = Tensor<T>::zeros({1});
  for (const auto& [qi, gi] : assign.pairs) {
    Tensor<T> row = reshape(gather_rows(mask_logits, {qi}, tape), {h, w}, tape);
    acc = add(acc, pair_mask_loss(row, gt.masks[gi], tape), tape);
  }
  const T norm = T(1) / T(std::max<size_t>(assign.pairs.size(), 1));
  return scale(acc, norm, tape);
}

template <typename T>
std::vector<T> objectness_targets(const Tensor<T>& mask_logits,
                                  const Assignment& assign,
                                  const GroundTruthFrame<T>& gt) {
  const size_t n = mask_logits.dim(0);
  const size_t hw = mask_logits.dim(1) * mask_logits.dim(2);
  std::vector<T> targets(n, T(0));
  for (const auto& [qi, gi] : assign.pairs) {
    const T* row = mask_logits.data() + qi * hw;
    const T* gmask = gt.masks[gi].data();
    size_t inter = 0, uni = 0;
    for (size_t p = 0; p < hw; ++p) {
      const bool pm = row[p] > T(0);  // sigmoid(x) > 0.5  <=>  x > 0
      const bool gm = gmask[p] > T(0.5);
      inter += pm && gm;
      uni += pm || gm;
    }
    targets[qi] = uni == 0 ? T(0) : T(double(inter) / double(uni));
  }
  return targets;
}

template <typename T>
Tensor<T> objectness_loss(const Tensor<T>& objectness,
                          const std::vector<T>& targets, Tape<T>* tape) {
  const size_t n = objectness.dim(0);
  if (targets.size() != n) {
    throw ArgumentError(strfmt("objectness_loss: %zu targets for %zu queries",
                               targets.size(), n));
  }
  Tensor<T> t = Tensor<T>::from({n, 1}, std::vector<T>(targets));
  Tensor<T> elems =
      sub(softplus(objectness, tape), mul(objectness, t, tape), tape);
  return mean(elems, tape);
}

template <typename T>
LossBreakdown<T> total_loss(const InstancePrediction<T>& pred,
                            const Tensor<T>& mask_logits,
                            const GroundTruthFrame<T>& gt,
                            const LossWeights& w, Tape<T>* tape,
                            const Assignment* fixed_assignment,
                            const std::vector<T>* fixed_obj_targets) {
  LossBreakdown<T> out;
  out.assignment = fixed_assignment
                       ? *fixed_assignment
                       : match_predictions(pred, mask_logits, gt, w);
  out.cls = focal_loss(pred.class_logits, out.assignment, gt, w, tape);
  out.mask = mask_loss(mask_logits, out.assignment, gt, tape);
  const std::vector<T> targets =
      fixed_obj_targets
          ? *fixed_obj_targets
          : objectness_targets(mask_logits, out.assignment, gt);
  out.obj = objectness_loss(pred.objectness, targets, tape);
  out.total = add(add(scale(out.cls, T(w.lambda_cls), tape),
                      scale(out.mask, T(w.lambda_mask), tape), tape),
                  scale(out.obj, T(w.lambda_obj), tape), tape);
  return out;
}

template <typename T>
TemporalPassingLoss<T> temporal_query_passing_loss(
    const Network<T>& net, const Tensor<T>& frame_t, const Tensor<T>& frame_td,
    const GroundTruthFrame<T>& gt_td, const LossWeights& w, Tape<T>* tape) {
  if (!gt_td.has_track_ids()) {
    throw ArgumentError(
        "temporal_query_passing_loss: ground truth lacks track linkage");
  }
  if (!net.decoder().has_stage2()) {
    throw ArgumentError(
        "temporal_query_passing_loss: decoder mode has a single stage");
  }
  auto fwd_td = net.forward_full(frame_td, tape);
  Assignment assign =
      match_predictions(fwd_td.pred, fwd_td.mask_logits, gt_td, w);
  auto feats_t = net.forward_features(frame_t, tape);
  Tensor<T> q_pass = net.stage1_queries(feats_t, tape);
  Tensor<T> q_final = net.stage2_from(q_pass, fwd_td.feats, tape);
  Tensor<T> kernels = net.kernels_only(q_final, tape);
  Tensor<T> masks = segment(kernels, fwd_td.feats.x_mask, tape);
  TemporalPassingLoss<T> out;
  out.assignment = assign;
  out.passing_mask_loss = mask_loss(masks, assign, gt_td, tape);
  return out;
}

#define KV_INSTANTIATE_LOSSES(T)                                               \
  template std::vector<double> matching_cost(const InstancePrediction<T>&,    \
                                             const Tensor<T>&,                \
                                             const GroundTruthFrame<T>&,      \
                                             const LossWeights&);             \
  template Assignment match_predictions(const InstancePrediction<T>&,         \
                                        const Tensor<T>&,                     \
                                        const GroundTruthFrame<T>&,           \
                                        const LossWeights&);                  \
  template Tensor<T> focal_loss(const Tensor<T>&, const Assignment&,          \
                                const GroundTruthFrame<T>&,                   \
                                const LossWeights&, Tape<T>*);                \
  template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&, Tape<T>*); \
  template Tensor<T> bce_mask_loss(const Tensor<T>&, const Tensor<T>&,        \
                                   Tape<T>*);                                 \
  template Tensor<T> mask_loss(const Tensor<T>&, const Assignment&,           \
                               const GroundTruthFrame<T>&, Tape<T>*);         \
  template std::vector<T> objectness_targets(const Tensor<T>&,                \
                                             const Assignment&,               \
                                             const GroundTruthFrame<T>&);     \
  template Tensor<T> objectness_loss(const Tensor<T>&, const std::vector<T>&, \
                                     Tape<T>*);                               \
  template LossBreakdown<T> total_loss(const InstancePrediction<T>&,          \
                                       const Tensor<T>&,                      \
                                       const GroundTruthFrame<T>&,            \
                                       const LossWeights&, Tape<T>*,          \
                                       const Assignment*,                     \
                                       const std::vector<T>*);               \
  template TemporalPassingLoss<T> temporal_query_passing_loss(                \
      const Network<T>&, const Tensor<T>&, const Tensor<T>&,                  \
      const GroundTruthFrame<T>&, const LossWeights&, Tape<T>*);

KV_INSTANTIATE_LOSSES(float)
KV_INSTANTIATE_LOSSES(double)

}  // namespace kv

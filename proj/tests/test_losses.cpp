// Bipartite matching and the training objective against closed-form values
// and scalar-loop oracles.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "kernelvis/losses.hpp"

using namespace kv;

namespace {

Tensor<double> random_map(Shape shape, uint64_t seed, double lo = -1,
                          double hi = 1) {
  Rng rng(seed);
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// exhaustive injective-assignment minimum (no pruning: costs may be
// negative); returns the arg-min row->col mapping
std::vector<size_t> brute_force_min(const std::vector<double>& cost, size_t n,
                                    size_t m) {
  double best = 1e300;
  std::vector<size_t> best_cols, cols(n);
  std::vector<char> used(m, 0);
  std::function<void(size_t, double)> rec = [&](size_t row, double acc) {
    if (row == n) {
      if (acc < best) {
        best = acc;
        best_cols = cols;
      }
      return;
    }
    for (size_t c = 0; c < m; ++c) {
      if (used[c]) continue;
      used[c] = 1;
      cols[row] = c;
      rec(row + 1, acc + cost[row * m + c]);
      used[c] = 0;
    }
  };
  rec(0, 0.0);
  return best_cols;
}

double assignment_cost(const Assignment& a, const std::vector<double>& cost,
                       size_t g) {
  double s = 0;
  for (const auto& [q, j] : a.pairs) s += cost[q * g + j];
  return s;
}

GroundTruthFrame<double> make_gt(size_t g, size_t h, size_t w, uint64_t seed) {
  GroundTruthFrame<double> gt;
  Rng rng(seed);
  for (size_t i = 0; i < g; ++i) {
    Tensor<double> m = Tensor<double>::zeros({h, w});
    for (size_t p = 0; p < h * w; ++p) {
      m.data()[p] = rng.uniform() < 0.35 ? 1.0 : 0.0;
    }
    gt.masks.push_back(m);
    gt.categories.push_back(rng.uniform_int(0, 2));
    gt.track_ids.push_back(int64_t(i));
  }
  return gt;
}

InstancePrediction<double> make_pred(size_t n, size_t c, size_t dk,
                                     uint64_t seed) {
  InstancePrediction<double> pred;
  pred.class_logits = random_map({n, c}, seed, -2, 2);
  pred.kernels = random_map({n, dk}, seed + 1);
  pred.objectness = random_map({n, 1}, seed + 2, -2, 2);
  pred.scores = Tensor<double>::zeros({n});
  return pred;
}

}  // namespace

TEST_CASE("hungarian: diagonal-friendly and 1xG cases") {
  std::vector<double> cost = {0, 1, 1, 1, 0, 1, 1, 1, 0};
  Assignment a = hungarian_match(cost, 3, 3);
  REQUIRE(a.pairs.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(a.pairs[i].first == i);
    CHECK(a.pairs[i].second == i);
  }
  CHECK(assignment_cost(a, cost, 3) == 0.0);

  std::vector<double> row = {3.0, -1.0, 2.0, 0.5};
  Assignment b = hungarian_match(row, 1, 4);
  REQUIRE(b.pairs.size() == 1);
  CHECK(b.pairs[0].second == 1);  // argmin column
}

TEST_CASE("hungarian equals brute force on random rectangular matrices") {
  Rng rng(1);
  for (int iter = 0; iter < 300; ++iter) {
    const size_t n = 1 + size_t(rng.uniform_int(0, 6));
    const size_t m = 1 + size_t(rng.uniform_int(0, 6));
    std::vector<double> cost(n * m);
    for (auto& c : cost) c = rng.uniform(-5, 5);
    Assignment a = hungarian_match(cost, n, m);
    CHECK(a.pairs.size() == std::min(n, m));
    const double total = assignment_cost(a, cost, m);
    Assignment oracle;
    if (n <= m) {
      const auto cols = brute_force_min(cost, n, m);
      for (size_t i = 0; i < n; ++i) oracle.pairs.emplace_back(i, cols[i]);
    } else {
      std::vector<double> t(m * n);
      for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < m; ++j) t[j * n + i] = cost[i * m + j];
      }
      const auto rows = brute_force_min(t, m, n);
      for (size_t j = 0; j < m; ++j) oracle.pairs.emplace_back(rows[j], j);
      std::sort(oracle.pairs.begin(), oracle.pairs.end());
    }
    // sum both in the same canonical (query-ascending) order: exact equality
    const double expect = assignment_cost(oracle, cost, m);
    CHECK(total == expect);
    // injectivity
    std::vector<char> qs(n, 0), gs(m, 0);
    for (const auto& [q, g] : a.pairs) {
      CHECK(!qs[q]);
      CHECK(!gs[g]);
      qs[q] = gs[g] = 1;
    }
    CHECK(a.pairs.size() + a.unmatched_queries.size() == n);
  }
}

TEST_CASE("hungarian: constant shift leaves the assignment unchanged") {
  Rng rng(2);
  for (int iter = 0; iter < 50; ++iter) {
    const size_t n = 2 + size_t(rng.uniform_int(0, 4));
    const size_t m = 2 + size_t(rng.uniform_int(0, 4));
    std::vector<double> cost(n * m);
    for (auto& c : cost) c = rng.uniform(-3, 3);
    std::vector<double> shifted = cost;
    const double shift = rng.uniform(-10, 10);
    for (auto& c : shifted) c += shift;
    const Assignment a = hungarian_match(cost, n, m);
    const Assignment b = hungarian_match(shifted, n, m);
    CHECK(a.pairs == b.pairs);
  }
}

TEST_CASE("hungarian: non-finite costs rejected; empty sides handled") {
  CHECK_THROWS_AS(hungarian_match({0.0, std::nan("")}, 1, 2), ArgumentError);
  Assignment e = hungarian_match({}, 3, 0);
  CHECK(e.pairs.empty());
  CHECK(e.unmatched_queries == std::vector<size_t>{0, 1, 2});
}

TEST_CASE("matching_cost: limits and formula oracle") {
  const size_t n = 4, g = 2, h = 6, w = 6;
  LossWeights lw;
  GroundTruthFrame<double> gt = make_gt(g, h, w, 3);
  InstancePrediction<double> pred = make_pred(n, 3, 5, 4);

  // near-perfect overlap and confident class approaches -1
  Tensor<double> logits = Tensor<double>::zeros({n, h, w});
  for (size_t p = 0; p < h * w; ++p) {
    logits.data()[p] = gt.masks[0].data()[p] > 0.5 ? 60.0 : -60.0;
  }
  InstancePrediction<double> strong = make_pred(n, 3, 5, 5);
  std::fill_n(strong.class_logits.data(), n * 3, -60.0);
  strong.class_logits.at({0, size_t(gt.categories[0])}) = 60.0;
  const auto cost1 = matching_cost(strong, logits, gt, lw);
  CHECK(cost1[0 * g + 0] == doctest::Approx(-1.0).epsilon(1e-6));

  // zero class probability => cost ~ 0 regardless of mask
  CHECK(std::abs(cost1[1 * g + 0]) < 1e-12);

  // random case vs direct formula evaluation
  Tensor<double> mlogits = random_map({n, h, w}, 6, -2, 2);
  const auto cost = matching_cost(pred, mlogits, gt, lw);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < g; ++j) {
      const double p =
          1.0 / (1.0 + std::exp(-pred.class_logits.at({i, size_t(gt.categories[j])})));
      double inter = 0, ps = 0, gs = 0;
      for (size_t px = 0; px < h * w; ++px) {
        const double mp = 1.0 / (1.0 + std::exp(-mlogits.data()[i * h * w + px]));
        inter += mp * gt.masks[j].data()[px];
        ps += mp;
        gs += gt.masks[j].data()[px];
      }
      const double dice = (2 * inter + 1e-6) / (ps + gs + 1e-6);
      const double expect = -std::pow(p, 0.8) * std::pow(dice, 0.8);
      CHECK(std::abs(cost[i * g + j] - expect) < 1e-7);
    }
  }

  // empty ground truth: every query unmatched
  GroundTruthFrame<double> empty;
  Assignment a = match_predictions(pred, mlogits, empty, lw);
  CHECK(a.pairs.empty());
  CHECK(a.unmatched_queries.size() == n);
}

TEST_CASE("focal loss: closed-form element values and loop oracle") {
  LossWeights lw;
  // single query, single class, matched positive with p ~ 1: loss ~ 0
  {
    GroundTruthFrame<double> gt = make_gt(1, 2, 2, 7);
    gt.categories[0] = 0;
    Tensor<double> logits = Tensor<double>::full({1, 1}, 40.0);
    Assignment a;
    a.pairs = {{0, 0}};
    CHECK(focal_loss(logits, a, gt, lw).item() < 1e-12);
  }
  // logit 0 at a negative: 0.75 * 0.25 * ln 2
  {
    GroundTruthFrame<double> gt;
    Tensor<double> logits = Tensor<double>::zeros({1, 1});
    Assignment a;
    a.unmatched_queries = {0};
    const double expect = 0.75 * 0.25 * std::log(2.0);
    CHECK(focal_loss(logits, a, gt, lw).item() ==
          doctest::Approx(expect).epsilon(1e-9));
    CHECK(expect == doctest::Approx(0.130).epsilon(2e-2));
  }
  // vectorized equals the scalar loop on a random batch
  {
    const size_t n = 6, c = 4;
    GroundTruthFrame<double> gt = make_gt(3, 2, 2, 8);
    gt.categories = {1, 3, 0};
    Tensor<double> logits = random_map({n, c}, 9, -3, 3);
    Assignment a;
    a.pairs = {{0, 0}, {2, 1}, {5, 2}};
    a.unmatched_queries = {1, 3, 4};
    const double got = focal_loss(logits, a, gt, lw).item();
    double expect = 0;
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < c; ++j) {
        bool positive = false;
        for (const auto& [q, gi] : a.pairs) {
          if (q == i && size_t(gt.categories[gi]) == j) positive = true;
        }
        const double x = logits.at({i, j});
        const double p = 1.0 / (1.0 + std::exp(-x));
        if (positive) {
          expect += 0.25 * std::pow(1 - p, 2.0) * -std::log(p);
        } else {
          expect += 0.75 * std::pow(p, 2.0) * -std::log(1 - p);
        }
      }
    }
    expect /= 3.0;
    CHECK(std::abs(got - expect) < 1e-6);
  }
}

TEST_CASE("dice loss: limit cases, range, loop oracle") {
  GroundTruthFrame<double> gt = make_gt(1, 8, 8, 10);
  Tensor<double>& g = gt.masks[0];
  CHECK(dice_loss(g, g).item() < 1e-5);

  Tensor<double> inv = Tensor<double>::zeros({8, 8});
  for (size_t i = 0; i < 64; ++i) inv.data()[i] = 1.0 - g.data()[i];
  CHECK(dice_loss(inv, g).item() == doctest::Approx(1.0).epsilon(1e-5));

  Tensor<double> soft = random_map({8, 8}, 11, 0.01, 0.99);
  double inter = 0, ps = 0, gs = 0;
  for (size_t i = 0; i < 64; ++i) {
    inter += soft.data()[i] * g.data()[i];
    ps += soft.data()[i];
    gs += g.data()[i];
  }
  const double expect = 1.0 - (2 * inter + 1e-6) / (ps + gs + 1e-6);
  CHECK(std::abs(dice_loss(soft, g).item() - expect) < 1e-6);
  CHECK(dice_loss(soft, g).item() >= 0.0);
  CHECK(dice_loss(soft, g).item() <= 1.0 + 1e-5);
  CHECK_THROWS_AS(dice_loss(Tensor<double>::zeros({4, 4}), g), ShapeError);
}

TEST_CASE("bce mask loss matches the per-pixel loop oracle") {
  GroundTruthFrame<double> gt = make_gt(1, 6, 6, 12);
  Tensor<double> prob = random_map({6, 6}, 13, 0.02, 0.98);
  const double got = bce_mask_loss(prob, gt.masks[0]).item();
  double expect = 0;
  for (size_t i = 0; i < 36; ++i) {
    const double p = prob.data()[i], y = gt.masks[0].data()[i];
    expect += -(y * std::log(p) + (1 - y) * std::log(1 - p));
  }
  expect /= 36;
  CHECK(std::abs(got - expect) < 1e-6);
}

TEST_CASE("objectness: IoU targets from a loop oracle; ln2 for unmatched") {
  const size_t n = 3, h = 6, w = 6;
  GroundTruthFrame<double> gt = make_gt(2, h, w, 14);
  Tensor<double> mlogits = random_map({n, h, w}, 15, -2, 2);
  Assignment a;
  a.pairs = {{0, 1}, {2, 0}};
  a.unmatched_queries = {1};
  const auto targets = objectness_targets(mlogits, a, gt);
  for (const auto& [q, j] : a.pairs) {
    size_t inter = 0, uni = 0;
    for (size_t p = 0; p < h * w; ++p) {
      const bool pm = mlogits.data()[q * h * w + p] > 0;
      const bool gm = gt.masks[j].data()[p] > 0.5;
      inter += pm && gm;
      uni += pm || gm;
    }
    const double expect = uni ? double(inter) / double(uni) : 0.0;
    CHECK(targets[q] == expect);  // exact set arithmetic
  }
  CHECK(targets[1] == 0.0);

  // unmatched query with logit 0 contributes ln 2
  Tensor<double> obj = Tensor<double>::zeros({1, 1});
  CHECK(objectness_loss(obj, std::vector<double>{0.0}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // perfect mask with a huge logit drives the loss to 0
  Tensor<double> big = Tensor<double>::full({1, 1}, 50.0);
  CHECK(objectness_loss(big, std::vector<double>{1.0}).item() < 1e-12);
}

TEST_CASE("total loss: weighted combination and GT-order invariance") {
  const size_t n = 6, h = 8, w = 8;
  LossWeights lw;
  GroundTruthFrame<double> gt = make_gt(3, h, w, 16);
  InstancePrediction<double> pred = make_pred(n, 3, 5, 17);
  Tensor<double> mlogits = random_map({n, h, w}, 18, -2, 2);

  auto breakdown = total_loss(pred, mlogits, gt, lw);
  const double combo = 2.0 * breakdown.cls.item() +
                       2.0 * breakdown.mask.item() + breakdown.obj.item();
  CHECK(std::abs(breakdown.total.item() - combo) < 1e-9);
  CHECK(breakdown.total.item() >= 0.0);

  // shuffled ground truth: same total within 1e-9, same matched pair set
  GroundTruthFrame<double> shuffled;
  const std::vector<size_t> order = {2, 0, 1};
  for (size_t j : order) {
    shuffled.masks.push_back(gt.masks[j]);
    shuffled.categories.push_back(gt.categories[j]);
    shuffled.track_ids.push_back(gt.track_ids[j]);
  }
  auto b2 = total_loss(pred, mlogits, shuffled, lw);
  CHECK(std::abs(b2.total.item() - breakdown.total.item()) < 1e-9);
  std::vector<std::pair<size_t, size_t>> mapped;
  for (auto [q, j] : b2.assignment.pairs) mapped.emplace_back(q, order[j]);
  std::sort(mapped.begin(), mapped.end());
  CHECK(mapped == breakdown.assignment.pairs);

  // all-zero component case
  GroundTruthFrame<double> empty;
  Tensor<double> zl = Tensor<double>::full({1, 1}, -500.0);
  InstancePrediction<double> quiet;
  quiet.class_logits = zl;
  quiet.objectness = Tensor<double>::full({1, 1}, -500.0);
  quiet.kernels = Tensor<double>::zeros({1, 2});
  Tensor<double> mq = Tensor<double>::zeros({1, 2, 2});
  auto zero = total_loss(quiet, mq, empty, lw);
  CHECK(zero.total.item() < 1e-12);
}

TEST_CASE("total loss gradient passes the finite-difference check") {
  const size_t n = 4, h = 4, w = 4, dk = 3;
  LossWeights lw;
  GroundTruthFrame<double> gt = make_gt(2, h, w, 19);
  Tensor<double> cls = random_map({n, 3}, 20, -1, 1);
  Tensor<double> obj = random_map({n, 1}, 21, -1, 1);
  Tensor<double> kern = random_map({n, dk}, 22);
  Tensor<double> x_mask = random_map({dk, h, w}, 23);
  cls.set_requires_grad(true);
  obj.set_requires_grad(true);
  kern.set_requires_grad(true);
  x_mask.set_requires_grad(true);

  // freeze assignment and objectness targets for differentiability
  InstancePrediction<double> p0;
  p0.class_logits = cls;
  p0.objectness = obj;
  p0.kernels = kern;
  Tensor<double> m0 = segment(kern, x_mask);
  const Assignment assign = match_predictions(p0, m0, gt, lw);
  const auto targets = objectness_targets(m0, assign, gt);

  auto loss_of = [&](Tape<double>* tape) {
    InstancePrediction<double> pred;
    pred.class_logits = cls;
    pred.objectness = obj;
    pred.kernels = kern;
    Tensor<double> masks = segment(kern, x_mask, tape);
    auto b = total_loss(pred, masks, gt, lw, tape, &assign, &targets);
    return b.total;
  };
  Tape<double> tape;
  Tensor<double> loss = loss_of(&tape);
  for (auto* t : {&cls, &obj, &kern, &x_mask}) t->zero_grad();
  tape.backward(loss);
  for (auto* t : {&cls, &obj, &kern, &x_mask}) {
    for (size_t i = 0; i < t->size(); ++i) {
      const double keep = t->data()[i];
      const double eps = 1e-4;
      t->data()[i] = keep + eps;
      const double up = loss_of(nullptr).item();
      t->data()[i] = keep - eps;
      const double dn = loss_of(nullptr).item();
      t->data()[i] = keep;
      const double fd = (up - dn) / (2 * eps);
      CHECK(std::abs(t->grad()[i] - fd) <
            std::max(1e-5 * std::abs(fd), 1e-8));
    }
  }
}

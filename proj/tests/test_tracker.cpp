// Kernel reuse, cosine association, NMS-free filtering, and temporal query
// passing on a tiny end-to-end network.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "kernelvis/tracker.hpp"

using namespace kv;

namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.backbone = {8, 12, 16, 20, 1, 1, 2};
  cfg.d = 16;
  cfg.d_k = 12;
  cfg.heads = 2;
  cfg.ffn_hidden = 24;
  cfg.num_queries = 6;
  cfg.num_classes = 3;
  cfg.pool_k = 8;
  cfg.init_seed = 5;
  return cfg;
}

Tensor<double> random_image(uint64_t seed, size_t h = 64, size_t w = 64) {
  Rng rng(seed);
  Tensor<double> img = Tensor<double>::zeros({3, h, w});
  for (size_t i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform();
  return img;
}

Tensor<double> random_kernels(size_t n, size_t d, uint64_t seed) {
  Rng rng(seed);
  Tensor<double> k = Tensor<double>::zeros({n, d});
  for (size_t i = 0; i < k.size(); ++i) k.data()[i] = rng.uniform(-1, 1);
  return k;
}

}  // namespace

TEST_CASE("associate_kernels: identity, shuffle recovery, scale invariance") {
  Tensor<double> prev = random_kernels(8, 12, 1);
  const auto id = associate_kernels(prev, prev);
  for (size_t j = 0; j < 8; ++j) CHECK(id[j] == j);

  Rng rng(2);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<size_t> sigma(8);
    for (size_t i = 0; i < 8; ++i) sigma[i] = i;
    for (size_t i = 7; i > 0; --i) {
      std::swap(sigma[i], sigma[size_t(rng.uniform_int(0, int(i)))]);
    }
    Tensor<double> curr = Tensor<double>::zeros({8, 12});
    for (size_t j = 0; j < 8; ++j) {
      std::copy_n(prev.data() + sigma[j] * 12, 12, curr.data() + j * 12);
    }
    const auto perm = associate_kernels(prev, curr);
    for (size_t j = 0; j < 8; ++j) CHECK(perm[j] == sigma[j]);
  }

  // positive per-row scaling cancels in the cosine
  Tensor<double> scaled = prev.clone();
  Rng srng(3);
  for (size_t i = 0; i < 8; ++i) {
    const double s = srng.uniform(0.1, 5.0);
    for (size_t j = 0; j < 12; ++j) scaled.data()[i * 12 + j] *= s;
  }
  const auto perm = associate_kernels(prev, scaled);
  for (size_t j = 0; j < 8; ++j) CHECK(perm[j] == j);

  // association permutation invariance: permuting curr rows permutes the
  // recovered mapping identically
  Tensor<double> curr = random_kernels(8, 12, 4);
  const auto base = associate_kernels(prev, curr);
  std::vector<size_t> rho = {4, 2, 7, 1, 6, 0, 3, 5};
  Tensor<double> curr_p = Tensor<double>::zeros({8, 12});
  for (size_t j = 0; j < 8; ++j) {
    std::copy_n(curr.data() + rho[j] * 12, 12, curr_p.data() + j * 12);
  }
  const auto permd = associate_kernels(prev, curr_p);
  for (size_t j = 0; j < 8; ++j) CHECK(permd[j] == base[rho[j]]);

  CHECK_THROWS_AS(associate_kernels(prev, random_kernels(8, 10, 5)),
                  ShapeError);
}

TEST_CASE("filter_predictions: pure score thresholding") {
  TrackedFrameResult frame;
  frame.frame_index = 3;
  for (double s : {0.3, 0.5, 0.9}) {
    InstanceResult inst;
    inst.score = s;
    inst.track_id = int64_t(s * 10);
    frame.instances.push_back(inst);
  }
  CHECK(filter_predictions(frame, 0.0).instances.size() == 3);
  CHECK(filter_predictions(frame, 1.0).instances.empty());
  const auto mid = filter_predictions(frame, 0.4);
  REQUIRE(mid.instances.size() == 2);
  CHECK(mid.instances[0].score == 0.5);
  CHECK(mid.instances[1].score == 0.9);
}

TEST_CASE("kernel reuse: non-keyframe masks equal explicit segmentation") {
  Network<double> net(tiny_model());
  TrackerConfig tcfg;
  tcfg.reuse_interval = 3;
  tcfg.score_threshold = -1.0;  // keep all queries for the comparison
  Tracker<double> tracker(net, tcfg);

  std::vector<Tensor<double>> frames;
  for (uint64_t f = 0; f < 7; ++f) frames.push_back(random_image(10 + f));
  const auto out = tracker.run_sequence(frames);
  REQUIRE(out.results.size() == 7);

  // keyframes at 0, 3, 6: decoder ran ceil(7/3) = 3 times
  CHECK(out.stats.decoder_invocations == 3);
  CHECK(out.stats.keyframes == 3);
  const std::vector<uint8_t> expect_key = {1, 0, 0, 1, 0, 0, 1};
  CHECK(out.stats.is_keyframe == expect_key);

  // recompute Eq.(1) for every non-keyframe: bitwise equality
  for (size_t f = 0; f < 7; ++f) {
    if (expect_key[f]) continue;
    const size_t key = (f / 3) * 3;
    auto key_fwd = net.forward_full(frames[key], nullptr);
    auto feats = net.forward_features(frames[f], nullptr);
    Tensor<double> oracle =
        segment<double>(key_fwd.pred.kernels, feats.x_mask, nullptr);
    const auto& insts = out.results[f].instances;
    REQUIRE(insts.size() == 6);
    for (size_t i = 0; i < insts.size(); ++i) {
      for (size_t p = 0; p < insts[i].logits.size(); ++p) {
        CHECK(insts[i].logits[p] == oracle.data()[i * 64 + p]);
      }
    }
  }

  // non-keyframes are strictly cheaper than keyframes
  for (size_t f = 0; f < 7; ++f) {
    if (!expect_key[f]) {
      CHECK(out.stats.per_frame_flops[f] < out.stats.per_frame_flops[0]);
    }
  }
}

TEST_CASE("T=1 keyframes everywhere; identical frames give identical output") {
  Network<double> net(tiny_model());
  TrackerConfig t1;
  t1.reuse_interval = 1;
  t1.score_threshold = -1.0;
  Tracker<double> tracker1(net, t1);
  std::vector<Tensor<double>> frames(4, random_image(77));
  const auto out1 = tracker1.run_sequence(frames);
  CHECK(out1.stats.decoder_invocations == 4);
  CHECK(out1.stats.keyframes == 4);

  TrackerConfig t3;
  t3.reuse_interval = 3;
  t3.score_threshold = -1.0;
  Tracker<double> tracker3(net, t3);
  const auto out3 = tracker3.run_sequence(frames);
  // identical frames: every frame's masks bitwise equal the first frame's
  for (size_t f = 1; f < 4; ++f) {
    REQUIRE(out3.results[f].instances.size() ==
            out3.results[0].instances.size());
    for (size_t i = 0; i < out3.results[f].instances.size(); ++i) {
      CHECK(out3.results[f].instances[i].logits ==
            out3.results[0].instances[i].logits);
      CHECK(out3.results[f].instances[i].mask ==
            out3.results[0].instances[i].mask);
      CHECK(out3.results[f].instances[i].track_id ==
            out3.results[0].instances[i].track_id);
    }
  }
}

TEST_CASE("track ids: stable, unique per frame, carried by association") {
  Network<double> net(tiny_model());
  TrackerConfig tcfg;
  tcfg.reuse_interval = 2;
  tcfg.score_threshold = -1.0;
  Tracker<double> tracker(net, tcfg);
  std::vector<Tensor<double>> frames;
  for (uint64_t f = 0; f < 6; ++f) frames.push_back(random_image(200 + f));
  const auto out = tracker.run_sequence(frames);
  for (const auto& frame : out.results) {
    std::vector<int64_t> ids;
    for (const auto& inst : frame.instances) ids.push_back(inst.track_id);
    std::sort(ids.begin(), ids.end());
    CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
  }
  // default mode keeps the initial id set alive (total matching)
  std::vector<int64_t> first, last;
  for (const auto& inst : out.results[0].instances) {
    first.push_back(inst.track_id);
  }
  for (const auto& inst : out.results[5].instances) {
    last.push_back(inst.track_id);
  }
  std::sort(first.begin(), first.end());
  std::sort(last.begin(), last.end());
  CHECK(first == last);
}

TEST_CASE("tracker error contract") {
  Network<double> net(tiny_model());
  Tracker<double> tracker(net, {});
  CHECK_THROWS_AS(tracker.run_sequence({}), ArgumentError);
  std::vector<Tensor<double>> bad = {random_image(1, 64, 64),
                                     random_image(2, 64, 128)};
  CHECK_THROWS_AS(tracker.run_sequence(bad), ShapeError);
  TrackState<double> corrupt;
  corrupt.frames_processed = 4;  // claims history but never initialized
  CHECK_THROWS_AS(tracker.process_frame(random_image(3), corrupt), StateError);
  TrackerConfig zero;
  zero.reuse_interval = 0;
  CHECK_THROWS_AS(Tracker<double>(net, zero), ArgumentError);
}

TEST_CASE("temporal query passing: delta=0 equals the ordinary mask loss") {
  Network<double> net(tiny_model());
  LossWeights lw;
  Tensor<double> frame = random_image(42);
  // synthetic stride-8 ground truth with track ids
  GroundTruthFrame<double> gt;
  Rng rng(43);
  for (int i = 0; i < 2; ++i) {
    Tensor<double> m = Tensor<double>::zeros({8, 8});
    for (size_t p = 0; p < 64; ++p) m.data()[p] = rng.uniform() < 0.3 ? 1 : 0;
    gt.masks.push_back(m);
    gt.categories.push_back(i);
    gt.track_ids.push_back(i);
  }

  const size_t params_before = net.params().scalar_count();
  const auto passing = temporal_query_passing_loss(net, frame, frame, gt, lw);
  CHECK(net.params().scalar_count() == params_before);  // no new parameters

  auto fwd = net.forward_full(frame, nullptr);
  Tensor<double> ordinary =
      mask_loss(fwd.mask_logits, passing.assignment, gt, nullptr);
  CHECK(passing.passing_mask_loss.item() == ordinary.item());  // bitwise

  // missing track linkage is an argument error
  GroundTruthFrame<double> no_ids = gt;
  no_ids.track_ids.clear();
  CHECK_THROWS_AS(temporal_query_passing_loss(net, frame, frame, no_ids, lw),
                  ArgumentError);

  // single-stage decoders cannot pass queries
  ModelConfig single = tiny_model();
  single.decoder_mode = DecoderMode::global_only;
  Network<double> net1(single);
  CHECK_THROWS_AS(temporal_query_passing_loss(net1, frame, frame, gt, lw),
                  ArgumentError);
}

TEST_CASE("temporal passing gradient reaches the frame-t path") {
  Network<double> net(tiny_model());
  LossWeights lw;
  Tensor<double> frame_t = random_image(50);
  Tensor<double> frame_td = random_image(51);
  frame_t.set_requires_grad(true);
  GroundTruthFrame<double> gt;
  Rng rng(52);
  Tensor<double> m = Tensor<double>::zeros({8, 8});
  for (size_t p = 0; p < 64; ++p) m.data()[p] = rng.uniform() < 0.4 ? 1 : 0;
  gt.masks.push_back(m);
  gt.categories.push_back(0);
  gt.track_ids.push_back(7);

  Tape<double> tape;
  const auto passing =
      temporal_query_passing_loss(net, frame_t, frame_td, gt, lw, &tape);
  net.params().zero_grads();
  frame_t.zero_grad();
  tape.backward(passing.passing_mask_loss);
  double g_img = 0;
  for (size_t i = 0; i < frame_t.size(); ++i) {
    g_img = std::max(g_img, std::abs(frame_t.grad()[i]));
  }
  CHECK(g_img > 0.0);  // gradient flows into frame t's pixels
  double g_bb = 0;
  for (auto& [name, t] : net.params().entries()) {
    if (name.rfind("backbone.", 0) == 0 && t.has_grad()) {
      for (size_t i = 0; i < t.size(); ++i) {
        g_bb = std::max(g_bb, std::abs(t.grad()[i]));
      }
    }
  }
  CHECK(g_bb > 0.0);  // and into backbone weights
}

// Dual transformer instance decoder: position embeddings, stages, heads,
// segmentation, and the permutation-equivariance property.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "kernelvis/instance_decoder.hpp"

using namespace kv;

namespace {

Tensor<double> random_map(Shape shape, uint64_t seed, double lo = -1,
                          double hi = 1) {
  Rng rng(seed);
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

InstanceDecoderConfig small_cfg(DecoderMode mode = DecoderMode::global_local) {
  InstanceDecoderConfig cfg;
  cfg.num_queries = 5;
  cfg.d = 16;
  cfg.d_k = 12;
  cfg.heads = 2;
  cfg.ffn_hidden = 20;
  cfg.num_classes = 3;
  cfg.c6 = 8;
  cfg.mode = mode;
  return cfg;
}

Tensor<double>* find_param(ParamStore<double>& ps, const std::string& name) {
  for (auto& [n, t] : ps.entries()) {
    if (n == name) return &t;
  }
  return nullptr;
}

void zero_param(ParamStore<double>& ps, const std::string& name) {
  Tensor<double>* t = find_param(ps, name);
  REQUIRE(t != nullptr);
  std::fill_n(t->data(), t->size(), 0.0);
}

}  // namespace

TEST_CASE("sine_position_embedding: range, origin, closed form") {
  const size_t h = 6, w = 9, d = 16;
  Tensor<double> pe = sine_position_embedding<double>(h, w, d);
  CHECK(pe.shape() == Shape{d, h, w});
  for (size_t i = 0; i < pe.size(); ++i) {
    CHECK(pe.data()[i] >= -1.0);
    CHECK(pe.data()[i] <= 1.0);
  }
  // position (0,0): every sin channel 0, every cos channel 1
  CHECK(pe.at({0, 0, 0}) == 0.0);
  CHECK(pe.at({1, 0, 0}) == 1.0);
  CHECK(pe.at({d / 2, 0, 0}) == 0.0);
  CHECK(pe.at({d / 2 + 1, 0, 0}) == 1.0);

  // closed-form oracle at sampled positions
  const size_t freqs = d / 4;
  Rng rng(1);
  for (int probe = 0; probe < 20; ++probe) {
    const size_t y = size_t(rng.uniform_int(0, int(h) - 1));
    const size_t x = size_t(rng.uniform_int(0, int(w) - 1));
    const size_t f = size_t(rng.uniform_int(0, int(freqs) - 1));
    const double omega = 1.0 / std::pow(10000.0, double(f) / double(freqs));
    const double xv = 2.0 * M_PI * double(x) / double(w) * omega;
    const double yv = 2.0 * M_PI * double(y) / double(h) * omega;
    CHECK(std::abs(pe.at({2 * f, y, x}) - std::sin(xv)) < 1e-6);
    CHECK(std::abs(pe.at({2 * f + 1, y, x}) - std::cos(xv)) < 1e-6);
    CHECK(std::abs(pe.at({d / 2 + 2 * f, y, x}) - std::sin(yv)) < 1e-6);
    CHECK(std::abs(pe.at({d / 2 + 2 * f + 1, y, x}) - std::cos(yv)) < 1e-6);
  }

  CHECK_THROWS_AS(sine_position_embedding<double>(4, 4, 15), ArgumentError);
  CHECK_THROWS_AS(sine_position_embedding<double>(4, 4, 18), ArgumentError);
}

TEST_CASE("extract_local_features: shapes, constants, max vs avg") {
  Tensor<double> x = random_map({12, 64, 64}, 2);
  Tensor<double> l8 = extract_local_features(x, PoolMode::max, 8);
  CHECK(l8.shape() == Shape{12, 8, 8});
  Tensor<double> l4 = extract_local_features(x, PoolMode::max, 4);
  CHECK(l4.shape() == Shape{12, 16, 16});

  Tensor<double> c = Tensor<double>::full({3, 16, 16}, 0.4);
  for (PoolMode m : {PoolMode::max, PoolMode::avg}) {
    Tensor<double> pooled = extract_local_features(c, m, 8);
    for (size_t i = 0; i < pooled.size(); ++i) {
      CHECK(pooled.data()[i] == doctest::Approx(0.4).epsilon(1e-12));
    }
  }

  Tensor<double> pmax = extract_local_features(x, PoolMode::max, 8);
  Tensor<double> pavg = extract_local_features(x, PoolMode::avg, 8);
  double delta = 0;
  for (size_t i = 0; i < pmax.size(); ++i) {
    delta = std::max(delta, std::abs(pmax.data()[i] - pavg.data()[i]));
  }
  CHECK(delta > 1e-6);  // windows are non-constant

  CHECK_THROWS_AS(extract_local_features(x, PoolMode::max, 7), ShapeError);
}

TEST_CASE("decoder_stage: zero output weights leave queries unchanged") {
  ParamStore<double> ps;
  Rng rng(3);
  DecoderStage<double> stage(ps, rng, "s", 16, 8, 2, 20);
  for (const char* name : {"s.self.out.w", "s.self.out.b", "s.cross.out.w",
                           "s.cross.out.b", "s.ffn.fc2.w", "s.ffn.fc2.b"}) {
    zero_param(ps, name);
  }
  Tensor<double> q = random_map({5, 16}, 4);
  Tensor<double> feats = random_map({6, 8}, 5);
  Tensor<double> pos = random_map({6, 8}, 6);
  Tensor<double> out = stage.forward(q, feats, pos, nullptr);
  CHECK(std::memcmp(out.data(), q.data(), q.size() * sizeof(double)) == 0);
}

TEST_CASE("cross-attention over a single location returns its value proj") {
  ParamStore<double> ps;
  Rng rng(7);
  MultiheadAttention<double> attn(ps, rng, "a", 16, 8, 2);
  Tensor<double> q = random_map({5, 16}, 8);
  Tensor<double> feats = random_map({1, 8}, 9);  // one spatial location
  Tensor<double> out = attn.forward(q, feats, Tensor<double>(), nullptr);
  // softmax over one key is 1, so every query receives out_proj(v_proj(feat))
  Tensor<double> v = attn.v_proj.forward(feats, nullptr);
  Tensor<double> expect = attn.out_proj.forward(v, nullptr);
  for (size_t i = 0; i < 5; ++i) {
    for (size_t j = 0; j < 16; ++j) {
      CHECK(out.at({i, j}) == doctest::Approx(expect.at({0, j})).epsilon(1e-9));
    }
  }
}

TEST_CASE("attention weights per query sum to 1") {
  ParamStore<double> ps;
  Rng rng(10);
  MultiheadAttention<double> attn(ps, rng, "a", 16, 8, 2);
  Tensor<double> q = random_map({5, 16}, 11);
  Tensor<double> feats = random_map({9, 8}, 12);
  Tensor<double> pos = random_map({9, 8}, 13);
  Tensor<double> attn_map;
  attn.forward(q, feats, pos, nullptr, &attn_map);
  REQUIRE(attn_map.shape() == Shape{2, 5, 9});
  for (size_t hd = 0; hd < 2; ++hd) {
    for (size_t i = 0; i < 5; ++i) {
      double s = 0;
      for (size_t j = 0; j < 9; ++j) s += attn_map.at({hd, i, j});
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("dual_decode: every mode constructible; zero weights are residual") {
  for (DecoderMode mode :
       {DecoderMode::global_local, DecoderMode::local_local,
        DecoderMode::global_global, DecoderMode::global_only,
        DecoderMode::local_only}) {
    ParamStore<double> ps;
    Rng rng(14);
    InstanceDecoder<double> dec(ps, rng, small_cfg(mode));
    Tensor<double> xg = random_map({8, 2, 2}, 15);
    Tensor<double> xl = random_map({12, 2, 2}, 16);
    auto out = dec.decode(xg, xl, nullptr);
    CHECK(out.q_final.shape() == Shape{5, 16});
    CHECK(out.q_stage1.shape() == Shape{5, 16});
  }
  // zero every stage output projection: q_final == initial queries
  ParamStore<double> ps;
  Rng rng(17);
  InstanceDecoder<double> dec(ps, rng, small_cfg());
  for (auto& [name, t] : ps.entries()) {
    if (name.find(".out.") != std::string::npos ||
        name.find(".fc2.") != std::string::npos) {
      std::fill_n(t.data(), t.size(), 0.0);
    }
  }
  Tensor<double> xg = random_map({8, 2, 2}, 18);
  Tensor<double> xl = random_map({12, 2, 2}, 19);
  auto out = dec.decode(xg, xl, nullptr);
  CHECK(std::memcmp(out.q_final.data(), dec.initial_queries().data(),
                    out.q_final.size() * sizeof(double)) == 0);
}

TEST_CASE("stage order probe: X_G shapes q_stage1, X_L does not") {
  ParamStore<double> ps;
  Rng rng(20);
  InstanceDecoder<double> dec(ps, rng, small_cfg());
  Tensor<double> xg = random_map({8, 2, 2}, 21);
  Tensor<double> xl = random_map({12, 2, 2}, 22);
  auto base = dec.decode(xg, xl, nullptr);

  Tensor<double> xl2 = xl.clone();
  xl2.at({0, 0, 0}) += 1.0;
  auto bumped_l = dec.decode(xg, xl2, nullptr);
  CHECK(std::memcmp(base.q_stage1.data(), bumped_l.q_stage1.data(),
                    base.q_stage1.size() * sizeof(double)) == 0);
  double dfinal = 0;
  for (size_t i = 0; i < base.q_final.size(); ++i) {
    dfinal = std::max(dfinal, std::abs(base.q_final.data()[i] -
                                       bumped_l.q_final.data()[i]));
  }
  CHECK(dfinal > 0.0);

  Tensor<double> xg2 = xg.clone();
  xg2.at({0, 0, 0}) += 1.0;
  auto bumped_g = dec.decode(xg2, xl, nullptr);
  double dstage1 = 0;
  for (size_t i = 0; i < base.q_stage1.size(); ++i) {
    dstage1 = std::max(dstage1, std::abs(base.q_stage1.data()[i] -
                                         bumped_g.q_stage1.data()[i]));
  }
  CHECK(dstage1 > 0.0);
}

TEST_CASE("predict_heads: zero weights give 0.5 scores; shapes; fusion") {
  ParamStore<double> ps;
  Rng rng(23);
  InstanceDecoder<double> dec(ps, rng, small_cfg());
  for (const char* name :
       {"decoder.heads.cls.w", "decoder.heads.cls.b", "decoder.heads.obj.w",
        "decoder.heads.obj.b"}) {
    zero_param(ps, name);
  }
  Tensor<double> q = random_map({5, 16}, 24);
  auto pred = dec.predict(q, nullptr);
  CHECK(pred.class_logits.shape() == Shape{5, 3});
  CHECK(pred.kernels.shape() == Shape{5, 12});
  CHECK(pred.objectness.shape() == Shape{5, 1});
  for (size_t i = 0; i < 5; ++i) {
    CHECK(pred.scores.data()[i] == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("score fusion equals sqrt(p * o) on random logits") {
  ParamStore<double> ps;
  Rng rng(25);
  InstanceDecoder<double> dec(ps, rng, small_cfg());
  Tensor<double> q = random_map({5, 16}, 26, -2, 2);
  auto pred = dec.predict(q, nullptr);
  for (size_t i = 0; i < 5; ++i) {
    double m = pred.class_logits.at({i, 0});
    for (size_t c = 1; c < 3; ++c) m = std::max(m, pred.class_logits.at({i, c}));
    const double p = 1.0 / (1.0 + std::exp(-m));
    const double o = 1.0 / (1.0 + std::exp(-pred.objectness.at({i, 0})));
    CHECK(std::abs(pred.scores.data()[i] - std::sqrt(p * o)) < 1e-7);
  }
}

TEST_CASE("segment: one-hot and zero kernels, loop oracle, linearity") {
  Tensor<double> x_mask = random_map({6, 4, 5}, 27);
  Tensor<double> onehot = Tensor<double>::zeros({1, 6});
  onehot.at({0, 3}) = 1.0;
  Tensor<double> m = segment(onehot, x_mask);
  for (size_t y = 0; y < 4; ++y) {
    for (size_t x = 0; x < 5; ++x) {
      CHECK(m.at({0, y, x}) == x_mask.at({3, y, x}));
    }
  }
  Tensor<double> zero = Tensor<double>::zeros({2, 6});
  Tensor<double> mz = segment(zero, x_mask);
  for (size_t i = 0; i < mz.size(); ++i) CHECK(mz.data()[i] == 0.0);

  Tensor<double> k = random_map({3, 6}, 28);
  Tensor<double> mm = segment(k, x_mask);
  for (size_t i = 0; i < 3; ++i) {
    for (size_t y = 0; y < 4; ++y) {
      for (size_t x = 0; x < 5; ++x) {
        double dot = 0;
        for (size_t c = 0; c < 6; ++c) {
          dot += k.at({i, c}) * x_mask.at({c, y, x});
        }
        CHECK(std::abs(mm.at({i, y, x}) - dot) < 1e-6);
      }
    }
  }

  // linearity in kernels
  Tensor<double> k1 = random_map({3, 6}, 29);
  Tensor<double> k2 = random_map({3, 6}, 30);
  const double a = 1.3, b = -0.7;
  Tensor<double> lhs = segment(add(scale(k1, a), scale(k2, b)), x_mask);
  Tensor<double> rhs =
      add(scale(segment(k1, x_mask), a), scale(segment(k2, x_mask), b));
  for (size_t i = 0; i < lhs.size(); ++i) {
    CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) < 1e-6);
  }

  CHECK_THROWS_AS(segment(Tensor<double>::zeros({2, 7}), x_mask), ShapeError);
}

TEST_CASE("permutation equivariance of the decoder and heads") {
  ParamStore<double> ps;
  Rng rng(31);
  InstanceDecoder<double> dec(ps, rng, small_cfg());
  Tensor<double> xg = random_map({8, 2, 2}, 32);
  Tensor<double> xl = random_map({12, 2, 2}, 33);
  Tensor<double> x_mask = random_map({12, 8, 8}, 34);

  auto base = dec.decode(xg, xl, nullptr);
  auto base_pred = dec.predict(base.q_final, nullptr);
  Tensor<double> base_masks = segment(base_pred.kernels, x_mask);

  const std::vector<size_t> perm = {3, 0, 4, 1, 2};
  Tensor<double>* q0 = find_param(ps, "decoder.queries");
  REQUIRE(q0 != nullptr);
  Tensor<double> orig = q0->clone();
  for (size_t i = 0; i < 5; ++i) {
    std::copy_n(orig.data() + perm[i] * 16, 16, q0->data() + i * 16);
  }
  auto permuted = dec.decode(xg, xl, nullptr);
  auto perm_pred = dec.predict(permuted.q_final, nullptr);
  Tensor<double> perm_masks = segment(perm_pred.kernels, x_mask);

  for (size_t i = 0; i < 5; ++i) {
    for (size_t j = 0; j < 16; ++j) {
      CHECK(permuted.q_final.at({i, j}) ==
            doctest::Approx(base.q_final.at({perm[i], j})).epsilon(1e-10));
    }
    for (size_t c = 0; c < 3; ++c) {
      CHECK(perm_pred.class_logits.at({i, c}) ==
            doctest::Approx(base_pred.class_logits.at({perm[i], c}))
                .epsilon(1e-10));
    }
    CHECK(perm_pred.objectness.at({i, 0}) ==
          doctest::Approx(base_pred.objectness.at({perm[i], 0}))
              .epsilon(1e-10));
    for (size_t p = 0; p < 64; ++p) {
      CHECK(perm_masks.data()[i * 64 + p] ==
            doctest::Approx(base_masks.data()[perm[i] * 64 + p])
                .epsilon(1e-10));
    }
  }
}

TEST_CASE("dual decode + heads pass the finite-difference check") {
  ParamStore<double> ps;
  Rng rng(35);
  InstanceDecoderConfig cfg = small_cfg();
  cfg.num_queries = 3;
  cfg.d = 8;
  cfg.d_k = 8;
  cfg.ffn_hidden = 10;
  cfg.c6 = 4;
  InstanceDecoder<double> dec(ps, rng, cfg);
  Tensor<double> xg = random_map({4, 2, 2}, 36);
  Tensor<double> xl = random_map({8, 2, 2}, 37);
  Tensor<double> mix_k = random_map({3, 8}, 38);
  Tensor<double> mix_c = random_map({3, 3}, 39);

  auto loss_of = [&](Tape<double>* tape) {
    auto out = dec.decode(xg, xl, tape);
    auto pred = dec.predict(out.q_final, tape);
    return add(sum(mul(pred.kernels, mix_k, tape), tape),
               sum(mul(pred.class_logits, mix_c, tape), tape), tape);
  };
  Tape<double> tape;
  Tensor<double> loss = loss_of(&tape);
  ps.zero_grads();
  tape.backward(loss);
  Rng pick(40);
  for (auto& [name, t] : ps.entries()) {
    const size_t i = size_t(pick.uniform_int(0, int(t.size()) - 1));
    const double keep = t.data()[i];
    const double eps = 1e-4;
    t.data()[i] = keep + eps;
    const double up = loss_of(nullptr).item();
    t.data()[i] = keep - eps;
    const double dn = loss_of(nullptr).item();
    t.data()[i] = keep;
    const double fd = (up - dn) / (2 * eps);
    const double err = std::abs(t.grad()[i] - fd);
    CAPTURE(name);
    CHECK(err < std::max(1e-5 * std::abs(fd), 1e-8));
  }
}

// Semantic-enhanced mask decoder: enhancer arithmetic, fusion connectivity,
// the FPN ablation baseline, and the enhancer cost bound.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "kernelvis/flops.hpp"
#include "kernelvis/mask_decoder.hpp"

using namespace kv;

namespace {

Tensor<double> random_map(Shape shape, uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-1, 1);
  return t;
}

FeaturePyramid<double> random_pyramid(uint64_t seed, size_t c3 = 8,
                                      size_t c4 = 12, size_t c5 = 16,
                                      size_t c6 = 20, size_t base = 16) {
  FeaturePyramid<double> p;
  p.x3 = random_map({c3, base, base}, seed);
  p.x4 = random_map({c4, base / 2, base / 2}, seed + 1);
  p.x5 = random_map({c5, base / 4, base / 4}, seed + 2);
  p.x6 = random_map({c6, base / 8, base / 8}, seed + 3);
  return p;
}

MaskDecoderConfig small_cfg(bool enhancer = true,
                            MaskDecoderKind kind = MaskDecoderKind::iterative) {
  MaskDecoderConfig cfg;
  cfg.c3 = 8;
  cfg.c4 = 12;
  cfg.c5 = 16;
  cfg.c6 = 20;
  cfg.width = 24;
  cfg.enhancer = enhancer;
  cfg.kind = kind;
  return cfg;
}

Tensor<double>* find_param(ParamStore<double>& ps, const std::string& name) {
  for (auto& [n, t] : ps.entries()) {
    if (n == name) return &t;
  }
  return nullptr;
}

}  // namespace

TEST_CASE("semantic_enhance: zero weights give the 0.5-gated input") {
  ParamStore<double> ps;
  Rng rng(1);
  SemanticEnhancer<double> en(ps, rng, "en", 20, 24);
  for (auto& [name, t] : ps.entries()) {
    std::fill_n(t.data(), t.size(), 0.0);
  }
  Tensor<double> x = random_map({24, 8, 8}, 2);
  Tensor<double> x6 = random_map({20, 2, 2}, 3);
  Tensor<double> out = en.forward(x, x6, nullptr);
  for (size_t i = 0; i < x.size(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(0.5 * x.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("semantic_enhance: constant x6 gives spatially uniform gate/bias") {
  ParamStore<double> ps;
  Rng rng(4);
  SemanticEnhancer<double> en(ps, rng, "en", 20, 24);
  Tensor<double> zero_x = Tensor<double>::zeros({24, 8, 8});
  Tensor<double> x6 = Tensor<double>::full({20, 2, 2}, 0.37);
  // with x = 0 the output is exactly the additive branch
  Tensor<double> out = en.forward(zero_x, x6, nullptr);
  for (size_t c = 0; c < 24; ++c) {
    const double first = out.at({c, 0, 0});
    for (size_t p = 0; p < 64; ++p) {
      CHECK(out.data()[c * 64 + p] == doctest::Approx(first).epsilon(1e-12));
    }
  }
}

TEST_CASE("semantic_enhance matches the elementwise formula oracle") {
  ParamStore<double> ps;
  Rng rng(5);
  SemanticEnhancer<double> en(ps, rng, "en", 3, 2);
  Tensor<double> x = random_map({2, 4, 4}, 6);
  Tensor<double> x6 = random_map({3, 2, 2}, 7);
  Tensor<double> out = en.forward(x, x6, nullptr);

  // oracle: x * sigmoid(gate(up(x6))) + proj(up(x6)), evaluated elementwise
  // with 1x1 convs applied after upsampling (the commuted order)
  Tensor<double> up = bilinear_upsample(x6, 2);
  Tensor<double> gated = conv2d(up, *&find_param(ps, "en.gate.w")[0],
                                *find_param(ps, "en.gate.b"), 1, 0);
  Tensor<double> added = conv2d(up, *find_param(ps, "en.proj.w"),
                                *find_param(ps, "en.proj.b"), 1, 0);
  for (size_t i = 0; i < out.size(); ++i) {
    const double gate = 1.0 / (1.0 + std::exp(-gated.data()[i]));
    const double expect = x.data()[i] * gate + added.data()[i];
    CHECK(std::abs(out.data()[i] - expect) < 1e-6);
  }
  // shape mismatch rejected
  CHECK_THROWS_AS(en.forward(random_map({2, 4, 6}, 8), x6, nullptr),
                  ShapeError);
}

TEST_CASE("fuse_pyramid: stride-8 output of kernel width for any input") {
  ParamStore<double> ps;
  Rng rng(9);
  MaskDecoder<double> dec(ps, rng, small_cfg());
  auto x_mask = dec.forward(random_pyramid(10), nullptr);
  CHECK(x_mask.shape() == Shape{24, 16, 16});
  auto x_mask2 = dec.forward(random_pyramid(11, 8, 12, 16, 20, 32), nullptr);
  CHECK(x_mask2.shape() == Shape{24, 32, 32});
}

TEST_CASE("fuse_pyramid: zero weights except final bias give a constant map") {
  ParamStore<double> ps;
  Rng rng(12);
  MaskDecoder<double> dec(ps, rng, small_cfg());
  for (auto& [name, t] : ps.entries()) {
    std::fill_n(t.data(), t.size(), 0.0);
  }
  Tensor<double>* out_bias = find_param(ps, "maskdec.out.b");
  REQUIRE(out_bias != nullptr);
  std::fill_n(out_bias->data(), out_bias->size(), 1.75);
  auto x_mask = dec.forward(random_pyramid(13), nullptr);
  for (size_t i = 0; i < x_mask.size(); ++i) {
    CHECK(x_mask.data()[i] == doctest::Approx(1.75).epsilon(1e-12));
  }
}

TEST_CASE("dependency probes: X5 and X3 both influence X_mask") {
  ParamStore<double> ps;
  Rng rng(14);
  MaskDecoder<double> dec(ps, rng, small_cfg());
  auto pyr = random_pyramid(15);
  auto base = dec.forward(pyr, nullptr);
  {
    auto bumped = pyr;
    bumped.x5 = pyr.x5.clone();
    bumped.x5.at({0, 1, 1}) += 1.0;
    auto out = dec.forward(bumped, nullptr);
    double delta = 0;
    for (size_t i = 0; i < out.size(); ++i) {
      delta = std::max(delta, std::abs(out.data()[i] - base.data()[i]));
    }
    CHECK(delta > 0.0);
  }
  {
    auto bumped = pyr;
    bumped.x3 = pyr.x3.clone();
    bumped.x3.at({0, 3, 3}) += 1.0;
    auto out = dec.forward(bumped, nullptr);
    double delta = 0;
    for (size_t i = 0; i < out.size(); ++i) {
      delta = std::max(delta, std::abs(out.data()[i] - base.data()[i]));
    }
    CHECK(delta > 0.0);
  }
}

TEST_CASE("enhancer disabled equals a hand-built plain fusion") {
  ParamStore<double> ps;
  Rng rng(16);
  MaskDecoder<double> dec(ps, rng, small_cfg(/*enhancer=*/false));
  auto pyr = random_pyramid(17);
  auto got = dec.forward(pyr, nullptr);

  auto conv = [&](const char* name, const Tensor<double>& x, size_t k,
                  bool halve = false) {
    Tensor<double>& w = *find_param(ps, std::string("maskdec.") + name + ".w");
    Tensor<double>& b = *find_param(ps, std::string("maskdec.") + name + ".b");
    if (halve) return conv2d_asym(x, w, b, 2, 1, 1, 0, 0);
    return conv2d(x, w, b, 1, k / 2);
  };
  Tensor<double> l3 = conv("lat3", pyr.x3, 1);
  Tensor<double> l4 = conv("lat4", pyr.x4, 1);
  Tensor<double> l5 = conv("lat5", pyr.x5, 1);
  Tensor<double> p5 = l5;
  Tensor<double> p4 = gelu(conv("td4", add(l4, bilinear_upsample(p5, 2)), 3));
  Tensor<double> p3 = gelu(conv("td3", add(l3, bilinear_upsample(p4, 2)), 3));
  Tensor<double> n3 = p3;
  Tensor<double> n4 = gelu(conv("bu4", add(p4, conv("down4", n3, 3, true)), 3));
  Tensor<double> n5 = gelu(conv("bu5", add(p5, conv("down5", n4, 3, true)), 3));
  Tensor<double> expect = conv(
      "out", add(add(n3, bilinear_upsample(n4, 2)), bilinear_upsample(n5, 4)),
      3);
  REQUIRE(expect.shape() == got.shape());
  CHECK(std::memcmp(expect.data(), got.data(),
                    got.size() * sizeof(double)) == 0);
}

TEST_CASE("fpn baseline: no bottom-up weights, same contract, differs") {
  ParamStore<double> ps_fpn;
  Rng rng(18);
  MaskDecoder<double> fpn(ps_fpn, rng, small_cfg(false, MaskDecoderKind::fpn));
  for (auto& [name, t] : ps_fpn.entries()) {
    CHECK(name.find(".bu") == std::string::npos);
    CHECK(name.find(".down") == std::string::npos);
    CHECK(name.find(".td") == std::string::npos);
  }
  auto pyr = random_pyramid(19);
  auto out_fpn = fpn.forward(pyr, nullptr);
  CHECK(out_fpn.shape() == Shape{24, 16, 16});

  ParamStore<double> ps_it;
  Rng rng2(18);
  MaskDecoder<double> iter(ps_it, rng2, small_cfg(false));
  auto out_iter = iter.forward(pyr, nullptr);
  double delta = 0;
  for (size_t i = 0; i < out_fpn.size(); ++i) {
    delta = std::max(delta, std::abs(out_fpn.data()[i] - out_iter.data()[i]));
  }
  CHECK(delta > 1e-6);
}

TEST_CASE("enhancers cost less than 5% of decoder FLOPs at default widths") {
  MaskDecoderConfig cfg;  // defaults: 32/48/64/96 -> width 128
  ParamStore<double> ps_on, ps_off;
  Rng rng_on(20), rng_off(20);
  cfg.enhancer = true;
  MaskDecoder<double> on(ps_on, rng_on, cfg);
  cfg.enhancer = false;
  MaskDecoder<double> off(ps_off, rng_off, cfg);
  FeaturePyramid<double> pyr;
  pyr.x3 = random_map({32, 16, 16}, 21);
  pyr.x4 = random_map({48, 8, 8}, 22);
  pyr.x5 = random_map({64, 4, 4}, 23);
  pyr.x6 = random_map({96, 2, 2}, 24);
  flops::Scope s_on;
  on.forward(pyr, nullptr);
  const uint64_t f_on = s_on.elapsed();
  flops::Scope s_off;
  off.forward(pyr, nullptr);
  const uint64_t f_off = s_off.elapsed();
  REQUIRE(f_on > f_off);
  const double ratio = double(f_on - f_off) / double(f_off);
  CAPTURE(ratio);
  CHECK(ratio < 0.05);
}

TEST_CASE("full mask decoder path passes the finite-difference check") {
  ParamStore<double> ps;
  Rng rng(25);
  MaskDecoderConfig cfg;
  cfg.c3 = 4;
  cfg.c4 = 5;
  cfg.c5 = 6;
  cfg.c6 = 7;
  cfg.width = 6;
  MaskDecoder<double> dec(ps, rng, cfg);
  auto pyr = random_pyramid(26, 4, 5, 6, 7, 8);
  Rng wrng(27);
  Tensor<double> mix = Tensor<double>::zeros({6, 8, 8});
  for (size_t i = 0; i < mix.size(); ++i) mix.data()[i] = wrng.uniform(-1, 1);

  auto loss_of = [&](Tape<double>* tape) {
    return sum(mul(dec.forward(pyr, tape), mix, tape), tape);
  };
  Tape<double> tape;
  Tensor<double> loss = loss_of(&tape);
  ps.zero_grads();
  tape.backward(loss);
  Rng pick(28);
  for (auto& [name, t] : ps.entries()) {
    for (int probe = 0; probe < 2; ++probe) {
      const size_t i = size_t(pick.uniform_int(0, int(t.size()) - 1));
      const double keep = t.data()[i];
      const double eps = 1e-4;
      t.data()[i] = keep + eps;
      const double up = loss_of(nullptr).item();
      t.data()[i] = keep - eps;
      const double dn = loss_of(nullptr).item();
      t.data()[i] = keep;
      const double fd = (up - dn) / (2 * eps);
      const double an = t.grad()[i];
      const double err = std::abs(an - fd);
      CAPTURE(name);
      CHECK(err < std::max(1e-5 * std::abs(fd), 1e-8));
    }
  }
}

#pragma once

#include <cstdint>
#include <string>

#include "kernelvis/losses.hpp"
#include "kernelvis/network.hpp"
#include "kernelvis/optim.hpp"
#include "kernelvis/synth.hpp"
#include "kernelvis/tracker.hpp"

namespace kv {

// Flat [section] key = value configuration. Every field has a default;
// unknown keys are rejected with the offending line number.
struct RunConfig {
  // [model]
  size_t c3 = 32, c4 = 48, c5 = 64, c6 = 96;
  size_t convs_per_stage = 1;
  size_t tf_blocks = 1;
  size_t backbone_heads = 2;
  size_t d = 128, d_k = 128, heads = 4, ffn_hidden = 256;
  size_t queries = 25;
  DecoderMode decoder_mode = DecoderMode::global_local;
  PoolMode pool = PoolMode::max;
  size_t pool_k = 8;
  bool enhancer = true;
  MaskDecoderKind mask_decoder = MaskDecoderKind::iterative;
  uint64_t init_seed = 7;

  // [data]
  size_t size = 128;
  size_t frames = 6;
  size_t min_instances = 1, max_instances = 4;
  double min_radius = 10.0, max_radius = 22.0;
  double min_speed = 0.5, max_speed = 3.0;
  size_t categories = 3;
  size_t train_clips = 64;
  size_t eval_clips = 20;
  uint64_t data_seed = 11;

  // [loss]
  LossWeights loss;

  // [train]
  size_t iterations = 4200;
  size_t temporal_iterations = 800;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  uint64_t train_seed = 3;
  size_t log_every = 1;
  size_t delta_max = 5;

  // [tracker]
  TrackerConfig tracker;

  ModelConfig model_config() const;
  SynthConfig synth_config(uint64_t seed) const;
  AdamConfig adam_config() const;
};

RunConfig parse_config_file(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin);

// "section.key=value" override (ablation grids); throws ConfigError
void apply_override(RunConfig& cfg, const std::string& assignment);

std::string serialize_config(const RunConfig& cfg);

}  // namespace kv

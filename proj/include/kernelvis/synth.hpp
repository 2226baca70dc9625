#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kernelvis/losses.hpp"
#include "kernelvis/tensor.hpp"

namespace kv {

enum class ShapeKind { disk, rectangle, triangle };

struct SynthConfig {
  size_t height = 128, width = 128;  // divisible by 64
  size_t frames = 6;
  size_t min_instances = 1, max_instances = 4;
  double min_radius = 10.0, max_radius = 22.0;  // circumradius, pixels
  double min_speed = 0.5, max_speed = 3.0;      // pixels/frame
  size_t categories = 3;
  uint64_t seed = 1;
};

// Seeded clip of moving shapes. Ground truth is rendered at stride 8 by
// majority downsampling; occluded pixels belong to the nearer instance and
// track ids persist across the frames where an instance is visible.
template <typename T>
struct SynthClip {
  std::vector<Tensor<T>> frames;          // [3, h, w]
  std::vector<GroundTruthFrame<T>> gt;    // stride 8
};

template <typename T>
SynthClip<T> generate_clip(const SynthConfig& cfg);

// Clip directory: f0000.kvt.. frame tensors plus gt.txt manifest
// (frame track_id category h w rle-runs per line).
template <typename T>
void export_clip(const std::string& dir, const SynthClip<T>& clip);

// gt.txt is optional on import (inference input does not need it)
template <typename T>
SynthClip<T> import_clip(const std::string& dir);

template <typename T>
void write_gt_manifest(const std::string& path,
                       const std::vector<GroundTruthFrame<T>>& gt,
                       size_t h8, size_t w8);

template <typename T>
std::vector<GroundTruthFrame<T>> read_gt_manifest(const std::string& path);

}  // namespace kv

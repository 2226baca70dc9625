#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kv {

// One tracked instance in one frame, at the stride-8 grid.
struct InstanceResult {
  int64_t track_id = 0;
  int category = 0;
  double score = 0.0;
  size_t h = 0, w = 0;
  std::vector<uint8_t> mask;    // binarized at 0.5
  std::vector<double> logits;   // soft mask logits (in-memory only)
};

struct TrackedFrameResult {
  size_t frame_index = 0;
  std::vector<InstanceResult> instances;
};

// Row-major run lengths of alternating 0s and 1s, starting with 0s.
std::vector<size_t> rle_encode(const std::vector<uint8_t>& mask);
std::vector<uint8_t> rle_decode(const std::vector<size_t>& runs, size_t n);

// Line-delimited text: "frame track_id category score h w runs...".
// Scores round-trip exactly (%.17g).
void write_results(const std::string& path,
                   const std::vector<TrackedFrameResult>& results);
std::vector<TrackedFrameResult> read_results(const std::string& path);

}  // namespace kv

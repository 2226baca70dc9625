#pragma once

#include <atomic>
#include <cstdint>

namespace kv::flops {

// Process-wide counted-operations tally. Ops bulk-add their arithmetic cost;
// used for the enhancer-cost check and keyframe vs non-keyframe accounting.

inline std::atomic<uint64_t>& counter() {
  static std::atomic<uint64_t> c{0};
  return c;
}

inline void add(uint64_t n) { counter().fetch_add(n, std::memory_order_relaxed); }
inline uint64_t count() { return counter().load(std::memory_order_relaxed); }
inline void reset() { counter().store(0, std::memory_order_relaxed); }

// Counts the FLOPs of a code region.
class Scope {
 public:
  Scope() : start_(count()) {}
  uint64_t elapsed() const { return count() - start_; }

 private:
  uint64_t start_;
};

}  // namespace kv::flops

#pragma once

#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kv {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/dimension mismatches between tensors.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values (non-scalar loss, NaN costs, odd embedding width, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Tracker driven in an invalid order (e.g. non-first frame on a fresh state).
class StateError : public Error {
 public:
  using Error::Error;
};

// Config file problems. CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Checkpoint problems (missing/mismatched tensors). CLI exit code 3.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Filesystem I/O problems. CLI exit code 4.
class IoError : public Error {
 public:
  using Error::Error;
};

// Synthetic data configs that cannot be realized.
class GenerationError : public Error {
 public:
  using Error::Error;
};

inline std::string strfmt(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  va_list args2;
  va_copy(args2, args);
  const int n = std::vsnprintf(nullptr, 0, fmt, args);
  va_end(args);
  std::string out(n > 0 ? static_cast<size_t>(n) : 0, '\0');
  if (n > 0) std::vsnprintf(out.data(), out.size() + 1, fmt, args2);
  va_end(args2);
  return out;
}

// Worker cap for clip-level parallelism: KERNELVIS_THREADS, else hardware.
inline size_t thread_cap() {
  if (const char* env = std::getenv("KERNELVIS_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<size_t>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Runs fn(i) for i in [0, n) on up to thread_cap() threads. Callers index
// output slots by i, so aggregation order is deterministic.
inline void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
  const size_t workers = std::min(n, thread_cap());
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace kv

#include <cstdlib>
#include <cstring>

#include "kernelvis/common.hpp"
#include "kernelvis/kernels.hpp"

namespace kv::kernels {

template <typename T>
Table<T> make_scalar_table();
template <typename T>
Table<T> make_avx2_table();

const char* level_name(Level level) {
  switch (level) {
    case Level::scalar:
      return "scalar";
    case Level::avx2:
      return "avx2";
  }
  return "?";
}

bool cpu_supports(Level level) {
  if (level == Level::scalar) return true;
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") != 0;
#else
  return false;
#endif
}

namespace {

Level pick_initial_level() {
  if (const char* env = std::getenv("KERNELVIS_SIMD")) {
    if (std::strcmp(env, "scalar") == 0) return Level::scalar;
    if (std::strcmp(env, "avx2") == 0) {
      if (!cpu_supports(Level::avx2)) {
        throw ArgumentError("KERNELVIS_SIMD=avx2 but CPU lacks AVX2");
      }
      return Level::avx2;
    }
    // anything else (incl. "auto") falls through to detection
  }
  return cpu_supports(Level::avx2) ? Level::avx2 : Level::scalar;
}

Level& level_ref() {
  static Level level = pick_initial_level();
  return level;
}

}  // namespace

Level active_level() { return level_ref(); }

void set_level(Level level) {
  if (!cpu_supports(level)) {
    throw ArgumentError(strfmt("SIMD level %s not supported on this CPU",
                               level_name(level)));
  }
  level_ref() = level;
}

template <typename T>
const Table<T>& table(Level level) {
  static const Table<T> scalar = make_scalar_table<T>();
  static const Table<T> avx2 = make_avx2_table<T>();
  return level == Level::avx2 ? avx2 : scalar;
}

template <typename T>
const Table<T>& table() {
  return table<T>(level_ref());
}

template const Table<float>& table<float>(Level);
template const Table<double>& table<double>(Level);
template const Table<float>& table<float>();
template const Table<double>& table<double>();

}  // namespace kv::kernels

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kernelvis/tensor.hpp"

namespace kv {

// Portable tensor file: 8-byte magic "KVTENSOR", 1-byte dtype code
// (0 = f32, 1 = f64), 1-byte rank, rank x 8-byte little-endian dims, then the
// raw little-endian row-major payload.

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t);

// Loads any dtype and converts to T.
template <typename T>
Tensor<T> load_tensor(const std::string& path);

// Checkpoints: a directory of tensor files plus manifest.txt with
// "name<space>file" lines.
template <typename T>
void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, Tensor<T>>>& params);

// Loads values into the existing tensors (shapes must match).
template <typename T>
void load_checkpoint(const std::string& dir,
                     std::vector<std::pair<std::string, Tensor<T>>>& params);

}  // namespace kv

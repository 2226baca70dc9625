#include "kernelvis/tensor_io.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "kernelvis/common.hpp"

namespace kv {

namespace {

constexpr char kMagic[8] = {'K', 'V', 'T', 'E', 'N', 'S', 'O', 'R'};

template <typename T>
constexpr uint8_t dtype_code() {
  return sizeof(T) == 4 ? 0 : 1;
}

void write_u64_le(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

uint64_t read_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

template <typename U>
void write_payload_le(std::ostream& os, const U* data, size_t n) {
  // x86/aarch64 hosts are little-endian; raw write matches the format
  os.write(reinterpret_cast<const char*>(data), n * sizeof(U));
}

template <typename U>
void read_payload_le(std::istream& is, U* data, size_t n) {
  is.read(reinterpret_cast<char*>(data), n * sizeof(U));
}

}  // namespace

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(strfmt("cannot open %s for writing", path.c_str()));
  os.write(kMagic, 8);
  const uint8_t code = dtype_code<T>();
  const uint8_t rank = static_cast<uint8_t>(t.rank());
  os.put(static_cast<char>(code));
  os.put(static_cast<char>(rank));
  for (size_t d : t.shape()) write_u64_le(os, d);
  write_payload_le(os, t.data(), t.size());
  if (!os) throw IoError(strfmt("failed writing %s", path.c_str()));
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(strfmt("cannot open %s", path.c_str()));
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw IoError(strfmt("%s is not a KVTENSOR file", path.c_str()));
  }
  const int code = is.get();
  const int rank = is.get();
  if (code != 0 && code != 1) {
    throw IoError(strfmt("%s: unknown dtype code %d", path.c_str(), code));
  }
  if (rank < 0) throw IoError(strfmt("%s: truncated header", path.c_str()));
  Shape shape(static_cast<size_t>(rank));
  for (auto& d : shape) d = read_u64_le(is);
  const size_t n = numel(shape);
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  if (code == dtype_code<T>()) {
    read_payload_le(is, out.data(), n);
  } else if (code == 0) {
    std::vector<float> tmp(n);
    read_payload_le(is, tmp.data(), n);
    for (size_t i = 0; i < n; ++i) out.data()[i] = static_cast<T>(tmp[i]);
  } else {
    std::vector<double> tmp(n);
    read_payload_le(is, tmp.data(), n);
    for (size_t i = 0; i < n; ++i) out.data()[i] = static_cast<T>(tmp[i]);
  }
  if (!is) throw IoError(strfmt("%s: truncated payload", path.c_str()));
  return out;
}

template <typename T>
void save_checkpoint(
    const std::string& dir,
    const std::vector<std::pair<std::string, Tensor<T>>>& params) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) {
    throw IoError(strfmt("cannot write %s/manifest.txt", dir.c_str()));
  }
  size_t i = 0;
  for (const auto& [name, tensor] : params) {
    const std::string file = strfmt("p%05zu.kvt", i++);
    save_tensor(dir + "/" + file, tensor);
    manifest << name << " " << file << "\n";
  }
}

template <typename T>
void load_checkpoint(const std::string& dir,
                     std::vector<std::pair<std::string, Tensor<T>>>& params) {
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest) {
    throw CheckpointError(strfmt("missing manifest in %s", dir.c_str()));
  }
  std::map<std::string, std::string> files;
  std::string name, file;
  while (manifest >> name >> file) files[name] = file;
  for (auto& [pname, tensor] : params) {
    auto it = files.find(pname);
    if (it == files.end()) {
      throw CheckpointError(strfmt("checkpoint %s lacks tensor %s",
                                   dir.c_str(), pname.c_str()));
    }
    Tensor<T> loaded = load_tensor<T>(dir + "/" + it->second);
    if (loaded.shape() != tensor.shape()) {
      throw CheckpointError(strfmt(
          "checkpoint tensor %s has shape %s, model expects %s", pname.c_str(),
          shape_str(loaded.shape()).c_str(), shape_str(tensor.shape()).c_str()));
    }
    std::copy_n(loaded.data(), loaded.size(), tensor.data());
  }
}

template void save_tensor(const std::string&, const Tensor<float>&);
template void save_tensor(const std::string&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::string&);
template Tensor<double> load_tensor(const std::string&);
template void save_checkpoint(
    const std::string&, const std::vector<std::pair<std::string, Tensor<float>>>&);
template void save_checkpoint(
    const std::string&, const std::vector<std::pair<std::string, Tensor<double>>>&);
template void load_checkpoint(const std::string&,
                              std::vector<std::pair<std::string, Tensor<float>>>&);
template void load_checkpoint(const std::string&,
                              std::vector<std::pair<std::string, Tensor<double>>>&);

}  // namespace kv

#include "kernelvis/rle.hpp"

#include <fstream>
#include <sstream>

#include "kernelvis/common.hpp"

namespace kv {

std::vector<size_t> rle_encode(const std::vector<uint8_t>& mask) {
  std::vector<size_t> runs;
  uint8_t cur = 0;
  size_t len = 0;
  for (uint8_t v : mask) {
    const uint8_t bit = v ? 1 : 0;
    if (bit == cur) {
      ++len;
    } else {
      runs.push_back(len);
      cur = bit;
      len = 1;
    }
  }
  runs.push_back(len);
  return runs;
}

std::vector<uint8_t> rle_decode(const std::vector<size_t>& runs, size_t n) {
  std::vector<uint8_t> mask;
  mask.reserve(n);
  uint8_t cur = 0;
  for (size_t run : runs) {
    mask.insert(mask.end(), run, cur);
    cur = 1 - cur;
  }
  if (mask.size() != n) {
    throw IoError(strfmt("rle_decode: runs cover %zu pixels, expected %zu",
                         mask.size(), n));
  }
  return mask;
}

void write_results(const std::string& path,
                   const std::vector<TrackedFrameResult>& results) {
  std::ofstream os(path);
  if (!os) throw IoError(strfmt("cannot write %s", path.c_str()));
  os << "# frame track_id category score h w rle...\n";
  for (const auto& frame : results) {
    for (const auto& inst : frame.instances) {
      os << frame.frame_index << " " << inst.track_id << " " << inst.category
         << " " << strfmt("%.17g", inst.score) << " " << inst.h << " "
         << inst.w;
      for (size_t run : rle_encode(inst.mask)) os << " " << run;
      os << "\n";
    }
  }
}

std::vector<TrackedFrameResult> read_results(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(strfmt("cannot open %s", path.c_str()));
  std::vector<TrackedFrameResult> results;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    size_t frame;
    InstanceResult inst;
    if (!(ss >> frame >> inst.track_id >> inst.category >> inst.score >>
          inst.h >> inst.w)) {
      throw IoError(strfmt("%s:%zu: malformed result line", path.c_str(),
                           lineno));
    }
    std::vector<size_t> runs;
    size_t r;
    while (ss >> r) runs.push_back(r);
    inst.mask = rle_decode(runs, inst.h * inst.w);
    if (frame >= results.size()) {
      const size_t old = results.size();
      results.resize(frame + 1);
      for (size_t f = old; f < results.size(); ++f) results[f].frame_index = f;
    }
    results[frame].instances.push_back(std::move(inst));
  }
  return results;
}

}  // namespace kv

#include "kernelvis/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "kernelvis/rle.hpp"
#include "kernelvis/tensor_io.hpp"

namespace kv {

namespace {

struct Instance {
  ShapeKind kind;
  int category;
  double cx, cy, vx, vy;
  double radius;
  double aspect;    // rectangles
  double rotation;  // triangles
  double color[3];
};

struct Hsv {
  double h, s, v;
};

void hsv_to_rgb(const Hsv& in, double* rgb) {
  const double h = in.h * 6.0;
  const int i = int(std::floor(h)) % 6;
  const double f = h - std::floor(h);
  const double p = in.v * (1.0 - in.s);
  const double q = in.v * (1.0 - in.s * f);
  const double t = in.v * (1.0 - in.s * (1.0 - f));
  switch (i) {
    case 0: rgb[0] = in.v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = in.v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = in.v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = in.v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = in.v; break;
    default: rgb[0] = in.v; rgb[1] = p; rgb[2] = q; break;
  }
}

bool covers(const Instance& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  switch (s.kind) {
    case ShapeKind::disk:
      return dx * dx + dy * dy <= s.radius * s.radius;
    case ShapeKind::rectangle: {
      const double hx = s.radius * s.aspect;
      const double hy = s.radius / s.aspect;
      return std::abs(dx) <= hx && std::abs(dy) <= hy;
    }
    case ShapeKind::triangle: {
      double px[3], py[3];
      for (int k = 0; k < 3; ++k) {
        const double a = s.rotation + k * 2.0943951023931953;  // 2*pi/3
        px[k] = s.cx + s.radius * std::cos(a);
        py[k] = s.cy + s.radius * std::sin(a);
      }
      double sign = 0.0;
      for (int k = 0; k < 3; ++k) {
        const int k2 = (k + 1) % 3;
        const double cross =
            (px[k2] - px[k]) * (y - py[k]) - (py[k2] - py[k]) * (x - px[k]);
        if (cross != 0.0) {
          if (sign == 0.0) {
            sign = cross > 0 ? 1.0 : -1.0;
          } else if ((cross > 0 ? 1.0 : -1.0) != sign) {
            return false;
          }
        }
      }
      return true;
    }
  }
  return false;
}

void validate(const SynthConfig& cfg) {
  if (cfg.height % 64 != 0 || cfg.width % 64 != 0 || cfg.height == 0) {
    throw GenerationError(strfmt("synth: image size %zux%zu must be divisible "
                                 "by 64",
                                 cfg.height, cfg.width));
  }
  if (cfg.frames == 0 || cfg.categories == 0 ||
      cfg.min_instances > cfg.max_instances || cfg.min_instances == 0 ||
      cfg.min_radius > cfg.max_radius || cfg.min_speed > cfg.max_speed ||
      cfg.min_radius <= 1.0) {
    throw GenerationError("synth: empty or inverted config range");
  }
  const double dim = double(std::min(cfg.height, cfg.width));
  if (2.0 * cfg.max_radius >= dim) {
    throw GenerationError(strfmt("synth: shapes of radius %.1f do not fit a "
                                 "%zux%zu frame",
                                 cfg.max_radius, cfg.height, cfg.width));
  }
  const double area_demand =
      double(cfg.max_instances) * 3.14159265358979 * cfg.min_radius *
      cfg.min_radius;
  if (area_demand > 0.6 * double(cfg.height * cfg.width)) {
    throw GenerationError(strfmt("synth: %zu instances do not fit a %zux%zu "
                                 "frame",
                                 cfg.max_instances, cfg.height, cfg.width));
  }
}

// single 4-connected component check
bool connected(const std::vector<uint8_t>& mask, size_t h, size_t w) {
  size_t start = mask.size();
  size_t count = 0;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      if (start == mask.size()) start = i;
      ++count;
    }
  }
  if (count == 0) return true;
  std::vector<uint8_t> seen(mask.size(), 0);
  std::vector<size_t> stack{start};
  seen[start] = 1;
  size_t reached = 0;
  while (!stack.empty()) {
    const size_t at = stack.back();
    stack.pop_back();
    ++reached;
    const size_t y = at / w, x = at % w;
    const size_t nbr[4][2] = {{y, x + 1}, {y, x - 1}, {y + 1, x}, {y - 1, x}};
    for (const auto& nb : nbr) {
      if (nb[0] >= h || nb[1] >= w) continue;
      const size_t j = nb[0] * w + nb[1];
      if (mask[j] && !seen[j]) {
        seen[j] = 1;
        stack.push_back(j);
      }
    }
  }
  return reached == count;
}

template <typename T>
bool try_generate(const SynthConfig& cfg, Rng rng, SynthClip<T>& out) {
  const size_t h = cfg.height, w = cfg.width;
  const size_t h8 = h / 8, w8 = w / 8;
  const int n = rng.uniform_int(int(cfg.min_instances), int(cfg.max_instances));
  std::vector<Instance> inst(n);
  for (int i = 0; i < n; ++i) {
    Instance& s = inst[i];
    s.category = rng.uniform_int(0, int(cfg.categories) - 1);
    s.kind = static_cast<ShapeKind>(s.category % 3);
    s.radius = rng.uniform(cfg.min_radius, cfg.max_radius);
    s.aspect = rng.uniform(0.65, 1.45);
    s.rotation = rng.uniform(0.0, 6.283185307179586);
    s.cx = rng.uniform(s.radius, double(w) - 1.0 - s.radius);
    s.cy = rng.uniform(s.radius, double(h) - 1.0 - s.radius);
    const double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
    const double theta = rng.uniform(0.0, 6.283185307179586);
    s.vx = speed * std::cos(theta);
    s.vy = speed * std::sin(theta);
    const Hsv hsv{std::fmod(0.12 + 0.618033988749895 * s.category, 1.0), 0.65,
                  0.85};
    hsv_to_rgb(hsv, s.color);
    for (double& c : s.color) {
      c = std::clamp(c + rng.uniform(-0.08, 0.08), 0.05, 1.0);
    }
  }
  const double jitter_std = 0.05 * cfg.max_speed;

  out.frames.clear();
  out.gt.clear();
  std::vector<bool> ever_visible(n, false);
  for (size_t f = 0; f < cfg.frames; ++f) {
    // z order: later instances occlude earlier ones
    std::vector<int> owner(h * w, -1);
    for (int i = 0; i < n; ++i) {
      const Instance& s = inst[i];
      const long x0 = std::max(0L, long(std::floor(s.cx - s.radius)));
      const long x1 = std::min(long(w) - 1, long(std::ceil(s.cx + s.radius)));
      const long y0 = std::max(0L, long(std::floor(s.cy - s.radius)));
      const long y1 = std::min(long(h) - 1, long(std::ceil(s.cy + s.radius)));
      for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) {
          if (covers(s, double(x), double(y))) owner[y * w + x] = i;
        }
      }
    }
    Tensor<T> img = Tensor<T>::zeros({3, h, w});
    T* px = img.data();
    for (size_t y = 0; y < h; ++y) {
      for (size_t x = 0; x < w; ++x) {
        const int o = owner[y * w + x];
        double rgb[3];
        if (o >= 0) {
          rgb[0] = inst[o].color[0];
          rgb[1] = inst[o].color[1];
          rgb[2] = inst[o].color[2];
        } else {
          rgb[0] = 0.10 + 0.05 * double(x) / double(w - 1);
          rgb[1] = 0.10 + 0.03 * double(y) / double(h - 1);
          rgb[2] = 0.12;
        }
        px[0 * h * w + y * w + x] = static_cast<T>(rgb[0]);
        px[1 * h * w + y * w + x] = static_cast<T>(rgb[1]);
        px[2 * h * w + y * w + x] = static_cast<T>(rgb[2]);
      }
    }
    out.frames.push_back(img);

    GroundTruthFrame<T> gtf;
    for (int i = 0; i < n; ++i) {
      std::vector<uint8_t> vis(h * w, 0);
      size_t vis_count = 0;
      for (size_t p = 0; p < h * w; ++p) {
        if (owner[p] == i) {
          vis[p] = 1;
          ++vis_count;
        }
      }
      if (vis_count > 0 && !connected(vis, h, w)) return false;
      // majority downsample to stride 8: foreground iff > 50% of the block
      Tensor<T> m8 = Tensor<T>::zeros({h8, w8});
      size_t fg = 0;
      for (size_t by = 0; by < h8; ++by) {
        for (size_t bx = 0; bx < w8; ++bx) {
          size_t cnt = 0;
          for (size_t yy = 0; yy < 8; ++yy) {
            for (size_t xx = 0; xx < 8; ++xx) {
              cnt += vis[(by * 8 + yy) * w + bx * 8 + xx];
            }
          }
          if (cnt * 2 > 64) {
            m8.data()[by * w8 + bx] = T(1);
            ++fg;
          }
        }
      }
      if (fg > 0) {
        gtf.masks.push_back(m8);
        gtf.categories.push_back(inst[i].category);
        gtf.track_ids.push_back(i);
        ever_visible[i] = true;
      }
    }
    out.gt.push_back(std::move(gtf));

    // advance: constant velocity plus seeded jitter, bounce at borders
    for (Instance& s : inst) {
      s.cx += s.vx + rng.normal(0.0, jitter_std);
      s.cy += s.vy + rng.normal(0.0, jitter_std);
      if (s.cx < s.radius) {
        s.cx = 2.0 * s.radius - s.cx;
        s.vx = -s.vx;
      }
      if (s.cx > double(w) - 1.0 - s.radius) {
        s.cx = 2.0 * (double(w) - 1.0 - s.radius) - s.cx;
        s.vx = -s.vx;
      }
      if (s.cy < s.radius) {
        s.cy = 2.0 * s.radius - s.cy;
        s.vy = -s.vy;
      }
      if (s.cy > double(h) - 1.0 - s.radius) {
        s.cy = 2.0 * (double(h) - 1.0 - s.radius) - s.cy;
        s.vy = -s.vy;
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    if (!ever_visible[i]) return false;
  }
  return true;
}

}  // namespace

template <typename T>
SynthClip<T> generate_clip(const SynthConfig& cfg) {
  validate(cfg);
  Rng base(cfg.seed);
  for (uint64_t attempt = 0; attempt < 64; ++attempt) {
    SynthClip<T> clip;
    if (try_generate(cfg, base.fork(1000 + attempt), clip)) return clip;
  }
  throw GenerationError(
      "synth: could not place instances without splitting a visible mask; "
      "reduce instance count or size range");
}

template <typename T>
void export_clip(const std::string& dir, const SynthClip<T>& clip) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  for (size_t f = 0; f < clip.frames.size(); ++f) {
    save_tensor(strfmt("%s/f%04zu.kvt", dir.c_str(), f), clip.frames[f]);
  }
  if (!clip.gt.empty()) {
    const size_t h8 = clip.frames[0].dim(1) / 8;
    const size_t w8 = clip.frames[0].dim(2) / 8;
    write_gt_manifest(dir + "/gt.txt", clip.gt, h8, w8);
  }
}

template <typename T>
SynthClip<T> import_clip(const std::string& dir) {
  SynthClip<T> clip;
  std::vector<std::string> files;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > 4 && name.substr(name.size() - 4) == ".kvt") {
      files.push_back(entry.path().string());
    }
  }
  if (ec) throw IoError(strfmt("cannot read clip directory %s", dir.c_str()));
  if (files.empty()) {
    throw IoError(strfmt("no frame tensors (*.kvt) in %s", dir.c_str()));
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) clip.frames.push_back(load_tensor<T>(f));
  if (std::filesystem::exists(dir + "/gt.txt")) {
    clip.gt = read_gt_manifest<T>(dir + "/gt.txt");
  }
  return clip;
}

template <typename T>
void write_gt_manifest(const std::string& path,
                       const std::vector<GroundTruthFrame<T>>& gt, size_t h8,
                       size_t w8) {
  std::ofstream os(path);
  if (!os) throw IoError(strfmt("cannot write %s", path.c_str()));
  os << "# frame track_id category h w rle...\n";
  for (size_t f = 0; f < gt.size(); ++f) {
    for (size_t i = 0; i < gt[f].size(); ++i) {
      std::vector<uint8_t> mask(h8 * w8);
      for (size_t p = 0; p < mask.size(); ++p) {
        mask[p] = gt[f].masks[i].data()[p] > T(0.5) ? 1 : 0;
      }
      os << f << " " << gt[f].track_ids[i] << " " << gt[f].categories[i] << " "
         << h8 << " " << w8;
      for (size_t run : rle_encode(mask)) os << " " << run;
      os << "\n";
    }
  }
}

template <typename T>
std::vector<GroundTruthFrame<T>> read_gt_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(strfmt("cannot open %s", path.c_str()));
  std::vector<GroundTruthFrame<T>> gt;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    size_t frame, h, w;
    int64_t track_id;
    int category;
    if (!(ss >> frame >> track_id >> category >> h >> w)) {
      throw IoError(strfmt("%s:%zu: malformed ground-truth line", path.c_str(),
                           lineno));
    }
    std::vector<size_t> runs;
    size_t r;
    while (ss >> r) runs.push_back(r);
    const std::vector<uint8_t> mask = rle_decode(runs, h * w);
    if (frame >= gt.size()) gt.resize(frame + 1);
    Tensor<T> m = Tensor<T>::zeros({h, w});
    for (size_t p = 0; p < mask.size(); ++p) m.data()[p] = T(mask[p]);
    gt[frame].masks.push_back(m);
    gt[frame].categories.push_back(category);
    gt[frame].track_ids.push_back(track_id);
  }
  return gt;
}

#define KV_INSTANTIATE_SYNTH(T)                                             \
  template SynthClip<T> generate_clip<T>(const SynthConfig&);               \
  template void export_clip(const std::string&, const SynthClip<T>&);       \
  template SynthClip<T> import_clip<T>(const std::string&);                 \
  template void write_gt_manifest(const std::string&,                       \
                                  const std::vector<GroundTruthFrame<T>>&,  \
                                  size_t, size_t);                          \
  template std::vector<GroundTruthFrame<T>> read_gt_manifest<T>(            \
      const std::string&);

KV_INSTANTIATE_SYNTH(float)
KV_INSTANTIATE_SYNTH(double)

}  // namespace kv

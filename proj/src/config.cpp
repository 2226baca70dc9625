#include "kernelvis/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace kv {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

size_t parse_size(const std::string& v, const std::string& where) {
  size_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError(strfmt("%s: expected a non-negative integer, got '%s'",
                             where.c_str(), v.c_str()));
  }
  return out;
}

uint64_t parse_u64(const std::string& v, const std::string& where) {
  return parse_size(v, where);
}

double parse_double(const std::string& v, const std::string& where) {
  try {
    size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(strfmt("%s: expected a number, got '%s'", where.c_str(),
                             v.c_str()));
  }
}

bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(strfmt("%s: expected true/false, got '%s'", where.c_str(),
                           v.c_str()));
}

DecoderMode parse_decoder_mode(const std::string& v, const std::string& where) {
  if (v == "global-local") return DecoderMode::global_local;
  if (v == "local-local") return DecoderMode::local_local;
  if (v == "global-global") return DecoderMode::global_global;
  if (v == "global") return DecoderMode::global_only;
  if (v == "local") return DecoderMode::local_only;
  throw ConfigError(strfmt(
      "%s: unknown decoder mode '%s' (global-local, local-local, "
      "global-global, global, local)",
      where.c_str(), v.c_str()));
}

const char* decoder_mode_name(DecoderMode m) {
  switch (m) {
    case DecoderMode::global_local: return "global-local";
    case DecoderMode::local_local: return "local-local";
    case DecoderMode::global_global: return "global-global";
    case DecoderMode::global_only: return "global";
    case DecoderMode::local_only: return "local";
  }
  return "?";
}

using Setter = std::function<void(RunConfig&, const std::string& value,
                                  const std::string& where)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"model.c3", [](RunConfig& c, const std::string& v, const std::string& w) { c.c3 = parse_size(v, w); }},
      {"model.c4", [](RunConfig& c, const std::string& v, const std::string& w) { c.c4 = parse_size(v, w); }},
      {"model.c5", [](RunConfig& c, const std::string& v, const std::string& w) { c.c5 = parse_size(v, w); }},
      {"model.c6", [](RunConfig& c, const std::string& v, const std::string& w) { c.c6 = parse_size(v, w); }},
      {"model.convs_per_stage", [](RunConfig& c, const std::string& v, const std::string& w) { c.convs_per_stage = parse_size(v, w); }},
      {"model.tf_blocks", [](RunConfig& c, const std::string& v, const std::string& w) { c.tf_blocks = parse_size(v, w); }},
      {"model.backbone_heads", [](RunConfig& c, const std::string& v, const std::string& w) { c.backbone_heads = parse_size(v, w); }},
      {"model.d", [](RunConfig& c, const std::string& v, const std::string& w) { c.d = parse_size(v, w); }},
      {"model.d_k", [](RunConfig& c, const std::string& v, const std::string& w) { c.d_k = parse_size(v, w); }},
      {"model.heads", [](RunConfig& c, const std::string& v, const std::string& w) { c.heads = parse_size(v, w); }},
      {"model.ffn_hidden", [](RunConfig& c, const std::string& v, const std::string& w) { c.ffn_hidden = parse_size(v, w); }},
      {"model.queries", [](RunConfig& c, const std::string& v, const std::string& w) { c.queries = parse_size(v, w); }},
      {"model.decoder_mode", [](RunConfig& c, const std::string& v, const std::string& w) { c.decoder_mode = parse_decoder_mode(v, w); }},
      {"model.pool", [](RunConfig& c, const std::string& v, const std::string& w) {
         if (v == "max") { c.pool = PoolMode::max; return; }
         if (v == "avg") { c.pool = PoolMode::avg; return; }
         throw ConfigError(strfmt("%s: pool must be max or avg, got '%s'", w.c_str(), v.c_str()));
       }},
      {"model.pool_k", [](RunConfig& c, const std::string& v, const std::string& w) { c.pool_k = parse_size(v, w); }},
      {"model.enhancer", [](RunConfig& c, const std::string& v, const std::string& w) { c.enhancer = parse_bool(v, w); }},
      {"model.mask_decoder", [](RunConfig& c, const std::string& v, const std::string& w) {
         if (v == "iterative") { c.mask_decoder = MaskDecoderKind::iterative; return; }
         if (v == "fpn") { c.mask_decoder = MaskDecoderKind::fpn; return; }
         throw ConfigError(strfmt("%s: mask_decoder must be iterative or fpn, got '%s'", w.c_str(), v.c_str()));
       }},
      {"model.init_seed", [](RunConfig& c, const std::string& v, const std::string& w) { c.init_seed = parse_u64(v, w); }},

      {"data.size", [](RunConfig& c, const std::string& v, const std::string& w) { c.size = parse_size(v, w); }},
      {"data.frames", [](RunConfig& c, const std::string& v, const std::string& w) { c.frames = parse_size(v, w); }},
      {"data.min_instances", [](RunConfig& c, const std::string& v, const std::string& w) { c.min_instances = parse_size(v, w); }},
      {"data.max_instances", [](RunConfig& c, const std::string& v, const std::string& w) { c.max_instances = parse_size(v, w); }},
      {"data.min_radius", [](RunConfig& c, const std::string& v, const std::string& w) { c.min_radius = parse_double(v, w); }},
      {"data.max_radius", [](RunConfig& c, const std::string& v, const std::string& w) { c.max_radius = parse_double(v, w); }},
      {"data.min_speed", [](RunConfig& c, const std::string& v, const std::string& w) { c.min_speed = parse_double(v, w); }},
      {"data.max_speed", [](RunConfig& c, const std::string& v, const std::string& w) { c.max_speed = parse_double(v, w); }},
      {"data.categories", [](RunConfig& c, const std::string& v, const std::string& w) { c.categories = parse_size(v, w); }},
      {"data.train_clips", [](RunConfig& c, const std::string& v, const std::string& w) { c.train_clips = parse_size(v, w); }},
      {"data.eval_clips", [](RunConfig& c, const std::string& v, const std::string& w) { c.eval_clips = parse_size(v, w); }},
      {"data.seed", [](RunConfig& c, const std::string& v, const std::string& w) { c.data_seed = parse_u64(v, w); }},

      {"loss.lambda_cls", [](RunConfig& c, const std::string& v, const std::string& w) { c.loss.lambda_cls = parse_double(v, w); }},
      {"loss.lambda_mask", [](RunConfig& c, const std::string& v, const std::string& w) { c.loss.lambda_mask = parse_double(v, w); }},
      {"loss.lambda_obj", [](RunConfig& c, const std::string& v, const std::string& w) { c.loss.lambda_obj = parse_double(v, w); }},
      {"loss.focal_alpha", [](RunConfig& c, const std::string& v, const std::string& w) { c.loss.focal_alpha = parse_double(v, w); }},
      {"loss.focal_gamma", [](RunConfig& c, const std::string& v, const std::string& w) { c.loss.focal_gamma = parse_double(v, w); }},
      {"loss.cost_alpha", [](RunConfig& c, const std::string& v, const std::string& w) { c.loss.cost_alpha = parse_double(v, w); }},
      {"loss.cost_beta", [](RunConfig& c, const std::string& v, const std::string& w) { c.loss.cost_beta = parse_double(v, w); }},

      {"train.iterations", [](RunConfig& c, const std::string& v, const std::string& w) { c.iterations = parse_size(v, w); }},
      {"train.temporal_iterations", [](RunConfig& c, const std::string& v, const std::string& w) { c.temporal_iterations = parse_size(v, w); }},
      {"train.lr", [](RunConfig& c, const std::string& v, const std::string& w) { c.lr = parse_double(v, w); }},
      {"train.weight_decay", [](RunConfig& c, const std::string& v, const std::string& w) { c.weight_decay = parse_double(v, w); }},
      {"train.grad_clip", [](RunConfig& c, const std::string& v, const std::string& w) { c.grad_clip = parse_double(v, w); }},
      {"train.seed", [](RunConfig& c, const std::string& v, const std::string& w) { c.train_seed = parse_u64(v, w); }},
      {"train.log_every", [](RunConfig& c, const std::string& v, const std::string& w) { c.log_every = parse_size(v, w); }},
      {"train.delta_max", [](RunConfig& c, const std::string& v, const std::string& w) { c.delta_max = parse_size(v, w); }},

      {"tracker.reuse_t", [](RunConfig& c, const std::string& v, const std::string& w) { c.tracker.reuse_interval = parse_size(v, w); }},
      {"tracker.score_threshold", [](RunConfig& c, const std::string& v, const std::string& w) { c.tracker.score_threshold = parse_double(v, w); }},
      {"tracker.tau_new", [](RunConfig& c, const std::string& v, const std::string& w) { c.tracker.tau_new = parse_double(v, w); }},
      {"tracker.strict_new_tracks", [](RunConfig& c, const std::string& v, const std::string& w) { c.tracker.strict_new_tracks = parse_bool(v, w); }},
  };
  return table;
}

}  // namespace

RunConfig parse_config_text(const std::string& text,
                            const std::string& origin) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto comment = line.find('#');
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(strfmt("%s:%zu: unterminated section header",
                                 origin.c_str(), lineno));
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(strfmt("%s:%zu: expected key = value", origin.c_str(),
                               lineno));
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string full = section.empty() ? key : section + "." + key;
    const auto it = setters().find(full);
    if (it == setters().end()) {
      throw ConfigError(strfmt("%s:%zu: unknown key '%s'", origin.c_str(),
                               lineno, full.c_str()));
    }
    it->second(cfg, value, strfmt("%s:%zu", origin.c_str(), lineno));
  }
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(strfmt("cannot open config file %s", path.c_str()));
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str(), path);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError(strfmt("override '%s' must be section.key=value",
                             assignment.c_str()));
  }
  const std::string key = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  const auto it = setters().find(key);
  if (it == setters().end()) {
    throw ConfigError(strfmt("unknown key '%s'", key.c_str()));
  }
  it->second(cfg, value, "override " + key);
}

std::string serialize_config(const RunConfig& c) {
  std::ostringstream os;
  os << "[model]\n";
  os << "c3 = " << c.c3 << "\nc4 = " << c.c4 << "\nc5 = " << c.c5
     << "\nc6 = " << c.c6 << "\n";
  os << "convs_per_stage = " << c.convs_per_stage << "\n";
  os << "tf_blocks = " << c.tf_blocks << "\n";
  os << "backbone_heads = " << c.backbone_heads << "\n";
  os << "d = " << c.d << "\nd_k = " << c.d_k << "\nheads = " << c.heads
     << "\nffn_hidden = " << c.ffn_hidden << "\n";
  os << "queries = " << c.queries << "\n";
  os << "decoder_mode = " << decoder_mode_name(c.decoder_mode) << "\n";
  os << "pool = " << (c.pool == PoolMode::max ? "max" : "avg") << "\n";
  os << "pool_k = " << c.pool_k << "\n";
  os << "enhancer = " << (c.enhancer ? "true" : "false") << "\n";
  os << "mask_decoder = "
     << (c.mask_decoder == MaskDecoderKind::iterative ? "iterative" : "fpn")
     << "\n";
  os << "init_seed = " << c.init_seed << "\n";
  os << "\n[data]\n";
  os << "size = " << c.size << "\nframes = " << c.frames << "\n";
  os << "min_instances = " << c.min_instances
     << "\nmax_instances = " << c.max_instances << "\n";
  os << strfmt("min_radius = %.17g\nmax_radius = %.17g\n", c.min_radius,
               c.max_radius);
  os << strfmt("min_speed = %.17g\nmax_speed = %.17g\n", c.min_speed,
               c.max_speed);
  os << "categories = " << c.categories << "\n";
  os << "train_clips = " << c.train_clips << "\neval_clips = " << c.eval_clips
     << "\n";
  os << "seed = " << c.data_seed << "\n";
  os << "\n[loss]\n";
  os << strfmt("lambda_cls = %.17g\nlambda_mask = %.17g\nlambda_obj = %.17g\n",
               c.loss.lambda_cls, c.loss.lambda_mask, c.loss.lambda_obj);
  os << strfmt("focal_alpha = %.17g\nfocal_gamma = %.17g\n", c.loss.focal_alpha,
               c.loss.focal_gamma);
  os << strfmt("cost_alpha = %.17g\ncost_beta = %.17g\n", c.loss.cost_alpha,
               c.loss.cost_beta);
  os << "\n[train]\n";
  os << "iterations = " << c.iterations
     << "\ntemporal_iterations = " << c.temporal_iterations << "\n";
  os << strfmt("lr = %.17g\nweight_decay = %.17g\ngrad_clip = %.17g\n", c.lr,
               c.weight_decay, c.grad_clip);
  os << "seed = " << c.train_seed << "\n";
  os << "log_every = " << c.log_every << "\n";
  os << "delta_max = " << c.delta_max << "\n";
  os << "\n[tracker]\n";
  os << "reuse_t = " << c.tracker.reuse_interval << "\n";
  os << strfmt("score_threshold = %.17g\ntau_new = %.17g\n",
               c.tracker.score_threshold, c.tracker.tau_new);
  os << "strict_new_tracks = "
     << (c.tracker.strict_new_tracks ? "true" : "false") << "\n";
  return os.str();
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.backbone.c3 = c3;
  m.backbone.c4 = c4;
  m.backbone.c5 = c5;
  m.backbone.c6 = c6;
  m.backbone.convs_per_stage = convs_per_stage;
  m.backbone.tf_blocks = tf_blocks;
  m.backbone.heads = backbone_heads;
  m.d = d;
  m.d_k = d_k;
  m.heads = heads;
  m.ffn_hidden = ffn_hidden;
  m.num_queries = queries;
  m.num_classes = categories;
  m.decoder_mode = decoder_mode;
  m.pool = pool;
  m.pool_k = pool_k;
  m.enhancer = enhancer;
  m.mask_decoder = mask_decoder;
  m.init_seed = init_seed;
  return m;
}

SynthConfig RunConfig::synth_config(uint64_t seed) const {
  SynthConfig s;
  s.height = size;
  s.width = size;
  s.frames = frames;
  s.min_instances = min_instances;
  s.max_instances = max_instances;
  s.min_radius = min_radius;
  s.max_radius = max_radius;
  s.min_speed = min_speed;
  s.max_speed = max_speed;
  s.categories = categories;
  s.seed = seed;
  return s;
}

AdamConfig RunConfig::adam_config() const {
  AdamConfig a;
  a.lr = lr;
  a.weight_decay = weight_decay;
  return a;
}

}  // namespace kv

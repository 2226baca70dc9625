// kernelvis command line: train / infer / eval / bench / ablate.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "kernelvis/trainer.hpp"

using namespace kv;

namespace {

void print_report(const EvalReport& rep) {
  std::printf("mean_iou=%.6f\n", rep.mean_iou);
  std::printf("track_consistency=%.6f\n", rep.track_consistency);
  std::printf("ap_lite=%.6f\n", rep.ap_lite);
  std::printf("matched=%zu\n", rep.matched);
  std::printf("misses=%zu\n", rep.misses);
  std::printf("false_positives=%zu\n", rep.false_positives);
}

void write_pgm(const std::string& path, const std::vector<uint8_t>& mask,
               size_t h, size_t w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(strfmt("cannot write %s", path.c_str()));
  os << "P5\n" << w << " " << h << "\n255\n";
  for (uint8_t v : mask) os.put(char(v ? 255 : 0));
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              bool verbose, bool run_eval) {
  const RunConfig cfg = parse_config_file(config_path);
  Network<float> net(cfg.model_config());
  const TrainStats stats = train_model(net, cfg, out_dir, verbose);
  std::printf("iterations=%zu\n", stats.total_iterations);
  std::printf("initial_loss=%.6f\n", stats.initial_loss);
  std::printf("final_loss=%.6f\n", stats.final_loss);
  std::printf("checkpoint=%s/checkpoint\n", out_dir.c_str());
  if (run_eval) print_report(evaluate_model(net, cfg));
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& clip_dir,
              const std::string& out_dir, double threshold, long reuse_t,
              bool render) {
  auto [cfg, net] = load_model<float>(ckpt);
  if (threshold >= 0) cfg.tracker.score_threshold = threshold;
  if (reuse_t > 0) cfg.tracker.reuse_interval = size_t(reuse_t);
  const SynthClip<float> clip = import_clip<float>(clip_dir);
  Tracker<float> tracker(*net, cfg.tracker);
  const auto out = tracker.run_sequence(clip.frames);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  write_results(out_dir + "/results.txt", out.results);
  if (render) {
    std::filesystem::create_directories(out_dir + "/masks", ec);
    for (const auto& frame : out.results) {
      for (const auto& inst : frame.instances) {
        write_pgm(strfmt("%s/masks/f%04zu_id%03lld.pgm", out_dir.c_str(),
                         frame.frame_index, (long long)inst.track_id),
                  inst.mask, inst.h, inst.w);
      }
    }
  }
  size_t total = 0;
  for (const auto& frame : out.results) total += frame.instances.size();
  std::printf("frames=%zu\n", out.results.size());
  std::printf("instances=%zu\n", total);
  std::printf("decoder_invocations=%llu\n",
              (unsigned long long)out.stats.decoder_invocations);
  std::printf("results=%s/results.txt\n", out_dir.c_str());
  return 0;
}

int cmd_eval(const std::string& results_path, const std::string& gt_path) {
  const auto results = read_results(results_path);
  auto gt = read_gt_manifest<float>(gt_path);
  // frames with no surviving predictions are still frames
  std::vector<TrackedFrameResult> pred = results;
  if (pred.size() < gt.size()) {
    const size_t old = pred.size();
    pred.resize(gt.size());
    for (size_t f = old; f < pred.size(); ++f) pred[f].frame_index = f;
  }
  print_report(evaluate_clip(pred, gt));
  return 0;
}

int cmd_bench(const std::string& ckpt, size_t size, size_t frames,
              long reuse_t, uint64_t seed) {
  auto [cfg, net] = load_model<float>(ckpt);
  if (reuse_t > 0) cfg.tracker.reuse_interval = size_t(reuse_t);
  cfg.size = size;
  cfg.frames = frames;
  SynthConfig sc = cfg.synth_config(seed);
  const SynthClip<float> clip = generate_clip<float>(sc);
  Tracker<float> tracker(*net, cfg.tracker);
  const auto out = tracker.run_sequence(clip.frames);
  const auto& st = out.stats;
  uint64_t total_flops = 0;
  for (size_t f = 0; f < st.per_frame_flops.size(); ++f) {
    std::printf("frame=%zu keyframe=%d flops=%llu ms=%.3f\n", f,
                int(st.is_keyframe[f]),
                (unsigned long long)st.per_frame_flops[f],
                st.per_frame_ms[f]);
    total_flops += st.per_frame_flops[f];
  }
  std::printf("total_flops=%llu\n", (unsigned long long)total_flops);
  std::printf("keyframes=%zu\n", st.keyframes);
  std::printf("nonkeyframes=%zu\n", st.nonkeyframes);
  std::printf("decoder_invocations=%llu\n",
              (unsigned long long)st.decoder_invocations);
  if (st.keyframes) {
    std::printf("keyframe_mean_flops=%llu\n",
                (unsigned long long)(st.keyframe_flops / st.keyframes));
  }
  if (st.nonkeyframes) {
    std::printf("nonkeyframe_mean_flops=%llu\n",
                (unsigned long long)(st.nonkeyframe_flops / st.nonkeyframes));
  }
  return 0;
}

int cmd_ablate(const std::string& grid_path, const std::string& out_dir) {
  std::ifstream is(grid_path);
  if (!is) throw ConfigError(strfmt("cannot open grid file %s", grid_path.c_str()));
  RunConfig base;
  struct Row {
    std::string label;
    std::vector<std::string> overrides;
  };
  std::vector<Row> rows;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r' ||
                             line.back() == '\t')) {
      line.pop_back();
    }
    if (line.empty()) continue;
    if (line.rfind("base", 0) == 0 && line.find('=') != std::string::npos &&
        line.find('|') == std::string::npos) {
      const std::string path = line.substr(line.find('=') + 1);
      const auto a = path.find_first_not_of(" \t");
      base = parse_config_file(path.substr(a == std::string::npos ? 0 : a));
      continue;
    }
    const auto bar = line.find('|');
    if (bar == std::string::npos) {
      throw ConfigError(strfmt("%s:%zu: expected 'label | key=value ...'",
                               grid_path.c_str(), lineno));
    }
    Row row;
    row.label = line.substr(0, bar);
    while (!row.label.empty() && row.label.back() == ' ') row.label.pop_back();
    std::istringstream rest(line.substr(bar + 1));
    std::string tok;
    while (rest >> tok) row.overrides.push_back(tok);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ConfigError("ablate: grid file lists no rows");
  std::printf("%-24s %-9s %-12s %-8s %-7s %-6s\n", "label", "mean_iou",
              "consistency", "ap_lite", "misses", "fp");
  for (const auto& row : rows) {
    RunConfig cfg = base;
    for (const auto& ov : row.overrides) apply_override(cfg, ov);
    Network<float> net(cfg.model_config());
    train_model(net, cfg, out_dir + "/" + row.label, false);
    const EvalReport rep = evaluate_model(net, cfg);
    std::printf("%-24s %-9.4f %-12.4f %-8.4f %-7zu %-6zu\n", row.label.c_str(),
                rep.mean_iou, rep.track_consistency, rep.ap_lite, rep.misses,
                rep.false_positives);
    std::fflush(stdout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kernelvis: query-kernel video instance segmentation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt, clip_dir, results_path, gt_path,
      grid_path;
  bool verbose = false, run_eval = false, render = false;
  double threshold = -1.0;
  long reuse_t = 0;
  size_t size = 128, frames = 12;
  uint64_t bench_seed = 5;

  auto* train = app.add_subcommand("train", "train on synthetic clips");
  train->add_option("--config", config_path, "run config file")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_flag("--verbose", verbose, "progress to stderr");
  train->add_flag("--eval", run_eval, "evaluate held-out clips after training");

  auto* infer = app.add_subcommand("infer", "run tracking on a clip directory");
  infer->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  infer->add_option("--clip", clip_dir, "clip directory (f*.kvt)")->required();
  infer->add_option("--out", out_dir, "output directory")->required();
  infer->add_option("--threshold", threshold, "score threshold override");
  infer->add_option("--reuse-T", reuse_t, "kernel reuse interval override");
  infer->add_flag("--render", render, "write per-instance mask images");

  auto* eval = app.add_subcommand("eval", "score a results file against gt");
  eval->add_option("--results", results_path, "results file")->required();
  eval->add_option("--gt", gt_path, "ground-truth manifest")->required();

  auto* bench = app.add_subcommand("bench", "per-frame time and FLOP counts");
  bench->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  bench->add_option("--size", size, "square input size (divisible by 64)");
  bench->add_option("--frames", frames, "clip length");
  bench->add_option("--reuse-T", reuse_t, "kernel reuse interval override");
  bench->add_option("--seed", bench_seed, "clip seed");

  auto* ablate = app.add_subcommand("ablate", "train/evaluate a config grid");
  ablate->add_option("--grid", grid_path, "grid file")->required();
  ablate->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  }

  try {
    if (*train) return cmd_train(config_path, out_dir, verbose, run_eval);
    if (*infer) {
      return cmd_infer(ckpt, clip_dir, out_dir, threshold, reuse_t, render);
    }
    if (*eval) return cmd_eval(results_path, gt_path);
    if (*bench) return cmd_bench(ckpt, size, frames, reuse_t, bench_seed);
    if (*ablate) return cmd_ablate(grid_path, out_dir);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

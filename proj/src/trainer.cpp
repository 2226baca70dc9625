#include "kernelvis/trainer.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "kernelvis/tensor_io.hpp"
#include "kernelvis/tracker.hpp"

namespace kv {

namespace {
constexpr uint64_t kTrainClipStream = 0x1000;
constexpr uint64_t kEvalClipStream = 0xE000;
}  // namespace

template <typename T>
std::vector<SynthClip<T>> make_train_clips(const RunConfig& cfg) {
  Rng base(cfg.data_seed);
  std::vector<SynthClip<T>> clips(cfg.train_clips);
  for (size_t i = 0; i < cfg.train_clips; ++i) {
    SynthConfig sc = cfg.synth_config(base.fork(kTrainClipStream + i).next_u64());
    clips[i] = generate_clip<T>(sc);
  }
  return clips;
}

template <typename T>
std::vector<SynthClip<T>> make_eval_clips(const RunConfig& cfg) {
  Rng base(cfg.data_seed);
  std::vector<SynthClip<T>> clips(cfg.eval_clips);
  for (size_t i = 0; i < cfg.eval_clips; ++i) {
    SynthConfig sc = cfg.synth_config(base.fork(kEvalClipStream + i).next_u64());
    clips[i] = generate_clip<T>(sc);
  }
  return clips;
}

template <typename T>
TrainStats train_model(Network<T>& net, const RunConfig& cfg,
                       const std::string& out_dir, bool verbose) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  std::ofstream metrics(out_dir + "/metrics.txt");
  if (!metrics) {
    throw IoError(strfmt("cannot write %s/metrics.txt", out_dir.c_str()));
  }

  const auto clips = make_train_clips<T>(cfg);
  Rng rng(cfg.train_seed);
  Adam<T> adam(net.params(), cfg.adam_config());
  std::vector<double> losses;
  losses.reserve(cfg.iterations + cfg.temporal_iterations);

  auto log_line = [&](size_t iter, double total, double cls, double mask,
                      double obj) {
    losses.push_back(total);
    if (cfg.log_every > 0 && iter % cfg.log_every == 0) {
      metrics << strfmt("%zu %.9g %.9g %.9g %.9g\n", iter, total, cls, mask,
                        obj);
    }
    if (verbose && iter % 100 == 0) {
      std::fprintf(stderr, "iter %zu loss %.4f\n", iter, total);
    }
  };

  // phase 1: per-frame
  for (size_t it = 1; it <= cfg.iterations; ++it) {
    const auto& clip = clips[size_t(rng.uniform_int(0, int(clips.size()) - 1))];
    const size_t f = size_t(rng.uniform_int(0, int(clip.frames.size()) - 1));
    net.params().zero_grads();
    Tape<T> tape;
    auto fwd = net.forward_full(clip.frames[f], &tape);
    auto loss =
        total_loss(fwd.pred, fwd.mask_logits, clip.gt[f], cfg.loss, &tape);
    tape.backward(loss.total);
    if (cfg.grad_clip > 0) clip_grad_norm(net.params().entries(), cfg.grad_clip);
    adam.step();
    log_line(it, double(loss.total.item()), double(loss.cls.item()),
             double(loss.mask.item()), double(loss.obj.item()));
  }

  // phase 2: temporal with query passing
  const bool can_temporal =
      net.decoder().has_stage2() && cfg.frames >= 2 && cfg.delta_max >= 1;
  for (size_t it = 1; it <= cfg.temporal_iterations; ++it) {
    if (!can_temporal) break;
    const auto& clip = clips[size_t(rng.uniform_int(0, int(clips.size()) - 1))];
    const size_t max_delta =
        std::min<size_t>(cfg.delta_max, clip.frames.size() - 1);
    const size_t delta = size_t(rng.uniform_int(1, int(max_delta)));
    const size_t t =
        size_t(rng.uniform_int(0, int(clip.frames.size() - 1 - delta)));
    const size_t td = t + delta;
    net.params().zero_grads();
    Tape<T> tape;
    auto fwd_t = net.forward_full(clip.frames[t], &tape);
    auto loss_t =
        total_loss(fwd_t.pred, fwd_t.mask_logits, clip.gt[t], cfg.loss, &tape);
    auto fwd_td = net.forward_full(clip.frames[td], &tape);
    auto loss_td = total_loss(fwd_td.pred, fwd_td.mask_logits, clip.gt[td],
                              cfg.loss, &tape);
    // query passing: frame-t stage-1 queries drive frame-td's second stage
    Tensor<T> q_pass = net.stage2_from(fwd_t.q_stage1, fwd_td.feats, &tape);
    Tensor<T> kernels = net.kernels_only(q_pass, &tape);
    Tensor<T> masks = segment(kernels, fwd_td.feats.x_mask, &tape);
    Tensor<T> pass_loss =
        mask_loss(masks, loss_td.assignment, clip.gt[td], &tape);
    Tensor<T> total =
        add(add(loss_t.total, loss_td.total, &tape),
            scale(pass_loss, T(cfg.loss.lambda_mask), &tape), &tape);
    tape.backward(total);
    if (cfg.grad_clip > 0) clip_grad_norm(net.params().entries(), cfg.grad_clip);
    adam.step();
    log_line(cfg.iterations + it, double(total.item()),
             double(loss_t.cls.item()) + double(loss_td.cls.item()),
             double(loss_t.mask.item()) + double(loss_td.mask.item()) +
                 double(pass_loss.item()),
             double(loss_t.obj.item()) + double(loss_td.obj.item()));
  }

  save_model(out_dir + "/checkpoint", net, cfg);

  TrainStats stats;
  stats.total_iterations = losses.size();
  if (!losses.empty()) {
    const size_t span = std::max<size_t>(1, losses.size() / 10);
    double a = 0, b = 0;
    for (size_t i = 0; i < span; ++i) a += losses[i];
    for (size_t i = losses.size() - span; i < losses.size(); ++i)
      b += losses[i];
    stats.initial_loss = a / double(span);
    stats.final_loss = b / double(span);
  }
  return stats;
}

template <typename T>
EvalReport evaluate_model(const Network<T>& net, const RunConfig& cfg) {
  const auto clips = make_eval_clips<T>(cfg);
  Tracker<T> tracker(net, cfg.tracker);
  std::vector<std::vector<TrackedFrameResult>> preds(clips.size());
  std::vector<std::vector<GroundTruthFrame<T>>> gts(clips.size());
  parallel_for(clips.size(), [&](size_t i) {
    preds[i] = tracker.run_sequence(clips[i].frames).results;
    gts[i] = clips[i].gt;
  });
  return evaluate_clips(preds, gts);
}

template <typename T>
void save_model(const std::string& dir, const Network<T>& net,
                const RunConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream os(dir + "/config.ini");
  if (!os) throw IoError(strfmt("cannot write %s/config.ini", dir.c_str()));
  os << serialize_config(cfg);
  os.close();
  save_checkpoint(dir, net.params().entries());
}

template <typename T>
std::pair<RunConfig, std::unique_ptr<Network<T>>> load_model(
    const std::string& dir) {
  if (!std::filesystem::exists(dir + "/config.ini")) {
    throw CheckpointError(strfmt("checkpoint %s lacks config.ini", dir.c_str()));
  }
  RunConfig cfg;
  try {
    cfg = parse_config_file(dir + "/config.ini");
  } catch (const ConfigError& e) {
    throw CheckpointError(strfmt("checkpoint %s has a bad config: %s",
                                 dir.c_str(), e.what()));
  }
  auto net = std::make_unique<Network<T>>(cfg.model_config());
  load_checkpoint(dir, net->params().entries());
  return {cfg, std::move(net)};
}

#define KV_INSTANTIATE_TRAINER(T)                                            \
  template std::vector<SynthClip<T>> make_train_clips<T>(const RunConfig&); \
  template std::vector<SynthClip<T>> make_eval_clips<T>(const RunConfig&);  \
  template TrainStats train_model(Network<T>&, const RunConfig&,            \
                                  const std::string&, bool);                \
  template EvalReport evaluate_model(const Network<T>&, const RunConfig&);  \
  template void save_model(const std::string&, const Network<T>&,           \
                           const RunConfig&);                               \
  template std::pair<RunConfig, std::unique_ptr<Network<T>>> load_model<T>( \
      const std::string&);

KV_INSTANTIATE_TRAINER(float)
KV_INSTANTIATE_TRAINER(double)

}  // namespace kv

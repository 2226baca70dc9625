#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "kernelvis/config.hpp"
#include "kernelvis/eval.hpp"

namespace kv {

struct TrainStats {
  double initial_loss = 0.0;  // mean over the first 10% of iterations
  double final_loss = 0.0;    // mean over the last 10%
  size_t total_iterations = 0;
};

// Two-phase training: per-frame phase, then temporal phase with query
// passing. Writes metrics.txt (one "iter loss l_cls l_mask l_obj" line per
// iteration) and checkpoint/ under out_dir. Deterministic given the seeds.
template <typename T>
TrainStats train_model(Network<T>& net, const RunConfig& cfg,
                       const std::string& out_dir, bool verbose = false);

// Held-out evaluation: generates cfg.eval_clips clips from the eval seed
// stream, tracks each (clip-level parallelism, capped by KERNELVIS_THREADS),
// and pools the metrics.
template <typename T>
EvalReport evaluate_model(const Network<T>& net, const RunConfig& cfg);

template <typename T>
std::vector<SynthClip<T>> make_train_clips(const RunConfig& cfg);
template <typename T>
std::vector<SynthClip<T>> make_eval_clips(const RunConfig& cfg);

// checkpoint directory: config.ini + manifest.txt + tensor files
template <typename T>
void save_model(const std::string& dir, const Network<T>& net,
                const RunConfig& cfg);
template <typename T>
std::pair<RunConfig, std::unique_ptr<Network<T>>> load_model(
    const std::string& dir);

}  // namespace kv

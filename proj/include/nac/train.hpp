#pragma once

#include "nac/network.hpp"
#include "nac/peaks.hpp"

#include <functional>
#include <vector>

namespace nac {

enum class Schedule { kConstant, kCosine, kStep };

const char* schedule_name(Schedule s);
Schedule schedule_from_name(const std::string& name);

struct TrainConfig {
  float lr = 1e-3f;
  float weight_decay = 0.0f;
  Schedule schedule = Schedule::kConstant;
  int epochs = 1;
  int batch_size = 256;
  std::uint64_t seed = 0;
  void validate() const;  // lr in [1e-5,1e-1], wd in [0,1e-2]
};

float schedule_lr(const TrainConfig& cfg, int epoch);

/// Weight-transform hooks used by quantization-aware training and pruning.
/// apply/restore bracket every forward (train batches and validation);
/// mask_grads runs after backward, after_step after each optimizer step.
struct WeightTransform {
  std::function<void(Network&)> apply;
  std::function<void(Network&)> restore;
  std::function<void(Network&)> mask_grads;
  std::function<void(Network&)> after_step;
};

struct EpochStats {
  int epoch = 0;
  float lr = 0.0f;
  float train_loss = 0.0f;
  double val_distance_px = -1.0;  // -1 when no validation split was given
};

struct TrainResult {
  bool failed = false;  // non-finite loss; caller scores the trial +inf
  std::vector<EpochStats> history;
};

/// Adam (beta1=0.9, beta2=0.999, eps=1e-8) with decoupled weight decay on
/// mean-squared error over normalized center labels. Deterministic given
/// cfg.seed: fixed shuffle order, no internal concurrency.
TrainResult train(Network& net, const PeakDataset& data,
                  const std::vector<Index>& train_idx, const TrainConfig& cfg,
                  const WeightTransform* transform = nullptr,
                  const std::vector<Index>* val_idx = nullptr);

struct EvalResult {
  double mean_distance_px = 0.0;
  std::vector<double> distances;  // per sample, pixels
};

/// Mean Euclidean distance in pixels: 11 * ||pred - label||_2 per sample.
EvalResult evaluate(Network& net, const PeakDataset& data,
                    const std::vector<Index>& idx);

}  // namespace nac

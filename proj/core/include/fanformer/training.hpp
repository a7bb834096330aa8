// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>

#include "fanformer/model.hpp"
#include "fanformer/tasks.hpp"

namespace fanformer {

struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

struct OptimConfig {
  double peak_lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double min_lr_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double clip_norm = 1.0;
};

// Linear ramp 0 -> peak over warmup_steps, cosine decay to
// min_lr_fraction * peak at total_steps, clamped beyond.
double lr_schedule(std::size_t step, const OptimConfig& cfg);

/// AdamW with decoupled weight decay, applied before the adaptive update.
class AdamW {
 public:
  AdamW(const std::vector<std::pair<std::string, Tensor*>>& params, OptimConfig cfg);

  void step(const std::vector<Tensor>& grads, double lr);
  std::size_t steps_taken() const { return t_; }

  // Optimizer state as named tensors for checkpointing.
  std::map<std::string, Tensor> state() const;
  void restore(const std::map<std::string, Tensor>& tensors, std::size_t steps_taken);

 private:
  std::vector<std::pair<std::string, Tensor*>> params_;
  std::vector<Tensor> m_, v_;
  OptimConfig cfg_;
  std::size_t t_ = 0;
};

// Global-norm gradient clipping; returns the pre-clip norm.
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask);

struct RunRecord {
  long long step = 0;
  std::string split = "train";
  double loss = 0.0;
  double lr = 0.0;
  long long tokens_seen = 0;
  double wall_ms = 0.0;
  std::optional<std::string> metric_name;
  std::optional<double> value;
};

/// JSONL stream plus a CSV mirror with a fixed column order.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& jsonl, const std::filesystem::path& csv,
                bool append = false);
  void write(const RunRecord& rec);

 private:
  std::ofstream jsonl_, csv_;
};

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t start_step = 0;  // for resume
  std::size_t stop_step = 0;   // interrupt after this step (0 = run to schedule end)
  std::uint64_t seed = 0;
  std::size_t eval_interval = 0;
  std::size_t checkpoint_interval = 0;
  std::filesystem::path checkpoint_path;  // written when interval > 0 or on finish
  bool regression = false;                // mod_fn scalar-regression mode
};

using EvalHook = std::function<std::optional<std::pair<std::string, double>>(
    Model&, long long step)>;

struct TrainResult {
  std::vector<RunRecord> records;
  long long final_step = 0;
  double final_loss = 0.0;
};

// Loss for one sample (next-token cross entropy over supervised positions,
// or squared error on the channel-0 readout in regression mode).
Tensor sample_loss(const Model& model, const Sample& s, bool regression = false);

// Mean loss without recording; used for eval splits.
double eval_loss(const Model& model, const std::vector<Sample>& samples,
                 bool regression = false);

TrainResult train(Model& model, const std::vector<Sample>& data,
                  const OptimConfig& optim_cfg, const TrainConfig& cfg,
                  MetricsWriter* writer = nullptr, const EvalHook& eval_hook = {},
                  AdamW* optimizer = nullptr);

// Samples `max_new` tokens after the prompt; greedy when temperature <= 0.
std::vector<int> generate(const Model& model, std::span<const int> prompt,
                          std::size_t max_new, double temperature,
                          std::mt19937_64& rng);

std::vector<Sample> samples_of(const TaskDataset& d, const std::vector<std::size_t>& idx);
std::vector<Sample> samples_of_windows(const TextDataset& d,
                                       const std::vector<std::size_t>& windows);

}  // namespace fanformer

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "fanformer/model.hpp"
#include "fanformer/tasks.hpp"
#include "fanformer/training.hpp"

namespace fanformer {

enum class FlopsMode { same_param, same_dim };

/// Closed-form FLOPs per the projection-and-product accounting: the four
/// attention projections plus score/value products, the FFN products, and the
/// output head. Norms, softmax, and residuals are excluded.
struct FlopsReport {
  Variant variant = Variant::transformer;
  FlopsMode mode = FlopsMode::same_param;
  long long layers = 0, seq_len = 0, d_h = 0, vocab = 0;
  double attn_flops = 0, ffn_flops = 0, head_flops = 0, total = 0;
  double overhead_ratio = 0;  // vs the transformer row
};

FlopsReport count_flops(Variant variant, long long layers, long long seq_len,
                        long long d_h, long long vocab,
                        FlopsMode mode = FlopsMode::same_param, double p = 0.25);
FlopsReport count_flops(const ModelConfig& config, long long seq_len,
                        FlopsMode mode = FlopsMode::same_param);

std::string flops_csv_header();
std::string flops_csv_row(const FlopsReport& r);

struct EquivReport {
  int trials = 0;
  double max_deviation = 0.0;
  std::uint64_t worst_seed = 0;
  bool pass = false;
  double tolerance = 0.0;
};

// Fused ATF against the explicit standard_attention(fan_layer_prime(x))
// composition on random inputs and parameters.
EquivReport check_atf_equivalence(std::size_t d_h, std::size_t seq_len,
                                  std::size_t heads, int trials, double tolerance,
                                  std::uint64_t seed = 1);

enum class LipschitzFamily { mlp, transformer, fanformer, linear };

struct LipschitzEstimate {
  LipschitzFamily family = LipschitzFamily::mlp;
  std::size_t depth = 0;
  double scale = 0.0;  // perturbation scale attaining the max (0 = overall row)
  std::size_t samples = 0;
  double l_hat = 0.0;
  std::uint64_t seed = 0;
};

struct LipschitzConfig {
  std::size_t width = 32;
  std::size_t seq_len = 4;
  std::size_t samples = 1000;
  std::uint64_t seed = 1;
  std::vector<double> scales = {1e-3, 1e-2, 1e-1};
};

// Sampled lower-bound estimate: max over pairs (x, x + delta) drawn from the
// unit ball of ||f(x) - f(x+delta)|| / ||delta||.
std::vector<LipschitzEstimate> estimate_lipschitz(LipschitzFamily family,
                                                  const std::vector<std::size_t>& depths,
                                                  const LipschitzConfig& cfg);

// Same estimator on an explicit matrix, for oracle tests.
double sampled_operator_norm(const Tensor& w, std::size_t samples, std::uint64_t seed,
                             const std::vector<double>& scales = {1e-3, 1e-2, 1e-1});
double power_iteration_norm(const Tensor& w, int iterations = 200);

std::string lipschitz_csv_header();
std::string lipschitz_csv_row(const LipschitzEstimate& e);

struct HeatmapCell {
  int a = 0, b = 0;
  bool is_test = false;
  double accuracy = 0.0;
};

struct HeatmapResult {
  std::vector<HeatmapCell> cells;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

// Fraction of exactly-correct generations per grid point (samples_per_point
// generations at the given temperature, exact string match of the answer).
HeatmapResult heatmap_eval(const Model& model, const TaskDataset& dataset,
                           int samples_per_point = 10, double temperature = 0.5,
                           std::uint64_t seed = 1);

void write_heatmap_csv(const HeatmapResult& result, const std::filesystem::path& path);

// Accuracy on an explicit subset of samples, same generation protocol.
double generation_accuracy(const Model& model, const TaskDataset& dataset,
                           const std::vector<std::size_t>& idx, int samples_per_point,
                           double temperature, std::uint64_t seed);

struct SweepRow {
  double p = 0.0;
  double final_train_loss = 0.0;
  double eval_metric = 0.0;
};

struct SweepConfig {
  ModelConfig base;          // transformer reference for matching
  OptimConfig optim;
  TrainConfig train;
  std::vector<double> p_values;
};

// One parameter-matched fanformer per p, paired seeds and budgets.
std::vector<SweepRow> sweep_p(const SweepConfig& cfg, const std::vector<Sample>& data,
                              const std::vector<Sample>& eval_data);

}  // namespace fanformer

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>

#include "fanformer/layers.hpp"
#include "fanformer/tensor.hpp"
#include "json.hpp"

namespace fanformer {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class Variant {
  fanformer,
  transformer,
  transformer_atm,
  transformer_atl,
  fanformer_original_fan,
  transformer_ffn_fan,
};

enum class NormKind { rmsnorm, layernorm };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ModelConfig {
  Variant variant = Variant::fanformer;
  std::size_t d_h = 128;
  std::size_t n_layers = 2;
  std::size_t heads = 4;
  std::size_t d_f = 256;
  double p = 0.25;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 256;
  bool weight_tying = true;
  ScoreDivisor score_divisor = ScoreDivisor::sqrt_dk;
  NormKind norm = NormKind::rmsnorm;
  bool use_rope = true;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const ModelConfig& c);
// Strict: unknown keys are a ConfigError; absent keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LayerParams {
  // Pre-projection ahead of QKV; which fields are set depends on the variant.
  std::optional<FanLayerPrimeParams> fan;  // fanformer / original-FAN
  std::optional<Tensor> pre_linear;        // ATM (with GELU) / ATL (without)
  AttentionParams attn;
  // SwiGLU FFN, or a FAN layer (GELU linear branch) + down projection for the
  // FFN<-FAN ablation.
  FfnParams ffn;
  std::optional<FanLayerPrimeParams> ffn_fan;
  Tensor ffn_fan_down;  // d_f x d_h, FFN<-FAN only
  Tensor norm1_gain, norm2_gain;
};

struct Model {
  ModelConfig config;
  Tensor embedding;  // vocab x d_h
  std::vector<LayerParams> layers;
  Tensor final_norm_gain;
  Tensor lm_head;  // d_h x vocab; undefined when weight-tied

  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<Tensor*> parameters();
};

Model build(const ModelConfig& config);

// Logits (l x vocab) for a token sequence.
Tensor forward(const Model& model, std::span<const int> tokens, bool causal = true);
// Hidden state after one pre-norm block, exposed for composition tests.
Tensor block_forward(const Model& model, std::size_t layer, const Tensor& x, bool causal);

long long param_count(const ModelConfig& config);

// Config for target_variant with d_f picked to match base's parameter total.
ModelConfig match_params(const ModelConfig& base, Variant target_variant);

// Analytic starting point for the FFN shrink when moving transformer -> fanformer.
double analytic_df_delta(const ModelConfig& base);

// Weight init: truncated normal (std 0.02, cut at 2 sigma), zero biases,
// unit norm gains, all drawn from one seeded stream in declaration order.
double truncated_normal(std::mt19937_64& rng, double stddev);

// ---- checkpoint ------------------------------------------------------------
// One file: compact JSON header line (config + tensor manifest with byte
// offsets into the data section) then raw little-endian f64 payload.

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> meta;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_model(const std::filesystem::path& path, Model& model,
                std::map<std::string, std::string> meta = {});
Model model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace fanformer

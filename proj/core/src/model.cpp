// SPDX-License-Identifier: Apache-2.0
#include "fanformer/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace fanformer {

using nlohmann::json;

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::fanformer: return "fanformer";
    case Variant::transformer: return "transformer";
    case Variant::transformer_atm: return "transformer_atm";
    case Variant::transformer_atl: return "transformer_atl";
    case Variant::fanformer_original_fan: return "fanformer_original_fan";
    case Variant::transformer_ffn_fan: return "transformer_ffn_fan";
  }
  throw ConfigError("variant_name: unknown variant");
}

Variant variant_from_name(const std::string& name) {
  for (Variant v : {Variant::fanformer, Variant::transformer, Variant::transformer_atm,
                    Variant::transformer_atl, Variant::fanformer_original_fan,
                    Variant::transformer_ffn_fan})
    if (variant_name(v) == name) return v;
  throw ConfigError("unknown variant '" + name + "'");
}

void ModelConfig::validate() const {
  if (d_h == 0 || heads == 0 || d_h % heads != 0)
    throw ConfigError("d_h (" + std::to_string(d_h) + ") must be a positive multiple of heads (" +
                      std::to_string(heads) + ")");
  if (p < 0.0 || p >= 0.5)
    throw ConfigError("p must lie in [0, 0.5), got " + std::to_string(p));
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (d_f == 0) throw ConfigError("d_f must be positive");
  if (max_seq_len == 0) throw ConfigError("max_seq_len must be positive");
  if (use_rope && (d_h / heads) % 2 != 0)
    throw ConfigError("rope requires even head dimension, got d_k=" +
                      std::to_string(d_h / heads));
  bool fan_pre = variant == Variant::fanformer || variant == Variant::fanformer_original_fan;
  if (fan_pre && d_h < 2 * periodic_dim(d_h, p) + 1)
    throw ConfigError("p=" + std::to_string(p) + " leaves no linear branch at d_h=" +
                      std::to_string(d_h));
  if (variant == Variant::transformer_ffn_fan && d_f < 2 * periodic_dim(d_f, p) + 1)
    throw ConfigError("p=" + std::to_string(p) + " leaves no linear branch at d_f=" +
                      std::to_string(d_f));
}

double truncated_normal(std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (;;) {
    double v = dist(rng);
    if (std::abs(v) <= 2.0 * stddev) return v;
  }
}

namespace {

constexpr double kInitStd = 0.02;

Tensor init_weight(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  Tensor t = Tensor::zeros({rows, cols}, /*requires_grad=*/true);
  for (double& v : t.data()) v = truncated_normal(rng, kInitStd);
  return t;
}

FanLayerPrimeParams init_fan(std::mt19937_64& rng, std::size_t d_in,
                             std::size_t d_out, double p) {
  std::size_t dp = periodic_dim(d_out, p);
  std::size_t dpbar = d_out - 2 * dp;
  FanLayerPrimeParams fan;
  fan.w_p = init_weight(rng, d_in, dp);
  fan.w_pbar = init_weight(rng, d_in, dpbar);
  fan.b_pbar = Tensor::zeros({1, dpbar}, true);
  fan.p = p;
  return fan;
}

}  // namespace

Model build(const ModelConfig& config) {
  if (config.n_layers > 0) {
    config.validate();
  } else {
    ModelConfig probe = config;  // N=0 stacks are a test-only degenerate case
    probe.n_layers = 1;
    probe.validate();
  }

  Model model;
  model.config = config;
  std::mt19937_64 rng(config.seed);

  model.embedding = init_weight(rng, config.vocab_size, config.d_h);
  for (std::size_t n = 0; n < config.n_layers; ++n) {
    LayerParams layer;
    switch (config.variant) {
      case Variant::fanformer:
      case Variant::fanformer_original_fan:
        layer.fan = init_fan(rng, config.d_h, config.d_h, config.p);
        break;
      case Variant::transformer_atm:
      case Variant::transformer_atl:
        layer.pre_linear = init_weight(rng, config.d_h, config.d_h);
        break;
      case Variant::transformer:
      case Variant::transformer_ffn_fan:
        break;
    }
    layer.attn.w_q = init_weight(rng, config.d_h, config.d_h);
    layer.attn.w_k = init_weight(rng, config.d_h, config.d_h);
    layer.attn.w_v = init_weight(rng, config.d_h, config.d_h);
    layer.attn.w_o = init_weight(rng, config.d_h, config.d_h);
    layer.attn.heads = config.heads;
    layer.attn.use_rope = config.use_rope;
    layer.attn.divisor = config.score_divisor;
    if (config.variant == Variant::transformer_ffn_fan) {
      layer.ffn_fan = init_fan(rng, config.d_h, config.d_f, config.p);
      layer.ffn_fan_down = init_weight(rng, config.d_f, config.d_h);
    } else {
      layer.ffn.w_1 = init_weight(rng, config.d_h, config.d_f);
      layer.ffn.w_2 = init_weight(rng, config.d_h, config.d_f);
      layer.ffn.w_3 = init_weight(rng, config.d_f, config.d_h);
    }
    layer.norm1_gain = Tensor::full({1, config.d_h}, 1.0, true);
    layer.norm2_gain = Tensor::full({1, config.d_h}, 1.0, true);
    model.layers.push_back(std::move(layer));
  }
  model.final_norm_gain = Tensor::full({1, config.d_h}, 1.0, true);
  if (!config.weight_tying)
    model.lm_head = init_weight(rng, config.d_h, config.vocab_size);
  return model;
}

std::vector<std::pair<std::string, Tensor*>> Model::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embedding", &embedding);
  for (std::size_t n = 0; n < layers.size(); ++n) {
    std::string pre = "layers." + std::to_string(n) + ".";
    LayerParams& l = layers[n];
    if (l.fan) {
      out.emplace_back(pre + "fan.w_p", &l.fan->w_p);
      out.emplace_back(pre + "fan.w_pbar", &l.fan->w_pbar);
      out.emplace_back(pre + "fan.b_pbar", &l.fan->b_pbar);
    }
    if (l.pre_linear) out.emplace_back(pre + "pre_linear", &*l.pre_linear);
    out.emplace_back(pre + "attn.w_q", &l.attn.w_q);
    out.emplace_back(pre + "attn.w_k", &l.attn.w_k);
    out.emplace_back(pre + "attn.w_v", &l.attn.w_v);
    out.emplace_back(pre + "attn.w_o", &l.attn.w_o);
    if (l.ffn_fan) {
      out.emplace_back(pre + "ffn_fan.w_p", &l.ffn_fan->w_p);
      out.emplace_back(pre + "ffn_fan.w_pbar", &l.ffn_fan->w_pbar);
      out.emplace_back(pre + "ffn_fan.b_pbar", &l.ffn_fan->b_pbar);
      out.emplace_back(pre + "ffn_fan.down", &l.ffn_fan_down);
    } else {
      out.emplace_back(pre + "ffn.w_1", &l.ffn.w_1);
      out.emplace_back(pre + "ffn.w_2", &l.ffn.w_2);
      out.emplace_back(pre + "ffn.w_3", &l.ffn.w_3);
    }
    out.emplace_back(pre + "norm1_gain", &l.norm1_gain);
    out.emplace_back(pre + "norm2_gain", &l.norm2_gain);
  }
  out.emplace_back("final_norm_gain", &final_norm_gain);
  if (lm_head.defined()) out.emplace_back("lm_head", &lm_head);
  return out;
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

namespace {

Tensor apply_norm(const Model& model, const Tensor& x, const Tensor& gain) {
  return model.config.norm == NormKind::rmsnorm ? rms_norm(x, gain)
                                                : layer_norm(x, gain);
}

Tensor attention_path(const Model& model, const LayerParams& layer, const Tensor& h,
                      bool causal) {
  switch (model.config.variant) {
    case Variant::fanformer:
      return atf(h, *layer.fan, layer.attn, causal);
    case Variant::fanformer_original_fan:
      return standard_attention(fan_layer_original(h, *layer.fan, Activation::gelu),
                                layer.attn, causal);
    case Variant::transformer_atm:
      return standard_attention(unary(UnaryKind::gelu, matmul(h, *layer.pre_linear)),
                                layer.attn, causal);
    case Variant::transformer_atl:
      return standard_attention(matmul(h, *layer.pre_linear), layer.attn, causal);
    case Variant::transformer:
    case Variant::transformer_ffn_fan:
      return standard_attention(h, layer.attn, causal);
  }
  throw ConfigError("attention_path: unknown variant");
}

Tensor ffn_path(const Model& model, const LayerParams& layer, const Tensor& h) {
  if (model.config.variant == Variant::transformer_ffn_fan)
    return matmul(fan_layer_original(h, *layer.ffn_fan, Activation::gelu),
                  layer.ffn_fan_down);
  return swiglu_ffn(h, layer.ffn);
}

}  // namespace

Tensor block_forward(const Model& model, std::size_t layer_idx, const Tensor& x,
                     bool causal) {
  const LayerParams& layer = model.layers.at(layer_idx);
  Tensor y;
  {
    FlopScope scope(FlopCategory::attn);
    y = add(attention_path(model, layer, apply_norm(model, x, layer.norm1_gain), causal), x);
  }
  FlopScope scope(FlopCategory::ffn);
  return add(ffn_path(model, layer, apply_norm(model, y, layer.norm2_gain)), y);
}

Tensor forward(const Model& model, std::span<const int> tokens, bool causal) {
  if (tokens.size() > model.config.max_seq_len)
    throw UsageError("forward: sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(model.config.max_seq_len));
  for (int t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= model.config.vocab_size)
      throw UsageError("forward: token " + std::to_string(t) + " out of vocabulary " +
                       std::to_string(model.config.vocab_size));
  Tensor x = embedding_lookup(model.embedding, tokens);
  for (std::size_t n = 0; n < model.layers.size(); ++n)
    x = block_forward(model, n, x, causal);
  x = apply_norm(model, x, model.final_norm_gain);
  FlopScope scope(FlopCategory::head);
  return matmul(x, model.config.weight_tying ? transpose(model.embedding) : model.lm_head);
}

// ---- parameter accounting ---------------------------------------------------

namespace {
long long fan_param_count(std::size_t d_in, std::size_t d_out, double p) {
  long long dp = static_cast<long long>(periodic_dim(d_out, p));
  long long dpbar = static_cast<long long>(d_out) - 2 * dp;
  return static_cast<long long>(d_in) * dp + static_cast<long long>(d_in) * dpbar + dpbar;
}
}  // namespace

long long param_count(const ModelConfig& config) {
  long long dh = static_cast<long long>(config.d_h);
  long long df = static_cast<long long>(config.d_f);
  long long v = static_cast<long long>(config.vocab_size);
  long long per_layer = 4 * dh * dh + 2 * dh;  // QKVO + two norm gains
  switch (config.variant) {
    case Variant::fanformer:
    case Variant::fanformer_original_fan:
      per_layer += fan_param_count(config.d_h, config.d_h, config.p);
      break;
    case Variant::transformer_atm:
    case Variant::transformer_atl:
      per_layer += dh * dh;
      break;
    case Variant::transformer:
    case Variant::transformer_ffn_fan:
      break;
  }
  if (config.variant == Variant::transformer_ffn_fan)
    per_layer += fan_param_count(config.d_h, config.d_f, config.p) + df * dh;
  else
    per_layer += 3 * dh * df;
  long long total = v * dh + static_cast<long long>(config.n_layers) * per_layer + dh;
  if (!config.weight_tying) total += dh * v;
  return total;
}

double analytic_df_delta(const ModelConfig& base) {
  return (1.0 - base.p) * static_cast<double>(base.d_h) / 3.0;
}

ModelConfig match_params(const ModelConfig& base, Variant target_variant) {
  if (base.variant != Variant::transformer)
    throw ConfigError("match_params: base config must be the transformer reference");
  if (target_variant == Variant::transformer) return base;
  long long base_count = param_count(base);
  ModelConfig best = base;
  best.variant = target_variant;
  long long best_diff = -1;
  std::size_t upper = 2 * base.d_f + base.d_h + 8;
  for (std::size_t df = 1; df <= upper; ++df) {
    ModelConfig candidate = base;
    candidate.variant = target_variant;
    candidate.d_f = df;
    if (target_variant == Variant::transformer_ffn_fan &&
        df < 2 * periodic_dim(df, candidate.p) + 1)
      continue;
    long long diff = std::llabs(param_count(candidate) - base_count);
    if (best_diff < 0 || diff < best_diff) {
      best_diff = diff;
      best = candidate;
    }
  }
  if (best_diff < 0) throw ConfigError("match_params: no feasible d_f >= 1");
  return best;
}

// ---- serialization ----------------------------------------------------------

void to_json(json& j, const ModelConfig& c) {
  j = json{{"variant", variant_name(c.variant)},
           {"d_h", c.d_h},
           {"n_layers", c.n_layers},
           {"heads", c.heads},
           {"d_f", c.d_f},
           {"p", c.p},
           {"vocab_size", c.vocab_size},
           {"max_seq_len", c.max_seq_len},
           {"weight_tying", c.weight_tying},
           {"score_divisor", c.score_divisor == ScoreDivisor::sqrt_dk ? "sqrt_dk" : "sqrt_dh"},
           {"norm", c.norm == NormKind::rmsnorm ? "rmsnorm" : "layernorm"},
           {"use_rope", c.use_rope},
           {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  static const std::vector<std::string> known = {
      "variant", "d_h", "n_layers", "heads", "d_f", "p", "vocab_size",
      "max_seq_len", "weight_tying", "score_divisor", "norm", "use_rope", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("unknown model config key '" + it.key() + "'");
  if (j.contains("variant")) c.variant = variant_from_name(j.at("variant").get<std::string>());
  if (j.contains("d_h")) c.d_h = j.at("d_h").get<std::size_t>();
  if (j.contains("n_layers")) c.n_layers = j.at("n_layers").get<std::size_t>();
  if (j.contains("heads")) c.heads = j.at("heads").get<std::size_t>();
  if (j.contains("d_f")) c.d_f = j.at("d_f").get<std::size_t>();
  if (j.contains("p")) c.p = j.at("p").get<double>();
  if (j.contains("vocab_size")) c.vocab_size = j.at("vocab_size").get<std::size_t>();
  if (j.contains("max_seq_len")) c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  if (j.contains("weight_tying")) c.weight_tying = j.at("weight_tying").get<bool>();
  if (j.contains("score_divisor")) {
    std::string s = j.at("score_divisor").get<std::string>();
    if (s == "sqrt_dk") c.score_divisor = ScoreDivisor::sqrt_dk;
    else if (s == "sqrt_dh") c.score_divisor = ScoreDivisor::sqrt_dh;
    else throw ConfigError("unknown score_divisor '" + s + "'");
  }
  if (j.contains("norm")) {
    std::string s = j.at("norm").get<std::string>();
    if (s == "rmsnorm") c.norm = NormKind::rmsnorm;
    else if (s == "layernorm") c.norm = NormKind::layernorm;
    else throw ConfigError("unknown norm '" + s + "'");
  }
  if (j.contains("use_rope")) c.use_rope = j.at("use_rope").get<bool>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(double);
  }
  json header = {{"config", ckpt.config}, {"meta", ckpt.meta}, {"tensors", manifest}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("save_checkpoint: cannot open " + path.string());
  out << header.dump() << '\n';
  for (const auto& [name, t] : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("load_checkpoint: cannot open " + path.string());
  std::string header_line;
  if (!std::getline(in, header_line))
    throw UsageError("load_checkpoint: " + path.string() + " has no header");
  json header = json::parse(header_line);
  Checkpoint ckpt;
  ckpt.config = header.at("config").get<ModelConfig>();
  ckpt.meta = header.at("meta").get<std::map<std::string, std::string>>();
  std::streampos data_start = in.tellg();
  for (const json& entry : header.at("tensors")) {
    std::string name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    std::size_t offset = entry.at("offset").get<std::size_t>();
    Tensor t = Tensor::zeros(shape);
    in.seekg(data_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw UsageError("load_checkpoint: truncated data for tensor '" + name + "'");
    ckpt.tensors.emplace(std::move(name), std::move(t));
  }
  return ckpt;
}

void save_model(const std::filesystem::path& path, Model& model,
                std::map<std::string, std::string> meta) {
  Checkpoint ckpt;
  ckpt.config = model.config;
  ckpt.meta = std::move(meta);
  for (auto& [name, t] : model.named_parameters()) ckpt.tensors.emplace(name, *t);
  save_checkpoint(path, ckpt);
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model model = build(ckpt.config);
  for (auto& [name, t] : model.named_parameters()) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end())
      throw UsageError("checkpoint missing tensor '" + name + "'");
    if (it->second.shape() != t->shape())
      throw ShapeError("checkpoint tensor '" + name + "' shape " +
                       shape_str(it->second.shape()) + " vs model " + shape_str(t->shape()));
    Tensor loaded = it->second;
    loaded.set_requires_grad(true);
    *t = loaded;
  }
  return model;
}

}  // namespace fanformer

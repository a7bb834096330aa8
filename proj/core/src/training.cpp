// SPDX-License-Identifier: Apache-2.0
#include "fanformer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "json.hpp"

namespace fanformer {

double lr_schedule(std::size_t step, const OptimConfig& cfg) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (step >= cfg.total_steps) return cfg.min_lr_fraction * cfg.peak_lr;
  double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  double progress = span > 0 ? static_cast<double>(step - cfg.warmup_steps) / span : 1.0;
  double floor = cfg.min_lr_fraction;
  return cfg.peak_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

AdamW::AdamW(const std::vector<std::pair<std::string, Tensor*>>& params, OptimConfig cfg)
    : params_(params), cfg_(cfg) {
  for (auto& [name, t] : params_) {
    m_.push_back(Tensor::zeros(t->shape()));
    v_.push_back(Tensor::zeros(t->shape()));
  }
}

void AdamW::step(const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params_.size())
    throw TrainingError("adamw: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params_.size()) + " parameters");
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& theta = *params_[k].second;
    const auto& g = grads[k].data();
    if (grads[k].shape() != theta.shape())
      throw TrainingError("adamw: gradient shape mismatch for " + params_[k].first);
    auto& m = m_[k].data();
    auto& v = v_[k].data();
    auto& w = theta.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw TrainingError("adamw: non-finite gradient in parameter '" +
                            params_[k].first + "'");
      w[i] -= lr * cfg_.weight_decay * w[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

std::map<std::string, Tensor> AdamW::state() const {
  std::map<std::string, Tensor> out;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    out.emplace("optim.m." + params_[k].first, m_[k]);
    out.emplace("optim.v." + params_[k].first, v_[k]);
  }
  return out;
}

void AdamW::restore(const std::map<std::string, Tensor>& tensors, std::size_t steps_taken) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto im = tensors.find("optim.m." + params_[k].first);
    auto iv = tensors.find("optim.v." + params_[k].first);
    if (im == tensors.end() || iv == tensors.end())
      throw TrainingError("adamw restore: missing state for " + params_[k].first);
    m_[k] = im->second;
    v_[k] = iv->second;
  }
  t_ = steps_taken;
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double x : g.data()) sq += x * x;
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (Tensor& g : grads)
      for (double& x : g.data()) x *= s;
  }
  return norm;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask) {
  return masked_cross_entropy(logits, targets, mask);
}

MetricsWriter::MetricsWriter(const std::filesystem::path& jsonl,
                             const std::filesystem::path& csv, bool append) {
  auto mode = append ? std::ios::app : std::ios::trunc;
  jsonl_.open(jsonl, mode);
  csv_.open(csv, mode);
  if (!jsonl_ || !csv_)
    throw TrainingError("metrics writer: cannot open " + jsonl.string() + " / " + csv.string());
  if (!append) csv_ << "step,split,loss,lr,tokens_seen,wall_ms,metric_name,value\n";
  jsonl_.precision(17);
  csv_.precision(17);
}

void MetricsWriter::write(const RunRecord& rec) {
  nlohmann::json j = {{"step", rec.step},   {"split", rec.split},
                      {"loss", rec.loss},   {"lr", rec.lr},
                      {"tokens_seen", rec.tokens_seen}, {"wall_ms", rec.wall_ms}};
  if (rec.metric_name) {
    j["metric_name"] = *rec.metric_name;
    j["value"] = *rec.value;
  }
  jsonl_ << j.dump() << '\n';
  csv_ << rec.step << ',' << rec.split << ',' << rec.loss << ',' << rec.lr << ','
       << rec.tokens_seen << ',' << rec.wall_ms << ','
       << (rec.metric_name ? *rec.metric_name : "") << ',';
  if (rec.value) csv_ << *rec.value;
  csv_ << '\n';
  jsonl_.flush();
  csv_.flush();
}

Tensor sample_loss(const Model& model, const Sample& s, bool regression) {
  if (s.tokens.size() < 2) throw UsageError("sample_loss: sequence too short");
  std::span<const int> input(s.tokens.data(), s.tokens.size() - 1);
  Tensor logits = forward(model, input, /*causal=*/true);
  if (regression) {
    // Channel-0 readout at the position that predicts the first answer token.
    int pos = static_cast<int>(s.answer_start) - 1;
    if (pos < 0) pos = 0;
    Tensor pred = slice_lastdim(gather_rows(logits, std::vector<int>{pos}), 0, 1);
    Tensor err = add_scalar(pred, -static_cast<double>(s.c));
    return sum(mul(err, err));
  }
  std::vector<int> targets(s.tokens.begin() + 1, s.tokens.end());
  std::vector<std::uint8_t> mask(targets.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = (i + 1 >= s.answer_start);
  return cross_entropy(logits, targets, mask);
}

double eval_loss(const Model& model, const std::vector<Sample>& samples, bool regression) {
  double total = 0.0;
  for (const Sample& s : samples) total += sample_loss(model, s, regression).item();
  return samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
}

std::vector<Sample> samples_of(const TaskDataset& d, const std::vector<std::size_t>& idx) {
  std::vector<Sample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(d.samples[i]);
  return out;
}

std::vector<Sample> samples_of_windows(const TextDataset& d,
                                       const std::vector<std::size_t>& windows) {
  std::vector<Sample> out;
  out.reserve(windows.size());
  for (std::size_t w : windows) {
    Sample s;
    s.tokens = d.window(w);
    s.answer_start = 0;  // every position supervised
    out.push_back(std::move(s));
  }
  return out;
}

TrainResult train(Model& model, const std::vector<Sample>& data,
                  const OptimConfig& optim_cfg, const TrainConfig& cfg,
                  MetricsWriter* writer, const EvalHook& eval_hook, AdamW* optimizer) {
  if (data.empty()) throw TrainingError("train: empty dataset");
  auto named = model.named_parameters();
  AdamW local_optim(named, optim_cfg);
  AdamW& optim = optimizer ? *optimizer : local_optim;

  TrainResult result;
  long long tokens_seen = 0;
  auto t0 = std::chrono::steady_clock::now();

  // Epoch shuffles are a pure function of (seed, epoch), so a resumed run
  // sees exactly the batches an uninterrupted run would.
  std::size_t n = data.size();
  std::vector<std::size_t> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);
  auto batch_index = [&](std::size_t flat) -> std::size_t {
    std::size_t epoch = flat / n;
    if (epoch != order_epoch) {
      order.resize(n);
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + epoch);
      std::shuffle(order.begin(), order.end(), rng);
      order_epoch = epoch;
    }
    return order[flat % n];
  };
  if (cfg.start_step > 0) {
    for (std::size_t s = 0; s < cfg.start_step; ++s)
      for (std::size_t b = 0; b < cfg.batch_size; ++b)
        tokens_seen +=
            static_cast<long long>(data[batch_index(s * cfg.batch_size + b)].tokens.size()) - 1;
  }

  std::size_t end_step = optim_cfg.total_steps;
  if (cfg.stop_step > 0) end_step = std::min(end_step, cfg.stop_step);
  for (std::size_t step = cfg.start_step; step < end_step; ++step) {
    double lr = lr_schedule(step + 1, optim_cfg);
    double loss_value = 0.0;
    std::vector<Tensor> grads;
    {
      Tape tape;
      Tensor total;
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const Sample& s = data[batch_index(step * cfg.batch_size + b)];
        Tensor l = sample_loss(model, s, cfg.regression);
        total = total.defined() ? add(total, l) : l;
        tokens_seen += static_cast<long long>(s.tokens.size()) - 1;
      }
      Tensor loss = scale(total, 1.0 / static_cast<double>(cfg.batch_size));
      loss_value = loss.item();
      if (!std::isfinite(loss_value))
        throw TrainingError("train: non-finite loss at step " + std::to_string(step) +
                            " (last checkpoint retained)");
      tape.backward(loss);
      grads.reserve(named.size());
      for (auto& [name, t] : named) grads.push_back(tape.grad(*t));
    }
    clip_grad_norm(grads, optim_cfg.clip_norm);
    optim.step(grads, lr);

    RunRecord rec;
    rec.step = static_cast<long long>(step + 1);
    rec.split = "train";
    rec.loss = loss_value;
    rec.lr = lr;
    rec.tokens_seen = tokens_seen;
    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0).count();
    if (writer) writer->write(rec);
    result.records.push_back(rec);
    result.final_step = rec.step;
    result.final_loss = loss_value;

    if (eval_hook && cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0) {
      if (auto metric = eval_hook(model, rec.step)) {
        RunRecord ev = rec;
        ev.split = "eval";
        ev.metric_name = metric->first;
        ev.value = metric->second;
        if (writer) writer->write(ev);
        result.records.push_back(ev);
      }
    }
    if (!cfg.checkpoint_path.empty() && cfg.checkpoint_interval > 0 &&
        (step + 1) % cfg.checkpoint_interval == 0) {
      Checkpoint ckpt;
      ckpt.config = model.config;
      for (auto& [name, t] : model.named_parameters()) ckpt.tensors.emplace(name, *t);
      for (auto& [name, t] : optim.state()) ckpt.tensors.emplace(name, t);
      ckpt.meta["step"] = std::to_string(step + 1);
      ckpt.meta["optim_steps"] = std::to_string(optim.steps_taken());
      save_checkpoint(cfg.checkpoint_path, ckpt);
    }
  }
  return result;
}

std::vector<int> generate(const Model& model, std::span<const int> prompt,
                          std::size_t max_new, double temperature,
                          std::mt19937_64& rng) {
  std::vector<int> tokens(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < max_new; ++i) {
    Tensor logits = forward(model, tokens, /*causal=*/true);
    std::size_t v = logits.cols();
    const double* row = logits.data().data() + (logits.rows() - 1) * v;
    int next = 0;
    if (temperature <= 0.0) {
      next = static_cast<int>(std::max_element(row, row + v) - row);
    } else {
      std::vector<double> probs(v);
      double mx = *std::max_element(row, row + v);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        probs[j] = std::exp((row[j] - mx) / temperature);
        z += probs[j];
      }
      std::uniform_real_distribution<double> uni(0.0, z);
      double r = uni(rng);
      double acc = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        acc += probs[j];
        if (r <= acc) { next = static_cast<int>(j); break; }
        if (j + 1 == v) next = static_cast<int>(j);
      }
    }
    tokens.push_back(next);
  }
  return {tokens.begin() + static_cast<long>(prompt.size()), tokens.end()};
}

}  // namespace fanformer

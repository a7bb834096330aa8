// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "fanformer/model.hpp"
#include "fanformer/training.hpp"

using namespace fanformer;

namespace {

Model make_model(Variant v, std::size_t d_h, std::size_t layers) {
  ModelConfig c;
  c.variant = v;
  c.d_h = d_h;
  c.n_layers = layers;
  c.heads = 4;
  c.d_f = 8 * d_h / 3;
  c.vocab_size = 64;
  c.max_seq_len = 128;
  c.seed = 1;
  return build(c);
}

std::vector<int> make_tokens(std::size_t n) {
  std::mt19937_64 rng(2);
  std::vector<int> t(n);
  for (int& x : t) x = static_cast<int>(rng() % 64);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  std::size_t n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(-1, 1);
  Tensor a = Tensor::zeros({n, n}), b = Tensor::zeros({n, n});
  for (double& v : a.data()) v = d(rng);
  for (double& v : b.data()) v = d(rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * static_cast<long long>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Forward(benchmark::State& state) {
  Variant v = state.range(0) == 0 ? Variant::transformer : Variant::fanformer;
  Model m = make_model(v, 128, 2);
  std::vector<int> toks = make_tokens(64);
  for (auto _ : state) benchmark::DoNotOptimize(forward(m, toks));
}
BENCHMARK(BM_Forward)->Arg(0)->Arg(1);

void BM_TrainStep(benchmark::State& state) {
  Model m = make_model(Variant::fanformer, 64, 2);
  Sample s;
  s.tokens = make_tokens(33);
  s.answer_start = 1;
  OptimConfig oc;
  AdamW optim(m.named_parameters(), oc);
  auto named = m.named_parameters();
  for (auto _ : state) {
    std::vector<Tensor> grads;
    {
      Tape tape;
      Tensor loss = sample_loss(m, s);
      tape.backward(loss);
      for (auto& [name, t] : named) grads.push_back(tape.grad(*t));
    }
    clip_grad_norm(grads, 1.0);
    optim.step(grads, 1e-4);
  }
}
BENCHMARK(BM_TrainStep);

}  // namespace

BENCHMARK_MAIN();

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fanformer/tensor.hpp"

namespace fanformer {

// Hidden-dimension columns given over to each of the cos and sin branches.
std::size_t periodic_dim(std::size_t width, double p);

struct FanLayerPrimeParams {
  Tensor w_p;     // d_in x d_p
  Tensor w_pbar;  // d_in x d_pbar
  Tensor b_pbar;  // 1 x d_pbar
  double p = 0.25;

  std::size_t out_width() const { return 2 * w_p.cols() + w_pbar.cols(); }
};

enum class Activation { identity, gelu };

// [cos(X Wp) || sin(X Wp) || X Wpbar + Bpbar]; identity on the linear branch.
Tensor fan_layer_prime(const Tensor& x, const FanLayerPrimeParams& params);
// Same layer with an activation on the linear branch (GELU for the
// original-FAN ablation).
Tensor fan_layer_original(const Tensor& x, const FanLayerPrimeParams& params,
                          Activation activation);

enum class ScoreDivisor { sqrt_dk, sqrt_dh };

struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;  // all d_h x d_h
  std::size_t heads = 1;
  bool use_rope = false;
  ScoreDivisor divisor = ScoreDivisor::sqrt_dk;

  std::size_t d_h() const { return w_q.rows(); }
  std::size_t d_k() const { return w_q.rows() / heads; }
};

// Classical multi-head scaled-dot attention on x.
Tensor standard_attention(const Tensor& x, const AttentionParams& attn, bool causal);
// Fused ATF: FANLayer' on x, then QKV from the transformed input. Kept as an
// independent code path so the equivalence with
// standard_attention(fan_layer_prime(x)) stays a real check.
Tensor atf(const Tensor& x, const FanLayerPrimeParams& fan,
           const AttentionParams& attn, bool causal);

struct FfnParams {
  Tensor w_1, w_2;  // d_h x d_f
  Tensor w_3;       // d_f x d_h
};

// (Swish(X W1) (.) X W2) W3
Tensor swiglu_ffn(const Tensor& x, const FfnParams& params);

inline constexpr double kNormEps = 1e-6;

Tensor rms_norm(const Tensor& x, const Tensor& gain);
Tensor layer_norm(const Tensor& x, const Tensor& gain);

}  // namespace fanformer

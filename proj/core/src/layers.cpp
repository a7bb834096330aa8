// SPDX-License-Identifier: Apache-2.0
#include "fanformer/layers.hpp"

#include <cmath>
#include <limits>

namespace fanformer {

std::size_t periodic_dim(std::size_t width, double p) {
  return static_cast<std::size_t>(std::llround(p * static_cast<double>(width)));
}

namespace {

Tensor fan_branches(const Tensor& x, const FanLayerPrimeParams& params,
                    Activation activation) {
  if (x.cols() != params.w_p.rows() && params.w_p.cols() > 0)
    throw ShapeError("fan_layer: input " + shape_str(x.shape()) + " vs W_p " +
                     shape_str(params.w_p.shape()));
  Tensor linear = add_bias_row(matmul(x, params.w_pbar), params.b_pbar);
  if (activation == Activation::gelu) linear = unary(UnaryKind::gelu, linear);
  if (params.w_p.cols() == 0) return linear;
  Tensor projected = matmul(x, params.w_p);
  return concat_lastdim({unary(UnaryKind::cos, projected),
                         unary(UnaryKind::sin, projected), linear});
}

Tensor causal_mask(std::size_t l) {
  Tensor mask = Tensor::zeros({l, l});
  double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = i + 1; j < l; ++j) mask.data()[i * l + j] = ninf;
  return mask;
}

// Multi-head scaled-dot attention over a precomputed input; the one code
// path behind both standard_attention and the post-FANLayer' half of atf.
Tensor attention_core(const Tensor& input, const AttentionParams& attn, bool causal) {
  std::size_t dh = attn.d_h();
  if (input.cols() != dh)
    throw ShapeError("attention: input " + shape_str(input.shape()) + " vs W_Q " +
                     shape_str(attn.w_q.shape()));
  if (dh % attn.heads != 0)
    throw ShapeError("attention: d_h " + std::to_string(dh) + " not divisible by " +
                     std::to_string(attn.heads) + " heads");
  std::size_t dk = attn.d_k();
  std::size_t l = input.rows();
  double div = attn.divisor == ScoreDivisor::sqrt_dk
                   ? std::sqrt(static_cast<double>(dk))
                   : std::sqrt(static_cast<double>(dh));

  Tensor qf = matmul(input, attn.w_q);
  Tensor kf = matmul(input, attn.w_k);
  Tensor vf = matmul(input, attn.w_v);

  Tensor mask;
  if (causal && l > 1) mask = causal_mask(l);

  std::vector<Tensor> heads;
  heads.reserve(attn.heads);
  for (std::size_t h = 0; h < attn.heads; ++h) {
    Tensor q = slice_lastdim(qf, h * dk, dk);
    Tensor k = slice_lastdim(kf, h * dk, dk);
    Tensor v = slice_lastdim(vf, h * dk, dk);
    if (attn.use_rope) {
      q = rope(q);
      k = rope(k);
    }
    Tensor scores = scale(matmul(q, transpose(k)), 1.0 / div);
    if (mask.defined()) scores = add(scores, mask);
    heads.push_back(matmul(softmax_lastdim(scores), v));
  }
  return matmul(concat_lastdim(heads), attn.w_o);
}

}  // namespace

Tensor fan_layer_prime(const Tensor& x, const FanLayerPrimeParams& params) {
  return fan_branches(x, params, Activation::identity);
}

Tensor fan_layer_original(const Tensor& x, const FanLayerPrimeParams& params,
                          Activation activation) {
  return fan_branches(x, params, activation);
}

Tensor standard_attention(const Tensor& x, const AttentionParams& attn, bool causal) {
  return attention_core(x, attn, causal);
}

Tensor atf(const Tensor& x, const FanLayerPrimeParams& fan,
           const AttentionParams& attn, bool causal) {
  // Fused path: transform, then QKV from X_F inline.
  std::size_t dp = fan.w_p.cols();
  Tensor xf;
  if (dp == 0) {
    xf = add_bias_row(matmul(x, fan.w_pbar), fan.b_pbar);
  } else {
    Tensor projected = matmul(x, fan.w_p);
    xf = concat_lastdim({unary(UnaryKind::cos, projected),
                         unary(UnaryKind::sin, projected),
                         add_bias_row(matmul(x, fan.w_pbar), fan.b_pbar)});
  }
  return attention_core(xf, attn, causal);
}

Tensor swiglu_ffn(const Tensor& x, const FfnParams& params) {
  if (params.w_1.shape() != params.w_2.shape() ||
      params.w_1.cols() != params.w_3.rows())
    throw ShapeError("swiglu_ffn: W1 " + shape_str(params.w_1.shape()) + ", W2 " +
                     shape_str(params.w_2.shape()) + ", W3 " +
                     shape_str(params.w_3.shape()));
  Tensor gated = mul(unary(UnaryKind::swish, matmul(x, params.w_1)),
                     matmul(x, params.w_2));
  return matmul(gated, params.w_3);
}

Tensor rms_norm(const Tensor& x, const Tensor& gain) {
  FlopScope scope(FlopCategory::other);  // norms sit outside the table's accounting
  std::size_t n = x.cols();
  Tensor ones = Tensor::full({n, 1}, 1.0 / static_cast<double>(n));
  Tensor mean_sq = matmul(mul(x, x), ones);  // m x 1
  Tensor inv_rms = unary(UnaryKind::reciprocal,
                         unary(UnaryKind::sqrt, add_scalar(mean_sq, kNormEps)));
  return mul_bias_row(row_scale(x, inv_rms), gain);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain) {
  FlopScope scope(FlopCategory::other);
  std::size_t n = x.cols();
  Tensor avg = Tensor::full({n, 1}, 1.0 / static_cast<double>(n));
  Tensor mean = matmul(x, avg);  // m x 1
  Tensor centered = sub(x, matmul(mean, Tensor::full({1, n}, 1.0)));
  Tensor var = matmul(mul(centered, centered), avg);
  Tensor inv_std = unary(UnaryKind::reciprocal,
                         unary(UnaryKind::sqrt, add_scalar(var, kNormEps)));
  return mul_bias_row(row_scale(centered, inv_std), gain);
}

}  // namespace fanformer

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cmfuse/ops.hpp"
#include "cmfuse/optim.hpp"
#include "cmfuse/rng.hpp"
#include "cmfuse/tensor.hpp"

namespace cmfuse {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kInitStddev = 0.02;

// Pre-norm transformer encoder block: x + MHA(LN(x)), then x + FF(LN(x)).
struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, w_k, w_v, w_o;
  Tensor ln2_gain, ln2_bias;
  Tensor ff1_w, ff1_b;
  Tensor ff2_w, ff2_b;
};

struct TransformerParams {
  std::vector<BlockParams> blocks;
  std::size_t n_heads = 1;
};

// Post-softmax attention weights recorded during a forward pass:
// weights[layer][head] is a row-stochastic seq_len x seq_len matrix.
struct AttentionCapture {
  std::size_t seq_len = 0;
  std::vector<std::vector<std::vector<double>>> weights;
};

namespace detail {

// Every tensor gets its own seed stream keyed by name, so the same named
// tensor initializes identically no matter what else a model instantiates.
inline Tensor init_normal(ParamGroup& group, const std::string& name, Shape shape,
                          std::uint64_t seed) {
  Rng rng(mix_seed(seed, group.name + "/" + name));
  return group.add(name, Tensor::randn(std::move(shape), rng, kInitStddev));
}

inline Tensor init_zeros(ParamGroup& group, const std::string& name, Shape shape) {
  return group.add(name, Tensor::zeros(std::move(shape)));
}

inline Tensor init_ones(ParamGroup& group, const std::string& name, Shape shape) {
  return group.add(name, Tensor::full(std::move(shape), 1.0));
}

}  // namespace detail

inline BlockParams make_block(ParamGroup& group, const std::string& prefix, std::size_t d,
                              std::size_t d_ff, std::uint64_t seed) {
  BlockParams p;
  p.ln1_gain = detail::init_ones(group, prefix + ".ln1_gain", {d});
  p.ln1_bias = detail::init_zeros(group, prefix + ".ln1_bias", {d});
  p.w_q = detail::init_normal(group, prefix + ".w_q", {d, d}, seed);
  p.w_k = detail::init_normal(group, prefix + ".w_k", {d, d}, seed);
  p.w_v = detail::init_normal(group, prefix + ".w_v", {d, d}, seed);
  p.w_o = detail::init_normal(group, prefix + ".w_o", {d, d}, seed);
  p.ln2_gain = detail::init_ones(group, prefix + ".ln2_gain", {d});
  p.ln2_bias = detail::init_zeros(group, prefix + ".ln2_bias", {d});
  p.ff1_w = detail::init_normal(group, prefix + ".ff1_w", {d, d_ff}, seed);
  p.ff1_b = detail::init_zeros(group, prefix + ".ff1_b", {d_ff});
  p.ff2_w = detail::init_normal(group, prefix + ".ff2_w", {d_ff, d}, seed);
  p.ff2_b = detail::init_zeros(group, prefix + ".ff2_b", {d});
  return p;
}

inline TransformerParams make_transformer(ParamGroup& group, const std::string& prefix,
                                          std::size_t n_layers, std::size_t n_heads, std::size_t d,
                                          std::size_t d_ff, std::uint64_t seed) {
  TransformerParams t;
  t.n_heads = n_heads;
  for (std::size_t l = 0; l < n_layers; ++l) {
    t.blocks.push_back(make_block(group, prefix + ".block" + std::to_string(l), d, d_ff, seed));
  }
  return t;
}

// Multi-head self-attention with the exact 1/sqrt(d_k) scaling; positions
// with valid[j] == false are excluded as keys (weight exactly zero).
inline Tensor multi_head_attention(const Tensor& x, const BlockParams& p, std::size_t n_heads,
                                   const std::vector<bool>& valid,
                                   std::vector<std::vector<double>>* captured_heads = nullptr) {
  const std::size_t d = x.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw std::invalid_argument("multi_head_attention: width " + std::to_string(d) +
                                " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const std::size_t d_k = d / n_heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d_k));
  Tensor q = matmul(x, p.w_q);
  Tensor k = matmul(x, p.w_k);
  Tensor v = matmul(x, p.w_v);
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * d_k, d_k);
    Tensor kh = slice_cols(k, h * d_k, d_k);
    Tensor vh = slice_cols(v, h * d_k, d_k);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
    Tensor attn = masked_softmax_rows(scores, valid);
    if (captured_heads) captured_heads->push_back(attn.values());
    head_outputs.push_back(matmul(attn, vh));
  }
  Tensor merged = n_heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
  return matmul(merged, p.w_o);
}

inline Tensor block_forward(const Tensor& x, const BlockParams& p, std::size_t n_heads,
                            const std::vector<bool>& valid,
                            std::vector<std::vector<double>>* captured_heads = nullptr) {
  Tensor h = layer_norm(x, p.ln1_gain, p.ln1_bias, kLayerNormEps);
  Tensor attended = add(x, multi_head_attention(h, p, n_heads, valid, captured_heads));
  Tensor h2 = layer_norm(attended, p.ln2_gain, p.ln2_bias, kLayerNormEps);
  Tensor ff = add_row(matmul(gelu(add_row(matmul(h2, p.ff1_w), p.ff1_b)), p.ff2_w), p.ff2_b);
  return add(attended, ff);
}

inline Tensor transformer_forward(Tensor x, const TransformerParams& t,
                                  const std::vector<bool>& valid,
                                  AttentionCapture* capture = nullptr) {
  if (capture) {
    capture->seq_len = x.dim(0);
    capture->weights.clear();
  }
  for (const BlockParams& block : t.blocks) {
    std::vector<std::vector<double>>* heads = nullptr;
    if (capture) {
      capture->weights.emplace_back();
      heads = &capture->weights.back();
    }
    x = block_forward(x, block, t.n_heads, valid, heads);
  }
  return x;
}

}  // namespace cmfuse

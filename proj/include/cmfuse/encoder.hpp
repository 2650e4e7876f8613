#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmfuse/attention.hpp"
#include "cmfuse/image.hpp"
#include "cmfuse/ops.hpp"
#include "cmfuse/optim.hpp"
#include "cmfuse/tokenizer.hpp"

namespace cmfuse {

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_text_len = 16;
  std::size_t patch_size = 8;
  std::size_t vocab_size = 1024;
  std::size_t d_joint = 64;
  std::size_t image_size = 32;  // square input images

  std::size_t n_patches() const {
    return (image_size / patch_size) * (image_size / patch_size);
  }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_text_len == 0 ||
        patch_size == 0 || d_joint == 0 || image_size == 0) {
      throw std::invalid_argument("EncoderConfig: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("EncoderConfig: d_model " + std::to_string(d_model) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (image_size % patch_size != 0) {
      throw std::invalid_argument("EncoderConfig: image_size " + std::to_string(image_size) +
                                  " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (vocab_size <= kNumReservedIds) {
      throw std::invalid_argument("EncoderConfig: vocab_size must exceed reserved ids");
    }
  }
};

enum class Modality { kImage, kText };

// Length-s sequence of d_joint embeddings with a designated global position.
struct EmbeddingSequence {
  Tensor embeddings;  // s x d_joint
  Modality modality = Modality::kImage;
  std::size_t cls_index = 0;
  std::size_t valid_len = 0;

  std::size_t seq_len() const { return embeddings.dim(0); }
  std::size_t width() const { return embeddings.dim(1); }
};

struct ImageEncoderParams {
  Tensor patch_w, patch_b;  // patch_dim x d_model
  Tensor cls;               // 1 x d_model
  Tensor pos;               // (1 + n_patches) x d_model
  TransformerParams trunk;
  Tensor joint_w, joint_b;  // d_model x d_joint
};

struct TextEncoderParams {
  Tensor token_emb;  // vocab x d_model
  Tensor pos;        // max_text_len x d_model
  TransformerParams trunk;
  Tensor joint_w, joint_b;
};

inline ImageEncoderParams make_image_encoder(ParamGroup& group, const EncoderConfig& cfg,
                                             std::uint64_t seed) {
  ImageEncoderParams p;
  p.patch_w = detail::init_normal(group, "patch_w", {cfg.patch_dim(), cfg.d_model}, seed);
  p.patch_b = detail::init_zeros(group, "patch_b", {cfg.d_model});
  p.cls = detail::init_normal(group, "cls", {1, cfg.d_model}, seed);
  p.pos = detail::init_normal(group, "pos", {1 + cfg.n_patches(), cfg.d_model}, seed);
  p.trunk = make_transformer(group, "trunk", cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ff, seed);
  p.joint_w = detail::init_normal(group, "joint_w", {cfg.d_model, cfg.d_joint}, seed);
  p.joint_b = detail::init_zeros(group, "joint_b", {cfg.d_joint});
  return p;
}

inline TextEncoderParams make_text_encoder(ParamGroup& group, const EncoderConfig& cfg,
                                           std::uint64_t seed) {
  TextEncoderParams p;
  p.token_emb = detail::init_normal(group, "token_emb", {cfg.vocab_size, cfg.d_model}, seed);
  p.pos = detail::init_normal(group, "pos", {cfg.max_text_len, cfg.d_model}, seed);
  p.trunk = make_transformer(group, "trunk", cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ff, seed);
  p.joint_w = detail::init_normal(group, "joint_w", {cfg.d_model, cfg.d_joint}, seed);
  p.joint_b = detail::init_zeros(group, "joint_b", {cfg.d_joint});
  return p;
}

// Patch projection + positions + CLS, transformer blocks, projection into the
// joint space. Sequence layout: [CLS, patch_0, ..., patch_{n-1}].
inline EmbeddingSequence encode_image(const ImagePatchGrid& grid, const ImageEncoderParams& params,
                                      const EncoderConfig& cfg) {
  if (grid.patches.size() != cfg.n_patches()) {
    throw std::invalid_argument("encode_image: got " + std::to_string(grid.patches.size()) +
                                " patches, config expects " + std::to_string(cfg.n_patches()));
  }
  std::vector<double> flat;
  flat.reserve(grid.patches.size() * cfg.patch_dim());
  for (const std::vector<double>& patch : grid.patches) {
    if (patch.size() != cfg.patch_dim()) {
      throw std::invalid_argument("encode_image: patch dim " + std::to_string(patch.size()) +
                                  " does not match config " + std::to_string(cfg.patch_dim()));
    }
    flat.insert(flat.end(), patch.begin(), patch.end());
  }
  Tensor patches = Tensor::from({grid.patches.size(), cfg.patch_dim()}, std::move(flat));
  Tensor projected = add_row(matmul(patches, params.patch_w), params.patch_b);
  Tensor seq = add(concat_rows(params.cls, projected), params.pos);
  const std::vector<bool> valid(seq.dim(0), true);
  Tensor encoded = transformer_forward(seq, params.trunk, valid);
  Tensor joint = add_row(matmul(encoded, params.joint_w), params.joint_b);
  return EmbeddingSequence{joint, Modality::kImage, 0, joint.dim(0)};
}

// Token + positional embeddings, masked transformer blocks (pad positions are
// never attended to as keys), projection into the joint space.
inline EmbeddingSequence encode_text(const TokenSequence& tokens, const TextEncoderParams& params,
                                     const EncoderConfig& cfg) {
  if (tokens.ids.size() != cfg.max_text_len) {
    throw std::invalid_argument("encode_text: sequence length " + std::to_string(tokens.ids.size()) +
                                " does not match max_text_len " + std::to_string(cfg.max_text_len));
  }
  Tensor seq = add(embedding_rows(params.token_emb, tokens.ids), params.pos);
  std::vector<bool> valid(cfg.max_text_len, false);
  for (std::size_t i = 0; i < tokens.length && i < cfg.max_text_len; ++i) valid[i] = true;
  Tensor encoded = transformer_forward(seq, params.trunk, valid);
  Tensor joint = add_row(matmul(encoded, params.joint_w), params.joint_b);
  return EmbeddingSequence{joint, Modality::kText, 0, tokens.length};
}

// Symmetric InfoNCE over a batch of paired global embeddings: L2-normalize,
// score matrix S = I T^T / temperature, average both cross-entropy directions
// against the diagonal.
inline Tensor contrastive_loss(const Tensor& img_cls, const Tensor& txt_cls, double temperature) {
  detail::require_rank(img_cls, 2, "contrastive_loss");
  detail::require_same_shape(img_cls, txt_cls, "contrastive_loss");
  const std::size_t b = img_cls.dim(0);
  if (b < 2) throw std::invalid_argument("contrastive_loss: batch must have >= 2 pairs");
  if (temperature <= 0.0) throw std::invalid_argument("contrastive_loss: temperature must be > 0");
  Tensor img_n = l2_normalize_rows(img_cls);
  Tensor txt_n = l2_normalize_rows(txt_cls);
  Tensor scores = scale(matmul(img_n, transpose(txt_n)), 1.0 / temperature);
  std::vector<std::size_t> diagonal(b);
  for (std::size_t i = 0; i < b; ++i) diagonal[i] = i;
  Tensor loss_i2t = cross_entropy(scores, diagonal);
  Tensor loss_t2i = cross_entropy(transpose(scores), diagonal);
  return scale(add(loss_i2t, loss_t2i), 0.5);
}

// Cosine-similarity argmax over prompt embeddings; ties break to the lowest
// index. Pure inference, no gradients.
inline std::size_t zero_shot_classify(const Tensor& img_cls, const std::vector<Tensor>& prompt_cls) {
  if (prompt_cls.empty()) throw std::invalid_argument("zero_shot_classify: no prompt embeddings");
  const std::size_t d = img_cls.numel();
  double img_norm = 0.0;
  for (std::size_t i = 0; i < d; ++i) img_norm += img_cls.data()[i] * img_cls.data()[i];
  img_norm = std::sqrt(img_norm);
  if (img_norm == 0.0) throw std::runtime_error("zero_shot_classify: zero-norm image embedding");
  std::size_t best = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < prompt_cls.size(); ++k) {
    const Tensor& p = prompt_cls[k];
    if (p.numel() != d) {
      throw std::invalid_argument("zero_shot_classify: prompt " + std::to_string(k) +
                                  " has width " + std::to_string(p.numel()) + ", expected " +
                                  std::to_string(d));
    }
    double dot_ip = 0.0, p_norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dot_ip += img_cls.data()[i] * p.data()[i];
      p_norm += p.data()[i] * p.data()[i];
    }
    p_norm = std::sqrt(p_norm);
    if (p_norm == 0.0) {
      throw std::runtime_error("zero_shot_classify: zero-norm prompt embedding " + std::to_string(k));
    }
    const double sim = dot_ip / (img_norm * p_norm);
    if (sim > best_sim) {
      best_sim = sim;
      best = k;
    }
  }
  return best;
}

}  // namespace cmfuse

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "cmfuse/attention.hpp"
#include "cmfuse/encoder.hpp"
#include "cmfuse/ops.hpp"

namespace cmfuse {

enum class FusionVariant { kFull, kNoMA, kNoMANoSA };

inline std::string variant_name(FusionVariant v) {
  switch (v) {
    case FusionVariant::kFull: return "full";
    case FusionVariant::kNoMA: return "no_ma";
    case FusionVariant::kNoMANoSA: return "no_ma_no_sa";
  }
  throw std::logic_error("variant_name: unknown variant");
}

inline FusionVariant variant_from_name(const std::string& name) {
  if (name == "full") return FusionVariant::kFull;
  if (name == "no_ma") return FusionVariant::kNoMA;
  if (name == "no_ma_no_sa") return FusionVariant::kNoMANoSA;
  throw std::invalid_argument("unknown fusion variant: " + name +
                              " (expected full | no_ma | no_ma_no_sa)");
}

// Image and text embedding sequences stacked into one sequence (image segment
// first), with a learned modality-type embedding added per segment and the
// text padding carried in the validity mask.
struct FusedSequence {
  Tensor embeddings;  // (s_img + s_txt) x d_joint
  std::size_t img_begin = 0, img_len = 0;
  std::size_t txt_begin = 0, txt_len = 0;
  std::size_t img_cls_index = 0;
  std::size_t txt_cls_index = 0;
  std::vector<bool> valid;
};

inline FusedSequence concat_modalities(const EmbeddingSequence& img, const EmbeddingSequence& txt,
                                       const Tensor& modality_type_emb) {
  if (img.width() != txt.width()) {
    throw std::invalid_argument("concat_modalities: joint widths differ: " +
                                shape_str(img.embeddings.shape()) + " vs " +
                                shape_str(txt.embeddings.shape()));
  }
  if (modality_type_emb.rank() != 2 || modality_type_emb.dim(0) != 2 ||
      modality_type_emb.dim(1) != img.width()) {
    throw std::invalid_argument("concat_modalities: modality type embeddings must be [2x" +
                                std::to_string(img.width()) + "], got " +
                                shape_str(modality_type_emb.shape()));
  }
  Tensor img_part = add_row(img.embeddings, select_row(modality_type_emb, 0));
  Tensor txt_part = add_row(txt.embeddings, select_row(modality_type_emb, 1));

  FusedSequence fused;
  fused.embeddings = concat_rows(img_part, txt_part);
  fused.img_begin = 0;
  fused.img_len = img.seq_len();
  fused.txt_begin = img.seq_len();
  fused.txt_len = txt.seq_len();
  fused.img_cls_index = img.cls_index;
  fused.txt_cls_index = img.seq_len() + txt.cls_index;
  fused.valid.assign(img.seq_len() + txt.seq_len(), false);
  for (std::size_t i = 0; i < img.valid_len; ++i) fused.valid[i] = true;
  for (std::size_t i = 0; i < txt.valid_len; ++i) fused.valid[img.seq_len() + i] = true;
  return fused;
}

struct SequenceAttentionResult {
  Tensor img_cls;  // d_joint
  Tensor txt_cls;  // d_joint
  Tensor updated;  // s x d_joint
};

// The fused transformer encoder; returns the post-fusion global embeddings at
// the two CLS positions along with the updated sequence.
inline SequenceAttentionResult sequence_attention(const FusedSequence& fused,
                                                  const TransformerParams& params,
                                                  AttentionCapture* capture = nullptr) {
  Tensor updated = transformer_forward(fused.embeddings, params, fused.valid, capture);
  return SequenceAttentionResult{select_row(updated, fused.img_cls_index),
                                 select_row(updated, fused.txt_cls_index), updated};
}

struct ModalityAttentionResult {
  Tensor lambda;    // scalar in (0, 1)
  Tensor combined;  // d_joint
};

// Keyless modality attention: scores e_I = w.I', e_T = w.T', weight
// lambda = exp(e_I) / (exp(e_I) + exp(e_T)) evaluated as a stable logistic of
// (e_I - e_T), and c = lambda I' + (1 - lambda) T'.
inline ModalityAttentionResult modality_attention(const Tensor& img_cls, const Tensor& txt_cls,
                                                  const Tensor& w) {
  detail::require_rank(w, 1, "modality_attention");
  detail::require_same_shape(img_cls, txt_cls, "modality_attention");
  if (w.shape() != img_cls.shape()) {
    throw std::invalid_argument("modality_attention: w " + shape_str(w.shape()) +
                                " does not match embeddings " + shape_str(img_cls.shape()));
  }
  Tensor e_img = dot(w, img_cls);
  Tensor e_txt = dot(w, txt_cls);
  Tensor lambda = sigmoid(sub(e_img, e_txt));
  Tensor one_minus_lambda = affine(lambda, -1.0, 1.0);
  Tensor combined = add(scale_by(img_cls, lambda), scale_by(txt_cls, one_minus_lambda));
  return ModalityAttentionResult{lambda, combined};
}

// Fixed even average, used by the ablation variants in place of the learned
// modality attention.
inline ModalityAttentionResult modality_average(const Tensor& img_cls, const Tensor& txt_cls) {
  detail::require_same_shape(img_cls, txt_cls, "modality_average");
  Tensor lambda = Tensor::scalar(0.5);
  Tensor combined = scale(add(img_cls, txt_cls), 0.5);
  return ModalityAttentionResult{lambda, combined};
}

// Sum over tasks of the batch cross-entropy, where each task sees only the
// examples that carry its label. Tasks with no labeled example in the batch
// contribute nothing; a batch with no labels at all is an error.
inline Tensor multitask_loss(const std::vector<Tensor>& per_task_logits,
                             const std::vector<std::vector<std::size_t>>& per_task_labels) {
  if (per_task_logits.size() != per_task_labels.size()) {
    throw std::invalid_argument("multitask_loss: " + std::to_string(per_task_logits.size()) +
                                " logit blocks vs " + std::to_string(per_task_labels.size()) +
                                " label lists");
  }
  Tensor total;
  bool any = false;
  for (std::size_t k = 0; k < per_task_logits.size(); ++k) {
    if (per_task_labels[k].empty()) continue;
    Tensor task_loss = cross_entropy(per_task_logits[k], per_task_labels[k]);
    total = any ? add(total, task_loss) : task_loss;
    any = true;
  }
  if (!any) throw std::invalid_argument("multitask_loss: no labels present in batch");
  return total;
}

}  // namespace cmfuse

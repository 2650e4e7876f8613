#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmfuse/data.hpp"
#include "cmfuse/encoder.hpp"
#include "cmfuse/fusion.hpp"
#include "cmfuse/optim.hpp"
#include "cmfuse/sha256.hpp"

namespace cmfuse {

struct TaskSpec {
  std::string name;
  std::size_t n_classes = 2;
};

// Parameter group names; also the keys of the per-stage learning-rate maps.
inline constexpr const char* kGroupClipImage = "clip_image";
inline constexpr const char* kGroupClipText = "clip_text";
inline constexpr const char* kGroupCmaSa = "cma_sa";
inline constexpr const char* kGroupCmaMa = "cma_ma";
inline constexpr const char* kGroupMlp = "mlp";

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t fusion_layers = 2;
  std::size_t fusion_heads = 4;
  std::size_t d_hidden = 0;  // 0 means d_joint
  std::vector<TaskSpec> tasks;
  FusionVariant variant = FusionVariant::kFull;

  std::size_t hidden_width() const { return d_hidden == 0 ? encoder.d_joint : d_hidden; }

  void validate() const {
    encoder.validate();
    if (tasks.empty()) throw std::invalid_argument("ModelConfig: at least one task required");
    if (fusion_layers == 0 || fusion_heads == 0) {
      throw std::invalid_argument("ModelConfig: fusion dims must be positive");
    }
    if (encoder.d_joint % fusion_heads != 0) {
      throw std::invalid_argument("ModelConfig: d_joint " + std::to_string(encoder.d_joint) +
                                  " not divisible by fusion_heads " + std::to_string(fusion_heads));
    }
    std::set<std::string> names;
    for (const TaskSpec& t : tasks) {
      if (t.n_classes < 2) {
        throw std::invalid_argument("ModelConfig: task " + t.name + " needs >= 2 classes");
      }
      if (!names.insert(t.name).second) {
        throw std::invalid_argument("ModelConfig: duplicate task name " + t.name);
      }
    }
  }

  // Canonical text form; its SHA-256 is the checkpoint's config digest.
  std::string canonical_string() const {
    std::ostringstream os;
    os << "d_model=" << encoder.d_model << "\nn_layers=" << encoder.n_layers
       << "\nn_heads=" << encoder.n_heads << "\nd_ff=" << encoder.d_ff
       << "\nmax_text_len=" << encoder.max_text_len << "\npatch_size=" << encoder.patch_size
       << "\nvocab_size=" << encoder.vocab_size << "\nd_joint=" << encoder.d_joint
       << "\nimage_size=" << encoder.image_size << "\nfusion_layers=" << fusion_layers
       << "\nfusion_heads=" << fusion_heads << "\nd_hidden=" << hidden_width() << "\ntasks=";
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      if (i) os << ",";
      os << tasks[i].name << ":" << tasks[i].n_classes;
    }
    os << "\nvariant=" << variant_name(variant) << "\n";
    return os.str();
  }

  std::string digest_hex() const { return detail::sha256_hex(canonical_string()); }
};

// The full fusion classifier: toy CLIP-style encoders, the fused-sequence
// transformer, per-task modality attentions and per-task MLP heads, organized
// into the five freezable parameter groups of the staged training procedure.
class FusionModel {
 public:
  struct HeadParams {
    Tensor w;  // modality-attention vector; only present in the full variant
    Tensor hidden_w, hidden_b;
    Tensor out_w, out_b;
  };

  struct TaskOutput {
    Tensor logits;  // n_classes
    double lambda = 0.5;
  };

  FusionModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    clip_image_.name = kGroupClipImage;
    clip_text_.name = kGroupClipText;
    cma_sa_.name = kGroupCmaSa;
    cma_ma_.name = kGroupCmaMa;
    mlp_.name = kGroupMlp;

    img_enc_ = make_image_encoder(clip_image_, cfg_.encoder, init_seed);
    txt_enc_ = make_text_encoder(clip_text_, cfg_.encoder, init_seed);

    const std::size_t d = cfg_.encoder.d_joint;
    if (cfg_.variant != FusionVariant::kNoMANoSA) {
      fusion_trunk_ = make_transformer(cma_sa_, "trunk", cfg_.fusion_layers, cfg_.fusion_heads, d,
                                       2 * d, init_seed);
      modality_type_emb_ = detail::init_normal(cma_sa_, "modality_type_emb", {2, d}, init_seed);
    }
    for (std::size_t k = 0; k < cfg_.tasks.size(); ++k) {
      HeadParams head;
      const std::string prefix = "task_" + cfg_.tasks[k].name;
      if (cfg_.variant == FusionVariant::kFull) {
        // Starts at zero: the attention is neutral (lambda = 1/2) until trained.
        head.w = detail::init_zeros(cma_ma_, prefix + ".w", {d});
      }
      head.hidden_w = detail::init_normal(mlp_, prefix + ".hidden_w", {d, cfg_.hidden_width()},
                                          init_seed);
      head.hidden_b = detail::init_zeros(mlp_, prefix + ".hidden_b", {cfg_.hidden_width()});
      head.out_w = detail::init_normal(mlp_, prefix + ".out_w",
                                       {cfg_.hidden_width(), cfg_.tasks[k].n_classes}, init_seed);
      head.out_b = detail::init_zeros(mlp_, prefix + ".out_b", {cfg_.tasks[k].n_classes});
      heads_.push_back(std::move(head));
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<TaskSpec>& tasks() const { return cfg_.tasks; }

  std::vector<ParamGroup*> param_groups() {
    return {&clip_image_, &clip_text_, &cma_sa_, &cma_ma_, &mlp_};
  }
  std::vector<const ParamGroup*> param_groups() const {
    return {&clip_image_, &clip_text_, &cma_sa_, &cma_ma_, &mlp_};
  }

  ParamGroup& group(const std::string& name) {
    for (ParamGroup* g : param_groups()) {
      if (g->name == name) return *g;
    }
    throw std::invalid_argument("FusionModel: no parameter group named " + name);
  }

  const ImageEncoderParams& image_encoder() const { return img_enc_; }
  const TextEncoderParams& text_encoder() const { return txt_enc_; }
  const TransformerParams& fusion_trunk() const { return fusion_trunk_; }
  const std::vector<HeadParams>& heads() const { return heads_; }

  void zero_grad() {
    for (ParamGroup* g : param_groups()) {
      for (auto& [name, p] : g->params) p.zero_grad();
    }
  }

  EmbeddingSequence encode_image_input(const ExamplePair& pair) const {
    if (pair.image_embedding.has_value()) {
      if (pair.image_embedding->width() != cfg_.encoder.d_joint) {
        throw std::invalid_argument("pair " + pair.id + ": image embedding width " +
                                    std::to_string(pair.image_embedding->width()) +
                                    " does not match d_joint " +
                                    std::to_string(cfg_.encoder.d_joint));
      }
      return *pair.image_embedding;
    }
    if (!pair.image.has_value()) {
      throw std::invalid_argument("pair " + pair.id + ": no image content");
    }
    return encode_image(patchify(*pair.image, cfg_.encoder.patch_size), img_enc_, cfg_.encoder);
  }

  EmbeddingSequence encode_text_input(const ExamplePair& pair) const {
    if (pair.text_embedding.has_value()) {
      if (pair.text_embedding->width() != cfg_.encoder.d_joint) {
        throw std::invalid_argument("pair " + pair.id + ": text embedding width " +
                                    std::to_string(pair.text_embedding->width()) +
                                    " does not match d_joint " +
                                    std::to_string(cfg_.encoder.d_joint));
      }
      return *pair.text_embedding;
    }
    if (!pair.text.has_value()) {
      throw std::invalid_argument("pair " + pair.id + ": no text content");
    }
    return encode_text(tokenize(*pair.text, cfg_.encoder.vocab_size, cfg_.encoder.max_text_len),
                       txt_enc_, cfg_.encoder);
  }

  // Variant dispatch: Full runs fusion + learned modality attention, NoMA
  // fixes lambda at 1/2, NoMANoSA additionally bypasses the fused transformer
  // and classifies from the encoder CLS embeddings directly.
  std::vector<TaskOutput> forward(const EmbeddingSequence& img, const EmbeddingSequence& txt,
                                  AttentionCapture* capture = nullptr) const {
    Tensor img_cls, txt_cls;
    if (cfg_.variant == FusionVariant::kNoMANoSA) {
      img_cls = select_row(img.embeddings, img.cls_index);
      txt_cls = select_row(txt.embeddings, txt.cls_index);
    } else {
      const FusedSequence fused = concat_modalities(img, txt, modality_type_emb_);
      SequenceAttentionResult sa = sequence_attention(fused, fusion_trunk_, capture);
      img_cls = sa.img_cls;
      txt_cls = sa.txt_cls;
    }

    std::vector<TaskOutput> outputs;
    outputs.reserve(heads_.size());
    for (const HeadParams& head : heads_) {
      ModalityAttentionResult ma = cfg_.variant == FusionVariant::kFull
                                       ? modality_attention(img_cls, txt_cls, head.w)
                                       : modality_average(img_cls, txt_cls);
      Tensor x = reshape(ma.combined, {1, ma.combined.numel()});
      Tensor hidden = gelu(add_row(matmul(x, head.hidden_w), head.hidden_b));
      Tensor logits = add_row(matmul(hidden, head.out_w), head.out_b);
      outputs.push_back(TaskOutput{reshape(logits, {logits.dim(1)}), ma.lambda.value()});
    }
    return outputs;
  }

  std::vector<TaskOutput> forward_pair(const ExamplePair& pair,
                                       AttentionCapture* capture = nullptr) const {
    return forward(encode_image_input(pair), encode_text_input(pair), capture);
  }

  // Stable iteration over every parameter as (group, name, tensor).
  template <typename Fn>
  void for_each_param(Fn&& fn) {
    for (ParamGroup* g : param_groups()) {
      for (auto& [name, p] : g->params) fn(g->name, name, p);
    }
  }

 private:
  ModelConfig cfg_;
  ParamGroup clip_image_, clip_text_, cma_sa_, cma_ma_, mlp_;
  ImageEncoderParams img_enc_;
  TextEncoderParams txt_enc_;
  TransformerParams fusion_trunk_;
  Tensor modality_type_emb_;
  std::vector<HeadParams> heads_;
};

}  // namespace cmfuse

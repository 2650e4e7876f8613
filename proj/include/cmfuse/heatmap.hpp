#pragma once

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmfuse/eval.hpp"
#include "cmfuse/image.hpp"
#include "cmfuse/model.hpp"
#include "cmfuse/tokenizer.hpp"

namespace cmfuse {

struct Heatmap {
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  std::vector<double> values;  // min-max normalized to [0,1]; all-equal maps to zeros
  std::size_t layer = 0;
  std::string token;
};

// Post-softmax attention from the keyword token's query to each image-patch
// key at the chosen fusion layer (default: last), averaged over heads
// (head >= 0 selects one), reshaped to the patch grid and min-max normalized.
inline Heatmap attention_heatmap(const FusionModel& model, const ExamplePair& pair,
                                 const std::string& keyword_token, int layer = -1, int head = -1) {
  const ModelConfig& cfg = model.config();
  if (cfg.variant == FusionVariant::kNoMANoSA) {
    throw std::invalid_argument("attention_heatmap: variant " + variant_name(cfg.variant) +
                                " has no sequence attention");
  }
  if (!pair.text.has_value() || !pair.image.has_value()) {
    throw std::invalid_argument("attention_heatmap: pair " + pair.id +
                                " needs raw text and a raw image");
  }

  const std::vector<std::string> words = split_words(*pair.text);
  const std::string wanted = normalize_token(keyword_token);
  std::size_t word_pos = 0;
  bool found = false;
  const std::size_t window = cfg.encoder.max_text_len - 1;  // CLS occupies slot 0
  for (std::size_t i = 0; i < words.size() && i < window; ++i) {
    if (words[i] == wanted) {
      word_pos = i;
      found = true;
      break;
    }
  }
  if (!found) {
    std::ostringstream os;
    os << "attention_heatmap: token '" << keyword_token << "' not present; available:";
    for (std::size_t i = 0; i < words.size() && i < window; ++i) os << ' ' << words[i];
    throw std::invalid_argument(os.str());
  }

  AttentionCapture capture;
  model.forward(model.encode_image_input(pair), model.encode_text_input(pair), &capture);
  if (capture.weights.empty()) {
    throw std::runtime_error("attention_heatmap: no attention layers captured");
  }
  const std::size_t layer_idx =
      layer < 0 ? capture.weights.size() - 1 : static_cast<std::size_t>(layer);
  if (layer_idx >= capture.weights.size()) {
    throw std::invalid_argument("attention_heatmap: layer " + std::to_string(layer) +
                                " out of range (" + std::to_string(capture.weights.size()) +
                                " layers)");
  }
  const auto& heads = capture.weights[layer_idx];
  const std::size_t seq_len = capture.seq_len;

  // fused layout: [img CLS, patches..., txt CLS, tokens...]
  const std::size_t n_patches = cfg.encoder.n_patches();
  const std::size_t query_index = (1 + n_patches) + 1 + word_pos;
  if (query_index >= seq_len) {
    throw std::logic_error("attention_heatmap: query index out of range");
  }

  std::vector<double> heat(n_patches, 0.0);
  const std::size_t head_begin = head < 0 ? 0 : static_cast<std::size_t>(head);
  const std::size_t head_end = head < 0 ? heads.size() : static_cast<std::size_t>(head) + 1;
  if (head_begin >= heads.size() || head_end > heads.size()) {
    throw std::invalid_argument("attention_heatmap: head " + std::to_string(head) +
                                " out of range (" + std::to_string(heads.size()) + " heads)");
  }
  for (std::size_t h = head_begin; h < head_end; ++h) {
    for (std::size_t p = 0; p < n_patches; ++p) {
      heat[p] += heads[h][query_index * seq_len + (1 + p)];
    }
  }
  for (double& v : heat) v /= static_cast<double>(head_end - head_begin);

  const auto [mn_it, mx_it] = std::minmax_element(heat.begin(), heat.end());
  const double mn = *mn_it, mx = *mx_it;
  if (mx > mn) {
    for (double& v : heat) v = (v - mn) / (mx - mn);
  } else {
    std::fill(heat.begin(), heat.end(), 0.0);
  }

  Heatmap map;
  map.grid_rows = cfg.encoder.image_size / cfg.encoder.patch_size;
  map.grid_cols = map.grid_rows;
  map.values = std::move(heat);
  map.layer = layer_idx;
  map.token = wanted;
  return map;
}

inline std::string heatmap_csv(const Heatmap& map) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t r = 0; r < map.grid_rows; ++r) {
    for (std::size_t c = 0; c < map.grid_cols; ++c) {
      if (c) os << ',';
      os << map.values[r * map.grid_cols + c];
    }
    os << '\n';
  }
  return os.str();
}

// Writes <out_base>.csv and <out_base>.pgm side by side.
inline void export_attention_map(const FusionModel& model, const ExamplePair& pair,
                                 const std::string& keyword_token, const std::string& out_base,
                                 int layer = -1, int head = -1) {
  const Heatmap map = attention_heatmap(model, pair, keyword_token, layer, head);
  write_file_atomic(out_base + ".csv", heatmap_csv(map));
  std::ostringstream pgm;
  pgm << "P5\n" << map.grid_cols << " " << map.grid_rows << "\n255\n";
  for (double v : map.values) pgm << static_cast<char>(quantize_byte(v));
  write_file_atomic(out_base + ".pgm", pgm.str());
}

}  // namespace cmfuse

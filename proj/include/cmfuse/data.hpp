#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmfuse/encoder.hpp"
#include "cmfuse/image.hpp"
#include "cmfuse/rng.hpp"
#include "cmfuse/serialize.hpp"
#include "cmfuse/tokenizer.hpp"

namespace cmfuse {

// One image-text pair with per-task labels. Either side may come precomputed
// as an embedding sequence instead of raw content.
struct ExamplePair {
  std::string id;
  std::optional<RawImage> image;
  std::optional<EmbeddingSequence> image_embedding;
  std::optional<std::string> text;
  std::optional<EmbeddingSequence> text_embedding;
  std::map<std::string, std::size_t> labels;  // task name -> class; absent task = absent label
};

struct SynthTask {
  std::string name;
  std::size_t n_classes = 2;
  double text_relevance = 1.0;  // probability the text carries this task's keyword
};

struct SynthConfig {
  std::size_t n_examples = 0;
  std::vector<SynthTask> tasks;
  double image_noise_rate = 0.0;  // probability the image is replaced by uniform noise
  std::uint64_t seed = 0;
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t vocab_size = 1024;   // used to keep distractor ids disjoint from keyword ids
  std::size_t n_text_words = 8;

  void validate() const {
    if (tasks.empty()) throw std::invalid_argument("SynthConfig: at least one task required");
    for (const SynthTask& t : tasks) {
      if (t.n_classes < 2) {
        throw std::invalid_argument("SynthConfig: task " + t.name + " needs >= 2 classes");
      }
      if (t.text_relevance < 0.0 || t.text_relevance > 1.0) {
        throw std::invalid_argument("SynthConfig: task " + t.name + " relevance out of [0,1]");
      }
    }
    if (image_noise_rate < 0.0 || image_noise_rate > 1.0) {
      throw std::invalid_argument("SynthConfig: image_noise_rate out of [0,1]");
    }
    if (patch_size == 0 || image_size % patch_size != 0) {
      throw std::invalid_argument("SynthConfig: image_size must be divisible by patch_size");
    }
    if (tasks.size() > image_size / patch_size) {
      throw std::invalid_argument("SynthConfig: too many tasks (" + std::to_string(tasks.size()) +
                                  ") for " + std::to_string(image_size / patch_size) +
                                  " image regions");
    }
  }
};

inline std::string synth_keyword(std::size_t task_idx, std::size_t class_idx) {
  return "task" + std::to_string(task_idx) + "_class" + std::to_string(class_idx);
}

// Class color for a task region: distinct, deterministic, away from the cube
// corners so uniform noise does not fake a class.
inline std::array<double, 3> synth_class_color(std::size_t task_idx, std::size_t class_idx) {
  auto channel = [&](double mult) {
    const double v = mult * static_cast<double>(class_idx + 1) +
                     0.37 * static_cast<double>(task_idx + 1);
    return 0.1 + 0.8 * (v - std::floor(v));
  };
  return {channel(0.6180339887498949), channel(0.4142135623730951), channel(0.3247179572447460)};
}

// Task k's reserved image region: the k-th row of patches (full width).
struct SynthRegion {
  std::size_t row_begin, row_end;  // pixel rows [begin, end)
};

inline SynthRegion synth_task_region(const SynthConfig& cfg, std::size_t task_idx) {
  return SynthRegion{task_idx * cfg.patch_size, (task_idx + 1) * cfg.patch_size};
}

namespace detail {

// Distractor words drawn from a pool disjoint (by hashed id) from every
// keyword id, so text relevance is exactly the configured probability.
inline std::vector<std::string> synth_distractor_pool(const SynthConfig& cfg) {
  std::set<std::size_t> keyword_ids;
  for (std::size_t k = 0; k < cfg.tasks.size(); ++k) {
    for (std::size_t c = 0; c < cfg.tasks[k].n_classes; ++c) {
      keyword_ids.insert(hashed_token_id(normalize_token(synth_keyword(k, c)), cfg.vocab_size));
    }
  }
  std::vector<std::string> pool;
  for (std::size_t i = 0; pool.size() < 64 && i < 4096; ++i) {
    const std::string word = "filler" + std::to_string(i);
    if (!keyword_ids.count(hashed_token_id(word, cfg.vocab_size))) pool.push_back(word);
  }
  if (pool.size() < 8) throw std::runtime_error("synth_distractor_pool: vocab too small");
  return pool;
}

}  // namespace detail

// Synthetic multi-modal dataset with controllable modality relevance. Per
// example: each task draws a class and paints its color into the task's
// reserved image region (unless the whole image is replaced by uniform noise
// with probability image_noise_rate); the class keyword joins the text with
// probability text_relevance, distractor words fill the rest. Fully
// determined by the seed.
inline std::vector<ExamplePair> synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::vector<std::string> distractors = detail::synth_distractor_pool(cfg);

  std::vector<ExamplePair> pairs;
  pairs.reserve(cfg.n_examples);
  for (std::size_t idx = 0; idx < cfg.n_examples; ++idx) {
    ExamplePair pair;
    {
      std::ostringstream os;
      os << "synth-" << std::setw(6) << std::setfill('0') << idx;
      pair.id = os.str();
    }

    std::vector<std::size_t> classes(cfg.tasks.size());
    for (std::size_t k = 0; k < cfg.tasks.size(); ++k) {
      classes[k] = rng.next_below(cfg.tasks[k].n_classes);
      pair.labels[cfg.tasks[k].name] = classes[k];
    }

    // image: noise background, one painted strip per task; all pixel values
    // sit on the 8-bit PPM grid so a manifest round trip is byte-exact
    RawImage img = RawImage::blank(cfg.image_size, cfg.image_size);
    for (double& v : img.pixels) v = static_cast<double>(rng.next_below(256)) / 255.0;
    const bool noisy_image = rng.next_bernoulli(cfg.image_noise_rate);
    if (!noisy_image) {
      for (std::size_t k = 0; k < cfg.tasks.size(); ++k) {
        const SynthRegion region = synth_task_region(cfg, k);
        auto color = synth_class_color(k, classes[k]);
        for (double& ch : color) ch = quantize_byte(ch) / 255.0;
        for (std::size_t r = region.row_begin; r < region.row_end; ++r) {
          for (std::size_t c = 0; c < cfg.image_size; ++c) {
            for (std::size_t ch = 0; ch < 3; ++ch) img.at(r, c, ch) = color[ch];
          }
        }
      }
    }
    pair.image = std::move(img);

    // text: keywords by relevance draw, distractors fill, seeded shuffle
    std::vector<std::string> words;
    for (std::size_t k = 0; k < cfg.tasks.size(); ++k) {
      if (rng.next_bernoulli(cfg.tasks[k].text_relevance)) {
        words.push_back(synth_keyword(k, classes[k]));
      }
    }
    while (words.size() < cfg.n_text_words) {
      words.push_back(distractors[rng.next_below(distractors.size())]);
    }
    const std::vector<std::size_t> order = rng.permutation(words.size());
    std::string text;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (i) text.push_back(' ');
      text += words[order[i]];
    }
    pair.text = std::move(text);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

// ---------------------------------------------------------------- presets

inline SynthConfig mrwpa_like_preset(std::size_t n, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.n_examples = n;
  cfg.seed = seed;
  cfg.tasks = {{"colorlike", 8, 0.67}, {"patternlike", 6, 0.25}, {"stylelike", 8, 0.15}};
  cfg.image_noise_rate = 0.3;
  return cfg;
}

// Every text carries every task keyword and no image is noised; the clean
// corpus used for contrastive pre-training and the zero-shot baseline.
inline SynthConfig aligned_preset(std::size_t n, std::uint64_t seed) {
  SynthConfig cfg = mrwpa_like_preset(n, seed);
  for (SynthTask& t : cfg.tasks) t.text_relevance = 1.0;
  cfg.image_noise_rate = 0.0;
  return cfg;
}

inline SynthConfig toy2_preset(std::size_t n, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.n_examples = n;
  cfg.seed = seed;
  cfg.tasks = {{"taska", 4, 1.0}, {"taskb", 4, 1.0}};
  cfg.image_noise_rate = 0.0;
  return cfg;
}

inline SynthConfig synth_preset(const std::string& name, std::size_t n, std::uint64_t seed) {
  if (name == "mrwpa-like") return mrwpa_like_preset(n, seed);
  if (name == "aligned") return aligned_preset(n, seed);
  if (name == "toy2") return toy2_preset(n, seed);
  throw std::invalid_argument("unknown synth preset: " + name +
                              " (expected mrwpa-like | aligned | toy2)");
}

// ---------------------------------------------------------------- embedding files

// A precomputed embedding file is a single tensor record (same record format
// as checkpoints) holding an s x d matrix; the global position is row 0 and
// all rows are valid.
inline void write_embedding_file(const std::string& path, const Tensor& embeddings) {
  if (embeddings.rank() != 2) {
    throw std::invalid_argument("write_embedding_file: embeddings must be rank 2");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_embedding_file: cannot open " + path);
  write_record(out, "embedding", embeddings.shape(), embeddings.values());
}

inline EmbeddingSequence read_embedding_file(const std::string& path, Modality modality,
                                             std::size_t expected_width = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("embedding file not found: " + path);
  TensorRecord rec = read_record(in);
  if (rec.shape.size() != 2) {
    throw std::runtime_error("embedding file " + path + ": expected a rank-2 record");
  }
  if (expected_width != 0 && rec.shape[1] != expected_width) {
    throw std::runtime_error("embedding file " + path + ": dimension " +
                             std::to_string(rec.shape[1]) + " does not match d_joint " +
                             std::to_string(expected_width));
  }
  Tensor t = Tensor::from(rec.shape, std::move(rec.data));
  return EmbeddingSequence{t, modality, 0, t.dim(0)};
}

// ---------------------------------------------------------------- manifests

// JSONL manifest: one object per line with `id`, `labels`, and per modality
// either raw content (`text`, `image_path`) or a precomputed sequence
// (`text_embedding_path`, `image_embedding_path`). Paths are relative to the
// manifest's directory.
inline std::vector<ExamplePair> load_manifest(const std::string& manifest_path,
                                              std::size_t expected_d_joint = 0) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + manifest_path);
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();

  std::vector<ExamplePair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    line_no += 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("load_manifest: line " + std::to_string(line_no) +
                               ": malformed JSON: " + e.what());
    }
    auto fail = [&](const std::string& what) -> std::runtime_error {
      return std::runtime_error("load_manifest: line " + std::to_string(line_no) + ": " + what);
    };
    if (!obj.is_object()) throw fail("expected a JSON object");
    if (!obj.contains("id") || !obj["id"].is_string()) throw fail("missing string field 'id'");

    ExamplePair pair;
    pair.id = obj["id"].get<std::string>();

    if (obj.contains("text")) {
      if (!obj["text"].is_string()) throw fail("'text' must be a string");
      pair.text = obj["text"].get<std::string>();
    } else if (obj.contains("text_embedding_path")) {
      const std::string rel = obj["text_embedding_path"].get<std::string>();
      pair.text_embedding =
          read_embedding_file((base / rel).string(), Modality::kText, expected_d_joint);
    } else {
      throw fail("needs 'text' or 'text_embedding_path'");
    }

    if (obj.contains("image_path")) {
      const std::string rel = obj["image_path"].get<std::string>();
      pair.image = read_ppm((base / rel).string());
    } else if (obj.contains("image_embedding_path")) {
      const std::string rel = obj["image_embedding_path"].get<std::string>();
      pair.image_embedding =
          read_embedding_file((base / rel).string(), Modality::kImage, expected_d_joint);
    } else {
      throw fail("needs 'image_path' or 'image_embedding_path'");
    }

    if (!obj.contains("labels") || !obj["labels"].is_object()) {
      throw fail("missing object field 'labels'");
    }
    for (const auto& [task, value] : obj["labels"].items()) {
      if (!value.is_number_unsigned()) throw fail("label for task '" + task + "' must be a non-negative integer");
      pair.labels[task] = value.get<std::size_t>();
    }
    if (pair.labels.empty()) throw fail("at least one label required");
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

// Writes pairs (and their PPM images / embedding records) under `dir` and
// returns the manifest path. Output layout: dir/manifest.jsonl + dir/images/
// + dir/embeddings/.
inline std::string save_manifest(const std::vector<ExamplePair>& pairs, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path base(dir);
  bool made_images = false, made_embeddings = false;

  std::ostringstream manifest;
  for (const ExamplePair& pair : pairs) {
    nlohmann::json obj;
    obj["id"] = pair.id;
    if (pair.image.has_value()) {
      if (!made_images) {
        fs::create_directories(base / "images");
        made_images = true;
      }
      const std::string rel = "images/" + pair.id + ".ppm";
      write_ppm((base / rel).string(), *pair.image);
      obj["image_path"] = rel;
    } else if (pair.image_embedding.has_value()) {
      if (!made_embeddings) {
        fs::create_directories(base / "embeddings");
        made_embeddings = true;
      }
      const std::string rel = "embeddings/" + pair.id + ".img.emb";
      write_embedding_file((base / rel).string(), pair.image_embedding->embeddings);
      obj["image_embedding_path"] = rel;
    } else {
      throw std::invalid_argument("save_manifest: pair " + pair.id + " has no image content");
    }
    if (pair.text.has_value()) {
      obj["text"] = *pair.text;
    } else if (pair.text_embedding.has_value()) {
      if (!made_embeddings) {
        fs::create_directories(base / "embeddings");
        made_embeddings = true;
      }
      const std::string rel = "embeddings/" + pair.id + ".txt.emb";
      write_embedding_file((base / rel).string(), pair.text_embedding->embeddings);
      obj["text_embedding_path"] = rel;
    } else {
      throw std::invalid_argument("save_manifest: pair " + pair.id + " has no text content");
    }
    nlohmann::json labels = nlohmann::json::object();
    for (const auto& [task, cls] : pair.labels) labels[task] = cls;
    obj["labels"] = labels;
    manifest << obj.dump() << "\n";
  }

  const std::string manifest_path = (base / "manifest.jsonl").string();
  std::ofstream out(manifest_path, std::ios::binary);
  if (!out) throw std::runtime_error("save_manifest: cannot open " + manifest_path);
  out << manifest.str();
  return manifest_path;
}

// ---------------------------------------------------------------- splits and batches

struct DatasetSplit {
  std::vector<ExamplePair> train;
  std::vector<ExamplePair> validation;
  std::vector<ExamplePair> test;
};

// Seeded shuffle then contiguous cut. Sizes are floor(fraction * n) with the
// remainder distributed to the largest fractional parts (ties to the earlier
// split).
inline DatasetSplit split(const std::vector<ExamplePair>& pairs,
                          const std::array<double, 3>& fractions, std::uint64_t seed) {
  if (pairs.empty()) throw std::invalid_argument("split: empty input");
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw std::invalid_argument("split: fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");

  const std::size_t n = pairs.size();
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> remainders{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    remainders[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i) {
      if (remainders[i] > remainders[best] + 1e-12) best = i;
    }
    counts[best] += 1;
    remainders[best] = -1.0;
    assigned += 1;
  }

  Rng rng(seed);
  const std::vector<std::size_t> order = rng.permutation(n);
  DatasetSplit result;
  std::size_t cursor = 0;
  for (std::size_t part = 0; part < 3; ++part) {
    std::vector<ExamplePair>& dest =
        part == 0 ? result.train : (part == 1 ? result.validation : result.test);
    for (std::size_t i = 0; i < counts[part]; ++i) dest.push_back(pairs[order[cursor++]]);
  }
  return result;
}

// Per-epoch seeded shuffle (seed xor epoch); the final short batch is kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n_examples,
                                                     std::size_t batch_size, std::uint64_t seed,
                                                     std::uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batches: batch_size must be >= 1");
  Rng rng(seed ^ epoch);
  const std::vector<std::size_t> order = rng.permutation(n_examples);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n_examples; start += batch_size) {
    const std::size_t end = std::min(n_examples, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace cmfuse

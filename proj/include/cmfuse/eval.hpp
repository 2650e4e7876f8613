#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmfuse/data.hpp"
#include "cmfuse/metrics.hpp"
#include "cmfuse/model.hpp"
#include "cmfuse/ops.hpp"
#include "cmfuse/sha256.hpp"
#include "cmfuse/train.hpp"

namespace cmfuse {

// Atomic file write: temp sibling + rename.
inline void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_file_atomic: cannot open " + tmp);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write_file_atomic: failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

struct TaskEval {
  double accuracy = 0.0;
  std::map<std::size_t, double> class_recall_at_p;  // classes with positives only
  std::vector<std::size_t> classes_without_positives;
  double macro_recall_at_p = 0.0;
};

struct EvalReport {
  double precision_target = 0.9;
  std::size_t n_examples = 0;
  std::map<std::string, TaskEval> tasks;
  double mean_accuracy = 0.0;
  double mean_macro_recall = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["precision_target"] = precision_target;
    j["n_examples"] = n_examples;
    j["mean_accuracy"] = mean_accuracy;
    j["mean_macro_recall_at_precision"] = mean_macro_recall;
    nlohmann::json jt = nlohmann::json::object();
    for (const auto& [name, te] : tasks) {
      nlohmann::json e;
      e["accuracy"] = te.accuracy;
      e["macro_recall_at_precision"] = te.macro_recall_at_p;
      nlohmann::json per_class = nlohmann::json::object();
      for (const auto& [cls, r] : te.class_recall_at_p) per_class[std::to_string(cls)] = r;
      e["class_recall_at_precision"] = per_class;
      e["classes_without_positives"] = te.classes_without_positives;
      jt[name] = e;
    }
    j["tasks"] = jt;
    return j;
  }
};

// Inference over a split: per-task accuracy plus one-vs-rest macro recall at
// the target precision, with softmax confidences as the per-class scores.
// Classes with no positive example are reported and excluded from the macro.
inline EvalReport evaluate(const FusionModel& model, const std::vector<ExamplePair>& examples,
                           double precision_target) {
  if (examples.empty()) throw std::invalid_argument("evaluate: empty split");
  const std::vector<TaskSpec>& tasks = model.config().tasks;

  struct TaskScores {
    std::vector<std::size_t> predictions;
    std::vector<std::optional<std::size_t>> labels;
    std::vector<std::vector<double>> confidences;  // per labeled example
    std::vector<std::size_t> labeled;              // labels of labeled examples
  };
  std::vector<TaskScores> scores(tasks.size());

  for (const ExamplePair& pair : examples) {
    auto outputs = model.forward_pair(pair);
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      const Tensor probs = softmax(outputs[k].logits, 0);
      std::size_t argmax = 0;
      for (std::size_t j = 1; j < probs.numel(); ++j) {
        if (probs.data()[j] > probs.data()[argmax]) argmax = j;
      }
      scores[k].predictions.push_back(argmax);
      auto it = pair.labels.find(tasks[k].name);
      if (it != pair.labels.end()) {
        scores[k].labels.push_back(it->second);
        scores[k].confidences.push_back(probs.values());
        scores[k].labeled.push_back(it->second);
      } else {
        scores[k].labels.push_back(std::nullopt);
      }
    }
  }

  EvalReport report;
  report.precision_target = precision_target;
  report.n_examples = examples.size();
  double acc_sum = 0.0, recall_sum = 0.0;
  std::size_t task_count = 0;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    if (scores[k].labeled.empty()) continue;
    TaskEval te;
    te.accuracy = accuracy(scores[k].predictions, scores[k].labels);
    double class_sum = 0.0;
    std::size_t class_count = 0;
    for (std::size_t cls = 0; cls < tasks[k].n_classes; ++cls) {
      std::vector<double> cls_scores;
      std::vector<bool> positives;
      bool any_pos = false;
      for (std::size_t i = 0; i < scores[k].labeled.size(); ++i) {
        cls_scores.push_back(scores[k].confidences[i][cls]);
        const bool pos = scores[k].labeled[i] == cls;
        positives.push_back(pos);
        any_pos = any_pos || pos;
      }
      if (!any_pos) {
        te.classes_without_positives.push_back(cls);
        continue;
      }
      const double r = recall_at_precision(cls_scores, positives, precision_target);
      te.class_recall_at_p[cls] = r;
      class_sum += r;
      class_count += 1;
    }
    te.macro_recall_at_p = class_count == 0 ? 0.0 : class_sum / static_cast<double>(class_count);
    acc_sum += te.accuracy;
    recall_sum += te.macro_recall_at_p;
    task_count += 1;
    report.tasks[tasks[k].name] = std::move(te);
  }
  if (task_count == 0) throw std::invalid_argument("evaluate: no labeled task in split");
  report.mean_accuracy = acc_sum / static_cast<double>(task_count);
  report.mean_macro_recall = recall_sum / static_cast<double>(task_count);
  return report;
}

// Content digest over ids, labels, text, and pixel/embedding bytes; the
// ablation harness asserts all variants saw the same bytes.
inline std::string dataset_digest(const std::vector<ExamplePair>& pairs) {
  detail::Sha256 h;
  auto feed = [&h](const std::string& s) { h.update(s.data(), s.size()); };
  for (const ExamplePair& p : pairs) {
    feed(p.id);
    for (const auto& [task, cls] : p.labels) feed(task + "=" + std::to_string(cls));
    if (p.text.has_value()) feed(*p.text);
    if (p.image.has_value()) {
      h.update(p.image->pixels.data(), p.image->pixels.size() * sizeof(double));
    }
    if (p.image_embedding.has_value()) {
      const auto& v = p.image_embedding->embeddings.values();
      h.update(v.data(), v.size() * sizeof(double));
    }
    if (p.text_embedding.has_value()) {
      const auto& v = p.text_embedding->embeddings.values();
      h.update(v.data(), v.size() * sizeof(double));
    }
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (std::uint8_t b : h.finish()) {
    out.push_back(hex[b >> 4]);
    out.push_back(hex[b & 0xf]);
  }
  return out;
}

struct AblationVariantResult {
  std::map<std::string, double> task_recall;  // task -> macro recall@p, mean over seeds
  std::map<std::string, double> task_accuracy;
  double mean_macro_recall = 0.0;
  double mean_accuracy = 0.0;
  std::vector<EvalReport> per_seed;
  std::string dataset_digest;
};

struct AblationReport {
  std::vector<std::uint64_t> seeds;
  double precision_target = 0.9;
  std::map<std::string, AblationVariantResult> variants;  // keyed by variant name
  std::vector<std::string> low_relevance_tasks;
  bool ordering_holds = false;        // full >= no_ma >= no_ma_no_sa on mean macro recall
  double full_minus_noma = 0.0;       // overall gap
  double full_minus_noma_low_relevance = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seeds"] = seeds;
    j["precision_target"] = precision_target;
    j["low_relevance_tasks"] = low_relevance_tasks;
    j["ordering_holds"] = ordering_holds;
    j["full_minus_noma"] = full_minus_noma;
    j["full_minus_noma_low_relevance"] = full_minus_noma_low_relevance;
    nlohmann::json jv = nlohmann::json::object();
    for (const auto& [name, vr] : variants) {
      nlohmann::json e;
      e["mean_macro_recall_at_precision"] = vr.mean_macro_recall;
      e["mean_accuracy"] = vr.mean_accuracy;
      e["task_macro_recall_at_precision"] = vr.task_recall;
      e["task_accuracy"] = vr.task_accuracy;
      e["dataset_digest"] = vr.dataset_digest;
      nlohmann::json per_seed = nlohmann::json::array();
      for (const EvalReport& r : vr.per_seed) per_seed.push_back(r.to_json());
      e["per_seed"] = per_seed;
      jv[name] = e;
    }
    j["variants"] = jv;
    return j;
  }
};

// Trains all three fusion variants from identical initial conditions per seed
// on the same dataset, evaluates each on the test split, and reports the
// ordering verdict full >= no_ma >= no_ma_no_sa.
inline AblationReport run_ablation(const DatasetSplit& data, ModelConfig base_config,
                                   const ScheduleSettings& settings,
                                   const std::vector<std::uint64_t>& seeds,
                                   double precision_target,
                                   std::vector<std::string> low_relevance_tasks = {},
                                   const LogSink& log = nullptr) {
  if (seeds.empty()) throw std::invalid_argument("run_ablation: at least one seed required");
  const std::vector<FusionVariant> variant_order{FusionVariant::kFull, FusionVariant::kNoMA,
                                                 FusionVariant::kNoMANoSA};
  const std::string digest = dataset_digest(data.train);

  AblationReport report;
  report.seeds = seeds;
  report.precision_target = precision_target;
  report.low_relevance_tasks = low_relevance_tasks;

  for (FusionVariant variant : variant_order) {
    AblationVariantResult result;
    result.dataset_digest = dataset_digest(data.train);
    if (result.dataset_digest != digest) {
      throw std::runtime_error("run_ablation: dataset changed between variants");
    }
    for (std::uint64_t seed : seeds) {
      ModelConfig cfg = base_config;
      cfg.variant = variant;
      FusionModel model(cfg, seed);
      if (log) log({variant_name(variant), 0, "train_start_seed", static_cast<double>(seed)});
      run_full_schedule(model, data.train, data.validation, settings, seed, log);
      EvalReport eval_report = evaluate(model, data.test, precision_target);
      for (const auto& [task, te] : eval_report.tasks) {
        result.task_recall[task] += te.macro_recall_at_p;
        result.task_accuracy[task] += te.accuracy;
      }
      result.mean_macro_recall += eval_report.mean_macro_recall;
      result.mean_accuracy += eval_report.mean_accuracy;
      result.per_seed.push_back(std::move(eval_report));
    }
    const double n = static_cast<double>(seeds.size());
    for (auto& [task, v] : result.task_recall) v /= n;
    for (auto& [task, v] : result.task_accuracy) v /= n;
    result.mean_macro_recall /= n;
    result.mean_accuracy /= n;
    report.variants[variant_name(variant)] = std::move(result);
  }

  const AblationVariantResult& full = report.variants.at("full");
  const AblationVariantResult& noma = report.variants.at("no_ma");
  const AblationVariantResult& nosa = report.variants.at("no_ma_no_sa");
  report.ordering_holds = full.mean_macro_recall >= noma.mean_macro_recall &&
                          noma.mean_macro_recall >= nosa.mean_macro_recall;
  report.full_minus_noma = full.mean_macro_recall - noma.mean_macro_recall;
  if (!low_relevance_tasks.empty()) {
    double gap = 0.0;
    for (const std::string& task : low_relevance_tasks) {
      gap += full.task_recall.at(task) - noma.task_recall.at(task);
    }
    report.full_minus_noma_low_relevance = gap / static_cast<double>(low_relevance_tasks.size());
  }
  return report;
}

}  // namespace cmfuse

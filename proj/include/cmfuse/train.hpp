#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmfuse/checkpoint.hpp"
#include "cmfuse/data.hpp"
#include "cmfuse/metrics.hpp"
#include "cmfuse/model.hpp"
#include "cmfuse/optim.hpp"

namespace cmfuse {

enum class Stage { kWarmUp, kEndToEnd, kTuning };

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kWarmUp: return "warmup";
    case Stage::kEndToEnd: return "end_to_end";
    case Stage::kTuning: return "tuning";
  }
  throw std::logic_error("stage_name: unknown stage");
}

inline int stage_index(Stage s) { return static_cast<int>(s); }

// One stage of the three-stage schedule: which groups train, at what rate,
// for how many epochs. lr 0 and frozen are the same thing.
struct StagePlan {
  Stage stage = Stage::kWarmUp;
  std::size_t epochs = 1;
  std::map<std::string, double> group_lrs;
  std::size_t batch_size = 32;

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("StagePlan: epochs must be positive");
    if (batch_size == 0) throw std::invalid_argument("StagePlan: batch_size must be positive");
    for (const char* name :
         {kGroupClipImage, kGroupClipText, kGroupCmaSa, kGroupCmaMa, kGroupMlp}) {
      auto it = group_lrs.find(name);
      if (it == group_lrs.end()) throw std::invalid_argument(std::string("StagePlan: missing lr for group ") + name);
      if (it->second < 0.0) throw std::invalid_argument(std::string("StagePlan: negative lr for group ") + name);
    }
    const double clip_img = group_lrs.at(kGroupClipImage);
    const double clip_txt = group_lrs.at(kGroupClipText);
    const double sa = group_lrs.at(kGroupCmaSa);
    const double ma = group_lrs.at(kGroupCmaMa);
    const double mlp = group_lrs.at(kGroupMlp);
    switch (stage) {
      case Stage::kWarmUp:
        if (clip_img != 0.0 || clip_txt != 0.0 || sa <= 0.0 || ma <= 0.0 || mlp <= 0.0) {
          throw std::invalid_argument("StagePlan: warm-up trains cma_sa/cma_ma/mlp with encoders frozen");
        }
        break;
      case Stage::kEndToEnd:
        if (clip_img <= 0.0 || clip_txt <= 0.0 || sa <= 0.0 || ma <= 0.0 || mlp <= 0.0) {
          throw std::invalid_argument("StagePlan: end-to-end trains every group");
        }
        break;
      case Stage::kTuning:
        if (clip_img != 0.0 || clip_txt != 0.0 || sa != 0.0 || ma <= 0.0 || mlp <= 0.0) {
          throw std::invalid_argument("StagePlan: tuning trains only cma_ma and mlp");
        }
        break;
    }
  }
};

// Canonical per-stage learning-rate assignment with a single base rate.
inline StagePlan make_stage_plan(Stage stage, std::size_t epochs, double lr,
                                 std::size_t batch_size) {
  StagePlan plan;
  plan.stage = stage;
  plan.epochs = epochs;
  plan.batch_size = batch_size;
  switch (stage) {
    case Stage::kWarmUp:
      plan.group_lrs = {{kGroupClipImage, 0.0}, {kGroupClipText, 0.0}, {kGroupCmaSa, lr},
                        {kGroupCmaMa, lr},     {kGroupMlp, lr}};
      break;
    case Stage::kEndToEnd:
      plan.group_lrs = {{kGroupClipImage, lr}, {kGroupClipText, lr}, {kGroupCmaSa, lr},
                        {kGroupCmaMa, lr},     {kGroupMlp, lr}};
      break;
    case Stage::kTuning:
      plan.group_lrs = {{kGroupClipImage, 0.0}, {kGroupClipText, 0.0}, {kGroupCmaSa, 0.0},
                        {kGroupCmaMa, lr},      {kGroupMlp, lr}};
      break;
  }
  return plan;
}

struct EpochStats {
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::map<std::string, double> val_accuracy;
  double mean_val_accuracy = 0.0;
};

struct TrainReport {
  Stage stage = Stage::kWarmUp;
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;
};

struct LogEvent {
  std::string stage;
  std::int64_t epoch = 0;
  std::string metric;
  double value = 0.0;
};
using LogSink = std::function<void(const LogEvent&)>;

struct SplitMetrics {
  double loss = 0.0;
  std::map<std::string, double> accuracy;
  double mean_accuracy = 0.0;
};

// Inference pass over a split: multitask loss plus per-task accuracy.
inline SplitMetrics evaluate_split(const FusionModel& model,
                                   const std::vector<ExamplePair>& split,
                                   std::size_t batch_size) {
  if (split.empty()) throw std::invalid_argument("evaluate_split: empty split");
  const std::vector<TaskSpec>& tasks = model.config().tasks;
  std::vector<std::vector<std::size_t>> predictions(tasks.size());
  std::vector<std::vector<std::optional<std::size_t>>> labels(tasks.size());

  SplitMetrics out;
  double loss_sum = 0.0;
  std::size_t n_batches = 0;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t end = std::min(split.size(), start + batch_size);
    std::vector<std::vector<Tensor>> logit_rows(tasks.size());
    std::vector<std::vector<std::size_t>> batch_labels(tasks.size());
    for (std::size_t i = start; i < end; ++i) {
      const ExamplePair& pair = split[i];
      auto outputs = model.forward_pair(pair);
      for (std::size_t k = 0; k < tasks.size(); ++k) {
        const Tensor& logits = outputs[k].logits;
        std::size_t argmax = 0;
        for (std::size_t j = 1; j < logits.numel(); ++j) {
          if (logits.data()[j] > logits.data()[argmax]) argmax = j;
        }
        predictions[k].push_back(argmax);
        auto it = pair.labels.find(tasks[k].name);
        if (it != pair.labels.end()) {
          labels[k].push_back(it->second);
          logit_rows[k].push_back(reshape(logits, {1, logits.numel()}));
          batch_labels[k].push_back(it->second);
        } else {
          labels[k].push_back(std::nullopt);
        }
      }
    }
    std::vector<Tensor> stacked;
    std::vector<std::vector<std::size_t>> stacked_labels;
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      if (batch_labels[k].empty()) continue;
      stacked.push_back(concat_rows(logit_rows[k]));
      stacked_labels.push_back(batch_labels[k]);
    }
    loss_sum += multitask_loss(stacked, stacked_labels).value();
    n_batches += 1;
  }
  out.loss = loss_sum / static_cast<double>(n_batches);

  double acc_sum = 0.0;
  std::size_t acc_count = 0;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    bool any = false;
    for (const auto& l : labels[k]) any = any || l.has_value();
    if (!any) continue;
    const double acc = accuracy(predictions[k], labels[k]);
    out.accuracy[tasks[k].name] = acc;
    acc_sum += acc;
    acc_count += 1;
  }
  if (acc_count == 0) throw std::invalid_argument("evaluate_split: no labels in split");
  out.mean_accuracy = acc_sum / static_cast<double>(acc_count);
  return out;
}

// One stage of Algorithm-1-style training: seeded shuffling, forward /
// multitask loss / backward / Adam on the unfrozen groups, validation after
// every epoch, best checkpoint by highest mean validation accuracy (ties:
// lower validation loss, then earlier epoch).
inline std::pair<Checkpoint, TrainReport> run_stage(FusionModel& model,
                                                    const std::vector<ExamplePair>& train_split,
                                                    const std::vector<ExamplePair>& val_split,
                                                    const StagePlan& plan, std::uint64_t seed,
                                                    double weight_decay = 1e-4,
                                                    const LogSink& log = nullptr) {
  plan.validate();
  if (train_split.empty()) throw std::invalid_argument("run_stage: empty train split");
  if (val_split.empty()) throw std::invalid_argument("run_stage: empty validation split");

  const std::vector<TaskSpec>& tasks = model.config().tasks;
  for (ParamGroup* g : model.param_groups()) {
    g->lr = plan.group_lrs.at(g->name);
    g->frozen = g->lr == 0.0;
  }
  AdamState optim(model.param_groups(), weight_decay);
  Rng stage_rng(mix_seed(seed, "stage_rng/" + stage_name(plan.stage)));

  TrainReport report;
  report.stage = plan.stage;
  Checkpoint best;
  double best_acc = -1.0, best_loss = 0.0;

  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    double loss_sum = 0.0;
    const auto epoch_batches = batches(train_split.size(), plan.batch_size, seed, epoch);
    for (std::size_t bi = 0; bi < epoch_batches.size(); ++bi) {
      Tape tape;
      std::vector<std::vector<Tensor>> logit_rows(tasks.size());
      std::vector<std::vector<std::size_t>> batch_labels(tasks.size());
      for (std::size_t idx : epoch_batches[bi]) {
        const ExamplePair& pair = train_split[idx];
        auto outputs = model.forward_pair(pair);
        for (std::size_t k = 0; k < tasks.size(); ++k) {
          auto it = pair.labels.find(tasks[k].name);
          if (it == pair.labels.end()) continue;
          logit_rows[k].push_back(reshape(outputs[k].logits, {1, outputs[k].logits.numel()}));
          batch_labels[k].push_back(it->second);
        }
      }
      std::vector<Tensor> stacked;
      std::vector<std::vector<std::size_t>> stacked_labels;
      for (std::size_t k = 0; k < tasks.size(); ++k) {
        if (batch_labels[k].empty()) continue;
        stacked.push_back(concat_rows(logit_rows[k]));
        stacked_labels.push_back(batch_labels[k]);
      }
      Tensor loss = multitask_loss(stacked, stacked_labels);
      const double loss_value = loss.value();
      if (!std::isfinite(loss_value)) {
        throw std::runtime_error("run_stage: non-finite loss in stage " + stage_name(plan.stage) +
                                 ", epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(bi));
      }
      loss_sum += loss_value;
      tape.backward(loss);
      adam_step(model.param_groups(), optim);
      model.zero_grad();
    }

    EpochStats stats;
    stats.train_loss = loss_sum / static_cast<double>(epoch_batches.size());
    const SplitMetrics val = evaluate_split(model, val_split, plan.batch_size);
    stats.val_loss = val.loss;
    stats.val_accuracy = val.accuracy;
    stats.mean_val_accuracy = val.mean_accuracy;
    report.epochs.push_back(stats);
    if (log) {
      log({stage_name(plan.stage), static_cast<std::int64_t>(epoch), "train_loss", stats.train_loss});
      log({stage_name(plan.stage), static_cast<std::int64_t>(epoch), "val_loss", stats.val_loss});
      log({stage_name(plan.stage), static_cast<std::int64_t>(epoch), "val_accuracy",
           stats.mean_val_accuracy});
    }

    const bool improved = stats.mean_val_accuracy > best_acc ||
                          (stats.mean_val_accuracy == best_acc && stats.val_loss < best_loss);
    if (improved) {
      best_acc = stats.mean_val_accuracy;
      best_loss = stats.val_loss;
      report.best_epoch = epoch;
      best = snapshot_model(model, optim, stage_index(plan.stage),
                            static_cast<std::int64_t>(epoch), stats.mean_val_accuracy,
                            stage_rng.save_state());
    }
  }
  return {std::move(best), std::move(report)};
}

// Toy-scale CLIP-style contrastive pre-training of the two encoders: batches
// of aligned pairs, symmetric InfoNCE over the encoder CLS embeddings, Adam
// on the encoder groups only. Returns per-epoch mean losses.
inline std::vector<double> run_contrastive_pretraining(FusionModel& model,
                                                       const std::vector<ExamplePair>& pairs,
                                                       std::size_t epochs, std::size_t batch_size,
                                                       double lr, double temperature,
                                                       std::uint64_t seed,
                                                       double weight_decay = 1e-4,
                                                       const LogSink& log = nullptr) {
  if (pairs.size() < 2) {
    throw std::invalid_argument("run_contrastive_pretraining: need at least 2 pairs");
  }
  if (batch_size < 2) {
    throw std::invalid_argument("run_contrastive_pretraining: batch_size must be >= 2");
  }
  for (ParamGroup* g : model.param_groups()) {
    const bool encoder_group = g->name == kGroupClipImage || g->name == kGroupClipText;
    g->lr = encoder_group ? lr : 0.0;
    g->frozen = !encoder_group;
  }
  AdamState optim(model.param_groups(), weight_decay);
  std::vector<double> epoch_losses;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (const auto& batch : batches(pairs.size(), batch_size, seed, epoch)) {
      if (batch.size() < 2) continue;  // InfoNCE needs negatives
      Tape tape;
      std::vector<Tensor> img_rows, txt_rows;
      for (std::size_t idx : batch) {
        const ExamplePair& pair = pairs[idx];
        EmbeddingSequence img = model.encode_image_input(pair);
        EmbeddingSequence txt = model.encode_text_input(pair);
        img_rows.push_back(slice_rows(img.embeddings, img.cls_index, 1));
        txt_rows.push_back(slice_rows(txt.embeddings, txt.cls_index, 1));
      }
      Tensor loss = contrastive_loss(concat_rows(img_rows), concat_rows(txt_rows), temperature);
      const double loss_value = loss.value();
      if (!std::isfinite(loss_value)) {
        throw std::runtime_error("run_contrastive_pretraining: non-finite loss at epoch " +
                                 std::to_string(epoch));
      }
      loss_sum += loss_value;
      n_batches += 1;
      tape.backward(loss);
      adam_step(model.param_groups(), optim);
      model.zero_grad();
    }
    const double mean_loss = loss_sum / static_cast<double>(n_batches);
    epoch_losses.push_back(mean_loss);
    if (log) log({"pretrain", static_cast<std::int64_t>(epoch), "contrastive_loss", mean_loss});
  }
  return epoch_losses;
}

struct ScheduleResult {
  std::vector<TrainReport> stage_reports;
  Checkpoint best;
};

struct ScheduleSettings {
  std::array<std::size_t, 3> epochs{1, 1, 1};  // warm-up, end-to-end, tuning; 0 skips a stage
  double lr = 1e-3;
  std::size_t batch_size = 32;
  double weight_decay = 1e-4;
};

// Chains the three stages; each stage resumes from the previous stage's best
// checkpoint with fresh optimizer state. Per-stage RNG streams are derived
// from (seed, stage), so a schedule split at a stage boundary reproduces the
// straight run exactly.
inline ScheduleResult run_full_schedule(FusionModel& model,
                                        const std::vector<ExamplePair>& train_split,
                                        const std::vector<ExamplePair>& val_split,
                                        const ScheduleSettings& settings, std::uint64_t seed,
                                        const LogSink& log = nullptr) {
  static constexpr Stage kStages[3] = {Stage::kWarmUp, Stage::kEndToEnd, Stage::kTuning};
  ScheduleResult result;
  bool ran_any = false;
  for (int s = 0; s < 3; ++s) {
    if (settings.epochs[s] == 0) continue;
    const StagePlan plan =
        make_stage_plan(kStages[s], settings.epochs[s], settings.lr, settings.batch_size);
    const std::uint64_t stage_seed = mix_seed(seed, "stage/" + std::to_string(s));
    auto [best, report] = run_stage(model, train_split, val_split, plan, stage_seed,
                                    settings.weight_decay, log);
    restore_model(model, best);
    result.stage_reports.push_back(std::move(report));
    result.best = std::move(best);
    ran_any = true;
  }
  if (!ran_any) throw std::invalid_argument("run_full_schedule: all stages have zero epochs");
  return result;
}

}  // namespace cmfuse

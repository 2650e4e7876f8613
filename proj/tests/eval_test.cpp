#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "cmfuse/eval.hpp"
#include "cmfuse/heatmap.hpp"
#include "cmfuse/model.hpp"
#include "cmfuse/train.hpp"

using namespace cmfuse;

namespace {

ModelConfig tiny_config(FusionVariant v = FusionVariant::kFull) {
  ModelConfig cfg;
  cfg.encoder.d_model = 8;
  cfg.encoder.n_layers = 1;
  cfg.encoder.n_heads = 2;
  cfg.encoder.d_ff = 8;
  cfg.encoder.max_text_len = 8;
  cfg.encoder.patch_size = 16;
  cfg.encoder.vocab_size = 128;
  cfg.encoder.d_joint = 8;
  cfg.encoder.image_size = 32;
  cfg.fusion_layers = 1;
  cfg.fusion_heads = 2;
  cfg.tasks = {{"taska", 4}, {"taskb", 4}};
  cfg.variant = v;
  return cfg;
}

SynthConfig tiny_data(std::size_t n, std::uint64_t seed) {
  SynthConfig cfg = toy2_preset(n, seed);
  cfg.patch_size = 16;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

double oracle_recall(const std::vector<double>& scores, const std::vector<bool>& pos, double p) {
  std::set<double> cuts(scores.begin(), scores.end());
  std::size_t total = 0;
  for (bool b : pos) total += b;
  double best = 0.0;
  for (double t : cuts) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) (pos[i] ? tp : fp) += 1;
    }
    if (tp + fp > 0 && static_cast<double>(tp) / (tp + fp) >= p) {
      best = std::max(best, static_cast<double>(tp) / total);
    }
  }
  return best;
}

}  // namespace

TEST(Evaluate, MatchesIndependentRecomputation) {
  FusionModel model(tiny_config(), 3);
  const auto pairs = synth_generate(tiny_data(12, 5));
  EvalReport report = evaluate(model, pairs, 0.6);
  EXPECT_EQ(report.n_examples, 12u);

  // independently recompute per-task metrics from the model's raw outputs
  const auto& tasks = model.config().tasks;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    std::vector<std::size_t> preds;
    std::vector<std::optional<std::size_t>> labels;
    std::vector<std::vector<double>> confid;
    for (const ExamplePair& pair : pairs) {
      auto out = model.forward_pair(pair);
      Tensor probs = softmax(out[k].logits, 0);
      std::size_t arg = 0;
      for (std::size_t j = 1; j < probs.numel(); ++j)
        if (probs.data()[j] > probs.data()[arg]) arg = j;
      preds.push_back(arg);
      labels.push_back(pair.labels.at(tasks[k].name));
      confid.push_back(probs.values());
    }
    const TaskEval& te = report.tasks.at(tasks[k].name);
    EXPECT_DOUBLE_EQ(te.accuracy, accuracy(preds, labels));

    double macro_sum = 0.0;
    std::size_t n_classes_seen = 0;
    for (std::size_t cls = 0; cls < tasks[k].n_classes; ++cls) {
      std::vector<double> scores;
      std::vector<bool> positives;
      bool any = false;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        scores.push_back(confid[i][cls]);
        positives.push_back(*labels[i] == cls);
        any = any || positives.back();
      }
      if (!any) {
        EXPECT_EQ(te.class_recall_at_p.count(cls), 0u);
        continue;
      }
      const double expect = oracle_recall(scores, positives, 0.6);
      EXPECT_DOUBLE_EQ(te.class_recall_at_p.at(cls), expect) << "class " << cls;
      macro_sum += expect;
      n_classes_seen += 1;
    }
    EXPECT_DOUBLE_EQ(te.macro_recall_at_p, macro_sum / n_classes_seen);
  }
}

TEST(Evaluate, MacroIsMeanOfPerClassValues) {
  FusionModel model(tiny_config(), 4);
  const auto pairs = synth_generate(tiny_data(16, 9));
  EvalReport report = evaluate(model, pairs, 0.5);
  for (const auto& [name, te] : report.tasks) {
    double total = 0.0;
    for (const auto& [cls, r] : te.class_recall_at_p) total += r;
    EXPECT_NEAR(te.macro_recall_at_p, total / te.class_recall_at_p.size(), 1e-15);
  }
}

TEST(Evaluate, MemorizedSetScoresPerfectly) {
  ModelConfig cfg = tiny_config();
  FusionModel model(cfg, 5);
  auto pairs = synth_generate(tiny_data(8, 7));
  ScheduleSettings settings;
  settings.epochs = {60, 0, 0};
  settings.lr = 3e-3;
  settings.batch_size = 8;
  run_full_schedule(model, pairs, pairs, settings, 17);
  EvalReport report = evaluate(model, pairs, 0.9);
  EXPECT_GE(report.mean_accuracy, 0.99);
}

TEST(Evaluate, EmptySplitRejected) {
  FusionModel model(tiny_config(), 3);
  EXPECT_THROW(evaluate(model, {}, 0.9), std::invalid_argument);
}

TEST(Ablation, SmokeRunEmitsAllVariantsOnSharedData) {
  const auto pairs = synth_generate(tiny_data(18, 21));
  DatasetSplit data = split(pairs, {0.6, 0.2, 0.2}, 4);
  ScheduleSettings settings;
  settings.epochs = {1, 1, 1};
  settings.batch_size = 6;
  AblationReport report = run_ablation(data, tiny_config(), settings, {11}, 0.9, {"taskb"});
  ASSERT_EQ(report.variants.size(), 3u);
  const std::string digest = report.variants.at("full").dataset_digest;
  for (const char* v : {"full", "no_ma", "no_ma_no_sa"}) {
    const AblationVariantResult& r = report.variants.at(v);
    EXPECT_EQ(r.per_seed.size(), 1u);
    EXPECT_EQ(r.dataset_digest, digest);
    EXPECT_GE(r.mean_macro_recall, 0.0);
    EXPECT_LE(r.mean_macro_recall, 1.0);
  }
  const auto json = report.to_json();
  EXPECT_TRUE(json.contains("ordering_holds"));
  EXPECT_THROW(run_ablation(data, tiny_config(), settings, {}, 0.9), std::invalid_argument);
}

// ---------------------------------------------------------------- heatmaps

TEST(Heatmap, UniformAttentionNormalizesToZeros) {
  ModelConfig cfg = tiny_config();
  cfg.encoder.patch_size = 8;  // 4x4 grid
  FusionModel model(cfg, 5);
  // zero query/key projections make every attention row uniform over valid keys
  for (ParamGroup* g : model.param_groups()) {
    if (g->name != kGroupCmaSa) continue;
    for (auto& [name, p] : g->params) {
      if (name.find("w_q") != std::string::npos || name.find("w_k") != std::string::npos) {
        std::fill(p.values().begin(), p.values().end(), 0.0);
      }
    }
  }
  auto pairs = synth_generate([&] {
    SynthConfig d = tiny_data(1, 3);
    d.patch_size = 8;
    return d;
  }());
  const std::string keyword = synth_keyword(0, pairs[0].labels.at("taska"));
  Heatmap map = attention_heatmap(model, pairs[0], keyword);
  EXPECT_EQ(map.grid_rows, 4u);
  EXPECT_EQ(map.grid_cols, 4u);
  for (double v : map.values) EXPECT_EQ(v, 0.0);
}

TEST(Heatmap, AbsentTokenListsAvailableOnes) {
  FusionModel model(tiny_config(), 5);
  auto pairs = synth_generate(tiny_data(1, 3));
  try {
    attention_heatmap(model, pairs[0], "nonexistent_token");
    FAIL() << "expected error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("available:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("task"), std::string::npos) << msg;  // keywords are listed
  }
}

TEST(Heatmap, VariantWithoutSequenceAttentionRejected) {
  FusionModel model(tiny_config(FusionVariant::kNoMANoSA), 5);
  auto pairs = synth_generate(tiny_data(1, 3));
  EXPECT_THROW(attention_heatmap(model, pairs[0], "task0"), std::invalid_argument);
}

TEST(Heatmap, ExportIsDeterministicAndInRange) {
  ModelConfig cfg = tiny_config();
  cfg.encoder.patch_size = 8;
  FusionModel model(cfg, 6);
  auto pairs = synth_generate([&] {
    SynthConfig d = tiny_data(1, 4);
    d.patch_size = 8;
    return d;
  }());
  const std::string keyword = synth_keyword(1, pairs[0].labels.at("taskb"));
  const std::string base = ::testing::TempDir() + "/heat";
  export_attention_map(model, pairs[0], keyword, base);
  const std::string csv1 = slurp(base + ".csv");
  const std::string pgm1 = slurp(base + ".pgm");
  export_attention_map(model, pairs[0], keyword, base);
  EXPECT_EQ(slurp(base + ".csv"), csv1);
  EXPECT_EQ(slurp(base + ".pgm"), pgm1);

  // csv: 4 rows x 4 cols, all values in [0,1]
  std::istringstream is(csv1);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    rows += 1;
    std::istringstream ls(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(ls, cell, ',')) {
      const double v = std::stod(cell);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      cols += 1;
    }
    EXPECT_EQ(cols, 4u);
  }
  EXPECT_EQ(rows, 4u);
  EXPECT_EQ(pgm1.substr(0, 3), "P5\n");
}

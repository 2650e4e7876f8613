#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "cmfuse/checkpoint.hpp"
#include "cmfuse/data.hpp"
#include "cmfuse/model.hpp"
#include "cmfuse/train.hpp"

using namespace cmfuse;

namespace {

ModelConfig tiny_config() {
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
  return cfg;
}

SynthConfig tiny_data_config(std::size_t n) {
  SynthConfig cfg = toy2_preset(n, 5);
  cfg.patch_size = 16;
  return cfg;
}

std::map<std::string, std::vector<double>> group_bytes(FusionModel& model,
                                                       const std::string& group) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, p] : model.group(group).params) out[name] = p.values();
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST(StagePlan, InvariantsEnforced) {
  EXPECT_NO_THROW(make_stage_plan(Stage::kWarmUp, 2, 1e-3, 4).validate());
  EXPECT_NO_THROW(make_stage_plan(Stage::kEndToEnd, 2, 1e-3, 4).validate());
  EXPECT_NO_THROW(make_stage_plan(Stage::kTuning, 2, 1e-3, 4).validate());

  StagePlan bad = make_stage_plan(Stage::kWarmUp, 2, 1e-3, 4);
  bad.group_lrs[kGroupClipImage] = 1e-3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);

  StagePlan bad2 = make_stage_plan(Stage::kTuning, 2, 1e-3, 4);
  bad2.group_lrs[kGroupCmaSa] = 1e-3;
  EXPECT_THROW(bad2.validate(), std::invalid_argument);
}

TEST(RunStage, WarmUpLeavesEncodersBitIdentical) {
  FusionModel model(tiny_config(), 7);
  const auto pairs = synth_generate(tiny_data_config(12));
  DatasetSplit data = split(pairs, {0.75, 0.25, 0.0}, 3);

  const auto img_before = group_bytes(model, kGroupClipImage);
  const auto txt_before = group_bytes(model, kGroupClipText);
  run_stage(model, data.train, data.validation, make_stage_plan(Stage::kWarmUp, 2, 1e-3, 4), 11);
  EXPECT_EQ(group_bytes(model, kGroupClipImage), img_before);
  EXPECT_EQ(group_bytes(model, kGroupClipText), txt_before);
}

TEST(RunStage, TuningAlsoFreezesSequenceAttention) {
  FusionModel model(tiny_config(), 7);
  const auto pairs = synth_generate(tiny_data_config(12));
  DatasetSplit data = split(pairs, {0.75, 0.25, 0.0}, 3);

  const auto img_before = group_bytes(model, kGroupClipImage);
  const auto txt_before = group_bytes(model, kGroupClipText);
  const auto sa_before = group_bytes(model, kGroupCmaSa);
  const auto ma_before = group_bytes(model, kGroupCmaMa);
  run_stage(model, data.train, data.validation, make_stage_plan(Stage::kTuning, 2, 1e-3, 4), 11);
  EXPECT_EQ(group_bytes(model, kGroupClipImage), img_before);
  EXPECT_EQ(group_bytes(model, kGroupClipText), txt_before);
  EXPECT_EQ(group_bytes(model, kGroupCmaSa), sa_before);
  EXPECT_NE(group_bytes(model, kGroupCmaMa), ma_before);  // w trains
}

TEST(RunStage, SameSeedGivesIdenticalLossSequences) {
  const auto pairs = synth_generate(tiny_data_config(12));
  DatasetSplit data = split(pairs, {0.75, 0.25, 0.0}, 3);
  std::vector<std::vector<double>> losses;
  for (int run = 0; run < 2; ++run) {
    FusionModel model(tiny_config(), 7);
    auto [best, report] =
        run_stage(model, data.train, data.validation, make_stage_plan(Stage::kWarmUp, 3, 1e-3, 4), 11);
    std::vector<double> seq;
    for (const EpochStats& e : report.epochs) {
      seq.push_back(e.train_loss);
      seq.push_back(e.val_loss);
      seq.push_back(e.mean_val_accuracy);
    }
    losses.push_back(std::move(seq));
  }
  EXPECT_EQ(losses[0], losses[1]);
}

TEST(RunStage, PoisonedParameterAbortsWithBatchDiagnostic) {
  FusionModel model(tiny_config(), 7);
  model.group(kGroupMlp).params.begin()->second.data()[0] =
      std::numeric_limits<double>::infinity();
  const auto pairs = synth_generate(tiny_data_config(8));
  DatasetSplit data = split(pairs, {0.5, 0.5, 0.0}, 3);
  try {
    run_stage(model, data.train, data.validation, make_stage_plan(Stage::kWarmUp, 1, 1e-3, 4), 11);
    FAIL() << "expected non-finite loss abort";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos) << e.what();
  }
}

TEST(RunStage, EmptySplitsRejected) {
  FusionModel model(tiny_config(), 7);
  const auto pairs = synth_generate(tiny_data_config(4));
  EXPECT_THROW(
      run_stage(model, {}, pairs, make_stage_plan(Stage::kWarmUp, 1, 1e-3, 4), 1),
      std::invalid_argument);
  EXPECT_THROW(
      run_stage(model, pairs, {}, make_stage_plan(Stage::kWarmUp, 1, 1e-3, 4), 1),
      std::invalid_argument);
}

TEST(Schedule, WarmUpOnlyEqualsLoneStageRun) {
  const auto pairs = synth_generate(tiny_data_config(12));
  DatasetSplit data = split(pairs, {0.75, 0.25, 0.0}, 3);

  FusionModel a(tiny_config(), 7);
  ScheduleSettings settings;
  settings.epochs = {2, 0, 0};
  settings.lr = 1e-3;
  settings.batch_size = 4;
  ScheduleResult full = run_full_schedule(a, data.train, data.validation, settings, 21);

  FusionModel b(tiny_config(), 7);
  auto [lone_best, lone_report] =
      run_stage(b, data.train, data.validation, make_stage_plan(Stage::kWarmUp, 2, 1e-3, 4),
                mix_seed(21, "stage/0"));
  EXPECT_EQ(full.best.params, lone_best.params);
  ASSERT_EQ(full.stage_reports.size(), 1u);
  ASSERT_EQ(full.stage_reports[0].epochs.size(), lone_report.epochs.size());
  for (std::size_t e = 0; e < lone_report.epochs.size(); ++e) {
    EXPECT_EQ(full.stage_reports[0].epochs[e].train_loss, lone_report.epochs[e].train_loss);
  }
}

TEST(Schedule, FreshOptimizerPerStage) {
  const auto pairs = synth_generate(tiny_data_config(12));
  DatasetSplit data = split(pairs, {0.75, 0.25, 0.0}, 3);
  FusionModel model(tiny_config(), 7);
  ScheduleSettings settings;
  settings.epochs = {1, 1, 0};
  settings.batch_size = 4;
  ScheduleResult result = run_full_schedule(model, data.train, data.validation, settings, 21);
  // 9 train examples, batch 4 -> 3 steps per epoch; a carried-over optimizer
  // would show 6 steps at the end of stage 2
  EXPECT_EQ(result.best.optim.step_count, 3);
}

TEST(Schedule, SplitRunResumeMatchesStraightRun) {
  const auto pairs = synth_generate(tiny_data_config(16));
  DatasetSplit data = split(pairs, {0.75, 0.25, 0.0}, 3);

  ScheduleSettings straight;
  straight.epochs = {2, 2, 0};
  straight.batch_size = 4;
  FusionModel a(tiny_config(), 7);
  ScheduleResult full = run_full_schedule(a, data.train, data.validation, straight, 33);

  // split run: warm-up alone, checkpoint, then end-to-end from the checkpoint
  ScheduleSettings first;
  first.epochs = {2, 0, 0};
  first.batch_size = 4;
  FusionModel b(tiny_config(), 7);
  ScheduleResult warm = run_full_schedule(b, data.train, data.validation, first, 33);

  const std::string path = ::testing::TempDir() + "/resume.cmac";
  save_checkpoint(warm.best, path);
  FusionModel c(tiny_config(), 99);  // different init seed; overwritten by restore
  restore_model(c, load_checkpoint(path));
  ScheduleSettings second;
  second.epochs = {0, 2, 0};
  second.batch_size = 4;
  ScheduleResult resumed = run_full_schedule(c, data.train, data.validation, second, 33);

  ASSERT_EQ(full.stage_reports.size(), 2u);
  ASSERT_EQ(resumed.stage_reports.size(), 1u);
  const TrainReport& straight_e2e = full.stage_reports[1];
  const TrainReport& resumed_e2e = resumed.stage_reports[0];
  ASSERT_EQ(straight_e2e.epochs.size(), resumed_e2e.epochs.size());
  for (std::size_t e = 0; e < straight_e2e.epochs.size(); ++e) {
    EXPECT_EQ(straight_e2e.epochs[e].train_loss, resumed_e2e.epochs[e].train_loss);
    EXPECT_EQ(straight_e2e.epochs[e].val_loss, resumed_e2e.epochs[e].val_loss);
  }
  EXPECT_EQ(full.best.params, resumed.best.params);
}

TEST(Schedule, AllZeroEpochsRejected) {
  FusionModel model(tiny_config(), 7);
  const auto pairs = synth_generate(tiny_data_config(8));
  DatasetSplit data = split(pairs, {0.5, 0.5, 0.0}, 3);
  ScheduleSettings settings;
  settings.epochs = {0, 0, 0};
  EXPECT_THROW(run_full_schedule(model, data.train, data.validation, settings, 1),
               std::invalid_argument);
}

// ---------------------------------------------------------------- checkpoints

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  FusionModel model(tiny_config(), 7);
  AdamState optim(model.param_groups());
  Rng rng(5);
  Checkpoint ckpt = snapshot_model(model, optim, 1, 4, 0.75, rng.save_state());

  const std::string p1 = ::testing::TempDir() + "/ck1.cmac";
  const std::string p2 = ::testing::TempDir() + "/ck2.cmac";
  save_checkpoint(ckpt, p1);
  Checkpoint loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);
  EXPECT_EQ(slurp(p1), slurp(p2));
  EXPECT_EQ(loaded.stage_index, 1);
  EXPECT_EQ(loaded.epoch, 4);
  EXPECT_DOUBLE_EQ(loaded.metric, 0.75);
  EXPECT_EQ(loaded.rng_state, ckpt.rng_state);
}

TEST(Checkpoint, RestoreRoundTripsEveryTensor) {
  FusionModel model(tiny_config(), 7);
  AdamState optim(model.param_groups());
  Checkpoint ckpt = snapshot_model(model, optim, 0, 0, 0.0, "");

  FusionModel other(tiny_config(), 123);
  restore_model(other, ckpt);
  model.for_each_param([&](const std::string& group, const std::string& name, Tensor& p) {
    EXPECT_EQ(other.group(group).params.at(name).values(), p.values()) << group << "/" << name;
  });
}

TEST(Checkpoint, WrongConfigDigestRejected) {
  FusionModel model(tiny_config(), 7);
  AdamState optim(model.param_groups());
  Checkpoint ckpt = snapshot_model(model, optim, 0, 0, 0.0, "");
  const std::string path = ::testing::TempDir() + "/ck_digest.cmac";
  save_checkpoint(ckpt, path);

  ModelConfig different = tiny_config();
  different.tasks[0].n_classes = 5;
  const auto expected = detail::sha256(different.canonical_string());
  EXPECT_THROW(load_checkpoint(path, expected), std::runtime_error);

  FusionModel mismatched(different, 7);
  EXPECT_THROW(restore_model(mismatched, ckpt), std::runtime_error);
}

TEST(Checkpoint, TruncatedFileRejected) {
  FusionModel model(tiny_config(), 7);
  AdamState optim(model.param_groups());
  const std::string path = ::testing::TempDir() + "/ck_trunc.cmac";
  save_checkpoint(snapshot_model(model, optim, 0, 0, 0.0, "state"), path);
  const std::string bytes = slurp(path);
  std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(Checkpoint, NotACheckpointRejected) {
  const std::string path = ::testing::TempDir() + "/not_ck.bin";
  std::ofstream(path) << "plainly not a checkpoint";
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

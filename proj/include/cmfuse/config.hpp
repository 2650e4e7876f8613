#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "cmfuse/model.hpp"
#include "cmfuse/train.hpp"

namespace cmfuse {

// Everything a training or evaluation run needs, resolvable from a flat
// key = value file plus flag overrides.
struct RunConfig {
  ModelConfig model;
  ScheduleSettings schedule;
  std::uint64_t seed = 1;
  std::array<double, 3> split_fractions{0.8, 0.1, 0.1};
  double precision_target = 0.9;
  double temperature = 0.07;          // contrastive pre-training
  std::size_t pretrain_epochs = 10;
};

// Defaults: "toy" is the desk-scale preset; "paper" carries the published
// hyperparameters (batch 1024, lr 1e-5, wd 1e-4, 20 epochs per stage).
inline RunConfig run_config_preset(const std::string& name) {
  RunConfig cfg;
  if (name == "toy") {
    cfg.schedule.lr = 1e-3;
    cfg.schedule.batch_size = 32;
    cfg.schedule.weight_decay = 1e-4;
    cfg.schedule.epochs = {10, 10, 5};
    return cfg;
  }
  if (name == "paper") {
    cfg.schedule.lr = 1e-5;
    cfg.schedule.batch_size = 1024;
    cfg.schedule.weight_decay = 1e-4;
    cfg.schedule.epochs = {20, 20, 20};
    return cfg;
  }
  throw std::invalid_argument("unknown run preset: " + name + " (expected toy | paper)");
}

inline std::map<std::string, std::string> parse_kv_text(std::istream& in,
                                                        const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    line_no += 1;
    const std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    auto trim = [](std::string s) {
      const std::size_t a = s.find_first_not_of(" \t\r");
      const std::size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": empty key");
    }
    kv[key] = value;
  }
  return kv;
}

namespace detail {

inline std::vector<TaskSpec> parse_tasks_value(const std::string& value) {
  std::vector<TaskSpec> tasks;
  std::istringstream is(value);
  std::string item;
  while (std::getline(is, item, ',')) {
    const std::size_t colon = item.find(':');
    if (colon == std::string::npos) {
      throw std::runtime_error("tasks value must be name:classes[,name:classes...], got " + value);
    }
    tasks.push_back({item.substr(0, colon), std::stoul(item.substr(colon + 1))});
  }
  return tasks;
}

inline std::string tasks_value(const std::vector<TaskSpec>& tasks) {
  std::ostringstream os;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (i) os << ',';
    os << tasks[i].name << ':' << tasks[i].n_classes;
  }
  return os.str();
}

}  // namespace detail

// Applies key = value pairs onto a config. Unknown keys are an error.
inline void apply_kv(RunConfig& cfg, const std::map<std::string, std::string>& kv) {
  for (const auto& [key, value] : kv) {
    try {
      if (key == "d_model") cfg.model.encoder.d_model = std::stoul(value);
      else if (key == "n_layers") cfg.model.encoder.n_layers = std::stoul(value);
      else if (key == "n_heads") cfg.model.encoder.n_heads = std::stoul(value);
      else if (key == "d_ff") cfg.model.encoder.d_ff = std::stoul(value);
      else if (key == "max_text_len") cfg.model.encoder.max_text_len = std::stoul(value);
      else if (key == "patch_size") cfg.model.encoder.patch_size = std::stoul(value);
      else if (key == "vocab_size") cfg.model.encoder.vocab_size = std::stoul(value);
      else if (key == "d_joint") cfg.model.encoder.d_joint = std::stoul(value);
      else if (key == "image_size") cfg.model.encoder.image_size = std::stoul(value);
      else if (key == "fusion_layers") cfg.model.fusion_layers = std::stoul(value);
      else if (key == "fusion_heads") cfg.model.fusion_heads = std::stoul(value);
      else if (key == "d_hidden") cfg.model.d_hidden = std::stoul(value);
      else if (key == "variant") cfg.model.variant = variant_from_name(value);
      else if (key == "tasks") cfg.model.tasks = detail::parse_tasks_value(value);
      else if (key == "epochs_warmup") cfg.schedule.epochs[0] = std::stoul(value);
      else if (key == "epochs_end_to_end") cfg.schedule.epochs[1] = std::stoul(value);
      else if (key == "epochs_tuning") cfg.schedule.epochs[2] = std::stoul(value);
      else if (key == "lr") cfg.schedule.lr = std::stod(value);
      else if (key == "batch_size") cfg.schedule.batch_size = std::stoul(value);
      else if (key == "weight_decay") cfg.schedule.weight_decay = std::stod(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "split_train") cfg.split_fractions[0] = std::stod(value);
      else if (key == "split_validation") cfg.split_fractions[1] = std::stod(value);
      else if (key == "split_test") cfg.split_fractions[2] = std::stod(value);
      else if (key == "precision") cfg.precision_target = std::stod(value);
      else if (key == "temperature") cfg.temperature = std::stod(value);
      else if (key == "pretrain_epochs") cfg.pretrain_epochs = std::stoul(value);
      else throw std::runtime_error("unknown config key: " + key);
    } catch (const std::invalid_argument&) {
      throw std::runtime_error("config key " + key + ": cannot parse value '" + value + "'");
    }
  }
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = RunConfig{}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  apply_kv(base, parse_kv_text(in, path));
  return base;
}

// Fully resolved key = value form; re-parsing it reproduces the config.
inline std::string run_config_text(const RunConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "d_model = " << cfg.model.encoder.d_model << "\n"
     << "n_layers = " << cfg.model.encoder.n_layers << "\n"
     << "n_heads = " << cfg.model.encoder.n_heads << "\n"
     << "d_ff = " << cfg.model.encoder.d_ff << "\n"
     << "max_text_len = " << cfg.model.encoder.max_text_len << "\n"
     << "patch_size = " << cfg.model.encoder.patch_size << "\n"
     << "vocab_size = " << cfg.model.encoder.vocab_size << "\n"
     << "d_joint = " << cfg.model.encoder.d_joint << "\n"
     << "image_size = " << cfg.model.encoder.image_size << "\n"
     << "fusion_layers = " << cfg.model.fusion_layers << "\n"
     << "fusion_heads = " << cfg.model.fusion_heads << "\n"
     << "d_hidden = " << cfg.model.hidden_width() << "\n"
     << "variant = " << variant_name(cfg.model.variant) << "\n";
  if (!cfg.model.tasks.empty()) os << "tasks = " << detail::tasks_value(cfg.model.tasks) << "\n";
  os << "epochs_warmup = " << cfg.schedule.epochs[0] << "\n"
     << "epochs_end_to_end = " << cfg.schedule.epochs[1] << "\n"
     << "epochs_tuning = " << cfg.schedule.epochs[2] << "\n"
     << "lr = " << cfg.schedule.lr << "\n"
     << "batch_size = " << cfg.schedule.batch_size << "\n"
     << "weight_decay = " << cfg.schedule.weight_decay << "\n"
     << "seed = " << cfg.seed << "\n"
     << "split_train = " << cfg.split_fractions[0] << "\n"
     << "split_validation = " << cfg.split_fractions[1] << "\n"
     << "split_test = " << cfg.split_fractions[2] << "\n"
     << "precision = " << cfg.precision_target << "\n"
     << "temperature = " << cfg.temperature << "\n"
     << "pretrain_epochs = " << cfg.pretrain_epochs << "\n";
  return os.str();
}

}  // namespace cmfuse

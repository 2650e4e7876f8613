#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmfuse/model.hpp"
#include "cmfuse/optim.hpp"
#include "cmfuse/serialize.hpp"
#include "cmfuse/sha256.hpp"

namespace cmfuse {

inline constexpr char kCheckpointMagic[4] = {'C', 'M', 'A', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// In-memory training snapshot: every parameter tensor by group and name, the
// optimizer state, the stage position, and the shuffling RNG state.
struct Checkpoint {
  std::array<std::uint8_t, 32> config_digest{};
  std::map<std::string, std::pair<Shape, std::vector<double>>> params;  // "group/name"
  AdamState optim;
  int stage_index = 0;
  std::int64_t epoch = 0;
  double metric = 0.0;
  std::string rng_state;
};

inline Checkpoint snapshot_model(FusionModel& model, const AdamState& optim, int stage_index,
                                 std::int64_t epoch, double metric, const std::string& rng_state) {
  Checkpoint ckpt;
  ckpt.config_digest = detail::sha256(model.config().canonical_string());
  model.for_each_param([&](const std::string& group, const std::string& name, Tensor& p) {
    ckpt.params[group + "/" + name] = {p.shape(), p.values()};
  });
  ckpt.optim = optim;
  ckpt.stage_index = stage_index;
  ckpt.epoch = epoch;
  ckpt.metric = metric;
  ckpt.rng_state = rng_state;
  return ckpt;
}

// Writes the checkpoint's parameters back into the model, bit-exact. The
// checkpoint must cover exactly the model's parameter set.
inline void restore_model(FusionModel& model, const Checkpoint& ckpt) {
  const auto expected_digest = detail::sha256(model.config().canonical_string());
  if (ckpt.config_digest != expected_digest) {
    throw std::runtime_error("restore_model: checkpoint config digest does not match the model");
  }
  std::size_t restored = 0;
  model.for_each_param([&](const std::string& group, const std::string& name, Tensor& p) {
    const std::string key = group + "/" + name;
    auto it = ckpt.params.find(key);
    if (it == ckpt.params.end()) {
      throw std::runtime_error("restore_model: checkpoint missing parameter " + key);
    }
    if (it->second.first != p.shape()) {
      throw std::runtime_error("restore_model: shape mismatch for " + key);
    }
    p.values() = it->second.second;
    p.zero_grad();
    restored += 1;
  });
  if (restored != ckpt.params.size()) {
    throw std::runtime_error("restore_model: checkpoint has " +
                             std::to_string(ckpt.params.size()) + " parameters, model has " +
                             std::to_string(restored));
  }
}

namespace detail {

inline void write_scalar_record(std::ostream& out, const std::string& name, double v) {
  write_record(out, name, {1}, {v});
}

}  // namespace detail

// File layout: magic "CMAC", u32 format version, 32-byte config digest,
// u64 record count, tensor records (params/..., adam/..., meta/...), then the
// RNG state as a length-prefixed blob. All multi-byte values little-endian.
inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ostringstream out(std::ios::binary);
  out.write(kCheckpointMagic, 4);
  write_u32(out, kCheckpointVersion);
  out.write(reinterpret_cast<const char*>(ckpt.config_digest.data()), 32);

  const std::uint64_t n_records = ckpt.params.size() + ckpt.optim.m.size() + ckpt.optim.v.size() +
                                  5 /* adam scalars */ + 3 /* meta scalars */;
  write_u64(out, n_records);
  for (const auto& [name, rec] : ckpt.params) write_record(out, "params/" + name, rec.first, rec.second);
  for (const auto& [name, data] : ckpt.optim.m) write_record(out, "adam/m/" + name, {data.size()}, data);
  for (const auto& [name, data] : ckpt.optim.v) write_record(out, "adam/v/" + name, {data.size()}, data);
  detail::write_scalar_record(out, "adam/beta1", ckpt.optim.beta1);
  detail::write_scalar_record(out, "adam/beta2", ckpt.optim.beta2);
  detail::write_scalar_record(out, "adam/epsilon", ckpt.optim.epsilon);
  detail::write_scalar_record(out, "adam/step_count", static_cast<double>(ckpt.optim.step_count));
  detail::write_scalar_record(out, "adam/weight_decay", ckpt.optim.weight_decay);
  detail::write_scalar_record(out, "meta/epoch", static_cast<double>(ckpt.epoch));
  detail::write_scalar_record(out, "meta/metric", ckpt.metric);
  detail::write_scalar_record(out, "meta/stage", static_cast<double>(ckpt.stage_index));
  write_blob(out, ckpt.rng_state);

  // atomic: write to a temp sibling, then rename
  const std::string tmp = path + ".tmp";
  {
    std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
    if (!file) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
    const std::string blob = out.str();
    file.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!file) throw std::runtime_error("save_checkpoint: failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path,
                                  const std::optional<std::array<std::uint8_t, 32>>& expected_digest =
                                      std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
  }
  const std::uint32_t version = read_u32(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("load_checkpoint: unsupported format version " +
                             std::to_string(version));
  }
  Checkpoint ckpt;
  in.read(reinterpret_cast<char*>(ckpt.config_digest.data()), 32);
  if (in.gcount() != 32) throw std::runtime_error("load_checkpoint: truncated file");
  if (expected_digest.has_value() && ckpt.config_digest != *expected_digest) {
    throw std::runtime_error("load_checkpoint: config digest mismatch; the checkpoint was written "
                             "for a different model configuration");
  }

  const std::uint64_t n_records = read_u64(in);
  for (std::uint64_t i = 0; i < n_records; ++i) {
    TensorRecord rec = read_record(in);
    auto starts_with = [&](const char* prefix) { return rec.name.rfind(prefix, 0) == 0; };
    if (starts_with("params/")) {
      ckpt.params[rec.name.substr(7)] = {rec.shape, std::move(rec.data)};
    } else if (starts_with("adam/m/")) {
      ckpt.optim.m[rec.name.substr(7)] = std::move(rec.data);
    } else if (starts_with("adam/v/")) {
      ckpt.optim.v[rec.name.substr(7)] = std::move(rec.data);
    } else if (rec.name == "adam/beta1") {
      ckpt.optim.beta1 = rec.data.at(0);
    } else if (rec.name == "adam/beta2") {
      ckpt.optim.beta2 = rec.data.at(0);
    } else if (rec.name == "adam/epsilon") {
      ckpt.optim.epsilon = rec.data.at(0);
    } else if (rec.name == "adam/step_count") {
      ckpt.optim.step_count = static_cast<std::int64_t>(rec.data.at(0));
    } else if (rec.name == "adam/weight_decay") {
      ckpt.optim.weight_decay = rec.data.at(0);
    } else if (rec.name == "meta/epoch") {
      ckpt.epoch = static_cast<std::int64_t>(rec.data.at(0));
    } else if (rec.name == "meta/metric") {
      ckpt.metric = rec.data.at(0);
    } else if (rec.name == "meta/stage") {
      ckpt.stage_index = static_cast<int>(rec.data.at(0));
    } else {
      throw std::runtime_error("load_checkpoint: unknown record " + rec.name);
    }
  }
  ckpt.rng_state = read_blob(in);
  return ckpt;
}

}  // namespace cmfuse

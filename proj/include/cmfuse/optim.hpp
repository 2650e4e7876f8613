#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmfuse/tensor.hpp"

namespace cmfuse {

// Named collection of parameters that train (or freeze) together.
// frozen == true and lr == 0 are equivalent: the group is excluded from the
// optimizer step entirely, leaving its bytes untouched.
struct ParamGroup {
  std::string name;
  std::map<std::string, Tensor> params;  // sorted; iteration order is part of the persistence contract
  bool frozen = false;
  double lr = 0.0;

  Tensor& add(const std::string& param_name, Tensor t) {
    auto [it, inserted] = params.emplace(param_name, std::move(t));
    if (!inserted) {
      throw std::invalid_argument("ParamGroup " + name + ": duplicate param " + param_name);
    }
    it->second.set_requires_grad(true);
    return it->second;
  }

  bool active() const { return !frozen && lr > 0.0; }
};

struct AdamState {
  std::int64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
  // Keyed "group/param", zero-initialized to match each parameter's length.
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;

  AdamState() = default;

  explicit AdamState(const std::vector<ParamGroup*>& groups, double wd = 1e-4)
      : weight_decay(wd) {
    for (const ParamGroup* g : groups) {
      for (const auto& [pname, p] : g->params) {
        const std::string key = g->name + "/" + pname;
        m[key].assign(p.numel(), 0.0);
        v[key].assign(p.numel(), 0.0);
      }
    }
  }
};

// One Adam step with bias correction and decoupled weight decay. Frozen
// groups and groups with lr == 0 are skipped before any parameter is read,
// so their bytes are bit-identical afterwards.
inline void adam_step(const std::vector<ParamGroup*>& groups, AdamState& state) {
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);

  for (ParamGroup* g : groups) {
    if (!g->active()) continue;
    for (auto& [pname, p] : g->params) {
      const std::string key = g->name + "/" + pname;
      if (!p.has_grad()) {
        throw std::runtime_error("adam_step: missing gradient for unfrozen parameter " + key);
      }
      auto mit = state.m.find(key);
      auto vit = state.v.find(key);
      if (mit == state.m.end() || vit == state.v.end()) {
        throw std::runtime_error("adam_step: optimizer state missing for " + key);
      }
      std::vector<double>& m = mit->second;
      std::vector<double>& v = vit->second;
      const std::vector<double>& grad = p.grad();
      double* data = p.data();
      for (std::size_t i = 0; i < grad.size(); ++i) {
        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        data[i] -= g->lr * (mhat / (std::sqrt(vhat) + state.epsilon) + state.weight_decay * data[i]);
      }
    }
  }
}

}  // namespace cmfuse

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "medfe/checkpoint.hpp"
#include "medfe/layers.hpp"

namespace medfe {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed parameter list; moments are keyed by position.
class Adam {
 public:
  Adam(ParameterList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    require(cfg_.lr > 0.0, "learning rate must be positive");
    for (const auto& e : params_.entries()) {
      m_.emplace_back(static_cast<std::size_t>(e.tensor.numel()), 0.0);
      v_.emplace_back(static_cast<std::size_t>(e.tensor.numel()), 0.0);
    }
  }

  void zero_grad() {
    for (auto& e : params_.entries()) e.tensor.zero_grad();
  }

  /// Applies one update from the gradients accumulated on the parameters.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto& entries = params_.entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      Tensor& t = entries[p].tensor;
      if (!t.has_grad()) continue;
      const std::vector<double> g = t.grad();
      auto value = t.mutable_values();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        value[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
  }

  std::int64_t steps() const { return t_; }
  const ParameterList& parameters() const { return params_; }

  std::vector<NamedTensor> state(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    const auto& entries = params_.entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      out.push_back({prefix + ".m." + entries[p].name, Tensor::from(entries[p].tensor.shape(), m_[p])});
      out.push_back({prefix + ".v." + entries[p].name, Tensor::from(entries[p].tensor.shape(), v_[p])});
    }
    out.push_back({prefix + ".t", Tensor::scalar(static_cast<double>(t_))});
    return out;
  }

  void load_state(const std::map<std::string, Tensor>& entries, const std::string& prefix) {
    auto fetch = [&](const std::string& name) -> const Tensor& {
      auto it = entries.find(name);
      if (it == entries.end()) throw IoError("checkpoint is missing '" + name + "'");
      return it->second;
    };
    const auto& params = params_.entries();
    for (std::size_t p = 0; p < params.size(); ++p) {
      const Tensor& m = fetch(prefix + ".m." + params[p].name);
      const Tensor& v = fetch(prefix + ".v." + params[p].name);
      if (m.numel() != params[p].tensor.numel() || v.numel() != params[p].tensor.numel())
        throw IoError("checkpoint optimizer state for '" + params[p].name + "' has the wrong size");
      m_[p].assign(m.values().begin(), m.values().end());
      v_[p].assign(v.values().begin(), v.values().end());
    }
    t_ = static_cast<std::int64_t>(fetch(prefix + ".t").item());
  }

 private:
  ParameterList params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace medfe

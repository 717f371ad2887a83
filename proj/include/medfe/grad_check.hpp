#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "medfe/ops.hpp"
#include "medfe/random.hpp"
#include "medfe/tensor.hpp"

namespace medfe {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Entries below this magnitude are compared on an absolute scale.
  double floor = 1e-6;
  // 0 checks every entry; otherwise a seeded sample per input.
  std::int64_t max_entries_per_input = 0;
  std::uint64_t seed = 7;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  std::int64_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  bool passed = false;
};

/// Compares tape gradients with central differences. fn may return any shape;
/// non-scalar outputs are contracted with a fixed random projection so every
/// output entry contributes.
inline GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                  std::vector<Tensor> inputs, const std::vector<std::string>& names = {},
                                  GradCheckOptions opt = {}) {
  Rng rng(opt.seed);
  Tensor projection;
  auto scalarize = [&](const Tensor& out) {
    if (out.numel() == 1) return out;
    if (!projection.defined()) {
      std::vector<double> r(static_cast<std::size_t>(out.numel()));
      for (auto& v : r) v = rng.uniform(-1.0, 1.0);
      projection = Tensor::from(out.shape(), std::move(r));
    }
    return sum(mul(out, projection));
  };

  for (auto& t : inputs) t.zero_grad();
  const Tensor loss = scalarize(fn(inputs));
  backward(loss);

  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = inputs[k];
    if (!t.requires_grad()) continue;
    GradCheckEntry entry;
    entry.name = k < names.size() ? names[k] : "input" + std::to_string(k);
    const std::vector<double> analytic = t.grad();
    std::vector<std::int64_t> idx(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i) idx[i] = i;
    if (opt.max_entries_per_input > 0 && t.numel() > opt.max_entries_per_input) {
      shuffle(idx, rng);
      idx.resize(static_cast<std::size_t>(opt.max_entries_per_input));
    }
    auto values = t.mutable_values();
    for (std::int64_t i : idx) {
      const double saved = values[i];
      double plus, minus;
      {
        NoGradGuard guard;
        values[i] = saved + opt.step;
        plus = scalarize(fn(inputs)).item();
        values[i] = saved - opt.step;
        minus = scalarize(fn(inputs)).item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2 * opt.step);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(a - numeric) / denom);
      ++entry.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(entry);
  }
  report.passed = report.max_rel_error <= opt.tolerance;
  return report;
}

}  // namespace medfe

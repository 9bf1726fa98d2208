#pragma once

// Finite-difference verification of analytic gradients.

#include "gig/tensor.hpp"

#include <functional>
#include <random>
#include <sstream>

namespace gig {

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  /// Relative error is |a - n| / max(|a|, |n|, denominator_floor); the floor
  /// keeps near-zero gradients from dividing rounding noise by ~0.
  double denominator_floor = 1e-3;
  /// 0 checks every entry; otherwise a seeded sample of this many per parameter.
  std::size_t max_entries_per_param = 0;
  std::uint64_t sample_seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double max_relative_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed = true;
  double worst = 0.0;

  std::vector<std::string> failing() const {
    std::vector<std::string> names;
    for (const auto& e : entries) {
      if (!e.passed) names.push_back(e.name);
    }
    return names;
  }

  std::string summary() const {
    std::ostringstream os;
    os << (passed ? "pass" : "FAIL") << " worst_rel_err=" << worst;
    for (const auto& e : entries) {
      if (!e.passed) {
        os << " [" << e.name << "@" << e.worst_index << " analytic=" << e.analytic
           << " numeric=" << e.numeric << "]";
      }
    }
    return os.str();
  }
};

/// Compares the gradient of the scalar `f` w.r.t. every parameter against
/// central differences. `f` must be deterministic (no training-mode dropout).
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Parameter* const> params,
                                  const GradCheckOptions& opts = {}) {
  auto finite = [](double v, const std::string& what) {
    if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite " + what);
  };

  for (Parameter* p : params) p->tensor.zero_grad();
  const Tensor loss = f();
  if (loss.size() != 1) throw ShapeError("grad_check: function must return a scalar");
  finite(loss.item(), "loss");
  loss.backward();

  GradCheckReport report;
  std::mt19937_64 rng(opts.sample_seed);
  for (Parameter* p : params) {
    GradCheckEntry entry;
    entry.name = p->name;
    const std::vector<double> analytic(p->tensor.grad().begin(), p->tensor.grad().end());
    std::vector<std::size_t> indices(p->tensor.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    if (opts.max_entries_per_param > 0 && indices.size() > opts.max_entries_per_param) {
      std::shuffle(indices.begin(), indices.end(), rng);
      indices.resize(opts.max_entries_per_param);
      std::sort(indices.begin(), indices.end());
    }
    auto values = p->tensor.mutable_values();
    for (std::size_t idx : indices) {
      const double saved = values[idx];
      values[idx] = saved + opts.step;
      const double up = f().item();
      values[idx] = saved - opts.step;
      const double down = f().item();
      values[idx] = saved;
      finite(up, "loss at +step for " + p->name);
      finite(down, "loss at -step for " + p->name);
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic[idx];
      finite(a, "analytic gradient for " + p->name);
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.denominator_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++entry.checked;
      if (rel >= entry.max_relative_error) {
        entry.max_relative_error = rel;
        entry.worst_index = idx;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    entry.passed = entry.max_relative_error <= opts.tolerance;
    report.passed = report.passed && entry.passed;
    report.worst = std::max(report.worst, entry.max_relative_error);
    report.entries.push_back(std::move(entry));
  }
  for (Parameter* p : params) p->tensor.zero_grad();
  return report;
}

inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Parameter*> params,
                                  const GradCheckOptions& opts = {}) {
  return grad_check(f, std::span<Parameter* const>(params.data(), params.size()), opts);
}

}  // namespace gig

#pragma once

// Expansion / reduction controller.
//
// After every `check_interval_steps` optimizer updates each field's active
// gates are inspected. A field whose smallest gate dropped below t_down is
// shrunk to the dims whose gate is still >= t_down (never below one dim);
// then every field whose smallest gate exceeds t_up gains one dim, highest
// minimum gate first, as long as the optional budget allows it.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dimgrow/allocation.hpp"
#include "dimgrow/dynembed.hpp"
#include "dimgrow/optim.hpp"
#include "dimgrow/shufflegate.hpp"

namespace dimgrow {

enum class BudgetKind { TotalDims, TotalParams };

struct Budget {
  BudgetKind kind = BudgetKind::TotalParams;
  std::size_t value = 0;
};

inline std::string to_string(BudgetKind k) { return k == BudgetKind::TotalDims ? "total_dims" : "total_params"; }

inline BudgetKind budget_kind_from_string(const std::string& s) {
  if (s == "total_dims") return BudgetKind::TotalDims;
  if (s == "total_params") return BudgetKind::TotalParams;
  throw ConfigError("budget kind must be 'total_dims' or 'total_params', got '" + s + "'");
}

struct SearchConfig {
  double alpha = 0.01;
  double tau_temperature = kDefaultGateTemperature;
  double t_up = 0.6;
  double t_down = 0.01;
  std::size_t check_interval_steps = 1;
  std::optional<Budget> budget;
  bool decayed_reg = true;
  std::uint64_t seed = 0;
  AdamConfig optimizer;
  std::size_t epochs = 10;
  std::size_t batch_size = 256;
  std::size_t eval_interval_steps = 200;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("search: alpha must be >= 0");
    if (!(tau_temperature > 0.0)) throw ConfigError("search: tau_temperature must be > 0");
    if (!(0.0 < t_down && t_down < t_up && t_up < 1.0)) throw ConfigError("search: need 0 < t_down < t_up < 1");
    if (check_interval_steps < 1) throw ConfigError("search: check_interval_steps must be >= 1");
    if (batch_size < 2) throw ConfigError("search: batch_size must be >= 2");
    if (epochs < 1) throw ConfigError("search: epochs must be >= 1");
    if (eval_interval_steps < 1) throw ConfigError("search: eval_interval_steps must be >= 1");
    if (!(optimizer.learning_rate > 0.0) || !(optimizer.gate_learning_rate > 0.0))
      throw ConfigError("search: learning rates must be > 0");
  }
};

struct ControllerAction {
  enum class Kind { Grow, Shrink, SkipBudget };
  Kind kind;
  std::size_t field;
  std::size_t from;
  std::size_t to;
};

inline std::size_t budget_usage(std::span<const DynamicFieldState> states, BudgetKind kind) {
  return kind == BudgetKind::TotalDims ? model_dims(states).d_sum : param_counts(states).used;
}

inline std::size_t budget_remaining(std::span<const DynamicFieldState> states, const SearchConfig& cfg) {
  if (!cfg.budget) throw ConfigError("budget_remaining: no budget configured");
  const std::size_t used = budget_usage(states, cfg.budget->kind);
  return used >= cfg.budget->value ? 0 : cfg.budget->value - used;
}

inline double min_active_gate(const GateBank& bank, const DynamicFieldState& s) {
  const auto g = gate_values(bank, s.field.field_index);
  return *std::min_element(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(s.used_dims));
}

inline std::vector<ControllerAction> check_and_adjust(std::vector<DynamicFieldState>& states, GateBank& bank,
                                                      const SearchConfig& cfg, Rng& grow_rng) {
  std::vector<ControllerAction> actions;
  std::vector<double> min_gate(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) min_gate[i] = min_active_gate(bank, states[i]);

  for (std::size_t i = 0; i < states.size(); ++i) {
    auto& s = states[i];
    if (!(min_gate[i] < cfg.t_down)) continue;
    const auto g = gate_values(bank, i);
    std::size_t keep = 0;
    for (std::size_t k = 0; k < s.used_dims; ++k) keep += g[k] >= cfg.t_down ? 1 : 0;
    keep = std::max<std::size_t>(keep, 1);
    if (keep >= s.used_dims) continue;
    const std::size_t from = s.used_dims;
    shrink(s, bank, keep, gate_descending_order(bank, s));
    actions.push_back({ControllerAction::Kind::Shrink, i, from, keep});
  }

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < states.size(); ++i)
    if (min_gate[i] > cfg.t_up) eligible.push_back(i);
  std::stable_sort(eligible.begin(), eligible.end(),
                   [&](std::size_t a, std::size_t b) { return min_gate[a] > min_gate[b]; });
  for (std::size_t i : eligible) {
    auto& s = states[i];
    if (cfg.budget) {
      const std::size_t inc = cfg.budget->kind == BudgetKind::TotalDims ? 1 : s.vocab_size();
      if (budget_usage(states, cfg.budget->kind) + inc > cfg.budget->value) {
        actions.push_back({ControllerAction::Kind::SkipBudget, i, s.used_dims, s.used_dims});
        continue;
      }
    }
    const std::size_t from = s.used_dims;
    grow(s, bank, grow_rng);
    actions.push_back({ControllerAction::Kind::Grow, i, from, s.used_dims});
  }
  return actions;
}

// d*_i = number of used-dim gates strictly above 0.5; fields with d* = 0
// are removed.
inline AllocationScheme finalize(std::span<const DynamicFieldState> states, GateBank& bank) {
  AllocationScheme a;
  std::vector<std::vector<double>> snap;
  for (const auto& s : states) {
    auto g = gate_values(bank, s.field.field_index);
    g.resize(s.used_dims);
    std::size_t d = 0;
    for (double x : g) d += x > 0.5 ? 1 : 0;
    a.fields.push_back({s.field.name, s.vocab_size(), d});
    if (d == 0) a.removed.push_back(s.field.name);
    a.gate_snapshot[s.field.name] = g;
    snap.push_back(std::move(g));
  }
  bank.snapshot = std::move(snap);
  return a;
}

}  // namespace dimgrow

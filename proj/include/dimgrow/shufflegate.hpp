#pragma once

// Dimension-wise shuffle gates.
//
// Every used embedding dimension k of field i carries a gate
// g_ik = sigmoid(tau * theta_ik). In the forward pass the dimension is mixed
// with a within-batch shuffled copy of itself,
//     e*_ik = g_ik * e_ik + (1 - g_ik) * stop_gradient(shuffle(e_ik)),
// so a gate only stays open if scrambling that dimension hurts the task loss
// by more than the L1 pressure on the gate.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "dimgrow/diffcore.hpp"
#include "dimgrow/optim.hpp"
#include "dimgrow/rng.hpp"

namespace dimgrow {

constexpr double kDefaultGateTemperature = 5.0;

struct GateBank {
  double temperature = kDefaultGateTemperature;
  std::vector<Param> theta;  // per field, 1 x allocated_dims
  std::optional<std::vector<std::vector<double>>> snapshot;

  std::size_t num_fields() const { return theta.size(); }
  std::size_t allocated(std::size_t field) const { return theta.at(field).cols(); }
};

using ColumnPermutations = std::vector<std::vector<std::size_t>>;  // [col][row] -> source row

// Per-column permutations drawn by argsorting i.i.d. uniforms, one block of
// rows*cols draws in column order.
inline ColumnPermutations draw_column_permutations(std::size_t rows, std::size_t cols, Rng& rng) {
  ColumnPermutations perm(cols, std::vector<std::size_t>(rows));
  std::vector<double> keys(rows);
  for (std::size_t c = 0; c < cols; ++c) {
    for (auto& k : keys) k = rng.uniform();
    auto& p = perm[c];
    std::iota(p.begin(), p.end(), std::size_t{0});
    std::stable_sort(p.begin(), p.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
  }
  return perm;
}

// Each output column is an independent uniform permutation of the matching
// input column.
inline Tensor2 shuffle_columns(const Tensor2& s, Rng& rng) {
  const auto perm = draw_column_permutations(s.rows, s.cols, rng);
  Tensor2 out(s.rows, s.cols);
  for (std::size_t c = 0; c < s.cols; ++c)
    for (std::size_t r = 0; r < s.rows; ++r) out(r, c) = s(perm[c][r], c);
  return out;
}

inline std::vector<double> gate_values(const GateBank& bank, std::size_t field) {
  const Tensor2& th = bank.theta.at(field).w;
  std::vector<double> g(th.cols);
  for (std::size_t k = 0; k < th.cols; ++k) g[k] = detail::stable_sigmoid(bank.temperature * th.values[k]);
  return g;
}

// Gate row vector [1 x d] for the first d dims of a field, differentiable in theta.
inline Var gate_node(Graph& graph, GateBank& bank, std::size_t field, std::size_t d) {
  Param& th = bank.theta.at(field);
  if (d > th.cols()) {
    throw ConfigError("gate: " + std::to_string(d) + " dims requested but field " + std::to_string(field) +
                      " has " + std::to_string(th.cols()) + " gates");
  }
  Var theta = graph.slice_cols(graph.param(th.w), d);
  return graph.sigmoid(graph.scale(theta, bank.temperature));
}

enum class ShuffleMode {
  Random,       // fresh permutation per column (training)
  Expectation,  // shuffled branch replaced by its column mean (deterministic evaluation)
};

inline Var apply_gate(Graph& graph, Var orig, GateBank& bank, std::size_t field, Rng& rng,
                      ShuffleMode mode = ShuffleMode::Random) {
  const Tensor2& e = graph.value(orig);
  const std::size_t rows = e.rows, d = e.cols;
  Var gates = gate_node(graph, bank, field, d);
  Var shuffled;
  if (mode == ShuffleMode::Random) {
    shuffled = graph.stop_gradient(graph.permute_columns(orig, draw_column_permutations(rows, d, rng)));
  } else {
    const Tensor2& ev = graph.value(orig);
    Tensor2 mean(rows, d);
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < rows; ++r) s += ev(r, c);
      s /= static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) mean(r, c) = s;
    }
    shuffled = graph.constant(std::move(mean));
  }
  return graph.gate_mix(orig, shuffled, gates);
}

// Per-dimension L1 weight: 1 for the plain penalty, 1/(k+1) for the decayed
// one (k counted from 1).
inline double gate_penalty_weight(std::size_t k0, bool decayed) {
  return decayed ? 1.0 / static_cast<double>(k0 + 2) : 1.0;
}

// alpha * sum_i sum_{k <= d_i} w_k * g_ik over used dims only. Gates are
// positive so |g| == g.
inline Var gate_regularizer(Graph& graph, GateBank& bank, std::span<const std::size_t> used_dims,
                            double alpha, bool decayed) {
  if (alpha < 0.0) throw ConfigError("gate_regularizer: alpha must be >= 0");
  Var total = graph.constant(Tensor2(1, 1, 0.0));
  for (std::size_t i = 0; i < used_dims.size(); ++i) {
    if (used_dims[i] == 0) continue;
    Var g = gate_node(graph, bank, i, used_dims[i]);
    std::vector<double> w(used_dims[i]);
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = alpha * gate_penalty_weight(k, decayed);
    total = graph.add(total, graph.weighted_sum(g, w));
  }
  return total;
}

inline double gate_regularizer_value(const GateBank& bank, std::span<const std::size_t> used_dims, double alpha,
                                     bool decayed) {
  double s = 0.0;
  for (std::size_t i = 0; i < used_dims.size(); ++i) {
    const auto g = gate_values(bank, i);
    for (std::size_t k = 0; k < used_dims[i]; ++k) s += gate_penalty_weight(k, decayed) * g[k];
  }
  return alpha * s;
}

}  // namespace dimgrow

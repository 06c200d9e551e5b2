#pragma once

// Growable per-field embedding tables.
//
// A field owns an embedding table E [V x d_alloc] and an adapter
// W [d_alloc x d_bb]. Only the first `used_dims` columns of E (rows of W,
// entries of theta) take part in the forward pass; the rest are kept so a
// dimension that was shrunk away can be re-activated without reallocation.
// Column k of E, row k of W and theta_k always describe the same logical
// dimension.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "dimgrow/datasets.hpp"
#include "dimgrow/diffcore.hpp"
#include "dimgrow/optim.hpp"
#include "dimgrow/rng.hpp"
#include "dimgrow/shufflegate.hpp"

namespace dimgrow {

constexpr double kEmbeddingInitStd = 0.01;

inline double adapter_init_std(std::size_t d_bb) { return 1.0 / std::sqrt(static_cast<double>(d_bb)); }

namespace detail {

// Appends one column; new slots start with empty optimizer state.
inline void append_col(Param& p, const std::vector<double>& col) {
  const std::size_t R = p.w.rows, C = p.w.cols;
  Param out(Tensor2(R, C + 1));
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t src = r * C + c, dst = r * (C + 1) + c;
      out.w.values[dst] = p.w.values[src];
      out.w.grad[dst] = p.w.grad[src];
      out.m[dst] = p.m[src];
      out.v[dst] = p.v[src];
      out.t[dst] = p.t[src];
    }
    out.w.values[r * (C + 1) + C] = col[r];
  }
  p = std::move(out);
}

inline void append_row(Param& p, const std::vector<double>& row) {
  p.w.rows += 1;
  p.w.values.insert(p.w.values.end(), row.begin(), row.end());
  p.w.grad.resize(p.w.values.size(), 0.0);
  p.m.resize(p.w.values.size(), 0.0);
  p.v.resize(p.w.values.size(), 0.0);
  p.t.resize(p.w.values.size(), 0);
}

// Column c of the leading block becomes old column order[c], moments included.
inline void permute_leading_cols(Param& p, const std::vector<std::size_t>& order) {
  const std::size_t C = p.w.cols;
  Param old = p;
  for (std::size_t r = 0; r < p.w.rows; ++r)
    for (std::size_t c = 0; c < order.size(); ++c) {
      const std::size_t dst = r * C + c, src = r * C + order[c];
      p.w.values[dst] = old.w.values[src];
      p.w.grad[dst] = old.w.grad[src];
      p.m[dst] = old.m[src];
      p.v[dst] = old.v[src];
      p.t[dst] = old.t[src];
    }
}

inline void permute_leading_rows(Param& p, const std::vector<std::size_t>& order) {
  const std::size_t C = p.w.cols;
  Param old = p;
  for (std::size_t r = 0; r < order.size(); ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t dst = r * C + c, src = order[r] * C + c;
      p.w.values[dst] = old.w.values[src];
      p.w.grad[dst] = old.w.grad[src];
      p.m[dst] = old.m[src];
      p.v[dst] = old.v[src];
      p.t[dst] = old.t[src];
    }
}

}  // namespace detail

struct DynamicFieldState {
  FieldSchema field;
  Param table;    // V x allocated
  Param adapter;  // allocated x d_bb
  std::size_t used_dims = 1;
  std::size_t grow_events = 0;

  std::size_t allocated_dims() const { return table.cols(); }
  std::size_t vocab_size() const { return table.rows(); }
  std::size_t d_bb() const { return adapter.cols(); }
};

struct ModelDims {
  std::size_t d_bb = 0;
  std::size_t d_sum = 0;
};

inline ModelDims model_dims(std::span<const DynamicFieldState> states) {
  ModelDims m;
  for (const auto& s : states) {
    m.d_bb = s.d_bb();
    m.d_sum += s.used_dims;
  }
  return m;
}

// Starts the field at one dimension and appends its gate (theta = 0, gate 0.5)
// to the bank. Fields must be initialised in field_index order.
inline DynamicFieldState init_field(const FieldSchema& schema, std::size_t d_bb, GateBank& bank, Rng& rng) {
  if (bank.theta.size() != schema.field_index)
    throw ConfigError("init_field: fields must be initialised in index order");
  if (d_bb < 1) throw ConfigError("init_field: d_bb must be >= 1");
  DynamicFieldState s;
  s.field = schema;
  Tensor2 table(schema.vocab_size, 1);
  for (auto& x : table.values) x = rng.normal(0.0, kEmbeddingInitStd);
  Tensor2 adapter(1, d_bb);
  for (auto& x : adapter.values) x = rng.normal(0.0, adapter_init_std(d_bb));
  s.table = Param(std::move(table));
  s.adapter = Param(std::move(adapter));
  s.used_dims = 1;
  bank.theta.emplace_back(Tensor2(1, 1, 0.0));
  return s;
}

// Embeddings of the batch restricted to the used dims: [B x used_dims].
inline Var lookup(Graph& graph, DynamicFieldState& state, std::span<const std::size_t> indices) {
  Var rows = graph.row_gather(graph.param(state.table.w), indices);
  if (state.used_dims == state.allocated_dims()) return rows;
  return graph.slice_cols(rows, state.used_dims);
}

// Adds one used dimension. Beyond the allocation a fresh column/row/gate is
// created; otherwise the stored column and adapter row are reused and only the
// gate (theta = 0) and the slot's optimizer state are reset.
inline void grow(DynamicFieldState& state, GateBank& bank, Rng& rng) {
  Param& theta = bank.theta.at(state.field.field_index);
  state.used_dims += 1;
  state.grow_events += 1;
  const std::size_t k = state.used_dims - 1;
  if (state.used_dims > state.allocated_dims()) {
    std::vector<double> col(state.vocab_size());
    for (auto& x : col) x = rng.normal(0.0, kEmbeddingInitStd);
    std::vector<double> row(state.d_bb());
    for (auto& x : row) x = rng.normal(0.0, adapter_init_std(state.d_bb()));
    detail::append_col(state.table, col);
    detail::append_row(state.adapter, row);
    detail::append_col(theta, {0.0});
    return;
  }
  theta.w.values[k] = 0.0;
  theta.reset_slot(k);
  for (std::size_t r = 0; r < state.table.rows(); ++r) state.table.reset_slot(r * state.table.cols() + k);
  for (std::size_t c = 0; c < state.adapter.cols(); ++c) state.adapter.reset_slot(k * state.adapter.cols() + c);
}

// Reorders the used dims by `gate_order` (a permutation of 0..used_dims-1,
// highest gate first) and keeps the first `new_used`. Dims past new_used stay
// allocated and untouched.
inline void shrink(DynamicFieldState& state, GateBank& bank, std::size_t new_used,
                   const std::vector<std::size_t>& gate_order) {
  if (new_used < 1) throw ConfigError("shrink: a field keeps at least one used dimension");
  if (new_used >= state.used_dims) throw ConfigError("shrink: new_used must be below used_dims");
  if (gate_order.size() != state.used_dims) throw ConfigError("shrink: gate_order must cover the used dims");
  std::vector<bool> seen(gate_order.size(), false);
  for (std::size_t k : gate_order) {
    if (k >= seen.size() || seen[k]) throw ConfigError("shrink: gate_order is not a permutation");
    seen[k] = true;
  }
  Param& theta = bank.theta.at(state.field.field_index);
  detail::permute_leading_cols(state.table, gate_order);
  detail::permute_leading_rows(state.adapter, gate_order);
  detail::permute_leading_cols(theta, gate_order);
  state.used_dims = new_used;
}

// Indices of the used dims sorted by gate value, highest first (ties keep
// the lower index first).
inline std::vector<std::size_t> gate_descending_order(const GateBank& bank, const DynamicFieldState& state) {
  const auto g = gate_values(bank, state.field.field_index);
  std::vector<std::size_t> order(state.used_dims);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return g[a] > g[b]; });
  return order;
}

struct ParamCounts {
  std::size_t used = 0;
  std::size_t allocated = 0;
};

inline ParamCounts param_counts(std::span<const DynamicFieldState> states) {
  ParamCounts c;
  for (const auto& s : states) {
    c.used += s.vocab_size() * s.used_dims;
    c.allocated += s.vocab_size() * s.allocated_dims();
  }
  return c;
}

}  // namespace dimgrow

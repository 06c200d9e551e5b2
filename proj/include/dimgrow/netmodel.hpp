#pragma once

// Search-time model and the compact retrain model.
//
// Search: each field's used embedding columns go through its shuffle gates,
// are projected by the matching adapter rows into the shared backbone width
// d_bb and summed,
//     h = sum_i e*_i W_i[:d_i]   (== concat(e*_1..e*_F) * concat(W_1[:d_1]..W_F[:d_F])),
// then an MLP produces the logit, plus a per-field scalar ("wide") term.
//
// Retrain: plain embedding tables of the allocated widths, concatenated and
// fed to the same MLP shape. No gates, no shuffling, no adapters.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dimgrow/allocation.hpp"
#include "dimgrow/datasets.hpp"
#include "dimgrow/diffcore.hpp"
#include "dimgrow/dynembed.hpp"
#include "dimgrow/optim.hpp"
#include "dimgrow/rng.hpp"
#include "dimgrow/shufflegate.hpp"

namespace dimgrow {

struct BackboneConfig {
  std::size_t d_bb = 0;  // 0 -> 16 * number of fields
  std::vector<std::size_t> hidden_sizes{64, 32};
  bool wide_enabled = true;

  std::size_t resolved_d_bb(std::size_t num_fields) const { return d_bb ? d_bb : 16 * num_fields; }

  void validate() const {
    for (auto h : hidden_sizes)
      if (h < 1) throw ConfigError("backbone: hidden sizes must be >= 1");
  }
};

struct DenseLayer {
  Param weight;  // in x out
  Param bias;    // 1 x out
};

struct Backbone {
  std::vector<DenseLayer> hidden;
  DenseLayer output;

  std::size_t input_width() const { return hidden.empty() ? output.weight.rows() : hidden.front().weight.rows(); }

  std::size_t param_count() const {
    std::size_t n = output.weight.w.size() + output.bias.w.size();
    for (const auto& l : hidden) n += l.weight.w.size() + l.bias.w.size();
    return n;
  }

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    for (auto& l : hidden) {
      fn(l.weight);
      fn(l.bias);
    }
    fn(output.weight);
    fn(output.bias);
  }
};

inline DenseLayer make_dense(std::size_t in, std::size_t out, double stddev, Rng& rng) {
  Tensor2 w(in, out);
  for (auto& x : w.values) x = rng.normal(0.0, stddev);
  return DenseLayer{Param(std::move(w)), Param(Tensor2(1, out, 0.0))};
}

// He-normal hidden layers, Glorot-style output layer, zero biases.
inline Backbone make_backbone(std::size_t input_width, const std::vector<std::size_t>& hidden, Rng& rng) {
  Backbone bb;
  std::size_t in = input_width;
  for (std::size_t h : hidden) {
    bb.hidden.push_back(make_dense(in, h, std::sqrt(2.0 / static_cast<double>(in)), rng));
    in = h;
  }
  bb.output = make_dense(in, 1, std::sqrt(1.0 / static_cast<double>(in)), rng);
  return bb;
}

inline Var backbone_forward(Graph& g, Backbone& bb, Var x) {
  for (auto& l : bb.hidden) x = g.relu(g.add_row(g.matmul(x, g.param(l.weight.w)), g.param(l.bias.w)));
  return g.add_row(g.matmul(x, g.param(bb.output.weight.w)), g.param(bb.output.bias.w));
}

// Per-field scalar per category, summed into the logit.
struct WideState {
  std::vector<Param> tables;  // V_i x 1

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& t : tables) n += t.w.size();
    return n;
  }
};

inline WideState make_wide(const std::vector<std::size_t>& vocab_sizes) {
  WideState w;
  for (auto v : vocab_sizes) w.tables.emplace_back(Tensor2(v, 1, 0.0));
  return w;
}

inline Var add_wide(Graph& g, WideState& wide, const std::vector<const std::vector<std::size_t>*>& idx, Var logits) {
  for (std::size_t i = 0; i < wide.tables.size(); ++i)
    logits = g.add(logits, g.row_gather(g.param(wide.tables[i].w), *idx[i]));
  return logits;
}

// ---------------------------------------------------------------------------
// Search model

struct SearchModel {
  BackboneConfig config;
  std::vector<DynamicFieldState> fields;
  GateBank bank;
  Backbone backbone;
  WideState wide;

  std::vector<std::size_t> used_dims() const {
    std::vector<std::size_t> d;
    for (const auto& f : fields) d.push_back(f.used_dims);
    return d;
  }
};

inline SearchModel make_search_model(const std::vector<FieldSchema>& schema, const BackboneConfig& cfg,
                                     double temperature, Rng& rng) {
  cfg.validate();
  if (schema.empty()) throw ConfigError("search model: no fields");
  SearchModel m;
  m.config = cfg;
  m.config.d_bb = cfg.resolved_d_bb(schema.size());
  m.bank.temperature = temperature;
  for (const auto& f : schema) m.fields.push_back(init_field(f, m.config.d_bb, m.bank, rng));
  m.backbone = make_backbone(m.config.d_bb, cfg.hidden_sizes, rng);
  if (cfg.wide_enabled) {
    std::vector<std::size_t> vs;
    for (const auto& f : schema) vs.push_back(f.vocab_size);
    m.wide = make_wide(vs);
  }
  return m;
}

// Sum of per-field gated projections, [B x d_bb].
inline Var search_hidden_input(Graph& g, SearchModel& m, const Batch& batch, Rng& shuffle_rng, ShuffleMode mode) {
  Var h{};
  bool first = true;
  for (std::size_t i = 0; i < m.fields.size(); ++i) {
    auto& f = m.fields[i];
    Var e = lookup(g, f, batch.indices.at(i));
    Var gated = apply_gate(g, e, m.bank, i, shuffle_rng, mode);
    Var w = g.param(f.adapter.w);
    if (f.used_dims < f.allocated_dims()) w = g.slice_rows(w, f.used_dims);
    Var proj = g.matmul(gated, w);
    h = first ? proj : g.add(h, proj);
    first = false;
  }
  return h;
}

inline Var forward_search(Graph& g, SearchModel& m, const Batch& batch, Rng& shuffle_rng,
                          ShuffleMode mode = ShuffleMode::Random) {
  if (mode == ShuffleMode::Random && batch.size() < 2)
    throw ConfigError("forward_search: batch size must be >= 2 while searching");
  Var logits = backbone_forward(g, m.backbone, search_hidden_input(g, m, batch, shuffle_rng, mode));
  if (m.config.wide_enabled) {
    std::vector<const std::vector<std::size_t>*> idx;
    for (const auto& col : batch.indices) idx.push_back(&col);
    logits = add_wide(g, m.wide, idx, logits);
  }
  return logits;
}

// Task loss plus the gate penalty over the used dims.
inline Var loss_search(Graph& g, Var logits, std::span<const int> labels, GateBank& bank,
                       std::span<const std::size_t> used_dims, double alpha, bool decayed) {
  Var task = g.bce_with_logits(logits, labels);
  if (alpha == 0.0) return task;
  return g.add(task, gate_regularizer(g, bank, used_dims, alpha, decayed));
}

// ---------------------------------------------------------------------------
// Retrain model

struct RetrainModel {
  BackboneConfig config;
  std::vector<std::size_t> field_ids;  // dataset field index of each surviving field
  std::vector<std::string> names;
  std::vector<Param> tables;  // V_i x d_i*
  Backbone backbone;
  WideState wide;

  std::size_t embedding_params() const {
    std::size_t n = 0;
    for (const auto& t : tables) n += t.w.size();
    return n;
  }

  std::size_t param_count() const { return embedding_params() + backbone.param_count() + wide.param_count(); }

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    for (auto& t : tables) fn(t);
    backbone.for_each_param(fn);
    for (auto& t : wide.tables) fn(t);
  }
};

// Fields are matched to the dataset schema by name; fields with dim 0 are
// left out entirely.
inline RetrainModel build_retrain_model(const AllocationScheme& alloc, const std::vector<FieldSchema>& schema,
                                        const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  RetrainModel m;
  m.config = cfg;
  std::vector<std::size_t> vocab;
  std::size_t width = 0;
  for (const auto& fa : alloc.fields) {
    if (fa.dim == 0) continue;
    const FieldSchema* fs = nullptr;
    for (const auto& s : schema)
      if (s.name == fa.name) fs = &s;
    if (!fs) throw ConfigError("allocation field '" + fa.name + "' is not in the dataset");
    if (fa.vocab_size != 0 && fa.vocab_size != fs->vocab_size)
      throw ConfigError("allocation field '" + fa.name + "' vocab size " + std::to_string(fa.vocab_size) +
                        " does not match dataset (" + std::to_string(fs->vocab_size) + ")");
    Tensor2 t(fs->vocab_size, fa.dim);
    for (auto& x : t.values) x = rng.normal(0.0, kEmbeddingInitStd);
    m.tables.emplace_back(std::move(t));
    m.field_ids.push_back(fs->field_index);
    m.names.push_back(fa.name);
    vocab.push_back(fs->vocab_size);
    width += fa.dim;
  }
  if (m.tables.empty()) throw ConfigError("allocation keeps no fields; nothing to retrain");
  m.config.d_bb = width;
  m.backbone = make_backbone(width, cfg.hidden_sizes, rng);
  if (cfg.wide_enabled) m.wide = make_wide(vocab);
  return m;
}

inline Var forward_retrain(Graph& g, RetrainModel& m, const Batch& batch) {
  std::vector<Var> parts;
  std::vector<const std::vector<std::size_t>*> idx;
  for (std::size_t i = 0; i < m.tables.size(); ++i) {
    idx.push_back(&batch.indices.at(m.field_ids[i]));
    parts.push_back(g.row_gather(g.param(m.tables[i].w), *idx.back()));
  }
  Var x = parts.size() == 1 ? parts[0] : g.concat_cols(parts);
  Var logits = backbone_forward(g, m.backbone, x);
  if (m.config.wide_enabled) logits = add_wide(g, m.wide, idx, logits);
  return logits;
}

inline std::vector<double> forward_eval(RetrainModel& m, const Batch& batch) {
  Graph g;
  const Tensor2& z = g.value(forward_retrain(g, m, batch));
  std::vector<double> s(z.rows);
  for (std::size_t i = 0; i < z.rows; ++i) s[i] = detail::stable_sigmoid(z.values[i]);
  return s;
}

// Deterministic scores of the search model: the shuffled branch is replaced
// by its batch column mean.
inline std::vector<double> forward_eval(SearchModel& m, const Batch& batch) {
  Graph g;
  Rng unused(0);
  const Tensor2& z = g.value(forward_search(g, m, batch, unused, ShuffleMode::Expectation));
  std::vector<double> s(z.rows);
  for (std::size_t i = 0; i < z.rows; ++i) s[i] = detail::stable_sigmoid(z.values[i]);
  return s;
}

}  // namespace dimgrow

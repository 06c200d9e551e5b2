#pragma once

// Categorical datasets: CSV ingestion with per-field vocabularies, seeded
// splitting and batching, and a synthetic generator with a planted number of
// useful latent dimensions per field.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "dimgrow/errors.hpp"
#include "dimgrow/rng.hpp"

namespace dimgrow {

struct FieldSchema {
  std::string name;
  std::size_t vocab_size = 1;
  std::size_t field_index = 0;
};

// Columnar storage: columns[f][n] is the category index of field f in row n.
struct Dataset {
  std::vector<FieldSchema> schema;
  std::vector<std::vector<std::size_t>> columns;
  std::vector<int> labels;

  std::size_t num_rows() const { return labels.size(); }
  std::size_t num_fields() const { return schema.size(); }
  bool empty() const { return labels.empty(); }

  std::optional<std::size_t> field_by_name(const std::string& name) const {
    for (const auto& f : schema)
      if (f.name == name) return f.field_index;
    return std::nullopt;
  }

  // Throws DataError on the first violated invariant.
  void validate() const {
    std::unordered_set<std::string> names;
    for (std::size_t i = 0; i < schema.size(); ++i) {
      const auto& f = schema[i];
      if (f.field_index != i) throw DataError("field indices must be contiguous from 0");
      if (f.vocab_size < 1) throw DataError("field '" + f.name + "' has empty vocabulary");
      if (!names.insert(f.name).second) throw DataError("duplicate field name '" + f.name + "'");
    }
    if (columns.size() != schema.size()) throw DataError("column count does not match schema");
    for (std::size_t f = 0; f < columns.size(); ++f) {
      if (columns[f].size() != labels.size()) throw DataError("column length does not match labels");
      for (std::size_t n = 0; n < columns[f].size(); ++n)
        if (columns[f][n] >= schema[f].vocab_size)
          throw DataError("row " + std::to_string(n) + ": index out of vocabulary for field '" +
                          schema[f].name + "'");
    }
    for (std::size_t n = 0; n < labels.size(); ++n)
      if (labels[n] != 0 && labels[n] != 1)
        throw DataError("row " + std::to_string(n) + ": label must be 0 or 1");
  }

  // Rows selected in the given order; schema unchanged.
  Dataset subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    out.schema = schema;
    out.columns.assign(schema.size(), {});
    for (std::size_t f = 0; f < schema.size(); ++f) {
      out.columns[f].reserve(rows.size());
      for (std::size_t r : rows) out.columns[f].push_back(columns[f][r]);
    }
    out.labels.reserve(rows.size());
    for (std::size_t r : rows) out.labels.push_back(labels[r]);
    return out;
  }
};

struct Batch {
  std::vector<std::vector<std::size_t>> indices;  // [field][b]
  std::vector<int> labels;
  std::vector<std::size_t> rows;  // source row ids

  std::size_t size() const { return labels.size(); }
};

// ---------------------------------------------------------------------------
// CSV

namespace csv {

// Splits one logical record. Quoted fields may contain commas, doubled quotes
// and newlines; `in` is advanced past the record. Returns false at EOF.
inline bool read_record(std::istream& in, std::vector<std::string>& out, std::size_t& line_no) {
  out.clear();
  std::string field;
  bool in_quotes = false;
  bool any = false;
  bool field_was_quoted = false;
  char ch;
  while (in.get(ch)) {
    any = true;
    if (in_quotes) {
      if (ch == '"') {
        if (in.peek() == '"') {
          in.get(ch);
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        if (ch == '\n') ++line_no;
        field.push_back(ch);
      }
      continue;
    }
    if (ch == '"') {
      if (!field.empty() || field_was_quoted) throw DataError("line " + std::to_string(line_no) + ": stray quote");
      in_quotes = true;
      field_was_quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(field));
      field.clear();
      field_was_quoted = false;
    } else if (ch == '\n') {
      ++line_no;
      out.push_back(std::move(field));
      return true;
    } else if (ch == '\r') {
      if (in.peek() != '\n') field.push_back(ch);
    } else {
      field.push_back(ch);
    }
  }
  if (in_quotes) throw DataError("line " + std::to_string(line_no) + ": unterminated quoted field");
  if (!any) return false;
  out.push_back(std::move(field));
  return true;
}

inline std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace csv

// String-valued table as read from disk, before vocabulary encoding.
struct RawTable {
  std::vector<std::string> feature_names;
  std::vector<std::vector<std::string>> rows;  // [row][feature]
  std::vector<int> labels;
};

inline RawTable read_csv(const std::string& path, const std::string& label_column = "label") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  RawTable t;
  std::vector<std::string> rec;
  std::size_t line_no = 1;
  if (!csv::read_record(in, rec, line_no)) throw DataError(path + ": missing header row");
  std::optional<std::size_t> label_pos;
  for (std::size_t i = 0; i < rec.size(); ++i) {
    if (rec[i] == label_column) {
      label_pos = i;
    } else {
      t.feature_names.push_back(rec[i]);
    }
  }
  if (!label_pos) throw DataError(path + ": label column '" + label_column + "' not found");
  const std::size_t width = rec.size();
  std::size_t row_no = 0;
  while (true) {
    const std::size_t start_line = line_no;
    if (!csv::read_record(in, rec, line_no)) break;
    ++row_no;
    if (rec.size() == 1 && rec[0].empty()) continue;  // blank line
    if (rec.size() != width) {
      throw DataError(path + ": row " + std::to_string(row_no) + " (line " + std::to_string(start_line) +
                      ") has " + std::to_string(rec.size()) + " columns, expected " +
                      std::to_string(width));
    }
    const std::string& lab = rec[*label_pos];
    if (lab != "0" && lab != "1") {
      throw DataError(path + ": row " + std::to_string(row_no) + " has non-binary label '" + lab + "'");
    }
    t.labels.push_back(lab == "1" ? 1 : 0);
    std::vector<std::string> feats;
    feats.reserve(width - 1);
    for (std::size_t i = 0; i < width; ++i)
      if (i != *label_pos) feats.push_back(std::move(rec[i]));
    t.rows.push_back(std::move(feats));
  }
  return t;
}

// Per-field category vocabulary. Index 0 is reserved for out-of-vocabulary
// values; known categories are numbered from 1 in first-seen order.
struct Vocabulary {
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::string> tokens{"<OOV>"};

  std::size_t size() const { return tokens.size(); }

  std::size_t add(const std::string& s) {
    auto [it, inserted] = index.emplace(s, tokens.size());
    if (inserted) tokens.push_back(s);
    return it->second;
  }

  std::size_t lookup(const std::string& s) const {
    auto it = index.find(s);
    return it == index.end() ? 0 : it->second;
  }
};

inline std::vector<Vocabulary> build_vocabularies(const RawTable& t, const std::vector<std::size_t>& rows) {
  std::vector<Vocabulary> v(t.feature_names.size());
  for (std::size_t r : rows)
    for (std::size_t f = 0; f < v.size(); ++f) v[f].add(t.rows[r][f]);
  return v;
}

inline Dataset encode(const RawTable& t, const std::vector<Vocabulary>& vocab,
                      const std::vector<std::size_t>& rows) {
  Dataset ds;
  for (std::size_t f = 0; f < t.feature_names.size(); ++f)
    ds.schema.push_back(FieldSchema{t.feature_names[f], vocab[f].size(), f});
  ds.columns.assign(ds.schema.size(), {});
  for (auto& c : ds.columns) c.reserve(rows.size());
  ds.labels.reserve(rows.size());
  for (std::size_t r : rows) {
    for (std::size_t f = 0; f < ds.schema.size(); ++f) ds.columns[f].push_back(vocab[f].lookup(t.rows[r][f]));
    ds.labels.push_back(t.labels[r]);
  }
  return ds;
}

inline std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), std::size_t{0});
  return r;
}

// Whole file, vocabulary built over every row.
inline Dataset load_csv(const std::string& path, const std::string& label_column = "label") {
  RawTable t = read_csv(path, label_column);
  if (t.labels.empty()) throw DataError(path + ": no data rows");
  auto rows = iota_rows(t.labels.size());
  return encode(t, build_vocabularies(t, rows), rows);
}

inline void write_csv(const Dataset& ds, const std::string& path, const std::string& label_column = "label") {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (const auto& f : ds.schema) out << csv::quote(f.name) << ',';
  out << csv::quote(label_column) << '\n';
  for (std::size_t n = 0; n < ds.num_rows(); ++n) {
    for (std::size_t f = 0; f < ds.num_fields(); ++f) out << ds.columns[f][n] << ',';
    out << ds.labels[n] << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Splitting and batching

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct SplitRows {
  std::vector<std::size_t> train, val, test;
};

// Seeded row permutation, then val = floor(f_val * N) and test =
// floor(f_test * N) rows; the remainder goes to train. A zero fraction
// yields an intentionally empty split; a positive fraction that rounds to
// zero rows is an error.
inline SplitRows split_rows(std::size_t n, const SplitFractions& fr, std::uint64_t seed) {
  if (fr.train <= 0.0 || fr.val < 0.0 || fr.test < 0.0 || fr.train + fr.val + fr.test > 1.0 + 1e-12)
    throw ConfigError("split fractions must be non-negative, train positive, sum <= 1");
  auto perm = iota_rows(n);
  Rng rng = Rng::stream(seed, "data-split");
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  const auto n_val = static_cast<std::size_t>(std::floor(fr.val * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::floor(fr.test * static_cast<double>(n)));
  if ((fr.val > 0.0 && n_val == 0) || (fr.test > 0.0 && n_test == 0))
    throw DataError("split produces an empty validation or test partition for N = " + std::to_string(n));
  if (n_val + n_test >= n) throw DataError("split leaves no training rows");
  SplitRows s;
  s.val.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val),
                perm.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
  s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), perm.end());
  return s;
}

struct SplitDatasets {
  Dataset train, val, test;
};

inline SplitDatasets split(const Dataset& ds, const SplitFractions& fr, std::uint64_t seed) {
  SplitRows s = split_rows(ds.num_rows(), fr, seed);
  return {ds.subset(s.train), ds.subset(s.val), ds.subset(s.test)};
}

// CSV pipeline: split first, build vocabularies from the training rows only,
// then encode every split (unseen categories map to index 0).
inline SplitDatasets load_csv_split(const std::string& path, const std::string& label_column,
                                    const SplitFractions& fr, std::uint64_t seed) {
  RawTable t = read_csv(path, label_column);
  if (t.labels.empty()) throw DataError(path + ": no data rows");
  SplitRows s = split_rows(t.labels.size(), fr, seed);
  auto vocab = build_vocabularies(t, s.train);
  return {encode(t, vocab, s.train), encode(t, vocab, s.val), encode(t, vocab, s.test)};
}

// Visits every row once per epoch in an order fixed by (seed, epoch). The
// final partial batch is emitted.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                bool eval_mode = false)
      : ds_(&ds), batch_size_(batch_size) {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (batch_size < 2 && !eval_mode) throw ConfigError("training batch size must be >= 2");
    order_ = iota_rows(ds.num_rows());
    if (!eval_mode) {
      Rng rng = Rng::stream(seed ^ (epoch * 0x9e3779b97f4a7c15ULL), "batch-order");
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
    }
  }

  std::optional<Batch> next() {
    if (pos_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(order_.size(), pos_ + batch_size_);
    Batch b;
    b.indices.assign(ds_->num_fields(), {});
    for (auto& col : b.indices) col.reserve(end - pos_);
    for (std::size_t i = pos_; i < end; ++i) {
      const std::size_t r = order_[i];
      b.rows.push_back(r);
      b.labels.push_back(ds_->labels[r]);
      for (std::size_t f = 0; f < ds_->num_fields(); ++f) b.indices[f].push_back(ds_->columns[f][r]);
    }
    pos_ = end;
    return b;
  }

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline BatchIterator batch_iter(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                                std::uint64_t epoch, bool eval_mode = false) {
  return BatchIterator(ds, batch_size, seed, epoch, eval_mode);
}

// ---------------------------------------------------------------------------
// Synthetic data with planted per-field dimensionality

struct SyntheticField {
  std::size_t vocab_size = 1;
  std::size_t planted_dim = 0;
};

struct SyntheticSpec {
  std::vector<SyntheticField> fields;
  std::size_t n_samples = 0;
  double label_noise = 0.0;
  std::uint64_t seed = 0;
  // Strength of the pairwise latent interactions. Zero leaves only the
  // additive per-field terms, whose contribution is a scalar per category.
  double interaction_scale = 1.0;

  void validate() const {
    if (fields.empty()) throw ConfigError("synthetic spec: no fields");
    bool any = false;
    for (const auto& f : fields) {
      if (f.vocab_size < 1) throw ConfigError("synthetic spec: vocab_size must be >= 1");
      any = any || f.planted_dim >= 1;
    }
    if (!any) throw ConfigError("synthetic spec: at least one field needs planted_dim >= 1");
    if (n_samples < 1) throw ConfigError("synthetic spec: n_samples must be >= 1");
    if (!(label_noise >= 0.0 && label_noise < 0.5)) throw ConfigError("synthetic spec: label_noise must be in [0, 0.5)");
    if (!(interaction_scale >= 0.0)) throw ConfigError("synthetic spec: interaction_scale must be >= 0");
  }
};

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"fields", "n_samples", "label_noise", "seed", "interaction_scale"};
  if (!j.is_object()) throw ConfigError("synthetic spec: expected a JSON object");
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError("synthetic spec: unknown key '" + k + "'");
  SyntheticSpec s;
  try {
    for (const auto& f : j.at("fields")) {
      for (const auto& [k, _] : f.items())
        if (k != "vocab_size" && k != "planted_dim") throw ConfigError("synthetic spec: unknown field key '" + k + "'");
      s.fields.push_back({f.at("vocab_size").get<std::size_t>(), f.at("planted_dim").get<std::size_t>()});
    }
    s.n_samples = j.at("n_samples").get<std::size_t>();
    s.label_noise = j.at("label_noise").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("interaction_scale")) s.interaction_scale = j.at("interaction_scale").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

inline SyntheticSpec load_synthetic_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return synthetic_spec_from_json(j);
}

// Ground-truth generative parameters.
//   logit = sum_i w_i . z_i(c_i) + sum_{i<j} z_i(c_i)^T A_ij z_j(c_j)
// z_i(c) ~ N(0, I_{k_i}), w_i in {-1, +1}^{k_i}, A_ij Gaussian with entry sd
// interaction_scale / sqrt(k_i k_j). The interaction terms are what make more
// than one embedding dimension necessary: an additive term alone is a single
// scalar per category. Field i's latent reaches the label through the stacked
// map [A_ij]_j, so its rank (not k_i) is the dimension a model actually needs;
// draws are repeated until every such map is close to isotropic.
struct PlantedModel {
  std::vector<std::size_t> dims;
  std::vector<std::vector<std::vector<double>>> latent;  // [field][category][k]
  std::vector<std::vector<double>> weights;              // [field][k]
  struct Pair {
    std::size_t i, j;
    std::vector<double> a;  // k_i x k_j row-major
  };
  std::vector<Pair> pairs;

  double logit(const std::vector<std::size_t>& cats) const {
    double s = 0.0;
    for (std::size_t f = 0; f < dims.size(); ++f) {
      const auto& z = latent[f][cats[f]];
      for (std::size_t k = 0; k < dims[f]; ++k) s += weights[f][k] * z[k];
    }
    for (const auto& p : pairs) {
      const auto& zi = latent[p.i][cats[p.i]];
      const auto& zj = latent[p.j][cats[p.j]];
      const std::size_t kj = dims[p.j];
      for (std::size_t a = 0; a < dims[p.i]; ++a)
        for (std::size_t b = 0; b < kj; ++b) s += zi[a] * p.a[a * kj + b] * zj[b];
    }
    return s;
  }
};

inline constexpr std::size_t kMaxInteractionDraws = 256;
inline constexpr double kMinIsotropy = 0.6;

namespace detail {

inline double determinant(std::vector<double> a, std::size_t n) {
  double det = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    if (a[piv * n + c] == 0.0) return 0.0;
    if (piv != c) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a[c * n + k], a[piv * n + k]);
      det = -det;
    }
    det *= a[c * n + c];
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / a[c * n + c];
      for (std::size_t k = c; k < n; ++k) a[r * n + k] -= f * a[c * n + k];
    }
  }
  return det;
}

// det(G) / (tr(G)/k)^k for each field's Gram matrix G = sum_j A_ij A_ij^T;
// 1 when all singular values agree, 0 when the map is rank deficient. Fields
// whose partners cannot span k_i dimensions are skipped.
inline double worst_isotropy(const std::vector<std::size_t>& dims, const std::vector<PlantedModel::Pair>& pairs) {
  double worst = 1.0;
  for (std::size_t f = 0; f < dims.size(); ++f) {
    const std::size_t k = dims[f];
    if (k < 2) continue;
    std::size_t partner_dims = 0;
    std::vector<double> gram(k * k, 0.0);
    for (const auto& p : pairs) {
      if (p.i != f && p.j != f) continue;
      const std::size_t other = p.i == f ? dims[p.j] : dims[p.i];
      partner_dims += other;
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b)
          for (std::size_t o = 0; o < other; ++o) {
            const double x = p.i == f ? p.a[a * other + o] : p.a[o * k + a];
            const double y = p.i == f ? p.a[b * other + o] : p.a[o * k + b];
            gram[a * k + b] += x * y;
          }
    }
    if (partner_dims < k) continue;
    double tr = 0.0;
    for (std::size_t a = 0; a < k; ++a) tr += gram[a * k + a];
    if (tr <= 0.0) return 0.0;
    worst = std::min(worst, determinant(gram, k) / std::pow(tr / static_cast<double>(k), static_cast<double>(k)));
  }
  return worst;
}

}  // namespace detail

inline PlantedModel make_planted_model(const SyntheticSpec& spec, Rng& rng) {
  PlantedModel m;
  const std::size_t F = spec.fields.size();
  for (const auto& f : spec.fields) m.dims.push_back(f.planted_dim);
  m.latent.resize(F);
  for (std::size_t f = 0; f < F; ++f) {
    m.latent[f].assign(spec.fields[f].vocab_size, std::vector<double>(m.dims[f]));
    for (auto& z : m.latent[f])
      for (auto& x : z) x = rng.normal();
  }
  m.weights.resize(F);
  for (std::size_t f = 0; f < F; ++f) {
    m.weights[f].resize(m.dims[f]);
    for (auto& w : m.weights[f]) w = rng.bernoulli(0.5) ? 1.0 : -1.0;
  }
  if (spec.interaction_scale > 0.0) {
    double best = -1.0;
    for (std::size_t attempt = 0; attempt < kMaxInteractionDraws && best < kMinIsotropy; ++attempt) {
      std::vector<PlantedModel::Pair> pairs;
      for (std::size_t i = 0; i < F; ++i)
        for (std::size_t j = i + 1; j < F; ++j) {
          if (m.dims[i] == 0 || m.dims[j] == 0) continue;
          PlantedModel::Pair p{i, j, std::vector<double>(m.dims[i] * m.dims[j])};
          const double sd = spec.interaction_scale / std::sqrt(static_cast<double>(m.dims[i] * m.dims[j]));
          for (auto& x : p.a) x = rng.normal(0.0, sd);
          pairs.push_back(std::move(p));
        }
      const double iso = detail::worst_isotropy(m.dims, pairs);
      if (iso > best) {
        best = iso;
        m.pairs = std::move(pairs);
      }
    }
  }
  return m;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Dataset sample_planted(const PlantedModel& m, const std::vector<std::size_t>& vocab_sizes,
                              std::size_t n_samples, double label_noise, Rng& rng) {
  const std::size_t F = vocab_sizes.size();
  Dataset ds;
  for (std::size_t f = 0; f < F; ++f) ds.schema.push_back(FieldSchema{"f" + std::to_string(f), vocab_sizes[f], f});
  ds.columns.assign(F, std::vector<std::size_t>(n_samples));
  ds.labels.resize(n_samples);
  std::vector<std::size_t> cats(F);
  for (std::size_t n = 0; n < n_samples; ++n) {
    for (std::size_t f = 0; f < F; ++f) {
      cats[f] = static_cast<std::size_t>(rng.below(vocab_sizes[f]));
      ds.columns[f][n] = cats[f];
    }
    int y = rng.bernoulli(sigmoid(m.logit(cats))) ? 1 : 0;
    if (rng.bernoulli(label_noise)) y = 1 - y;
    ds.labels[n] = y;
  }
  return ds;
}

inline Dataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng = Rng::stream(spec.seed, "synthetic");
  PlantedModel m = make_planted_model(spec, rng);
  std::vector<std::size_t> vs;
  for (const auto& f : spec.fields) vs.push_back(f.vocab_size);
  return sample_planted(m, vs, spec.n_samples, spec.label_noise, rng);
}

}  // namespace dimgrow

#pragma once

// Search and retrain loops, evaluation and run logs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dimgrow/allocation.hpp"
#include "dimgrow/config.hpp"
#include "dimgrow/datasets.hpp"
#include "dimgrow/diffcore.hpp"
#include "dimgrow/dynembed.hpp"
#include "dimgrow/errors.hpp"
#include "dimgrow/metrics.hpp"
#include "dimgrow/netmodel.hpp"
#include "dimgrow/optim.hpp"
#include "dimgrow/rng.hpp"
#include "dimgrow/searchctl.hpp"
#include "dimgrow/shufflegate.hpp"

namespace dimgrow {

constexpr std::size_t kEvalBatchSize = 2048;
constexpr std::size_t kSuperNetDims = 16;
constexpr std::size_t kGateHistogramBins = 10;

struct GateSummary {
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
};

struct LogRecord {
  std::size_t step = 0;
  std::string split;
  double auc = std::numeric_limits<double>::quiet_NaN();
  double logloss = std::numeric_limits<double>::quiet_NaN();
  std::size_t params_used = 0;
  std::size_t params_alloc = 0;
  std::map<std::string, std::size_t> dims;
  std::map<std::string, GateSummary> gate_summary;
};

struct RunLog {
  std::string stage = "search";
  std::vector<LogRecord> records;
  std::vector<std::string> field_names;
  std::vector<std::vector<double>> final_gates;  // per field, used dims only
};

// Accounting used for the memory-efficiency comparison against a model that
// materialises kSuperNetDims dims for every field.
struct SearchSummary {
  std::size_t steps = 0;
  std::size_t peak_params_alloc = 0;
  std::size_t final_params_used = 0;
  std::size_t final_params_alloc = 0;
  std::size_t supernet_params = 0;
  std::size_t allocation_params = 0;
  std::size_t allocation_dims = 0;
  std::map<std::string, std::size_t> grow_events;
};

inline nlohmann::json to_json(const LogRecord& r) {
  nlohmann::json dims = nlohmann::json::object();
  for (const auto& [k, v] : r.dims) dims[k] = v;
  nlohmann::json gs = nlohmann::json::object();
  for (const auto& [k, v] : r.gate_summary) gs[k] = {{"min", v.min}, {"mean", v.mean}, {"max", v.max}};
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  return {{"step", r.step},         {"split", r.split},
          {"auc", num(r.auc)},      {"logloss", num(r.logloss)},
          {"params_used", r.params_used}, {"params_alloc", r.params_alloc},
          {"dims", dims},           {"gate_summary", gs}};
}

inline LogRecord log_record_from_json(const nlohmann::json& j) {
  LogRecord r;
  r.step = j.at("step").get<std::size_t>();
  r.split = j.at("split").get<std::string>();
  if (!j.at("auc").is_null()) r.auc = j.at("auc").get<double>();
  if (!j.at("logloss").is_null()) r.logloss = j.at("logloss").get<double>();
  r.params_used = j.at("params_used").get<std::size_t>();
  r.params_alloc = j.at("params_alloc").get<std::size_t>();
  for (const auto& [k, v] : j.at("dims").items()) r.dims[k] = v.get<std::size_t>();
  for (const auto& [k, v] : j.at("gate_summary").items())
    r.gate_summary[k] = {v.at("min").get<double>(), v.at("mean").get<double>(), v.at("max").get<double>()};
  return r;
}

inline nlohmann::json to_json(const SearchSummary& s) {
  nlohmann::json ge = nlohmann::json::object();
  for (const auto& [k, v] : s.grow_events) ge[k] = v;
  const double ratio =
      s.final_params_used ? static_cast<double>(s.peak_params_alloc) / static_cast<double>(s.final_params_used) : 0.0;
  return {{"steps", s.steps},
          {"peak_params_alloc", s.peak_params_alloc},
          {"final_params_used", s.final_params_used},
          {"final_params_alloc", s.final_params_alloc},
          {"supernet_params", s.supernet_params},
          {"allocation_params", s.allocation_params},
          {"allocation_dims", s.allocation_dims},
          {"peak_over_final_used", ratio},
          {"grow_events", ge}};
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double auc = std::numeric_limits<double>::quiet_NaN();
  double logloss = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> scores;
};

template <typename Model>
EvalResult evaluate(Model& model, const Dataset& ds) {
  EvalResult r;
  if (ds.empty()) return r;
  r.scores.reserve(ds.num_rows());
  auto it = batch_iter(ds, kEvalBatchSize, 0, 0, /*eval_mode=*/true);
  while (auto b = it.next()) {
    auto s = forward_eval(model, *b);
    r.scores.insert(r.scores.end(), s.begin(), s.end());
  }
  try {
    r.auc = auc(r.scores, ds.labels);
  } catch (const MetricError&) {
    // single-class split: AUC stays undefined (NaN)
  }
  r.logloss = logloss(r.scores, ds.labels);
  return r;
}

// ---------------------------------------------------------------------------
// Search

inline LogRecord search_record(const SearchModel& m, std::size_t step, const std::string& split, const EvalResult& ev) {
  LogRecord r;
  r.step = step;
  r.split = split;
  r.auc = ev.auc;
  r.logloss = ev.logloss;
  const auto pc = param_counts(m.fields);
  r.params_used = pc.used;
  r.params_alloc = pc.allocated;
  for (const auto& f : m.fields) {
    r.dims[f.field.name] = f.used_dims;
    auto g = gate_values(m.bank, f.field.field_index);
    g.resize(f.used_dims);
    GateSummary s{*std::min_element(g.begin(), g.end()), 0.0, *std::max_element(g.begin(), g.end())};
    for (double x : g) s.mean += x;
    s.mean /= static_cast<double>(g.size());
    r.gate_summary[f.field.name] = s;
  }
  return r;
}

struct SearchResult {
  AllocationScheme allocation;
  RunLog log;
  SearchSummary summary;
  SearchModel model;
};

using SearchObserver = std::function<void(const SearchModel&, std::size_t step,
                                          const std::vector<ControllerAction>& actions)>;

inline void zero_grads(SearchModel& m) {
  for (auto& f : m.fields) {
    f.table.w.zero_grad();
    f.adapter.w.zero_grad();
  }
  for (auto& t : m.bank.theta) t.w.zero_grad();
  m.backbone.for_each_param([](Param& p) { p.w.zero_grad(); });
  for (auto& t : m.wide.tables) t.w.zero_grad();
}

inline void search_adam_step(SearchModel& m, const AdamConfig& opt) {
  for (std::size_t i = 0; i < m.fields.size(); ++i) {
    auto& f = m.fields[i];
    adam_step(f.table, opt, opt.learning_rate, Block{f.table.rows(), f.used_dims});
    adam_step(f.adapter, opt, opt.learning_rate, Block{f.used_dims, f.adapter.cols()});
    adam_step(m.bank.theta[i], opt, opt.gate_learning_rate, Block{1, f.used_dims});
  }
  m.backbone.for_each_param([&](Param& p) { adam_step(p, opt, opt.learning_rate); });
  for (auto& t : m.wide.tables) adam_step(t, opt, opt.learning_rate);
}

// Trains the gated model from one dim per field, adjusting dims after every
// `check_interval_steps` updates, and finalises the allocation at the end.
inline SearchResult run_search(const Dataset& train, const Dataset& val, const SearchConfig& cfg,
                               const BackboneConfig& backbone, const SearchObserver& observer = {}) {
  cfg.validate();
  train.validate();
  if (train.num_rows() < 2) throw DataError("search needs at least two training rows");
  Rng init_rng = Rng::stream(cfg.seed, "init");
  Rng shuffle_rng = Rng::stream(cfg.seed, "shuffle");

  SearchResult res;
  SearchModel& m = res.model;
  m = make_search_model(train.schema, backbone, cfg.tau_temperature, init_rng);
  res.log.stage = "search";
  for (const auto& f : train.schema) res.log.field_names.push_back(f.name);

  std::size_t step = 0;
  res.summary.peak_params_alloc = param_counts(m.fields).allocated;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto it = batch_iter(train, cfg.batch_size, cfg.seed, epoch);
    while (auto batch = it.next()) {
      if (batch->size() < 2) continue;  // a lone trailing row cannot be shuffled
      zero_grads(m);
      Graph g;
      Var logits = forward_search(g, m, *batch, shuffle_rng);
      const auto used = m.used_dims();
      Var loss = loss_search(g, logits, batch->labels, m.bank, used, cfg.alpha, cfg.decayed_reg);
      const double lv = g.value(loss).values[0];
      if (!std::isfinite(lv)) {
        throw NumericError("search diverged: non-finite loss at step " + std::to_string(step + 1) + " (epoch " +
                           std::to_string(epoch) + ")");
      }
      g.backward(loss);
      search_adam_step(m, cfg.optimizer);
      ++step;
      std::vector<ControllerAction> actions;
      if (step % cfg.check_interval_steps == 0) actions = check_and_adjust(m.fields, m.bank, cfg, init_rng);
      res.summary.peak_params_alloc = std::max(res.summary.peak_params_alloc, param_counts(m.fields).allocated);
      if (observer) observer(m, step, actions);
      if (step % cfg.eval_interval_steps == 0 && !val.empty())
        res.log.records.push_back(search_record(m, step, "val", evaluate(m, val)));
    }
  }
  if (res.log.records.empty() || res.log.records.back().step != step)
    res.log.records.push_back(search_record(m, step, "val", evaluate(m, val)));

  res.allocation = finalize(m.fields, m.bank);
  res.allocation.config_hash = config_hash(cfg, backbone);
  res.allocation.seed = cfg.seed;
  res.log.final_gates = *m.bank.snapshot;

  const auto pc = param_counts(m.fields);
  res.summary.steps = step;
  res.summary.final_params_used = pc.used;
  res.summary.final_params_alloc = pc.allocated;
  for (const auto& f : m.fields) {
    res.summary.supernet_params += f.vocab_size() * kSuperNetDims;
    res.summary.grow_events[f.field.name] = f.grow_events;
  }
  res.summary.allocation_params = res.allocation.used_params();
  res.summary.allocation_dims = res.allocation.total_dims();
  return res;
}

// ---------------------------------------------------------------------------
// Retrain

struct RetrainResult {
  RetrainModel model;
  RunLog log;
  EvalResult test;
  std::size_t embedding_params = 0;
  std::size_t total_params = 0;
};

inline LogRecord retrain_record(const RetrainModel& m, std::size_t step, const std::string& split,
                                const EvalResult& ev) {
  LogRecord r;
  r.step = step;
  r.split = split;
  r.auc = ev.auc;
  r.logloss = ev.logloss;
  r.params_used = m.embedding_params();
  r.params_alloc = m.embedding_params();
  for (std::size_t i = 0; i < m.tables.size(); ++i) r.dims[m.names[i]] = m.tables[i].cols();
  return r;
}

// Trains the plain model for the allocation with the task loss only. The
// validation AUC is checked every `eval_interval_steps`; training stops after
// `patience` checks without improvement and the best checkpoint is restored
// before the test evaluation.
inline RetrainResult run_retrain(const Dataset& train, const Dataset& val, const Dataset& test,
                                 const AllocationScheme& alloc, const BackboneConfig& backbone,
                                 const RetrainConfig& cfg) {
  cfg.validate();
  train.validate();
  Rng init_rng = Rng::stream(cfg.seed, "init");
  RetrainResult res;
  res.model = build_retrain_model(alloc, train.schema, backbone, init_rng);
  res.log.stage = "retrain";
  res.log.field_names = res.model.names;
  RetrainModel& m = res.model;

  std::optional<RetrainModel> best;
  double best_auc = -1.0;
  std::size_t bad_checks = 0;
  std::size_t step = 0;
  bool stop = false;

  auto check = [&]() {
    if (val.empty()) return;
    EvalResult ev = evaluate(m, val);
    res.log.records.push_back(retrain_record(m, step, "val", ev));
    const double a = std::isfinite(ev.auc) ? ev.auc : -ev.logloss;
    if (!best || a > best_auc) {
      best_auc = a;
      best = m;
      bad_checks = 0;
    } else if (++bad_checks >= cfg.patience) {
      stop = true;
    }
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    auto it = batch_iter(train, cfg.batch_size, cfg.seed, epoch, /*eval_mode=*/cfg.batch_size < 2);
    while (auto batch = it.next()) {
      m.for_each_param([](Param& p) { p.w.zero_grad(); });
      Graph g;
      Var loss = g.bce_with_logits(forward_retrain(g, m, *batch), batch->labels);
      if (!std::isfinite(g.value(loss).values[0]))
        throw NumericError("retrain diverged: non-finite loss at step " + std::to_string(step + 1));
      g.backward(loss);
      m.for_each_param([&](Param& p) { adam_step(p, cfg.optimizer, cfg.optimizer.learning_rate); });
      ++step;
      if (step % cfg.eval_interval_steps == 0) {
        check();
        if (stop) break;
      }
    }
  }
  if (!stop && (res.log.records.empty() || res.log.records.back().step != step)) check();
  if (best) m = std::move(*best);

  res.test = evaluate(m, test.empty() ? val : test);
  res.log.records.push_back(retrain_record(m, step, "test", res.test));
  res.embedding_params = m.embedding_params();
  res.total_params = m.param_count();
  return res;
}

// ---------------------------------------------------------------------------
// Reports

inline std::vector<std::size_t> gate_histogram(const std::vector<std::vector<double>>& gates) {
  std::vector<std::size_t> bins(kGateHistogramBins, 0);
  for (const auto& f : gates)
    for (double g : f) {
      auto b = static_cast<std::size_t>(g * static_cast<double>(kGateHistogramBins));
      bins[std::min(b, kGateHistogramBins - 1)] += 1;
    }
  return bins;
}

inline std::string metrics_filename(const RunLog& log) {
  return log.stage == "search" ? "metrics.jsonl" : log.stage + "_metrics.jsonl";
}

// Writes <stage>-specific metrics JSONL, an AUC-vs-params CSV and, for the
// search stage, the final gate histogram.
inline void emit_report(const RunLog& log, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create output directory '" + out_dir + "'");
  const fs::path dir(out_dir);
  const std::string prefix = log.stage == "search" ? "" : log.stage + "_";

  auto open = [](const fs::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write '" + p.string() + "'");
    return out;
  };

  {
    auto out = open(dir / metrics_filename(log));
    for (const auto& r : log.records) out << to_json(r).dump() << '\n';
  }
  {
    auto out = open(dir / (prefix + "auc_vs_params.csv"));
    out << "stage,params_used,auc,logloss\n";
    for (const auto& r : log.records) {
      out << log.stage << ',' << r.params_used << ',';
      if (std::isfinite(r.auc)) out << nlohmann::json(r.auc).dump();
      out << ',';
      if (std::isfinite(r.logloss)) out << nlohmann::json(r.logloss).dump();
      out << '\n';
    }
  }
  if (log.stage == "search") {
    const auto bins = gate_histogram(log.final_gates);
    std::size_t total = 0;
    for (auto b : bins) total += b;
    nlohmann::json edges = nlohmann::json::array();
    for (std::size_t i = 0; i <= kGateHistogramBins; ++i)
      edges.push_back(static_cast<double>(i) / static_cast<double>(kGateHistogramBins));
    nlohmann::json per_field = nlohmann::json::object();
    for (std::size_t i = 0; i < log.final_gates.size() && i < log.field_names.size(); ++i)
      per_field[log.field_names[i]] = log.final_gates[i];
    auto out = open(dir / "gate_histogram.json");
    out << nlohmann::json{{"bin_edges", edges}, {"counts", bins}, {"total", total}, {"gates", per_field}}.dump(2)
        << '\n';
  }
}

inline std::vector<LogRecord> read_metrics_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<LogRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(log_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ": line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dimgrow

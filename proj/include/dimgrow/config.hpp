#pragma once

// Run configuration files. Parsing is strict: any key that is not recognised
// is rejected, so a misspelt hyperparameter fails loudly instead of silently
// falling back to its default.
//
// {
//   "data":     {"path": "...", "synthetic_spec": "...", "label_column": "label",
//                "split": {"train": 0.8, "val": 0.1, "test": 0.1}},
//   "search":   {"alpha": 0.01, "tau_temperature": 5, "t_up": 0.6, "t_down": 0.01,
//                "check_interval_steps": 1, "budget": {"kind": "total_params", "value": 1000},
//                "decayed_reg": true, "seed": 0, "epochs": 10, "batch_size": 256,
//                "eval_interval_steps": 200,
//                "optimizer": {"learning_rate": 1e-3, "gate_learning_rate": 1e-3,
//                              "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}},
//   "backbone": {"d_bb": 0, "hidden_sizes": [64, 32], "wide_enabled": true},
//   "retrain":  {"epochs": 10, "patience": 3, "batch_size": 256, "learning_rate": 1e-3,
//                "eval_interval_steps": 200},
//   "output_dir": "runs/x",
//   "seed": 0
// }

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "dimgrow/datasets.hpp"
#include "dimgrow/errors.hpp"
#include "dimgrow/netmodel.hpp"
#include "dimgrow/rng.hpp"
#include "dimgrow/searchctl.hpp"

namespace dimgrow {

struct RetrainConfig {
  std::size_t epochs = 10;
  std::size_t patience = 3;
  std::size_t batch_size = 256;
  std::size_t eval_interval_steps = 200;
  AdamConfig optimizer;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("retrain: epochs must be >= 1");
    if (patience < 1) throw ConfigError("retrain: patience must be >= 1");
    if (batch_size < 1) throw ConfigError("retrain: batch_size must be >= 1");
    if (eval_interval_steps < 1) throw ConfigError("retrain: eval_interval_steps must be >= 1");
    if (!(optimizer.learning_rate > 0.0)) throw ConfigError("retrain: learning_rate must be > 0");
  }
};

struct DataConfig {
  std::string path;
  std::string synthetic_spec;
  std::string label_column = "label";
  SplitFractions split;
};

struct RunConfigFile {
  DataConfig data;
  SearchConfig search;
  BackboneConfig backbone;
  RetrainConfig retrain;
  std::string output_dir = "dimgrow_out";
  std::uint64_t seed = 0;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json to_json(const AdamConfig& a) {
  return {{"learning_rate", a.learning_rate},
          {"gate_learning_rate", a.gate_learning_rate},
          {"beta1", a.beta1},
          {"beta2", a.beta2},
          {"eps", a.eps}};
}

inline AdamConfig adam_from_json(const nlohmann::json& j, const std::string& where) {
  detail::reject_unknown(j, {"learning_rate", "gate_learning_rate", "beta1", "beta2", "eps"}, where);
  AdamConfig a;
  detail::read_opt(j, "learning_rate", a.learning_rate);
  detail::read_opt(j, "gate_learning_rate", a.gate_learning_rate);
  detail::read_opt(j, "beta1", a.beta1);
  detail::read_opt(j, "beta2", a.beta2);
  detail::read_opt(j, "eps", a.eps);
  return a;
}

inline nlohmann::json to_json(const SearchConfig& c) {
  nlohmann::json j{{"alpha", c.alpha},
                   {"tau_temperature", c.tau_temperature},
                   {"t_up", c.t_up},
                   {"t_down", c.t_down},
                   {"check_interval_steps", c.check_interval_steps},
                   {"decayed_reg", c.decayed_reg},
                   {"seed", c.seed},
                   {"epochs", c.epochs},
                   {"batch_size", c.batch_size},
                   {"eval_interval_steps", c.eval_interval_steps},
                   {"optimizer", to_json(c.optimizer)}};
  if (c.budget) j["budget"] = {{"kind", to_string(c.budget->kind)}, {"value", c.budget->value}};
  return j;
}

inline SearchConfig search_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"alpha", "tau_temperature", "t_up", "t_down", "check_interval_steps", "budget",
                          "decayed_reg", "seed", "optimizer", "epochs", "batch_size", "eval_interval_steps"},
                         "search");
  SearchConfig c;
  detail::read_opt(j, "alpha", c.alpha);
  detail::read_opt(j, "tau_temperature", c.tau_temperature);
  detail::read_opt(j, "t_up", c.t_up);
  detail::read_opt(j, "t_down", c.t_down);
  detail::read_opt(j, "check_interval_steps", c.check_interval_steps);
  detail::read_opt(j, "decayed_reg", c.decayed_reg);
  detail::read_opt(j, "seed", c.seed);
  detail::read_opt(j, "epochs", c.epochs);
  detail::read_opt(j, "batch_size", c.batch_size);
  detail::read_opt(j, "eval_interval_steps", c.eval_interval_steps);
  if (j.contains("optimizer")) c.optimizer = adam_from_json(j.at("optimizer"), "search.optimizer");
  if (j.contains("budget") && !j.at("budget").is_null()) {
    const auto& b = j.at("budget");
    detail::reject_unknown(b, {"kind", "value"}, "search.budget");
    c.budget = Budget{budget_kind_from_string(b.at("kind").get<std::string>()), b.at("value").get<std::size_t>()};
  }
  return c;
}

inline nlohmann::json to_json(const BackboneConfig& b) {
  return {{"d_bb", b.d_bb}, {"hidden_sizes", b.hidden_sizes}, {"wide_enabled", b.wide_enabled}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"d_bb", "hidden_sizes", "wide_enabled"}, "backbone");
  BackboneConfig b;
  detail::read_opt(j, "d_bb", b.d_bb);
  detail::read_opt(j, "hidden_sizes", b.hidden_sizes);
  detail::read_opt(j, "wide_enabled", b.wide_enabled);
  return b;
}

inline RetrainConfig retrain_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"epochs", "patience", "batch_size", "learning_rate", "eval_interval_steps", "optimizer"},
                         "retrain");
  RetrainConfig r;
  detail::read_opt(j, "epochs", r.epochs);
  detail::read_opt(j, "patience", r.patience);
  detail::read_opt(j, "batch_size", r.batch_size);
  detail::read_opt(j, "eval_interval_steps", r.eval_interval_steps);
  if (j.contains("optimizer")) r.optimizer = adam_from_json(j.at("optimizer"), "retrain.optimizer");
  detail::read_opt(j, "learning_rate", r.optimizer.learning_rate);
  return r;
}

// The top-level seed drives every stage.
inline void apply_seed(RunConfigFile& rc, std::uint64_t seed) {
  rc.seed = seed;
  rc.search.seed = seed;
  rc.retrain.seed = seed;
}

inline RunConfigFile run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"data", "search", "backbone", "retrain", "output_dir", "seed"}, "config");
  RunConfigFile rc;
  try {
    if (j.contains("data")) {
      const auto& d = j.at("data");
      detail::reject_unknown(d, {"path", "synthetic_spec", "label_column", "split"}, "data");
      detail::read_opt(d, "path", rc.data.path);
      detail::read_opt(d, "synthetic_spec", rc.data.synthetic_spec);
      detail::read_opt(d, "label_column", rc.data.label_column);
      if (d.contains("split")) {
        const auto& s = d.at("split");
        detail::reject_unknown(s, {"train", "val", "test"}, "data.split");
        detail::read_opt(s, "train", rc.data.split.train);
        detail::read_opt(s, "val", rc.data.split.val);
        detail::read_opt(s, "test", rc.data.split.test);
      }
    }
    if (j.contains("search")) rc.search = search_config_from_json(j.at("search"));
    if (j.contains("backbone")) rc.backbone = backbone_config_from_json(j.at("backbone"));
    if (j.contains("retrain")) rc.retrain = retrain_config_from_json(j.at("retrain"));
    detail::read_opt(j, "output_dir", rc.output_dir);
    if (j.contains("seed")) {
      rc.seed = j.at("seed").get<std::uint64_t>();
    } else {
      rc.seed = rc.search.seed;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (rc.data.path.empty() == rc.data.synthetic_spec.empty())
    throw ConfigError("data: exactly one of 'path' and 'synthetic_spec' must be given");
  apply_seed(rc, rc.seed);
  rc.search.validate();
  rc.backbone.validate();
  rc.retrain.validate();
  return rc;
}

inline RunConfigFile load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

// Stable identifier of everything that influences a search.
inline std::string config_hash(const SearchConfig& s, const BackboneConfig& b) {
  const nlohmann::json j{{"search", to_json(s)}, {"backbone", to_json(b)}};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

}  // namespace dimgrow

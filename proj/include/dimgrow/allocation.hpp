#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dimgrow/errors.hpp"

namespace dimgrow {

struct FieldAllocation {
  std::string name;
  std::size_t vocab_size = 0;  // 0 when unknown (hand-written schemes)
  std::size_t dim = 0;
};

// Search output: final dimension per field, 0 meaning the field is removed.
struct AllocationScheme {
  std::vector<FieldAllocation> fields;
  std::vector<std::string> removed;
  std::map<std::string, std::vector<double>> gate_snapshot;
  std::string config_hash;
  std::uint64_t seed = 0;

  std::size_t total_dims() const {
    std::size_t s = 0;
    for (const auto& f : fields) s += f.dim;
    return s;
  }

  std::size_t used_params() const {
    std::size_t s = 0;
    for (const auto& f : fields) s += f.vocab_size * f.dim;
    return s;
  }

  std::size_t surviving() const {
    std::size_t n = 0;
    for (const auto& f : fields) n += f.dim > 0 ? 1 : 0;
    return n;
  }

  void validate() const {
    std::set<std::string> rm(removed.begin(), removed.end());
    std::set<std::string> names;
    for (const auto& f : fields) {
      if (!names.insert(f.name).second) throw ConfigError("allocation: duplicate field '" + f.name + "'");
      if ((f.dim == 0) != (rm.count(f.name) == 1))
        throw ConfigError("allocation: field '" + f.name + "' must be listed as removed iff its dim is 0");
    }
    for (const auto& r : rm)
      if (!names.count(r)) throw ConfigError("allocation: removed field '" + r + "' is not in the field list");
  }
};

inline nlohmann::json to_json(const AllocationScheme& a) {
  nlohmann::json fields = nlohmann::json::array();
  for (const auto& f : a.fields) fields.push_back({{"name", f.name}, {"vocab_size", f.vocab_size}, {"dim", f.dim}});
  nlohmann::json snap = nlohmann::json::object();
  for (const auto& [k, v] : a.gate_snapshot) snap[k] = v;
  return {{"fields", fields},
          {"removed", a.removed},
          {"gate_snapshot", snap},
          {"config_hash", a.config_hash},
          {"seed", a.seed}};
}

// Accepts hand-written schemes: only `fields[].name` and `fields[].dim` are
// required; `removed` is derived when absent.
inline AllocationScheme allocation_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"fields", "removed", "gate_snapshot", "config_hash", "seed"};
  if (!j.is_object()) throw ConfigError("allocation: expected a JSON object");
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError("allocation: unknown key '" + k + "'");
  AllocationScheme a;
  try {
    for (const auto& f : j.at("fields")) {
      for (const auto& [k, _] : f.items())
        if (k != "name" && k != "vocab_size" && k != "dim") throw ConfigError("allocation: unknown field key '" + k + "'");
      FieldAllocation fa;
      fa.name = f.at("name").get<std::string>();
      fa.dim = f.at("dim").get<std::size_t>();
      if (f.contains("vocab_size")) fa.vocab_size = f.at("vocab_size").get<std::size_t>();
      a.fields.push_back(fa);
    }
    if (j.contains("removed")) {
      a.removed = j.at("removed").get<std::vector<std::string>>();
    } else {
      for (const auto& f : a.fields)
        if (f.dim == 0) a.removed.push_back(f.name);
    }
    if (j.contains("gate_snapshot"))
      a.gate_snapshot = j.at("gate_snapshot").get<std::map<std::string, std::vector<double>>>();
    if (j.contains("config_hash")) a.config_hash = j.at("config_hash").get<std::string>();
    if (j.contains("seed")) a.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("allocation: ") + e.what());
  }
  a.validate();
  return a;
}

inline void save_allocation(const AllocationScheme& a, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << to_json(a).dump(2) << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline AllocationScheme load_allocation(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return allocation_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace dimgrow

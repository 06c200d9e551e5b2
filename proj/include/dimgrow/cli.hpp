#pragma once

// Command implementations behind the `dimgrow` executable. Each command
// returns a process exit code: 0 success, 2 usage/config/data/io error,
// 3 numeric failure.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dimgrow/allocation.hpp"
#include "dimgrow/config.hpp"
#include "dimgrow/datasets.hpp"
#include "dimgrow/errors.hpp"
#include "dimgrow/trainer.hpp"

namespace dimgrow::cli {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

inline int guarded(std::ostream& err, const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
  } catch (const MetricError& e) {
    err << "metric error: " << e.what() << '\n';
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << '\n';
  }
  return kExitUsage;
}

// Relative paths inside a config file are taken relative to the file itself.
inline std::string resolve(const std::string& base_file, const std::string& p) {
  namespace fs = std::filesystem;
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(base_file).parent_path() / p).lexically_normal().string();
}

inline RunConfigFile load_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
  RunConfigFile rc = load_run_config(path);
  rc.data.path = resolve(path, rc.data.path);
  rc.data.synthetic_spec = resolve(path, rc.data.synthetic_spec);
  rc.output_dir = resolve(path, rc.output_dir);
  if (seed_override) apply_seed(rc, *seed_override);
  return rc;
}

inline SplitDatasets load_data(const RunConfigFile& rc) {
  if (!rc.data.path.empty()) return load_csv_split(rc.data.path, rc.data.label_column, rc.data.split, rc.seed);
  return split(gen_synthetic(load_synthetic_spec(rc.data.synthetic_spec)), rc.data.split, rc.seed);
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << j.dump(2) << '\n';
}

inline int cmd_synth(const std::string& spec_path, const std::string& out_path, std::ostream& log,
                     std::ostream& err) {
  return guarded(err, [&] {
    const SyntheticSpec spec = load_synthetic_spec(spec_path);
    const Dataset ds = gen_synthetic(spec);
    write_csv(ds, out_path);
    log << "wrote " << ds.num_rows() << " rows x " << ds.num_fields() << " fields to " << out_path << '\n';
    return kExitOk;
  });
}

inline int cmd_search(const std::string& config_path, std::optional<std::uint64_t> seed, std::ostream& log,
                      std::ostream& err) {
  return guarded(err, [&] {
    const RunConfigFile rc = load_config(config_path, seed);
    const SplitDatasets data = load_data(rc);
    SearchResult res = run_search(data.train, data.val, rc.search, rc.backbone);
    namespace fs = std::filesystem;
    emit_report(res.log, rc.output_dir);
    save_allocation(res.allocation, (fs::path(rc.output_dir) / "allocation.json").string());
    write_json(fs::path(rc.output_dir) / "search_summary.json", to_json(res.summary));
    log << "search finished after " << res.summary.steps << " steps; allocation:";
    for (const auto& f : res.allocation.fields) log << ' ' << f.name << '=' << f.dim;
    log << "\nwrote " << rc.output_dir << '\n';
    return kExitOk;
  });
}

inline int cmd_retrain(const std::string& config_path, const std::string& allocation_path,
                       std::optional<std::uint64_t> seed, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfigFile rc = load_config(config_path, seed);
    const AllocationScheme alloc = load_allocation(allocation_path);
    const SplitDatasets data = load_data(rc);
    RetrainResult res = run_retrain(data.train, data.val, data.test, alloc, rc.backbone, rc.retrain);
    namespace fs = std::filesystem;
    emit_report(res.log, rc.output_dir);
    write_json(fs::path(rc.output_dir) / "retrain_summary.json",
               {{"test_auc", std::isfinite(res.test.auc) ? nlohmann::json(res.test.auc) : nlohmann::json()},
                {"test_logloss", res.test.logloss},
                {"params_used", res.embedding_params},
                {"total_params", res.total_params}});
    log << "retrain test auc " << res.test.auc << " logloss " << res.test.logloss << " embedding params "
        << res.embedding_params << '\n';
    return kExitOk;
  });
}

struct ReportRow {
  std::string run;
  std::string stage;
  std::size_t params_used = 0;
  double auc = 0.0;
  double logloss = 0.0;
  std::size_t step = 0;
};

// Scans `run_dir` recursively for *metrics.jsonl files; one table row per
// file from its highest-step record (later lines win ties).
inline std::vector<ReportRow> collect_report_rows(const std::string& run_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(run_dir)) throw IoError("'" + run_dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.size() >= 13 && name.ends_with("metrics.jsonl")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<ReportRow> rows;
  for (const auto& p : files) {
    const auto recs = read_metrics_jsonl(p.string());
    if (recs.empty()) continue;
    const LogRecord* best = &recs.front();
    for (const auto& r : recs)
      if (r.step >= best->step) best = &r;
    const std::string name = p.filename().string();
    rows.push_back({fs::relative(p, run_dir).string(), name == "metrics.jsonl" ? "search" : name.substr(0, name.find('_')),
                    best->params_used, best->auc, best->logloss, best->step});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ReportRow& a, const ReportRow& b) { return a.params_used < b.params_used; });
  return rows;
}

inline int cmd_report(const std::string& run_dir, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    namespace fs = std::filesystem;
    const auto rows = collect_report_rows(run_dir);
    if (rows.empty()) throw DataError("no metrics JSONL files under '" + run_dir + "'");

    std::ostringstream csv;
    csv << "run,stage,params_used,auc,logloss\n";
    out << "AUC vs embedding parameters\n";
    out << std::left << std::setw(48) << "run" << std::setw(10) << "stage" << std::setw(14) << "params_used"
        << std::setw(12) << "auc" << "logloss\n";
    for (const auto& r : rows) {
      out << std::left << std::setw(48) << r.run << std::setw(10) << r.stage << std::setw(14) << r.params_used
          << std::setw(12) << std::setprecision(6) << r.auc << r.logloss << '\n';
      csv << r.run << ',' << r.stage << ',' << r.params_used << ',' << nlohmann::json(r.auc).dump() << ','
          << nlohmann::json(r.logloss).dump() << '\n';
    }

    for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
      if (!e.is_regular_file()) continue;
      const std::string name = e.path().filename().string();
      if (name == "gate_histogram.json") {
        std::ifstream in(e.path());
        const auto j = nlohmann::json::parse(in);
        out << "\nfinal gate histogram (" << fs::relative(e.path(), run_dir).string() << ")\n";
        const auto counts = j.at("counts").get<std::vector<std::size_t>>();
        for (std::size_t b = 0; b < counts.size(); ++b)
          out << "  [" << std::fixed << std::setprecision(1) << static_cast<double>(b) / 10.0 << ", "
              << static_cast<double>(b + 1) / 10.0 << (b + 1 == counts.size() ? "]" : ")") << ' ' << counts[b]
              << '\n';
        out << std::defaultfloat;
      } else if (name == "search_summary.json") {
        std::ifstream in(e.path());
        const auto j = nlohmann::json::parse(in);
        out << "\nembedding parameter accounting (" << fs::relative(e.path(), run_dir).string() << ")\n"
            << "  peak allocated during search: " << j.at("peak_params_alloc").get<std::size_t>() << '\n'
            << "  used at end of search:        " << j.at("final_params_used").get<std::size_t>() << '\n'
            << "  peak / final used:            " << j.at("peak_over_final_used").get<double>() << '\n'
            << "  supernet (16 dims per field): " << j.at("supernet_params").get<std::size_t>() << '\n';
      }
    }
    std::ofstream f(fs::path(run_dir) / "report.csv", std::ios::binary);
    if (!f) throw IoError("cannot write report.csv in '" + run_dir + "'");
    f << csv.str();
    return kExitOk;
  });
}

}  // namespace dimgrow::cli

// Acceptance runner: one PASS/FAIL line per criterion, exit status 0 only
// when every criterion passes. Long-running; see README for timings.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dimgrow/cli.hpp"
#include "dimgrow/metrics.hpp"
#include "dimgrow/trainer.hpp"
#include "reference_model.hpp"
#include "test_support.hpp"

using namespace dimgrow;
using namespace dimgrow::testing;
namespace fs = std::filesystem;

namespace {

constexpr int kSeeds = 5;

struct Verdict {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Verdict()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = fn();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!v.pass) ++failures;
  std::printf("criterion %2d %-28s %s  %s (%.1fs)\n", id, name.c_str(), v.pass ? "PASS" : "FAIL", v.detail.c_str(),
              secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

// ---------------------------------------------------------------------------
// 1

Verdict gradients() {
  Rng rng = Rng::stream(101, "test");
  double worst = 0.0;
  std::map<std::string, double> per_op;
  auto record = [&](const std::string& op, double e) {
    per_op[op] = std::max(per_op[op], e);
    worst = std::max(worst, e);
  };
  for (int it = 0; it < 20; ++it) {
    const std::size_t b = pick(rng, 1, 8), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
    Tensor2 a = random_tensor(b, k, rng), w = random_tensor(k, n, rng), y = random_tensor(b, n, rng);
    Tensor2 bias = random_tensor(1, n, rng), gates(1, n);
    for (auto& v : gates.values) v = rng.uniform();
    const Tensor2 other = random_tensor(b, n, rng);
    Tensor2 x2 = random_tensor(b, n, rng);
    const std::size_t keep_cols = pick(rng, 1, k + n), keep_rows = pick(rng, 1, b);
    std::vector<std::size_t> idx(b);
    for (auto& i : idx) i = rng.below(k);
    std::vector<std::vector<std::size_t>> perm(n, std::vector<std::size_t>(b));
    for (auto& p : perm) {
      std::iota(p.begin(), p.end(), std::size_t{0});
      for (std::size_t i = b; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
    }
    std::vector<int> labels(b);
    for (auto& l : labels) l = rng.bernoulli(0.5) ? 1 : 0;
    const auto pw = random_vector(b * (k + n), rng);
    auto probe = [&](Graph& g, Var v) {
      const Tensor2& t = g.value(v);
      return g.weighted_sum(v, std::vector<double>(pw.begin(), pw.begin() + static_cast<std::ptrdiff_t>(t.size())));
    };
    Tensor2 z = random_tensor(b, 1, rng, 3.0);

    record("matmul", fd_max_rel_error([&](Graph& g) { return probe(g, g.matmul(g.param(a), g.param(w))); }, {&a, &w}));
    record("concat/slice", fd_max_rel_error(
                               [&](Graph& g) {
                                 std::vector<Var> parts{g.param(a), g.param(y)};
                                 return probe(g, g.slice_rows(g.slice_cols(g.concat_cols(parts), keep_cols), keep_rows));
                               },
                               {&a, &y}));
    record("row_gather", fd_max_rel_error([&](Graph& g) { return probe(g, g.row_gather(g.param(w), idx)); }, {&w}));
    record("elementwise", fd_max_rel_error(
                              [&](Graph& g) {
                                Var s = g.add(g.scale(g.sigmoid(g.param(y)), 1.7), g.relu(g.param(x2)));
                                return probe(g, g.add_row(s, g.param(bias)));
                              },
                              {&y, &x2, &bias}));
    record("sum", fd_max_rel_error([&](Graph& g) { return g.scale(g.sum(g.param(a)), 0.3); }, {&a}));
    record("gate_mix", fd_max_rel_error(
                           [&](Graph& g) { return probe(g, g.gate_mix(g.param(y), g.constant(other), g.param(gates))); },
                           {&y, &gates}));
    record("permute_columns",
           fd_max_rel_error([&](Graph& g) { return probe(g, g.permute_columns(g.param(y), perm)); }, {&y}));
    record("bce_with_logits", fd_max_rel_error([&](Graph& g) { return g.bce_with_logits(g.param(z), labels); }, {&z}));
  }
  Rng data = Rng::stream(102, "test");
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SearchModel m = busy_model(seed);
    const Batch batch = random_batch(schema_of({7, 4, 9}), 2 + data.below(7), data);
    const FullModelCheck c = check_full_model(m, batch, Rng::stream(seed, "shuffle"), 0.05, seed % 2 == 0);
    record("search model", c.worst_rel_error);
    if (std::abs(c.graph_loss - c.reference_loss) > 1e-12) return {false, "reference forward disagrees"};
  }
  std::string detail = "max rel err " + fmt("%.2e", worst) + " over 20 instances per op [";
  for (const auto& [op, e] : per_op) detail += " " + op + "=" + fmt("%.1e", e);
  return {worst < 1e-4, detail + " ]"};
}

// ---------------------------------------------------------------------------
// 2

Verdict shuffles() {
  Rng data = Rng::stream(201, "test"), rng = Rng::stream(201, "shuffle");
  for (int it = 0; it < 1000; ++it) {
    Tensor2 s = random_tensor(pick(data, 1, 16), pick(data, 1, 6), data);
    const Tensor2 out = shuffle_columns(s, rng);
    for (std::size_t c = 0; c < s.cols; ++c) {
      std::vector<double> a, b;
      for (std::size_t r = 0; r < s.rows; ++r) {
        a.push_back(s(r, c));
        b.push_back(out(r, c));
      }
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      if (a != b) return {false, "column multiset changed"};
    }
  }
  std::map<std::vector<std::size_t>, int> counts;
  for (int i = 0; i < 6000; ++i) counts[draw_column_permutations(3, 1, rng)[0]] += 1;
  double dev = 0.0;
  for (const auto& [_, n] : counts) dev = std::max(dev, std::abs(n / 6000.0 - 1.0 / 6.0));
  Tensor2 single(1, 5);
  single.values = {1, 2, 3, 4, 5};
  bool identity = true;
  for (int i = 0; i < 100; ++i) identity = identity && shuffle_columns(single, rng).values == single.values;
  return {counts.size() == 6 && dev <= 0.02 && identity,
          "1000 multisets ok, B=3 max freq dev " + fmt("%.4f", dev) + ", B=1 identity " + (identity ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 3

Verdict stop_gradient() {
  Rng data = Rng::stream(301, "test");
  double worst = 0.0;
  bool zero = true;
  for (int it = 0; it < 20; ++it) {
    const std::size_t rows = pick(data, 2, 8), d = pick(data, 1, 4);
    GateBank closed;
    closed.theta.emplace_back(Tensor2(1, d, -1000.0));
    Tensor2 e = random_tensor(rows, d, data);
    const auto w = random_vector(rows * d, data);
    {
      Rng r = Rng::stream(it, "shuffle");
      Graph g;
      g.backward(g.weighted_sum(apply_gate(g, g.param(e), closed, 0, r), w));
      for (double v : e.grad) zero = zero && v == 0.0;
    }
    GateBank b;
    b.theta.emplace_back(random_tensor(1, d, data, 0.5));
    Rng r = Rng::stream(it, "shuffle"), replay = r;
    e.zero_grad();
    Graph g;
    g.backward(g.weighted_sum(apply_gate(g, g.param(e), b, 0, r), w));
    const auto perm = draw_column_permutations(rows, d, replay);
    for (std::size_t k = 0; k < d; ++k) {
      const double s = 1.0 / (1.0 + std::exp(-b.temperature * b.theta[0].w.values[k]));
      double expect = 0.0;
      for (std::size_t row = 0; row < rows; ++row)
        expect += w[row * d + k] * (e(row, k) - e(perm[k][row], k)) * s * (1.0 - s) * b.temperature;
      worst = std::max(worst, std::abs(b.theta[0].w.grad[k] - expect));
    }
  }
  return {zero && worst < 1e-10, std::string("closed-gate embedding grad bitwise zero: ") + (zero ? "yes" : "no") +
                                     ", max |dtheta - closed form| " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------------------
// 4-8, 12 share the planted task

struct PlantedRun {
  RunConfigFile rc;
  SyntheticSpec spec;
  SplitDatasets data;
  SearchResult search;
  double noise_max_at_2000 = 1.0;
};

std::string samples_dir() { return DIMGROW_SAMPLES_DIR; }

RunConfigFile planted_config(std::uint64_t seed) {
  RunConfigFile rc = cli::load_config(samples_dir() + "/planted_run.json", seed);
  rc.search.eval_interval_steps = 1u << 30;  // only the final eval is needed here
  return rc;
}

SyntheticSpec planted_spec(std::uint64_t seed) {
  SyntheticSpec spec = load_synthetic_spec(samples_dir() + "/planted_spec.json");
  spec.seed = seed;
  return spec;
}

std::size_t noise_field(const SyntheticSpec& spec) {
  for (std::size_t i = 0; i < spec.fields.size(); ++i)
    if (spec.fields[i].planted_dim == 0) return i;
  return spec.fields.size();
}

std::vector<PlantedRun>& planted_runs() {
  static std::vector<PlantedRun> runs = [] {
    std::vector<PlantedRun> out;
    for (int seed = 0; seed < kSeeds; ++seed) {
      PlantedRun r;
      r.rc = planted_config(seed);
      r.spec = planted_spec(seed);
      r.data = split(gen_synthetic(r.spec), r.rc.data.split, r.rc.seed);
      const std::size_t noise = noise_field(r.spec);
      r.search = run_search(r.data.train, r.data.val, r.rc.search, r.rc.backbone,
                            [&](const SearchModel& m, std::size_t step, const auto&) {
                              if (step != 2000) return;
                              const auto g = gate_values(m.bank, noise);
                              r.noise_max_at_2000 =
                                  *std::max_element(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(m.fields[noise].used_dims));
                            });
      std::printf("  seed %d: %zu steps, allocation", seed, r.search.summary.steps);
      for (const auto& f : r.search.allocation.fields) std::printf(" %s=%zu", f.name.c_str(), f.dim);
      std::printf("\n");
      out.push_back(std::move(r));
    }
    return out;
  }();
  return runs;
}

Verdict noise_gates_close() {
  int ok = 0;
  std::string detail = "max noise gate at step 2000:";
  for (const auto& r : planted_runs()) {
    ok += r.noise_max_at_2000 < 0.1;
    detail += " " + fmt("%.3f", r.noise_max_at_2000);
  }
  return {ok == kSeeds, detail + " (" + std::to_string(ok) + "/5 below 0.1)"};
}

Verdict predictive_gates_open() {
  int ok = 0;
  std::string detail = "min over predictive fields of mean leading gate:";
  for (const auto& r : planted_runs()) {
    double worst = 1.0;
    for (std::size_t i = 0; i < r.spec.fields.size(); ++i) {
      const std::size_t k = r.spec.fields[i].planted_dim;
      if (k == 0) continue;
      const auto& g = r.search.allocation.gate_snapshot.at(r.search.allocation.fields[i].name);
      const std::size_t n = std::min(k, g.size());
      worst = std::min(worst, std::accumulate(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(n), 0.0) / n);
    }
    ok += worst > 0.9;
    detail += " " + fmt("%.3f", worst);
  }
  return {ok == kSeeds, detail + " (" + std::to_string(ok) + "/5 above 0.9)"};
}

Verdict polarization() {
  int ok = 0;
  std::string detail = "fraction of final gates in [0.2, 0.8]:";
  for (const auto& r : planted_runs()) {
    std::size_t mid = 0, total = 0;
    for (const auto& [_, g] : r.search.allocation.gate_snapshot)
      for (double x : g) {
        ++total;
        mid += x >= 0.2 && x <= 0.8;
      }
    const double frac = static_cast<double>(mid) / static_cast<double>(total);
    ok += frac < 0.1;
    detail += " " + fmt("%.3f", frac);
  }
  return {ok >= 4, detail + " (" + std::to_string(ok) + "/5 below 0.1)"};
}

Verdict recovery() {
  double mean = 0.0;
  int removed = 0;
  std::string detail = "d* per seed:";
  for (const auto& r : planted_runs()) {
    int within = 0;
    detail += " [";
    for (std::size_t i = 0; i < r.spec.fields.size(); ++i) {
      const long d = static_cast<long>(r.search.allocation.fields[i].dim);
      within += std::labs(d - static_cast<long>(r.spec.fields[i].planted_dim)) <= 1;
      detail += std::to_string(d);
    }
    detail += "]";
    mean += static_cast<double>(within) / static_cast<double>(r.spec.fields.size()) / kSeeds;
    removed += r.search.allocation.fields[noise_field(r.spec)].dim == 0;
  }
  return {mean >= 0.8 && removed == kSeeds,
          detail + " vs planted [3102]; mean fraction within 1: " + fmt("%.2f", mean) + ", noise removed " +
              std::to_string(removed) + "/5"};
}

Verdict frontier() {
  double d50 = 0.0, d20 = 0.0;
  bool within_budget = true;
  int seeds_ok = 0;
  std::string detail;
  for (auto& r : planted_runs()) {
    AllocationScheme fed;
    std::size_t fed_params = 0;
    for (const auto& f : r.data.train.schema) {
      fed.fields.push_back({f.name, f.vocab_size, kSuperNetDims});
      fed_params += f.vocab_size * kSuperNetDims;
    }
    const double fed_auc =
        run_retrain(r.data.train, r.data.val, r.data.test, fed, r.rc.backbone, r.rc.retrain).test.auc;
    double delta[2];
    const double fracs[2] = {0.5, 0.2};
    for (int b = 0; b < 2; ++b) {
      SearchConfig cfg = r.rc.search;
      cfg.budget = Budget{BudgetKind::TotalParams, static_cast<std::size_t>(fracs[b] * fed_params)};
      const SearchResult s = run_search(r.data.train, r.data.val, cfg, r.rc.backbone);
      const RetrainResult rt = run_retrain(r.data.train, r.data.val, r.data.test, s.allocation, r.rc.backbone, r.rc.retrain);
      within_budget = within_budget && rt.embedding_params <= cfg.budget->value;
      delta[b] = rt.test.auc - fed_auc;
    }
    d50 += delta[0] / kSeeds;
    d20 += delta[1] / kSeeds;
    seeds_ok += delta[0] >= -0.002 && delta[1] >= -0.01;
    detail += " " + fmt("%+.4f", delta[0]) + "/" + fmt("%+.4f", delta[1]);
  }
  return {within_budget && d50 >= -0.002 && d20 >= -0.01,
          "AUC minus FED at 50%/20% budgets per seed:" + detail + "; mean " + fmt("%+.4f", d50) + "/" +
              fmt("%+.4f", d20) + ", " + std::to_string(seeds_ok) + "/5 seeds individually within tolerance"};
}

// ---------------------------------------------------------------------------
// 9

Verdict budgets() {
  Rng rng = Rng::stream(901, "test");
  std::size_t grows = 0, skips = 0, shrinks = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    GateBank bank;
    std::vector<DynamicFieldState> fields;
    Rng grow_rng = Rng::stream(trial, "init");
    const std::size_t nf = pick(rng, 1, 5);
    for (std::size_t i = 0; i < nf; ++i)
      fields.push_back(init_field(FieldSchema{"f" + std::to_string(i), pick(rng, 1, 80), i}, 4, bank, grow_rng));
    const bool by_dims = rng.bernoulli(0.5);
    SearchConfig cfg;
    const std::size_t start = by_dims ? nf : param_counts(fields).used;
    cfg.budget = Budget{by_dims ? BudgetKind::TotalDims : BudgetKind::TotalParams,
                        start + rng.below(by_dims ? 10 : 300)};
    for (int step = 0; step < 20; ++step) {
      for (std::size_t i = 0; i < nf; ++i)
        for (std::size_t k = 0; k < fields[i].used_dims; ++k)
          bank.theta[i].w.values[k] = rng.uniform() < 0.1 ? -2.0 : rng.normal(0.3, 0.3);
      for (const auto& a : check_and_adjust(fields, bank, cfg, grow_rng)) {
        grows += a.kind == ControllerAction::Kind::Grow;
        skips += a.kind == ControllerAction::Kind::SkipBudget;
        shrinks += a.kind == ControllerAction::Kind::Shrink;
      }
      std::size_t dims = 0, used = 0, alloc = 0;
      for (const auto& f : fields) {
        dims += f.used_dims;
        used += f.table.rows() * f.used_dims;
        alloc += f.table.rows() * f.table.cols();
      }
      const auto pc = param_counts(fields);
      if (pc.used != used || pc.allocated != alloc || model_dims(fields).d_sum != dims)
        return {false, "param accounting disagrees with recount"};
      if ((by_dims ? dims : used) > cfg.budget->value) return {false, "budget exceeded"};
    }
  }
  return {true, "1000 sequences x 20 checks; " + std::to_string(grows) + " grows, " + std::to_string(shrinks) +
                    " shrinks, " + std::to_string(skips) + " budget skips, no overrun, recount exact"};
}

// ---------------------------------------------------------------------------
// 10

Verdict auc_oracle() {
  Rng rng = Rng::stream(1001, "test");
  std::size_t ties = 0;
  for (int it = 0; it < 100; ++it) {
    const std::size_t n = pick(rng, 2, 200);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const std::size_t levels = pick(rng, 2, 2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(levels)) / static_cast<double>(levels);
      y[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    y[0] = 1;
    y[n - 1] = 0;
    std::size_t wins2 = 0, pairs = 0;  // twice the pairwise count, exact in integers
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] == 1 && y[j] == 0) {
          ++pairs;
          wins2 += s[i] > s[j] ? 2 : s[i] == s[j] ? 1 : 0;
          ties += s[i] == s[j];
        }
    const double brute = static_cast<double>(wins2) / (2.0 * static_cast<double>(pairs));
    if (auc(s, y) != brute) return {false, "mismatch on instance " + std::to_string(it)};
  }
  return {true, "100 instances n <= 200 identical to pairwise count (" + std::to_string(ties) + " tied pairs)"};
}

// ---------------------------------------------------------------------------
// 11, 12

std::string write_run_config(const fs::path& dir, const std::string& out) {
  std::ifstream in(samples_dir() + "/planted_run.json");
  nlohmann::json j = nlohmann::json::parse(in);
  j["data"]["synthetic_spec"] = samples_dir() + "/planted_spec.json";
  j["output_dir"] = (dir / out).string();
  const fs::path p = dir / (out + ".json");
  cli::write_json(p, j);
  return p.string();
}

Verdict determinism(const fs::path& work) {
  std::ostringstream log, err;
  for (const char* run : {"a", "b"})
    if (cli::cmd_search(write_run_config(work, run), {}, log, err) != cli::kExitOk)
      return {false, "cmd_search failed: " + err.str()};
  const bool alloc = slurp(work / "a" / "allocation.json") == slurp(work / "b" / "allocation.json");
  const bool metrics = slurp(work / "a" / "metrics.jsonl") == slurp(work / "b" / "metrics.jsonl");
  return {alloc && metrics, std::string("allocation.json ") + (alloc ? "identical" : "differs") + ", metrics.jsonl " +
                                (metrics ? "identical" : "differs")};
}

Verdict memory_proxy(const fs::path& work) {
  std::ostringstream out, err;
  if (cli::cmd_report((work / "a").string(), out, err) != cli::kExitOk) return {false, "cmd_report failed: " + err.str()};
  std::printf("%s", out.str().c_str());
  std::ifstream in(work / "a" / "search_summary.json");
  const auto s = nlohmann::json::parse(in);
  const double peak = s.at("peak_params_alloc").get<double>();
  const double used = s.at("final_params_used").get<double>();
  const double alloc_params = s.at("allocation_params").get<double>();
  const auto dims = s.at("allocation_dims").get<std::size_t>();
  const double supernet = s.at("supernet_params").get<double>();
  const bool ok = peak <= 1.3 * used && dims >= 5 && dims <= 7;
  return {ok, "final sum d* " + std::to_string(dims) + ", peak/used-at-end " + fmt("%.3f", peak / used) +
                  ", peak/sum(V*d*) " + fmt("%.3f", peak / alloc_params) + ", peak/supernet " +
                  fmt("%.3f", peak / supernet)};
}

}  // namespace

int main() {
  std::printf("acceptance run, %d seeds on the planted task\n", kSeeds);
  const fs::path work = scratch_dir("acceptance");
  report(1, "gradient correctness", gradients);
  report(2, "shuffle correctness", shuffles);
  report(3, "stop-gradient exactness", stop_gradient);
  report(4, "noise field gates close", noise_gates_close);
  report(5, "predictive gates open", predictive_gates_open);
  report(6, "gate polarization", polarization);
  report(7, "dimension recovery", recovery);
  report(8, "compression frontier", frontier);
  report(9, "budget enforcement", budgets);
  report(10, "AUC oracle equivalence", auc_oracle);
  report(11, "determinism", [&] { return determinism(work); });
  report(12, "memory-efficiency proxy", [&] { return memory_proxy(work); });
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

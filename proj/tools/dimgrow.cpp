#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dimgrow/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"dimgrow: progressive embedding dimension search"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "override the run seed")->expected(0, 1);

  std::string spec_path, out_path, config_path, allocation_path, run_dir;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset CSV");
  synth->add_option("--spec", spec_path, "synthetic spec JSON")->required();
  synth->add_option("--out", out_path, "output CSV")->required();

  auto* search = app.add_subcommand("search", "run the dimension search");
  search->add_option("--config", config_path, "run config JSON")->required();

  auto* retrain = app.add_subcommand("retrain", "retrain a compact model for an allocation");
  retrain->add_option("--config", config_path, "run config JSON")->required();
  retrain->add_option("--allocation", allocation_path, "allocation JSON")->required();

  auto* report = app.add_subcommand("report", "summarise metrics across runs");
  report->add_option("--dir", run_dir, "directory holding run outputs")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : dimgrow::cli::kExitUsage;
  }

  namespace cli = dimgrow::cli;
  if (*synth) {
    // spec files carry their own seed; --seed is ignored here
    return cli::cmd_synth(spec_path, out_path, std::cout, std::cerr);
  }
  if (*search) return cli::cmd_search(config_path, seed, std::cout, std::cerr);
  if (*retrain) return cli::cmd_retrain(config_path, allocation_path, seed, std::cout, std::cerr);
  return cli::cmd_report(run_dir, std::cout, std::cerr);
}

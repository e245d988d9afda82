// kalmanid: simulate, identify, landscape, consistency and check commands.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "kalmanid/experiment.hpp"

namespace {

using namespace kalmanid;

struct Overrides {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::int64_t> seed;
  std::optional<std::int64_t> n;
  std::optional<int> starts;
  std::optional<double> alpha;
  std::optional<unsigned> threads;
};

void add_common(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config, "Experiment configuration (JSON)")->required();
  sub->add_option("--out", o.out, "Output directory (overrides output_dir)");
  sub->add_option("--seed", o.seed, "Master seed")->check(CLI::NonNegativeNumber);
  sub->add_option("--n", o.n, "Largest sample size N")->check(CLI::PositiveNumber);
  sub->add_option("--starts", o.starts, "Number of multi-start runs")->check(CLI::PositiveNumber);
  sub->add_option("--alpha", o.alpha, "Feasible-set parameter")->check(CLI::PositiveNumber);
  sub->add_option("--threads", o.threads, "Worker threads (0 = all cores)");
}

ExperimentConfig resolve(const Overrides& o) {
  auto c = load_config(o.config);
  if (o.out) c.output_dir = *o.out;
  if (o.seed) c.seed = static_cast<std::uint64_t>(*o.seed);
  if (o.starts) c.n_starts = *o.starts;
  if (o.alpha) c.alpha = *o.alpha;
  if (o.threads) c.threads = *o.threads;
  if (o.n) {
    const auto n = static_cast<std::size_t>(*o.n);
    std::erase_if(c.N_list, [n](std::size_t v) { return v >= n; });
    c.N_list.push_back(n);
  }
  return c;
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const IoError*>(&e) || dynamic_cast<const InvalidArgument*>(&e) ||
      dynamic_cast<const DimensionMismatch*>(&e) || dynamic_cast<const UnsupportedDimension*>(&e) ||
      dynamic_cast<const InfeasibleStart*>(&e)) {
    return 1;
  }
  if (dynamic_cast<const Error*>(&e)) return 2;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kalman gain identification by prediction error minimization"};
  app.require_subcommand(1);

  Overrides o;
  std::string data_path;
  bool corrupt_gradient = false;

  auto* simulate = app.add_subcommand("simulate", "Write a dataset CSV and its metadata sidecar");
  add_common(simulate, o);
  auto* identify = app.add_subcommand("identify", "Multi-start gain estimation on a dataset");
  add_common(identify, o);
  identify->add_option("--data", data_path, "Dataset CSV (default: <out>/<example>.csv)");
  auto* landscape = app.add_subcommand("landscape", "Tabulate V_N and its limit over a 1-D gain grid");
  add_common(landscape, o);
  auto* consistency = app.add_subcommand("consistency", "Estimation error against N over seeds");
  add_common(consistency, o);
  auto* check = app.add_subcommand("check", "Run the property self-checks");
  add_common(check, o);
  check->add_flag("--corrupt-gradient", corrupt_gradient, "Perturb the analytic gradient")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const auto c = resolve(o);
    std::cerr << "config " << config_hash(c) << " seed " << c.seed << "\n";
    if (simulate->parsed()) {
      const auto out = cmd_simulate(c);
      std::cout << out.csv.string() << "\n" << out.metadata.string() << "\n";
    } else if (identify->parsed()) {
      const std::filesystem::path csv =
          data_path.empty()
              ? std::filesystem::path(c.output_dir) / (std::string(example_name(c.example)) + ".csv")
              : std::filesystem::path(data_path);
      const auto out = cmd_identify(c, csv);
      std::cout << out.report.string() << "\n";
    } else if (landscape->parsed()) {
      const auto out = cmd_landscape(c);
      std::cout << out.table.string() << "\n" << out.summary.string() << "\n";
    } else if (consistency->parsed()) {
      const auto out = cmd_consistency(c);
      std::cout << out.table.string() << "\n" << out.summary.string() << "\n";
    } else if (check->parsed()) {
      const auto out = cmd_check(c, CheckHooks{corrupt_gradient});
      for (const auto& p : out.content["properties"]) {
        std::cout << (p["passed"].get<bool>() ? "PASS " : "FAIL ") << p["name"].get<std::string>()
                  << " measured=" << p["measured"].get<double>()
                  << " threshold=" << p["threshold"].get<double>() << "\n";
      }
      std::cout << out.report.string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  }
  return 0;
}

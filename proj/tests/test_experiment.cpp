#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "kalmanid/experiment.hpp"

using namespace kalmanid;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = fs::temp_directory_path() / "kalmanid_tests" /
             (std::string(info->test_suite_name()) + "_" + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string config_path(const char* name) {
  return std::string(KALMANID_CONFIG_DIR) + "/" + name;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd =
      std::string(KALMANID_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

ExperimentConfig config_from(const std::string& text) { return parse_config(json::parse(text)); }

std::string config_error(const std::string& text) {
  try {
    config_from(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsPerExample) {
  const auto one = config_from(R"({"example": "one_dim"})");
  EXPECT_EQ(one.A(0, 0), 0.9);
  EXPECT_EQ(one.L_star(0, 0), 0.8);
  EXPECT_EQ(one.alpha, 0.02);
  const auto three = config_from(R"({"example": "three_state"})");
  EXPECT_EQ(three.p_hit, 0.1);
  EXPECT_EQ(three.sigma_w2, 10.0);
  EXPECT_EQ(three.a_f, 0.9);
  EXPECT_EQ(three.cov_v_pos, 2.0);
  const auto two = config_from(R"({"example": "two_state"})");
  EXPECT_EQ(two.sigma_f, 10.0);
  EXPECT_EQ(two.mu, 0.1);
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(config_error(R"({})"), "$.example: required");
  EXPECT_NE(config_error(R"({"example": "four_state"})").find("$.example"), std::string::npos);
  EXPECT_NE(config_error(R"({"example": "one_dim", "N_list": [100, 100]})").find("$.N_list[1]"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"example": "one_dim", "alpha": -1})").find("$.alpha"), std::string::npos);
  EXPECT_NE(config_error(R"({"example": "one_dim", "nseeds": 3})").find("$.nseeds: unknown"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"example": "two_state", "A": [[1]]})").find("$.A"), std::string::npos);
  EXPECT_NE(config_error(R"({"example": "custom", "A": [[0.5]]})").find("required for custom"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"example": "one_dim", "W": [[1, 0], [0, 1]]})").find("$.W"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"example": "one_dim", "A": [[1.2]], "L_star": [[0.1]]})").find("$: invalid"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"example": "custom", "A": [[0.5, 1], [0]], "B": [[1]], "C": [[1]],
                             "L_star": [[0.1]], "S_star": [[1]]})")
                .find("$.A[1]"),
            std::string::npos);
}

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"one_dim.json", "two_state.json", "three_state.json"}) {
    EXPECT_NO_THROW(load_config(config_path(name))) << name;
  }
}

TEST(Config, HashTracksEffectiveConfig) {
  auto a = config_from(R"({"example": "one_dim", "seed": 3})");
  auto b = config_from(R"({"seed": 3, "example": "one_dim", "alpha": 0.02})");
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 4;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(DatasetCsv, RoundTripIsExact) {
  const auto c = config_from(R"({"example": "three_state", "input": "random"})");
  const auto sys = example_system(c);
  const auto d = generate_dataset(c, sys, 50, 7);
  const auto back = dataset_from_csv(dataset_to_csv(d));
  ASSERT_EQ(back.y.size(), d.y.size());
  for (std::size_t k = 0; k < d.y.size(); ++k) {
    EXPECT_EQ(back.y[k], d.y[k]);
    EXPECT_EQ(back.u[k], d.u[k]);
  }
}

TEST(DatasetCsv, MalformedRowsAreNamed) {
  const std::string good = "k,u0,y0\n0,0,1.5\n1,0,2.5\n";
  EXPECT_NO_THROW(dataset_from_csv(good));
  const auto message = [](const std::string& text) {
    try {
      dataset_from_csv(text);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("k,u0,y0\n0,0,1.5\n1,0\n").find("row 1 (line 3)"), std::string::npos);
  EXPECT_NE(message("k,u0,y0\n0,0,1.5\n1,0,abc\n").find("field y0"), std::string::npos);
  EXPECT_NE(message("k,u0,y0\n0,0,1.5\n5,0,1\n").find("k must equal 1"), std::string::npos);
  EXPECT_NE(message("k,y0,u0\n").find("header"), std::string::npos);
  EXPECT_NE(message("k,u0,y0\n").find("no data rows"), std::string::npos);
  EXPECT_NE(message("").find("empty"), std::string::npos);
}

TEST(Helpers, LocalMinima) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(local_minima({3, 2, 1, 2, 3}), (std::vector<std::size_t>{2}));
  EXPECT_EQ(local_minima({nan, 1, 2, 3, nan}), (std::vector<std::size_t>{1}));
  EXPECT_EQ(local_minima({3, 1, 3, 0.5, 4}), (std::vector<std::size_t>{1, 3}));
  EXPECT_TRUE(local_minima({nan, 1, nan}).empty());
}

TEST(Helpers, SlopeAndMedian) {
  EXPECT_NEAR(loglog_slope({10, 100, 1000}, {1.0, 1.0 / std::sqrt(10.0), 0.1}), -0.5, 1e-12);
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_EQ(count_increases({3, 2, 2.5, 1}), 1);
  EXPECT_THROW(median({}), InvalidArgument);
}

TEST(Simulate, OneDimWritesHeaderAndRows) {
  const auto dir = scratch_dir();
  ASSERT_EQ(run_cli("simulate --config " + config_path("one_dim.json") + " --out " + dir.string() +
                        " --n 10",
                    dir / "log.txt"),
            0);
  const auto rows = lines_of(dir / "one_dim.csv");
  ASSERT_EQ(rows.size(), 12u);
  EXPECT_EQ(rows[0], "k,u0,y0");
  EXPECT_EQ(rows[1].substr(0, 4), "0,0,");
  const auto meta = metadata_from_json(json::parse(read_text(dir / "one_dim.meta.json")));
  EXPECT_EQ(meta.L_star(0, 0), 0.8);
  EXPECT_EQ(meta.S_star(0, 0), 1.0);
  EXPECT_EQ(meta.plant.A(0, 0), 0.9);
  EXPECT_EQ(meta.alpha_default, 0.02);
  EXPECT_EQ(meta.seed, 1u);
}

TEST(Simulate, ThreeStateHeader) {
  const auto dir = scratch_dir();
  ASSERT_EQ(run_cli("simulate --config " + config_path("three_state.json") + " --out " +
                        dir.string() + " --n 20",
                    dir / "log.txt"),
            0);
  const auto rows = lines_of(dir / "three_state.csv");
  ASSERT_EQ(rows.size(), 22u);
  EXPECT_EQ(rows[0], "k,u0,y0,y1");
}

TEST(Simulate, RerunsAreByteIdentical) {
  const auto dir = scratch_dir();
  const auto args = "simulate --config " + config_path("two_state.json") + " --n 500 --seed 9 --out ";
  ASSERT_EQ(run_cli(args + (dir / "a").string(), dir / "a.log"), 0);
  ASSERT_EQ(run_cli(args + (dir / "b").string(), dir / "b.log"), 0);
  EXPECT_EQ(read_text(dir / "a" / "two_state.csv"), read_text(dir / "b" / "two_state.csv"));
  EXPECT_EQ(read_text(dir / "a" / "two_state.meta.json"), read_text(dir / "b" / "two_state.meta.json"));
  ASSERT_EQ(run_cli("simulate --config " + config_path("two_state.json") + " --n 500 --seed 10 --out " +
                        (dir / "c").string(),
                    dir / "c.log"),
            0);
  EXPECT_NE(read_text(dir / "a" / "two_state.csv"), read_text(dir / "c" / "two_state.csv"));
}

TEST(Simulate, TwoStateGeneratorMatchesFilterStatistics) {
  // Residuals of the true filter on generated data have covariance S*.
  const auto c = config_from(R"({"example": "two_state"})");
  const auto sys = example_system(c);
  const auto d = generate_dataset(c, sys, 50000, 3);
  const auto pred = predict_states(sys.truth.plant, sys.truth.L_star, d);
  double s = 0.0;
  for (std::size_t k = 1000; k < pred.residuals.size(); ++k) s += pred.residuals[k].squaredNorm();
  s /= static_cast<double>(pred.residuals.size() - 1000);
  EXPECT_NEAR(s / sys.truth.S_star(0, 0), 1.0, 0.05);
}

TEST(Identify, TwoStateSingleCluster) {
  const auto dir = scratch_dir();
  auto c = load_config(config_path("two_state.json"));
  c.output_dir = dir.string();
  c.N_list = {1000};
  const auto sim = cmd_simulate(c);
  const auto out = cmd_identify(c, sim.csv);
  EXPECT_EQ(out.report, dir / "two_state.fit.json");
  EXPECT_EQ(out.content["n_clusters"].get<std::size_t>(), 1u);
  EXPECT_EQ(out.content["failed_starts"].get<std::size_t>(), 0u);
  EXPECT_TRUE(out.content["best"]["converged"].get<bool>());
  EXPECT_EQ(out.content["config_hash"].get<std::string>(), config_hash(c));
  EXPECT_EQ(out.content["seed"].get<std::uint64_t>(), c.seed);
  EXPECT_LT(out.content["distance_to_L_star"].get<double>(), 0.5);
}

TEST(Identify, ErrorShrinksWithMoreData) {
  const auto dir = scratch_dir();
  auto c = load_config(config_path("one_dim.json"));
  c.n_starts = 3;
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t N : {100u, 1000u, 10000u}) {
    c.output_dir = (dir / std::to_string(N)).string();
    c.N_list = {N};
    const auto sim = cmd_simulate(c);
    const auto out = cmd_identify(c, sim.csv);
    const double err = out.content["distance_to_L_star"].get<double>();
    EXPECT_LT(err, previous) << "N = " << N;
    previous = err;
  }
}

TEST(Identify, CliReportsMalformedDataset) {
  const auto dir = scratch_dir();
  write_text(dir / "bad.csv", "k,u0,y0\n0,0,1\n1,0,x\n");
  EXPECT_EQ(run_cli("identify --config " + config_path("one_dim.json") + " --out " + dir.string() +
                        " --data " + (dir / "bad.csv").string(),
                    dir / "log.txt"),
            1);
  const auto log = read_text(dir / "log.txt");
  EXPECT_NE(log.find("row 1 (line 3)"), std::string::npos) << log;
}

TEST(Identify, DatasetDimensionMismatch) {
  const auto dir = scratch_dir();
  write_text(dir / "wide.csv", "k,u0,y0,y1\n0,0,1,2\n1,0,1,2\n");
  auto c = load_config(config_path("one_dim.json"));
  c.output_dir = dir.string();
  EXPECT_THROW(cmd_identify(c, dir / "wide.csv"), DimensionMismatch);
}

TEST(Landscape, LimitAndStabilityMask) {
  const auto dir = scratch_dir();
  auto c = load_config(config_path("one_dim.json"));
  c.output_dir = dir.string();
  c.N_list = {100, 1000};
  const auto out = cmd_landscape(c);
  const auto rows = lines_of(out.table);
  ASSERT_EQ(rows.size(), 242u);
  EXPECT_EQ(rows[0], "L,stable,V_N_100,V_N_1000,V_bar");

  const auto land = compute_landscape(c, replicate_seed(c, 0));
  double first_stable = 0.0, last_stable = 0.0;
  bool seen = false;
  for (std::size_t i = 0; i < land.L.size(); ++i) {
    if (std::abs(land.L[i] - 0.8) < 1e-9) {
      EXPECT_NEAR(land.V_bar[i], 1.0, 1e-9);
    }
    if (land.stable[i]) {
      if (!seen) first_stable = land.L[i];
      last_stable = land.L[i];
      seen = true;
      EXPECT_TRUE(std::isfinite(land.V_N[0][i]));
    } else {
      EXPECT_TRUE(std::isnan(land.V_N[1][i]));
      EXPECT_TRUE(std::isnan(land.V_bar[i]));
    }
  }
  // The stable set is |0.9 - L| < 1, i.e. (-0.1, 1.9), sampled at step 0.01.
  EXPECT_NEAR(first_stable, -0.09, 1e-9);
  EXPECT_NEAR(last_stable, 1.89, 1e-9);
  const auto mins = local_minima(land.V_bar);
  ASSERT_EQ(mins.size(), 1u);
  EXPECT_NEAR(land.L[mins[0]], 0.8, 1e-9);
}

TEST(Landscape, RejectsMultiStateModels) {
  auto c = load_config(config_path("two_state.json"));
  EXPECT_THROW(compute_landscape(c, 0), UnsupportedDimension);
  const auto dir = scratch_dir();
  EXPECT_EQ(run_cli("landscape --config " + config_path("two_state.json") + " --out " + dir.string(),
                    dir / "log.txt"),
            1);
}

TEST(Consistency, SmallStudy) {
  const auto dir = scratch_dir();
  auto c = load_config(config_path("one_dim.json"));
  c.output_dir = dir.string();
  c.N_list = {100, 10000};
  c.n_seeds = 5;
  c.n_starts = 2;
  const auto out = cmd_consistency(c);
  const auto rows = lines_of(out.table);
  EXPECT_EQ(rows.size(), 11u);
  EXPECT_EQ(rows[0], "N,seed,error,converged");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double err = std::stod(rows[i].substr(rows[i].find(',', rows[i].find(',') + 1) + 1));
    EXPECT_TRUE(std::isfinite(err) && err > 0.0) << rows[i];
  }
  EXPECT_LE(out.content["median_increases"].get<int>(), 1);
  const double slope = out.content["slope"].get<double>();
  EXPECT_LT(slope, -0.2);
  EXPECT_GT(slope, -0.8);
  const auto again = cmd_consistency(c);
  EXPECT_EQ(out.content.dump(), again.content.dump());
}

TEST(Check, AllPropertiesPass) {
  const auto dir = scratch_dir();
  for (const char* name : {"one_dim.json", "two_state.json", "three_state.json"}) {
    auto c = load_config(config_path(name));
    c.output_dir = dir.string();
    const auto out = cmd_check(c);
    EXPECT_TRUE(out.all_passed) << name << "\n" << out.content["properties"].dump(2);
  }
}

TEST(Check, CorruptedGradientIsCaught) {
  const auto dir = scratch_dir();
  auto c = load_config(config_path("one_dim.json"));
  c.output_dir = dir.string();
  const auto out = cmd_check(c, CheckHooks{true});
  EXPECT_FALSE(out.all_passed);
  for (const auto& p : out.content["properties"]) {
    EXPECT_EQ(p["passed"].get<bool>(), p["name"] != "pem_gradient_fd") << p.dump();
  }
  // The CLI exposes the same hook and still exits 0: failures are report
  // entries, not errors.
  EXPECT_EQ(run_cli("check --corrupt-gradient --config " + config_path("one_dim.json") + " --out " +
                        dir.string(),
                    dir / "log.txt"),
            0);
  EXPECT_NE(read_text(dir / "log.txt").find("FAIL pem_gradient_fd"), std::string::npos);
}

TEST(Cli, UsageAndConfigErrors) {
  const auto dir = scratch_dir();
  EXPECT_EQ(run_cli("", dir / "a.log"), 1);
  EXPECT_EQ(run_cli("simulate", dir / "b.log"), 1);
  EXPECT_EQ(run_cli("simulate --config " + (dir / "missing.json").string(), dir / "c.log"), 1);
  write_text(dir / "bad.json", R"({"example": "one_dim", "N_list": [10, 5]})");
  EXPECT_EQ(run_cli("simulate --config " + (dir / "bad.json").string(), dir / "d.log"), 1);
  EXPECT_NE(read_text(dir / "d.log").find("$.N_list[1]"), std::string::npos);
  EXPECT_EQ(run_cli("--help", dir / "e.log"), 0);
}

TEST(Cli, NumericalFailureExitsTwo) {
  // A tiny feasible set makes every start rejection fail.
  const auto dir = scratch_dir();
  write_text(dir / "tight.json", R"({"example": "two_state", "alpha": 1000, "n_starts": 2,
                                     "sampler": "box", "N_list": [50]})");
  ASSERT_EQ(run_cli("simulate --config " + (dir / "tight.json").string() + " --out " + dir.string(),
                    dir / "a.log"),
            0);
  EXPECT_EQ(run_cli("identify --config " + (dir / "tight.json").string() + " --out " + dir.string(),
                    dir / "b.log"),
            2);
}

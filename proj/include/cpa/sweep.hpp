#ifndef CPA_SWEEP_HPP
#define CPA_SWEEP_HPP

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cpa/experiment_io.hpp"
#include "cpa/flsim.hpp"

namespace cpa {

// Cross-product experiment plan over epsilon, user count, and rate, repeated
// over distinct seeds. Cells are written one CSV each; a finished cell is
// never recomputed, so interrupted plans resume by rerunning the same
// command.
struct ExperimentPlan {
  FLConfig base;
  std::vector<double> epsilons;  // empty = keep base value
  std::vector<int> users;
  std::vector<int> rates;
  int repetitions = 1;
  std::string out_dir = "out";
  std::size_t cell_cap = 256;
};

struct CellOutcome {
  FLConfig config;
  std::string csv_path;
  double final_test_acc = 0.0;
  double snr_last10 = 0.0;
  double mean_mse = 0.0;
  bool skipped = false;  // already present from an earlier run
};

inline std::string cell_file_name(const FLConfig& cfg, int rep) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s_eps%g_K%d_R%d_seed%llu.csv",
                scheme_name(cfg.scheme), cfg.epsilon, cfg.users, cfg.rate,
                static_cast<unsigned long long>(cfg.master_seed));
  (void)rep;
  return buf;
}

inline std::vector<FLConfig> expand_plan(const ExperimentPlan& plan) {
  std::vector<double> eps = plan.epsilons.empty()
                                ? std::vector<double>{plan.base.epsilon}
                                : plan.epsilons;
  std::vector<int> users = plan.users.empty() ? std::vector<int>{plan.base.users}
                                              : plan.users;
  std::vector<int> rates = plan.rates.empty() ? std::vector<int>{plan.base.rate}
                                              : plan.rates;
  std::vector<FLConfig> cells;
  for (double e : eps)
    for (int k : users)
      for (int r : rates)
        for (int rep = 0; rep < plan.repetitions; ++rep) {
          FLConfig cfg = plan.base;
          cfg.epsilon = e;
          cfg.users = k;
          cfg.rate = r;
          cfg.master_seed = plan.base.master_seed + static_cast<std::uint64_t>(rep);
          cells.push_back(cfg);
        }
  return cells;
}

inline std::vector<CellOutcome> run_plan(const ExperimentPlan& plan) {
  std::vector<FLConfig> cells = expand_plan(plan);
  if (cells.size() > plan.cell_cap)
    throw ConfigError("plan: " + std::to_string(cells.size()) +
                      " cells exceed the cap of " + std::to_string(plan.cell_cap));
  for (const auto& cfg : cells) {
    auto errs = validate_config(cfg);
    if (!errs.empty()) throw ConfigError("plan cell invalid: " + errs.front());
  }

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(plan.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + plan.out_dir);

  std::vector<CellOutcome> outcomes;
  int rep = 0;
  for (const auto& cfg : cells) {
    CellOutcome cell;
    cell.config = cfg;
    cell.csv_path = plan.out_dir + "/" + cell_file_name(cfg, rep++);
    if (fs::exists(cell.csv_path)) {
      cell.skipped = true;
      outcomes.push_back(cell);
      continue;
    }

    const std::string tmp_path = cell.csv_path + ".tmp";
    std::ofstream csv(tmp_path, std::ios::binary | std::ios::trunc);
    if (!csv) throw IoError("cannot open " + tmp_path);
    csv << metrics_csv_header();
    // Flush per round so an interrupted run leaves inspectable partials.
    ExperimentResult result = run_experiment(cfg, [&csv](const RoundMetrics& m) {
      csv << metrics_csv_row(m);
      csv.flush();
    });
    csv.close();
    if (!csv) throw IoError("failed writing " + tmp_path);
    fs::rename(tmp_path, cell.csv_path, ec);
    if (ec) throw IoError("cannot finalize " + cell.csv_path);

    cell.final_test_acc = result.final_test_acc;
    cell.snr_last10 = mean_snr_last_rounds(result, 10);
    double mse = 0.0;
    for (const auto& m : result.rounds) mse += m.mse;
    cell.mean_mse = result.rounds.empty() ? 0.0 : mse / static_cast<double>(result.rounds.size());
    outcomes.push_back(cell);
  }

  nlohmann::json j;
  j["cells"] = nlohmann::json::array();
  for (const auto& cell : outcomes) {
    nlohmann::json c;
    c["csv"] = cell.csv_path;
    c["epsilon"] = cell.config.epsilon;
    c["users"] = cell.config.users;
    c["rate"] = cell.config.rate;
    c["seed"] = cell.config.master_seed;
    c["skipped"] = cell.skipped;
    if (!cell.skipped) {
      c["final_test_acc"] = cell.final_test_acc;
      c["snr_last10_db"] = cell.snr_last10;
      c["mean_mse"] = cell.mean_mse;
    }
    j["cells"].push_back(c);
  }
  write_text_file(plan.out_dir + "/sweep_summary.json", j.dump(2) + "\n");
  return outcomes;
}

}  // namespace cpa

#endif  // CPA_SWEEP_HPP

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cpa/experiment_io.hpp"
#include "cpa/flsim.hpp"
#include "cpa/replicate.hpp"
#include "cpa/sweep.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

int default_threads() {
  if (const char* env = std::getenv("CPA_FED_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  return 1;
}

struct CommonFlags {
  std::string config_path;
  std::string out_dir = "out";
  long long seed = -1;
  int threads = 0;
  std::string scheme;
  double epsilon = -1.0;
  int users = 0;
  int rate = 0;
  std::string attack;
  double attack_frac = -1.0;
};

void add_common_flags(CLI::App* app, CommonFlags& fl) {
  app->add_option("--config", fl.config_path, "flat key = value config file");
  app->add_option("--out", fl.out_dir, "output directory");
  app->add_option("--seed", fl.seed, "master seed override");
  app->add_option("--threads", fl.threads, "worker threads (env CPA_FED_THREADS)");
  app->add_option("--scheme", fl.scheme,
                  "vanilla|cpa|cpa_no_rr|nested|laplace|signsgd_rr");
  app->add_option("--epsilon", fl.epsilon, "per-round privacy budget");
  app->add_option("--users", fl.users, "number of users K");
  app->add_option("--rate", fl.rate, "lattice rate R (bits per sample)");
  app->add_option("--attack", fl.attack, "none|ones|flip");
  app->add_option("--attack-frac", fl.attack_frac, "fraction of malicious users");
}

cpa::FLConfig build_config(const CommonFlags& fl) {
  cpa::FLConfig cfg;
  cfg.threads = default_threads();
  if (!fl.config_path.empty()) cfg = cpa::load_config_file(fl.config_path, cfg);
  if (fl.seed >= 0) cfg.master_seed = static_cast<std::uint64_t>(fl.seed);
  if (fl.threads >= 1) cfg.threads = fl.threads;
  if (!fl.scheme.empty() && !cpa::parse_scheme(fl.scheme, cfg.scheme))
    throw cpa::ConfigError("unknown scheme " + fl.scheme);
  if (fl.epsilon >= 0.0) cfg.epsilon = fl.epsilon;
  if (fl.users >= 1) cfg.users = fl.users;
  if (fl.rate >= 1) cfg.rate = fl.rate;
  if (!fl.attack.empty() && !cpa::parse_attack(fl.attack, cfg.attack))
    throw cpa::ConfigError("unknown attack " + fl.attack);
  if (fl.attack_frac >= 0.0) cfg.attack_frac = fl.attack_frac;
  return cfg;
}

int check_config(const cpa::FLConfig& cfg) {
  auto errs = cpa::validate_config(cfg);
  if (errs.empty()) return 0;
  for (const auto& e : errs) std::cerr << "config error: " << e << "\n";
  return kExitConfig;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

int cmd_run(const CommonFlags& fl) {
  cpa::FLConfig cfg = build_config(fl);
  if (int rc = check_config(cfg)) return rc;

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fl.out_dir, ec);
  if (ec) {
    std::cerr << "io error: cannot create " << fl.out_dir << "\n";
    return kExitIo;
  }
  const std::string csv_path = fl.out_dir + "/metrics.csv";
  std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
  if (!csv) {
    std::cerr << "io error: cannot open " << csv_path << "\n";
    return kExitIo;
  }
  csv << cpa::metrics_csv_header();
  cpa::ExperimentResult result =
      cpa::run_experiment(cfg, [&csv](const cpa::RoundMetrics& m) {
        csv << cpa::metrics_csv_row(m);
        csv.flush();
      });
  csv.close();
  if (!csv) {
    std::cerr << "io error: failed writing " << csv_path << "\n";
    return kExitIo;
  }
  try {
    cpa::write_text_file(fl.out_dir + "/summary.json",
                         cpa::summary_to_json(result).dump(2) + "\n");
  } catch (const cpa::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  }
  std::cout << "wrote " << csv_path << " (" << result.rounds.size() << " rounds), final test acc "
            << result.final_test_acc << "%\n";
  return 0;
}

int cmd_sweep(const CommonFlags& fl, const std::string& eps_list,
              const std::string& users_list, const std::string& rates_list,
              int repetitions, std::size_t cap) {
  cpa::ExperimentPlan plan;
  plan.base = build_config(fl);
  if (!eps_list.empty()) plan.epsilons = parse_double_list(eps_list);
  if (!users_list.empty()) plan.users = parse_int_list(users_list);
  if (!rates_list.empty()) plan.rates = parse_int_list(rates_list);
  plan.repetitions = repetitions;
  plan.out_dir = fl.out_dir;
  plan.cell_cap = cap;

  auto outcomes = cpa::run_plan(plan);
  int fresh = 0, skipped = 0;
  for (const auto& c : outcomes) (c.skipped ? skipped : fresh)++;
  std::cout << "sweep complete: " << fresh << " cells run, " << skipped
            << " resumed, summary at " << plan.out_dir << "/sweep_summary.json\n";
  return 0;
}

int cmd_replicate(const std::string& suite, const CommonFlags& fl) {
  cpa::ReplicateOptions opts;
  opts.threads = fl.threads >= 1 ? fl.threads : default_threads();
  cpa::SuiteReport report = cpa::run_suite(suite, opts);
  std::string text = cpa::format_report(report);
  std::cout << text;
  if (!fl.out_dir.empty() && fl.out_dir != "out") {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fl.out_dir, ec);
    if (ec) {
      std::cerr << "io error: cannot create " << fl.out_dir << "\n";
      return kExitIo;
    }
    cpa::write_text_file(fl.out_dir + "/" + suite + ".txt", text);
  }
  return report.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compressed private aggregation simulator"};
  app.require_subcommand(1);

  CommonFlags run_fl, sweep_fl, rep_fl;

  CLI::App* run = app.add_subcommand("run", "run one experiment");
  add_common_flags(run, run_fl);

  CLI::App* sweep = app.add_subcommand("sweep", "run a parameter sweep");
  add_common_flags(sweep, sweep_fl);
  std::string eps_list, users_list, rates_list;
  int repetitions = 1;
  std::size_t cap = 256;
  sweep->add_option("--epsilons", eps_list, "comma list of epsilon values");
  sweep->add_option("--users-list", users_list, "comma list of user counts");
  sweep->add_option("--rates", rates_list, "comma list of rates");
  sweep->add_option("--seeds", repetitions, "seed repetitions per cell");
  sweep->add_option("--cap", cap, "maximum number of cells");

  CLI::App* rep = app.add_subcommand("replicate", "run a named verification suite");
  add_common_flags(rep, rep_fl);
  std::string suite;
  rep->add_option("suite", suite, "suite name, or 'list'")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_fl);
    if (sweep->parsed())
      return cmd_sweep(sweep_fl, eps_list, users_list, rates_list, repetitions, cap);
    if (rep->parsed()) {
      if (suite == "list") {
        for (const auto& name : cpa::suite_names()) std::cout << name << "\n";
        return 0;
      }
      return cmd_replicate(suite, rep_fl);
    }
  } catch (const cpa::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const cpa::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  return 0;
}

#ifndef CPA_EXPERIMENT_IO_HPP
#define CPA_EXPERIMENT_IO_HPP

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpa/flsim.hpp"

namespace cpa {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key-value config: one `key = value` per line, '#' starts a comment.
inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const char* ws = " \t\r\n";
    auto b = s.find_first_not_of(ws);
    auto e = s.find_last_not_of(ws);
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
    kv[key] = val;
  }
  return kv;
}

inline void apply_config_entry(FLConfig& cfg, const std::string& key,
                               const std::string& val) {
  auto as_int = [&]() { return std::stoi(val); };
  auto as_u64 = [&]() { return static_cast<std::uint64_t>(std::stoull(val)); };
  auto as_double = [&]() { return std::stod(val); };
  auto as_bool = [&]() {
    if (val == "true" || val == "1") return true;
    if (val == "false" || val == "0") return false;
    throw ConfigError("config: boolean expected for " + key);
  };

  if (key == "users") cfg.users = as_int();
  else if (key == "rounds") cfg.rounds = as_int();
  else if (key == "tau") cfg.tau = as_int();
  else if (key == "batch_size") cfg.batch_size = as_int();
  else if (key == "eta") cfg.eta = as_double();
  else if (key == "rho_c") cfg.rho_c = as_double();
  else if (key == "rho_s") cfg.rho_s = as_double();
  else if (key == "phi") cfg.phi = as_double();
  else if (key == "scheme") {
    if (!parse_scheme(val, cfg.scheme)) throw ConfigError("config: unknown scheme " + val);
  } else if (key == "epsilon") cfg.epsilon = as_double();
  else if (key == "lattice_dim") cfg.lattice_dim = as_int();
  else if (key == "rate") cfg.rate = as_int();
  else if (key == "rate_coarse") cfg.rate_coarse = as_int();
  else if (key == "rate_nested") cfg.rate_nested = as_int();
  else if (key == "gamma0") cfg.gamma0 = as_double();
  else if (key == "calib_percentile") cfg.calib_percentile = as_double();
  else if (key == "calib_margin") cfg.calib_margin = as_double();
  else if (key == "attack") {
    if (!parse_attack(val, cfg.attack)) throw ConfigError("config: unknown attack " + val);
  } else if (key == "attack_frac") cfg.attack_frac = as_double();
  else if (key == "model") {
    if (val == "linear") cfg.model = ModelKind::linear;
    else if (val == "mlp") cfg.model = ModelKind::mlp;
    else throw ConfigError("config: unknown model " + val);
  } else if (key == "loss") {
    if (val == "softmax_ce") cfg.loss = LossKind::softmax_ce;
    else if (val == "least_squares") cfg.loss = LossKind::least_squares;
    else throw ConfigError("config: unknown loss " + val);
  } else if (key == "hidden") cfg.hidden = as_int();
  else if (key == "per_user_samples") cfg.per_user_samples = as_int();
  else if (key == "master_seed") cfg.master_seed = as_u64();
  else if (key == "threads") cfg.threads = as_int();
  else if (key == "clamp_negatives") cfg.clamp_negatives = as_bool();
  else if (key == "force_zero_dither") cfg.force_zero_dither = as_bool();
  else if (key == "n_train") cfg.data.n_train = as_int();
  else if (key == "n_val") cfg.data.n_val = as_int();
  else if (key == "n_test") cfg.data.n_test = as_int();
  else if (key == "features") cfg.data.features = as_int();
  else if (key == "classes") cfg.data.classes = as_int();
  else if (key == "separation") cfg.data.separation = as_double();
  else if (key == "normalize01") cfg.data.normalize01 = as_bool();
  else if (key == "idx_images") cfg.data.idx_images = val;
  else if (key == "idx_labels") cfg.data.idx_labels = val;
  else throw ConfigError("config: unknown key " + key);
}

inline FLConfig load_config_file(const std::string& path, FLConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  auto kv = parse_kv_text(buf.str());
  for (const auto& [k, v] : kv) apply_config_entry(base, k, v);
  return base;
}

inline nlohmann::json config_to_json(const FLConfig& cfg) {
  nlohmann::json j;
  j["users"] = cfg.users;
  j["rounds"] = cfg.rounds;
  j["tau"] = cfg.tau;
  j["batch_size"] = cfg.batch_size;
  j["eta"] = cfg.eta;
  j["scheme"] = scheme_name(cfg.scheme);
  j["epsilon"] = cfg.epsilon;
  j["lattice_dim"] = cfg.lattice_dim;
  j["rate"] = cfg.rate;
  if (cfg.scheme == Scheme::nested) {
    j["rate_coarse"] = cfg.rate_coarse;
    j["rate_nested"] = cfg.rate_nested;
  }
  j["attack"] = cfg.attack == AttackKind::none
                    ? "none"
                    : (cfg.attack == AttackKind::ones ? "ones" : "flip");
  j["attack_frac"] = cfg.attack_frac;
  j["master_seed"] = cfg.master_seed;
  j["model"] = cfg.model == ModelKind::linear ? "linear" : "mlp";
  return j;
}

inline nlohmann::json summary_to_json(const ExperimentResult& result) {
  nlohmann::json j;
  j["config"] = config_to_json(result.config);
  j["final_val_acc"] = result.final_val_acc;
  j["final_test_acc"] = result.final_test_acc;
  j["total_comm_bits"] = result.comm_bits_total;
  j["bound_satisfied"] = result.bound_satisfied_all;
  j["sigma_cell"] = result.sigma_cell;
  j["sigma_normalized"] = result.sigma_normalized;
  j["calibrated_gamma"] = result.calibrated_gamma;
  j["rounds_completed"] = result.rounds.size();
  j["snr_last10_mean_db"] = mean_snr_last_rounds(result, 10);
  double mse = 0.0, bound = 0.0;
  for (const auto& m : result.rounds) {
    mse += m.mse;
    bound += m.theorem1_bound;
  }
  if (!result.rounds.empty()) {
    mse /= static_cast<double>(result.rounds.size());
    bound /= static_cast<double>(result.rounds.size());
  }
  j["mean_mse"] = mse;
  j["mean_bound"] = bound;
  return j;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace cpa

#endif  // CPA_EXPERIMENT_IO_HPP

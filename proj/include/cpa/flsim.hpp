#ifndef CPA_FLSIM_HPP
#define CPA_FLSIM_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "cpa/aggregate.hpp"
#include "cpa/codec.hpp"
#include "cpa/data.hpp"
#include "cpa/lattice.hpp"
#include "cpa/rng.hpp"

namespace cpa {

enum class Scheme { vanilla, cpa, cpa_no_rr, nested, laplace, signsgd_rr };
enum class AttackKind { none, ones, flip };

inline const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::vanilla: return "vanilla";
    case Scheme::cpa: return "cpa";
    case Scheme::cpa_no_rr: return "cpa_no_rr";
    case Scheme::nested: return "nested";
    case Scheme::laplace: return "laplace";
    case Scheme::signsgd_rr: return "signsgd_rr";
  }
  return "?";
}

inline bool parse_scheme(const std::string& s, Scheme& out) {
  if (s == "vanilla") out = Scheme::vanilla;
  else if (s == "cpa") out = Scheme::cpa;
  else if (s == "cpa_no_rr") out = Scheme::cpa_no_rr;
  else if (s == "nested") out = Scheme::nested;
  else if (s == "laplace") out = Scheme::laplace;
  else if (s == "signsgd_rr") out = Scheme::signsgd_rr;
  else return false;
  return true;
}

inline bool parse_attack(const std::string& s, AttackKind& out) {
  if (s == "none") out = AttackKind::none;
  else if (s == "ones") out = AttackKind::ones;
  else if (s == "flip") out = AttackKind::flip;
  else return false;
  return true;
}

struct DataConfig {
  int n_train = 5000;
  int n_val = 500;
  int n_test = 1000;
  int features = 20;
  int classes = 10;
  double separation = 3.0;
  bool normalize01 = true;  // min-max scale features to [0, 1]
  std::string idx_images;  // when set, load IDX files instead of synthetic
  std::string idx_labels;
};

struct FLConfig {
  int users = 100;       // K
  int rounds = 50;       // T
  int tau = 5;           // local steps per round
  int batch_size = 1;    // 1 = local-SGD
  double eta = 0.05;     // fixed step size; 0 selects the 1/t schedule
  double rho_c = 1.0;    // schedule/strong-convexity constant
  double rho_s = 1.0;    // smoothness constant (schedule precondition)
  double phi = 0.0;      // schedule offset; 0 = auto tau*max(1, 4 rho_s/rho_c)

  Scheme scheme = Scheme::cpa;
  double epsilon = 0.5;
  int lattice_dim = 1;   // L
  int rate = 1;          // R per axis (fine rate for nested)
  int rate_coarse = 1;
  int rate_nested = 3;
  double gamma0 = 0.0;            // 0 = calibrate from round-0 updates
  double calib_percentile = 0.99;
  double calib_margin = 1.0;

  AttackKind attack = AttackKind::none;
  double attack_frac = 0.0;

  ModelKind model = ModelKind::linear;
  LossKind loss = LossKind::softmax_ce;
  int hidden = 32;
  int per_user_samples = 5;
  DataConfig data;

  std::uint64_t master_seed = 1;
  int threads = 1;
  bool clamp_negatives = false;
  bool force_zero_dither = false;  // test hook
};

inline std::vector<std::string> validate_config(const FLConfig& cfg) {
  std::vector<std::string> errs;
  auto bad = [&errs](const std::string& m) { errs.push_back(m); };
  if (cfg.users < 1) bad("users must be >= 1");
  if (cfg.rounds < 1) bad("rounds must be >= 1");
  if (cfg.tau < 0) bad("tau must be >= 0");
  if (cfg.batch_size < 1) bad("batch_size must be >= 1");
  if (cfg.per_user_samples < 1) bad("per_user_samples must be >= 1");
  if (cfg.threads < 1) bad("threads must be >= 1");
  if (cfg.lattice_dim != 1 && cfg.lattice_dim != 2) bad("lattice_dim must be 1 or 2");
  if (cfg.rate < 1) bad("rate must be >= 1");
  bool needs_eps = cfg.scheme == Scheme::cpa || cfg.scheme == Scheme::nested ||
                   cfg.scheme == Scheme::laplace || cfg.scheme == Scheme::signsgd_rr;
  if (needs_eps && !(cfg.epsilon > 0.0)) bad("epsilon must be > 0 for this scheme");
  if (cfg.scheme == Scheme::nested) {
    if (cfg.rate_coarse < 1 || cfg.rate_nested < 1) bad("nested stage rates must be >= 1");
    if (cfg.rate_coarse + cfg.rate_nested != cfg.rate)
      bad("rate_coarse + rate_nested must equal rate");
  }
  if (cfg.attack != AttackKind::none) {
    if (!(cfg.attack_frac >= 0.0 && cfg.attack_frac < 1.0))
      bad("attack_frac must be in [0, 1)");
    bool bit_scheme = cfg.scheme == Scheme::cpa || cfg.scheme == Scheme::cpa_no_rr ||
                      cfg.scheme == Scheme::nested;
    if (!bit_scheme) bad("attacks apply only to bit-message schemes");
  }
  if (cfg.eta < 0.0) bad("eta must be >= 0");
  if (cfg.eta == 0.0) {
    if (!(cfg.rho_c > 0.0) || !(cfg.rho_s > 0.0))
      bad("schedule mode requires rho_c > 0 and rho_s > 0");
    double phi_min = cfg.tau * std::max(1.0, 4.0 * cfg.rho_s / cfg.rho_c);
    if (cfg.phi != 0.0 && cfg.phi < phi_min)
      bad("phi must be >= tau * max(1, 4 rho_s / rho_c)");
    if (cfg.phi != 0.0 && cfg.phi < cfg.tau) bad("phi must be >= tau");
  }
  if (cfg.data.idx_images.empty() != cfg.data.idx_labels.empty())
    bad("idx_images and idx_labels must be set together");
  if (cfg.data.idx_images.empty()) {
    if (cfg.data.n_train < 1 || cfg.data.features < 1 || cfg.data.classes < 2)
      bad("synthetic data needs n_train >= 1, features >= 1, classes >= 2");
  }
  if (cfg.loss == LossKind::least_squares && cfg.model != ModelKind::linear)
    bad("least_squares loss requires the linear model");
  return errs;
}

// Theorem-style decaying step size eta_t = tau / (rho_c (t + phi)).
inline double step_size(double t, int tau, double rho_c, double phi) {
  if (!(rho_c > 0.0) || !(phi > 0.0))
    throw std::invalid_argument("step_size: rho_c and phi must be > 0");
  return static_cast<double>(tau) / (rho_c * (t + phi));
}

struct LocalTask {
  Model model;
  LossKind loss = LossKind::softmax_ce;
  double rho_c = 0.0;  // regularizer for least-squares mode
};

// tau SGD steps from w_start with uniformly drawn sample indices; returns the
// model update h = w_end - w_start.
inline std::vector<double> local_sgd_steps(const LocalTask& task,
                                           std::span<const double> w_start,
                                           const Shard& shard, int tau, double eta,
                                           int batch_size, StreamRng& rng) {
  if (shard.size() == 0) throw std::invalid_argument("local_sgd: shard is empty");
  std::vector<double> w(w_start.begin(), w_start.end());
  std::vector<double> grad(w.size());
  std::vector<int> batch(static_cast<std::size_t>(std::min(batch_size, shard.size())));
  for (int step = 0; step < tau; ++step) {
    if (batch_size >= shard.size()) {
      batch.assign(shard.indices.begin(), shard.indices.end());
    } else {
      for (auto& idx : batch)
        idx = shard.indices[static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::uint64_t>(shard.size())))];
    }
    loss_and_grad(task.model, w, *shard.data, batch, task.loss, grad, task.rho_c);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= eta * grad[i];
  }
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= w_start[i];
  return w;
}

// w_{t+tau} = w_t + (1/K) sum_r h^r, accumulating in ascending user order.
inline std::vector<double> fedavg_aggregate(std::span<const std::vector<double>> updates,
                                            std::span<const double> w) {
  if (updates.empty()) throw std::invalid_argument("fedavg: no updates");
  std::vector<double> out(w.begin(), w.end());
  const double inv_k = 1.0 / static_cast<double>(updates.size());
  for (const auto& h : updates)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += inv_k * h[i];
  return out;
}

// Per-coordinate clip to [-gamma, gamma] plus Laplace noise of scale
// 2 * gamma / eps.
inline std::vector<double> laplace_mechanism(std::span<const double> h, double eps,
                                             double clip_gamma, StreamRng& rng) {
  if (!(eps > 0.0)) throw std::invalid_argument("laplace: epsilon must be > 0");
  std::vector<double> out(h.size());
  const double scale = 2.0 * clip_gamma / eps;
  for (std::size_t i = 0; i < h.size(); ++i) {
    double v = std::clamp(h[i], -clip_gamma, clip_gamma);
    out[i] = v + (std::isinf(eps) ? 0.0 : rng.laplace(scale));
  }
  return out;
}

// Separated-design baseline: one sign bit per coordinate, RR-perturbed.
// sign(0) counts as +1.
inline std::vector<std::int8_t> signsgd_encode(std::span<const double> h, double p,
                                               StreamRng& rng) {
  std::vector<std::int8_t> bits(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) {
    int bit = h[j] >= 0.0 ? +1 : -1;
    bits[j] = static_cast<std::int8_t>(randomized_response(bit, p, rng));
  }
  return bits;
}

// Debiased sign average scaled by a magnitude constant (half the current
// lattice spacing, so the step tracks the quantizer's dynamic range).
inline std::vector<double> signsgd_aggregate(
    std::span<const std::vector<std::int8_t>> bit_rows, double p, double eta_server) {
  if (bit_rows.empty()) throw std::invalid_argument("signsgd: no users");
  if (!(p > 0.5)) throw std::invalid_argument("signsgd: p must exceed 1/2");
  const std::size_t d = bit_rows[0].size();
  std::vector<double> update(d, 0.0);
  const double scale = eta_server / ((2.0 * p - 1.0) * static_cast<double>(bit_rows.size()));
  for (const auto& row : bit_rows) {
    if (row.size() != d) throw std::invalid_argument("signsgd: ragged bit rows");
    for (std::size_t j = 0; j < d; ++j) update[j] += scale * static_cast<double>(row[j]);
  }
  return update;
}

// Byzantine corruption of an encoded message: all-ones, or an independent
// coin flip per bit.
inline BitMessage inject_attack(const BitMessage& msg, AttackKind kind,
                                StreamRng& rng) {
  BitMessage out = msg;
  switch (kind) {
    case AttackKind::none:
      break;
    case AttackKind::ones:
      for (auto& b : out.bits) b = +1;
      break;
    case AttackKind::flip:
      for (auto& b : out.bits)
        if (rng.bernoulli(0.5)) b = static_cast<std::int8_t>(-b);
      break;
  }
  return out;
}

// 10 log10( var(w_fa) / var(w_fa - w_cpa) ), unbiased sample variances over
// coordinates; +inf when the distortion variance is zero.
inline double compute_snr_db(std::span<const double> w_fa,
                             std::span<const double> w_other) {
  if (w_fa.size() != w_other.size() || w_fa.size() < 2)
    throw std::invalid_argument("snr: dimension mismatch");
  const double n = static_cast<double>(w_fa.size());
  double mean_s = 0.0, mean_d = 0.0;
  for (std::size_t i = 0; i < w_fa.size(); ++i) {
    mean_s += w_fa[i];
    mean_d += w_fa[i] - w_other[i];
  }
  mean_s /= n;
  mean_d /= n;
  double var_s = 0.0, var_d = 0.0;
  for (std::size_t i = 0; i < w_fa.size(); ++i) {
    double ds = w_fa[i] - mean_s;
    double dd = (w_fa[i] - w_other[i]) - mean_d;
    var_s += ds * ds;
    var_d += dd * dd;
  }
  var_s /= (n - 1.0);
  var_d /= (n - 1.0);
  if (var_d == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(var_s / var_d);
}

struct RoundMetrics {
  int round = 0;
  double snr_db = 0.0;
  double mse = 0.0;            // ||w_scheme - w_fa||^2 for the round
  double theorem1_bound = 0.0; // 0 for schemes without a histogram decoder
  double overload_rate = 0.0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
};

struct ExperimentResult {
  std::vector<RoundMetrics> rounds;
  double final_val_acc = 0.0;
  double final_test_acc = 0.0;
  std::uint64_t comm_bits_total = 0;  // bits conveyed user->server, bit schemes
  double sigma_cell = 0.0;            // absolute cell distortion variance, round 0
  double sigma_normalized = 0.0;
  double calibrated_gamma = 0.0;
  bool bound_satisfied_all = true;
  FLConfig config;
};

namespace detail {

inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([=, &fn]() {
      for (int i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

inline double percentile_abs(std::vector<double> values, double pct) {
  for (double& v : values) v = std::fabs(v);
  std::sort(values.begin(), values.end());
  if (values.empty()) return 0.0;
  double rank = pct * static_cast<double>(values.size() - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  std::size_t hi = std::min(lo + 1, values.size() - 1);
  double frac = rank - static_cast<double>(lo);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

struct LoadedData {
  Dataset train, val, test;
};

inline LoadedData prepare_data(const FLConfig& cfg) {
  LoadedData out;
  if (!cfg.data.idx_images.empty()) {
    Dataset full = load_idx(cfg.data.idx_images, cfg.data.idx_labels);
    int n_test = std::min(cfg.data.n_test, full.n / 4);
    int n_val = std::min(cfg.data.n_val, full.n / 4);
    int n_train = full.n - n_test - n_val;
    auto slice = [&full](int from, int count) {
      Dataset d;
      d.n = count;
      d.f = full.f;
      d.classes = full.classes;
      d.features.assign(full.features.begin() + static_cast<std::ptrdiff_t>(from) * full.f,
                        full.features.begin() + static_cast<std::ptrdiff_t>(from + count) * full.f);
      d.labels.assign(full.labels.begin() + from, full.labels.begin() + from + count);
      return d;
    };
    out.train = slice(0, n_train);
    out.val = slice(n_train, n_val);
    out.test = slice(n_train + n_val, n_test);
    return out;
  }
  // One draw for all three splits so they share the class geometry; the
  // samples are i.i.d. by index, so contiguous slices are valid splits.
  const DataConfig& dc = cfg.data;
  int total = dc.n_train + dc.n_val + dc.n_test;
  Dataset full = gen_synthetic(total, dc.features, dc.classes, dc.separation,
                               detail::mix64(cfg.master_seed ^ 0x646174ull),
                               dc.normalize01);
  auto slice = [&full](int from, int count) {
    Dataset d;
    d.n = count;
    d.f = full.f;
    d.classes = full.classes;
    d.features.assign(full.features.begin() + static_cast<std::ptrdiff_t>(from) * full.f,
                      full.features.begin() + static_cast<std::ptrdiff_t>(from + count) * full.f);
    d.labels.assign(full.labels.begin() + from, full.labels.begin() + from + count);
    return d;
  };
  out.train = slice(0, dc.n_train);
  out.val = slice(dc.n_train, dc.n_val);
  out.test = slice(dc.n_train + dc.n_val, dc.n_test);
  return out;
}

}  // namespace detail

// Full deterministic FL run. Per round: local SGD at every user, scheme
// aggregation, metric computation against the shadow FedAvg reference built
// from the same local updates. The scheme's own global model feeds back into
// the next round; the shadow is re-anchored to it every round.
inline ExperimentResult run_experiment(
    const FLConfig& cfg,
    const std::function<void(const RoundMetrics&)>& on_round = {},
    const std::function<void(int, std::span<const double>)>& on_weights = {}) {
  {
    auto errs = validate_config(cfg);
    if (!errs.empty()) throw std::invalid_argument("config: " + errs.front());
  }

  detail::LoadedData data = detail::prepare_data(cfg);
  std::vector<Shard> shards =
      partition_uniform(data.train, cfg.users, cfg.per_user_samples, cfg.master_seed);

  Model model;
  model.kind = cfg.model;
  model.f = data.train.f;
  model.classes = data.train.classes;
  model.hidden = cfg.hidden;
  const int d = model.dim();

  LocalTask task{model, cfg.loss, cfg.loss == LossKind::least_squares ? cfg.rho_c : 0.0};
  std::vector<double> w = init_weights(model, cfg.master_seed);

  const int L = cfg.lattice_dim;
  const int m_count = subvector_count(d, L);
  LatticeSpec base = L == 1 ? make_scalar_lattice(1.0, cfg.rate)
                            : make_z2_lattice(1.0, cfg.rate);

  const bool bit_scheme = cfg.scheme == Scheme::cpa || cfg.scheme == Scheme::cpa_no_rr ||
                          cfg.scheme == Scheme::nested;
  PrivacyParams params = (cfg.scheme == Scheme::cpa_no_rr || cfg.scheme == Scheme::vanilla)
                             ? PrivacyParams::no_rr(base.count())
                             : PrivacyParams::from_epsilon(cfg.epsilon, base.count());

  const double phi = cfg.phi != 0.0
                         ? cfg.phi
                         : std::max(1.0, cfg.tau * std::max(1.0, 4.0 * cfg.rho_s / cfg.rho_c));
  auto eta_at = [&cfg, phi](int t) {
    return cfg.eta > 0.0 ? cfg.eta : step_size(static_cast<double>(t), cfg.tau, cfg.rho_c, phi);
  };

  const int n_attackers =
      cfg.attack == AttackKind::none
          ? 0
          : static_cast<int>(std::floor(cfg.attack_frac * cfg.users));

  ExperimentResult result;
  result.config = cfg;

  double zeta0 = cfg.gamma0;  // support radius of the round-0 lattice
  const double eta0 = eta_at(0);

  std::vector<std::vector<double>> updates(static_cast<std::size_t>(cfg.users));
  std::vector<EncodeResult> encoded(static_cast<std::size_t>(cfg.users));

  for (int t = 0; t < cfg.rounds; ++t) {
    const double eta_t = eta_at(t);

    detail::parallel_for(cfg.users, cfg.threads, [&](int r) {
      StreamRng rng = derive_stream(cfg.master_seed, static_cast<std::uint64_t>(r),
                                    static_cast<std::uint64_t>(t), 0, StreamPurpose::sgd);
      updates[static_cast<std::size_t>(r)] = local_sgd_steps(
          task, w, shards[static_cast<std::size_t>(r)], cfg.tau, eta_t, cfg.batch_size, rng);
    });

    if (t == 0 && zeta0 <= 0.0) {
      std::vector<double> pool;
      pool.reserve(static_cast<std::size_t>(cfg.users) * d);
      for (const auto& h : updates) pool.insert(pool.end(), h.begin(), h.end());
      zeta0 = cfg.calib_margin * detail::percentile_abs(std::move(pool), cfg.calib_percentile);
      if (!(zeta0 > 0.0)) zeta0 = 1e-9;
    }
    const double zeta_t = zeta0 * eta_t / eta0;
    LatticeSpec lat = scale_lattice(base, zeta_t);
    if (t == 0) {
      result.sigma_cell = lat.cell_distortion_variance();
      result.sigma_normalized = lat.second_moment_normalized();
      result.calibrated_gamma = lat.gamma;
    }

    std::vector<double> w_fa = fedavg_aggregate(updates, w);
    std::vector<double> w_next;
    int overloads = 0;
    double bound = 0.0;

    switch (cfg.scheme) {
      case Scheme::vanilla:
        w_next = w_fa;
        break;

      case Scheme::cpa:
      case Scheme::cpa_no_rr: {
        detail::parallel_for(cfg.users, cfg.threads, [&](int r) {
          EncodeSeeds seeds{cfg.master_seed, static_cast<std::uint32_t>(r),
                            static_cast<std::uint32_t>(t)};
          encoded[static_cast<std::size_t>(r)] = encode_update(
              updates[static_cast<std::size_t>(r)], lat, params, seeds, cfg.force_zero_dither);
          if (r < n_attackers) {
            StreamRng arng = derive_stream(cfg.master_seed, static_cast<std::uint64_t>(r),
                                           static_cast<std::uint64_t>(t), 0,
                                           StreamPurpose::attack);
            encoded[static_cast<std::size_t>(r)].message =
                inject_attack(encoded[static_cast<std::size_t>(r)].message, cfg.attack, arng);
          }
        });
        std::vector<BitMessage> messages(static_cast<std::size_t>(cfg.users));
        for (int r = 0; r < cfg.users; ++r) {
          messages[static_cast<std::size_t>(r)] = encoded[static_cast<std::size_t>(r)].message;
          overloads += encoded[static_cast<std::size_t>(r)].overload_count;
        }
        std::vector<Histogram> hists(static_cast<std::size_t>(m_count));
        detail::parallel_for(m_count, cfg.threads, [&](int i) {
          std::vector<Codeword> cws(static_cast<std::size_t>(cfg.users));
          for (int r = 0; r < cfg.users; ++r) {
            EncodeSeeds seeds{cfg.master_seed, static_cast<std::uint32_t>(r),
                              static_cast<std::uint32_t>(t)};
            cws[static_cast<std::size_t>(r)] = user_codeword(seeds, i, lat.count());
          }
          Histogram h = build_histogram(messages, cws, params.p, i);
          hists[static_cast<std::size_t>(i)] =
              cfg.clamp_negatives ? threshold_histogram(h) : std::move(h);
        });
        GlobalModel prev{w, t};
        w_next = cpa_update(prev, hists, lat).weights;
        bound = static_cast<double>(m_count) / cfg.users *
                (lat.sum_point_sq_norms() / ((2.0 * params.p - 1.0) * (2.0 * params.p - 1.0)) +
                 lat.cell_distortion_variance());
        result.comm_bits_total += static_cast<std::uint64_t>(cfg.users) * m_count;
        break;
      }

      case Scheme::nested: {
        NestedPair pair = split_nested(lat, cfg.rate_coarse, cfg.rate_nested);
        detail::parallel_for(cfg.users, cfg.threads, [&](int r) {
          EncodeSeeds seeds{cfg.master_seed, static_cast<std::uint32_t>(r),
                            static_cast<std::uint32_t>(t)};
          encoded[static_cast<std::size_t>(r)] = encode_update_nested(
              updates[static_cast<std::size_t>(r)], pair, params, seeds, cfg.force_zero_dither);
          if (r < n_attackers) {
            StreamRng arng = derive_stream(cfg.master_seed, static_cast<std::uint64_t>(r),
                                           static_cast<std::uint64_t>(t), 0,
                                           StreamPurpose::attack);
            encoded[static_cast<std::size_t>(r)].message =
                inject_attack(encoded[static_cast<std::size_t>(r)].message, cfg.attack, arng);
          }
        });
        std::vector<BitMessage> messages(static_cast<std::size_t>(cfg.users));
        for (int r = 0; r < cfg.users; ++r) {
          messages[static_cast<std::size_t>(r)] = encoded[static_cast<std::size_t>(r)].message;
          overloads += encoded[static_cast<std::size_t>(r)].overload_count;
        }
        std::vector<Histogram> coarse_h(static_cast<std::size_t>(m_count));
        std::vector<Histogram> nested_h(static_cast<std::size_t>(m_count));
        detail::parallel_for(m_count, cfg.threads, [&](int i) {
          std::vector<Codeword> cws_c(static_cast<std::size_t>(cfg.users));
          std::vector<Codeword> cws_n(static_cast<std::size_t>(cfg.users));
          for (int r = 0; r < cfg.users; ++r) {
            EncodeSeeds seeds{cfg.master_seed, static_cast<std::uint32_t>(r),
                              static_cast<std::uint32_t>(t)};
            cws_c[static_cast<std::size_t>(r)] = user_codeword(seeds, i, pair.coarse.count(), false);
            cws_n[static_cast<std::size_t>(r)] = user_codeword(seeds, i, pair.nested.count(), true);
          }
          Histogram hc = build_histogram(messages, cws_c, params.p, i, 0);
          Histogram hn = build_histogram(messages, cws_n, params.p, i, 1);
          coarse_h[static_cast<std::size_t>(i)] =
              cfg.clamp_negatives ? threshold_histogram(hc) : std::move(hc);
          nested_h[static_cast<std::size_t>(i)] =
              cfg.clamp_negatives ? threshold_histogram(hn) : std::move(hn);
        });
        GlobalModel prev{w, t};
        w_next = nested_cpa_update(prev, coarse_h, nested_h, pair).weights;
        double sq = pair.coarse.sum_point_sq_norms() + pair.nested.sum_point_sq_norms();
        bound = static_cast<double>(m_count) / cfg.users *
                (sq / ((2.0 * params.p - 1.0) * (2.0 * params.p - 1.0)) +
                 lat.cell_distortion_variance());
        result.comm_bits_total += static_cast<std::uint64_t>(cfg.users) * m_count * 2;
        break;
      }

      case Scheme::laplace: {
        std::vector<std::vector<double>> noisy(static_cast<std::size_t>(cfg.users));
        detail::parallel_for(cfg.users, cfg.threads, [&](int r) {
          StreamRng rng = derive_stream(cfg.master_seed, static_cast<std::uint64_t>(r),
                                        static_cast<std::uint64_t>(t), 0,
                                        StreamPurpose::laplace);
          noisy[static_cast<std::size_t>(r)] =
              laplace_mechanism(updates[static_cast<std::size_t>(r)], cfg.epsilon, lat.gamma, rng);
        });
        w_next = fedavg_aggregate(noisy, w);
        break;
      }

      case Scheme::signsgd_rr: {
        std::vector<std::vector<std::int8_t>> bit_rows(static_cast<std::size_t>(cfg.users));
        detail::parallel_for(cfg.users, cfg.threads, [&](int r) {
          StreamRng rng = derive_stream(cfg.master_seed, static_cast<std::uint64_t>(r),
                                        static_cast<std::uint64_t>(t), 0,
                                        StreamPurpose::signsgd_rr);
          bit_rows[static_cast<std::size_t>(r)] =
              signsgd_encode(updates[static_cast<std::size_t>(r)], params.p, rng);
        });
        std::vector<double> step = signsgd_aggregate(bit_rows, params.p, lat.spacing * 0.5);
        w_next = w;
        for (std::size_t j = 0; j < w_next.size(); ++j) w_next[j] += step[j];
        result.comm_bits_total += static_cast<std::uint64_t>(cfg.users) * d;
        break;
      }
    }

    RoundMetrics met;
    met.round = t;
    met.snr_db = compute_snr_db(w_fa, w_next);
    double mse = 0.0;
    for (std::size_t i = 0; i < w_fa.size(); ++i) {
      double diff = w_next[i] - w_fa[i];
      mse += diff * diff;
    }
    met.mse = mse;
    met.theorem1_bound = bound;
    met.overload_rate =
        bit_scheme ? static_cast<double>(overloads) / (static_cast<double>(cfg.users) * m_count)
                   : 0.0;
    met.val_accuracy = evaluate_accuracy(model, w_next, data.val);
    met.test_accuracy = evaluate_accuracy(model, w_next, data.test);
    if (bit_scheme && mse > bound) result.bound_satisfied_all = false;

    result.rounds.push_back(met);
    if (on_round) on_round(met);
    w = std::move(w_next);
    if (on_weights) on_weights(t, w);
  }

  result.final_val_acc = result.rounds.back().val_accuracy;
  result.final_test_acc = result.rounds.back().test_accuracy;
  return result;
}

inline std::string metrics_csv_header() {
  return "# cpa-fed metrics v1\nround,snr_db,mse,bound,overload_rate,val_acc,test_acc\n";
}

inline std::string metrics_csv_row(const RoundMetrics& m) {
  char line[192];
  std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", m.round,
                m.snr_db, m.mse, m.theorem1_bound, m.overload_rate, m.val_accuracy,
                m.test_accuracy);
  return line;
}

inline std::string metrics_to_csv(const ExperimentResult& result) {
  std::string out = metrics_csv_header();
  for (const auto& m : result.rounds) out += metrics_csv_row(m);
  return out;
}

inline double mean_snr_last_rounds(const ExperimentResult& result, int window) {
  int n = static_cast<int>(result.rounds.size());
  int from = std::max(0, n - window);
  double acc = 0.0;
  int cnt = 0;
  for (int i = from; i < n; ++i) {
    double v = result.rounds[static_cast<std::size_t>(i)].snr_db;
    if (std::isinf(v)) return v;
    acc += v;
    ++cnt;
  }
  return cnt > 0 ? acc / cnt : 0.0;
}

}  // namespace cpa

#endif  // CPA_FLSIM_HPP

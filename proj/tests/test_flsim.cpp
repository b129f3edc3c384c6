#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "cpa/flsim.hpp"

using namespace cpa;

namespace {

FLConfig small_cpa_config() {
  FLConfig cfg;
  cfg.users = 20;
  cfg.rounds = 3;
  cfg.tau = 2;
  cfg.eta = 0.05;
  cfg.scheme = Scheme::cpa;
  cfg.epsilon = 1.0;
  cfg.rate = 1;
  cfg.per_user_samples = 5;
  cfg.data.n_train = 200;
  cfg.data.n_val = 100;
  cfg.data.n_test = 100;
  cfg.data.features = 6;
  cfg.data.classes = 3;
  cfg.master_seed = 12;
  return cfg;
}

}  // namespace

TEST_CASE("step_size formula and decay") {
  const int tau = 4;
  const double rho_c = 2.0, phi = 8.0;
  CHECK(step_size(0, tau, rho_c, phi) == doctest::Approx(tau / (rho_c * phi)));
  double prev = step_size(0, tau, rho_c, phi);
  for (int t = 1; t < 200; ++t) {
    double cur = step_size(t, tau, rho_c, phi);
    CHECK(cur <= prev);
    prev = cur;
  }
  // eta_t <= 2 eta_{t+tau} whenever phi >= tau.
  for (int t = 0; t < 200; ++t)
    CHECK(step_size(t, tau, rho_c, phi) <= 2.0 * step_size(t + tau, tau, rho_c, phi));
  CHECK_THROWS(step_size(0, tau, 0.0, phi));
}

TEST_CASE("local sgd with zero steps returns a zero update") {
  Dataset ds = gen_synthetic(50, 4, 2, 2.0, 5);
  auto shards = partition_uniform(ds, 1, 10, 2);
  Model model{ModelKind::linear, 4, 2, 0};
  LocalTask task{model, LossKind::softmax_ce, 0.0};
  std::vector<double> w(static_cast<std::size_t>(model.dim()), 0.1);
  StreamRng rng(1);
  auto h = local_sgd_steps(task, w, shards[0], 0, 0.1, 1, rng);
  for (double v : h) CHECK(v == 0.0);
}

TEST_CASE("one full-batch step equals minus eta times the gradient") {
  Dataset ds = gen_synthetic(30, 4, 3, 2.0, 6);
  auto shards = partition_uniform(ds, 1, 30, 2);
  Model model{ModelKind::linear, 4, 3, 0};
  LocalTask task{model, LossKind::softmax_ce, 0.0};

  StreamRng wrng(3);
  std::vector<double> w(static_cast<std::size_t>(model.dim()));
  for (auto& v : w) v = wrng.uniform(-0.5, 0.5);

  const double eta = 0.07;
  StreamRng rng(1);
  auto h = local_sgd_steps(task, w, shards[0], 1, eta, 30, rng);

  std::vector<double> grad(w.size());
  loss_and_grad(model, w, ds, shards[0].indices, LossKind::softmax_ce, grad);
  for (std::size_t i = 0; i < w.size(); ++i)
    CHECK(h[i] == doctest::Approx(-eta * grad[i]).epsilon(1e-12));
}

TEST_CASE("fedavg aggregation") {
  std::vector<double> w = {1.0, -1.0};

  std::vector<std::vector<double>> one = {{0.5, 0.5}};
  auto r1 = fedavg_aggregate(one, w);
  CHECK(r1[0] == doctest::Approx(1.5));
  CHECK(r1[1] == doctest::Approx(-0.5));

  std::vector<std::vector<double>> same = {{0.2, 0.1}, {0.2, 0.1}, {0.2, 0.1}};
  auto r2 = fedavg_aggregate(same, w);
  CHECK(r2[0] == doctest::Approx(1.2));
  CHECK(r2[1] == doctest::Approx(-0.9));

  StreamRng rng(4);
  std::vector<std::vector<double>> updates(3, std::vector<double>(2));
  for (auto& h : updates)
    for (auto& v : h) v = rng.uniform(-1.0, 1.0);
  auto r3 = fedavg_aggregate(updates, w);
  for (int j = 0; j < 2; ++j) {
    double mean = (updates[0][static_cast<std::size_t>(j)] + updates[1][static_cast<std::size_t>(j)] +
                   updates[2][static_cast<std::size_t>(j)]) /
                  3.0;
    CHECK(r3[static_cast<std::size_t>(j)] == doctest::Approx(w[static_cast<std::size_t>(j)] + mean));
  }
}

TEST_CASE("laplace mechanism clips and calibrates noise") {
  StreamRng rng(9);
  std::vector<double> h = {5.0, -5.0, 0.3};
  auto clipped = laplace_mechanism(h, std::numeric_limits<double>::infinity(), 1.0, rng);
  CHECK(clipped[0] == doctest::Approx(1.0));
  CHECK(clipped[1] == doctest::Approx(-1.0));
  CHECK(clipped[2] == doctest::Approx(0.3));

  const double eps = 0.8, gamma = 1.0;
  const int n = 1000000;
  std::vector<double> zero(1, 0.0);
  double mean = 0, m2 = 0, m3 = 0;
  for (int i = 0; i < n; ++i) {
    double v = laplace_mechanism(zero, eps, gamma, rng)[0];
    mean += v;
    m2 += v * v;
    m3 += v * v * v;
  }
  mean /= n;
  m2 = m2 / n - mean * mean;
  double b = 2.0 * gamma / eps;
  CHECK(m2 == doctest::Approx(2.0 * b * b).epsilon(0.02));
  double skew = (m3 / n) / std::pow(m2, 1.5);
  CHECK(std::fabs(skew) < 0.02);
}

TEST_CASE("attack injection") {
  BitMessage msg;
  msg.bits.assign(10000, -1);

  StreamRng rng(3);
  BitMessage ones = inject_attack(msg, AttackKind::ones, rng);
  for (auto b : ones.bits) CHECK(b == +1);

  StreamRng r1(5), r2(5);
  BitMessage f1 = inject_attack(msg, AttackKind::flip, r1);
  BitMessage f2 = inject_attack(msg, AttackKind::flip, r2);
  CHECK(f1.bits == f2.bits);  // deterministic per stream

  int flipped = 0;
  for (std::size_t i = 0; i < msg.bits.size(); ++i)
    if (f1.bits[i] != msg.bits[i]) ++flipped;
  CHECK(double(flipped) / 10000.0 == doctest::Approx(0.5).epsilon(0.06));

  BitMessage none = inject_attack(msg, AttackKind::none, rng);
  CHECK(none.bits == msg.bits);
}

TEST_CASE("snr closed-form cases") {
  std::vector<double> w_fa = {0.0, 2.0, -1.0, 3.0, 0.5, -2.5};

  // Distortion proportional to the signal: ratio of variances is exact.
  std::vector<double> w_cpa(w_fa.size());
  for (std::size_t i = 0; i < w_fa.size(); ++i) w_cpa[i] = 0.9 * w_fa[i];
  CHECK(compute_snr_db(w_fa, w_cpa) == doctest::Approx(20.0));

  CHECK(std::isinf(compute_snr_db(w_fa, w_fa)));

  // Distortion with exactly the signal's variance.
  std::vector<double> w0(w_fa.size(), 0.0);
  CHECK(compute_snr_db(w_fa, w0) == doctest::Approx(0.0));
}

TEST_CASE("signsgd debiased votes") {
  // Unanimous signs at p = 1: every coordinate of the update matches.
  {
    std::vector<std::vector<double>> updates = {{0.4, -0.2, 0.9}, {0.1, -0.7, 0.3}};
    std::vector<std::vector<std::int8_t>> rows;
    StreamRng rng(1);
    for (const auto& h : updates) rows.push_back(signsgd_encode(h, 1.0, rng));
    auto step = signsgd_aggregate(rows, 1.0, 0.5);
    CHECK(step[0] == doctest::Approx(0.5));
    CHECK(step[1] == doctest::Approx(-0.5));
    CHECK(step[2] == doctest::Approx(0.5));
  }

  // Debiased single-coordinate vote concentrates around the true sign.
  {
    const double p = 0.75;
    const int k_users = 1000;
    StreamRng rng(8);
    std::vector<double> h = {0.3};
    std::vector<std::vector<std::int8_t>> rows;
    for (int r = 0; r < k_users; ++r) rows.push_back(signsgd_encode(h, p, rng));
    double mean = signsgd_aggregate(rows, p, 1.0)[0];
    double sd = std::sqrt((1.0 / ((2 * p - 1) * (2 * p - 1)) - 1.0) / k_users);
    CHECK(std::fabs(mean - 1.0) < 4.0 * sd);
  }

  // The debiased estimate variance grows as 1 / (2p - 1)^2.
  {
    std::vector<double> h = {1.0};
    auto variance_at = [&h](double p, std::uint64_t seed) {
      StreamRng rng(seed);
      const int n = 40000;
      double m = 0.0, m2 = 0.0;
      for (int i = 0; i < n; ++i) {
        std::vector<std::vector<std::int8_t>> rows = {signsgd_encode(h, p, rng)};
        double v = signsgd_aggregate(rows, p, 1.0)[0];
        m += v;
        m2 += v * v;
      }
      m /= n;
      return m2 / n - m * m;
    };
    // var = 1/(2p-1)^2 - 1; the ratio between two p values pins the scaling.
    double v6 = variance_at(0.6, 2);
    double v8 = variance_at(0.8, 3);
    double expect = (1.0 / (0.2 * 0.2) - 1.0) / (1.0 / (0.6 * 0.6) - 1.0);
    CHECK(v6 / v8 == doctest::Approx(expect).epsilon(0.1));
  }

  // End to end through the scheme dispatcher.
  FLConfig cfg = small_cpa_config();
  cfg.scheme = Scheme::signsgd_rr;
  cfg.epsilon = 100.0;
  auto result = run_experiment(cfg);
  CHECK(result.rounds.size() == 3);
}

TEST_CASE("vanilla scheme matches the shadow reference exactly") {
  FLConfig cfg = small_cpa_config();
  cfg.scheme = Scheme::vanilla;
  auto result = run_experiment(cfg);
  for (const auto& m : result.rounds) {
    CHECK(std::isinf(m.snr_db));
    CHECK(m.mse == 0.0);
  }
}

TEST_CASE("metrics are identical across thread counts") {
  FLConfig cfg = small_cpa_config();
  cfg.threads = 1;
  auto a = run_experiment(cfg);
  cfg.threads = 4;
  auto b = run_experiment(cfg);
  CHECK(metrics_to_csv(a) == metrics_to_csv(b));
}

TEST_CASE("per-round communication bits") {
  FLConfig cfg = small_cpa_config();
  auto result = run_experiment(cfg);
  const int d = 6 * 3 + 3;  // linear model dimension
  CHECK(result.comm_bits_total ==
        static_cast<std::uint64_t>(cfg.users) * d * cfg.rounds);

  cfg.scheme = Scheme::nested;
  cfg.rate = 4;
  cfg.rate_coarse = 1;
  cfg.rate_nested = 3;
  auto nested = run_experiment(cfg);
  CHECK(nested.comm_bits_total ==
        static_cast<std::uint64_t>(cfg.users) * d * cfg.rounds * 2);
}

TEST_CASE("lossless configuration reproduces pure quantization error") {
  // p = 1, zero dither, 2-point lattice: the decode is exact, so the round
  // MSE must equal the quantization error of the averaged updates, computed
  // here by a brute-force replica of the round.
  FLConfig cfg;
  cfg.users = 5;
  cfg.rounds = 3;
  cfg.tau = 1;
  cfg.eta = 0.1;
  cfg.scheme = Scheme::cpa_no_rr;
  cfg.rate = 1;
  cfg.gamma0 = 1.0;
  cfg.force_zero_dither = true;
  cfg.per_user_samples = 4;
  cfg.data.n_train = 40;
  cfg.data.n_val = 20;
  cfg.data.n_test = 20;
  cfg.data.features = 2;
  cfg.data.classes = 2;
  cfg.master_seed = 77;

  auto result = run_experiment(cfg);

  // Replica of the trajectory from the same streams; the training split is
  // the leading slice of the shared draw.
  Dataset full = gen_synthetic(cfg.data.n_train + cfg.data.n_val + cfg.data.n_test,
                               cfg.data.features, cfg.data.classes, cfg.data.separation,
                               detail::mix64(cfg.master_seed ^ 0x646174ull));
  Dataset train;
  train.n = cfg.data.n_train;
  train.f = full.f;
  train.classes = full.classes;
  train.features.assign(full.features.begin(),
                        full.features.begin() + static_cast<std::ptrdiff_t>(train.n) * full.f);
  train.labels.assign(full.labels.begin(), full.labels.begin() + train.n);
  auto shards = partition_uniform(train, cfg.users, cfg.per_user_samples, cfg.master_seed);
  Model model{ModelKind::linear, cfg.data.features, cfg.data.classes, 0};
  LocalTask task{model, LossKind::softmax_ce, 0.0};
  LatticeSpec lat = make_scalar_lattice(cfg.gamma0, cfg.rate);
  std::vector<double> w(static_cast<std::size_t>(model.dim()), 0.0);

  for (int t = 0; t < cfg.rounds; ++t) {
    std::vector<std::vector<double>> updates(static_cast<std::size_t>(cfg.users));
    for (int r = 0; r < cfg.users; ++r) {
      StreamRng rng = derive_stream(cfg.master_seed, static_cast<std::uint64_t>(r),
                                    static_cast<std::uint64_t>(t), 0, StreamPurpose::sgd);
      updates[static_cast<std::size_t>(r)] =
          local_sgd_steps(task, w, shards[static_cast<std::size_t>(r)], cfg.tau, cfg.eta,
                          cfg.batch_size, rng);
    }
    std::vector<double> w_fa = fedavg_aggregate(updates, w);
    std::vector<double> w_q = w;
    double mse = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      double mean_q = 0.0;
      for (int r = 0; r < cfg.users; ++r) {
        double x = updates[static_cast<std::size_t>(r)][j];
        mean_q += quantize_nearest(lat, {&x, 1}).point[0] / cfg.users;
      }
      w_q[j] += mean_q;
      double diff = w_q[j] - w_fa[j];
      mse += diff * diff;
    }
    CHECK(result.rounds[static_cast<std::size_t>(t)].mse == doctest::Approx(mse).epsilon(1e-9));
    w = std::move(w_q);
  }
}

TEST_CASE("config validation rejects bad configurations") {
  FLConfig cfg = small_cpa_config();
  CHECK(validate_config(cfg).empty());

  FLConfig bad = cfg;
  bad.users = 0;
  CHECK(!validate_config(bad).empty());

  bad = cfg;
  bad.epsilon = 0.0;
  CHECK(!validate_config(bad).empty());

  bad = cfg;
  bad.scheme = Scheme::laplace;
  bad.attack = AttackKind::flip;
  bad.attack_frac = 0.2;
  CHECK(!validate_config(bad).empty());

  bad = cfg;
  bad.attack = AttackKind::ones;
  bad.attack_frac = 1.0;
  CHECK(!validate_config(bad).empty());

  bad = cfg;
  bad.scheme = Scheme::nested;
  bad.rate = 3;
  bad.rate_coarse = 1;
  bad.rate_nested = 3;
  CHECK(!validate_config(bad).empty());

  bad = cfg;
  bad.eta = 0.0;
  bad.rho_c = 1.0;
  bad.rho_s = 1.0;
  bad.phi = 1.0;  // below tau * max(1, 4 rho_s / rho_c) = 8
  CHECK(!validate_config(bad).empty());
}

TEST_CASE("flip attacks keep the model close to the clean run") {
  FLConfig cfg = small_cpa_config();
  cfg.users = 60;
  cfg.rounds = 6;
  auto clean = run_experiment(cfg);

  cfg.attack = AttackKind::flip;
  cfg.attack_frac = 0.2;
  auto attacked = run_experiment(cfg);
  // Flipped bits decode to zero-mean noise; the run must stay finite and
  // produce sane accuracy values.
  CHECK(attacked.final_test_acc > 0.0);
  CHECK(attacked.final_test_acc <= 100.0);
  CHECK(std::isfinite(attacked.rounds.back().mse));
  CHECK(clean.final_test_acc <= 100.0);
}

TEST_CASE("decaying schedule keeps the scaled objective bounded") {
  // rho_c-strongly-convex least squares under the decaying step size and the
  // proportionally decaying lattice: (F(w_t) - F*) (t + phi) must not diverge.
  FLConfig cfg;
  cfg.users = 10;
  cfg.rounds = 60;
  cfg.tau = 2;
  cfg.eta = 0.0;  // schedule mode
  cfg.rho_c = 1.0;
  cfg.rho_s = 8.0;
  cfg.phi = 0.0;  // auto: tau * max(1, 4 rho_s / rho_c) = 64
  cfg.scheme = Scheme::cpa;
  cfg.epsilon = 2.0;
  cfg.rate = 1;
  cfg.batch_size = 1;
  cfg.per_user_samples = 6;
  cfg.model = ModelKind::linear;
  cfg.loss = LossKind::least_squares;
  cfg.data.n_train = 60;
  cfg.data.n_val = 20;
  cfg.data.n_test = 20;
  cfg.data.features = 4;
  cfg.data.classes = 2;

  const double phi = cfg.tau * std::max(1.0, 4.0 * cfg.rho_s / cfg.rho_c);

  int diverged = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    cfg.master_seed = seed;

    Dataset full = gen_synthetic(cfg.data.n_train + cfg.data.n_val + cfg.data.n_test,
                                 cfg.data.features, cfg.data.classes, cfg.data.separation,
                                 detail::mix64(seed ^ 0x646174ull));
    Dataset train;
    train.n = cfg.data.n_train;
    train.f = full.f;
    train.classes = full.classes;
    train.features.assign(full.features.begin(),
                          full.features.begin() + static_cast<std::ptrdiff_t>(train.n) * full.f);
    train.labels.assign(full.labels.begin(), full.labels.begin() + train.n);
    Model model{ModelKind::linear, cfg.data.features, cfg.data.classes, 0};
    std::vector<int> all(static_cast<std::size_t>(train.n));
    std::iota(all.begin(), all.end(), 0);

    auto objective = [&](std::span<const double> wv) {
      std::vector<double> g(wv.size());
      return loss_and_grad(model, wv, train, all, LossKind::least_squares, g, cfg.rho_c);
    };

    // Oracle minimum by full-batch gradient descent on the quadratic.
    std::vector<double> wstar(static_cast<std::size_t>(model.dim()), 0.0);
    {
      std::vector<double> g(wstar.size());
      for (int it = 0; it < 20000; ++it) {
        loss_and_grad(model, wstar, train, all, LossKind::least_squares, g, cfg.rho_c);
        for (std::size_t i = 0; i < wstar.size(); ++i) wstar[i] -= 0.05 * g[i];
      }
    }
    const double f_star = objective(wstar);

    std::vector<double> scaled;
    run_experiment(cfg, {}, [&](int t, std::span<const double> w) {
      scaled.push_back((objective(w) - f_star) * (t + phi));
    });

    double early = 0.0, late = 0.0;
    for (int t = 0; t < cfg.rounds / 2; ++t) early = std::max(early, scaled[static_cast<std::size_t>(t)]);
    for (int t = cfg.rounds / 2; t < cfg.rounds; ++t) late = std::max(late, scaled[static_cast<std::size_t>(t)]);
    if (late > 2.0 * early + 1e-9) ++diverged;
  }
  CHECK(diverged <= 1);
}

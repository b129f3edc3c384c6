#ifndef CPA_RNG_HPP
#define CPA_RNG_HPP

#include <cmath>
#include <cstdint>

namespace cpa {

// Purpose tags keep the randomness consumed by different pipeline stages in
// mutually independent streams, so e.g. codebook draws never alias dither
// draws for the same (user, round, subvector) tuple.
enum class StreamPurpose : std::uint64_t {
  codebook = 1,
  dither = 2,
  rr = 3,
  codebook_nested = 4,
  rr_nested = 5,
  data = 6,
  attack = 7,
  model_init = 8,
  sgd = 9,
  laplace = 10,
  signsgd_rr = 11,
  partition = 12,
};

namespace detail {

// SplitMix64 finalizer. Stateless, portable, and good enough statistically
// for simulation streams.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t combine(std::uint64_t key, std::uint64_t word) {
  return mix64(key ^ (word + 0x9E3779B97F4A7C15ull + (key << 6) + (key >> 2)));
}

}  // namespace detail

// Counter-based deterministic generator. A stream is fully determined by its
// 64-bit key; no state is handed between callers, so any stream can be
// re-derived anywhere (user, server, tests) and across thread schedules.
class StreamRng {
 public:
  explicit StreamRng(std::uint64_t key) : state_(detail::mix64(key)) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1]; used where the left endpoint must be open.
  double uniform_oc() { return 1.0 - uniform01(); }

  // Uniform on (lo, hi].
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_oc(); }

  bool bernoulli(double p) { return uniform01() < p; }

  // Uniform integer in [0, n). Multiply-shift; bias is O(n / 2^64).
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller. Platform-independent, unlike
  // std::normal_distribution.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform_oc();
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Zero-mean Laplace with scale b (variance 2 b^2), via inverse CDF.
  double laplace(double b) {
    double u = uniform_oc() - 0.5;  // (-1/2, 1/2]
    double s = (u >= 0.0) ? 1.0 : -1.0;
    return -b * s * std::log1p(-2.0 * std::fabs(u));
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Derives the deterministic stream for one (seed, user, round, subvector,
// purpose) tuple. Same tuple -> same stream, on every platform and thread
// schedule.
inline StreamRng derive_stream(std::uint64_t master_seed, std::uint64_t user_id,
                               std::uint64_t round, std::uint64_t subvec_index,
                               StreamPurpose purpose) {
  std::uint64_t k = detail::mix64(master_seed);
  k = detail::combine(k, user_id);
  k = detail::combine(k, round);
  k = detail::combine(k, subvec_index);
  k = detail::combine(k, static_cast<std::uint64_t>(purpose));
  return StreamRng(k);
}

}  // namespace cpa

#endif  // CPA_RNG_HPP

#ifndef CPA_LATTICE_HPP
#define CPA_LATTICE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "cpa/rng.hpp"

namespace cpa {

// Finite lattice quantizer: the 2^{L*R} reproduction points of a cubic
// lattice with spacing `delta`, restricted to the support sphere of radius
// `gamma`. Points are the symmetric half-step levels
//
//   delta * (j + 1/2 - 2^{R-1})  per axis,  j = 0 .. 2^R - 1,
//
// so the set is sign-symmetric for every rate, the extreme level sits at
// +/-(gamma_axis - delta/2), and a coarse/nested split of the same family
// tiles the fine set exactly. The point list is sorted lexicographically by
// coordinates; indices are 0-based and stable across platforms.
struct LatticeSpec {
  int dim = 1;                 // L
  int bits_per_axis = 1;       // R per axis; total rate is dim * R bits
  double gamma = 1.0;          // support sphere radius
  double gamma_axis = 1.0;     // per-axis half range (= gamma / sqrt(dim))
  double spacing = 1.0;        // delta
  std::vector<double> points;  // count() * dim, lex sorted

  int count() const { return static_cast<int>(points.size()) / dim; }
  int levels_per_axis() const { return 1 << bits_per_axis; }
  double rate() const { return static_cast<double>(bits_per_axis); }

  std::span<const double> point(int index) const {
    return {points.data() + static_cast<std::size_t>(index) * dim,
            static_cast<std::size_t>(dim)};
  }

  // E[||u||^2] for u uniform on the spacing cell: the absolute distortion
  // variance of one dithered sub-vector.
  double cell_distortion_variance() const {
    return dim * spacing * spacing / 12.0;
  }

  // Dimensionless second moment of the cubic cell (1/12 for any scaling).
  double second_moment_normalized() const { return 1.0 / 12.0; }

  // Sum of ||q^l||^2 over all reproduction points.
  double sum_point_sq_norms() const {
    double s = 0.0;
    for (double v : points) s += v * v;
    return s;
  }
};

namespace detail {

inline double axis_level(double delta, int levels, int j) {
  return delta * (static_cast<double>(j) + 0.5 - 0.5 * levels);
}

// Nearest level index on one axis, ties to the smaller index.
inline int nearest_axis_index(double x, double delta, int levels) {
  double t = x / delta + 0.5 * levels - 0.5;  // level j sits at t == j
  int j = static_cast<int>(std::floor(t + 0.5));
  j = std::clamp(j, 0, levels - 1);
  // Resolve the boundary against the neighbours explicitly so ties follow the
  // smallest-index rule regardless of how floor rounded.
  double best = std::fabs(x - axis_level(delta, levels, j));
  if (j > 0) {
    double d = std::fabs(x - axis_level(delta, levels, j - 1));
    if (d <= best) {
      best = d;
      j = j - 1;
    }
  }
  if (j + 1 < levels) {
    double d = std::fabs(x - axis_level(delta, levels, j + 1));
    if (d < best) j = j + 1;
  }
  return j;
}

}  // namespace detail

// Mid-range scalar uniform quantizer with support gamma and rate R:
// spacing delta = 2*gamma / 2^R, levels at the half-step multiples.
inline LatticeSpec make_scalar_lattice(double gamma, int rate_bits) {
  if (gamma <= 0.0) throw std::invalid_argument("lattice: gamma must be > 0");
  if (rate_bits < 1) throw std::invalid_argument("lattice: rate must be >= 1");
  if (rate_bits > 20) throw std::invalid_argument("lattice: rate too large");
  LatticeSpec lat;
  lat.dim = 1;
  lat.bits_per_axis = rate_bits;
  lat.gamma = gamma;
  lat.gamma_axis = gamma;
  int n = 1 << rate_bits;
  lat.spacing = 2.0 * gamma / n;
  lat.points.resize(n);
  for (int j = 0; j < n; ++j) lat.points[j] = detail::axis_level(lat.spacing, n, j);
  return lat;
}

// Z^2 lattice (generator delta * I_2) restricted to the sphere of radius
// gamma: the product of two scalar quantizers with per-axis half range
// gamma / sqrt(2), so every product point stays inside the sphere.
inline LatticeSpec make_z2_lattice(double gamma, int rate_bits_per_axis) {
  if (gamma <= 0.0) throw std::invalid_argument("lattice: gamma must be > 0");
  if (rate_bits_per_axis < 1) throw std::invalid_argument("lattice: rate must be >= 1");
  LatticeSpec lat;
  lat.dim = 2;
  lat.bits_per_axis = rate_bits_per_axis;
  lat.gamma = gamma;
  lat.gamma_axis = gamma / std::sqrt(2.0);
  int n = 1 << rate_bits_per_axis;
  lat.spacing = 2.0 * lat.gamma_axis / n;
  lat.points.resize(static_cast<std::size_t>(n) * n * 2);
  std::size_t w = 0;
  for (int j0 = 0; j0 < n; ++j0) {
    for (int j1 = 0; j1 < n; ++j1) {
      lat.points[w++] = detail::axis_level(lat.spacing, n, j0);
      lat.points[w++] = detail::axis_level(lat.spacing, n, j1);
    }
  }
  return lat;
}

struct QuantizeResult {
  int index = 0;               // 0-based index into the point list
  std::vector<double> point;   // the reproduction point, dim entries
};

// Nearest reproduction point; total on finite inputs, out-of-support inputs
// map to the nearest in-support point. Ties go to the smallest index. For the
// cubic family the axes decouple, and per-axis smallest-index ties coincide
// with the lexicographically smallest minimiser.
inline QuantizeResult quantize_nearest(const LatticeSpec& lat,
                                       std::span<const double> x) {
  if (static_cast<int>(x.size()) != lat.dim)
    throw std::invalid_argument("quantize: dimension mismatch");
  int levels = lat.levels_per_axis();
  int index = 0;
  QuantizeResult out;
  out.point.resize(lat.dim);
  for (int a = 0; a < lat.dim; ++a) {
    int j = detail::nearest_axis_index(x[a], lat.spacing, levels);
    index = index * levels + j;
    out.point[a] = detail::axis_level(lat.spacing, levels, j);
  }
  out.index = index;
  // Re-read coordinates from the stored list so callers get bit-identical
  // values to lat.point(index).
  auto p = lat.point(index);
  std::copy(p.begin(), p.end(), out.point.begin());
  return out;
}

// Uniform sample on the spacing cell translated to the origin:
// (-delta/2, delta/2] per axis.
inline void dither_sample(const LatticeSpec& lat, StreamRng& rng,
                          std::span<double> out) {
  for (int a = 0; a < lat.dim; ++a)
    out[a] = lat.spacing * (rng.uniform_oc() - 0.5);
}

struct DitheredResult {
  int index = 0;
  std::vector<double> point;
  bool overloaded = false;  // ||x + u|| exceeded the support sphere
};

// Quantizes x + u for dither u uniform on the spacing cell. Non-subtractive:
// the decoder never sees per-user values, so nothing is subtracted back.
// Overload is clamped by the nearest-point rule and reported.
inline DitheredResult dithered_quantize(const LatticeSpec& lat,
                                        std::span<const double> x,
                                        StreamRng& rng,
                                        bool zero_dither = false) {
  double buf[8];
  if (lat.dim > 8) throw std::invalid_argument("quantize: dim too large");
  double norm_sq = 0.0;
  for (int a = 0; a < lat.dim; ++a) {
    double u = zero_dither ? 0.0 : lat.spacing * (rng.uniform_oc() - 0.5);
    buf[a] = x[a] + u;
    norm_sq += buf[a] * buf[a];
  }
  QuantizeResult q = quantize_nearest(lat, {buf, static_cast<std::size_t>(lat.dim)});
  DitheredResult out;
  out.index = q.index;
  out.point = std::move(q.point);
  out.overloaded = norm_sq > lat.gamma * lat.gamma;
  return out;
}

// All geometry scaled by zeta; indices and counts unchanged.
inline LatticeSpec scale_lattice(const LatticeSpec& lat, double zeta) {
  if (zeta <= 0.0) throw std::invalid_argument("lattice: zeta must be > 0");
  LatticeSpec out = lat;
  out.gamma *= zeta;
  out.gamma_axis *= zeta;
  out.spacing *= zeta;
  for (double& v : out.points) v *= zeta;
  return out;
}

// Monte Carlo estimate of the normalized second moment over the spacing
// cell. Cubic cells have the closed form 1/12; this exists to validate the
// closed form and to handle any future non-product cell.
struct MomentEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

inline MomentEstimate lattice_second_moment_mc(const LatticeSpec& lat,
                                               std::size_t samples,
                                               StreamRng& rng) {
  double mean = 0.0, m2 = 0.0;
  std::vector<double> u(lat.dim);
  for (std::size_t i = 1; i <= samples; ++i) {
    dither_sample(lat, rng, u);
    double nsq = 0.0;
    for (double v : u) nsq += v * v;
    // Normalize per sample: (1/L) ||u||^2 / vol^{2/L}, averaged over the cell.
    double vol_pow = lat.spacing * lat.spacing;  // vol^{2/L} for cubic cells
    double val = nsq / (lat.dim * vol_pow);
    double d = val - mean;
    mean += d / static_cast<double>(i);
    m2 += d * (val - mean);
  }
  MomentEstimate est;
  est.value = mean;
  est.std_error = samples > 1
                      ? std::sqrt(m2 / (static_cast<double>(samples) - 1.0) /
                                  static_cast<double>(samples))
                      : 0.0;
  return est;
}

// Fine quantizer expressed as a coarse stage plus a nested codebook confined
// to the coarse spacing cell. Every fine index m decomposes uniquely as
// m = l_c * 2^{L*R_n} ... per axis: j_fine = j_coarse * 2^{R_n} + j_nested.
struct NestedPair {
  LatticeSpec fine;
  LatticeSpec coarse;   // rate R_c on the same support
  LatticeSpec nested;   // rate R_n inside the coarse spacing cell
  int rate_coarse = 1;
  int rate_nested = 1;
};

inline NestedPair split_nested(const LatticeSpec& fine, int rate_coarse,
                               int rate_nested) {
  if (rate_coarse < 1 || rate_nested < 1)
    throw std::invalid_argument("split_nested: both stage rates must be >= 1");
  if (rate_coarse + rate_nested != fine.bits_per_axis)
    throw std::invalid_argument("split_nested: stage rates must sum to the fine rate");
  NestedPair pair;
  pair.fine = fine;
  pair.rate_coarse = rate_coarse;
  pair.rate_nested = rate_nested;

  pair.coarse = fine;
  pair.coarse.bits_per_axis = rate_coarse;
  int nc = 1 << rate_coarse;
  int nn = 1 << rate_nested;
  pair.coarse.spacing = fine.spacing * nn;  // integer multiple of fine spacing
  {
    int total = 1;
    for (int a = 0; a < fine.dim; ++a) total *= nc;
    pair.coarse.points.resize(static_cast<std::size_t>(total) * fine.dim);
    // Product enumeration in lex order, reusing the axis formula.
    std::vector<int> idx(fine.dim, 0);
    std::size_t w = 0;
    for (int flat = 0; flat < total; ++flat) {
      int rem = flat;
      for (int a = fine.dim - 1; a >= 0; --a) {
        idx[a] = rem % nc;
        rem /= nc;
      }
      for (int a = 0; a < fine.dim; ++a)
        pair.coarse.points[w++] = detail::axis_level(pair.coarse.spacing, nc, idx[a]);
    }
  }

  pair.nested = fine;
  pair.nested.bits_per_axis = rate_nested;
  pair.nested.spacing = fine.spacing;
  pair.nested.gamma = pair.coarse.spacing * 0.5 * std::sqrt(double(fine.dim));
  pair.nested.gamma_axis = pair.coarse.spacing * 0.5;
  {
    int total = 1;
    for (int a = 0; a < fine.dim; ++a) total *= nn;
    pair.nested.points.resize(static_cast<std::size_t>(total) * fine.dim);
    std::vector<int> idx(fine.dim, 0);
    std::size_t w = 0;
    for (int flat = 0; flat < total; ++flat) {
      int rem = flat;
      for (int a = fine.dim - 1; a >= 0; --a) {
        idx[a] = rem % nn;
        rem /= nn;
      }
      for (int a = 0; a < fine.dim; ++a)
        pair.nested.points[w++] = detail::axis_level(fine.spacing, nn, idx[a]);
    }
  }
  return pair;
}

struct NestedQuantizeResult {
  int coarse_index = 0;
  int nested_index = 0;
  bool overloaded = false;
};

// Two-stage quantization: one dither drawn on the fine cell, coarse index of
// the dithered value, nested index of the residual. For this lattice family
// the reconstruction q_c + q_n coincides with the fine dithered quantizer for
// every input and dither draw (same index decomposition, same saturation).
inline NestedQuantizeResult nested_quantize(const NestedPair& pair,
                                            std::span<const double> x,
                                            StreamRng& rng,
                                            bool zero_dither = false) {
  const LatticeSpec& fine = pair.fine;
  if (static_cast<int>(x.size()) != fine.dim)
    throw std::invalid_argument("quantize: dimension mismatch");
  double buf[8];
  if (fine.dim > 8) throw std::invalid_argument("quantize: dim too large");
  double norm_sq = 0.0;
  for (int a = 0; a < fine.dim; ++a) {
    double u = zero_dither ? 0.0 : fine.spacing * (rng.uniform_oc() - 0.5);
    buf[a] = x[a] + u;
    norm_sq += buf[a] * buf[a];
  }
  QuantizeResult qc =
      quantize_nearest(pair.coarse, {buf, static_cast<std::size_t>(fine.dim)});
  double res[8];
  for (int a = 0; a < fine.dim; ++a) res[a] = buf[a] - qc.point[a];
  QuantizeResult qn =
      quantize_nearest(pair.nested, {res, static_cast<std::size_t>(fine.dim)});
  NestedQuantizeResult out;
  out.coarse_index = qc.index;
  out.nested_index = qn.index;
  out.overloaded = norm_sq > fine.gamma * fine.gamma;
  return out;
}

// Time-varying lattice scale: zeta_t must satisfy zeta_t^2 <= C * eta_t^2.
struct LatticeSchedule {
  LatticeSpec base;
  std::vector<double> zeta;  // per configured round
  double bound_constant = 1.0;
};

inline void validate_schedule(const LatticeSchedule& sched,
                              std::span<const double> eta) {
  if (sched.zeta.size() > eta.size())
    throw std::invalid_argument("schedule: more zeta entries than step sizes");
  for (std::size_t t = 0; t < sched.zeta.size(); ++t) {
    if (sched.zeta[t] <= 0.0)
      throw std::invalid_argument("schedule: zeta must be positive");
    if (sched.zeta[t] * sched.zeta[t] >
        sched.bound_constant * eta[t] * eta[t] * (1.0 + 1e-12))
      throw std::invalid_argument("schedule: zeta_t^2 exceeds C * eta_t^2");
  }
}

}  // namespace cpa

#endif  // CPA_LATTICE_HPP

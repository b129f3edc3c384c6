#ifndef CPA_AGGREGATE_HPP
#define CPA_AGGREGATE_HPP

#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpa/codec.hpp"
#include "cpa/lattice.hpp"

namespace cpa {

enum class NegativesPolicy { keep, clamp };

// Debiased empirical codeword-frequency histogram for one sub-vector: one
// real value per lattice point, may contain negatives under the keep policy.
struct Histogram {
  std::vector<double> values;
  int round = 0;
  int subvec = 0;
  NegativesPolicy policy = NegativesPolicy::keep;
};

// Averages the per-user debiased codeword estimates in ascending user order.
//
// An exactly balanced codeword has entrywise covariance -1/(N-1) between
// distinct positions, so the raw average of +/- cw/(2p-1) estimates is
// entrywise biased for the index frequencies. The affine map
//   v  ->  (N-1)/N * v + 1/N
// removes that bias: E[values_l] equals the frequency of true index l, and
// the histogram sums to exactly 1 under the keep policy.
inline Histogram build_histogram(std::span<const BitMessage> messages,
                                 std::span<const Codeword> codewords, double p,
                                 int subvec_index, int nested_stage = -1) {
  if (messages.empty()) throw std::invalid_argument("histogram: no messages");
  if (messages.size() != codewords.size())
    throw std::invalid_argument("histogram: message/codeword count mismatch");
  if (!(p > 0.5))
    throw std::invalid_argument("histogram: p must exceed 1/2");

  const int n = codewords[0].size();
  const double k_users = static_cast<double>(messages.size());
  const double scale = 1.0 / ((2.0 * p - 1.0) * k_users) *
                       (static_cast<double>(n - 1) / static_cast<double>(n));

  Histogram hist;
  hist.round = static_cast<int>(messages[0].round);
  hist.subvec = subvec_index;
  hist.values.assign(static_cast<std::size_t>(n), 1.0 / static_cast<double>(n));

  for (std::size_t r = 0; r < messages.size(); ++r) {
    const BitMessage& msg = messages[r];
    if (static_cast<int>(msg.round) != hist.round)
      throw std::invalid_argument("histogram: messages from mixed rounds");
    const Codeword& cw = codewords[r];
    if (cw.size() != n)
      throw std::invalid_argument("histogram: codeword size mismatch");

    int at;
    if (nested_stage < 0) {
      at = subvec_index;
    } else {
      at = 2 * subvec_index + nested_stage;  // coarse bit, then nested bit
    }
    if (at >= msg.bit_count())
      throw std::invalid_argument("histogram: sub-vector index out of range");
    const double sign = msg.bits[static_cast<std::size_t>(at)] > 0 ? 1.0 : -1.0;
    const double w = sign * scale;
    for (int l = 0; l < n; ++l)
      hist.values[static_cast<std::size_t>(l)] +=
          w * static_cast<double>(cw.entries[static_cast<std::size_t>(l)]);
  }
  return hist;
}

// Negatives clamped to zero; no renormalization.
inline Histogram threshold_histogram(const Histogram& hist) {
  Histogram out = hist;
  out.policy = NegativesPolicy::clamp;
  for (double& v : out.values)
    if (v < 0.0) v = 0.0;
  return out;
}

// Sum_l values_l * q^l.
inline std::vector<double> histogram_mean(const Histogram& hist,
                                          const LatticeSpec& lat) {
  if (static_cast<int>(hist.values.size()) != lat.count())
    throw std::invalid_argument("histogram_mean: length mismatch");
  std::vector<double> mean(static_cast<std::size_t>(lat.dim), 0.0);
  for (int l = 0; l < lat.count(); ++l) {
    auto q = lat.point(l);
    for (int a = 0; a < lat.dim; ++a) mean[static_cast<std::size_t>(a)] += hist.values[static_cast<std::size_t>(l)] * q[a];
  }
  return mean;
}

struct GlobalModel {
  std::vector<double> weights;
  int round = 0;
};

// Adds each sub-vector's histogram mean onto the previous global model and
// drops the zero-padding of the last sub-vector.
inline GlobalModel cpa_update(const GlobalModel& prev,
                              std::span<const Histogram> histograms,
                              const LatticeSpec& lat) {
  const int d = static_cast<int>(prev.weights.size());
  const int m_count = subvector_count(d, lat.dim);
  if (static_cast<int>(histograms.size()) != m_count)
    throw std::invalid_argument("cpa_update: histogram count mismatch");
  GlobalModel next = prev;
  next.round = prev.round + 1;
  for (int i = 0; i < m_count; ++i) {
    std::vector<double> mean = histogram_mean(histograms[static_cast<std::size_t>(i)], lat);
    for (int a = 0; a < lat.dim; ++a) {
      int at = i * lat.dim + a;
      if (at < d) next.weights[static_cast<std::size_t>(at)] += mean[static_cast<std::size_t>(a)];
    }
  }
  return next;
}

// Nested update: coarse histogram mean plus nested histogram mean per
// sub-vector.
inline GlobalModel nested_cpa_update(const GlobalModel& prev,
                                     std::span<const Histogram> coarse_hists,
                                     std::span<const Histogram> nested_hists,
                                     const NestedPair& pair) {
  const int d = static_cast<int>(prev.weights.size());
  const int m_count = subvector_count(d, pair.fine.dim);
  if (static_cast<int>(coarse_hists.size()) != m_count ||
      static_cast<int>(nested_hists.size()) != m_count)
    throw std::invalid_argument("nested_cpa_update: histogram count mismatch");
  GlobalModel next = prev;
  next.round = prev.round + 1;
  for (int i = 0; i < m_count; ++i) {
    std::vector<double> mc = histogram_mean(coarse_hists[static_cast<std::size_t>(i)], pair.coarse);
    std::vector<double> mn = histogram_mean(nested_hists[static_cast<std::size_t>(i)], pair.nested);
    for (int a = 0; a < pair.fine.dim; ++a) {
      int at = i * pair.fine.dim + a;
      if (at < d) next.weights[static_cast<std::size_t>(at)] += mc[static_cast<std::size_t>(a)] + mn[static_cast<std::size_t>(a)];
    }
  }
  return next;
}

// Debug dump, one row per histogram entry: round,subvec,lattice_index,value.
inline std::string histogram_csv(std::span<const Histogram> histograms) {
  std::string out = "round,subvec,lattice_index,value\n";
  char line[96];
  for (const Histogram& h : histograms) {
    for (std::size_t l = 0; l < h.values.size(); ++l) {
      std::snprintf(line, sizeof(line), "%d,%d,%zu,%.9g\n", h.round, h.subvec, l,
                    h.values[l]);
      out += line;
    }
  }
  return out;
}

}  // namespace cpa

#endif  // CPA_AGGREGATE_HPP

#ifndef CPA_CODEC_HPP
#define CPA_CODEC_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpa/lattice.hpp"
#include "cpa/rng.hpp"

namespace cpa {

// Balanced +/-1 word of length 2^{L*R}: exactly half the entries are +1.
// Entries are a pure function of the stream that generated them, so user and
// server derive identical codewords from the shared seed tuple.
struct Codeword {
  std::vector<std::int8_t> entries;

  int size() const { return static_cast<int>(entries.size()); }
};

inline Codeword make_codeword(StreamRng& rng, int size) {
  if (size < 2 || (size % 2) != 0)
    throw std::invalid_argument("codeword: size must be even and >= 2");
  Codeword cw;
  cw.entries.assign(static_cast<std::size_t>(size), -1);
  for (int i = 0; i < size / 2; ++i) cw.entries[i] = 1;
  // Fisher-Yates over the balanced multiset gives a uniform balanced word.
  for (int i = size - 1; i > 0; --i) {
    int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1));
    std::swap(cw.entries[i], cw.entries[j]);
  }
  return cw;
}

// The bit conveyed for lattice index `index` (0-based): the codeword entry.
inline int compress_to_bit(const Codeword& cw, int index) {
  if (index < 0 || index >= cw.size())
    throw std::out_of_range("compress_to_bit: lattice index out of range");
  return cw.entries[static_cast<std::size_t>(index)] > 0 ? +1 : -1;
}

// Randomized-response truthful-transmission probability for budget eps.
inline double rr_probability(double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("rr: epsilon must be > 0");
  if (std::isinf(eps)) return 1.0;
  double e = std::exp(eps);
  return e / (1.0 + e);
}

struct PrivacyParams {
  double epsilon = 0.0;  // +inf admitted as the no-RR configuration
  double p = 1.0;        // truthful probability, in (1/2, 1]
  int k = 1;             // anonymity degree 2^{L*R - 1}

  static PrivacyParams from_epsilon(double eps, int codeword_size) {
    PrivacyParams out;
    out.epsilon = eps;
    out.p = rr_probability(eps);
    out.k = codeword_size / 2;
    return out;
  }

  static PrivacyParams no_rr(int codeword_size) {
    PrivacyParams out;
    out.epsilon = std::numeric_limits<double>::infinity();
    out.p = 1.0;
    out.k = codeword_size / 2;
    return out;
  }
};

inline int randomized_response(int bit, double p, StreamRng& rng) {
  if (!(p > 0.5) || p > 1.0)
    throw std::invalid_argument("rr: p must be in (1/2, 1]");
  if (p >= 1.0) return bit;
  return rng.bernoulli(p) ? bit : -bit;
}

// Debiased per-message estimate of the sender's codeword: +/- cw / (2p - 1).
// Unbiased (over the RR flip) for sign([cw]_l) * cw, where l is the true
// lattice index.
inline std::vector<double> estimate_codeword(int received_bit, const Codeword& cw,
                                             double p) {
  if (!(p > 0.5))
    throw std::invalid_argument("estimate: p must exceed 1/2 (epsilon = 0 unsupported)");
  double scale = static_cast<double>(received_bit) / (2.0 * p - 1.0);
  std::vector<double> out(cw.entries.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = scale * static_cast<double>(cw.entries[i]);
  return out;
}

enum class SchemeTag : std::uint8_t { onebit = 0, nested = 1 };

// One user's per-round transmission: M bits for 1-bit messages, 2M for
// nested (coarse bit then nested bit, per sub-vector).
struct BitMessage {
  std::uint32_t user_id = 0;
  std::uint32_t round = 0;
  SchemeTag scheme = SchemeTag::onebit;
  std::vector<std::int8_t> bits;  // +1 / -1, sub-vector order

  int bit_count() const { return static_cast<int>(bits.size()); }
};

// Wire format: little-endian u32 user_id, u32 round, u8 scheme_tag,
// u32 bit_count, then bits packed LSB-first (+1 -> 1, -1 -> 0), zero-padded
// to a byte boundary.
inline std::vector<std::uint8_t> serialize_message(const BitMessage& msg) {
  std::vector<std::uint8_t> out;
  out.reserve(13 + (msg.bits.size() + 7) / 8);
  auto put_u32 = [&out](std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
  };
  put_u32(msg.user_id);
  put_u32(msg.round);
  out.push_back(static_cast<std::uint8_t>(msg.scheme));
  put_u32(static_cast<std::uint32_t>(msg.bits.size()));
  std::uint8_t acc = 0;
  int nbits = 0;
  for (std::size_t i = 0; i < msg.bits.size(); ++i) {
    if (msg.bits[i] > 0) acc |= static_cast<std::uint8_t>(1u << nbits);
    if (++nbits == 8) {
      out.push_back(acc);
      acc = 0;
      nbits = 0;
    }
  }
  if (nbits > 0) out.push_back(acc);
  return out;
}

inline BitMessage deserialize_message(std::span<const std::uint8_t> data) {
  if (data.size() < 13) throw std::invalid_argument("message: truncated header");
  auto get_u32 = [&data](std::size_t at) {
    return static_cast<std::uint32_t>(data[at]) |
           (static_cast<std::uint32_t>(data[at + 1]) << 8) |
           (static_cast<std::uint32_t>(data[at + 2]) << 16) |
           (static_cast<std::uint32_t>(data[at + 3]) << 24);
  };
  BitMessage msg;
  msg.user_id = get_u32(0);
  msg.round = get_u32(4);
  std::uint8_t tag = data[8];
  if (tag > 1) throw std::invalid_argument("message: unknown scheme tag");
  msg.scheme = static_cast<SchemeTag>(tag);
  std::uint32_t nbits = get_u32(9);
  std::size_t need = 13 + (static_cast<std::size_t>(nbits) + 7) / 8;
  if (data.size() < need) throw std::invalid_argument("message: truncated payload");
  msg.bits.resize(nbits);
  for (std::uint32_t i = 0; i < nbits; ++i) {
    std::uint8_t byte = data[13 + i / 8];
    msg.bits[i] = (byte >> (i % 8)) & 1u ? +1 : -1;
  }
  return msg;
}

// Seed bundle for one user's encode. The server shares master_seed and can
// re-derive every codeword without further communication.
struct EncodeSeeds {
  std::uint64_t master_seed = 0;
  std::uint32_t user_id = 0;
  std::uint32_t round = 0;
};

inline int subvector_count(int d, int L) { return (d + L - 1) / L; }

// Codeword the server associates with (user, round, subvector).
inline Codeword user_codeword(const EncodeSeeds& seeds, int subvec, int size,
                              bool nested_stage = false) {
  StreamRng rng = derive_stream(
      seeds.master_seed, seeds.user_id, seeds.round,
      static_cast<std::uint64_t>(subvec),
      nested_stage ? StreamPurpose::codebook_nested : StreamPurpose::codebook);
  return make_codeword(rng, size);
}

struct EncodeResult {
  BitMessage message;
  int overload_count = 0;
};

// 1-bit encode: split h into M = ceil(d/L) sub-vectors (last zero-padded),
// dither-quantize each, read the codeword entry at the chosen index, perturb
// with randomized response.
inline EncodeResult encode_update(std::span<const double> h, const LatticeSpec& lat,
                                  const PrivacyParams& params,
                                  const EncodeSeeds& seeds,
                                  bool zero_dither = false) {
  const int d = static_cast<int>(h.size());
  const int L = lat.dim;
  const int m_count = subvector_count(d, L);
  EncodeResult out;
  out.message.user_id = seeds.user_id;
  out.message.round = seeds.round;
  out.message.scheme = SchemeTag::onebit;
  out.message.bits.resize(m_count);
  double sub[8];
  for (int i = 0; i < m_count; ++i) {
    for (int a = 0; a < L; ++a) {
      int at = i * L + a;
      sub[a] = at < d ? h[at] : 0.0;
    }
    StreamRng dither_rng =
        derive_stream(seeds.master_seed, seeds.user_id, seeds.round,
                      static_cast<std::uint64_t>(i), StreamPurpose::dither);
    DitheredResult q = dithered_quantize(
        lat, {sub, static_cast<std::size_t>(L)}, dither_rng, zero_dither);
    if (q.overloaded) ++out.overload_count;
    Codeword cw = user_codeword(seeds, i, lat.count());
    int bit = compress_to_bit(cw, q.index);
    StreamRng rr_rng =
        derive_stream(seeds.master_seed, seeds.user_id, seeds.round,
                      static_cast<std::uint64_t>(i), StreamPurpose::rr);
    out.message.bits[i] =
        static_cast<std::int8_t>(randomized_response(bit, params.p, rr_rng));
  }
  return out;
}

// Nested encode: per sub-vector, a coarse bit and a nested bit, each from its
// own codeword and its own RR draw.
inline EncodeResult encode_update_nested(std::span<const double> h,
                                         const NestedPair& pair,
                                         const PrivacyParams& params,
                                         const EncodeSeeds& seeds,
                                         bool zero_dither = false) {
  const int d = static_cast<int>(h.size());
  const int L = pair.fine.dim;
  const int m_count = subvector_count(d, L);
  EncodeResult out;
  out.message.user_id = seeds.user_id;
  out.message.round = seeds.round;
  out.message.scheme = SchemeTag::nested;
  out.message.bits.resize(static_cast<std::size_t>(m_count) * 2);
  double sub[8];
  for (int i = 0; i < m_count; ++i) {
    for (int a = 0; a < L; ++a) {
      int at = i * L + a;
      sub[a] = at < d ? h[at] : 0.0;
    }
    StreamRng dither_rng =
        derive_stream(seeds.master_seed, seeds.user_id, seeds.round,
                      static_cast<std::uint64_t>(i), StreamPurpose::dither);
    NestedQuantizeResult q = nested_quantize(
        pair, {sub, static_cast<std::size_t>(L)}, dither_rng, zero_dither);
    if (q.overloaded) ++out.overload_count;

    Codeword cw_c = user_codeword(seeds, i, pair.coarse.count(), false);
    Codeword cw_n = user_codeword(seeds, i, pair.nested.count(), true);
    int bit_c = compress_to_bit(cw_c, q.coarse_index);
    int bit_n = compress_to_bit(cw_n, q.nested_index);
    StreamRng rr_c =
        derive_stream(seeds.master_seed, seeds.user_id, seeds.round,
                      static_cast<std::uint64_t>(i), StreamPurpose::rr);
    StreamRng rr_n =
        derive_stream(seeds.master_seed, seeds.user_id, seeds.round,
                      static_cast<std::uint64_t>(i), StreamPurpose::rr_nested);
    out.message.bits[2 * i] =
        static_cast<std::int8_t>(randomized_response(bit_c, params.p, rr_c));
    out.message.bits[2 * i + 1] =
        static_cast<std::int8_t>(randomized_response(bit_n, params.p, rr_n));
  }
  return out;
}

}  // namespace cpa

#endif  // CPA_CODEC_HPP

#ifndef CPA_DATA_HPP
#define CPA_DATA_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpa/rng.hpp"

namespace cpa {

struct Dataset {
  std::vector<double> features;  // n x f, row-major
  std::vector<int> labels;       // n entries in [0, classes)
  int n = 0;
  int f = 0;
  int classes = 0;

  std::span<const double> row(int i) const {
    return {features.data() + static_cast<std::size_t>(i) * f,
            static_cast<std::size_t>(f)};
  }
};

// Gaussian class clusters. Class means sit on random unit directions scaled
// by `separation`; unit within-class noise. separation = 0 collapses all
// classes onto one blob.
//
// normalize01 min-max scales every feature to [0, 1], matching the pixel
// range of image datasets; lattice support calibration expects bounded
// updates.
inline Dataset gen_synthetic(int n, int f, int classes, double separation,
                             std::uint64_t seed, bool normalize01 = true) {
  if (n < 1 || f < 1 || classes < 1)
    throw std::invalid_argument("synthetic: n, f, classes must be >= 1");
  Dataset ds;
  ds.n = n;
  ds.f = f;
  ds.classes = classes;
  ds.features.resize(static_cast<std::size_t>(n) * f);
  ds.labels.resize(static_cast<std::size_t>(n));

  StreamRng mean_rng = derive_stream(seed, 0, 0, 0, StreamPurpose::data);
  std::vector<double> means(static_cast<std::size_t>(classes) * f);
  for (int c = 0; c < classes; ++c) {
    double norm_sq = 0.0;
    for (int j = 0; j < f; ++j) {
      double v = mean_rng.normal();
      means[static_cast<std::size_t>(c) * f + j] = v;
      norm_sq += v * v;
    }
    double scale = separation / std::max(std::sqrt(norm_sq), 1e-12);
    for (int j = 0; j < f; ++j) means[static_cast<std::size_t>(c) * f + j] *= scale;
  }

  for (int i = 0; i < n; ++i) {
    StreamRng rng = derive_stream(seed, static_cast<std::uint64_t>(i) + 1, 0, 0,
                                  StreamPurpose::data);
    int label = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(classes)));
    ds.labels[static_cast<std::size_t>(i)] = label;
    for (int j = 0; j < f; ++j)
      ds.features[static_cast<std::size_t>(i) * f + j] =
          means[static_cast<std::size_t>(label) * f + j] + rng.normal();
  }

  if (normalize01 && n > 1) {
    for (int j = 0; j < f; ++j) {
      double lo = ds.features[static_cast<std::size_t>(j)];
      double hi = lo;
      for (int i = 1; i < n; ++i) {
        double v = ds.features[static_cast<std::size_t>(i) * f + j];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      double range = hi - lo;
      if (range <= 0.0) range = 1.0;
      for (int i = 0; i < n; ++i) {
        double& v = ds.features[static_cast<std::size_t>(i) * f + j];
        v = (v - lo) / range;
      }
    }
  }
  return ds;
}

struct IdxError : std::runtime_error {
  enum class Kind { magic_mismatch, truncated, count_mismatch };
  Kind kind;
  IdxError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
};

namespace detail {

inline std::uint32_t read_be32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw IdxError(IdxError::Kind::truncated, "idx: truncated file " + path);
  return (static_cast<std::uint32_t>(b[0]) << 24) |
         (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

}  // namespace detail

// IDX image/label pair (big-endian, magics 0x803 / 0x801). Pixels are scaled
// to [0, 1].
inline Dataset load_idx(const std::string& path_images, const std::string& path_labels) {
  std::ifstream img(path_images, std::ios::binary);
  if (!img) throw IdxError(IdxError::Kind::truncated, "idx: cannot open " + path_images);
  std::ifstream lab(path_labels, std::ios::binary);
  if (!lab) throw IdxError(IdxError::Kind::truncated, "idx: cannot open " + path_labels);

  if (detail::read_be32(img, path_images) != 0x00000803u)
    throw IdxError(IdxError::Kind::magic_mismatch, "idx: bad image magic in " + path_images);
  std::uint32_t n_img = detail::read_be32(img, path_images);
  std::uint32_t rows = detail::read_be32(img, path_images);
  std::uint32_t cols = detail::read_be32(img, path_images);

  if (detail::read_be32(lab, path_labels) != 0x00000801u)
    throw IdxError(IdxError::Kind::magic_mismatch, "idx: bad label magic in " + path_labels);
  std::uint32_t n_lab = detail::read_be32(lab, path_labels);
  if (n_img != n_lab)
    throw IdxError(IdxError::Kind::count_mismatch, "idx: image/label count mismatch");

  Dataset ds;
  ds.n = static_cast<int>(n_img);
  ds.f = static_cast<int>(rows * cols);
  ds.classes = 10;
  ds.features.resize(static_cast<std::size_t>(ds.n) * ds.f);
  ds.labels.resize(static_cast<std::size_t>(ds.n));

  std::vector<unsigned char> buf(static_cast<std::size_t>(ds.f));
  for (int i = 0; i < ds.n; ++i) {
    if (!img.read(reinterpret_cast<char*>(buf.data()), ds.f))
      throw IdxError(IdxError::Kind::truncated, "idx: truncated pixel data");
    for (int j = 0; j < ds.f; ++j)
      ds.features[static_cast<std::size_t>(i) * ds.f + j] = buf[static_cast<std::size_t>(j)] / 255.0;
    char l;
    if (!lab.read(&l, 1))
      throw IdxError(IdxError::Kind::truncated, "idx: truncated label data");
    ds.labels[static_cast<std::size_t>(i)] = static_cast<unsigned char>(l);
  }
  return ds;
}

// CSV dump of a dataset: label column then feature columns.
inline std::string dataset_csv(const Dataset& ds) {
  std::string out = "label";
  for (int j = 0; j < ds.f; ++j) out += ",f" + std::to_string(j);
  out += "\n";
  char cell[40];
  for (int i = 0; i < ds.n; ++i) {
    out += std::to_string(ds.labels[static_cast<std::size_t>(i)]);
    for (int j = 0; j < ds.f; ++j) {
      std::snprintf(cell, sizeof(cell), ",%.9g", ds.features[static_cast<std::size_t>(i) * ds.f + j]);
      out += cell;
    }
    out += "\n";
  }
  return out;
}

// A shard is an index list into the parent dataset.
struct Shard {
  const Dataset* data = nullptr;
  std::vector<int> indices;

  int size() const { return static_cast<int>(indices.size()); }
};

// K shards of per_user samples each, drawn uniformly. Sampling is without
// replacement until the dataset is exhausted; after that the pool is
// reshuffled and dealing continues. Shards are disjoint while
// n >= K * per_user.
inline std::vector<Shard> partition_uniform(const Dataset& ds, int k_users,
                                            int per_user, std::uint64_t seed,
                                            bool allow_replacement = true) {
  if (k_users < 1 || per_user < 1)
    throw std::invalid_argument("partition: K and per_user must be >= 1");
  const std::int64_t need = static_cast<std::int64_t>(k_users) * per_user;
  if (!allow_replacement && need > ds.n)
    throw std::invalid_argument("partition: K * per_user exceeds dataset size");

  StreamRng rng = derive_stream(seed, 0, 0, 0, StreamPurpose::partition);
  std::vector<int> pool(static_cast<std::size_t>(ds.n));
  std::iota(pool.begin(), pool.end(), 0);
  auto shuffle_pool = [&]() {
    for (int i = ds.n - 1; i > 0; --i) {
      int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
  };
  shuffle_pool();

  std::vector<Shard> shards(static_cast<std::size_t>(k_users));
  int next = 0;
  for (int r = 0; r < k_users; ++r) {
    shards[static_cast<std::size_t>(r)].data = &ds;
    shards[static_cast<std::size_t>(r)].indices.reserve(static_cast<std::size_t>(per_user));
    for (int s = 0; s < per_user; ++s) {
      if (next == ds.n) {
        shuffle_pool();
        next = 0;
      }
      shards[static_cast<std::size_t>(r)].indices.push_back(pool[static_cast<std::size_t>(next++)]);
    }
  }
  return shards;
}

enum class ModelKind { linear, mlp };
enum class LossKind { softmax_ce, least_squares };

// Flattened parameter layout: layer-major, row-major within a layer, biases
// after each layer's matrix. linear: W (classes x f), b (classes).
// mlp: W1 (hidden x f), b1, W2 (classes x hidden), b2.
struct Model {
  ModelKind kind = ModelKind::linear;
  int f = 0;
  int classes = 0;
  int hidden = 0;

  int dim() const {
    if (kind == ModelKind::linear) return classes * f + classes;
    return hidden * f + hidden + classes * hidden + classes;
  }
};

inline std::vector<double> init_weights(const Model& model, std::uint64_t seed) {
  std::vector<double> w(static_cast<std::size_t>(model.dim()), 0.0);
  if (model.kind == ModelKind::mlp) {
    // Small random init so hidden units break symmetry.
    StreamRng rng = derive_stream(seed, 0, 0, 0, StreamPurpose::model_init);
    double scale = 1.0 / std::sqrt(static_cast<double>(model.f));
    for (int i = 0; i < model.hidden * model.f; ++i)
      w[static_cast<std::size_t>(i)] = scale * rng.normal();
    int at = model.hidden * model.f + model.hidden;
    double scale2 = 1.0 / std::sqrt(static_cast<double>(model.hidden));
    for (int i = 0; i < model.classes * model.hidden; ++i)
      w[static_cast<std::size_t>(at + i)] = scale2 * rng.normal();
  }
  return w;
}

namespace detail {

inline void forward_scores(const Model& m, std::span<const double> w,
                           std::span<const double> x, std::vector<double>& hidden_act,
                           std::vector<double>& scores) {
  if (m.kind == ModelKind::linear) {
    scores.assign(static_cast<std::size_t>(m.classes), 0.0);
    const double* W = w.data();
    const double* b = w.data() + static_cast<std::size_t>(m.classes) * m.f;
    for (int c = 0; c < m.classes; ++c) {
      double s = b[c];
      const double* row = W + static_cast<std::size_t>(c) * m.f;
      for (int j = 0; j < m.f; ++j) s += row[j] * x[static_cast<std::size_t>(j)];
      scores[static_cast<std::size_t>(c)] = s;
    }
    return;
  }
  const double* W1 = w.data();
  const double* b1 = w.data() + static_cast<std::size_t>(m.hidden) * m.f;
  const double* W2 = b1 + m.hidden;
  const double* b2 = W2 + static_cast<std::size_t>(m.classes) * m.hidden;
  hidden_act.assign(static_cast<std::size_t>(m.hidden), 0.0);
  for (int u = 0; u < m.hidden; ++u) {
    double s = b1[u];
    const double* row = W1 + static_cast<std::size_t>(u) * m.f;
    for (int j = 0; j < m.f; ++j) s += row[j] * x[static_cast<std::size_t>(j)];
    hidden_act[static_cast<std::size_t>(u)] = s > 0.0 ? s : 0.0;  // ReLU
  }
  scores.assign(static_cast<std::size_t>(m.classes), 0.0);
  for (int c = 0; c < m.classes; ++c) {
    double s = b2[c];
    const double* row = W2 + static_cast<std::size_t>(c) * m.hidden;
    for (int u = 0; u < m.hidden; ++u) s += row[u] * hidden_act[static_cast<std::size_t>(u)];
    scores[static_cast<std::size_t>(c)] = s;
  }
}

}  // namespace detail

// Loss and exact gradient over a batch of sample indices.
//
// softmax_ce: mean cross-entropy. least_squares: mean 0.5 ||scores - onehot||^2
// plus (rho_c / 2) ||w||^2, which is rho_c-strongly convex for the linear model.
inline double loss_and_grad(const Model& model, std::span<const double> w,
                            const Dataset& ds, std::span<const int> batch,
                            LossKind loss, std::span<double> grad,
                            double rho_c = 0.0) {
  if (batch.empty()) throw std::invalid_argument("loss: batch must be non-empty");
  std::fill(grad.begin(), grad.end(), 0.0);
  double total = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  std::vector<double> scores, hidden_act, dscore;
  for (int idx : batch) {
    auto x = ds.row(idx);
    int y = ds.labels[static_cast<std::size_t>(idx)];
    detail::forward_scores(model, w, x, hidden_act, scores);

    dscore.assign(static_cast<std::size_t>(model.classes), 0.0);
    if (loss == LossKind::softmax_ce) {
      double mx = *std::max_element(scores.begin(), scores.end());
      double z = 0.0;
      for (double s : scores) z += std::exp(s - mx);
      double logz = std::log(z) + mx;
      total += inv_b * (logz - scores[static_cast<std::size_t>(y)]);
      for (int c = 0; c < model.classes; ++c) {
        double p = std::exp(scores[static_cast<std::size_t>(c)] - logz);
        dscore[static_cast<std::size_t>(c)] = inv_b * (p - (c == y ? 1.0 : 0.0));
      }
    } else {
      for (int c = 0; c < model.classes; ++c) {
        double r = scores[static_cast<std::size_t>(c)] - (c == y ? 1.0 : 0.0);
        total += inv_b * 0.5 * r * r;
        dscore[static_cast<std::size_t>(c)] = inv_b * r;
      }
    }

    if (model.kind == ModelKind::linear) {
      double* gW = grad.data();
      double* gb = grad.data() + static_cast<std::size_t>(model.classes) * model.f;
      for (int c = 0; c < model.classes; ++c) {
        double g = dscore[static_cast<std::size_t>(c)];
        double* row = gW + static_cast<std::size_t>(c) * model.f;
        for (int j = 0; j < model.f; ++j) row[j] += g * x[static_cast<std::size_t>(j)];
        gb[c] += g;
      }
    } else {
      const double* W2 = w.data() + static_cast<std::size_t>(model.hidden) * model.f + model.hidden;
      double* gW1 = grad.data();
      double* gb1 = grad.data() + static_cast<std::size_t>(model.hidden) * model.f;
      double* gW2 = gb1 + model.hidden;
      double* gb2 = gW2 + static_cast<std::size_t>(model.classes) * model.hidden;
      for (int c = 0; c < model.classes; ++c) {
        double g = dscore[static_cast<std::size_t>(c)];
        double* row = gW2 + static_cast<std::size_t>(c) * model.hidden;
        for (int u = 0; u < model.hidden; ++u) row[u] += g * hidden_act[static_cast<std::size_t>(u)];
        gb2[c] += g;
      }
      for (int u = 0; u < model.hidden; ++u) {
        if (hidden_act[static_cast<std::size_t>(u)] <= 0.0) continue;
        double g = 0.0;
        for (int c = 0; c < model.classes; ++c)
          g += dscore[static_cast<std::size_t>(c)] * W2[static_cast<std::size_t>(c) * model.hidden + u];
        double* row = gW1 + static_cast<std::size_t>(u) * model.f;
        for (int j = 0; j < model.f; ++j) row[j] += g * x[static_cast<std::size_t>(j)];
        gb1[u] += g;
      }
    }
  }

  if (loss == LossKind::least_squares && rho_c > 0.0) {
    double reg = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      reg += w[i] * w[i];
      grad[i] += rho_c * w[i];
    }
    total += 0.5 * rho_c * reg;
  }
  return total;
}

// Percent of argmax-correct predictions; argmax ties go to the smallest class.
inline double evaluate_accuracy(const Model& model, std::span<const double> w,
                                const Dataset& ds) {
  std::vector<double> scores, hidden_act;
  int correct = 0;
  for (int i = 0; i < ds.n; ++i) {
    detail::forward_scores(model, w, ds.row(i), hidden_act, scores);
    int best = 0;
    for (int c = 1; c < model.classes; ++c)
      if (scores[static_cast<std::size_t>(c)] > scores[static_cast<std::size_t>(best)]) best = c;
    if (best == ds.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(ds.n);
}

}  // namespace cpa

#endif  // CPA_DATA_HPP

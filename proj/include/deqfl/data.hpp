#pragma once

// Datasets and their federated partitioning.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "deqfl/errors.hpp"
#include "deqfl/linalg.hpp"
#include "deqfl/model.hpp"
#include "deqfl/rng.hpp"

namespace deqfl {

struct Dataset {
  Matrix features;  // n x d_x
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }

  void validate() const {
    if (labels.empty()) throw DataError("dataset: no samples");
    if (features.rows() != labels.size()) throw DataError("dataset: feature rows != label count");
    for (std::size_t l : labels)
      if (l >= class_count) throw DataError("dataset: label " + std::to_string(l) + " >= class count");
  }

  Example example(std::size_t i) const {
    const auto r = features.row(i);
    return {Vector(std::vector<double>(r.begin(), r.end())), labels[i]};
  }

  std::vector<Example> examples(std::span<const std::size_t> indices) const {
    std::vector<Example> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(example(i));
    return out;
  }

  std::vector<Example> examples() const {
    std::vector<std::size_t> all(size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return examples(all);
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset d{Matrix(indices.size(), dim()), {}, class_count};
    d.labels.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const auto r = features.row(indices[k]);
      std::copy(r.begin(), r.end(), d.features.values().begin() + static_cast<std::ptrdiff_t>(k * dim()));
      d.labels.push_back(labels[indices[k]]);
    }
    return d;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(class_count, 0);
    for (std::size_t l : labels) ++c[l];
    return c;
  }
};

// Isotropic Gaussian clusters. Class c has mean 4*spread*(cos t_c, sin t_c,
// 0, ...), t_c = 2 pi c / C: evenly spaced on a circle of radius 4*spread in
// the first two coordinates. With dim = 1 the means are spread evenly over
// [-4*spread, 4*spread] instead. Samples are class-major.
inline Dataset gen_blobs(std::size_t classes, std::size_t per_class, std::size_t dim, double spread,
                         std::uint64_t seed) {
  if (classes < 2) throw ConfigError("data.classes", "must be >= 2");
  if (per_class < 1) throw ConfigError("data.per_class", "must be >= 1");
  if (dim < 1) throw ConfigError("data.dim", "must be >= 1");
  if (!(spread > 0.0)) throw ConfigError("data.spread", "must be > 0");

  const double radius = 4.0 * spread;
  Rng rng(seed, StreamPurpose::data);
  Dataset d{Matrix(classes * per_class, dim), {}, classes};
  d.labels.reserve(classes * per_class);
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> mean(dim, 0.0);
    if (dim == 1) {
      mean[0] = -radius + 2.0 * radius * static_cast<double>(c) / static_cast<double>(classes - 1);
    } else {
      const double t = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
      mean[0] = radius * std::cos(t);
      mean[1] = radius * std::sin(t);
    }
    for (std::size_t s = 0; s < per_class; ++s) {
      const std::size_t row = c * per_class + s;
      for (std::size_t j = 0; j < dim; ++j) d.features(row, j) = mean[j] + spread * rng.normal();
      d.labels.push_back(c);
    }
  }
  return d;
}

namespace detail {

inline std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("idx: cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace detail

// MNIST IDX pair: images (magic 2051, count, rows, cols, then count*rows*cols
// unsigned bytes) and labels (magic 2049, count, then count bytes). All
// header fields are big-endian uint32. Pixels are scaled by 1/255. `limit`
// keeps only the first `limit` samples when nonzero.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t limit = 0) {
  const auto img = detail::read_all(images_path);
  const auto lab = detail::read_all(labels_path);

  if (img.size() < 16) throw TruncatedFileError("idx: '" + images_path + "' header truncated");
  if (detail::be32(img, 0) != 2051)
    throw BadMagicError("idx: '" + images_path + "' has magic " + std::to_string(detail::be32(img, 0)) +
                        ", expected 2051");
  if (lab.size() < 8) throw TruncatedFileError("idx: '" + labels_path + "' header truncated");
  if (detail::be32(lab, 0) != 2049)
    throw BadMagicError("idx: '" + labels_path + "' has magic " + std::to_string(detail::be32(lab, 0)) +
                        ", expected 2049");

  const std::size_t n_img = detail::be32(img, 4);
  const std::size_t pixels = std::size_t{detail::be32(img, 8)} * detail::be32(img, 12);
  const std::size_t n_lab = detail::be32(lab, 4);
  if (n_img != n_lab)
    throw CountMismatchError("idx: " + std::to_string(n_img) + " images but " + std::to_string(n_lab) + " labels");
  if (img.size() < 16 + n_img * pixels) throw TruncatedFileError("idx: '" + images_path + "' pixel data truncated");
  if (lab.size() < 8 + n_lab) throw TruncatedFileError("idx: '" + labels_path + "' label data truncated");
  if (n_img == 0 || pixels == 0) throw DataError("idx: empty dataset");

  const std::size_t n = limit == 0 ? n_img : std::min(limit, n_img);
  Dataset d{Matrix(n, pixels), {}, 10};
  d.labels.reserve(n);
  auto feat = d.features.values();
  for (std::size_t i = 0; i < n * pixels; ++i) feat[i] = static_cast<double>(img[16 + i]) / 255.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t l = lab[8 + i];
    if (l >= 10) throw DataError("idx: label " + std::to_string(l) + " out of range at index " + std::to_string(i));
    d.labels.push_back(l);
  }
  return d;
}

struct TrainTest {
  Dataset train;
  Dataset test;
};

// Per class, round(test_fraction * n_c) samples go to the test set. Both
// subsets keep ascending original order.
inline TrainTest stratified_split(const Dataset& d, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction", "must lie in (0, 1)");
  Rng rng(seed, StreamPurpose::split);
  std::vector<std::vector<std::size_t>> by_class(d.class_count);
  for (std::size_t i = 0; i < d.size(); ++i) by_class[d.labels[i]].push_back(i);
  std::vector<std::size_t> train, test;
  for (auto& members : by_class) {
    rng.shuffle(std::span<std::size_t>(members));
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(members.size())));
    test.insert(test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_test), members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  if (train.empty() || test.empty()) throw DataError("stratified_split: a side is empty");
  return {d.subset(train), d.subset(test)};
}

struct Partition {
  std::vector<std::vector<std::size_t>> assignments;  // per client

  std::size_t clients() const noexcept { return assignments.size(); }

  // Disjoint, covering {0..n-1}, every client non-empty.
  void validate(std::size_t n) const {
    std::vector<char> seen(n, 0);
    std::size_t total = 0;
    for (std::size_t c = 0; c < assignments.size(); ++c) {
      if (assignments[c].empty()) throw PartitionError("partition: client " + std::to_string(c) + " is empty");
      for (std::size_t i : assignments[c]) {
        if (i >= n) throw PartitionError("partition: index " + std::to_string(i) + " out of range");
        if (seen[i]) throw PartitionError("partition: index " + std::to_string(i) + " assigned twice");
        seen[i] = 1;
        ++total;
      }
    }
    if (total != n) throw PartitionError("partition: " + std::to_string(n - total) + " samples unassigned");
  }
};

// Random permutation cut into N shards; the first n mod N shards get one extra.
inline Partition partition_iid(const Dataset& d, std::size_t clients, std::uint64_t seed) {
  const std::size_t n = d.size();
  if (clients < 1) throw ConfigError("partition.clients", "must be >= 1");
  if (clients > n) throw PartitionError("partition_iid: " + std::to_string(clients) + " clients for " +
                                        std::to_string(n) + " samples");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed, StreamPurpose::partition);
  rng.shuffle(std::span<std::size_t>(perm));

  Partition p;
  p.assignments.resize(clients);
  const std::size_t base = n / clients, extra = n % clients;
  std::size_t off = 0;
  for (std::size_t c = 0; c < clients; ++c) {
    const std::size_t len = base + (c < extra ? 1 : 0);
    p.assignments[c].assign(perm.begin() + static_cast<std::ptrdiff_t>(off),
                            perm.begin() + static_cast<std::ptrdiff_t>(off + len));
    off += len;
  }
  p.validate(n);
  return p;
}

// Integer counts summing to `total` from proportions: floor, then one more
// to the largest fractional parts (ties to the lower index).
inline std::vector<std::size_t> largest_remainder(std::span<const double> proportions, std::size_t total) {
  std::vector<std::size_t> counts(proportions.size());
  std::vector<std::pair<double, std::size_t>> frac(proportions.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < proportions.size(); ++i) {
    const double exact = proportions[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    frac[i] = {exact - std::floor(exact), i};
  }
  std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  // Proportions summing to 1 + eps can overshoot by one.
  while (assigned > total) {
    --*std::max_element(counts.begin(), counts.end());
    --assigned;
  }
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[frac[k % frac.size()].second];
  return counts;
}

// Per class, proportions over clients ~ Dirichlet(alpha), sampled as
// normalized Gamma(alpha, 1) draws; the class's shuffled samples are dealt
// out by largest-remainder counts. The whole draw is repeated (up to 100
// attempts) until no client is empty.
inline Partition partition_dirichlet(const Dataset& d, std::size_t clients, double alpha, std::uint64_t seed) {
  if (clients < 1) throw ConfigError("partition.clients", "must be >= 1");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("partition.alpha", "must be finite and > 0");
  std::vector<std::vector<std::size_t>> by_class(d.class_count);
  for (std::size_t i = 0; i < d.size(); ++i) by_class[d.labels[i]].push_back(i);

  constexpr int kMaxAttempts = 100;
  Rng rng(seed, StreamPurpose::partition);
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Partition p;
    p.assignments.resize(clients);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      std::vector<std::size_t> members = by_class[c];
      if (members.empty()) continue;
      rng.shuffle(std::span<std::size_t>(members));
      std::vector<double> logs(clients);
      for (double& l : logs) l = rng.log_gamma_draw(alpha);
      const double peak = *std::max_element(logs.begin(), logs.end());
      std::vector<double> props(clients);
      double sum = 0.0;
      for (std::size_t k = 0; k < clients; ++k) sum += (props[k] = std::exp(logs[k] - peak));
      for (double& v : props) v /= sum;

      const auto counts = largest_remainder(props, members.size());
      std::size_t off = 0;
      for (std::size_t k = 0; k < clients; ++k) {
        auto& dst = p.assignments[k];
        dst.insert(dst.end(), members.begin() + static_cast<std::ptrdiff_t>(off),
                   members.begin() + static_cast<std::ptrdiff_t>(off + counts[k]));
        off += counts[k];
      }
    }
    const bool all_nonempty =
        std::none_of(p.assignments.begin(), p.assignments.end(), [](const auto& a) { return a.empty(); });
    if (all_nonempty) {
      for (auto& a : p.assignments) std::sort(a.begin(), a.end());
      p.validate(d.size());
      return p;
    }
  }
  throw PartitionError("partition_dirichlet: no partition with every client non-empty after 100 attempts");
}

inline std::vector<std::size_t> label_histogram(const Dataset& d, std::span<const std::size_t> indices) {
  std::vector<std::size_t> h(d.class_count, 0);
  for (std::size_t i : indices) ++h[d.labels[i]];
  return h;
}

// Total-variation distance between two count histograms, each normalized.
inline double tv_distance(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  const double na = std::accumulate(a.begin(), a.end(), 0.0);
  const double nb = std::accumulate(b.begin(), b.end(), 0.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] / na - b[i] / nb);
  return 0.5 * acc;
}

// Mean over clients of TV(client label distribution, global distribution).
inline double mean_client_tv(const Dataset& d, const Partition& p) {
  const auto global = d.class_counts();
  double acc = 0.0;
  for (const auto& a : p.assignments) {
    const auto h = label_histogram(d, a);
    acc += tv_distance(h, global);
  }
  return acc / static_cast<double>(p.clients());
}

}  // namespace deqfl

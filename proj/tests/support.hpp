#pragma once

// Random instance generators and brute-force reference implementations shared
// by the unit and acceptance suites. The oracles deliberately avoid the library
// code paths they check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <vector>

#include "rfc/cfc.hpp"
#include "rfc/core_data.hpp"
#include "rfc/rng.hpp"

namespace testing {

using rfc::Matrix;
using rfc::Seed;

class Gen {
 public:
  explicit Gen(Seed seed) : rng_(seed) {}

  rfc::Rng& rng() { return rng_; }

  int integer(int lo, int hi) { return lo + static_cast<int>(rng_.below(static_cast<std::size_t>(hi - lo + 1))); }
  double real(double lo, double hi) { return lo + (hi - lo) * rng_.uniform(); }

  std::vector<int> labels(std::size_t n, int k) {
    std::vector<int> out(n);
    for (auto& v : out) v = integer(0, k - 1);
    return out;
  }

  /// Labels in [0, k) where every value occurs (requires n >= k).
  std::vector<int> covering_labels(std::size_t n, int k) {
    auto out = labels(n, k);
    for (int v = 0; v < k; ++v) out[static_cast<std::size_t>(v)] = v;
    rng_.shuffle(std::span<int>(out));
    return out;
  }

  std::vector<double> reals(std::size_t n, double lo, double hi) {
    std::vector<double> out(n);
    for (auto& v : out) v = real(lo, hi);
    return out;
  }

  Matrix matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = real(lo, hi);
    return m;
  }

  /// Strictly positive rows summing to one.
  Matrix stochastic(Eigen::Index rows, Eigen::Index cols) {
    Matrix m = matrix(rows, cols, 0.01, 1.0);
    for (Eigen::Index i = 0; i < rows; ++i) m.row(i) /= m.row(i).sum();
    return m;
  }

  /// Every column permutation of [0, k) equally likely.
  std::vector<int> permutation(int k) {
    std::vector<int> p(static_cast<std::size_t>(k));
    std::iota(p.begin(), p.end(), 0);
    rng_.shuffle(std::span<int>(p));
    return p;
  }

 private:
  rfc::Rng rng_;
};

// ---------------------------------------------------------------------------
// Oracles

/// ACC by enumerating every injective map from cluster ids to class ids.
inline double brute_acc(std::span<const int> labels, std::span<const int> truth) {
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  const int c = *std::max_element(truth.begin(), truth.end()) + 1;
  const int m = std::max(k, c);
  std::vector<int> perm(static_cast<std::size_t>(m));
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t best = 0;
  do {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += perm[static_cast<std::size_t>(labels[i])] == truth[i];
    best = std::max(best, hit);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(best) / static_cast<double>(labels.size());
}

/// sup |F_a - F_b| evaluated at every merged sample point.
inline double brute_ks(std::span<const double> a, std::span<const double> b) {
  double best = 0.0;
  auto cdf = [](std::span<const double> s, double x) {
    std::size_t c = 0;
    for (double v : s) c += v <= x;
    return static_cast<double>(c) / static_cast<double>(s.size());
  };
  for (auto s : {a, b})
    for (double x : s) best = std::max(best, std::abs(cdf(a, x) - cdf(b, x)));
  return best;
}

/// Balance straight from the definition: for every cluster and every group
/// present in the data, R = dataset share / in-cluster share.
inline double brute_balance(std::span<const int> labels, std::span<const int> groups, int k) {
  std::set<int> present(groups.begin(), groups.end());
  const double n = static_cast<double>(labels.size());
  double best = 1.0;
  for (int c = 0; c < k; ++c) {
    double nc = 0;
    for (int l : labels) nc += l == c;
    for (int g : present) {
      double ng = 0, ncg = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        ng += groups[i] == g;
        ncg += labels[i] == c && groups[i] == g;
      }
      if (ncg == 0) return 0.0;
      const double r = (ng / n) / (ncg / nc);
      best = std::min({best, r, 1.0 / r});
    }
  }
  return best;
}

inline double brute_entropy(std::span<const int> labels, std::span<const int> groups, int k) {
  std::set<int> present(groups.begin(), groups.end());
  double total = 0.0;
  for (int g : present) {
    double e = 0.0;
    for (int c = 0; c < k; ++c) {
      double nc = 0, ncg = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        nc += labels[i] == c;
        ncg += labels[i] == c && groups[i] == g;
      }
      if (ncg > 0) e -= ncg / nc * std::log(ncg / nc);
    }
    total += e;
  }
  return total / static_cast<double>(present.size());
}

inline double brute_nmi(std::span<const int> a, std::span<const int> b) {
  std::map<int, double> ca, cb;
  std::map<std::pair<int, int>, double> cab;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca[a[i]] += 1;
    cb[b[i]] += 1;
    cab[{a[i], b[i]}] += 1;
  }
  // A constant labeling carries no information: equal only to another constant one.
  if (ca.size() == 1 || cb.size() == 1) return ca.size() == 1 && cb.size() == 1 ? 1.0 : 0.0;
  const double n = static_cast<double>(a.size());
  double ha = 0, hb = 0, mi = 0;
  for (auto [_, c] : ca) ha -= c / n * std::log(c / n);
  for (auto [_, c] : cb) hb -= c / n * std::log(c / n);
  for (auto [key, c] : cab) mi += c / n * std::log(c * n / (ca[key.first] * cb[key.second]));
  return mi / (0.5 * (ha + hb));
}

/// S by the O(r n^2) double loop.
inline Eigen::MatrixXi brute_co_association(const rfc::BasicPartitionSet& bps) {
  const auto n = static_cast<Eigen::Index>(bps.n);
  Eigen::MatrixXi s = Eigen::MatrixXi::Zero(n, n);
  for (const auto& bp : bps.partitions)
    for (Eigen::Index u = 0; u < n; ++u)
      for (Eigen::Index v = 0; v < n; ++v)
        s(u, v) += bp.partition.labels()[static_cast<std::size_t>(u)] == bp.partition.labels()[static_cast<std::size_t>(v)];
  return s;
}

/// Minimum of `f` over the product alphabet, enumerated in lexicographic order.
template <typename F>
std::pair<std::vector<int>, double> brute_minimize(std::span<const int> alphabet, F&& f) {
  std::vector<int> point(alphabet.size(), 0), best = point;
  double best_v = std::numeric_limits<double>::infinity();
  while (true) {
    const double v = f(std::span<const int>(point));
    if (v < best_v) {
      best_v = v;
      best = point;
    }
    std::size_t j = 0;
    while (j < point.size() && ++point[j] == alphabet[j]) point[j++] = 0;
    if (j == point.size()) break;
  }
  return {best, best_v};
}

/// Random basic partition set over n samples (labels only).
inline rfc::BasicPartitionSet random_partitions(Gen& g, std::size_t n, int r, int k_max) {
  rfc::BasicPartitionSet bps;
  bps.n = n;
  for (int i = 0; i < r; ++i) {
    rfc::BasicPartition bp;
    bp.k = g.integer(1, k_max);
    bp.partition = rfc::Clustering(g.labels(n, bp.k), bp.k);
    bps.partitions.push_back(std::move(bp));
  }
  return bps;
}

}  // namespace testing

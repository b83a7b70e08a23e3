#pragma once

// Fairness utility (Balance, Entropy), clustering utility (NMI, ACC) and the
// two-sample Kolmogorov-Smirnov statistic. Logs are natural logs throughout.

#include <cstddef>
#include <span>
#include <vector>

namespace rfc {

/// counts(k, g) = number of samples in cluster k with group g.
struct ContingencyTable {
  std::size_t num_clusters = 0;
  std::size_t num_groups = 0;
  std::vector<std::size_t> counts;  // row-major K x L
  std::vector<std::size_t> cluster_sizes;
  std::vector<std::size_t> group_sizes;
  std::size_t total = 0;

  std::size_t at(std::size_t k, std::size_t g) const { return counts[k * num_groups + g]; }
};

/// Table over `num_clusters` x `num_groups`; pass 0 to infer either from max+1.
ContingencyTable contingency(std::span<const int> labels, std::span<const int> groups,
                             std::size_t num_clusters = 0, std::size_t num_groups = 0);

/// min over (k, g) of min(R, 1/R) where R compares the in-cluster share of group g
/// with its dataset-wide share. Groups absent from `groups` are ignored; any
/// cluster missing a present group (including an empty cluster) yields 0.
double balance(std::span<const int> labels, std::span<const int> groups, std::size_t num_clusters = 0);

struct EntropyResult {
  double value = 0.0;
  bool had_empty_cluster = false;
};

/// Mean over groups of -sum_k (N_kg / n_k) log(N_kg / n_k); 0 log 0 = 0 and
/// empty clusters contribute nothing.
EntropyResult entropy_detailed(std::span<const int> labels, std::span<const int> groups,
                               std::size_t num_clusters = 0);
double entropy(std::span<const int> labels, std::span<const int> groups, std::size_t num_clusters = 0);

/// Mutual information over the arithmetic mean of the two entropies. If either
/// labeling is constant the result is 1 when the two agree up to relabeling, else 0.
double nmi(std::span<const int> labels, std::span<const int> truth);

/// Best fraction of samples matched under a one-to-one cluster -> class map,
/// solved exactly with the Hungarian algorithm. Throws when K or the class count
/// exceeds `cap`.
double acc(std::span<const int> labels, std::span<const int> truth, std::size_t cap = 1024);

/// Minimum-cost perfect matching on a square cost matrix (row-major, size m x m).
/// Returns assignment[row] = column.
std::vector<std::size_t> hungarian_min_cost(std::span<const double> cost, std::size_t m);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// sup_x |F_a(x) - F_b(x)| and the asymptotic p-value
///   Q_KS((sqrt(N) + 0.12 + 0.11 / sqrt(N)) * D),  N = n_a n_b / (n_a + n_b),
///   Q_KS(t) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 t^2).
KsResult ks_statistic(std::span<const double> sample_a, std::span<const double> sample_b);

/// Kolmogorov complementary distribution Q_KS(t).
double kolmogorov_q(double t);

}  // namespace rfc

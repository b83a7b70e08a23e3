#include "rfc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "rfc/error.hpp"

namespace rfc {

namespace {

std::size_t infer_size(std::span<const int> values) {
  int mx = -1;
  for (int v : values) {
    if (v < 0) throw InvalidArgument("negative label or group id");
    mx = std::max(mx, v);
  }
  return static_cast<std::size_t>(mx + 1);
}

void require_aligned(std::size_t a, std::size_t b) {
  if (a != b)
    throw InvalidArgument("misaligned inputs: " + std::to_string(a) + " vs " + std::to_string(b) + " samples");
}

// Dense relabeling, first-seen order.
std::vector<std::size_t> densify(std::span<const int> values, std::size_t& count) {
  std::map<int, std::size_t> ids;
  std::vector<std::size_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto [it, inserted] = ids.emplace(values[i], ids.size());
    out[i] = it->second;
  }
  count = ids.size();
  return out;
}

double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

}  // namespace

ContingencyTable contingency(std::span<const int> labels, std::span<const int> groups, std::size_t num_clusters,
                             std::size_t num_groups) {
  require_aligned(labels.size(), groups.size());
  const std::size_t k_inferred = infer_size(labels);
  const std::size_t l_inferred = infer_size(groups);
  ContingencyTable t;
  t.num_clusters = num_clusters ? num_clusters : k_inferred;
  t.num_groups = num_groups ? num_groups : l_inferred;
  if (k_inferred > t.num_clusters || l_inferred > t.num_groups)
    throw InvalidArgument("label or group id exceeds the declared table size");
  t.counts.assign(t.num_clusters * t.num_groups, 0);
  t.cluster_sizes.assign(t.num_clusters, 0);
  t.group_sizes.assign(t.num_groups, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto k = static_cast<std::size_t>(labels[i]);
    const auto g = static_cast<std::size_t>(groups[i]);
    ++t.counts[k * t.num_groups + g];
    ++t.cluster_sizes[k];
    ++t.group_sizes[g];
  }
  t.total = labels.size();
  return t;
}

double balance(std::span<const int> labels, std::span<const int> groups, std::size_t num_clusters) {
  if (labels.empty()) return 0.0;
  const auto t = contingency(labels, groups, num_clusters);
  const double n = static_cast<double>(t.total);
  double best = 1.0;
  for (std::size_t k = 0; k < t.num_clusters; ++k) {
    const double nk = static_cast<double>(t.cluster_sizes[k]);
    for (std::size_t g = 0; g < t.num_groups; ++g) {
      if (t.group_sizes[g] == 0) continue;
      const std::size_t c = t.at(k, g);
      if (c == 0) return 0.0;
      const double dataset_share = static_cast<double>(t.group_sizes[g]) / n;
      const double cluster_share = static_cast<double>(c) / nk;
      const double r = dataset_share / cluster_share;
      best = std::min(best, std::min(r, 1.0 / r));
    }
  }
  return best;
}

EntropyResult entropy_detailed(std::span<const int> labels, std::span<const int> groups, std::size_t num_clusters) {
  EntropyResult out;
  if (labels.empty()) return out;
  const auto t = contingency(labels, groups, num_clusters);
  double sum = 0.0;
  std::size_t present_groups = 0;
  for (std::size_t g = 0; g < t.num_groups; ++g) {
    if (t.group_sizes[g] == 0) continue;
    ++present_groups;
    double h = 0.0;
    for (std::size_t k = 0; k < t.num_clusters; ++k) {
      if (t.cluster_sizes[k] == 0) {
        out.had_empty_cluster = true;
        continue;
      }
      const double share = static_cast<double>(t.at(k, g)) / static_cast<double>(t.cluster_sizes[k]);
      h -= xlogx(share);
    }
    sum += h;
  }
  out.value = present_groups ? sum / static_cast<double>(present_groups) : 0.0;
  return out;
}

double entropy(std::span<const int> labels, std::span<const int> groups, std::size_t num_clusters) {
  return entropy_detailed(labels, groups, num_clusters).value;
}

double nmi(std::span<const int> labels, std::span<const int> truth) {
  require_aligned(labels.size(), truth.size());
  if (labels.empty()) return 1.0;
  std::size_t ka = 0, kb = 0;
  const auto a = densify(labels, ka);
  const auto b = densify(truth, kb);
  if (ka == 1 || kb == 1) {
    // Constant on at least one side: identical partitions only if both are constant.
    return (ka == 1 && kb == 1) ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(labels.size());
  std::vector<double> joint(ka * kb, 0.0), pa(ka, 0.0), pb(kb, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[a[i] * kb + b[i]] += 1.0;
    pa[a[i]] += 1.0;
    pb[b[i]] += 1.0;
  }
  double ha = 0.0, hb = 0.0, mi = 0.0;
  for (double c : pa) ha -= xlogx(c / n);
  for (double c : pb) hb -= xlogx(c / n);
  for (std::size_t i = 0; i < ka; ++i)
    for (std::size_t j = 0; j < kb; ++j) {
      const double c = joint[i * kb + j];
      if (c > 0.0) mi += (c / n) * std::log(c * n / (pa[i] * pb[j]));
    }
  const double value = mi / (0.5 * (ha + hb));
  return std::clamp(value, 0.0, 1.0);
}

std::vector<std::size_t> hungarian_min_cost(std::span<const double> cost, std::size_t m) {
  if (cost.size() != m * m) throw InvalidArgument("hungarian: cost matrix must be square");
  if (m == 0) return {};
  // Shortest augmenting path with row/column potentials, 1-based internals.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(m + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> match_col(m + 1, 0), way(m + 1, 0);
  for (std::size_t row = 1; row <= m; ++row) {
    match_col[0] = row;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match_col[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match_col[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match_col[j0] = match_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(m);
  for (std::size_t j = 1; j <= m; ++j) assignment[match_col[j] - 1] = j - 1;
  return assignment;
}

double acc(std::span<const int> labels, std::span<const int> truth, std::size_t cap) {
  require_aligned(labels.size(), truth.size());
  if (labels.empty()) throw InvalidArgument("acc: empty labeling");
  std::size_t ka = 0, kb = 0;
  const auto a = densify(labels, ka);
  const auto b = densify(truth, kb);
  if (ka > cap || kb > cap)
    throw InvalidArgument("acc: " + std::to_string(std::max(ka, kb)) + " clusters/classes exceed the matcher cap of " +
                          std::to_string(cap) + "; raise the cap");
  const std::size_t m = std::max(ka, kb);
  std::vector<double> profit(m * m, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) profit[a[i] * m + b[i]] += 1.0;
  std::vector<double> cost(m * m);
  for (std::size_t i = 0; i < m * m; ++i) cost[i] = -profit[i];
  const auto assignment = hungarian_min_cost(cost, m);
  double matched = 0.0;
  for (std::size_t r = 0; r < m; ++r) matched += profit[r * m + assignment[r]];
  return matched / static_cast<double>(labels.size());
}

double kolmogorov_q(double t) {
  if (t < 1e-3) return 1.0;
  double sum = 0.0;
  double sign = 1.0;
  for (int j = 1; j <= 200; ++j) {
    const double term = sign * std::exp(-2.0 * j * j * t * t);
    sum += term;
    if (std::abs(term) < 1e-16) break;
    sign = -sign;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

KsResult ks_statistic(std::span<const double> sample_a, std::span<const double> sample_b) {
  if (sample_a.empty() || sample_b.empty()) throw InvalidArgument("ks_statistic: both samples must be non-empty");
  std::vector<double> a(sample_a.begin(), sample_a.end()), b(sample_b.begin(), sample_b.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  KsResult r;
  r.statistic = d;
  const double en = std::sqrt(na * nb / (na + nb));
  r.p_value = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
  return r;
}

}  // namespace rfc

#include "rfc/clusterers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "rfc/error.hpp"

namespace rfc {

namespace {

enum class Norm { kL2Squared, kL1 };

double distance(Norm norm, const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  if (norm == Norm::kL2Squared) return (a - b).squaredNorm();
  return (a - b).cwiseAbs().sum();
}

int nearest_center(Norm norm, const Matrix& centers, const Eigen::Ref<const Vector>& point, double* dist_out) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    const double dd = distance(norm, centers.row(c).transpose(), point);
    if (dd < best_d) {
      best_d = dd;
      best = static_cast<int>(c);
    }
  }
  if (dist_out) *dist_out = best_d;
  return best;
}

// Distance-weighted seeding: first center uniform (weight-proportional), then each
// next one drawn with probability proportional to weight * distance to the
// nearest chosen center.
Matrix seed_centers(Norm norm, const Matrix& x, std::span<const double> w, int k, Rng& rng) {
  const auto n = static_cast<std::size_t>(x.rows());
  Matrix centers(k, x.cols());
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(n, false);

  auto pick = [&](const std::vector<double>& score) -> std::size_t {
    const double total = std::accumulate(score.begin(), score.end(), 0.0);
    if (!(total > 0.0)) {
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) return i;
      return 0;
    }
    double target = rng.uniform() * total;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (score[i] <= 0.0) continue;
      last_positive = i;
      if (target < score[i]) return i;
      target -= score[i];
    }
    return last_positive;
  };

  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) score[i] = w[i];
  for (int c = 0; c < k; ++c) {
    const std::size_t idx = pick(score);
    chosen[idx] = true;
    centers.row(c) = x.row(static_cast<Eigen::Index>(idx));
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], distance(norm, x.row(static_cast<Eigen::Index>(i)).transpose(),
                                                 centers.row(c).transpose()));
      score[i] = chosen[i] ? 0.0 : w[i] * nearest[i];
    }
  }
  return centers;
}

double weighted_median(std::vector<std::pair<double, double>>& values) {
  std::sort(values.begin(), values.end());
  double total = 0.0;
  for (const auto& v : values) total += v.second;
  double acc = 0.0;
  for (const auto& v : values) {
    acc += v.second;
    if (acc >= 0.5 * total) return v.first;
  }
  return values.back().first;
}

struct RunResult {
  std::vector<int> labels;
  Matrix centers;
  double objective = 0.0;
  std::vector<double> history;
};

double assign(Norm norm, const Matrix& x, std::span<const double> w, const Matrix& centers, std::vector<int>& labels,
              std::vector<double>& dist) {
  double obj = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double d = 0.0;
    labels[static_cast<std::size_t>(i)] = nearest_center(norm, centers, x.row(i).transpose(), &d);
    dist[static_cast<std::size_t>(i)] = d;
    obj += w[static_cast<std::size_t>(i)] * d;
  }
  return obj;
}

RunResult run_once(Norm norm, const Matrix& x, std::span<const double> w, const ClustererConfig& config, Seed seed) {
  Rng rng(seed);
  const auto n = static_cast<std::size_t>(x.rows());
  const int k = config.k;
  RunResult r;
  r.centers = seed_centers(norm, x, w, k, rng);
  r.labels.assign(n, 0);
  std::vector<double> dist(n, 0.0);
  r.objective = assign(norm, x, w, r.centers, r.labels, dist);
  r.history.push_back(r.objective);

  std::vector<int> next_labels(n);
  for (int it = 0; it < config.max_iters; ++it) {
    Matrix next = Matrix::Zero(k, x.cols());
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < n; ++i) members[static_cast<std::size_t>(r.labels[i])].push_back(i);

    std::vector<double> cost = dist;  // for empty-cluster repair
    for (std::size_t i = 0; i < n; ++i) cost[i] *= w[i];
    for (int c = 0; c < k; ++c) {
      const auto& m = members[static_cast<std::size_t>(c)];
      if (m.empty()) {
        // Reseed at the currently worst-served point.
        std::size_t far = 0;
        for (std::size_t i = 1; i < n; ++i)
          if (cost[i] > cost[far]) far = i;
        next.row(c) = x.row(static_cast<Eigen::Index>(far));
        cost[far] = -1.0;
        continue;
      }
      if (norm == Norm::kL2Squared) {
        double wsum = 0.0;
        for (auto i : m) {
          next.row(c) += w[i] * x.row(static_cast<Eigen::Index>(i));
          wsum += w[i];
        }
        next.row(c) /= wsum;
      } else {
        std::vector<std::pair<double, double>> column(m.size());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
          for (std::size_t t = 0; t < m.size(); ++t) column[t] = {x(static_cast<Eigen::Index>(m[t]), j), w[m[t]]};
          next(c, j) = weighted_median(column);
        }
      }
    }
    const double shift = (next - r.centers).rowwise().norm().maxCoeff();
    r.centers = std::move(next);
    const double obj = assign(norm, x, w, r.centers, next_labels, dist);
    const bool changed = next_labels != r.labels;
    r.labels.swap(next_labels);
    r.objective = obj;
    r.history.push_back(obj);
    if (!changed || shift <= config.tolerance) break;
  }
  return r;
}

CenterClustering run_restarts(Norm norm, const Matrix& x, std::span<const double> weights,
                              const ClustererConfig& config) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (config.k < 1) throw InvalidArgument("K must be >= 1");
  if (static_cast<std::size_t>(config.k) > n)
    throw InvalidArgument("K = " + std::to_string(config.k) + " exceeds the number of samples " + std::to_string(n));
  if (config.restarts < 1 || config.max_iters < 1) throw InvalidArgument("restarts and max_iters must be >= 1");
  std::vector<double> w(n, 1.0);
  if (!weights.empty()) {
    if (weights.size() != n) throw InvalidArgument("one weight per row required");
    for (std::size_t i = 0; i < n; ++i) {
      if (!(weights[i] > 0.0)) throw InvalidArgument("weights must be positive");
      w[i] = weights[i];
    }
  }

  CenterClustering best;
  bool have = false;
  for (int r = 0; r < config.restarts; ++r) {
    RunResult run = run_once(norm, x, w, config, derive_seed(config.seed, static_cast<std::uint64_t>(r)));
    if (!have || run.objective < best.objective) {
      best.clustering = Clustering(std::move(run.labels), config.k);
      best.centers = std::move(run.centers);
      best.objective = run.objective;
      best.history = std::move(run.history);
      best.winning_restart = r;
      have = true;
    }
  }
  return best;
}

}  // namespace

int nearest_center_l2(const Matrix& centers, const Eigen::Ref<const Vector>& point) {
  return nearest_center(Norm::kL2Squared, centers, point, nullptr);
}

int nearest_center_l1(const Matrix& centers, const Eigen::Ref<const Vector>& point) {
  return nearest_center(Norm::kL1, centers, point, nullptr);
}

CenterClustering kmeans(const Matrix& x, const ClustererConfig& config) {
  return run_restarts(Norm::kL2Squared, x, {}, config);
}

CenterClustering kmedian(const Matrix& x, const ClustererConfig& config, std::span<const double> weights) {
  return run_restarts(Norm::kL1, x, weights, config);
}

// ---------------------------------------------------------------------------

bool fairlet_satisfies_bound(const Fairlet& fairlet, std::span<const int> groups) {
  std::size_t c0 = 0, c1 = 0;
  for (auto i : fairlet.members) (groups[i] == 0 ? c0 : c1)++;
  if (c0 == 0 || c1 == 0) return false;
  // c0/c1 in [p/q, q/p]  <=>  q*c0 >= p*c1 and p*c0 <= q*c1
  const auto p = static_cast<std::size_t>(fairlet.p), q = static_cast<std::size_t>(fairlet.q);
  return q * c0 >= p * c1 && p * c0 <= q * c1;
}

std::vector<Fairlet> fairlet_decompose(const Matrix& x, std::span<const int> groups, int p, int q, Seed seed) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (groups.size() != n) throw InvalidArgument("group vector does not match the number of rows");
  if (p < 1 || q < p) throw InvalidArgument("fairlet parameters need 1 <= p <= q");
  for (int g : groups)
    if (g != 0 && g != 1)
      throw InvalidArgument("fairlet decomposition supports exactly two protected groups (ids 0 and 1); "
                            "use the consensus defense for more groups");

  std::vector<std::size_t> by_group[2];
  for (std::size_t i = 0; i < n; ++i) by_group[groups[i]].push_back(i);
  const int minority_group = by_group[0].size() <= by_group[1].size() ? 0 : 1;
  std::vector<std::size_t> minority = by_group[minority_group];
  const std::vector<std::size_t>& majority = by_group[1 - minority_group];
  const std::size_t a = minority.size(), b = majority.size();
  const std::size_t e = b - a;
  const auto up = static_cast<std::size_t>(p), uq = static_cast<std::size_t>(q);

  // Shape plan: list of (minority count, majority count).
  std::vector<std::pair<std::size_t, std::size_t>> heavy;
  std::size_t pairs = 0;
  bool feasible = true;
  if (e > 0) {
    if (uq == up || a == 0) {
      feasible = false;
    } else {
      const std::size_t t = (e + (uq - up) - 1) / (uq - up);
      if (t * up > a) {
        feasible = false;
      } else {
        for (std::size_t i = 0; i + 1 < t; ++i) heavy.emplace_back(up, uq);
        heavy.emplace_back(up, up + (e - (t - 1) * (uq - up)));
        pairs = a - t * up;
      }
    }
  } else {
    pairs = a;
  }
  if (!feasible) {
    heavy.clear();
    const std::size_t h = std::min(a / up, b / uq);
    for (std::size_t i = 0; i < h; ++i) heavy.emplace_back(up, uq);
    pairs = 0;
  }

  Rng rng(derive_seed(seed, 0xfa1e7));
  rng.shuffle(std::span<std::size_t>(minority));

  std::vector<bool> used(n, false);
  auto nearest_unused = [&](std::size_t anchor, const std::vector<std::size_t>& pool) -> std::size_t {
    std::size_t best = n;
    double best_d = std::numeric_limits<double>::infinity();
    for (auto j : pool) {  // pools are in increasing index order
      if (used[j]) continue;
      const double dd = (x.row(static_cast<Eigen::Index>(j)) - x.row(static_cast<Eigen::Index>(anchor))).squaredNorm();
      if (dd < best_d) {
        best_d = dd;
        best = j;
      }
    }
    return best;
  };
  const std::vector<std::size_t>& minority_sorted = by_group[minority_group];

  std::vector<Fairlet> out;
  std::size_t cursor = 0;
  auto next_seed = [&]() -> std::size_t {
    while (cursor < minority.size() && used[minority[cursor]]) ++cursor;
    return cursor < minority.size() ? minority[cursor] : n;
  };

  for (const auto& [mi, mj] : heavy) {
    const std::size_t s = next_seed();
    if (s == n) break;
    Fairlet f{{s}, p, q, false};
    used[s] = true;
    for (std::size_t t = 1; t < mi; ++t) {
      const std::size_t j = nearest_unused(s, minority_sorted);
      if (j == n) break;
      used[j] = true;
      f.members.push_back(j);
    }
    for (std::size_t t = 0; t < mj; ++t) {
      const std::size_t j = nearest_unused(s, majority);
      if (j == n) break;
      used[j] = true;
      f.members.push_back(j);
    }
    std::sort(f.members.begin(), f.members.end());
    out.push_back(std::move(f));
  }
  for (std::size_t t = 0; t < pairs; ++t) {
    const std::size_t s = next_seed();
    if (s == n) break;
    used[s] = true;
    const std::size_t j = nearest_unused(s, majority);
    Fairlet f{{s}, p, q, false};
    if (j != n) {
      used[j] = true;
      f.members.push_back(j);
    }
    std::sort(f.members.begin(), f.members.end());
    out.push_back(std::move(f));
  }
  Fairlet rest{{}, p, q, true};
  for (std::size_t i = 0; i < n; ++i)
    if (!used[i]) rest.members.push_back(i);
  if (!rest.members.empty()) out.push_back(std::move(rest));
  return out;
}

std::size_t l1_medoid(const Matrix& x, std::span<const std::size_t> members) {
  if (members.empty()) throw InvalidArgument("medoid of an empty set");
  std::size_t best = members[0];
  double best_cost = std::numeric_limits<double>::infinity();
  for (auto i : members) {
    double cost = 0.0;
    for (auto j : members)
      cost += (x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).cwiseAbs().sum();
    if (cost < best_cost || (cost == best_cost && i < best)) {
      best_cost = cost;
      best = i;
    }
  }
  return best;
}

FairClusteringResult fair_cluster_detailed(const Matrix& x, std::span<const int> groups, const ClustererConfig& config,
                                           int p, int q) {
  FairClusteringResult result;
  result.fairlets = fairlet_decompose(x, groups, p, q, config.seed);

  // One representative per fairlet; remainder members represent themselves.
  std::vector<std::size_t> reps;
  std::vector<double> weights;
  std::vector<std::vector<std::size_t>> owned;
  for (const auto& f : result.fairlets) {
    if (f.remainder) {
      for (auto i : f.members) {
        reps.push_back(i);
        weights.push_back(1.0);
        owned.push_back({i});
      }
    } else {
      reps.push_back(l1_medoid(x, f.members));
      weights.push_back(static_cast<double>(f.members.size()));
      owned.push_back(f.members);
    }
  }
  if (static_cast<std::size_t>(config.k) > reps.size())
    throw InvalidArgument("K = " + std::to_string(config.k) + " exceeds the number of fairlets (" +
                          std::to_string(reps.size()) + ")");

  const Matrix medoids = gather_rows(x, reps);
  const auto centers = kmedian(medoids, config, weights);
  std::vector<int> labels(static_cast<std::size_t>(x.rows()), 0);
  for (std::size_t r = 0; r < reps.size(); ++r)
    for (auto i : owned[r]) labels[i] = centers.clustering.labels()[r];
  result.clustering = Clustering(std::move(labels), config.k);
  return result;
}

Clustering fair_cluster(const Matrix& x, std::span<const int> groups, const ClustererConfig& config, int p, int q) {
  return fair_cluster_detailed(x, groups, config, p, q).clustering;
}

}  // namespace rfc

#pragma once

// Vanilla k-means / k-median and the fairlet-based fair clusterer.

#include <span>
#include <vector>

#include "rfc/core_data.hpp"
#include "rfc/rng.hpp"

namespace rfc {

struct ClustererConfig {
  int k = 2;
  int max_iters = 100;
  int restarts = 10;
  Seed seed = 0;
  double tolerance = 0.0;  ///< stop once no center moves farther than this
};

/// Best-of-restarts result of a center-based clusterer.
struct CenterClustering {
  Clustering clustering;
  Matrix centers;                  ///< K x d
  double objective = 0.0;          ///< sum of squared L2 (k-means) or L1 (k-median) distances
  std::vector<double> history;     ///< objective after each assignment step of the winning restart
  int winning_restart = 0;
};

/// Lloyd's algorithm with distance-weighted seeding; lowest SSE over restarts
/// wins (ties go to the lower restart index).
CenterClustering kmeans(const Matrix& x, const ClustererConfig& config);

/// L1 alternating minimization with coordinate-wise (weighted) median centers.
/// `weights` is empty or one positive weight per row.
CenterClustering kmedian(const Matrix& x, const ClustererConfig& config, std::span<const double> weights = {});

/// Index of the nearest center; ties go to the lowest index.
int nearest_center_l2(const Matrix& centers, const Eigen::Ref<const Vector>& point);
int nearest_center_l1(const Matrix& centers, const Eigen::Ref<const Vector>& point);

// ---------------------------------------------------------------------------
// Fairlets

struct Fairlet {
  std::vector<std::size_t> members;
  int p = 1;
  int q = 1;
  bool remainder = false;  ///< leftovers that could not be packed within the ratio bound
};

/// True when the two-group count ratio of `members` lies in [p/q, q/p].
bool fairlet_satisfies_bound(const Fairlet& fairlet, std::span<const int> groups);

/// Greedy (p, q)-fairlet decomposition for exactly two groups.
///
/// Shape plan: with a = |minority|, b = |majority| and surplus e = b - a, use
/// t = ceil(e / (q - p)) "heavy" fairlets that each absorb up to q - p surplus
/// majority points ((t-1) of shape (p, q) and one of shape (p, p + rest)); the
/// remaining minority/majority points form (1, 1) pairs. When t * p > a the
/// bound cannot be met for everyone: floor(a / p) heavy fairlets of shape
/// (p, q) are built and all other points go to a single remainder fairlet.
///
/// Geometry: minority points are visited in a seeded random order. A heavy
/// fairlet takes the next minority point as its seed, adds the p - 1 nearest
/// unassigned minority points and the nearest unassigned majority points; a
/// pair joins a minority point with its nearest unassigned majority point.
/// Distances are Euclidean, ties go to the lowest index.
std::vector<Fairlet> fairlet_decompose(const Matrix& x, std::span<const int> groups, int p, int q, Seed seed);

/// Member minimizing the summed L1 distance to the other members (lowest index on ties).
std::size_t l1_medoid(const Matrix& x, std::span<const std::size_t> members);

struct FairClusteringResult {
  Clustering clustering;
  std::vector<Fairlet> fairlets;
};

/// Fairlet decomposition, one L1 medoid per fairlet (remainder members stand
/// alone), k-median over the medoids weighted by fairlet size, and every member
/// inheriting its representative's cluster.
FairClusteringResult fair_cluster_detailed(const Matrix& x, std::span<const int> groups, const ClustererConfig& config,
                                           int p = 2, int q = 5);
Clustering fair_cluster(const Matrix& x, std::span<const int> groups, const ClustererConfig& config, int p = 2,
                        int q = 5);

}  // namespace rfc

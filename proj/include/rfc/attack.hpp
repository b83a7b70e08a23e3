#pragma once

// Black-box fairness attack: choose protected-group values for the attacked
// indices so that the fair clusterer's output is as unfair as possible on the
// defended indices. The clusterer is only ever queried, never inspected.

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfc/core_data.hpp"
#include "rfc/rng.hpp"

namespace rfc {

enum class FairnessMetric { kBalance, kEntropy };

std::string to_string(FairnessMetric metric);
FairnessMetric fairness_metric_from_string(const std::string& name);

/// Maps a full-length group vector to a clustering of all samples.
using ClusteringOracle = std::function<Clustering(std::span<const int> groups)>;

/// Sampling-and-classification search settings.
struct RacosParams {
  int sample_size = 20;     ///< new candidates per generation (and size of the initial sample)
  int positive_size = 2;    ///< best points kept as region anchors
  double exploit_prob = 0.9;
  int max_free_coords = 1;  ///< coordinates left free after the region excludes all negatives
  int max_redraws = 64;     ///< attempts to draw an unseen point before falling back to enumeration
};

struct AttackProblem {
  Dataset dataset;
  AttackSplit split;
  int k = 2;
  FairnessMetric target_metric = FairnessMetric::kBalance;
  ClusteringOracle fair_algo;
  int query_budget = 1000;
  Seed seed = 0;
  RacosParams racos;
};

struct AttackResult {
  GroupAssignment best_assignment;
  double best_objective = 0.0;
  std::vector<std::pair<std::size_t, double>> query_trace;
  double pre_attack_objective = 0.0;
  FairnessMetric metric = FairnessMetric::kBalance;
};

std::string attack_result_to_json(const AttackResult& result);
AttackResult attack_result_from_json(const std::string& text);

/// Target fairness value on the defended samples when the attacked samples
/// carry `candidate`. One oracle query.
double fairness_objective(const AttackProblem& problem, const GroupAssignment& candidate);

using DiscreteObjective = std::function<double(std::span<const int>)>;

struct RacosResult {
  std::vector<int> best_point;
  double best_value = 0.0;
  std::vector<std::pair<std::size_t, double>> trace;
};

/// Minimizes `objective` over the product of alphabets [0, alphabet[j]).
/// `initial` points are evaluated first, in order. No point is evaluated
/// twice; the search stops early once the whole space has been visited.
/// Throws if budget < sample_size.
RacosResult racos_minimize(const DiscreteObjective& objective, std::span<const int> alphabet, int budget,
                           const RacosParams& params, Seed seed, std::span<const std::vector<int>> initial = {});

/// Optimized attack; the unperturbed assignment is always the first query.
AttackResult attack_fairness(const AttackProblem& problem);

/// Baseline: one uniformly random assignment. The pre-attack value is
/// evaluated separately and is not part of the trace.
AttackResult random_attack(const AttackProblem& problem);

}  // namespace rfc

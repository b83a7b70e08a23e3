#include "rfc/attack.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <optional>
#include <set>

#include <json.hpp>

#include "rfc/error.hpp"
#include "rfc/metrics.hpp"

namespace rfc {

std::string to_string(FairnessMetric metric) {
  return metric == FairnessMetric::kBalance ? "balance" : "entropy";
}

FairnessMetric fairness_metric_from_string(const std::string& name) {
  if (name == "balance") return FairnessMetric::kBalance;
  if (name == "entropy") return FairnessMetric::kEntropy;
  throw InvalidArgument("unknown fairness metric '" + name + "' (expected balance or entropy)");
}

std::string attack_result_to_json(const AttackResult& result) {
  nlohmann::ordered_json j;
  j["metric"] = to_string(result.metric);
  j["pre"] = result.pre_attack_objective;
  j["best"] = result.best_objective;
  auto trace = nlohmann::ordered_json::array();
  for (const auto& [i, v] : result.query_trace) trace.push_back(nlohmann::ordered_json::array({i, v}));
  j["trace"] = std::move(trace);
  j["assignment"] = result.best_assignment.values;
  return j.dump();
}

AttackResult attack_result_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    AttackResult r;
    if (j.contains("metric")) r.metric = fairness_metric_from_string(j.at("metric").get<std::string>());
    r.pre_attack_objective = j.at("pre").get<double>();
    r.best_objective = j.at("best").get<double>();
    for (const auto& e : j.at("trace")) r.query_trace.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<double>());
    r.best_assignment.values = j.at("assignment").get<std::vector<int>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, "", std::string("attack result JSON: ") + e.what());
  }
}

double fairness_objective(const AttackProblem& problem, const GroupAssignment& candidate) {
  const auto defended = gather(problem.dataset.groups(), problem.split.defended());
  const auto full = merge_groups(candidate, GroupAssignment{defended}, problem.split);
  const Clustering output = problem.fair_algo(full);
  if (output.size() != problem.split.n())
    throw InvalidArgument("oracle returned a clustering of " + std::to_string(output.size()) + " samples, expected " +
                          std::to_string(problem.split.n()));
  const auto labels = restrict_labels(output, problem.split);
  const auto k = static_cast<std::size_t>(output.k());
  return problem.target_metric == FairnessMetric::kBalance ? balance(labels, defended, k)
                                                           : entropy(labels, defended, k);
}

// ---------------------------------------------------------------------------
// RACOS

namespace {

struct Evaluated {
  std::vector<int> point;
  double value;
  std::size_t order;  // first-seen order, breaks value ties
};

bool better(const Evaluated& a, const Evaluated& b) {
  return a.value < b.value || (a.value == b.value && a.order < b.order);
}

// Number of points in the search space, saturating at `cap`.
std::uint64_t space_size(std::span<const int> alphabet, std::uint64_t cap) {
  std::uint64_t s = 1;
  for (int a : alphabet) {
    if (s > cap / static_cast<std::uint64_t>(a)) return cap;
    s *= static_cast<std::uint64_t>(a);
  }
  return s;
}

std::vector<int> decode(std::uint64_t index, std::span<const int> alphabet) {
  std::vector<int> p(alphabet.size());
  for (std::size_t j = 0; j < alphabet.size(); ++j) {
    p[j] = static_cast<int>(index % static_cast<std::uint64_t>(alphabet[j]));
    index /= static_cast<std::uint64_t>(alphabet[j]);
  }
  return p;
}

class Search {
 public:
  Search(const DiscreteObjective& objective, std::span<const int> alphabet, int budget, const RacosParams& params,
         Seed seed)
      : objective_(objective),
        alphabet_(alphabet.begin(), alphabet.end()),
        budget_(static_cast<std::size_t>(budget)),
        params_(params),
        rng_(seed),
        space_(space_size(alphabet, kEnumerationCap + 1)) {}

  bool exhausted() const { return seen_.size() >= space_ || evaluations() >= budget_; }
  std::size_t evaluations() const { return trace_.size(); }

  // Evaluates an unseen point; returns false if it was already seen or the budget is spent.
  bool evaluate(const std::vector<int>& p, std::vector<Evaluated>* sink) {
    if (evaluations() >= budget_ || seen_.count(p)) return false;
    seen_.insert(p);
    const double v = objective_(p);
    const std::size_t order = trace_.size();
    trace_.emplace_back(order, v);
    if (!have_best_ || v < best_.value) {
      best_ = Evaluated{p, v, order};
      have_best_ = true;
    }
    if (sink) sink->push_back(Evaluated{p, v, order});
    return true;
  }

  std::vector<int> uniform_point() {
    std::vector<int> p(alphabet_.size());
    for (std::size_t j = 0; j < p.size(); ++j) p[j] = static_cast<int>(rng_.below(static_cast<std::size_t>(alphabet_[j])));
    return p;
  }

  // Region around a random positive that excludes every negative, then shrunk to
  // at most max_free_coords free coordinates.
  std::vector<int> region_point(const std::vector<Evaluated>& positives, const std::vector<Evaluated>& negatives) {
    const auto& anchor = positives[rng_.below(positives.size())].point;
    const std::size_t dim = alphabet_.size();
    std::vector<bool> free(dim, true);
    std::vector<const std::vector<int>*> inside;
    for (const auto& neg : negatives) inside.push_back(&neg.point);
    while (!inside.empty()) {
      const auto* neg = inside[rng_.below(inside.size())];
      std::vector<std::size_t> diff;
      for (std::size_t j = 0; j < dim; ++j)
        if (free[j] && (*neg)[j] != anchor[j]) diff.push_back(j);
      if (diff.empty()) break;  // identical on all free coordinates; cannot be separated
      const std::size_t j = diff[rng_.below(diff.size())];
      free[j] = false;
      std::erase_if(inside, [&](const std::vector<int>* v) { return (*v)[j] != anchor[j]; });
    }
    std::vector<std::size_t> free_idx;
    for (std::size_t j = 0; j < dim; ++j)
      if (free[j]) free_idx.push_back(j);
    const auto keep = static_cast<std::size_t>(std::max(params_.max_free_coords, 0));
    while (free_idx.size() > keep) {
      const std::size_t t = rng_.below(free_idx.size());
      free[free_idx[t]] = false;
      free_idx.erase(free_idx.begin() + static_cast<std::ptrdiff_t>(t));
    }
    std::vector<int> p = anchor;
    for (auto j : free_idx) p[j] = static_cast<int>(rng_.below(static_cast<std::size_t>(alphabet_[j])));
    return p;
  }

  // Uniform choice among the unseen points (small spaces only).
  std::optional<std::vector<int>> unseen_point() {
    if (space_ > kEnumerationCap) {
      for (int t = 0; t < 16 * params_.max_redraws; ++t) {
        auto p = uniform_point();
        if (!seen_.count(p)) return p;
      }
      return std::nullopt;
    }
    const std::uint64_t remaining = space_ - seen_.size();
    if (remaining == 0) return std::nullopt;
    std::uint64_t target = rng_.below(static_cast<std::size_t>(remaining));
    for (std::uint64_t idx = 0; idx < space_; ++idx) {
      auto p = decode(idx, alphabet_);
      if (seen_.count(p)) continue;
      if (target == 0) return p;
      --target;
    }
    return std::nullopt;
  }

  // Draws with `draw` until an unseen point appears, then falls back to enumeration.
  template <typename Draw>
  std::optional<std::vector<int>> fresh(Draw&& draw) {
    for (int t = 0; t < params_.max_redraws; ++t) {
      auto p = draw();
      if (!seen_.count(p)) return p;
    }
    return unseen_point();
  }

  Rng& rng() { return rng_; }
  const Evaluated& best() const { return best_; }
  bool have_best() const { return have_best_; }
  std::vector<std::pair<std::size_t, double>>& trace() { return trace_; }

 private:
  static constexpr std::uint64_t kEnumerationCap = std::uint64_t{1} << 22;

  const DiscreteObjective& objective_;
  std::vector<int> alphabet_;
  std::size_t budget_;
  RacosParams params_;
  Rng rng_;
  std::uint64_t space_;
  std::set<std::vector<int>> seen_;
  std::vector<std::pair<std::size_t, double>> trace_;
  Evaluated best_{{}, 0.0, 0};
  bool have_best_ = false;
};

}  // namespace

RacosResult racos_minimize(const DiscreteObjective& objective, std::span<const int> alphabet, int budget,
                           const RacosParams& params, Seed seed, std::span<const std::vector<int>> initial) {
  if (params.sample_size < 1 || params.positive_size < 1)
    throw InvalidArgument("racos: sample_size and positive_size must be >= 1");
  if (params.positive_size > params.sample_size)
    throw InvalidArgument("racos: positive_size must not exceed sample_size");
  if (budget < params.sample_size)
    throw InvalidArgument("racos: budget " + std::to_string(budget) + " is smaller than the initial sample of " +
                          std::to_string(params.sample_size));
  for (int a : alphabet)
    if (a < 1) throw InvalidArgument("racos: alphabet sizes must be >= 1");
  for (const auto& p : initial) {
    if (p.size() != alphabet.size()) throw InvalidArgument("racos: initial point has the wrong dimension");
    for (std::size_t j = 0; j < p.size(); ++j)
      if (p[j] < 0 || p[j] >= alphabet[j]) throw InvalidArgument("racos: initial point outside the domain");
  }

  Search search(objective, alphabet, budget, params, seed);
  std::vector<Evaluated> population;
  for (const auto& p : initial) search.evaluate(p, &population);
  while (population.size() < static_cast<std::size_t>(params.sample_size) && !search.exhausted()) {
    auto p = search.fresh([&] { return search.uniform_point(); });
    if (!p) break;
    search.evaluate(*p, &population);
  }

  const auto k = static_cast<std::size_t>(params.positive_size);
  std::vector<Evaluated> positives, negatives;
  auto split_population = [&](std::vector<Evaluated> pool) {
    std::sort(pool.begin(), pool.end(), better);
    const std::size_t kp = std::min(k, pool.size());
    positives.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(kp));
    negatives.assign(pool.begin() + static_cast<std::ptrdiff_t>(kp), pool.end());
  };
  split_population(population);

  while (!search.exhausted() && !positives.empty()) {
    std::vector<Evaluated> batch;
    for (int s = 0; s < params.sample_size && !search.exhausted(); ++s) {
      std::optional<std::vector<int>> p;
      if (search.rng().bernoulli(params.exploit_prob))
        p = search.fresh([&] { return search.region_point(positives, negatives); });
      else
        p = search.fresh([&] { return search.uniform_point(); });
      if (!p) break;
      search.evaluate(*p, &batch);
    }
    if (batch.empty()) break;
    std::vector<Evaluated> pool = positives;
    pool.insert(pool.end(), batch.begin(), batch.end());
    split_population(std::move(pool));
  }

  RacosResult result;
  result.trace = std::move(search.trace());
  if (search.have_best()) {
    result.best_point = search.best().point;
    result.best_value = search.best().value;
  }
  return result;
}

// ---------------------------------------------------------------------------

namespace {

void validate(const AttackProblem& problem) {
  if (!problem.fair_algo) throw InvalidArgument("attack problem has no clustering oracle");
  if (problem.query_budget < 1) throw InvalidArgument("query budget must be >= 1");
  if (problem.split.n() != problem.dataset.n())
    throw InvalidArgument("attack split does not cover the dataset");
}

// Objective wrapper that tags oracle failures with the query index.
DiscreteObjective counted_objective(const AttackProblem& problem, std::size_t& queries) {
  return [&problem, &queries](std::span<const int> point) {
    const std::size_t q = queries++;
    try {
      return fairness_objective(problem, GroupAssignment{std::vector<int>(point.begin(), point.end())});
    } catch (const OracleError&) {
      throw;
    } catch (const std::exception& e) {
      throw OracleError(q, e.what());
    }
  };
}

}  // namespace

AttackResult attack_fairness(const AttackProblem& problem) {
  validate(problem);
  const std::vector<int> alphabet(problem.split.attacked().size(), problem.dataset.num_groups());
  const std::vector<std::vector<int>> initial{gather(problem.dataset.groups(), problem.split.attacked())};

  RacosParams params = problem.racos;
  params.sample_size = std::min(params.sample_size, problem.query_budget);
  params.positive_size = std::min(params.positive_size, params.sample_size);

  std::size_t queries = 0;
  auto r = racos_minimize(counted_objective(problem, queries), alphabet, problem.query_budget, params,
                                problem.seed, initial);

  AttackResult out;
  out.metric = problem.target_metric;
  out.pre_attack_objective = r.trace.front().second;
  out.best_assignment.values = r.best_point;
  out.best_objective = r.best_value;
  out.query_trace = std::move(r.trace);
  return out;
}

AttackResult random_attack(const AttackProblem& problem) {
  validate(problem);
  Rng rng(derive_seed(problem.seed, 0x2a4d));
  const auto L = static_cast<std::size_t>(problem.dataset.num_groups());
  GroupAssignment candidate;
  candidate.values.resize(problem.split.attacked().size());
  for (auto& v : candidate.values) v = static_cast<int>(rng.below(L));

  AttackResult out;
  out.metric = problem.target_metric;
  out.pre_attack_objective =
      fairness_objective(problem, GroupAssignment{gather(problem.dataset.groups(), problem.split.attacked())});
  std::size_t queries = 0;
  const auto objective = counted_objective(problem, queries);
  out.best_objective = objective(candidate.values);
  out.best_assignment = std::move(candidate);
  out.query_trace.emplace_back(0, out.best_objective);
  return out;
}

}  // namespace rfc

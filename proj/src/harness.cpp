#include "rfc/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rfc/clusterers.hpp"
#include "rfc/error.hpp"
#include "rfc/metrics.hpp"

namespace rfc {

using ojson = nlohmann::ordered_json;

std::string to_string(Algorithm a) { return a == Algorithm::kFairCluster ? "fair_cluster" : "cfc"; }

std::string to_string(AttackKind a) {
  switch (a) {
    case AttackKind::kNone: return "none";
    case AttackKind::kOptimized: return "optimized";
    case AttackKind::kRandom: return "random";
  }
  return "none";
}

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "fair_cluster") return Algorithm::kFairCluster;
  if (s == "cfc") return Algorithm::kCfc;
  throw InvalidArgument("unknown algorithm '" + s + "' (expected fair_cluster or cfc)");
}

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "none") return AttackKind::kNone;
  if (s == "optimized") return AttackKind::kOptimized;
  if (s == "random") return AttackKind::kRandom;
  throw InvalidArgument("unknown attack '" + s + "' (expected none, optimized or random)");
}

// ---------------------------------------------------------------------------
// Config

void validate(const ExperimentConfig& config) {
  if (config.fractions.empty()) throw InvalidArgument("config: at least one fraction is required");
  for (double f : config.fractions)
    if (!(f >= 0.0 && f <= 1.0)) throw InvalidArgument("config: fractions must lie in [0, 1]");
  if (config.seeds.empty()) throw InvalidArgument("config: at least one seed is required");
  if (config.algorithms.empty()) throw InvalidArgument("config: at least one algorithm is required");
  if (config.attacks.empty()) throw InvalidArgument("config: at least one attack kind is required");
  if (config.k < 1) throw InvalidArgument("config: k must be >= 1");
  if (config.budget < 1) throw InvalidArgument("config: budget must be >= 1");
  if (config.threads < 0) throw InvalidArgument("config: threads must be >= 0");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"source", "dataset source: toy, blobs or csv"},
      {"data", "feature CSV path (source = csv)"},
      {"data_seed", "generator seed for toy / blobs"},
      {"builtin_split", "toy only: attack the generator's own split instead of sweeping fractions"},
      {"blobs.centers", "blob centers, ';' between blobs, ',' between coordinates"},
      {"blobs.stddev", "isotropic blob standard deviation"},
      {"blobs.counts", "points per blob, comma separated"},
      {"blobs.groups", "group rule: alternate, fraction or single"},
      {"blobs.group1_fraction", "per-blob share of group 1 (groups = fraction)"},
      {"algorithms", "comma list of fair_cluster, cfc"},
      {"attacks", "comma list of none, optimized, random"},
      {"fractions", "attacked fractions, comma list in [0, 1]"},
      {"seeds", "run seeds, comma list or a range a..b"},
      {"k", "number of clusters"},
      {"metric", "attack target: balance or entropy"},
      {"auto_entropy", "target entropy when pre-attack balance is 0"},
      {"budget", "oracle queries per optimized attack"},
      {"racos.sample_size", "candidates per generation"},
      {"racos.positive_size", "best points kept as anchors"},
      {"racos.exploit_prob", "probability of sampling inside the learned region"},
      {"racos.max_free_coords", "free coordinates left in a region"},
      {"racos.max_redraws", "draws before falling back to enumeration"},
      {"fairlet.p", "fairlet balance numerator"},
      {"fairlet.q", "fairlet balance denominator"},
      {"cfc.r", "number of basic partitions"},
      {"cfc.row_frac", "row sampling fraction per basic partition"},
      {"cfc.col_frac", "feature sampling fraction per basic partition"},
      {"cfc.k_min", "smallest basic-partition K"},
      {"cfc.k_max", "largest basic-partition K"},
      {"cfc.hops", "neighbourhood hops R"},
      {"cfc.alpha", "fair loss weight"},
      {"cfc.beta", "structural loss weight"},
      {"cfc.tau", "contrastive temperature"},
      {"cfc.epochs", "training epochs"},
      {"cfc.learning_rate", "gradient descent step"},
      {"cfc.grad_clip", "global gradient norm clip"},
      {"cfc.dropout", "dropout rate"},
      {"cfc.hidden", "hidden layer width"},
      {"cfc.embedding", "embedding width"},
      {"cfc.gamma_mode", "matrix_power or elementwise"},
      {"oracle_seed", "seed of the clusterer under attack"},
      {"vary_oracle_seed", "derive a clusterer seed per run seed"},
      {"threads", "worker threads, 0 = hardware concurrency"},
      {"output_dir", "directory for report files"},
  };
  return keys;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& why) {
  throw ParseError(0, key, "invalid value '" + value + "': " + why);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, value, "not a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, value, "expected true or false");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
  std::vector<T> out;
  for (const auto& item : split_on(value, ',')) out.push_back(parse_number<T>(key, item));
  if (out.empty()) bad_value(key, value, "empty list");
  return out;
}

std::vector<Seed> parse_seeds(const std::string& key, const std::string& value) {
  const auto dots = value.find("..");
  if (dots == std::string::npos) return parse_list<Seed>(key, value);
  const auto lo = parse_number<Seed>(key, value.substr(0, dots));
  const auto hi = parse_number<Seed>(key, value.substr(dots + 2));
  if (hi < lo || hi - lo > 1000000) bad_value(key, value, "bad range");
  std::vector<Seed> out;
  for (Seed s = lo; s <= hi; ++s) out.push_back(s);
  return out;
}

template <typename E, typename F>
std::vector<E> parse_enum_list(const std::string& key, const std::string& value, F from) {
  std::vector<E> out;
  for (const auto& item : split_on(value, ',')) {
    try {
      out.push_back(from(item));
    } catch (const InvalidArgument& e) {
      bad_value(key, value, e.what());
    }
  }
  return out;
}

}  // namespace

void apply_config_entry(ExperimentConfig& c, const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string value = trim(raw_value);
  auto& h = c.cfc.hyper;
  auto& sm = c.cfc.sampling;
  auto& src = c.source;
  if (key == "source") {
    if (value == "toy") src.kind = DataSource::Kind::kToy;
    else if (value == "blobs") src.kind = DataSource::Kind::kBlobs;
    else if (value == "csv") src.kind = DataSource::Kind::kCsv;
    else bad_value(key, value, "expected toy, blobs or csv");
  } else if (key == "data") {
    src.path = value;
    src.kind = DataSource::Kind::kCsv;
  } else if (key == "data_seed") src.seed = parse_number<Seed>(key, value);
  else if (key == "builtin_split") src.builtin_split = parse_bool(key, value);
  else if (key == "blobs.centers") {
    src.blobs.centers.clear();
    for (const auto& blob : split_on(value, ';')) src.blobs.centers.push_back(parse_list<double>(key, blob));
  } else if (key == "blobs.stddev") src.blobs.stddev = parse_number<double>(key, value);
  else if (key == "blobs.counts") src.blobs.counts = parse_list<std::size_t>(key, value);
  else if (key == "blobs.groups") {
    using R = BlobSpec::GroupRule;
    if (value == "alternate") src.blobs.group_rule = R::kAlternate;
    else if (value == "fraction") src.blobs.group_rule = R::kFraction;
    else if (value == "single") src.blobs.group_rule = R::kSingle;
    else bad_value(key, value, "expected alternate, fraction or single");
  } else if (key == "blobs.group1_fraction") src.blobs.group1_fraction = parse_list<double>(key, value);
  else if (key == "algorithms") c.algorithms = parse_enum_list<Algorithm>(key, value, algorithm_from_string);
  else if (key == "attacks") c.attacks = parse_enum_list<AttackKind>(key, value, attack_kind_from_string);
  else if (key == "fractions") c.fractions = parse_list<double>(key, value);
  else if (key == "seeds") c.seeds = parse_seeds(key, value);
  else if (key == "k") c.k = parse_number<int>(key, value);
  else if (key == "metric") {
    try {
      c.metric = fairness_metric_from_string(value);
    } catch (const InvalidArgument& e) {
      bad_value(key, value, e.what());
    }
  } else if (key == "auto_entropy") c.auto_entropy = parse_bool(key, value);
  else if (key == "budget") c.budget = parse_number<int>(key, value);
  else if (key == "racos.sample_size") c.racos.sample_size = parse_number<int>(key, value);
  else if (key == "racos.positive_size") c.racos.positive_size = parse_number<int>(key, value);
  else if (key == "racos.exploit_prob") c.racos.exploit_prob = parse_number<double>(key, value);
  else if (key == "racos.max_free_coords") c.racos.max_free_coords = parse_number<int>(key, value);
  else if (key == "racos.max_redraws") c.racos.max_redraws = parse_number<int>(key, value);
  else if (key == "fairlet.p") c.fairlet_p = c.cfc.fairlet_p = parse_number<int>(key, value);
  else if (key == "fairlet.q") c.fairlet_q = c.cfc.fairlet_q = parse_number<int>(key, value);
  else if (key == "cfc.r") sm.r = parse_number<int>(key, value);
  else if (key == "cfc.row_frac") sm.row_frac = parse_number<double>(key, value);
  else if (key == "cfc.col_frac") sm.col_frac = parse_number<double>(key, value);
  else if (key == "cfc.k_min") sm.k_min = parse_number<int>(key, value);
  else if (key == "cfc.k_max") sm.k_max = parse_number<int>(key, value);
  else if (key == "cfc.hops") h.hops = parse_number<int>(key, value);
  else if (key == "cfc.alpha") h.alpha = parse_number<double>(key, value);
  else if (key == "cfc.beta") h.beta = parse_number<double>(key, value);
  else if (key == "cfc.tau") h.tau = parse_number<double>(key, value);
  else if (key == "cfc.epochs") h.epochs = parse_number<int>(key, value);
  else if (key == "cfc.learning_rate") h.learning_rate = parse_number<double>(key, value);
  else if (key == "cfc.grad_clip") h.grad_clip = parse_number<double>(key, value);
  else if (key == "cfc.dropout") h.dropout = parse_number<double>(key, value);
  else if (key == "cfc.hidden") h.hidden = parse_number<int>(key, value);
  else if (key == "cfc.embedding") h.embedding = parse_number<int>(key, value);
  else if (key == "cfc.gamma_mode") {
    if (value == "matrix_power") h.gamma_mode = GammaMode::kMatrixPower;
    else if (value == "elementwise") h.gamma_mode = GammaMode::kElementwise;
    else bad_value(key, value, "expected matrix_power or elementwise");
  } else if (key == "oracle_seed") c.oracle_seed = parse_number<Seed>(key, value);
  else if (key == "vary_oracle_seed") c.vary_oracle_seed = parse_bool(key, value);
  else if (key == "threads") c.threads = parse_number<int>(key, value);
  else if (key == "output_dir") c.output_dir = value;
  else throw ParseError(0, key, "unknown config key");
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(row, "", "expected 'key = value'");
    try {
      apply_config_entry(base, line.substr(0, eq), line.substr(eq + 1));
    } catch (const ParseError& e) {
      throw ParseError(row, e.column(), e.what());
    }
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  return parse_config(read_text(path), std::move(base));
}

// ---------------------------------------------------------------------------
// Experiment

namespace {

}  // namespace

SourceData load_source_data(const DataSource& source) {
  switch (source.kind) {
    case DataSource::Kind::kToy: {
      auto toy = make_toy_dataset(source.seed);
      std::optional<AttackSplit> split;
      if (source.builtin_split) split = toy.split;
      return {std::move(toy.dataset), std::move(split)};
    }
    case DataSource::Kind::kBlobs: {
      BlobSpec spec = source.blobs;
      spec.seed = source.seed;
      return {make_gaussian_blobs(spec), std::nullopt};
    }
    case DataSource::Kind::kCsv:
      return {load_dataset(source.path).dataset, std::nullopt};
  }
  throw InvalidArgument("unknown data source");
}

namespace {

template <typename F>
void parallel_for(std::size_t count, int threads, F&& fn) {
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads) : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  for (auto& t : pool) t.join();
}

std::string describe(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) return err->code() + ": " + err->what();
  return std::string("error: ") + e.what();
}

MetricSet defended_metrics(const Clustering& clustering, const AttackSplit& split, std::span<const int> defended_groups,
                           const std::optional<std::vector<int>>& truth, int k) {
  const auto labels = restrict_labels(clustering, split);
  MetricSet m;
  m.balance = balance(labels, defended_groups, static_cast<std::size_t>(k));
  m.entropy = entropy(labels, defended_groups, static_cast<std::size_t>(k));
  if (truth) {
    const auto t = gather(*truth, split.defended());
    m.nmi = nmi(labels, t);
    m.acc = acc(labels, t);
  }
  return m;
}

struct OracleSlot {
  ClusteringOracle oracle;
  Clustering pre;
  std::string error;
};

}  // namespace

Dataset load_source(const DataSource& source) { return load_source_data(source).dataset; }

ClusteringOracle make_oracle(Algorithm algorithm, const Matrix& x, const ExperimentConfig& config, Seed seed) {
  auto features = std::make_shared<const Matrix>(x);
  const int k = config.k;
  const int p = config.fairlet_p, q = config.fairlet_q;
  if (algorithm == Algorithm::kFairCluster) {
    ClustererConfig cfg;
    cfg.k = k;
    cfg.seed = seed;
    return [features, cfg, p, q](std::span<const int> groups) { return fair_cluster(*features, groups, cfg, p, q); };
  }
  auto s = std::make_shared<const CoAssociationMatrix>(
      co_association(generate_basic_partitions(x, config.cfc.sampling, derive_seed(seed, 1))));
  CfcHyper hyper = config.cfc.hyper;
  hyper.k = k;
  return [features, s, hyper, k, p, q, seed](std::span<const int> groups) {
    const auto reference = reference_clustering(*features, groups, k, p, q, derive_seed(seed, 2));
    return train_cfc(*features, groups, *s, reference.labels(), hyper, derive_seed(seed, 3)).clustering;
  };
}

double sample_std(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

std::vector<AggregateRow> aggregate(const std::vector<Cell>& cells) {
  std::vector<AggregateRow> rows;
  std::vector<std::vector<const Cell*>> members;
  for (const auto& c : cells) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& r) {
      return r.fraction == c.fraction && r.algorithm == c.algorithm && r.attack == c.attack;
    });
    std::size_t at = static_cast<std::size_t>(it - rows.begin());
    if (it == rows.end()) {
      rows.push_back(AggregateRow{c.fraction, c.algorithm, c.attack, 0, 0, {}});
      members.emplace_back();
    }
    if (c.ok) {
      ++rows[at].succeeded;
      members[at].push_back(&c);
    } else {
      ++rows[at].failed;
    }
  }
  using Getter = std::optional<double> (*)(const MetricSet&);
  const std::vector<std::pair<std::string, Getter>> getters = {
      {"balance", [](const MetricSet& m) -> std::optional<double> { return m.balance; }},
      {"entropy", [](const MetricSet& m) -> std::optional<double> { return m.entropy; }},
      {"nmi", [](const MetricSet& m) { return m.nmi; }},
      {"acc", [](const MetricSet& m) { return m.acc; }},
  };
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (members[r].empty()) continue;
    for (const auto& [name, get] : getters) {
      std::vector<double> pre, post;
      for (const Cell* c : members[r]) {
        const auto a = get(c->pre), b = get(c->post);
        if (!a || !b) break;
        pre.push_back(*a);
        post.push_back(*b);
      }
      if (pre.size() != members[r].size()) continue;
      AggregateStat st;
      const double n = static_cast<double>(pre.size());
      st.mean_pre = std::accumulate(pre.begin(), pre.end(), 0.0) / n;
      st.mean_post = std::accumulate(post.begin(), post.end(), 0.0) / n;
      st.std_pre = sample_std(pre);
      st.std_post = sample_std(post);
      if (st.mean_pre != 0.0) st.percent_change = 100.0 * (st.mean_post - st.mean_pre) / st.mean_pre;
      rows[r].metrics[name] = st;
    }
  }
  return rows;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  validate(config);
  const auto source = load_source_data(config.source);
  const Dataset& ds = source.dataset;
  const Matrix& x = ds.features();

  std::vector<double> fractions = config.fractions;
  if (source.builtin) fractions = {static_cast<double>(source.builtin->attacked().size()) / static_cast<double>(ds.n())};

  // One oracle (and its pre-attack clustering) per algorithm and clusterer seed.
  std::vector<Seed> oracle_seeds;
  if (config.vary_oracle_seed)
    for (Seed s : config.seeds) oracle_seeds.push_back(derive_seed(config.oracle_seed, s));
  else
    oracle_seeds.push_back(config.oracle_seed);
  const std::size_t n_alg = config.algorithms.size();
  std::vector<OracleSlot> slots(n_alg * oracle_seeds.size());
  parallel_for(slots.size(), config.threads, [&](std::size_t i) {
    auto& slot = slots[i];
    try {
      slot.oracle = make_oracle(config.algorithms[i % n_alg], x, config, oracle_seeds[i / n_alg]);
      slot.pre = slot.oracle(ds.groups());
    } catch (const std::exception& e) {
      slot.error = describe(e);
    }
  });

  // Jobs are (fraction, seed, algorithm); each fills one cell per attack kind.
  const std::size_t n_seed = config.seeds.size(), n_att = config.attacks.size();
  const std::size_t n_jobs = fractions.size() * n_seed * n_alg;
  std::vector<Cell> cells(n_jobs * n_att);
  parallel_for(n_jobs, config.threads, [&](std::size_t job) {
    const std::size_t a = job % n_alg, si = (job / n_alg) % n_seed, fi = job / (n_alg * n_seed);
    const Seed seed = config.seeds[si];
    const auto& slot = slots[(config.vary_oracle_seed ? si : 0) * n_alg + a];
    for (std::size_t t = 0; t < n_att; ++t) {
      auto& cell = cells[job * n_att + t];
      cell.fraction = fractions[fi];
      cell.seed = seed;
      cell.algorithm = config.algorithms[a];
      cell.attack = config.attacks[t];
    }
    std::size_t t = 0;
    try {
      if (!slot.error.empty()) throw OracleError(0, slot.error);
      const AttackSplit split = source.builtin ? *source.builtin : split_attack_set(ds, fractions[fi], seed);
      const auto dg = gather(ds.groups(), split.defended());
      const MetricSet pre = defended_metrics(slot.pre, split, dg, ds.truth_labels(), config.k);
      FairnessMetric target = config.metric;
      if (target == FairnessMetric::kBalance && config.auto_entropy && pre.balance == 0.0)
        target = FairnessMetric::kEntropy;
      for (; t < n_att; ++t) {
        auto& cell = cells[job * n_att + t];
        cell.target_metric = target;
        cell.attacked = split.attacked().size();
        cell.pre = pre;
        cell.post = pre;
        try {
          if (cell.attack != AttackKind::kNone && !split.attacked().empty()) {
            AttackProblem problem{ds, split, config.k, target, slot.oracle, config.budget, seed, config.racos};
            const AttackResult r =
                cell.attack == AttackKind::kOptimized ? attack_fairness(problem) : random_attack(problem);
            const auto poisoned = merge_groups(r.best_assignment, GroupAssignment{dg}, split);
            cell.post = defended_metrics(slot.oracle(poisoned), split, dg, ds.truth_labels(), config.k);
            cell.trace = r.query_trace;
          }
          cell.ok = true;
        } catch (const std::exception& e) {
          cell.error = describe(e);
        }
      }
    } catch (const std::exception& e) {
      for (; t < n_att; ++t) cells[job * n_att + t].error = describe(e);
    }
  });

  ExperimentReport report;
  report.cells = std::move(cells);
  report.aggregates = aggregate(report.cells);
  return report;
}

// ---------------------------------------------------------------------------
// Analyses

std::vector<KsRow> compare_attacks(const ExperimentReport& ours, const ExperimentReport& random) {
  auto coverage = [](const ExperimentReport& r, AttackKind kind) {
    std::set<std::tuple<int, double, Seed>> keys;
    for (const auto& c : r.cells)
      if (c.attack == kind) keys.emplace(static_cast<int>(c.algorithm), c.fraction, c.seed);
    return keys;
  };
  const auto a = coverage(ours, AttackKind::kOptimized);
  const auto b = coverage(random, AttackKind::kRandom);
  if (a.empty() || b.empty()) throw InvalidArgument("compare: need optimized cells in the first report and random cells in the second");
  if (a != b) throw InvalidArgument("compare: reports cover different algorithms, fractions or seeds");

  std::vector<Algorithm> algorithms;
  std::vector<double> fractions;
  for (const auto& [alg, f, s] : a) {
    if (std::find(algorithms.begin(), algorithms.end(), static_cast<Algorithm>(alg)) == algorithms.end())
      algorithms.push_back(static_cast<Algorithm>(alg));
    if (std::find(fractions.begin(), fractions.end(), f) == fractions.end()) fractions.push_back(f);
  }
  std::sort(fractions.begin(), fractions.end());

  auto values = [](const ExperimentReport& r, AttackKind kind, Algorithm alg, std::optional<double> f, bool bal) {
    std::vector<double> out;
    for (const auto& c : r.cells)
      if (c.ok && c.attack == kind && c.algorithm == alg && (!f || c.fraction == *f))
        out.push_back(bal ? c.post.balance : c.post.entropy);
    return out;
  };
  std::vector<KsRow> rows;
  for (Algorithm alg : algorithms) {
    std::vector<std::optional<double>> keys(fractions.begin(), fractions.end());
    keys.push_back(std::nullopt);
    for (const auto& f : keys)
      for (bool bal : {true, false}) {
        auto x = values(ours, AttackKind::kOptimized, alg, f, bal);
        auto y = values(random, AttackKind::kRandom, alg, f, bal);
        if (x.empty() || y.empty()) continue;
        KsRow row;
        row.algorithm = alg;
        row.fraction = f;
        row.metric = bal ? "balance" : "entropy";
        row.n_ours = x.size();
        row.n_random = y.size();
        const auto ks = ks_statistic(x, y);
        row.statistic = ks.statistic;
        row.p_value = ks.p_value;
        row.significant = ks.p_value < 0.01;
        std::sort(x.begin(), x.end());
        std::sort(y.begin(), y.end());
        row.identical = x == y;
        rows.push_back(std::move(row));
      }
  }
  return rows;
}

namespace {

double nearest_rank(std::vector<double> v, double pct) {
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(v.size())));
  return v[std::max<std::size_t>(rank, 1) - 1];
}

}  // namespace

BpHistogram bp_balance_histogram(const BasicPartitionSet& bps_pre, const BasicPartitionSet& bps_post,
                                 std::span<const int> groups_pre, std::span<const int> groups_post, int bins) {
  if (bins < 1) throw InvalidArgument("histogram needs at least one bin");
  if (bps_pre.r() == 0 || bps_pre.r() != bps_post.r() || bps_pre.n != bps_post.n)
    throw InvalidArgument("basic partition sets must be non-empty with the same r and n");
  BpHistogram h;
  const auto nb = static_cast<std::size_t>(bins);
  for (std::size_t i = 0; i <= nb; ++i) h.edges.push_back(static_cast<double>(i) / static_cast<double>(nb));
  auto fill = [&](const BasicPartitionSet& bps, std::span<const int> groups, std::vector<std::size_t>& counts,
                  double& mean, double& p20) {
    counts.assign(nb, 0);
    std::vector<double> values;
    for (const auto& bp : bps.partitions) {
      const double b = balance(bp.partition.labels(), groups, static_cast<std::size_t>(bp.partition.k()));
      values.push_back(b);
      ++counts[std::min(nb - 1, static_cast<std::size_t>(b * static_cast<double>(nb)))];
    }
    mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    p20 = nearest_rank(values, 20.0);
  };
  fill(bps_pre, groups_pre, h.counts_pre, h.mean_pre, h.p20_pre);
  fill(bps_post, groups_post, h.counts_post, h.mean_post, h.p20_post);
  const Eigen::MatrixXd diff =
      co_association(bps_pre).counts().cast<double>() - co_association(bps_post).counts().cast<double>();
  h.frobenius = diff.norm();
  return h;
}

BpHistogram bp_balance_histogram(const BasicPartitionSet& bps_pre, const BasicPartitionSet& bps_post,
                                 std::span<const int> groups, int bins) {
  return bp_balance_histogram(bps_pre, bps_post, groups, groups, bins);
}

std::vector<RatioCurve> ratio_curves(const ExperimentReport& report) {
  std::vector<RatioCurve> curves;
  for (const auto& row : report.aggregates)
    for (const auto& [metric, st] : row.metrics) {
      auto it = std::find_if(curves.begin(), curves.end(), [&](const RatioCurve& c) {
        return c.algorithm == row.algorithm && c.attack == row.attack && c.metric == metric;
      });
      if (it == curves.end()) {
        curves.push_back(RatioCurve{row.algorithm, row.attack, metric, {}});
        it = curves.end() - 1;
      }
      RatioPoint p{row.fraction, std::nullopt};
      if (st.mean_pre != 0.0) p.ratio = st.mean_post / st.mean_pre;
      it->points.push_back(p);
    }
  static const std::vector<std::string> order = {"balance", "entropy", "nmi", "acc"};
  auto rank = [](const std::string& m) { return std::find(order.begin(), order.end(), m) - order.begin(); };
  std::stable_sort(curves.begin(), curves.end(), [&](const RatioCurve& a, const RatioCurve& b) {
    return std::tuple(static_cast<int>(a.algorithm), static_cast<int>(a.attack), rank(a.metric)) <
           std::tuple(static_cast<int>(b.algorithm), static_cast<int>(b.attack), rank(b.metric));
  });
  for (auto& c : curves)
    std::stable_sort(c.points.begin(), c.points.end(),
                     [](const RatioPoint& a, const RatioPoint& b) { return a.fraction < b.fraction; });
  return curves;
}

// ---------------------------------------------------------------------------
// Serialization

double round6(double v) {
  if (!std::isfinite(v)) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return std::strtod(buf, nullptr);
}

namespace {

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

ojson num(double v) { return std::isfinite(v) ? ojson(round6(v)) : ojson(nullptr); }
ojson num(const std::optional<double>& v) { return v ? num(*v) : ojson(nullptr); }

ojson metrics_json(const MetricSet& m) {
  return ojson{{"balance", num(m.balance)}, {"entropy", num(m.entropy)}, {"nmi", num(m.nmi)}, {"acc", num(m.acc)}};
}

MetricSet metrics_from(const nlohmann::json& j) {
  MetricSet m;
  m.balance = j.at("balance").get<double>();
  m.entropy = j.at("entropy").get<double>();
  if (!j.at("nmi").is_null()) m.nmi = j.at("nmi").get<double>();
  if (!j.at("acc").is_null()) m.acc = j.at("acc").get<double>();
  return m;
}

}  // namespace

std::string report_to_json(const ExperimentReport& report) {
  ojson cells = ojson::array();
  for (const auto& c : report.cells) {
    ojson trace = ojson::array();
    for (const auto& [i, v] : c.trace) trace.push_back(ojson::array({i, num(v)}));
    ojson j;
    j["fraction"] = num(c.fraction);
    j["seed"] = c.seed;
    j["algorithm"] = to_string(c.algorithm);
    j["attack"] = to_string(c.attack);
    j["status"] = c.ok ? "ok" : "failed";
    j["error"] = c.ok ? ojson(nullptr) : ojson(c.error);
    j["target_metric"] = to_string(c.target_metric);
    j["attacked"] = c.attacked;
    j["pre"] = metrics_json(c.pre);
    j["post"] = metrics_json(c.post);
    j["trace"] = std::move(trace);
    cells.push_back(std::move(j));
  }
  ojson aggs = ojson::array();
  for (const auto& r : report.aggregates) {
    ojson metrics = ojson::object();
    for (const char* name : {"balance", "entropy", "nmi", "acc"}) {
      const auto it = r.metrics.find(name);
      if (it == r.metrics.end()) continue;
      const auto& s = it->second;
      metrics[name] = ojson{{"mean_pre", num(s.mean_pre)},
                            {"std_pre", num(s.std_pre)},
                            {"mean_post", num(s.mean_post)},
                            {"std_post", num(s.std_post)},
                            {"percent_change", s.percent_change ? num(*s.percent_change) : ojson("undefined")}};
    }
    aggs.push_back(ojson{{"fraction", num(r.fraction)},
                         {"algorithm", to_string(r.algorithm)},
                         {"attack", to_string(r.attack)},
                         {"succeeded", r.succeeded},
                         {"failed", r.failed},
                         {"metrics", std::move(metrics)}});
  }
  ojson out;
  out["cells"] = std::move(cells);
  out["aggregates"] = std::move(aggs);
  return out.dump(2) + "\n";
}

ExperimentReport report_from_json(const std::string& text) {
  ExperimentReport report;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& c : j.at("cells")) {
      Cell cell;
      cell.fraction = c.at("fraction").get<double>();
      cell.seed = c.at("seed").get<Seed>();
      cell.algorithm = algorithm_from_string(c.at("algorithm").get<std::string>());
      cell.attack = attack_kind_from_string(c.at("attack").get<std::string>());
      cell.ok = c.at("status").get<std::string>() == "ok";
      if (!cell.ok) cell.error = c.at("error").get<std::string>();
      cell.target_metric = fairness_metric_from_string(c.at("target_metric").get<std::string>());
      cell.attacked = c.at("attacked").get<std::size_t>();
      cell.pre = metrics_from(c.at("pre"));
      cell.post = metrics_from(c.at("post"));
      for (const auto& e : c.at("trace")) cell.trace.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<double>());
      report.cells.push_back(std::move(cell));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, "", std::string("report JSON: ") + e.what());
  }
  report.aggregates = aggregate(report.cells);
  return report;
}

std::string report_to_csv(const ExperimentReport& report) {
  std::string out =
      "fraction,seed,algorithm,attack,balance_pre,balance_post,entropy_pre,entropy_post,nmi_pre,nmi_post,acc_pre,"
      "acc_post\n";
  auto field = [](const std::optional<double>& v, bool ok) { return ok && v ? fmt6(*v) : std::string(); };
  for (const auto& c : report.cells) {
    out += fmt6(c.fraction) + "," + std::to_string(c.seed) + "," + to_string(c.algorithm) + "," + to_string(c.attack);
    for (const auto& [a, b] : {std::pair{std::optional<double>(c.pre.balance), std::optional<double>(c.post.balance)},
                               std::pair{std::optional<double>(c.pre.entropy), std::optional<double>(c.post.entropy)},
                               std::pair{c.pre.nmi, c.post.nmi}, std::pair{c.pre.acc, c.post.acc}})
      out += "," + field(a, c.ok) + "," + field(b, c.ok);
    out += "\n";
  }
  return out;
}

std::string ratio_curves_to_csv(const std::vector<RatioCurve>& curves) {
  std::string out = "algorithm,attack,metric,fraction,ratio\n";
  for (const auto& c : curves)
    for (const auto& p : c.points)
      out += to_string(c.algorithm) + "," + to_string(c.attack) + "," + c.metric + "," + fmt6(p.fraction) + "," +
             (p.ratio ? fmt6(*p.ratio) : "indeterminate") + "\n";
  return out;
}

std::string ks_to_json(const std::vector<KsRow>& rows) {
  ojson out = ojson::array();
  for (const auto& r : rows)
    out.push_back(ojson{{"algorithm", to_string(r.algorithm)},
                        {"fraction", r.fraction ? num(*r.fraction) : ojson("pooled")},
                        {"metric", r.metric},
                        {"n_ours", r.n_ours},
                        {"n_random", r.n_random},
                        {"statistic", num(r.statistic)},
                        {"p_value", num(r.p_value)},
                        {"significant", r.significant},
                        {"identical", r.identical}});
  return out.dump(2) + "\n";
}

std::string ks_to_csv(const std::vector<KsRow>& rows) {
  std::string out = "algorithm,fraction,metric,n_ours,n_random,statistic,p_value,significant,identical\n";
  for (const auto& r : rows)
    out += to_string(r.algorithm) + "," + (r.fraction ? fmt6(*r.fraction) : "pooled") + "," + r.metric + "," +
           std::to_string(r.n_ours) + "," + std::to_string(r.n_random) + "," + fmt6(r.statistic) + "," +
           fmt6(r.p_value) + "," + (r.significant ? "true" : "false") + "," + (r.identical ? "true" : "false") + "\n";
  return out;
}

std::string bp_histogram_to_json(const BpHistogram& h) {
  ojson edges = ojson::array();
  for (double e : h.edges) edges.push_back(num(e));
  ojson out{{"edges", std::move(edges)},
            {"counts_pre", h.counts_pre},
            {"counts_post", h.counts_post},
            {"mean_pre", num(h.mean_pre)},
            {"mean_post", num(h.mean_post)},
            {"p20_pre", num(h.p20_pre)},
            {"p20_post", num(h.p20_post)},
            {"frobenius", num(h.frobenius)}};
  return out.dump(2) + "\n";
}

void write_text(const std::filesystem::path& path, const std::string& contents) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << contents;
  if (!out) throw IoError(path.string(), "write failed");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::vector<std::filesystem::path> emit_report(const ExperimentReport& report, const std::vector<ReportFormat>& formats,
                                               const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  for (auto f : formats) {
    const auto path = dir / (f == ReportFormat::kJson ? "report.json" : "report.csv");
    write_text(path, f == ReportFormat::kJson ? report_to_json(report) : report_to_csv(report));
    written.push_back(path);
  }
  return written;
}

}  // namespace rfc

#pragma once

// Experiment orchestration: budget sweeps over (fraction, seed, algorithm,
// attack) cells, aggregate tables, KS comparisons, basic-partition diagnostics
// and report files.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rfc/attack.hpp"
#include "rfc/cfc.hpp"
#include "rfc/core_data.hpp"
#include "rfc/rng.hpp"

namespace rfc {

enum class Algorithm { kFairCluster, kCfc };
enum class AttackKind { kNone, kOptimized, kRandom };

std::string to_string(Algorithm a);
std::string to_string(AttackKind a);
Algorithm algorithm_from_string(const std::string& s);
AttackKind attack_kind_from_string(const std::string& s);

struct DataSource {
  enum class Kind { kToy, kBlobs, kCsv };
  Kind kind = Kind::kToy;
  std::filesystem::path path;  ///< kCsv
  Seed seed = 0;               ///< kToy / kBlobs generator seed
  BlobSpec blobs;              ///< kBlobs (its seed field is overwritten by `seed`)
  /// kToy: use the generator's own attacked set instead of sweeping fractions.
  bool builtin_split = true;
};

struct ExperimentConfig {
  DataSource source;
  std::vector<Algorithm> algorithms{Algorithm::kFairCluster};
  std::vector<AttackKind> attacks{AttackKind::kOptimized};
  std::vector<double> fractions{0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30};
  std::vector<Seed> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  int k = 2;
  FairnessMetric metric = FairnessMetric::kBalance;
  /// Switch the attack target to Entropy when pre-attack Balance is already 0.
  bool auto_entropy = true;
  int budget = 200;
  RacosParams racos;
  int fairlet_p = 2;
  int fairlet_q = 5;
  CfcPipelineConfig cfc;
  /// Seed of the clusterer under attack; shared by every cell unless
  /// `vary_oracle_seed` derives one per run seed.
  Seed oracle_seed = 0;
  bool vary_oracle_seed = false;
  int threads = 0;  ///< 0 = hardware concurrency
  /// Empty: the CLI falls back to $RFC_OUTPUT_DIR, then the working directory.
  std::filesystem::path output_dir;
};

/// Throws InvalidArgument unless fractions lie in [0, 1], there is at least one
/// seed, algorithm and attack kind, and K >= 1.
void validate(const ExperimentConfig& config);

/// Documented `key = value` entries understood by the config file and `--set`.
struct ConfigKey {
  std::string name;
  std::string help;
};
const std::vector<ConfigKey>& config_keys();

/// Applies one entry; throws ParseError naming the key on bad input.
void apply_config_entry(ExperimentConfig& config, const std::string& key, const std::string& value);

/// `key = value` lines; '#' starts a comment; blank lines ignored.
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});

/// Balance, Entropy, NMI and ACC of one clustering on the defended samples.
/// NMI and ACC are absent without ground truth.
struct MetricSet {
  double balance = 0.0;
  double entropy = 0.0;
  std::optional<double> nmi;
  std::optional<double> acc;
};

struct Cell {
  double fraction = 0.0;
  Seed seed = 0;
  Algorithm algorithm = Algorithm::kFairCluster;
  AttackKind attack = AttackKind::kNone;
  bool ok = false;
  std::string error;  ///< "code: message" when !ok
  FairnessMetric target_metric = FairnessMetric::kBalance;
  std::size_t attacked = 0;
  MetricSet pre;
  MetricSet post;
  std::vector<std::pair<std::size_t, double>> trace;
};

/// Summary over the successful seeds of one (fraction, algorithm, attack).
struct AggregateStat {
  double mean_pre = 0.0;
  double std_pre = 0.0;
  double mean_post = 0.0;
  double std_post = 0.0;
  std::optional<double> percent_change;  ///< absent ("undefined") when mean_pre == 0
};

struct AggregateRow {
  double fraction = 0.0;
  Algorithm algorithm = Algorithm::kFairCluster;
  AttackKind attack = AttackKind::kNone;
  std::size_t succeeded = 0;
  std::size_t failed = 0;
  std::map<std::string, AggregateStat> metrics;  ///< keys: balance, entropy, nmi, acc
};

struct ExperimentReport {
  std::vector<Cell> cells;  ///< ordered by fraction, seed, algorithm, attack
  std::vector<AggregateRow> aggregates;
};

/// Sample standard deviation (n - 1); 0 for fewer than two values.
double sample_std(const std::vector<double>& values);

std::vector<AggregateRow> aggregate(const std::vector<Cell>& cells);

ExperimentReport run_experiment(const ExperimentConfig& config);

struct SourceData {
  Dataset dataset;
  std::optional<AttackSplit> builtin;  ///< toy generator split when requested
};

SourceData load_source_data(const DataSource& source);
Dataset load_source(const DataSource& source);

/// The clusterer being attacked, as a black-box oracle over full group vectors.
/// For CFC the co-association matrix is computed once, since Stage 1 ignores
/// groups.
ClusteringOracle make_oracle(Algorithm algorithm, const Matrix& x, const ExperimentConfig& config, Seed seed);

// ---------------------------------------------------------------------------
// Analyses

struct KsRow {
  Algorithm algorithm = Algorithm::kFairCluster;
  std::optional<double> fraction;  ///< absent for the row pooled over fractions
  std::string metric;              ///< balance or entropy
  std::size_t n_ours = 0;
  std::size_t n_random = 0;
  double statistic = 0.0;
  double p_value = 1.0;
  bool significant = false;  ///< p < 0.01
  bool identical = false;    ///< the two samples are the same multiset
};

/// Post-attack values of Optimized cells in `ours` against Random cells in
/// `random`, per algorithm and fraction, plus a pooled row. Throws unless both
/// reports cover the same fractions and seeds.
std::vector<KsRow> compare_attacks(const ExperimentReport& ours, const ExperimentReport& random);

struct BpHistogram {
  std::vector<double> edges;  ///< bins + 1 edges over [0, 1]
  std::vector<std::size_t> counts_pre;
  std::vector<std::size_t> counts_post;
  double mean_pre = 0.0;
  double mean_post = 0.0;
  double p20_pre = 0.0;  ///< nearest-rank 20th percentile
  double p20_post = 0.0;
  double frobenius = 0.0;  ///< ||S_pre - S_post||_F of the co-association counts
};

/// Balance of every basic partition; `groups_post` is used for the post side.
BpHistogram bp_balance_histogram(const BasicPartitionSet& bps_pre, const BasicPartitionSet& bps_post,
                                 std::span<const int> groups_pre, std::span<const int> groups_post, int bins);
BpHistogram bp_balance_histogram(const BasicPartitionSet& bps_pre, const BasicPartitionSet& bps_post,
                                 std::span<const int> groups, int bins);

struct RatioPoint {
  double fraction = 0.0;
  std::optional<double> ratio;  ///< absent ("indeterminate") when the pre mean is 0
};

struct RatioCurve {
  Algorithm algorithm = Algorithm::kFairCluster;
  AttackKind attack = AttackKind::kNone;
  std::string metric;
  std::vector<RatioPoint> points;
};

/// mean-post / mean-pre per fraction for each (algorithm, attack, metric).
std::vector<RatioCurve> ratio_curves(const ExperimentReport& report);

// ---------------------------------------------------------------------------
// Serialization. Metric values are written with 6 significant digits.

/// Value rounded to 6 significant digits (round trip through "%.6g").
double round6(double v);

std::string report_to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const std::string& text);
std::string report_to_csv(const ExperimentReport& report);
std::string ratio_curves_to_csv(const std::vector<RatioCurve>& curves);
std::string ks_to_json(const std::vector<KsRow>& rows);
std::string ks_to_csv(const std::vector<KsRow>& rows);
std::string bp_histogram_to_json(const BpHistogram& h);

enum class ReportFormat { kJson, kCsv };

/// Writes report.json and/or report.csv into `dir`; returns the paths written.
std::vector<std::filesystem::path> emit_report(const ExperimentReport& report, const std::vector<ReportFormat>& formats,
                                               const std::filesystem::path& dir);

/// Writes `contents` to `path`, creating parent directories; IoError on failure.
void write_text(const std::filesystem::path& path, const std::string& contents);
std::string read_text(const std::filesystem::path& path);

}  // namespace rfc

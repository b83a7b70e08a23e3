#pragma once

// Datasets, protected-group memberships, clusterings and attack splits, plus
// the merge (full group vector from the two sides of a split) and restrict
// (cluster labels of the defended side) mappings the attack objective uses.

#include <Eigen/Dense>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rfc/rng.hpp"

namespace rfc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Feature matrix (n x d), protected-group id per row and optional ground truth.
class Dataset {
 public:
  /// Validates: n, d >= 1, finite features, group ids dense in [0, L).
  Dataset(Matrix features, std::vector<int> groups,
          std::optional<std::vector<int>> truth_labels = std::nullopt);

  const Matrix& features() const noexcept { return features_; }
  const std::vector<int>& groups() const noexcept { return groups_; }
  const std::optional<std::vector<int>>& truth_labels() const noexcept { return truth_; }
  std::size_t n() const noexcept { return static_cast<std::size_t>(features_.rows()); }
  std::size_t d() const noexcept { return static_cast<std::size_t>(features_.cols()); }
  int num_groups() const noexcept { return num_groups_; }

  /// Indices of the rows that belong to `group`.
  std::vector<std::size_t> group_members(int group) const;

 private:
  Matrix features_;
  std::vector<int> groups_;
  std::optional<std::vector<int>> truth_;
  int num_groups_ = 0;
};

/// Hard assignment of n samples to K clusters. Empty clusters are allowed.
class Clustering {
 public:
  Clustering() = default;
  Clustering(std::vector<int> labels, int k);

  const std::vector<int>& labels() const noexcept { return labels_; }
  int k() const noexcept { return k_; }
  std::size_t size() const noexcept { return labels_.size(); }
  std::vector<std::size_t> cluster_sizes() const;
  bool has_empty_cluster() const;

  friend bool operator==(const Clustering&, const Clustering&) = default;

 private:
  std::vector<int> labels_;
  int k_ = 0;
};

/// Partition of [0, n) into the adversary-controlled and the defended indices.
class AttackSplit {
 public:
  AttackSplit() = default;
  /// Both lists are sorted on construction; throws unless they partition [0, n).
  AttackSplit(std::vector<std::size_t> attacked, std::vector<std::size_t> defended);

  const std::vector<std::size_t>& attacked() const noexcept { return attacked_; }
  const std::vector<std::size_t>& defended() const noexcept { return defended_; }
  std::size_t n() const noexcept { return attacked_.size() + defended_.size(); }

  friend bool operator==(const AttackSplit&, const AttackSplit&) = default;

 private:
  std::vector<std::size_t> attacked_;
  std::vector<std::size_t> defended_;
};

/// Group ids aligned with one side of an AttackSplit.
struct GroupAssignment {
  std::vector<int> values;
  friend bool operator==(const GroupAssignment&, const GroupAssignment&) = default;
};

// ---------------------------------------------------------------------------
// CSV input

/// Column names used when reading a dataset file.
struct CsvSchema {
  std::string feature_prefix = "f";
  std::string group_column = "group";
  std::string label_column = "label";
};

struct LoadedDataset {
  Dataset dataset;
  /// group_remap[dense_id] = id as written in the file.
  std::vector<int> group_remap;
};

LoadedDataset load_dataset(const std::filesystem::path& path, const CsvSchema& schema = {});
LoadedDataset parse_dataset_csv(const std::string& text, const CsvSchema& schema = {});
std::string dataset_to_csv(const Dataset& dataset);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);

std::string split_to_json(const AttackSplit& split);
AttackSplit split_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Generators

struct ToyProblem {
  Dataset dataset;
  AttackSplit split;
};

/// 20 points from two isotropic Gaussians (std 0.12, centers (4,0) and (4.5,0),
/// 10 each). Groups alternate within each blob. The attacked side holds one
/// point of each group from the first blob and two of each from the second,
/// leaving defended counts 4/4 and 3/3. Truth labels are blob ids.
ToyProblem make_toy_dataset(Seed seed);

struct BlobSpec {
  enum class GroupRule {
    kAlternate,  ///< group = position-in-blob mod 2
    kFraction,   ///< exactly round(group1_fraction[b] * count) members of blob b get group 1
    kSingle,     ///< everyone in group 0
  };

  std::vector<std::vector<double>> centers;
  double stddev = 1.0;
  std::vector<std::size_t> counts;
  GroupRule group_rule = GroupRule::kAlternate;
  std::vector<double> group1_fraction;
  Seed seed = 0;
};

Dataset make_gaussian_blobs(const BlobSpec& spec);

// ---------------------------------------------------------------------------
// Splits and the merge / restrict mappings

/// Uniformly random subset of round(fraction * n) attacked indices.
AttackSplit split_attack_set(const Dataset& dataset, double fraction, Seed seed);

/// Full-length group vector: attacked values placed at split.attacked(),
/// defended values at split.defended().
std::vector<int> merge_groups(const GroupAssignment& attacked_values,
                              const GroupAssignment& defended_values, const AttackSplit& split);

/// Cluster labels of the defended samples, in index order.
std::vector<int> restrict_labels(const Clustering& clustering, const AttackSplit& split);

/// values[i] for each i in indices.
std::vector<int> gather(std::span<const int> values, std::span<const std::size_t> indices);

/// Rows of `x` selected by `indices`.
Matrix gather_rows(const Matrix& x, std::span<const std::size_t> indices);

}  // namespace rfc

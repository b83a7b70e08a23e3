#include "rfc/core_data.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rfc/error.hpp"

namespace rfc {

std::vector<std::size_t> Rng::sample_indices(std::size_t n, std::size_t k) {
  if (k > n) throw InvalidArgument("cannot sample " + std::to_string(k) + " of " + std::to_string(n));
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  // partial Fisher-Yates
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + below(n - i);
    std::swap(all[i], all[j]);
  }
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

// ---------------------------------------------------------------------------

Dataset::Dataset(Matrix features, std::vector<int> groups, std::optional<std::vector<int>> truth_labels)
    : features_(std::move(features)), groups_(std::move(groups)), truth_(std::move(truth_labels)) {
  if (features_.rows() < 1 || features_.cols() < 1)
    throw InvalidArgument("dataset needs at least one row and one column");
  if (!features_.allFinite()) throw InvalidArgument("dataset features contain non-finite values");
  if (groups_.size() != n())
    throw InvalidArgument("group vector length " + std::to_string(groups_.size()) +
                          " does not match " + std::to_string(n()) + " rows");
  if (truth_ && truth_->size() != n())
    throw InvalidArgument("truth label vector length does not match row count");
  int max_group = -1;
  for (int g : groups_) {
    if (g < 0) throw InvalidArgument("negative group id");
    max_group = std::max(max_group, g);
  }
  num_groups_ = max_group + 1;
  std::vector<bool> seen(static_cast<std::size_t>(num_groups_), false);
  for (int g : groups_) seen[static_cast<std::size_t>(g)] = true;
  for (int g = 0; g < num_groups_; ++g)
    if (!seen[static_cast<std::size_t>(g)])
      throw InvalidArgument("group id " + std::to_string(g) + " has no members; ids must be dense");
}

std::vector<std::size_t> Dataset::group_members(int group) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < groups_.size(); ++i)
    if (groups_[i] == group) out.push_back(i);
  return out;
}

Clustering::Clustering(std::vector<int> labels, int k) : labels_(std::move(labels)), k_(k) {
  if (k_ < 1) throw InvalidArgument("clustering needs K >= 1");
  for (int l : labels_)
    if (l < 0 || l >= k_)
      throw InvalidArgument("cluster label " + std::to_string(l) + " outside [0, " + std::to_string(k_) + ")");
}

std::vector<std::size_t> Clustering::cluster_sizes() const {
  std::vector<std::size_t> sizes(static_cast<std::size_t>(k_), 0);
  for (int l : labels_) ++sizes[static_cast<std::size_t>(l)];
  return sizes;
}

bool Clustering::has_empty_cluster() const {
  const auto sizes = cluster_sizes();
  return std::find(sizes.begin(), sizes.end(), std::size_t{0}) != sizes.end();
}

AttackSplit::AttackSplit(std::vector<std::size_t> attacked, std::vector<std::size_t> defended)
    : attacked_(std::move(attacked)), defended_(std::move(defended)) {
  std::sort(attacked_.begin(), attacked_.end());
  std::sort(defended_.begin(), defended_.end());
  const std::size_t total = attacked_.size() + defended_.size();
  std::vector<int> hits(total, 0);
  for (auto idx : attacked_) {
    if (idx >= total) throw InvalidArgument("attack split index out of range");
    ++hits[idx];
  }
  for (auto idx : defended_) {
    if (idx >= total) throw InvalidArgument("attack split index out of range");
    ++hits[idx];
  }
  for (int h : hits)
    if (h != 1) throw InvalidArgument("attacked and defended indices must partition [0, n)");
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(trim(std::string_view(line).substr(start)));
      break;
    }
    out.push_back(trim(std::string_view(line).substr(start, comma - start)));
    start = comma + 1;
  }
  return out;
}

bool parse_real(const std::string& field, double& value) {
  if (field.empty()) return false;
  const char* begin = field.c_str();
  char* end = nullptr;
  errno = 0;
  value = std::strtod(begin, &end);
  return end == begin + field.size();
}

bool parse_int(const std::string& field, long long& value) {
  if (field.empty()) return false;
  const char* begin = field.c_str();
  char* end = nullptr;
  errno = 0;
  value = std::strtoll(begin, &end, 10);
  return end == begin + field.size() && errno == 0;
}

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

LoadedDataset parse_dataset_csv(const std::string& text, const CsvSchema& schema) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(0, "", "empty file, expected a header row");
  const auto header = split_fields(line);

  std::map<int, std::size_t> feature_cols;
  std::optional<std::size_t> group_col, label_col;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string& name = header[c];
    if (name == schema.group_column) {
      group_col = c;
    } else if (name == schema.label_column) {
      label_col = c;
    } else if (name.size() > schema.feature_prefix.size() &&
               name.compare(0, schema.feature_prefix.size(), schema.feature_prefix) == 0) {
      long long idx = 0;
      if (!parse_int(name.substr(schema.feature_prefix.size()), idx) || idx < 0)
        throw ParseError(0, name, "unrecognised column");
      if (!feature_cols.emplace(static_cast<int>(idx), c).second)
        throw ParseError(0, name, "duplicate feature column");
    } else {
      throw ParseError(0, name, "unrecognised column");
    }
  }
  if (!group_col) throw MissingColumn(schema.group_column);
  if (feature_cols.empty()) throw MissingColumn(schema.feature_prefix + "0");
  const std::size_t d = feature_cols.size();
  for (std::size_t j = 0; j < d; ++j)
    if (!feature_cols.count(static_cast<int>(j))) throw MissingColumn(schema.feature_prefix + std::to_string(j));

  std::vector<std::vector<double>> rows;
  std::vector<long long> raw_groups;
  std::vector<int> labels;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto fields = split_fields(line);
    if (fields.size() != header.size())
      throw ParseError(row, "", "expected " + std::to_string(header.size()) + " fields, found " +
                                    std::to_string(fields.size()));
    std::vector<double> values(d);
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t c = feature_cols.at(static_cast<int>(j));
      double v = 0.0;
      if (!parse_real(fields[c], v)) throw ParseError(row, header[c], "not a number: '" + fields[c] + "'");
      if (!std::isfinite(v)) throw NonFiniteValue(row, header[c]);
      values[j] = v;
    }
    long long g = 0;
    if (!parse_int(fields[*group_col], g) || g < 0)
      throw ParseError(row, header[*group_col], "group must be a non-negative integer: '" + fields[*group_col] + "'");
    raw_groups.push_back(g);
    if (label_col) {
      long long l = 0;
      if (!parse_int(fields[*label_col], l) || l < 0)
        throw ParseError(row, header[*label_col], "label must be a non-negative integer");
      labels.push_back(static_cast<int>(l));
    }
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw ParseError(0, "", "no data rows");

  std::vector<long long> distinct = raw_groups;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<int> groups(raw_groups.size());
  for (std::size_t i = 0; i < raw_groups.size(); ++i)
    groups[i] = static_cast<int>(std::lower_bound(distinct.begin(), distinct.end(), raw_groups[i]) - distinct.begin());

  Matrix x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];

  std::optional<std::vector<int>> truth;
  if (label_col) truth = std::move(labels);
  std::vector<int> remap(distinct.begin(), distinct.end());
  return LoadedDataset{Dataset(std::move(x), std::move(groups), std::move(truth)), std::move(remap)};
}

LoadedDataset load_dataset(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_dataset_csv(buf.str(), schema);
}

std::string dataset_to_csv(const Dataset& dataset) {
  std::string out;
  for (std::size_t j = 0; j < dataset.d(); ++j) out += "f" + std::to_string(j) + ",";
  out += "group";
  if (dataset.truth_labels()) out += ",label";
  out += "\n";
  const auto& x = dataset.features();
  for (std::size_t i = 0; i < dataset.n(); ++i) {
    for (std::size_t j = 0; j < dataset.d(); ++j)
      out += format_real(x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) + ",";
    out += std::to_string(dataset.groups()[i]);
    if (dataset.truth_labels()) out += "," + std::to_string((*dataset.truth_labels())[i]);
    out += "\n";
  }
  return out;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << dataset_to_csv(dataset);
  if (!out) throw IoError(path.string(), "write failed");
}

std::string split_to_json(const AttackSplit& split) {
  nlohmann::json j;
  j["attacked"] = split.attacked();
  j["defended"] = split.defended();
  return j.dump();
}

AttackSplit split_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    return AttackSplit(j.at("attacked").get<std::vector<std::size_t>>(),
                       j.at("defended").get<std::vector<std::size_t>>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, "", std::string("attack split JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Generators

ToyProblem make_toy_dataset(Seed seed) {
  Rng rng(derive_seed(seed, 0x70e7));
  const double centers[2][2] = {{4.0, 0.0}, {4.5, 0.0}};
  constexpr double kStd = 0.12;
  constexpr int kPerBlob = 10;

  Matrix x(2 * kPerBlob, 2);
  std::vector<int> groups(2 * kPerBlob), truth(2 * kPerBlob);
  for (int b = 0; b < 2; ++b) {
    for (int i = 0; i < kPerBlob; ++i) {
      const int row = b * kPerBlob + i;
      x(row, 0) = rng.normal(centers[b][0], kStd);
      x(row, 1) = rng.normal(centers[b][1], kStd);
      groups[static_cast<std::size_t>(row)] = i % 2;
      truth[static_cast<std::size_t>(row)] = b;
    }
  }

  // Attacked: (1,1) from blob 0 and (2,2) from blob 1, picked at random.
  std::vector<std::size_t> attacked;
  const int per_group[2] = {1, 2};
  for (int b = 0; b < 2; ++b) {
    for (int g = 0; g < 2; ++g) {
      std::vector<std::size_t> members;
      for (int i = g; i < kPerBlob; i += 2) members.push_back(static_cast<std::size_t>(b * kPerBlob + i));
      for (auto pick : rng.sample_indices(members.size(), static_cast<std::size_t>(per_group[b])))
        attacked.push_back(members[pick]);
    }
  }
  std::sort(attacked.begin(), attacked.end());
  std::vector<std::size_t> defended;
  for (std::size_t i = 0; i < 2 * kPerBlob; ++i)
    if (!std::binary_search(attacked.begin(), attacked.end(), i)) defended.push_back(i);

  return ToyProblem{Dataset(std::move(x), std::move(groups), std::move(truth)),
                    AttackSplit(std::move(attacked), std::move(defended))};
}

Dataset make_gaussian_blobs(const BlobSpec& spec) {
  if (spec.centers.empty()) throw InvalidArgument("blob spec needs at least one center");
  if (spec.counts.size() != spec.centers.size()) throw InvalidArgument("one count per center required");
  if (!(spec.stddev > 0.0)) throw InvalidArgument("blob stddev must be positive");
  const std::size_t d = spec.centers.front().size();
  if (d == 0) throw InvalidArgument("centers must have at least one coordinate");
  for (const auto& c : spec.centers)
    if (c.size() != d) throw InvalidArgument("inconsistent center dimensions");
  for (auto c : spec.counts)
    if (c < 1) throw InvalidArgument("every blob count must be >= 1");
  if (spec.group_rule == BlobSpec::GroupRule::kFraction && spec.group1_fraction.size() != spec.centers.size())
    throw InvalidArgument("group1_fraction needs one entry per center");

  const std::size_t n = std::accumulate(spec.counts.begin(), spec.counts.end(), std::size_t{0});
  Rng rng(derive_seed(spec.seed, 0xb10b));
  Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  std::vector<int> groups(n, 0), truth(n, 0);
  std::size_t row = 0;
  for (std::size_t b = 0; b < spec.centers.size(); ++b) {
    const std::size_t first = row;
    for (std::size_t i = 0; i < spec.counts[b]; ++i, ++row) {
      for (std::size_t j = 0; j < d; ++j)
        x(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j)) = rng.normal(spec.centers[b][j], spec.stddev);
      truth[row] = static_cast<int>(b);
      if (spec.group_rule == BlobSpec::GroupRule::kAlternate) groups[row] = static_cast<int>(i % 2);
    }
    if (spec.group_rule == BlobSpec::GroupRule::kFraction) {
      const double frac = std::clamp(spec.group1_fraction[b], 0.0, 1.0);
      const auto ones = static_cast<std::size_t>(std::llround(frac * static_cast<double>(spec.counts[b])));
      for (auto pick : rng.sample_indices(spec.counts[b], ones)) groups[first + pick] = 1;
    }
  }
  // Densify in case a rule left group 0 unused.
  std::vector<int> present(2, 0);
  for (int g : groups) present[static_cast<std::size_t>(g)] = 1;
  if (!present[0])
    for (int& g : groups) g = 0;
  return Dataset(std::move(x), std::move(groups), std::move(truth));
}

// ---------------------------------------------------------------------------

AttackSplit split_attack_set(const Dataset& dataset, double fraction, Seed seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidArgument("attack fraction must lie in [0, 1]");
  const std::size_t n = dataset.n();
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  Rng rng(derive_seed(seed, 0x5b117));
  auto attacked = rng.sample_indices(n, k);
  std::vector<std::size_t> defended;
  defended.reserve(n - k);
  for (std::size_t i = 0; i < n; ++i)
    if (!std::binary_search(attacked.begin(), attacked.end(), i)) defended.push_back(i);
  return AttackSplit(std::move(attacked), std::move(defended));
}

std::vector<int> merge_groups(const GroupAssignment& attacked_values, const GroupAssignment& defended_values,
                              const AttackSplit& split) {
  if (attacked_values.values.size() != split.attacked().size())
    throw InvalidArgument("attacked assignment has " + std::to_string(attacked_values.values.size()) +
                          " values, split has " + std::to_string(split.attacked().size()) + " attacked indices");
  if (defended_values.values.size() != split.defended().size())
    throw InvalidArgument("defended assignment has " + std::to_string(defended_values.values.size()) +
                          " values, split has " + std::to_string(split.defended().size()) + " defended indices");
  std::vector<int> full(split.n());
  for (std::size_t i = 0; i < split.attacked().size(); ++i) full[split.attacked()[i]] = attacked_values.values[i];
  for (std::size_t i = 0; i < split.defended().size(); ++i) full[split.defended()[i]] = defended_values.values[i];
  return full;
}

std::vector<int> restrict_labels(const Clustering& clustering, const AttackSplit& split) {
  if (clustering.size() != split.n())
    throw InvalidArgument("clustering covers " + std::to_string(clustering.size()) + " samples, split has " +
                          std::to_string(split.n()));
  return gather(clustering.labels(), split.defended());
}

std::vector<int> gather(std::span<const int> values, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) {
    if (i >= values.size()) throw InvalidArgument("gather index out of range");
    out.push_back(values[i]);
  }
  return out;
}

Matrix gather_rows(const Matrix& x, std::span<const std::size_t> indices) {
  Matrix out(static_cast<Eigen::Index>(indices.size()), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(indices[i]));
  return out;
}

}  // namespace rfc

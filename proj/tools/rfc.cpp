// rfc: command-line front end for the fair clustering, attack and defense
// library. Every subcommand writes its outputs into one directory and exits
// nonzero with a JSON error object on stderr when anything fails.

#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rfc/attack.hpp"
#include "rfc/cfc.hpp"
#include "rfc/clusterers.hpp"
#include "rfc/core_data.hpp"
#include "rfc/error.hpp"
#include "rfc/harness.hpp"
#include "rfc/metrics.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr const char* kOutputEnv = "RFC_OUTPUT_DIR";

// Config assembled from --config plus one flag per documented key.
struct ConfigOptions {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;
  std::string out;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "extra key=value entries, applied last")->take_all();
    app->add_option("--out", out, std::string("output directory (default: $") + kOutputEnv + " or .)");
    for (const auto& key : rfc::config_keys())
      app->add_option("--" + key.name, flags[key.name], key.help)->group("Config keys");
  }

  rfc::ExperimentConfig build() const {
    rfc::ExperimentConfig c;
    if (!config_file.empty()) c = rfc::load_config(config_file);
    for (const auto& key : rfc::config_keys()) {
      const auto it = flags.find(key.name);
      if (it != flags.end() && !it->second.empty()) rfc::apply_config_entry(c, key.name, it->second);
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw rfc::ParseError(0, s, "--set expects key=value");
      rfc::apply_config_entry(c, s.substr(0, eq), s.substr(eq + 1));
    }
    return c;
  }

  fs::path output_dir(const rfc::ExperimentConfig& c) const {
    if (!out.empty()) return out;
    if (!c.output_dir.empty()) return c.output_dir;
    if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
    return ".";
  }
};

ojson metrics_json(std::span<const int> labels, const rfc::Dataset& ds, int k) {
  ojson m;
  m["balance"] = rfc::round6(rfc::balance(labels, ds.groups(), static_cast<std::size_t>(k)));
  m["entropy"] = rfc::round6(rfc::entropy(labels, ds.groups(), static_cast<std::size_t>(k)));
  if (ds.truth_labels()) {
    m["nmi"] = rfc::round6(rfc::nmi(labels, *ds.truth_labels()));
    m["acc"] = rfc::round6(rfc::acc(labels, *ds.truth_labels()));
  }
  return m;
}

ojson clustering_json(const std::string& algorithm, const rfc::Clustering& c, const rfc::Dataset& ds) {
  ojson j;
  j["algorithm"] = algorithm;
  j["k"] = c.k();
  j["labels"] = c.labels();
  j["metrics"] = metrics_json(c.labels(), ds, c.k());
  return j;
}

void print_written(const std::vector<fs::path>& paths) {
  for (const auto& p : paths) std::cout << p.string() << "\n";
}

// ---------------------------------------------------------------------------

void cmd_gen_toy(rfc::Seed seed, const fs::path& dir) {
  const auto toy = rfc::make_toy_dataset(seed);
  rfc::write_text(dir / "toy.csv", rfc::dataset_to_csv(toy.dataset));
  rfc::write_text(dir / "split.json", rfc::split_to_json(toy.split) + "\n");
  print_written({dir / "toy.csv", dir / "split.json"});
}

void cmd_cluster(const rfc::ExperimentConfig& c, const std::string& algorithm, const fs::path& dir) {
  const auto ds = rfc::load_source(c.source);
  const auto oracle = rfc::make_oracle(rfc::algorithm_from_string(algorithm), ds.features(), c, c.oracle_seed);
  const auto clustering = oracle(ds.groups());
  rfc::write_text(dir / "clustering.json", clustering_json(algorithm, clustering, ds).dump(2) + "\n");
  print_written({dir / "clustering.json"});
}

void cmd_attack(const rfc::ExperimentConfig& c, const std::string& algorithm, const std::string& kind,
                const std::string& split_path, double fraction, rfc::Seed seed, const fs::path& dir) {
  const auto src = rfc::load_source_data(c.source);
  const auto& ds = src.dataset;
  rfc::AttackSplit split;
  if (!split_path.empty())
    split = rfc::split_from_json(rfc::read_text(split_path));
  else if (src.builtin)
    split = *src.builtin;
  else
    split = rfc::split_attack_set(ds, fraction, seed);
  if (split.n() != ds.n()) throw rfc::InvalidArgument("split does not match the dataset size");

  const auto oracle = rfc::make_oracle(rfc::algorithm_from_string(algorithm), ds.features(), c, c.oracle_seed);
  rfc::AttackProblem problem{ds, split, c.k, c.metric, oracle, c.budget, seed, c.racos};
  const auto attack = rfc::attack_kind_from_string(kind);
  if (attack == rfc::AttackKind::kNone) throw rfc::InvalidArgument("attack kind must be optimized or random");
  const auto result = attack == rfc::AttackKind::kOptimized ? rfc::attack_fairness(problem) : rfc::random_attack(problem);

  const auto defended = rfc::gather(ds.groups(), split.defended());
  const auto poisoned = rfc::merge_groups(result.best_assignment, rfc::GroupAssignment{defended}, split);
  const rfc::Dataset poisoned_ds(ds.features(), poisoned, ds.truth_labels());
  rfc::write_text(dir / "attack.json", rfc::attack_result_to_json(result) + "\n");
  rfc::write_text(dir / "split.json", rfc::split_to_json(split) + "\n");
  rfc::save_dataset(poisoned_ds, dir / "poisoned.csv");
  print_written({dir / "attack.json", dir / "split.json", dir / "poisoned.csv"});
}

void cmd_defend(const rfc::ExperimentConfig& c, const fs::path& dir) {
  const auto ds = rfc::load_source(c.source);
  auto cfg = c.cfc;
  cfg.hyper.k = c.k;
  cfg.fairlet_p = c.fairlet_p;
  cfg.fairlet_q = c.fairlet_q;
  const auto result = rfc::run_cfc(ds.features(), ds.groups(), cfg, c.oracle_seed);

  fs::create_directories(dir);
  rfc::save_co_association(result.co_association, dir / "co_association.bin");
  rfc::save_model(result.trained.model, dir / "model.rfcm");
  auto j = clustering_json("cfc", result.trained.clustering, ds);
  j["reference"] = clustering_json("fair_cluster", result.reference, ds);
  rfc::write_text(dir / "clustering.json", j.dump(2) + "\n");
  std::string history = "epoch,contrastive,fair,structural,total\n";
  for (std::size_t e = 0; e < result.trained.history.size(); ++e) {
    const auto& l = result.trained.history[e];
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.6g,%.6g,%.6g,%.6g\n", e, l.contrastive, l.fair, l.structural, l.total);
    history += buf;
  }
  rfc::write_text(dir / "loss_history.csv", history);
  print_written({dir / "co_association.bin", dir / "model.rfcm", dir / "clustering.json", dir / "loss_history.csv"});
}

void cmd_experiment(const rfc::ExperimentConfig& c, const fs::path& dir) {
  const auto report = rfc::run_experiment(c);
  auto written = rfc::emit_report(report, {rfc::ReportFormat::kJson, rfc::ReportFormat::kCsv}, dir);
  rfc::write_text(dir / "ratio_curves.csv", rfc::ratio_curves_to_csv(rfc::ratio_curves(report)));
  written.push_back(dir / "ratio_curves.csv");
  print_written(written);
}

void cmd_compare(const std::string& ours_path, const std::string& random_path, const fs::path& dir) {
  const auto ours = rfc::report_from_json(rfc::read_text(ours_path));
  const auto random = random_path.empty() ? ours : rfc::report_from_json(rfc::read_text(random_path));
  const auto rows = rfc::compare_attacks(ours, random);
  rfc::write_text(dir / "ks.json", rfc::ks_to_json(rows));
  rfc::write_text(dir / "ks.csv", rfc::ks_to_csv(rows));
  print_written({dir / "ks.json", dir / "ks.csv"});
}

void cmd_diagnose(const rfc::ExperimentConfig& c, const std::string& poisoned_path, const std::string& report_path,
                  int bins, const fs::path& dir) {
  std::vector<fs::path> written;
  if (!report_path.empty()) {
    const auto report = rfc::report_from_json(rfc::read_text(report_path));
    rfc::write_text(dir / "ratio_curves.csv", rfc::ratio_curves_to_csv(rfc::ratio_curves(report)));
    written.push_back(dir / "ratio_curves.csv");
  }
  if (!poisoned_path.empty() || report_path.empty()) {
    const auto ds = rfc::load_source(c.source);
    std::vector<int> post = ds.groups();
    if (!poisoned_path.empty()) {
      const auto poisoned = rfc::load_dataset(poisoned_path).dataset;
      if (poisoned.n() != ds.n()) throw rfc::InvalidArgument("poisoned dataset size differs from the clean dataset");
      post = poisoned.groups();
    }
    const auto bps = rfc::generate_basic_partitions(ds.features(), c.cfc.sampling, rfc::derive_seed(c.oracle_seed, 1));
    const auto h = rfc::bp_balance_histogram(bps, bps, ds.groups(), post, bins);
    rfc::write_text(dir / "bp_histogram.json", rfc::bp_histogram_to_json(h));
    written.push_back(dir / "bp_histogram.json");
  }
  print_written(written);
}

int fail(const std::string& code, const std::string& message, int exit_code) {
  ojson j;
  j["error"] = {{"code", code}, {"message", message}};
  std::cerr << j.dump() << "\n";
  return exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fair clustering, black-box fairness attacks and the consensus defense"};
  app.require_subcommand(1);

  rfc::Seed toy_seed = 0;
  std::string toy_out;
  auto* gen = app.add_subcommand("gen-toy", "write the 20-point toy dataset and its attack split");
  gen->add_option("--seed", toy_seed, "generator seed");
  gen->add_option("--out", toy_out, std::string("output directory (default: $") + kOutputEnv + " or .)");

  ConfigOptions cluster_opts, attack_opts, defend_opts, exp_opts, diag_opts;
  std::string cluster_alg = "fair_cluster", attack_alg = "fair_cluster", attack_kind = "optimized";
  std::string split_path, ours_path, random_path, compare_out, poisoned_path, report_path;
  double fraction = 0.15;
  rfc::Seed attack_seed = 0;
  int bins = 10;

  auto* cluster = app.add_subcommand("cluster", "cluster a dataset with the fairlet clusterer or CFC");
  cluster_opts.attach(cluster);
  cluster->add_option("--algorithm", cluster_alg, "fair_cluster or cfc");

  auto* attack = app.add_subcommand("attack", "poison attacked group labels against a fair clusterer");
  attack_opts.attach(attack);
  attack->add_option("--algorithm", attack_alg, "clusterer under attack: fair_cluster or cfc");
  attack->add_option("--attack", attack_kind, "optimized or random");
  attack->add_option("--split", split_path, "split JSON; otherwise drawn from --fraction and --seed")
      ->check(CLI::ExistingFile);
  attack->add_option("--fraction", fraction, "attacked fraction when no split is given")->check(CLI::Range(0.0, 1.0));
  attack->add_option("--seed", attack_seed, "attack and split seed");

  auto* defend = app.add_subcommand("defend", "run both CFC stages and save S, the model and the clustering");
  defend_opts.attach(defend);

  auto* experiment = app.add_subcommand("experiment", "run a budget sweep and write report.json / report.csv");
  exp_opts.attach(experiment);

  auto* compare = app.add_subcommand("compare", "KS tests between optimized and random attack outcomes");
  compare->add_option("--ours", ours_path, "report with optimized cells")->required()->check(CLI::ExistingFile);
  compare->add_option("--random", random_path, "report with random cells (default: --ours)")->check(CLI::ExistingFile);
  compare->add_option("--out", compare_out, std::string("output directory (default: $") + kOutputEnv + " or .)");

  auto* diagnose = app.add_subcommand("diagnose", "basic-partition balance histogram and ratio curves");
  diag_opts.attach(diagnose);
  diagnose->add_option("--poisoned", poisoned_path, "poisoned dataset CSV for the post-attack side")
      ->check(CLI::ExistingFile);
  diagnose->add_option("--report", report_path, "experiment report for ratio curves")->check(CLI::ExistingFile);
  diagnose->add_option("--bins", bins, "histogram bins")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage_error", e.what(), 2);
  }

  auto plain_out = [](const std::string& flag) -> fs::path {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
    return ".";
  };

  try {
    if (*gen) {
      cmd_gen_toy(toy_seed, plain_out(toy_out));
    } else if (*cluster) {
      const auto c = cluster_opts.build();
      cmd_cluster(c, cluster_alg, cluster_opts.output_dir(c));
    } else if (*attack) {
      const auto c = attack_opts.build();
      cmd_attack(c, attack_alg, attack_kind, split_path, fraction, attack_seed, attack_opts.output_dir(c));
    } else if (*defend) {
      const auto c = defend_opts.build();
      cmd_defend(c, defend_opts.output_dir(c));
    } else if (*experiment) {
      const auto c = exp_opts.build();
      cmd_experiment(c, exp_opts.output_dir(c));
    } else if (*compare) {
      cmd_compare(ours_path, random_path, plain_out(compare_out));
    } else if (*diagnose) {
      const auto c = diag_opts.build();
      cmd_diagnose(c, poisoned_path, report_path, bins, diag_opts.output_dir(c));
    }
  } catch (const rfc::Error& e) {
    return fail(e.code(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal_error", e.what(), 1);
  }
  return 0;
}

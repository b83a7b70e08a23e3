#include <doctest.h>

#include <cmath>

#include "rfc/error.hpp"
#include "rfc/metrics.hpp"
#include "support.hpp"

using namespace rfc;

namespace {

// 14 defended toy points, truth = blob, two groups of 7.
// Before the attack: cluster A holds 4+4 (7 of blob 0, 1 of blob 1), cluster B 3+3.
struct ToyTable {
  std::vector<int> labels, groups, truth;
};

ToyTable toy_pre() {
  ToyTable t;
  // cluster A: 8 points, groups 4/4, truth 7x blob0 + 1x blob1
  for (int i = 0; i < 8; ++i) {
    t.labels.push_back(0);
    t.groups.push_back(i % 2);
    t.truth.push_back(i < 7 ? 0 : 1);
  }
  // cluster B: 6 points, groups 3/3, all blob1
  for (int i = 0; i < 6; ++i) {
    t.labels.push_back(1);
    t.groups.push_back(i % 2);
    t.truth.push_back(1);
  }
  return t;
}

ToyTable toy_post() {
  ToyTable t;
  // cluster A: 4 points of blob 1, groups (1 of group 0, 3 of group 1)
  for (int i = 0; i < 4; ++i) {
    t.labels.push_back(0);
    t.groups.push_back(i == 0 ? 0 : 1);
    t.truth.push_back(1);
  }
  // cluster B: 10 points, groups (6, 4), 7 of blob 0 and 3 of blob 1
  for (int i = 0; i < 10; ++i) {
    t.labels.push_back(1);
    t.groups.push_back(i < 6 ? 0 : 1);
    t.truth.push_back(i < 7 ? 0 : 1);
  }
  return t;
}

std::vector<int> relabel(const std::vector<int>& labels, const std::vector<int>& perm) {
  std::vector<int> out;
  for (int l : labels) out.push_back(perm[static_cast<std::size_t>(l)]);
  return out;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("contingency table") {
    const auto t = contingency(std::vector<int>{0, 1, 1, 2}, std::vector<int>{0, 0, 1, 1}, 4);
    CHECK(t.num_clusters == 4);
    CHECK(t.num_groups == 2);
    CHECK(t.at(1, 0) == 1);
    CHECK(t.at(1, 1) == 1);
    CHECK(t.cluster_sizes == std::vector<std::size_t>{1, 2, 1, 0});
    CHECK(t.group_sizes == std::vector<std::size_t>{2, 2});
    CHECK(t.total == 4);
  }

  TEST_CASE("balance: hand cases") {
    const auto pre = toy_pre();
    CHECK(balance(pre.labels, pre.groups) == doctest::Approx(1.0).epsilon(1e-12));
    const auto post = toy_post();
    // cluster A holds group 0 at share 1/4 against a dataset share of 7/14
    CHECK(std::abs(balance(post.labels, post.groups) - 0.5) < 1e-9);
    CHECK(balance(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 0, 1, 1}) == 0.0);
    // an empty third cluster makes the clustering unfair
    CHECK(balance(std::vector<int>{0, 1, 0, 1}, std::vector<int>{0, 0, 1, 1}, 3) == 0.0);
    CHECK(balance(std::vector<int>{0, 1, 0, 1}, std::vector<int>{0, 0, 1, 1}, 2) == 1.0);
    // unequal group sizes: shares 1/3 vs in-cluster 1/2 -> min(2/3, 3/2)
    CHECK(std::abs(balance(std::vector<int>{0, 0, 1, 1, 1, 1}, std::vector<int>{0, 1, 0, 1, 1, 1}) - 2.0 / 3.0) <
          1e-9);
  }

  TEST_CASE("entropy: hand cases") {
    std::vector<int> labels, groups;
    for (int i = 0; i < 20; ++i) {
      labels.push_back(i / 10);
      groups.push_back(i % 2);
    }
    CHECK(std::abs(entropy(labels, groups) - std::log(2.0)) < 1e-9);
    CHECK(entropy(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 0, 1, 1}) == 0.0);
    const auto post = toy_post();
    // group 0: -(1/4)ln(1/4) - (6/10)ln(6/10); group 1: -(3/4)ln(3/4) - (4/10)ln(4/10)
    const double hand = 0.5 * (-(0.25 * std::log(0.25)) - 0.6 * std::log(0.6) - 0.75 * std::log(0.75) -
                               0.4 * std::log(0.4));
    CHECK(std::abs(entropy(post.labels, post.groups) - hand) < 1e-9);
    const auto d = entropy_detailed(std::vector<int>{0, 0}, std::vector<int>{0, 1}, 2);
    CHECK(d.had_empty_cluster);
    CHECK(std::abs(d.value - 0.5 * std::log(2.0)) < 1e-12);
  }

  TEST_CASE("nmi: hand cases") {
    CHECK(std::abs(nmi(std::vector<int>{0, 0, 1, 1}, std::vector<int>{1, 1, 0, 0}) - 1.0) < 1e-9);
    CHECK(std::abs(nmi(std::vector<int>{0, 1, 0, 1}, std::vector<int>{0, 0, 1, 1})) < 1e-9);
    CHECK(nmi(std::vector<int>{0, 0, 0}, std::vector<int>{1, 1, 1}) == 1.0);
    CHECK(nmi(std::vector<int>{0, 0, 0}, std::vector<int>{0, 1, 1}) == 0.0);
  }

  TEST_CASE("acc: hand cases") {
    CHECK(acc(std::vector<int>{0, 1, 1, 0}, std::vector<int>{1, 0, 0, 1}) == 1.0);
    CHECK(std::abs(acc(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 1, 1, 1}) - 0.75) < 1e-9);
    CHECK_THROWS_AS(acc(std::vector<int>{0, 1, 2}, std::vector<int>{0, 1, 2}, 2), InvalidArgument);
  }

  TEST_CASE("toy reference clusterings: reference values to three decimals") {
    // Reference values are truncated to three decimals.
    const auto pre = toy_pre();
    CHECK(std::abs(nmi(pre.labels, pre.truth) - 0.695) < 1e-3);
    CHECK(std::abs(acc(pre.labels, pre.truth) - 0.928) < 1e-3);
    CHECK(std::abs(entropy(pre.labels, pre.groups) - 0.693) < 1e-3);
    const auto post = toy_post();
    CHECK(std::abs(balance(post.labels, post.groups) - 0.5) < 1e-9);
    CHECK(std::abs(entropy(post.labels, post.groups) - 0.617) < 1e-3);
    CHECK(std::abs(nmi(post.labels, post.truth) - 0.397) < 1e-3);
    CHECK(std::abs(acc(post.labels, post.truth) - 0.785) < 1e-3);
  }

  TEST_CASE("property: metrics agree with the definitions on random instances") {
    testing::Gen g(2024);
    for (int trial = 0; trial < 500; ++trial) {
      const auto n = static_cast<std::size_t>(g.integer(2, 40));
      const int k = g.integer(1, 5), l = g.integer(1, 3);
      const auto labels = g.labels(n, k);
      const auto groups = g.labels(n, l);
      CHECK(std::abs(balance(labels, groups, static_cast<std::size_t>(k)) - testing::brute_balance(labels, groups, k)) <
            1e-9);
      CHECK(std::abs(entropy(labels, groups, static_cast<std::size_t>(k)) - testing::brute_entropy(labels, groups, k)) <
            1e-9);
      CHECK(std::abs(nmi(labels, groups) - testing::brute_nmi(labels, groups)) < 1e-9);
    }
  }

  TEST_CASE("property: relabeling invariance and ranges") {
    testing::Gen g(5);
    for (int trial = 0; trial < 300; ++trial) {
      const auto n = static_cast<std::size_t>(g.integer(2, 30));
      const int k = g.integer(1, 5);
      const auto labels = g.labels(n, k);
      const auto groups = g.labels(n, 2);
      const auto truth = g.labels(n, g.integer(1, 4));
      const auto perm = relabel(labels, g.permutation(k));
      const auto kk = static_cast<std::size_t>(k);
      CHECK(balance(labels, groups, kk) == doctest::Approx(balance(perm, groups, kk)).epsilon(1e-12));
      CHECK(entropy(labels, groups, kk) == doctest::Approx(entropy(perm, groups, kk)).epsilon(1e-12));
      CHECK(nmi(labels, truth) == doctest::Approx(nmi(perm, truth)).epsilon(1e-12));
      CHECK(acc(labels, truth) == doctest::Approx(acc(perm, truth)).epsilon(1e-12));
      const double b = balance(labels, groups, kk);
      CHECK(b >= 0.0);
      CHECK(b <= 1.0);
      CHECK(entropy(labels, groups, kk) >= 0.0);
      CHECK(nmi(labels, truth) == doctest::Approx(nmi(truth, labels)).epsilon(1e-12));
      const double m = nmi(labels, truth);
      CHECK(m >= -1e-12);
      CHECK(m <= 1.0 + 1e-12);
      if (std::set<int>(labels.begin(), labels.end()).size() > 1) CHECK(std::abs(nmi(labels, labels) - 1.0) < 1e-12);
    }
  }

  TEST_CASE("property: balance is 1 exactly when every cluster matches the dataset shares") {
    // Clusters built from whole copies of the group pattern are perfectly fair.
    testing::Gen g(77);
    for (int trial = 0; trial < 100; ++trial) {
      const int k = g.integer(1, 4);
      const auto pattern = g.covering_labels(static_cast<std::size_t>(g.integer(2, 6)), 2);
      std::vector<int> labels, groups;
      for (int c = 0; c < k; ++c)
        for (int rep = g.integer(1, 3); rep > 0; --rep)
          for (int v : pattern) {
            labels.push_back(c);
            groups.push_back(v);
          }
      CHECK(balance(labels, groups) == doctest::Approx(1.0).epsilon(1e-12));
      // moving one point breaks exact proportionality when k > 1
      if (k > 1) {
        labels[0] = (labels[0] + 1) % k;
        CHECK(balance(labels, groups) < 1.0);
      }
    }
  }

  TEST_CASE("acc equals brute-force enumeration (1000 random 30-sample instances, K <= 5)") {
    testing::Gen g(9);
    int agree = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      const auto labels = g.labels(30, g.integer(1, 5));
      const auto truth = g.labels(30, g.integer(1, 5));
      agree += std::abs(acc(labels, truth) - testing::brute_acc(labels, truth)) < 1e-12;
    }
    CHECK(agree == 1000);
  }

  TEST_CASE("hungarian matches brute force on random square costs") {
    testing::Gen g(31);
    for (int trial = 0; trial < 200; ++trial) {
      const auto m = static_cast<std::size_t>(g.integer(1, 6));
      const auto cost = g.reals(m * m, -5.0, 5.0);
      const auto assign = hungarian_min_cost(cost, m);
      double got = 0.0;
      for (std::size_t r = 0; r < m; ++r) got += cost[r * m + assign[r]];
      std::vector<std::size_t> perm(m);
      std::iota(perm.begin(), perm.end(), 0);
      double best = std::numeric_limits<double>::infinity();
      do {
        double c = 0.0;
        for (std::size_t r = 0; r < m; ++r) c += cost[r * m + perm[r]];
        best = std::min(best, c);
      } while (std::next_permutation(perm.begin(), perm.end()));
      CHECK(got == doctest::Approx(best).epsilon(1e-12));
      std::set<std::size_t> cols(assign.begin(), assign.end());
      CHECK(cols.size() == m);
    }
  }

  TEST_CASE("ks: hand cases") {
    const std::vector<double> a{1, 2, 3}, b{1, 2, 4}, far{10, 11, 12};
    CHECK(std::abs(ks_statistic(a, b).statistic - 1.0 / 3.0) < 1e-12);
    CHECK(ks_statistic(a, a).statistic == 0.0);
    CHECK(ks_statistic(a, a).p_value == doctest::Approx(1.0));
    CHECK(ks_statistic(a, far).statistic == 1.0);
    CHECK_THROWS_AS(ks_statistic(a, std::vector<double>{}), InvalidArgument);
  }

  TEST_CASE("ks: Kolmogorov tail reference points") {
    // Standard critical values: Q(1.3581) = 0.05, Q(1.6276) = 0.01.
    CHECK(kolmogorov_q(1.3581) == doctest::Approx(0.05).epsilon(1e-3));
    CHECK(kolmogorov_q(1.6276) == doctest::Approx(0.01).epsilon(1e-3));
    CHECK(kolmogorov_q(0.0) == 1.0);
    CHECK(kolmogorov_q(10.0) < 1e-80);
  }

  TEST_CASE("property: ks matches brute-force ECDF and is symmetric") {
    testing::Gen g(12);
    for (int trial = 0; trial < 500; ++trial) {
      auto a = g.reals(static_cast<std::size_t>(g.integer(1, 25)), 0.0, 1.0);
      auto b = g.reals(static_cast<std::size_t>(g.integer(1, 25)), 0.0, 1.0);
      // ties across samples
      if (trial % 3 == 0) b[0] = a[0];
      for (auto& v : a) v = std::round(v * 8.0) / 8.0;
      const auto ab = ks_statistic(a, b), ba = ks_statistic(b, a);
      CHECK(std::abs(ab.statistic - testing::brute_ks(a, b)) < 1e-12);
      CHECK(ab.statistic == ba.statistic);
      CHECK(ab.p_value == ba.p_value);
      CHECK(ab.p_value >= 0.0);
      CHECK(ab.p_value <= 1.0);
    }
  }
}

#include <doctest.h>

#include <cmath>
#include <limits>

#include "rfc/cfc.hpp"
#include "rfc/error.hpp"
#include "rfc/metrics.hpp"
#include "support.hpp"

using namespace rfc;

namespace {

BasicPartitionSet identical_partitions(const std::vector<int>& labels, int k, int r) {
  BasicPartitionSet bps;
  bps.n = labels.size();
  for (int i = 0; i < r; ++i) {
    BasicPartition bp;
    bp.k = k;
    bp.partition = Clustering(labels, k);
    bps.partitions.push_back(bp);
  }
  return bps;
}

// Plain loops over the Student-t kernel.
Matrix hand_soft(const Matrix& z, const Matrix& c) {
  Matrix p(z.rows(), c.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double total = 0.0;
    for (Eigen::Index k = 0; k < c.rows(); ++k) {
      double d2 = 0.0;
      for (Eigen::Index j = 0; j < z.cols(); ++j) d2 += (z(i, j) - c(k, j)) * (z(i, j) - c(k, j));
      p(i, k) = 1.0 / (1.0 + d2);
      total += p(i, k);
    }
    for (Eigen::Index k = 0; k < c.rows(); ++k) p(i, k) /= total;
  }
  return p;
}

CfcModel random_model(testing::Gen& g, Eigen::Index d, int hidden, int embedding, int k) {
  CfcModel m;
  m.hyper.hidden = hidden;
  m.hyper.embedding = embedding;
  m.hyper.k = k;
  m.hyper.dropout = 0.0;
  m.params.w1 = g.matrix(hidden, d, -0.8, 0.8);
  m.params.b1 = g.matrix(hidden, 1, -0.2, 0.2);
  m.params.w2 = g.matrix(embedding, hidden, -0.8, 0.8);
  m.params.b2 = g.matrix(embedding, 1, -0.2, 0.2);
  m.params.centers = g.matrix(k, embedding, -1.0, 1.0);
  m.feature_mean = Vector::Zero(d);
  m.feature_scale = Vector::Ones(d);
  return m;
}

CfcBatch random_batch(testing::Gen& g, Eigen::Index n, Eigen::Index d, int k) {
  CfcBatch b;
  b.x = g.matrix(n, d, -1.5, 1.5);
  b.groups = g.covering_labels(static_cast<std::size_t>(n), 2);
  b.reference = g.labels(static_cast<std::size_t>(n), k);
  const auto bps = testing::random_partitions(g, static_cast<std::size_t>(n), 8, 3);
  b.gamma = neighborhood_weights(co_association(bps), 2).gamma;
  return b;
}

Dataset two_blobs(std::size_t per, double gap, Seed seed) {
  BlobSpec spec;
  spec.centers = {{0.0, 0.0}, {gap, 0.0}};
  spec.counts = {per, per};
  spec.seed = seed;
  return make_gaussian_blobs(spec);
}

CfcPipelineConfig desk_config() {
  CfcPipelineConfig c;
  c.sampling.r = 50;
  c.hyper.epochs = 300;
  c.hyper.learning_rate = 1e-2;
  c.hyper.hidden = 32;
  return c;
}

}  // namespace

TEST_SUITE("cfc") {
  TEST_CASE("basic partitions: full sampling, coverage and determinism") {
    testing::Gen g(2);
    const Matrix x = g.matrix(40, 3, 0.0, 1.0);
    PartitionSampling full;
    full.r = 5;
    full.row_frac = 1.0;
    full.col_frac = 1.0;
    const auto bps = generate_basic_partitions(x, full, 7);
    CHECK(bps.r() == 5);
    for (const auto& bp : bps.partitions) {
      CHECK(bp.sampled_indices.size() == 40);
      CHECK(bp.sampled_features.size() == 3);
      CHECK(bp.partition.size() == 40);
      CHECK(bp.k == 2);
    }

    PartitionSampling sparse;
    sparse.r = 3;
    sparse.row_frac = 0.1;
    sparse.col_frac = 0.5;
    sparse.k_max = 3;
    const auto s = generate_basic_partitions(x, sparse, 1);
    std::set<std::size_t> covered;
    for (const auto& bp : s.partitions) {
      covered.insert(bp.sampled_indices.begin(), bp.sampled_indices.end());
      CHECK(bp.partition.size() == 40);
      CHECK(bp.k >= 2);
      CHECK(bp.k <= 3);
    }
    CHECK(covered.size() == 40);
    CHECK(co_association(s) == co_association(generate_basic_partitions(x, sparse, 1)));
  }

  TEST_CASE("co-association: hand cases") {
    const auto same = co_association(identical_partitions({0, 0, 1, 1}, 2, 4));
    CHECK(same.counts()(0, 1) == 4);
    CHECK(same.counts()(0, 2) == 0);
    CHECK(same.counts()(3, 3) == 4);

    BasicPartitionSet two;
    two.n = 3;
    two.partitions.push_back({Clustering({0, 0, 1}, 2), {}, {}, 2, 0});
    two.partitions.push_back({Clustering({0, 1, 1}, 2), {}, {}, 2, 0});
    const auto s = co_association(two);
    CHECK(s.counts()(0, 1) == 1);
    CHECK(s.counts()(1, 2) == 1);
    CHECK(s.counts()(0, 2) == 0);
  }

  TEST_CASE("property: co-association matches the double loop") {
    testing::Gen g(10);
    for (int trial = 0; trial < 100; ++trial) {
      const auto bps = testing::random_partitions(g, static_cast<std::size_t>(g.integer(1, 12)), g.integer(1, 6), 4);
      const auto s = co_association(bps);
      CHECK(s.counts() == testing::brute_co_association(bps));
      CHECK(s.r() == static_cast<int>(bps.r()));
    }
  }

  TEST_CASE("co-association binary round trip") {
    testing::Gen g(4);
    const auto s = co_association(testing::random_partitions(g, 9, 5, 3));
    const auto bytes = co_association_to_bytes(s);
    CHECK(bytes.substr(0, 4) == "RFCS");
    CHECK(bytes.size() == 12 + 4 * 81);
    CHECK(co_association_from_bytes(bytes) == s);
    CHECK_THROWS_AS(co_association_from_bytes(bytes.substr(0, 20)), ParseError);
    CHECK_THROWS_AS(co_association_from_bytes("XXXX" + bytes.substr(4)), ParseError);
  }

  TEST_CASE("neighbourhood weights: one hop, two hops by hand, blocks and isolated rows") {
    Eigen::MatrixXi counts(4, 4);
    counts << 4, 3, 1, 0,  //
        3, 4, 2, 1,        //
        1, 2, 4, 2,        //
        0, 1, 2, 4;
    const CoAssociationMatrix s(counts, 4);
    double a[4][4], deg[4] = {0, 0, 0, 0};
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) deg[i] += counts(i, j) / 4.0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) a[i][j] = counts(i, j) / 4.0 / std::sqrt(deg[i] * deg[j]);

    const auto one = neighborhood_weights(s, 1);
    const auto two = neighborhood_weights(s, 2);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double a2 = 0.0;
        for (int m = 0; m < 4; ++m) a2 += a[i][m] * a[m][j];
        CHECK(one.gamma(i, j) == doctest::Approx(i == j ? 0.0 : a[i][j]).epsilon(1e-12));
        CHECK(two.gamma(i, j) == doctest::Approx(i == j ? 0.0 : a2).epsilon(1e-12));
      }

    const auto blocks = co_association(identical_partitions({0, 0, 0, 1, 1}, 2, 3));
    for (int hops = 1; hops <= 4; ++hops) {
      const auto w = neighborhood_weights(blocks, hops);
      for (int i = 0; i < 3; ++i)
        for (int j = 3; j < 5; ++j) {
          CHECK(w.gamma(i, j) == 0.0);
          CHECK(w.gamma(j, i) == 0.0);
        }
    }

    const auto lonely = co_association(identical_partitions({0, 0, 1}, 2, 2));
    const auto w = neighborhood_weights(lonely, 2);
    CHECK(w.isolated_rows == std::vector<std::size_t>{2});
    CHECK(w.gamma.row(2).isZero());
    CHECK_THROWS_AS(neighborhood_weights(lonely, 0), InvalidArgument);
  }

  TEST_CASE("contrastive loss: two-node cases") {
    // orthogonal rows: every similarity is 0, so each denominator is 1
    const Matrix z = (Matrix(2, 2) << 1, 0, 0, 0.5).finished();
    const Matrix ones = (Matrix(2, 2) << 0, 1, 1, 0).finished();
    CHECK(std::abs(contrastive_loss(z, ones, 2.0).value) < 1e-12);
    const auto clamped = contrastive_loss(z, Matrix::Zero(2, 2), 2.0);
    CHECK(clamped.value == doctest::Approx(-std::log(kLogClamp)).epsilon(1e-12));
    CHECK(clamped.clamped_rows.size() == 2);
    const Matrix zero_row = (Matrix(2, 2) << 0, 0, 1, 1).finished();
    CHECK(contrastive_loss(zero_row, ones, 2.0).zero_norm_rows == std::vector<std::size_t>{0});
  }

  TEST_CASE("contrastive loss: three-node hand evaluation") {
    const Matrix z = (Matrix(3, 2) << 1, 0, 0, 2, 1, 1).finished();
    const Matrix gamma = (Matrix(3, 3) << 0, 0.5, 0.2, 0.5, 0, 0.1, 0.2, 0.1, 0).finished();
    const double tau = 2.0;
    // cos(z0,z1) = 0, cos(z0,z2) = cos(z1,z2) = 1/sqrt(2)
    const double c = 1.0 / std::sqrt(2.0);
    const double e0 = std::exp(0.0 / tau), ec = std::exp(c / tau);
    const double l0 = std::log((0.5 * e0 + 0.2 * ec) / (e0 + ec));
    const double l1 = std::log((0.5 * e0 + 0.1 * ec) / (e0 + ec));
    const double l2 = std::log((0.2 * ec + 0.1 * ec) / (ec + ec));
    CHECK(contrastive_loss(z, gamma, tau).value == doctest::Approx(-(l0 + l1 + l2) / 3.0).epsilon(1e-12));
  }

  TEST_CASE("soft assignments") {
    const Matrix c = (Matrix(2, 2) << 0, 0, 1, 0).finished();
    const Matrix p = soft_assignments(Matrix::Zero(1, 2), c);
    CHECK(p(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(p(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    testing::Gen g(1);
    const Matrix z = g.matrix(5, 3, -1.0, 1.0);
    CHECK(soft_assignments(z, g.matrix(1, 3, 0.0, 1.0)).isOnes());
    const Matrix sym = (Matrix(4, 2) << 1, 0, -1, 0, 0, 1, 0, -1).finished();
    CHECK(soft_assignments(Matrix::Zero(1, 2), sym).isApprox(Matrix::Constant(1, 4, 0.25), 1e-12));
    const Matrix z2 = g.matrix(5, 2, -1.0, 1.0);
    CHECK(soft_assignments(z2, sym).isApprox(hand_soft(z2, sym), 1e-12));
  }

  TEST_CASE("fair target: singleton group, uniform P and a three-sample hand case") {
    testing::Gen g(6);
    const Matrix p = g.stochastic(4, 3);
    const auto q = fair_target(p, std::vector<int>{0, 0, 0, 1});
    CHECK(q.row(3).isApprox(p.row(3), 1e-12));
    CHECK(fair_target(Matrix::Constant(5, 2, 0.5), std::vector<int>{0, 1, 0, 1, 1}).isApprox(Matrix::Constant(5, 2, 0.5)));

    const Matrix h = (Matrix(3, 2) << 0.8, 0.2, 0.4, 0.6, 0.5, 0.5).finished();
    const auto hq = fair_target(h, std::vector<int>{0, 0, 1});
    const double f00 = 0.8 + 0.4, f01 = 0.2 + 0.6;
    const double r0a = 0.64 / f00, r0b = 0.04 / f01, r1a = 0.16 / f00, r1b = 0.36 / f01;
    CHECK(hq(0, 0) == doctest::Approx(r0a / (r0a + r0b)).epsilon(1e-12));
    CHECK(hq(1, 1) == doctest::Approx(r1b / (r1a + r1b)).epsilon(1e-12));
    CHECK(hq(2, 0) == doctest::Approx(0.5).epsilon(1e-12));

    const Matrix zero_col = (Matrix(2, 2) << 1, 0, 1, 0).finished();
    const auto zf = fair_target_detailed(zero_col, std::vector<int>{0, 0});
    CHECK(zf.zero_frequency == std::vector<std::pair<int, int>>{{0, 1}});
    CHECK(zf.q.isApprox(zero_col));
  }

  TEST_CASE("fair loss: zero on itself and n log 2 against uniform") {
    testing::Gen g(3);
    const Matrix p = g.stochastic(6, 3);
    CHECK(std::abs(fair_loss(p, p)) < 1e-12);
    Matrix hot = Matrix::Zero(7, 2);
    for (Eigen::Index i = 0; i < 7; ++i) hot(i, i % 2) = 1.0;
    CHECK(fair_loss(hot, Matrix::Constant(7, 2, 0.5)) == doctest::Approx(7.0 * std::log(2.0)).epsilon(1e-12));
  }

  TEST_CASE("structural loss: hand cases") {
    const Matrix hot = (Matrix(4, 2) << 1, 0, 0, 1, 0, 1, 1, 0).finished();
    const std::vector<int> groups{0, 0, 1, 1};
    CHECK(structural_loss(hot, groups, std::vector<int>{1, 0, 0, 1}) == 0.0);
    // Uniform rows against two points in different reference clusters:
    // PP^T = 0.5 everywhere, JJ^T = I, four entries of 0.5^2.
    CHECK(structural_loss(Matrix::Constant(2, 2, 0.5), std::vector<int>{0, 0}, std::vector<int>{0, 1}) ==
          doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(structural_loss(hot, std::vector<int>{0, 0, 2, 2}, groups), InvalidArgument);
  }

  TEST_CASE("property: P and Q rows sum to one, KL is non-negative, structural loss ignores relabeling") {
    testing::Gen g(21);
    for (int trial = 0; trial < 300; ++trial) {
      const auto n = g.integer(1, 12);
      const int k = g.integer(1, 4);
      const Matrix z = g.matrix(n, 3, -3.0, 3.0);
      const Matrix p = soft_assignments(z, g.matrix(k, 3, -3.0, 3.0));
      const auto groups = g.labels(static_cast<std::size_t>(n), 2);
      const Matrix q = fair_target(p, groups);
      for (Eigen::Index i = 0; i < n; ++i) {
        CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-9);
        CHECK(std::abs(q.row(i).sum() - 1.0) < 1e-9);
      }
      CHECK((p.array() >= 0.0).all());
      CHECK((q.array() >= 0.0).all());
      CHECK(fair_loss(p, q) >= -1e-12);
      CHECK(fair_loss(p, g.stochastic(n, k)) >= -1e-12);

      const auto dense = g.covering_labels(static_cast<std::size_t>(std::max(n, 2)), 2);
      const Matrix pp = soft_assignments(g.matrix(static_cast<Eigen::Index>(dense.size()), 2, -1, 1), g.matrix(k, 2, -1, 1));
      const auto ref = g.labels(dense.size(), 3);
      const auto perm = g.permutation(3);
      std::vector<int> relabeled;
      for (int l : ref) relabeled.push_back(perm[static_cast<std::size_t>(l)]);
      CHECK(structural_loss(pp, dense, ref) == doctest::Approx(structural_loss(pp, dense, relabeled)).epsilon(1e-12));
    }
  }

  TEST_CASE("grad check: quadratic surrogate") {
    testing::Gen g(5);
    const auto coef = g.reals(12, 0.5, 3.0);
    const auto point = g.reals(12, -2.0, 2.0);
    auto loss = [&](std::span<const double> p) {
      double s = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) s += coef[i] * p[i] * p[i];
      return s;
    };
    auto grad = [&](std::span<const double> p) {
      std::vector<double> out(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) out[i] = 2.0 * coef[i] * p[i];
      return out;
    };
    const auto r = grad_check(loss, grad, point, {}, 1e-8);
    CHECK(r.checked == 12);
    CHECK(r.max_relative_error < 1e-8);
    CHECK(r.passed);
  }

  TEST_CASE("grad check: full loss on ten samples for every loss weighting") {
    for (double alpha : {0.0, 1.0, 2.5})
      for (double beta : {0.0, 1.0, 0.7}) {
        testing::Gen g(static_cast<Seed>(alpha * 10 + beta * 100));
        auto model = random_model(g, 3, 8, 4, 2);
        model.hyper.alpha = alpha;
        model.hyper.beta = beta;
        const auto batch = random_batch(g, 10, 3, 2);
        const auto r = grad_check(model, batch, 1e-4);
        CHECK(r.checked == model.params.size());
        CHECK(r.max_relative_error < 1e-4);
        CHECK(r.passed);
      }
  }

  TEST_CASE("zero-weight terms contribute no gradient") {
    testing::Gen g(12);
    auto model = random_model(g, 2, 6, 3, 3);
    model.hyper.alpha = 0.0;
    model.hyper.beta = 0.0;
    const auto batch = random_batch(g, 9, 2, 3);
    CfcParams grad;
    const auto loss = cfc_loss(model.params, model.hyper, batch, &grad);
    CHECK(grad.centers.isZero());
    CHECK(loss.total == doctest::Approx(loss.contrastive).epsilon(1e-12));
    CHECK(loss.fair >= 0.0);
    CHECK(loss.structural >= 0.0);
  }

  TEST_CASE("params flatten round trip") {
    testing::Gen g(13);
    auto m = random_model(g, 3, 5, 2, 2);
    const auto flat = m.params.flatten();
    CHECK(flat.size() == m.params.size());
    CHECK(flat.size() == 5 * 3 + 5 + 2 * 5 + 2 + 2 * 2);
    auto copy = m.params.zeros_like();
    copy.unflatten(flat);
    CHECK(copy.flatten() == flat);
  }

  TEST_CASE("training: deterministic, checkpoint round trip, rejects bad hyperparameters") {
    const auto ds = two_blobs(12, 6.0, 1);
    auto cfg = desk_config();
    cfg.sampling.r = 10;
    cfg.hyper.epochs = 20;
    const auto a = run_cfc(ds.features(), ds.groups(), cfg, 5);
    const auto b = run_cfc(ds.features(), ds.groups(), cfg, 5);
    CHECK(a.trained.clustering == b.trained.clustering);
    CHECK(a.trained.model.params.flatten() == b.trained.model.params.flatten());
    CHECK(a.trained.history.size() == 20);
    CHECK(a.co_association == b.co_association);

    const auto bytes = model_to_bytes(a.trained.model);
    CHECK(bytes.substr(0, 4) == "RFCM");
    const auto back = model_from_bytes(bytes);
    CHECK(back.params.flatten() == a.trained.model.params.flatten());
    CHECK(back.hyper.epochs == 20);
    CHECK(back.seed == a.trained.model.seed);
    CHECK(back.embed(ds.features()) == a.trained.model.embed(ds.features()));
    CHECK(model_to_bytes(back) == bytes);
    CHECK_THROWS_AS(model_from_bytes(bytes.substr(0, bytes.size() - 3)), ParseError);

    auto bad = cfg.hyper;
    bad.dropout = 1.0;
    CHECK_THROWS_AS(train_cfc(ds.features(), ds.groups(), a.co_association, a.reference.labels(), bad, 0),
                    InvalidArgument);
    bad = cfg.hyper;
    bad.k = 100;
    CHECK_THROWS_AS(train_cfc(ds.features(), ds.groups(), a.co_association, a.reference.labels(), bad, 0),
                    InvalidArgument);
  }

  TEST_CASE("training: divergence raises NonFiniteLoss with the epoch") {
    const auto ds = two_blobs(8, 3.0, 2);
    auto cfg = desk_config();
    cfg.sampling.r = 5;
    cfg.hyper.epochs = 50;
    cfg.hyper.learning_rate = 1e300;
    cfg.hyper.grad_clip = std::numeric_limits<double>::infinity();
    try {
      run_cfc(ds.features(), ds.groups(), cfg, 0);
      FAIL("expected NonFiniteLoss");
    } catch (const NonFiniteLoss& e) {
      CHECK(e.epoch() >= 0);
      CHECK(e.epoch() < 50);
      CHECK(std::string(e.what()).find("contrastive") != std::string::npos);
    }
  }

  TEST_CASE("training: sixty-sample two-group blobs end fair and accurate") {
    for (Seed seed = 0; seed < 3; ++seed) {
      const auto ds = two_blobs(30, 6.0, seed);
      const auto r = run_cfc(ds.features(), ds.groups(), desk_config(), seed);
      const auto& labels = r.trained.clustering.labels();
      CHECK(balance(labels, ds.groups(), 2) >= 0.8);
      CHECK(nmi(labels, *ds.truth_labels()) >= 0.8);
    }
  }

  TEST_CASE("reference clustering falls back to k-means beyond two groups") {
    testing::Gen g(30);
    const Matrix x = g.matrix(12, 2, 0.0, 1.0);
    const auto three = g.covering_labels(12, 3);
    CHECK(reference_clustering(x, three, 2, 2, 5, 0).size() == 12);
    const auto two = g.covering_labels(12, 2);
    CHECK(reference_clustering(x, two, 2, 2, 5, 0).labels().size() == 12);
  }
}

#pragma once

// Consensus Fair Clustering.
//
// Stage 1 clusters r random row/feature subsamples with k-means and counts, for
// every pair of samples, how many of these basic partitions put the pair
// together (the co-association matrix S).
//
// Stage 2 trains an MLP encoder x -> z together with K cluster centers on
//
//   L = L_c + alpha * L_f + beta * L_p
//
//   L_c  neighbourhood contrastive loss; positives weighted by Gamma, a
//        normalized power of S, similarity = cosine / tau
//   L_f  KL(P || Q), P = Student-t soft assignments to the centers, Q the
//        group-normalized sharpened target
//   L_p  sum over groups of ||P_g P_g^T - J_g J_g^T||_F^2 against the
//        co-membership of a reference fair clustering
//
// All gradients are analytic (see cfc.cpp); grad_check compares them with
// central finite differences.

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfc/core_data.hpp"
#include "rfc/rng.hpp"

namespace rfc {

inline constexpr double kLogClamp = 1e-12;

// ---------------------------------------------------------------------------
// Stage 1

struct BasicPartition {
  Clustering partition;                      ///< labels for all n samples
  std::vector<std::size_t> sampled_indices;  ///< rows k-means was fitted on
  std::vector<std::size_t> sampled_features;
  int k = 1;
  Seed seed = 0;
};

struct BasicPartitionSet {
  std::vector<BasicPartition> partitions;
  std::size_t n = 0;
  std::size_t r() const noexcept { return partitions.size(); }
};

struct PartitionSampling {
  int r = 100;
  double row_frac = 0.8;
  double col_frac = 0.8;
  int k_min = 2;
  int k_max = 2;
};

/// r basic partitions. Partition i fits k-means (K_i uniform in [k_min, k_max])
/// on a random row/column subsample and labels every sample by its nearest
/// centroid over the sampled columns. Rows left out of every subsample are added
/// round-robin so that the subsamples cover the dataset.
BasicPartitionSet generate_basic_partitions(const Matrix& x, const PartitionSampling& sampling, Seed seed);

class CoAssociationMatrix {
 public:
  CoAssociationMatrix() = default;
  CoAssociationMatrix(Eigen::MatrixXi counts, int r);

  const Eigen::MatrixXi& counts() const noexcept { return counts_; }
  int r() const noexcept { return r_; }
  std::size_t n() const noexcept { return static_cast<std::size_t>(counts_.rows()); }

  friend bool operator==(const CoAssociationMatrix& a, const CoAssociationMatrix& b) {
    return a.r_ == b.r_ && a.counts_ == b.counts_;
  }

 private:
  Eigen::MatrixXi counts_;
  int r_ = 0;
};

/// S_uv = number of partitions that place u and v in the same cluster.
CoAssociationMatrix co_association(const BasicPartitionSet& bps);

/// Binary layout: "RFCS", uint32 n, uint32 r, then n*n uint32 counts, row-major,
/// all little-endian.
std::string co_association_to_bytes(const CoAssociationMatrix& s);
CoAssociationMatrix co_association_from_bytes(const std::string& bytes);
void save_co_association(const CoAssociationMatrix& s, const std::filesystem::path& path);
CoAssociationMatrix load_co_association(const std::filesystem::path& path);

enum class GammaMode {
  kMatrixPower,  ///< (D^-1/2 (S/r) D^-1/2)^R, R-hop neighbourhoods
  kElementwise,  ///< (S_uv / r)^R entry by entry
};

struct NeighborhoodWeights {
  Matrix gamma;                           ///< n x n, zero diagonal
  std::vector<std::size_t> isolated_rows;  ///< rows with no off-diagonal co-association
};

NeighborhoodWeights neighborhood_weights(const CoAssociationMatrix& s, int hops,
                                         GammaMode mode = GammaMode::kMatrixPower);

// ---------------------------------------------------------------------------
// Losses

struct ContrastiveResult {
  double value = 0.0;
  std::vector<std::size_t> zero_norm_rows;
  std::vector<std::size_t> clamped_rows;  ///< rows whose positive mass hit the clamp
};

/// -(1/n) sum_i log( sum_{a!=i} gamma_ia e^{cos(z_i,z_a)/tau} / sum_{b!=i} e^{cos(z_i,z_b)/tau} ),
/// numerator clamped at kLogClamp. Writes dL/dZ into `grad` when non-null.
ContrastiveResult contrastive_loss(const Matrix& z, const Matrix& gamma, double tau, Matrix* grad = nullptr);

/// Rows: (1 + ||z - c_k||^2)^-1, normalized.
Matrix soft_assignments(const Matrix& z, const Matrix& centers);

struct FairTargetResult {
  Matrix q;
  std::vector<std::pair<int, int>> zero_frequency;  ///< (group, cluster) with no soft mass
};

/// q_k^x proportional to (p_k^x)^2 / f_k^{g(x)}, f_k^g = sum over group g of p_k.
FairTargetResult fair_target_detailed(const Matrix& p, std::span<const int> groups);
Matrix fair_target(const Matrix& p, std::span<const int> groups);

/// KL(P || Q) summed over samples, as sum of p log(p/q) - p + q so each term is
/// non-negative under rounding; rows are assumed to sum to 1. q clamped at kLogClamp.
double fair_loss(const Matrix& p, const Matrix& q);

/// sum_g ||P_g P_g^T - J_g J_g^T||_F^2 where J_g one-hot encodes `reference`
/// restricted to group g. Throws if some group id in [0, L) has no members.
double structural_loss(const Matrix& p, std::span<const int> groups, std::span<const int> reference);

// ---------------------------------------------------------------------------
// Stage 2 model

struct CfcHyper {
  int hops = 2;        ///< R
  double alpha = 1.0;  ///< weight of L_f
  double beta = 1.0;   ///< weight of L_p
  double tau = 2.0;
  int epochs = 3000;
  double learning_rate = 1e-3;
  double grad_clip = 5.0;
  double dropout = 0.6;
  int hidden = 256;
  int embedding = 16;
  int k = 2;
  GammaMode gamma_mode = GammaMode::kMatrixPower;
};

/// Encoder x -> W2 dropout(gelu(W1 x + b1)) + b2 and the K x e cluster centers.
struct CfcParams {
  Matrix w1;  ///< hidden x d
  Vector b1;
  Matrix w2;  ///< embedding x hidden
  Vector b2;
  Matrix centers;  ///< K x embedding

  std::size_t size() const;
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
  CfcParams zeros_like() const;
};

struct CfcModel {
  CfcParams params;
  CfcHyper hyper;
  Seed seed = 0;
  Vector feature_mean;   ///< standardization applied before the encoder
  Vector feature_scale;

  /// Embeddings of raw feature rows (no dropout).
  Matrix embed(const Matrix& x) const;
};

/// Checkpoint: "RFCM", uint64 header length, JSON header (hyper, shapes, seed),
/// then every parameter as little-endian float64 (w1, b1, w2, b2, centers,
/// feature_mean, feature_scale; matrices row-major).
std::string model_to_bytes(const CfcModel& model);
CfcModel model_from_bytes(const std::string& bytes);
void save_model(const CfcModel& model, const std::filesystem::path& path);
CfcModel load_model(const std::filesystem::path& path);

/// Everything the loss needs besides the parameters.
struct CfcBatch {
  Matrix x;                    ///< standardized features
  std::vector<int> groups;
  Matrix gamma;                ///< neighbourhood weights, zero diagonal
  std::vector<int> reference;  ///< reference fair clustering labels (for L_p)
};

struct LossBreakdown {
  double contrastive = 0.0;
  double fair = 0.0;
  double structural = 0.0;
  double total = 0.0;
};

/// Total loss; when `grad` is non-null it receives dL/dparams. `keep_mask`
/// (n x hidden, entries 0/1) enables inverted dropout with the model's rate.
LossBreakdown cfc_loss(const CfcParams& params, const CfcHyper& hyper, const CfcBatch& batch, CfcParams* grad = nullptr,
                       const Matrix* keep_mask = nullptr);

struct CfcTrainResult {
  CfcModel model;
  Clustering clustering;
  std::vector<LossBreakdown> history;  ///< one entry per epoch (dropout active)
};

/// Seeded initialization, centers from k-means on the initial embeddings,
/// `epochs` steps of clipped gradient descent, labels = row argmax of P
/// (lowest index on ties).
CfcTrainResult train_cfc(const Matrix& x, std::span<const int> groups, const CoAssociationMatrix& s,
                         std::span<const int> reference, const CfcHyper& hyper, Seed seed);

struct CfcPipelineConfig {
  PartitionSampling sampling;
  CfcHyper hyper;
  int fairlet_p = 2;
  int fairlet_q = 5;
};

/// Reference clustering for L_p: the fairlet clusterer for two groups, plain
/// k-means otherwise.
Clustering reference_clustering(const Matrix& x, std::span<const int> groups, int k, int p, int q, Seed seed);

struct CfcPipelineResult {
  BasicPartitionSet partitions;
  CoAssociationMatrix co_association;
  Clustering reference;
  CfcTrainResult trained;
};

/// Stage 1, reference clustering and Stage 2 in one call.
CfcPipelineResult run_cfc(const Matrix& x, std::span<const int> groups, const CfcPipelineConfig& config, Seed seed);

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Compares `gradient(params)` with central differences (step `step`) of
/// `loss` on `coords` (all coordinates when empty). Relative error is
/// |a - f| / max(|a|, |f|, floor).
GradCheckResult grad_check(const std::function<double(std::span<const double>)>& loss,
                           const std::function<std::vector<double>(std::span<const double>)>& gradient,
                           std::span<const double> params, std::span<const std::size_t> coords, double tolerance,
                           double step = 1e-5, double floor = 1e-7);

/// Checks the CFC loss gradient (dropout disabled) on `coords` random
/// parameters drawn with `seed`; 0 checks every parameter.
GradCheckResult grad_check(const CfcModel& model, const CfcBatch& batch, double tolerance, std::size_t coords = 0,
                           Seed seed = 0);

}  // namespace rfc

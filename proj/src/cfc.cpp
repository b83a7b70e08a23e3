#include "rfc/cfc.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rfc/clusterers.hpp"
#include "rfc/error.hpp"

namespace rfc {

namespace {

using Index = Eigen::Index;

Index idx(std::size_t i) { return static_cast<Index>(i); }

// Little-endian byte helpers.
void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}
void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
  std::uint64_t u(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int b = 0; b < width; ++b)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(b)])) << (8 * b);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u(8);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string take(std::size_t count) {
    need(count);
    std::string s = bytes_.substr(pos_, count);
    pos_ += count;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t count) const {
    if (pos_ + count > bytes_.size()) throw ParseError(0, "", what_ + ": truncated input");
  }
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path.string(), "write failed");
}

double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); }

double gelu_grad(double v) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(v * M_SQRT1_2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
}

// Members of each group id in [0, max+1).
std::vector<std::vector<std::size_t>> group_index(std::span<const int> groups) {
  int mx = -1;
  for (int g : groups) {
    if (g < 0) throw InvalidArgument("negative group id");
    mx = std::max(mx, g);
  }
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(mx + 1));
  for (std::size_t i = 0; i < groups.size(); ++i) members[static_cast<std::size_t>(groups[i])].push_back(i);
  return members;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage 1

BasicPartitionSet generate_basic_partitions(const Matrix& x, const PartitionSampling& sampling, Seed seed) {
  const auto n = static_cast<std::size_t>(x.rows());
  const auto d = static_cast<std::size_t>(x.cols());
  if (sampling.r < 1) throw InvalidArgument("need at least one basic partition");
  if (!(sampling.row_frac > 0.0 && sampling.row_frac <= 1.0) || !(sampling.col_frac > 0.0 && sampling.col_frac <= 1.0))
    throw InvalidArgument("row_frac and col_frac must lie in (0, 1]");
  if (sampling.k_min < 1 || sampling.k_max < sampling.k_min) throw InvalidArgument("invalid K range for basic partitions");

  const auto rows = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(sampling.row_frac * static_cast<double>(n))));
  const auto cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(sampling.col_frac * static_cast<double>(d))));

  BasicPartitionSet out;
  out.n = n;
  out.partitions.resize(static_cast<std::size_t>(sampling.r));
  Rng rng(derive_seed(seed, 0xb9));
  std::vector<bool> covered(n, false);
  for (auto& bp : out.partitions) {
    bp.sampled_indices = rng.sample_indices(n, rows);
    bp.sampled_features = rng.sample_indices(d, cols);
    bp.k = sampling.k_min + static_cast<int>(rng.below(static_cast<std::size_t>(sampling.k_max - sampling.k_min + 1)));
    bp.seed = derive_seed(seed, rng.next_u64());
    for (auto i : bp.sampled_indices) covered[i] = true;
  }
  std::size_t turn = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (covered[i]) continue;
    auto& target = out.partitions[turn++ % out.partitions.size()].sampled_indices;
    target.insert(std::upper_bound(target.begin(), target.end(), i), i);
  }

  for (auto& bp : out.partitions) {
    Matrix sub(idx(bp.sampled_indices.size()), idx(bp.sampled_features.size()));
    for (std::size_t a = 0; a < bp.sampled_indices.size(); ++a)
      for (std::size_t b = 0; b < bp.sampled_features.size(); ++b)
        sub(idx(a), idx(b)) = x(idx(bp.sampled_indices[a]), idx(bp.sampled_features[b]));
    bp.k = std::min<int>(bp.k, static_cast<int>(bp.sampled_indices.size()));
    ClustererConfig cfg;
    cfg.k = bp.k;
    cfg.restarts = 1;
    cfg.seed = bp.seed;
    const auto fitted = kmeans(sub, cfg);

    std::vector<int> labels(n);
    Vector point(idx(bp.sampled_features.size()));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t b = 0; b < bp.sampled_features.size(); ++b) point(idx(b)) = x(idx(i), idx(bp.sampled_features[b]));
      labels[i] = nearest_center_l2(fitted.centers, point);
    }
    for (std::size_t a = 0; a < bp.sampled_indices.size(); ++a)
      labels[bp.sampled_indices[a]] = fitted.clustering.labels()[a];
    bp.partition = Clustering(std::move(labels), bp.k);
  }
  return out;
}

CoAssociationMatrix::CoAssociationMatrix(Eigen::MatrixXi counts, int r) : counts_(std::move(counts)), r_(r) {
  if (counts_.rows() != counts_.cols()) throw InvalidArgument("co-association matrix must be square");
  if (r_ < 1) throw InvalidArgument("co-association matrix needs r >= 1");
}

CoAssociationMatrix co_association(const BasicPartitionSet& bps) {
  if (bps.partitions.empty()) throw InvalidArgument("no basic partitions");
  const std::size_t n = bps.n;
  Eigen::MatrixXi s = Eigen::MatrixXi::Zero(idx(n), idx(n));
  for (const auto& bp : bps.partitions) {
    const auto& l = bp.partition.labels();
    if (l.size() != n) throw InvalidArgument("basic partition does not cover every sample");
    // Bucket members per cluster so each partition costs sum of squared cluster sizes.
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(bp.partition.k()));
    for (std::size_t i = 0; i < n; ++i) members[static_cast<std::size_t>(l[i])].push_back(i);
    for (const auto& m : members)
      for (auto u : m)
        for (auto v : m) ++s(idx(u), idx(v));
  }
  return CoAssociationMatrix(std::move(s), static_cast<int>(bps.partitions.size()));
}

std::string co_association_to_bytes(const CoAssociationMatrix& s) {
  std::string out = "RFCS";
  put_u32(out, static_cast<std::uint32_t>(s.n()));
  put_u32(out, static_cast<std::uint32_t>(s.r()));
  for (Index i = 0; i < s.counts().rows(); ++i)
    for (Index j = 0; j < s.counts().cols(); ++j) put_u32(out, static_cast<std::uint32_t>(s.counts()(i, j)));
  return out;
}

CoAssociationMatrix co_association_from_bytes(const std::string& bytes) {
  ByteReader in(bytes, "co-association file");
  if (in.take(4) != "RFCS") throw ParseError(0, "", "co-association file: bad magic");
  const auto n = static_cast<std::size_t>(in.u(4));
  const auto r = static_cast<int>(in.u(4));
  Eigen::MatrixXi s(idx(n), idx(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s(idx(i), idx(j)) = static_cast<int>(in.u(4));
  if (!in.done()) throw ParseError(0, "", "co-association file: trailing bytes");
  return CoAssociationMatrix(std::move(s), r);
}

void save_co_association(const CoAssociationMatrix& s, const std::filesystem::path& path) {
  write_file(path, co_association_to_bytes(s));
}

CoAssociationMatrix load_co_association(const std::filesystem::path& path) {
  return co_association_from_bytes(read_file(path));
}

NeighborhoodWeights neighborhood_weights(const CoAssociationMatrix& s, int hops, GammaMode mode) {
  if (hops < 1) throw InvalidArgument("neighbourhood hops R must be >= 1");
  const Index n = s.counts().rows();
  const Matrix scaled = s.counts().cast<double>() / static_cast<double>(s.r());
  NeighborhoodWeights out;
  for (Index i = 0; i < n; ++i) {
    const double off = scaled.row(i).sum() - scaled(i, i);
    if (off <= 0.0) out.isolated_rows.push_back(static_cast<std::size_t>(i));
  }
  if (mode == GammaMode::kElementwise) {
    out.gamma = scaled.array().pow(static_cast<double>(hops)).matrix();
  } else {
    const Vector deg = scaled.rowwise().sum();
    Vector inv_sqrt(n);
    for (Index i = 0; i < n; ++i) inv_sqrt(i) = deg(i) > 0.0 ? 1.0 / std::sqrt(deg(i)) : 0.0;
    const Matrix a = inv_sqrt.asDiagonal() * scaled * inv_sqrt.asDiagonal();
    out.gamma = a;
    for (int h = 1; h < hops; ++h) out.gamma = out.gamma * a;
  }
  out.gamma.diagonal().setZero();
  for (auto i : out.isolated_rows) out.gamma.row(idx(i)).setZero();
  return out;
}

// ---------------------------------------------------------------------------
// Losses

ContrastiveResult contrastive_loss(const Matrix& z, const Matrix& gamma, double tau, Matrix* grad) {
  if (!(tau > 0.0)) throw InvalidArgument("temperature tau must be positive");
  const Index n = z.rows();
  if (gamma.rows() != n || gamma.cols() != n) throw InvalidArgument("gamma must be n x n");
  ContrastiveResult out;

  Vector norms = z.rowwise().norm();
  Matrix unit = z;
  for (Index i = 0; i < n; ++i) {
    if (norms(i) > 0.0) {
      unit.row(i) /= norms(i);
    } else {
      unit.row(i).setZero();
      out.zero_norm_rows.push_back(static_cast<std::size_t>(i));
    }
  }
  const Matrix sim = unit * unit.transpose();
  Matrix e = (sim.array() / tau).exp().matrix();
  e.diagonal().setZero();
  const Vector den = e.rowwise().sum();
  const Vector num = (gamma.array() * e.array()).matrix().rowwise().sum();

  double loss = 0.0;
  std::vector<bool> clamped(static_cast<std::size_t>(n), false);
  for (Index i = 0; i < n; ++i) {
    double numer = num(i);
    if (!(numer > kLogClamp)) {
      numer = kLogClamp;
      clamped[static_cast<std::size_t>(i)] = true;
      out.clamped_rows.push_back(static_cast<std::size_t>(i));
    }
    loss -= std::log(numer) - std::log(den(i));
  }
  out.value = loss / static_cast<double>(n);

  if (grad) {
    // dL/dsim_ij for the row-i term.
    Matrix w(n, n);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (Index i = 0; i < n; ++i) {
      const bool c = clamped[static_cast<std::size_t>(i)];
      for (Index j = 0; j < n; ++j) {
        if (i == j) {
          w(i, j) = 0.0;
          continue;
        }
        const double pos = c ? 0.0 : gamma(i, j) * e(i, j) / (tau * num(i));
        const double all = e(i, j) / (tau * den(i));
        w(i, j) = -inv_n * (pos - all);
      }
    }
    const Matrix dunit = (w + w.transpose()) * unit;
    grad->resize(n, z.cols());
    for (Index i = 0; i < n; ++i) {
      if (!(norms(i) > 0.0)) {
        grad->row(i).setZero();
        continue;
      }
      const double radial = dunit.row(i).dot(unit.row(i));
      grad->row(i) = (dunit.row(i) - radial * unit.row(i)) / norms(i);
    }
  }
  return out;
}

Matrix soft_assignments(const Matrix& z, const Matrix& centers) {
  if (centers.rows() < 1) throw InvalidArgument("need at least one cluster center");
  if (centers.cols() != z.cols()) throw InvalidArgument("center and embedding widths differ");
  Matrix p(z.rows(), centers.rows());
  for (Index i = 0; i < z.rows(); ++i) {
    for (Index k = 0; k < centers.rows(); ++k) p(i, k) = 1.0 / (1.0 + (z.row(i) - centers.row(k)).squaredNorm());
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

FairTargetResult fair_target_detailed(const Matrix& p, std::span<const int> groups) {
  if (static_cast<std::size_t>(p.rows()) != groups.size()) throw InvalidArgument("P and groups misaligned");
  const auto members = group_index(groups);
  const Index kk = p.cols();
  Matrix freq = Matrix::Zero(idx(members.size()), kk);
  for (std::size_t i = 0; i < groups.size(); ++i) freq.row(groups[i]) += p.row(idx(i));

  FairTargetResult out;
  for (std::size_t g = 0; g < members.size(); ++g)
    for (Index k = 0; k < kk; ++k)
      if (!members[g].empty() && !(freq(idx(g), k) > 0.0)) out.zero_frequency.emplace_back(static_cast<int>(g), static_cast<int>(k));

  out.q.resize(p.rows(), kk);
  for (Index i = 0; i < p.rows(); ++i) {
    const int g = groups[static_cast<std::size_t>(i)];
    double total = 0.0;
    for (Index k = 0; k < kk; ++k) {
      const double f = freq(g, k);
      const double w = f > 0.0 ? p(i, k) * p(i, k) / f : 0.0;
      out.q(i, k) = w;
      total += w;
    }
    if (total > 0.0)
      out.q.row(i) /= total;
    else
      out.q.row(i).setConstant(1.0 / static_cast<double>(kk));
  }
  return out;
}

Matrix fair_target(const Matrix& p, std::span<const int> groups) { return fair_target_detailed(p, groups).q; }

double fair_loss(const Matrix& p, const Matrix& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) throw InvalidArgument("P and Q shapes differ");
  // Rows of P and Q sum to 1, so adding q - p per entry leaves the KL unchanged
  // while making every term non-negative; rounding cannot push the sum below 0.
  double kl = 0.0;
  for (Index i = 0; i < p.rows(); ++i)
    for (Index k = 0; k < p.cols(); ++k) {
      const double a = p(i, k), b = std::max(q(i, k), kLogClamp);
      const double term = a > 0.0 ? a * std::log(a / b) - a + b : b;
      kl += std::max(term, 0.0);
    }
  return kl;
}

namespace {

// One-hot co-membership of `reference` restricted to `members`.
Matrix comembership(std::span<const int> reference, const std::vector<std::size_t>& members) {
  const Index m = idx(members.size());
  Matrix out(m, m);
  for (Index a = 0; a < m; ++a)
    for (Index b = 0; b < m; ++b)
      out(a, b) = reference[members[static_cast<std::size_t>(a)]] == reference[members[static_cast<std::size_t>(b)]] ? 1.0 : 0.0;
  return out;
}

double structural_term(const Matrix& p, const std::vector<std::vector<std::size_t>>& members,
                       const std::vector<Matrix>& targets, Matrix* grad_p) {
  double loss = 0.0;
  for (std::size_t g = 0; g < members.size(); ++g) {
    const Matrix pg = gather_rows(p, members[g]);
    const Matrix diff = pg * pg.transpose() - targets[g];
    loss += diff.squaredNorm();
    if (grad_p) {
      const Matrix dpg = 4.0 * diff * pg;
      for (std::size_t a = 0; a < members[g].size(); ++a) grad_p->row(idx(members[g][a])) += dpg.row(idx(a));
    }
  }
  return loss;
}

std::vector<std::vector<std::size_t>> nonempty_groups(std::span<const int> groups) {
  auto members = group_index(groups);
  for (std::size_t g = 0; g < members.size(); ++g)
    if (members[g].empty()) throw InvalidArgument("protected group " + std::to_string(g) + " has no samples");
  return members;
}

}  // namespace

double structural_loss(const Matrix& p, std::span<const int> groups, std::span<const int> reference) {
  if (static_cast<std::size_t>(p.rows()) != groups.size() || groups.size() != reference.size())
    throw InvalidArgument("P, groups and reference must be aligned");
  const auto members = nonempty_groups(groups);
  std::vector<Matrix> targets;
  for (const auto& m : members) targets.push_back(comembership(reference, m));
  return structural_term(p, members, targets, nullptr);
}

// ---------------------------------------------------------------------------
// Parameters

std::size_t CfcParams::size() const {
  return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size() + centers.size());
}

std::vector<double> CfcParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(size());
  auto push = [&flat](const auto& m) {
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) flat.push_back(m(i, j));
  };
  push(w1);
  push(b1);
  push(w2);
  push(b2);
  push(centers);
  return flat;
}

void CfcParams::unflatten(std::span<const double> flat) {
  if (flat.size() != size()) throw InvalidArgument("flat parameter vector has the wrong length");
  std::size_t pos = 0;
  auto pull = [&](auto& m) {
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) m(i, j) = flat[pos++];
  };
  pull(w1);
  pull(b1);
  pull(w2);
  pull(b2);
  pull(centers);
}

CfcParams CfcParams::zeros_like() const {
  return CfcParams{Matrix::Zero(w1.rows(), w1.cols()), Vector::Zero(b1.size()), Matrix::Zero(w2.rows(), w2.cols()),
                   Vector::Zero(b2.size()), Matrix::Zero(centers.rows(), centers.cols())};
}

namespace {

Matrix standardize(const Matrix& x, const Vector& mean, const Vector& scale) {
  Matrix out = x.rowwise() - mean.transpose();
  for (Index j = 0; j < out.cols(); ++j) out.col(j) /= scale(j);
  return out;
}

struct Forward {
  Matrix pre;     // n x hidden
  Matrix hidden;  // after activation and dropout
  Matrix z;       // n x embedding
};

Forward encode(const CfcParams& params, const Matrix& x, const Matrix* keep_mask, double dropout) {
  Forward f;
  f.pre = (x * params.w1.transpose()).rowwise() + params.b1.transpose();
  f.hidden = f.pre.unaryExpr([](double v) { return gelu(v); });
  if (keep_mask) f.hidden = (f.hidden.array() * keep_mask->array()).matrix() / (1.0 - dropout);
  f.z = (f.hidden * params.w2.transpose()).rowwise() + params.b2.transpose();
  return f;
}

}  // namespace

Matrix CfcModel::embed(const Matrix& x) const {
  return encode(params, standardize(x, feature_mean, feature_scale), nullptr, 0.0).z;
}

// ---------------------------------------------------------------------------
// Loss and gradient

LossBreakdown cfc_loss(const CfcParams& params, const CfcHyper& hyper, const CfcBatch& batch, CfcParams* grad,
                       const Matrix* keep_mask) {
  const Index n = batch.x.rows();
  if (static_cast<std::size_t>(n) != batch.groups.size() || batch.reference.size() != batch.groups.size())
    throw InvalidArgument("CFC batch: features, groups and reference are misaligned");
  const Forward f = encode(params, batch.x, keep_mask, hyper.dropout);
  const Matrix& z = f.z;
  const Matrix& c = params.centers;
  const Index kk = c.rows();

  LossBreakdown out;
  Matrix dz;
  const auto contrast = contrastive_loss(z, batch.gamma, hyper.tau, grad ? &dz : nullptr);
  out.contrastive = contrast.value;

  // Student-t assignments.
  Matrix u(n, kk);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < kk; ++k) u(i, k) = 1.0 / (1.0 + (z.row(i) - c.row(k)).squaredNorm());
  const Vector usum = u.rowwise().sum();
  Matrix p = u;
  for (Index i = 0; i < n; ++i) p.row(i) /= usum(i);

  // Fair loss, written as
  //   L_f = -sum p log p + sum_{g,k} f_gk log f_gk + sum_x log W_x,
  //   W_x = sum_k p_xk^2 / f_{g(x)k},
  // which equals KL(P || Q) whenever the rows of P sum to one.
  const auto members = nonempty_groups(batch.groups);
  const Index ng = idx(members.size());
  Matrix freq = Matrix::Zero(ng, kk);
  for (Index i = 0; i < n; ++i) freq.row(batch.groups[static_cast<std::size_t>(i)]) += p.row(i);
  Vector wsum(n);
  for (Index i = 0; i < n; ++i) {
    const int g = batch.groups[static_cast<std::size_t>(i)];
    double s = 0.0;
    for (Index k = 0; k < kk; ++k) s += p(i, k) * p(i, k) / freq(g, k);
    wsum(i) = s;
  }
  {
    Matrix q(n, kk);
    for (Index i = 0; i < n; ++i) {
      const int g = batch.groups[static_cast<std::size_t>(i)];
      for (Index k = 0; k < kk; ++k) q(i, k) = p(i, k) * p(i, k) / freq(g, k) / wsum(i);
    }
    out.fair = fair_loss(p, q);
  }

  std::vector<Matrix> targets;
  targets.reserve(members.size());
  for (const auto& m : members) targets.push_back(comembership(batch.reference, m));
  Matrix dp_struct = Matrix::Zero(n, kk);
  out.structural = structural_term(p, members, targets, grad ? &dp_struct : nullptr);
  out.total = out.contrastive + hyper.alpha * out.fair + hyper.beta * out.structural;
  if (!grad) return out;

  // dL/dP
  Matrix dp = hyper.beta * dp_struct;
  if (hyper.alpha != 0.0) {
    Matrix t = Matrix::Zero(ng, kk);
    for (Index i = 0; i < n; ++i) {
      const int g = batch.groups[static_cast<std::size_t>(i)];
      for (Index k = 0; k < kk; ++k) t(g, k) += p(i, k) * p(i, k) / (freq(g, k) * freq(g, k) * wsum(i));
    }
    for (Index i = 0; i < n; ++i) {
      const int g = batch.groups[static_cast<std::size_t>(i)];
      for (Index k = 0; k < kk; ++k) {
        const double d = -std::log(p(i, k)) + std::log(freq(g, k)) + 2.0 * p(i, k) / (freq(g, k) * wsum(i)) - t(g, k);
        dp(i, k) += hyper.alpha * d;
      }
    }
  }

  // Through the normalization and the kernel to Z and the centers.
  *grad = params.zeros_like();
  for (Index i = 0; i < n; ++i) {
    const double mean = dp.row(i).dot(p.row(i));
    for (Index k = 0; k < kk; ++k) {
      const double du = (dp(i, k) - mean) / usum(i);
      const double dd = -du * u(i, k) * u(i, k);
      const auto diff = (z.row(i) - c.row(k)).eval();
      dz.row(i) += 2.0 * dd * diff;
      grad->centers.row(k) -= 2.0 * dd * diff;
    }
  }

  // Encoder.
  grad->w2 = dz.transpose() * f.hidden;
  grad->b2 = dz.colwise().sum().transpose();
  Matrix dh = dz * params.w2;
  if (keep_mask) dh = (dh.array() * keep_mask->array()).matrix() / (1.0 - hyper.dropout);
  dh = (dh.array() * f.pre.unaryExpr([](double v) { return gelu_grad(v); }).array()).matrix();
  grad->w1 = dh.transpose() * batch.x;
  grad->b1 = dh.colwise().sum().transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

double squared_norm(const CfcParams& p) {
  return p.w1.squaredNorm() + p.b1.squaredNorm() + p.w2.squaredNorm() + p.b2.squaredNorm() + p.centers.squaredNorm();
}

void add_scaled(CfcParams& p, double s, const CfcParams& g) {
  p.w1 += s * g.w1;
  p.b1 += s * g.b1;
  p.w2 += s * g.w2;
  p.b2 += s * g.b2;
  p.centers += s * g.centers;
}

bool all_finite(const CfcParams& p) {
  return p.w1.allFinite() && p.b1.allFinite() && p.w2.allFinite() && p.b2.allFinite() && p.centers.allFinite();
}

std::string breakdown(const LossBreakdown& l) {
  std::ostringstream s;
  s << "non-finite loss (contrastive=" << l.contrastive << ", fair=" << l.fair << ", structural=" << l.structural
    << ", total=" << l.total << ")";
  return s.str();
}

void validate(const CfcHyper& h) {
  if (h.k < 1 || h.hidden < 1 || h.embedding < 1) throw InvalidArgument("CFC: K, hidden and embedding must be >= 1");
  if (h.epochs < 0) throw InvalidArgument("CFC: epochs must be >= 0");
  if (!(h.dropout >= 0.0 && h.dropout < 1.0)) throw InvalidArgument("CFC: dropout must lie in [0, 1)");
  if (!(h.tau > 0.0)) throw InvalidArgument("CFC: tau must be positive");
  if (!(h.learning_rate > 0.0)) throw InvalidArgument("CFC: learning rate must be positive");
  if (h.alpha < 0.0 || h.beta < 0.0) throw InvalidArgument("CFC: alpha and beta must be non-negative");
}

}  // namespace

CfcTrainResult train_cfc(const Matrix& x, std::span<const int> groups, const CoAssociationMatrix& s,
                         std::span<const int> reference, const CfcHyper& hyper, Seed seed) {
  validate(hyper);
  const Index n = x.rows(), d = x.cols();
  if (static_cast<std::size_t>(n) != s.n()) throw InvalidArgument("co-association matrix and features misaligned");
  if (groups.size() != static_cast<std::size_t>(n) || reference.size() != groups.size())
    throw InvalidArgument("groups / reference misaligned with features");
  if (hyper.k > n) throw InvalidArgument("K exceeds the number of samples");

  CfcModel model;
  model.hyper = hyper;
  model.seed = seed;
  model.feature_mean = x.colwise().mean().transpose();
  model.feature_scale.resize(d);
  for (Index j = 0; j < d; ++j) {
    const double sd = std::sqrt((x.col(j).array() - model.feature_mean(j)).square().mean());
    model.feature_scale(j) = sd > 0.0 ? sd : 1.0;
  }

  CfcBatch batch{standardize(x, model.feature_mean, model.feature_scale),
                 std::vector<int>(groups.begin(), groups.end()),
                 neighborhood_weights(s, hyper.hops, hyper.gamma_mode).gamma,
                 std::vector<int>(reference.begin(), reference.end())};

  Rng init(derive_seed(seed, 0xc1));
  auto& prm = model.params;
  const double s1 = std::sqrt(2.0 / static_cast<double>(d + hyper.hidden));
  const double s2 = std::sqrt(2.0 / static_cast<double>(hyper.hidden + hyper.embedding));
  prm.w1 = Matrix::NullaryExpr(hyper.hidden, d, [&] { return init.normal(0.0, s1); });
  prm.b1 = Vector::Zero(hyper.hidden);
  prm.w2 = Matrix::NullaryExpr(hyper.embedding, hyper.hidden, [&] { return init.normal(0.0, s2); });
  prm.b2 = Vector::Zero(hyper.embedding);

  {
    const Matrix z0 = encode(prm, batch.x, nullptr, 0.0).z;
    ClustererConfig cfg;
    cfg.k = hyper.k;
    cfg.seed = derive_seed(seed, 0xc2);
    prm.centers = kmeans(z0, cfg).centers;
    // Separate coincident centers.
    for (Index a = 0; a < prm.centers.rows(); ++a)
      for (Index b = 0; b < a; ++b)
        if ((prm.centers.row(a) - prm.centers.row(b)).squaredNorm() == 0.0)
          for (Index j = 0; j < prm.centers.cols(); ++j) prm.centers(a, j) += init.normal(0.0, 1e-3);
  }

  CfcTrainResult result;
  result.history.reserve(static_cast<std::size_t>(hyper.epochs));
  Rng drop(derive_seed(seed, 0xc3));
  Matrix mask;
  CfcParams grad;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    const Matrix* mask_ptr = nullptr;
    if (hyper.dropout > 0.0) {
      mask = Matrix::NullaryExpr(n, hyper.hidden, [&] { return drop.bernoulli(1.0 - hyper.dropout) ? 1.0 : 0.0; });
      mask_ptr = &mask;
    }
    const auto loss = cfc_loss(prm, hyper, batch, &grad, mask_ptr);
    if (!std::isfinite(loss.total) || !all_finite(grad)) throw NonFiniteLoss(epoch, breakdown(loss));
    result.history.push_back(loss);
    const double norm = std::sqrt(squared_norm(grad));
    const double scale = norm > hyper.grad_clip ? hyper.grad_clip / norm : 1.0;
    add_scaled(prm, -hyper.learning_rate * scale, grad);
  }

  const Matrix z = encode(prm, batch.x, nullptr, 0.0).z;
  const Matrix p = soft_assignments(z, prm.centers);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index k = 1; k < p.cols(); ++k)
      if (p(i, k) > p(i, best)) best = k;
    labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  result.clustering = Clustering(std::move(labels), hyper.k);
  result.model = std::move(model);
  return result;
}

Clustering reference_clustering(const Matrix& x, std::span<const int> groups, int k, int p, int q, Seed seed) {
  ClustererConfig cfg;
  cfg.k = k;
  cfg.seed = seed;
  const bool two_groups = std::all_of(groups.begin(), groups.end(), [](int g) { return g == 0 || g == 1; });
  if (two_groups) return fair_cluster(x, groups, cfg, p, q);
  return kmeans(x, cfg).clustering;
}

CfcPipelineResult run_cfc(const Matrix& x, std::span<const int> groups, const CfcPipelineConfig& config, Seed seed) {
  CfcPipelineResult out;
  out.partitions = generate_basic_partitions(x, config.sampling, derive_seed(seed, 1));
  out.co_association = co_association(out.partitions);
  out.reference = reference_clustering(x, groups, config.hyper.k, config.fairlet_p, config.fairlet_q, derive_seed(seed, 2));
  out.trained = train_cfc(x, groups, out.co_association, out.reference.labels(), config.hyper, derive_seed(seed, 3));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::string gamma_mode_name(GammaMode m) { return m == GammaMode::kMatrixPower ? "matrix_power" : "elementwise"; }

GammaMode gamma_mode_from(const std::string& s) {
  if (s == "matrix_power") return GammaMode::kMatrixPower;
  if (s == "elementwise") return GammaMode::kElementwise;
  throw ParseError(0, "gamma_mode", "unknown gamma mode '" + s + "'");
}

}  // namespace

std::string model_to_bytes(const CfcModel& model) {
  const auto& h = model.hyper;
  nlohmann::ordered_json header;
  header["hyper"] = {{"hops", h.hops},       {"alpha", h.alpha},
                     {"beta", h.beta},       {"tau", h.tau},
                     {"epochs", h.epochs},   {"learning_rate", h.learning_rate},
                     {"grad_clip", h.grad_clip}, {"dropout", h.dropout},
                     {"hidden", h.hidden},   {"embedding", h.embedding},
                     {"k", h.k},             {"gamma_mode", gamma_mode_name(h.gamma_mode)}};
  header["input_dim"] = model.params.w1.cols();
  header["seed"] = model.seed;
  const std::string json = header.dump();

  std::string out = "RFCM";
  put_u64(out, json.size());
  out += json;
  auto push = [&out](const auto& m) {
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) put_f64(out, m(i, j));
  };
  push(model.params.w1);
  push(model.params.b1);
  push(model.params.w2);
  push(model.params.b2);
  push(model.params.centers);
  push(model.feature_mean);
  push(model.feature_scale);
  return out;
}

CfcModel model_from_bytes(const std::string& bytes) {
  ByteReader in(bytes, "model checkpoint");
  if (in.take(4) != "RFCM") throw ParseError(0, "", "model checkpoint: bad magic");
  const auto len = static_cast<std::size_t>(in.u(8));
  CfcModel model;
  Index d = 0;
  try {
    const auto header = nlohmann::json::parse(in.take(len));
    const auto& h = header.at("hyper");
    auto& hy = model.hyper;
    hy.hops = h.at("hops");
    hy.alpha = h.at("alpha");
    hy.beta = h.at("beta");
    hy.tau = h.at("tau");
    hy.epochs = h.at("epochs");
    hy.learning_rate = h.at("learning_rate");
    hy.grad_clip = h.at("grad_clip");
    hy.dropout = h.at("dropout");
    hy.hidden = h.at("hidden");
    hy.embedding = h.at("embedding");
    hy.k = h.at("k");
    hy.gamma_mode = gamma_mode_from(h.at("gamma_mode").get<std::string>());
    d = header.at("input_dim").get<Index>();
    model.seed = header.at("seed").get<Seed>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, "", std::string("model checkpoint header: ") + e.what());
  }
  const auto& hy = model.hyper;
  auto& p = model.params;
  p.w1.resize(hy.hidden, d);
  p.b1.resize(hy.hidden);
  p.w2.resize(hy.embedding, hy.hidden);
  p.b2.resize(hy.embedding);
  p.centers.resize(hy.k, hy.embedding);
  model.feature_mean.resize(d);
  model.feature_scale.resize(d);
  auto pull = [&in](auto& m) {
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) m(i, j) = in.f64();
  };
  pull(p.w1);
  pull(p.b1);
  pull(p.w2);
  pull(p.b2);
  pull(p.centers);
  pull(model.feature_mean);
  pull(model.feature_scale);
  if (!in.done()) throw ParseError(0, "", "model checkpoint: trailing bytes");
  return model;
}

void save_model(const CfcModel& model, const std::filesystem::path& path) { write_file(path, model_to_bytes(model)); }

CfcModel load_model(const std::filesystem::path& path) { return model_from_bytes(read_file(path)); }

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckResult grad_check(const std::function<double(std::span<const double>)>& loss,
                           const std::function<std::vector<double>(std::span<const double>)>& gradient,
                           std::span<const double> params, std::span<const std::size_t> coords, double tolerance,
                           double step, double floor) {
  const auto analytic = gradient(params);
  if (analytic.size() != params.size()) throw InvalidArgument("gradient length differs from parameter length");
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(params.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = all;
  }
  std::vector<double> probe(params.begin(), params.end());
  GradCheckResult out;
  for (auto c : coords) {
    if (c >= params.size()) throw InvalidArgument("grad_check coordinate out of range");
    probe[c] = params[c] + step;
    const double up = loss(probe);
    probe[c] = params[c] - step;
    const double down = loss(probe);
    probe[c] = params[c];
    const double fd = (up - down) / (2.0 * step);
    const double a = analytic[c];
    const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
    out.max_relative_error = std::max(out.max_relative_error, rel);
    ++out.checked;
  }
  out.passed = out.max_relative_error < tolerance;
  return out;
}

GradCheckResult grad_check(const CfcModel& model, const CfcBatch& batch, double tolerance, std::size_t coords,
                           Seed seed) {
  const auto flat = model.params.flatten();
  CfcParams scratch = model.params;
  auto loss = [&](std::span<const double> v) {
    scratch.unflatten(v);
    return cfc_loss(scratch, model.hyper, batch).total;
  };
  auto gradient = [&](std::span<const double> v) {
    scratch.unflatten(v);
    CfcParams g;
    cfc_loss(scratch, model.hyper, batch, &g);
    return g.flatten();
  };
  std::vector<std::size_t> picked;
  if (coords > 0 && coords < flat.size()) {
    Rng rng(derive_seed(seed, 0x9c));
    picked = rng.sample_indices(flat.size(), coords);
  }
  return grad_check(loss, gradient, flat, picked, tolerance);
}

}  // namespace rfc

#ifndef BAYESQ_POSTERIOR_HPP
#define BAYESQ_POSTERIOR_HPP

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <variant>
#include <vector>

#include "bayesq/model_store.hpp"

namespace bayesq {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class CurvatureKind { Hessian, Fisher };

/// Matrix-free access to a block's curvature: v -> H v. The full matrix is
/// never materialized by the fitting routines.
struct CurvatureOracle {
  std::function<Vector(const Vector&)> apply;
  Eigen::Index dim = 0;
  CurvatureKind kind = CurvatureKind::Fisher;

  Vector operator()(const Vector& v) const;
};

/// Oracle backed by an explicit symmetric matrix.
CurvatureOracle explicit_oracle(Matrix h, CurvatureKind kind = CurvatureKind::Hessian);
/// Oracle H = diag(h).
CurvatureOracle diagonal_oracle(Vector h, CurvatureKind kind = CurvatureKind::Hessian);
/// Principal sub-block H[offset:offset+length, offset:offset+length] of a larger oracle.
CurvatureOracle restrict_oracle(CurvatureOracle parent, Eigen::Index offset, Eigen::Index length);

/// One calibration mini-batch for K-FAC: rows are samples.
struct KfacBatch {
  Matrix inputs;     // B x i_b layer inputs
  Matrix gradients;  // B x o_b output gradients
};

struct DiagonalCov {
  Vector variances;
};

/// Sigma = A~^-1 (x) G~^-1 for a row-major (o_b x i_b) weight matrix. The
/// lower Cholesky factors of the damped factors are kept; the inverse square
/// roots are L^-T.
struct KroneckerCov {
  Eigen::Index rows = 0;  // o_b
  Eigen::Index cols = 0;  // i_b
  Matrix a_chol;          // L_A, A~ = L_A L_A^T (i_b x i_b)
  Matrix g_chol;          // L_G, G~ = L_G L_G^T (o_b x o_b)

  Matrix a_inv_sqrt() const;  // L_A^-T
  Matrix g_inv_sqrt() const;  // L_G^-T
};

/// Sigma = diag(v) + sign U U^T, sign = +1 or -1. The fitted form is the
/// Woodbury inverse of a damped diagonal plus top-r curvature, which has sign -1.
struct LowRankDiagCov {
  Matrix u;
  Vector v;
  double sign = 1.0;
};

/// Explicit covariance (small blocks, tests, PCA estimates).
struct DenseCov {
  Matrix sigma;
};

using Covariance = std::variant<DiagonalCov, KroneckerCov, LowRankDiagCov, DenseCov>;

struct BlockPosterior {
  Vector mu;
  Covariance cov;
  double damping = 0.0;
  int probes = 0;
  std::uint64_t seed = 0;

  Eigen::Index dim() const { return mu.size(); }
  /// tr(Sigma).
  double trace() const;
  /// diag(Sigma).
  Vector marginal_variances() const;
  /// tr(Sigma^-1) / d, the saliency used by the allocator tie-breaker.
  double saliency() const;
  /// Dense Sigma in the block's flat (row-major) ordering. Guarded to d <= 4096.
  Matrix dense_covariance() const;
  void validate() const;
};

inline constexpr Eigen::Index kDenseCovarianceLimit = 4096;
inline constexpr double kVarianceFloor = 1e-9;
inline constexpr double kCurvatureClamp = 1e-8;

/// diag(H) ~= (1/M) sum v .* (H v) with Rademacher probes.
Vector hutchinson_diag(const CurvatureOracle& oracle, Eigen::Index d, int probes, std::uint64_t seed);

enum class DampingRule { Fixed, MedianHeuristic };

struct DiagLaplaceOptions {
  int probes = 16;
  double damping = 1e-3;
  std::uint64_t seed = 0;
  DampingRule rule = DampingRule::Fixed;
  /// Small calibration sets: damping x5 (the caller also enables PCA fallback).
  bool small_calib = false;
};

/// Effective damping after the median heuristic and small-calibration rule.
double effective_damping(const Vector& hdiag, const DiagLaplaceOptions& opt);

BlockPosterior fit_diag_laplace(const WeightBlock& block, const CurvatureOracle& oracle,
                                const DiagLaplaceOptions& opt);

struct KfacOptions {
  double beta = 0.05;  // weight of the newest batch
  double damping = 1e-3;
};

BlockPosterior fit_kfac(const WeightBlock& block, const std::vector<KfacBatch>& batches,
                        const KfacOptions& opt);

struct LowRankOptions {
  Eigen::Index rank = 32;
  int power_iterations = 2;
  Eigen::Index oversampling = 8;
  DiagLaplaceOptions diag;
};

BlockPosterior fit_lowrank_diag(const WeightBlock& block, const CurvatureOracle& oracle,
                                const LowRankOptions& opt);

/// S with S S^T = Sigma, applied without forming S where the covariance has
/// structure.
class Whitener {
 public:
  enum class Kind { Cholesky, Eigen, PcaFallback, Diagonal };

  Kind kind() const { return kind_; }
  Eigen::Index dim() const { return mean_.size(); }
  const Vector& mean() const { return mean_; }
  double spectrum_clip() const { return clip_; }

  /// z = S^-1 (w - mu)
  Vector forward(const Vector& w) const;
  /// w = mu + S z
  Vector inverse(const Vector& z) const;
  /// S z (no mean shift).
  Vector apply_sqrt(const Vector& z) const;
  /// Dense S, for verification on small blocks.
  Matrix sqrt_matrix() const;
  /// Per-coordinate scales when the whitener is diagonal.
  const Vector* diagonal_scales() const;

  /// Draws w = mu + S n with n standard normal.
  Vector sample(std::mt19937_64& rng) const;

  static Whitener diagonal(Vector mean, Vector sigma);
  static Whitener kronecker(Vector mean, const KroneckerCov& cov);
  static Whitener dense(Vector mean, const Matrix& sigma, double clip, Kind kind = Kind::Eigen);
  static Whitener lowrank(Vector mean, const LowRankDiagCov& cov, double clip);

 private:
  struct DiagonalRep {
    Vector sigma;
  };
  struct KroneckerRep {
    Eigen::Index rows, cols;
    Matrix la, lg;  // Cholesky factors of the damped (precision) factors
  };
  struct DenseRep {
    Matrix s, s_inv;
  };
  // Sigma = D^1/2 (I + Q diag(e) Q^T) D^1/2, Q orthonormal (d x k), e > -1.
  struct LowRankRep {
    Vector sqrt_v;
    Matrix q;
    Vector fwd_coef;  // 1/sqrt(1+e) - 1
    Vector inv_coef;  // sqrt(1+e) - 1
  };

  Kind kind_ = Kind::Diagonal;
  Vector mean_;
  double clip_ = 1e-8;
  std::variant<DiagonalRep, KroneckerRep, DenseRep, LowRankRep> rep_;
};

inline constexpr double kSpectrumClip = 1e-8;

/// Whitener from sample covariance (rows are samples); mean taken from `mean`.
Whitener pca_whitener(const Vector& mean, const Matrix& samples, double clip = kSpectrumClip);

/// Picks the route for the covariance form; falls back to PCA on failure when
/// samples are supplied.
Whitener build_whitener(const BlockPosterior& post, const std::optional<Matrix>& fallback_samples = std::nullopt);

}  // namespace bayesq

#endif  // BAYESQ_POSTERIOR_HPP

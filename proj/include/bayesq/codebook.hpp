#ifndef BAYESQ_CODEBOOK_HPP
#define BAYESQ_CODEBOOK_HPP

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "bayesq/gauss.hpp"
#include "bayesq/model_store.hpp"
#include "bayesq/posterior.hpp"

namespace bayesq {

enum class Designer { Uniform, LloydScalar, LloydVector, None };

std::string to_string(Designer d);
Designer designer_from_string(const std::string& s);

/// Signed mid-rise quantizer on [-alpha, alpha] with K = 2^m cells.
struct UniformCodebook {
  int bits = 1;
  double alpha = 1.0;
  double delta = 1.0;  // 2 alpha / 2^m

  static UniformCodebook make(int bits, double alpha);

  std::int64_t levels() const { return std::int64_t{1} << bits; }
  /// Real offset of the grid: codepoint(k) = delta * (k - center()).
  double center() const { return 0.5 * static_cast<double>(levels() - 1); }
  double codepoint(std::int64_t k) const { return delta * (static_cast<double>(k) - center()); }
  /// Integer zero-point round(alpha/delta - 1/2).
  std::int64_t zero_point() const;
  /// Index of the cell containing z; values on a boundary go to the lower cell.
  std::int64_t index(double z) const;
};

/// Codepoints (K x g) with, for g = 1, the sorted midpoint boundaries.
struct LloydCodebook {
  Eigen::MatrixXd codepoints;
  Eigen::VectorXd boundaries;
  std::vector<double> objective;
  int iterations = 0;
  bool converged = false;

  std::int64_t levels() const { return codepoints.rows(); }
  Eigen::Index group() const { return codepoints.cols(); }
  /// Scalar assignment; values on a boundary go to the lower index.
  std::int64_t index(double z) const;
  /// Nearest codepoint over the first x.size() coordinates, lowest index on ties.
  std::int64_t nearest(const Eigen::Ref<const Eigen::VectorXd>& x) const;
};

using Codebook = std::variant<UniformCodebook, LloydCodebook>;

/// Bits carried by a codebook (log2 K per scalar coordinate).
int codebook_bits(const Codebook& cb);

/// The defining integral: K in-range cells plus the clipping tail measured
/// against the range edge.
double expected_mse_uniform(int m, double alpha);
/// Same integral for an arbitrary level count K.
double expected_mse_levels(std::int64_t levels, double alpha);
/// Exact MSE of the realizable K-level quantizer: out-of-range mass goes to
/// the outermost codepoints.
double saturating_mse_uniform(int m, double alpha);
double saturating_mse_levels(std::int64_t levels, double alpha);
/// Delta^2/12 (Phi(alpha) - Phi(-alpha)) + tail.
double high_resolution_mse(int m, double alpha);

enum class RangeObjective { ClipToRange, Saturating };

struct RangeResult {
  double alpha = 0;
  double loss = 0;
  int evaluations = 0;
};

RangeResult optimize_range(int m, gauss::Interval search = {1.5, 4.5},
                           RangeObjective objective = RangeObjective::ClipToRange);

enum class LloydInit { UniformCodepoints, KMeansPP };

struct LloydOptions {
  LloydInit init = LloydInit::UniformCodepoints;
  std::uint64_t seed = 0;
  double tol = 1e-4;
  int max_iter = 15;
};

/// Analytic scalar Lloyd-Max under N(0, 1).
LloydCodebook lloyd_scalar(std::int64_t levels, const LloydOptions& opt = {});
/// Analytic objective of a sorted scalar codebook.
double scalar_codebook_mse(const Eigen::VectorXd& codepoints);

/// Sample-based k-means with k-means++ seeding on whitened samples (rows).
LloydCodebook lloyd_vector(Eigen::Index group, std::int64_t levels, const Eigen::MatrixXd& samples,
                           const LloydOptions& opt = {LloydInit::KMeansPP, 0, 1e-4, 15});

/// Seeded standard-normal pool (rows are g-dimensional samples).
Eigen::MatrixXd standard_normal_pool(Eigen::Index rows, Eigen::Index group, std::uint64_t seed);

struct QuantizedBlock {
  std::vector<std::int64_t> indices;
  Eigen::VectorXd reconstruction;
  double kurtosis = 0;
  bool outlier = false;  // kurtosis > 8
};

inline constexpr double kOutlierKurtosis = 8.0;

QuantizedBlock quantize_block(const WeightBlock& block, const Whitener& whitener, const Codebook& cb);
QuantizedBlock quantize_vector(const Eigen::VectorXd& w, const Whitener& whitener, const Codebook& cb);

/// Excess-free (Pearson) kurtosis of the values.
double kurtosis(const Eigen::VectorXd& w);

/// One exported scale group. Dequantization is scale * (q - zero_point), or
/// scale * lut[q * width + t] when a LUT is present.
struct CompiledAffine {
  double scale = 1.0;
  double zero_point = 0.0;
  std::int64_t qmin = 0;
  std::int64_t qmax = 0;
  std::vector<double> lut;
  Eigen::Index lut_width = 1;

  bool has_lut() const { return !lut.empty(); }
  std::int64_t integer_zero_point() const;
  double dequantize(std::int64_t q, Eigen::Index t = 0) const;
};

enum class ExportMode { Lut, LeastSquares };

/// One CompiledAffine per group of `group_size` consecutive coordinates
/// (vector codebooks: a single block-level entry).
std::vector<CompiledAffine> compile_to_affine(const Codebook& cb, const std::vector<std::int64_t>& indices,
                                              const Eigen::VectorXd& weights, const Whitener& whitener,
                                              std::int64_t group_size, ExportMode mode = ExportMode::Lut);

/// Least-squares (s, z) for w ~ s (q - z); false for a degenerate group.
bool fit_affine(const std::vector<std::int64_t>& q, const Eigen::VectorXd& w, double& scale, double& zero_point);

/// Dequantizes a whole block from its compiled groups.
Eigen::VectorXd dequantize(const std::vector<CompiledAffine>& groups, const std::vector<std::int64_t>& indices,
                           Eigen::Index size, std::int64_t group_size, Eigen::Index vq_group = 1);

}  // namespace bayesq

#endif  // BAYESQ_CODEBOOK_HPP

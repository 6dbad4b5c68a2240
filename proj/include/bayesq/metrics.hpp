#ifndef BAYESQ_METRICS_HPP
#define BAYESQ_METRICS_HPP

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace bayesq {

/// Per-example class probabilities (rows), predicted and true labels.
struct PredictionSet {
  Eigen::MatrixXd probs;
  std::vector<int> predicted;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  /// max_c p(c | x_i)
  double confidence(std::size_t i) const;
  void validate() const;

  /// Predicted label = argmax (lowest index on ties).
  static PredictionSet from_probs(Eigen::MatrixXd probs, std::vector<int> labels);
};

PredictionSet read_predictions(const std::filesystem::path& path);
void write_predictions(const PredictionSet& p, const std::filesystem::path& path);

double top1_accuracy(const PredictionSet& p);

struct BinningConfig {
  int bins = 15;
  int jitter_seeds = 3;  // 0: fixed equal-width edges
  std::uint64_t seed = 0;
};

struct Calibration {
  double ece = 0;
  double mce = 0;
};

Calibration ece_mce(const PredictionSet& p, const BinningConfig& cfg = {});

struct ReliabilityBin {
  double lo = 0;
  double hi = 0;
  std::int64_t count = 0;
  double confidence = 0;
  double accuracy = 0;
};

/// Equal-width reliability table without jitter.
std::vector<ReliabilityBin> reliability_bins(const PredictionSet& p, int bins = 15);

struct TailMetrics {
  double worst_k_accuracy = 0;
  double cvar = 0;
  std::int64_t worst_k_count = 0;
  std::int64_t cvar_count = 0;
};

/// Tails ordered by confidence ascending, ties by example index.
TailMetrics worst_k_and_cvar(const PredictionSet& p, double k_percent, double alpha);

struct SignalMetrics {
  double mse = 0;
  double snr_db = 0;   // +inf when the error is zero
  double psnr_db = 0;  // +inf when the error is zero
};

SignalMetrics snr_psnr(const Eigen::VectorXd& original, const Eigen::VectorXd& reconstructed, double peak);

struct CodebookStats {
  double utilization = 0;
  double entropy = 0;  // nats
};

CodebookStats codebook_stats(const std::vector<std::int64_t>& indices, std::int64_t levels);

struct Uncertainty {
  double predictive_entropy = 0;
  double mutual_information = 0;
};

/// Rows of `samples` are sampled probability vectors for one input.
Uncertainty uncertainty_diagnostics(const Eigen::MatrixXd& samples);
/// Averages over inputs.
Uncertainty uncertainty_diagnostics(const std::vector<Eigen::MatrixXd>& per_input);

struct ClippingRate {
  double rate = 0;
  double se = 0;
};

ClippingRate clipping_rate(const Eigen::VectorXd& z, double alpha);

struct SeedInterval {
  double mean = 0;
  double sd = 0;
  double t = 0;
  double lo = 0;
  double hi = 0;
};

/// 0.975 quantile of Student t.
double t_quantile_975(int df);
SeedInterval seed_ci(const std::vector<double>& values);

double glue_macro(const std::vector<double>& task_scores);
double glue_micro(const std::vector<double>& task_scores, const std::vector<std::int64_t>& task_sizes);

}  // namespace bayesq

#endif  // BAYESQ_METRICS_HPP

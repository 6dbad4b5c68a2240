#ifndef BAYESQ_LOSSTABLE_HPP
#define BAYESQ_LOSSTABLE_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bayesq/codebook.hpp"
#include "bayesq/packer.hpp"
#include "bayesq/posterior.hpp"
#include "bayesq/proxy_distill.hpp"

namespace bayesq {

/// Posterior-expected MSE of a scalar codebook: per-coordinate distortion
/// under N(0, 1) times tr(Sigma).
double closed_form_mse(const BlockPosterior& post, const Codebook& cb);
/// sum_i Delta_i^2 Sigma_ii / 12 for per-dimension steps.
double per_dimension_mse(const BlockPosterior& post, const Vector& deltas);

/// Maps a weight vector to its quantized reconstruction.
using BlockQuantizer = std::function<Vector(const Vector&)>;

enum class ProxyKind { WeightMse, LayerOutput, LogitKl };
enum class KlTeacher { PosteriorPredictive, MeanWeight };

std::string to_string(ProxyKind p);
ProxyKind proxy_from_string(const std::string& s);

struct ProxyConfig {
  ProxyKind kind = ProxyKind::WeightMse;
  // layer-output: cached activations (N x i) for a block shaped (o x i)
  Matrix activations;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  // logit-kl
  const ToyNet* net = nullptr;
  int layer = -1;
  Matrix inputs;
  double tau = 1.0;
  KlTeacher teacher = KlTeacher::PosteriorPredictive;
};

struct McEstimate {
  double loss = 0;
  double se = 0;
};

/// Mean and standard error of the proxy over posterior samples. The sample
/// stream depends only on `seed`, so candidates share random numbers.
McEstimate mc_proxy(const BlockPosterior& post, const BlockQuantizer& quantize, const ProxyConfig& proxy, int samples,
                    std::uint64_t seed);
McEstimate mc_proxy(const BlockPosterior& post, const Codebook& cb, const ProxyConfig& proxy, int samples,
                    std::uint64_t seed);

struct LossRow {
  int bits = 0;
  double loss = 0;
  double se = 0;
  double raw_loss = 0;  // before the isotonic clamp
  Designer designer = Designer::Uniform;
};

struct LossTable {
  std::vector<int> bit_set;
  std::vector<std::string> block_ids;
  std::map<std::string, std::vector<LossRow>> rows;
  int violations = 0;

  const LossRow& at(const std::string& id, int m) const;
  std::vector<double> losses(const std::string& id) const;
};

/// Nonincreasing least-squares fit (pool adjacent violators). Returns the
/// number of adjacent increases in the input.
int isotonic_nonincreasing(std::vector<double>& values);
/// Applies the clamp to one block's rows and returns the violation count.
int clamp_rows(std::vector<LossRow>& rows);

struct DesignerPolicy {
  Designer scalar = Designer::Uniform;                 // dense-matrix / conv-filter / generic-vector
  std::map<BlockKind, Designer> per_kind;              // overrides
  std::map<std::string, Designer> per_block;           // overrides
  Eigen::Index vq_group = 2;
  Eigen::Index vq_pool = 16384;
  LloydOptions lloyd;
  std::uint64_t seed = 0;

  Designer designer_for(const WeightBlock& block) const;
};

/// Whether a vector codebook at bit-width m fits the design pool. Infeasible
/// widths are left out of that block's table rows.
bool vq_feasible(int m, const DesignerPolicy& policy);

/// Designs the whitened-space codebook for a designer and bit-width. Results
/// are block independent, so callers may cache them.
Codebook design_codebook(Designer designer, int m, const DesignerPolicy& policy);

class CodebookCache {
 public:
  explicit CodebookCache(DesignerPolicy policy) : policy_(std::move(policy)) {}
  const Codebook& get(Designer designer, int m);
  /// Seeds the cache with a previously designed codebook.
  void put(Designer designer, int m, Codebook cb) { cache_.insert_or_assign({designer, m}, std::move(cb)); }
  const DesignerPolicy& policy() const { return policy_; }
  const std::map<std::pair<Designer, int>, Codebook>& entries() const { return cache_; }

 private:
  DesignerPolicy policy_;
  std::map<std::pair<Designer, int>, Codebook> cache_;
};

struct TableOptions {
  int mc_samples = 16;
  std::uint64_t seed = 0;
  /// Proxy per block id; blocks without an entry use weight-mse.
  std::map<std::string, ProxyConfig> proxies;
};

LossTable build_table(const std::vector<WeightBlock>& blocks, const std::vector<BlockPosterior>& posteriors,
                      const std::vector<int>& bit_set, CodebookCache& codebooks, const TableOptions& opt = {});

struct MarginalGain {
  int from = 0;
  int to = 0;
  double delta = 0;
  std::int64_t cost_increment = 0;
  double gamma = 0;
  bool noisy = false;  // standard errors overlap a zero gain
};

using CostFunction = std::function<std::int64_t(const std::string& id, int m)>;

std::map<std::string, std::vector<MarginalGain>> marginal_gains(const LossTable& table, const CostFunction& cost);

/// Tab-separated: block, m, loss, se, designer.
void write_table(const LossTable& table, const std::filesystem::path& path);
LossTable read_table(const std::filesystem::path& path);

}  // namespace bayesq

#endif  // BAYESQ_LOSSTABLE_HPP

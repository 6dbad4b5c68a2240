#ifndef BAYESQ_PROXY_DISTILL_HPP
#define BAYESQ_PROXY_DISTILL_HPP

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bayesq/codebook.hpp"
#include "bayesq/model_store.hpp"
#include "bayesq/posterior.hpp"

namespace bayesq {

enum class Activation { Identity, Relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct DenseLayer {
  Matrix w;  // out x in
  Vector b;  // out (may be zero)
  Activation act = Activation::Identity;
  std::string weight_id;
  std::string bias_id;
};

/// Dense feed-forward net; the last layer emits logits.
struct ToyNet {
  std::vector<DenseLayer> layers;

  Eigen::Index input_dim() const { return layers.front().w.cols(); }
  Eigen::Index classes() const { return layers.back().w.rows(); }
  void validate() const;
  /// Index of the layer whose weight block has this id, or -1.
  int layer_of(const std::string& weight_id) const;
};

/// Random MLP with the given layer widths (dims.front() inputs, dims.back() classes).
ToyNet make_toy_mlp(const std::vector<Eigen::Index>& dims, std::uint64_t seed, double weight_scale = 1.0);
ToyNet net_from_model(const Model& model);
Model model_from_net(const ToyNet& net, std::int64_t group_size = 64);

Vector forward(const ToyNet& net, const Vector& x);
/// Rows of `x` are inputs; returns N x C logits.
Matrix forward_batch(const ToyNet& net, const Matrix& x);

Vector softmax(const Vector& logits, double tau = 1.0);
/// KL(p || q) with 0 log 0 = 0.
double kl_divergence(const Vector& p, const Vector& q);
double entropy(const Vector& p);

/// Gauss-Newton curvature of the softmax output w.r.t. one layer's weights
/// (row-major flattening), averaged over the inputs.
CurvatureOracle ggn_oracle(const ToyNet& net, int layer, const Matrix& inputs);
/// Explicit GGN matrix (small layers only).
Matrix ggn_matrix(const ToyNet& net, int layer, const Matrix& inputs);

/// Per-example layer inputs and Fisher output gradients (labels sampled
/// from the model's own softmax), split into mini-batches.
std::vector<KfacBatch> kfac_batches(const ToyNet& net, int layer, const Matrix& inputs, Eigen::Index batch_size,
                                    std::uint64_t seed);

/// Layer activations entering `layer` for every input (N x in).
Matrix layer_inputs(const ToyNet& net, int layer, const Matrix& inputs);

struct TeacherDistribution {
  Matrix probs;  // N x C, rows sum to 1
  double tau = 2.0;
  int samples = 8;
};

/// Posterior samples per layer; layers without an entry stay at their weights.
using LayerPosteriors = std::map<int, BlockPosterior>;

TeacherDistribution teacher(const ToyNet& net, const LayerPosteriors& posteriors, const Matrix& inputs, int samples,
                            double tau, std::uint64_t seed);

/// Frozen indices with per-group scales for one layer; w = scale_g * base_i.
struct QuantizedLayer {
  int layer = 0;
  std::vector<std::int64_t> indices;
  std::vector<CompiledAffine> groups;
  std::int64_t group_size = 64;
  Eigen::Index vq_group = 1;

  /// base_i with w_i = scale(group(i)) * base_i.
  Vector base() const;
  std::vector<Eigen::Index> group_of() const;
  std::vector<double> scales() const;
};

/// Copies the net with every quantized layer's weights rebuilt from `scales`.
ToyNet apply_scales(const ToyNet& net, const std::vector<QuantizedLayer>& qlayers,
                    const std::vector<std::vector<double>>& scales);

/// Mean over inputs of KL(p_T || softmax(f(x; w(scales)) / tau)).
double distill_objective(const ToyNet& net, const std::vector<QuantizedLayer>& qlayers,
                         const std::vector<std::vector<double>>& scales, const TeacherDistribution& teacher,
                         const Matrix& inputs);
std::vector<std::vector<double>> distill_gradient(const ToyNet& net, const std::vector<QuantizedLayer>& qlayers,
                                                  const std::vector<std::vector<double>>& scales,
                                                  const TeacherDistribution& teacher, const Matrix& inputs);

struct DistillOptions {
  int steps = 500;
  double learning_rate = 0.05;
  int patience = 5;      // consecutive KL increases before halving the step
  int max_halvings = 3;  // abort beyond this
};

struct DistillResult {
  std::vector<std::vector<double>> scales;
  std::vector<double> kl_trace;  // KL after every step, starting with the initial value
  double final_kl = 0;           // KL at the returned (best) scales
  int halvings = 0;
  bool aborted = false;
  double final_step = 0;
};

DistillResult distill_scales(const ToyNet& net, const std::vector<QuantizedLayer>& qlayers,
                             const TeacherDistribution& teacher, const Matrix& inputs, const DistillOptions& opt);

}  // namespace bayesq

#endif  // BAYESQ_PROXY_DISTILL_HPP

#include "bayesq/proxy_distill.hpp"

#include <cmath>
#include <random>

#include "bayesq/error.hpp"

namespace bayesq {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Trace {
  std::vector<Vector> a;    // a[k] enters layer k; a.back() is the output
  std::vector<Vector> pre;  // pre-activations per layer
};

Vector activate(const Vector& v, Activation act) {
  return act == Activation::Relu ? Vector(v.cwiseMax(0.0)) : v;
}

Vector act_grad(const Vector& pre, Activation act) {
  if (act == Activation::Identity) return Vector::Ones(pre.size());
  return (pre.array() > 0).cast<double>().matrix();
}

Trace run(const ToyNet& net, const Vector& x) {
  Trace t;
  t.a.push_back(x);
  for (const auto& l : net.layers) {
    t.pre.push_back(l.w * t.a.back() + l.b);
    t.a.push_back(activate(t.pre.back(), l.act));
  }
  return t;
}

/// Backpropagates d(loss)/d(output) and returns d(loss)/d(pre_k) for every layer.
std::vector<Vector> backprop(const ToyNet& net, const Trace& t, const Vector& dout, int stop = 0) {
  const int n = static_cast<int>(net.layers.size());
  std::vector<Vector> dpre(static_cast<std::size_t>(n));
  Vector delta = dout;
  for (int k = n - 1; k >= stop; --k) {
    const auto& l = net.layers[static_cast<std::size_t>(k)];
    dpre[static_cast<std::size_t>(k)] = act_grad(t.pre[static_cast<std::size_t>(k)], l.act).cwiseProduct(delta);
    if (k > stop) delta = l.w.transpose() * dpre[static_cast<std::size_t>(k)];
  }
  return dpre;
}

Vector flatten_rowmajor(const Matrix& m) {
  const RowMat r = m;
  return Eigen::Map<const Vector>(r.data(), r.size());
}

Matrix unflatten_rowmajor(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const RowMat>(v.data(), rows, cols);
}

void check_layer(const ToyNet& net, int layer) {
  if (layer < 0 || layer >= static_cast<int>(net.layers.size()))
    throw InvalidArgument("toy net: layer index " + std::to_string(layer) + " out of range");
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::Relu ? "relu" : "identity"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  throw InvalidArgument("unknown activation '" + s + "'");
}

void ToyNet::validate() const {
  if (layers.empty()) throw InvalidArgument("toy net: no layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    if (l.b.size() != l.w.rows()) throw InvalidArgument("toy net: bias length mismatch in layer " + std::to_string(k));
    if (k > 0 && l.w.cols() != layers[k - 1].w.rows())
      throw InvalidArgument("toy net: incompatible dimensions at layer " + std::to_string(k));
    if (!l.w.allFinite() || !l.b.allFinite()) throw InvalidArgument("toy net: non-finite parameters");
  }
}

int ToyNet::layer_of(const std::string& weight_id) const {
  for (std::size_t k = 0; k < layers.size(); ++k)
    if (layers[k].weight_id == weight_id) return static_cast<int>(k);
  return -1;
}

ToyNet make_toy_mlp(const std::vector<Eigen::Index>& dims, std::uint64_t seed, double weight_scale) {
  if (dims.size() < 2) throw InvalidArgument("make_toy_mlp: need at least input and output widths");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  ToyNet net;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    DenseLayer l;
    const double s = weight_scale / std::sqrt(static_cast<double>(dims[k]));
    l.w.resize(dims[k + 1], dims[k]);
    for (Eigen::Index i = 0; i < l.w.rows(); ++i)
      for (Eigen::Index j = 0; j < l.w.cols(); ++j) l.w(i, j) = static_cast<float>(s * nd(rng));
    l.b.resize(dims[k + 1]);
    for (Eigen::Index i = 0; i < l.b.size(); ++i) l.b[i] = static_cast<float>(0.1 * nd(rng));
    l.act = k + 2 == dims.size() ? Activation::Identity : Activation::Relu;
    l.weight_id = "fc" + std::to_string(k) + ".weight";
    l.bias_id = "fc" + std::to_string(k) + ".bias";
    net.layers.push_back(std::move(l));
  }
  return net;
}

ToyNet net_from_model(const Model& model) {
  if (model.manifest.net.empty()) throw InvalidArgument("model carries no net topology");
  ToyNet net;
  for (const auto& spec : model.manifest.net) {
    const auto& wb = model.block(spec.weight);
    if (wb.kind != BlockKind::DenseMatrix) throw InvalidArgument("net layer '" + spec.weight + "' is not a dense matrix");
    DenseLayer l;
    l.w = unflatten_rowmajor(wb.values.cast<double>(), wb.shape[0], wb.shape[1]);
    l.b = Vector::Zero(wb.shape[0]);
    if (!spec.bias.empty()) l.b = model.block(spec.bias).values.cast<double>();
    l.act = activation_from_string(spec.activation);
    l.weight_id = spec.weight;
    l.bias_id = spec.bias;
    net.layers.push_back(std::move(l));
  }
  net.validate();
  return net;
}

Model model_from_net(const ToyNet& net, std::int64_t group_size) {
  net.validate();
  Model m;
  std::vector<NetLayerSpec> specs;
  for (const auto& l : net.layers) {
    WeightBlock w;
    w.id = l.weight_id;
    w.shape = {l.w.rows(), l.w.cols()};
    w.kind = BlockKind::DenseMatrix;
    w.group_size = group_size;
    w.values = flatten_rowmajor(l.w).cast<float>();
    m.blocks.push_back(std::move(w));
    if (!l.bias_id.empty()) {
      WeightBlock b;
      b.id = l.bias_id;
      b.shape = {l.b.size()};
      b.kind = BlockKind::GenericVector;
      b.group_size = group_size;
      b.values = l.b.cast<float>();
      m.blocks.push_back(std::move(b));
    }
    specs.push_back({l.weight_id, l.bias_id, to_string(l.act)});
  }
  m.manifest = make_manifest(m.blocks, std::move(specs));
  return m;
}

Vector forward(const ToyNet& net, const Vector& x) {
  if (x.size() != net.input_dim()) throw InvalidArgument("forward: input dimension mismatch");
  Vector a = x;
  for (const auto& l : net.layers) a = activate(l.w * a + l.b, l.act);
  return a;
}

Matrix forward_batch(const ToyNet& net, const Matrix& x) {
  if (x.cols() != net.input_dim()) throw InvalidArgument("forward: input dimension mismatch");
  Matrix a = x.transpose();
  for (const auto& l : net.layers) {
    a = (l.w * a).colwise() + l.b;
    if (l.act == Activation::Relu) a = a.cwiseMax(0.0);
  }
  return a.transpose();
}

Vector softmax(const Vector& logits, double tau) {
  const Vector z = logits / tau;
  const Vector e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

double kl_divergence(const Vector& p, const Vector& q) {
  double s = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += p[i] * (std::log(p[i]) - std::log(q[i]));
  return s;
}

double entropy(const Vector& p) {
  double s = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0) s -= p[i] * std::log(p[i]);
  return s;
}

CurvatureOracle ggn_oracle(const ToyNet& net, int layer, const Matrix& inputs) {
  check_layer(net, layer);
  if (inputs.rows() == 0) throw InvalidArgument("ggn_oracle: calibration inputs are empty");
  net.validate();
  std::vector<Trace> traces;
  std::vector<Vector> probs;
  for (Eigen::Index n = 0; n < inputs.rows(); ++n) {
    traces.push_back(run(net, inputs.row(n).transpose()));
    probs.push_back(softmax(traces.back().a.back()));
  }
  const auto& wl = net.layers[static_cast<std::size_t>(layer)];
  const Eigen::Index rows = wl.w.rows(), cols = wl.w.cols();
  auto apply = [net, layer, traces = std::move(traces), probs = std::move(probs), rows, cols](const Vector& v) {
    const Matrix dw = unflatten_rowmajor(v, rows, cols);
    Matrix acc = Matrix::Zero(rows, cols);
    const auto nl = static_cast<int>(net.layers.size());
    for (std::size_t n = 0; n < traces.size(); ++n) {
      const auto& t = traces[n];
      Vector da = act_grad(t.pre[static_cast<std::size_t>(layer)], net.layers[static_cast<std::size_t>(layer)].act)
                      .cwiseProduct(dw * t.a[static_cast<std::size_t>(layer)]);
      for (int k = layer + 1; k < nl; ++k) {
        const auto& l = net.layers[static_cast<std::size_t>(k)];
        da = act_grad(t.pre[static_cast<std::size_t>(k)], l.act).cwiseProduct(l.w * da);
      }
      const Vector& p = probs[n];
      const Vector u = p.cwiseProduct(da) - p * p.dot(da);
      const auto dpre = backprop(net, t, u, layer);
      acc += dpre[static_cast<std::size_t>(layer)] * t.a[static_cast<std::size_t>(layer)].transpose();
    }
    return flatten_rowmajor(acc / static_cast<double>(traces.size()));
  };
  return {std::move(apply), rows * cols, CurvatureKind::Fisher};
}

Matrix ggn_matrix(const ToyNet& net, int layer, const Matrix& inputs) {
  const auto oracle = ggn_oracle(net, layer, inputs);
  if (oracle.dim > kDenseCovarianceLimit) throw InvalidArgument("ggn_matrix: layer too large");
  Matrix h(oracle.dim, oracle.dim);
  Vector e = Vector::Zero(oracle.dim);
  for (Eigen::Index j = 0; j < oracle.dim; ++j) {
    e[j] = 1;
    h.col(j) = oracle(e);
    e[j] = 0;
  }
  return h;
}

Matrix layer_inputs(const ToyNet& net, int layer, const Matrix& inputs) {
  check_layer(net, layer);
  Matrix a = inputs.transpose();
  for (int k = 0; k < layer; ++k) {
    const auto& l = net.layers[static_cast<std::size_t>(k)];
    a = (l.w * a).colwise() + l.b;
    if (l.act == Activation::Relu) a = a.cwiseMax(0.0);
  }
  return a.transpose();
}

std::vector<KfacBatch> kfac_batches(const ToyNet& net, int layer, const Matrix& inputs, Eigen::Index batch_size,
                                    std::uint64_t seed) {
  check_layer(net, layer);
  if (batch_size < 1) throw InvalidArgument("kfac_batches: batch size must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto& wl = net.layers[static_cast<std::size_t>(layer)];
  std::vector<KfacBatch> out;
  for (Eigen::Index start = 0; start < inputs.rows(); start += batch_size) {
    const Eigen::Index n = std::min(batch_size, inputs.rows() - start);
    KfacBatch b{Matrix(n, wl.w.cols()), Matrix(n, wl.w.rows())};
    for (Eigen::Index r = 0; r < n; ++r) {
      const auto t = run(net, inputs.row(start + r).transpose());
      Vector g = softmax(t.a.back());
      const double target = u(rng);
      double acc = 0;
      Eigen::Index y = g.size() - 1;
      for (Eigen::Index c = 0; c < g.size(); ++c) {
        acc += g[c];
        if (target < acc) {
          y = c;
          break;
        }
      }
      g[y] -= 1.0;
      const auto dpre = backprop(net, t, g, layer);
      b.inputs.row(r) = t.a[static_cast<std::size_t>(layer)].transpose();
      b.gradients.row(r) = dpre[static_cast<std::size_t>(layer)].transpose();
    }
    out.push_back(std::move(b));
  }
  return out;
}

TeacherDistribution teacher(const ToyNet& net, const LayerPosteriors& posteriors, const Matrix& inputs, int samples,
                            double tau, std::uint64_t seed) {
  if (samples < 1) throw InvalidArgument("teacher: need at least one posterior sample");
  if (!(tau >= 1)) throw InvalidArgument("teacher: temperature must be >= 1");
  std::vector<std::pair<int, Whitener>> whiteners;
  ToyNet base = net;
  for (const auto& [layer, post] : posteriors) {
    check_layer(net, layer);
    auto& l = base.layers[static_cast<std::size_t>(layer)];
    if (post.mu.size() != l.w.size()) throw InvalidArgument("teacher: posterior size does not match the layer");
    // point mass, no sampling
    if (post.marginal_variances().maxCoeff() <= 0) {
      l.w = unflatten_rowmajor(post.mu, l.w.rows(), l.w.cols());
      continue;
    }
    whiteners.emplace_back(layer, build_whitener(post));
  }
  std::mt19937_64 rng(seed);
  TeacherDistribution t;
  t.tau = tau;
  t.samples = samples;
  t.probs = Matrix::Zero(inputs.rows(), net.classes());
  for (int s = 0; s < samples; ++s) {
    ToyNet ns = base;
    for (const auto& [layer, wh] : whiteners) {
      auto& l = ns.layers[static_cast<std::size_t>(layer)];
      l.w = unflatten_rowmajor(wh.sample(rng), l.w.rows(), l.w.cols());
    }
    const Matrix logits = forward_batch(ns, inputs);
    for (Eigen::Index n = 0; n < inputs.rows(); ++n) t.probs.row(n) += softmax(logits.row(n).transpose(), tau).transpose();
  }
  for (Eigen::Index n = 0; n < inputs.rows(); ++n) t.probs.row(n) /= t.probs.row(n).sum();
  return t;
}

Vector QuantizedLayer::base() const {
  const auto gof = group_of();
  Vector b(static_cast<Eigen::Index>(gof.size()));
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    const auto& g = groups[static_cast<std::size_t>(gof[static_cast<std::size_t>(i)])];
    if (vq_group > 1) {
      const auto q = indices[static_cast<std::size_t>(i / vq_group)];
      b[i] = g.lut[static_cast<std::size_t>(q * g.lut_width + i % vq_group)];
    } else {
      const auto q = indices[static_cast<std::size_t>(i)];
      b[i] = g.has_lut() ? g.lut[static_cast<std::size_t>(q)] : static_cast<double>(q) - g.zero_point;
    }
  }
  return b;
}

std::vector<Eigen::Index> QuantizedLayer::group_of() const {
  const std::size_t n = vq_group > 1 ? indices.size() * static_cast<std::size_t>(vq_group) : indices.size();
  std::vector<Eigen::Index> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = vq_group > 1 ? 0 : static_cast<Eigen::Index>(i / static_cast<std::size_t>(group_size));
  return g;
}

std::vector<double> QuantizedLayer::scales() const {
  std::vector<double> s;
  for (const auto& g : groups) s.push_back(g.scale);
  return s;
}

ToyNet apply_scales(const ToyNet& net, const std::vector<QuantizedLayer>& qlayers,
                    const std::vector<std::vector<double>>& scales) {
  if (scales.size() != qlayers.size()) throw InvalidArgument("apply_scales: one scale vector per quantized layer");
  ToyNet out = net;
  for (std::size_t k = 0; k < qlayers.size(); ++k) {
    const auto& q = qlayers[k];
    check_layer(net, q.layer);
    auto& l = out.layers[static_cast<std::size_t>(q.layer)];
    const Vector base = q.base();
    const auto gof = q.group_of();
    const Eigen::Index n = l.w.size();
    if (base.size() < n) throw InvalidArgument("apply_scales: index stream shorter than the layer");
    Vector w(n);
    for (Eigen::Index i = 0; i < n; ++i) w[i] = scales[k][static_cast<std::size_t>(gof[static_cast<std::size_t>(i)])] * base[i];
    l.w = unflatten_rowmajor(w, l.w.rows(), l.w.cols());
  }
  return out;
}

double distill_objective(const ToyNet& net, const std::vector<QuantizedLayer>& qlayers,
                         const std::vector<std::vector<double>>& scales, const TeacherDistribution& teacher,
                         const Matrix& inputs) {
  const Matrix logits = forward_batch(apply_scales(net, qlayers, scales), inputs);
  double s = 0;
  for (Eigen::Index n = 0; n < inputs.rows(); ++n)
    s += kl_divergence(teacher.probs.row(n).transpose(), softmax(logits.row(n).transpose(), teacher.tau));
  return s / static_cast<double>(inputs.rows());
}

std::vector<std::vector<double>> distill_gradient(const ToyNet& net, const std::vector<QuantizedLayer>& qlayers,
                                                  const std::vector<std::vector<double>>& scales,
                                                  const TeacherDistribution& teacher, const Matrix& inputs) {
  const ToyNet qn = apply_scales(net, qlayers, scales);
  std::vector<Matrix> gw;
  for (const auto& q : qlayers)
    gw.push_back(Matrix::Zero(qn.layers[static_cast<std::size_t>(q.layer)].w.rows(),
                              qn.layers[static_cast<std::size_t>(q.layer)].w.cols()));
  const double inv_n = 1.0 / static_cast<double>(inputs.rows());
  for (Eigen::Index n = 0; n < inputs.rows(); ++n) {
    const auto t = run(qn, inputs.row(n).transpose());
    const Vector p = softmax(t.a.back(), teacher.tau);
    const Vector dout = (p - teacher.probs.row(n).transpose()) * (inv_n / teacher.tau);
    const auto dpre = backprop(qn, t, dout);
    for (std::size_t k = 0; k < qlayers.size(); ++k) {
      const auto l = static_cast<std::size_t>(qlayers[k].layer);
      gw[k] += dpre[l] * t.a[l].transpose();
    }
  }
  std::vector<std::vector<double>> grad;
  for (std::size_t k = 0; k < qlayers.size(); ++k) {
    const Vector g = flatten_rowmajor(gw[k]);
    const Vector base = qlayers[k].base();
    const auto gof = qlayers[k].group_of();
    std::vector<double> gs(scales[k].size(), 0.0);
    for (Eigen::Index i = 0; i < g.size(); ++i) gs[static_cast<std::size_t>(gof[static_cast<std::size_t>(i)])] += g[i] * base[i];
    grad.push_back(std::move(gs));
  }
  return grad;
}

DistillResult distill_scales(const ToyNet& net, const std::vector<QuantizedLayer>& qlayers,
                             const TeacherDistribution& teacher, const Matrix& inputs, const DistillOptions& opt) {
  if (teacher.probs.rows() != inputs.rows()) throw InvalidArgument("distill_scales: teacher/input count mismatch");
  DistillResult r;
  std::vector<std::vector<double>> s;
  for (const auto& q : qlayers) s.push_back(q.scales());
  double lr = opt.learning_rate;
  double kl = distill_objective(net, qlayers, s, teacher, inputs);
  r.kl_trace.push_back(kl);
  r.scales = s;
  r.final_kl = kl;
  int rising = 0;
  for (int step = 0; step < opt.steps; ++step) {
    const auto g = distill_gradient(net, qlayers, s, teacher, inputs);
    for (std::size_t k = 0; k < s.size(); ++k)
      for (std::size_t j = 0; j < s[k].size(); ++j) s[k][j] -= lr * g[k][j];
    const double next = distill_objective(net, qlayers, s, teacher, inputs);
    r.kl_trace.push_back(next);
    if (next < r.final_kl) {
      r.final_kl = next;
      r.scales = s;
    }
    rising = next > kl ? rising + 1 : 0;
    kl = next;
    if (rising >= opt.patience) {
      rising = 0;
      lr *= 0.5;
      if (++r.halvings > opt.max_halvings) {
        r.aborted = true;
        break;
      }
      s = r.scales;
      kl = r.final_kl;
    }
  }
  r.final_step = lr;
  return r;
}

}  // namespace bayesq

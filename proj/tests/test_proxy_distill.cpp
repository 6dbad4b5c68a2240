#include <doctest.h>

#include <random>

#include "bayesq/proxy_distill.hpp"
#include "support.hpp"

using namespace bayesq;

namespace {

ToyNet single_layer(Matrix w, Activation act = Activation::Identity) {
  ToyNet net;
  DenseLayer l;
  l.b = Vector::Zero(w.rows());
  l.w = std::move(w);
  l.act = act;
  l.weight_id = "fc0.weight";
  net.layers.push_back(std::move(l));
  return net;
}

Matrix random_inputs(Eigen::Index n, Eigen::Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Matrix x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = nd(rng);
  return x;
}

// Quantized layer whose base values come from a small LUT; true weights are
// scale * lut[q] with the given per-group scales.
QuantizedLayer lut_layer(int layer, Eigen::Index n, std::int64_t group, const std::vector<double>& scales,
                         std::mt19937_64& rng) {
  QuantizedLayer q;
  q.layer = layer;
  q.group_size = group;
  std::uniform_int_distribution<int> pick(0, 3);
  for (Eigen::Index i = 0; i < n; ++i) q.indices.push_back(pick(rng));
  for (double s : scales) {
    CompiledAffine a;
    a.scale = s;
    a.qmin = 0;
    a.qmax = 3;
    a.lut = {-0.9, -0.3, 0.4, 1.1};
    q.groups.push_back(a);
  }
  return q;
}

std::vector<std::vector<double>> scales_of(const std::vector<QuantizedLayer>& qs) {
  std::vector<std::vector<double>> s;
  for (const auto& q : qs) s.push_back(q.scales());
  return s;
}

TeacherDistribution plain_teacher(const ToyNet& net, const Matrix& inputs, double tau) {
  return teacher(net, {}, inputs, 1, tau, 0);
}

}  // namespace

TEST_CASE("forward with identity weights returns the input") {
  const auto net = single_layer(Matrix::Identity(4, 4));
  Vector x(4);
  x << 0.5, -1.0, 2.0, 3.25;
  CHECK((forward(net, x) - x).norm() == 0.0);
}

TEST_CASE("zero weights give zero logits and a uniform softmax") {
  const auto net = single_layer(Matrix::Zero(5, 3));
  const Vector z = forward(net, Vector::Ones(3));
  CHECK(z.norm() == 0.0);
  const Vector p = softmax(z);
  for (Eigen::Index i = 0; i < 5; ++i) CHECK(p[i] == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("two layer net matches hand arithmetic") {
  ToyNet net;
  DenseLayer a, b;
  a.w.resize(2, 2);
  a.w << 1, -2, 0.5, 1;
  a.b = Vector::Zero(2);
  a.b << 0.5, -1;
  a.act = Activation::Relu;
  b.w.resize(2, 2);
  b.w << 2, 1, -1, 3;
  b.b = Vector::Zero(2);
  b.b << 0, 0.25;
  net.layers = {a, b};
  Vector x(2);
  x << 1, 1;
  // hidden pre = (1-2+0.5, 0.5+1-1) = (-0.5, 0.5) -> relu (0, 0.5)
  // logits = (0.5, 1.5 + 0.25)
  const Vector z = forward(net, x);
  CHECK(z[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(z[1] == doctest::Approx(1.75).epsilon(1e-15));

  Matrix xs(2, 2);
  xs << 1, 1, -1, 2;
  const Matrix zb = forward_batch(net, xs);
  CHECK((zb.row(0).transpose() - z).norm() < 1e-15);
  CHECK((zb.row(1).transpose() - forward(net, xs.row(1).transpose())).norm() < 1e-15);
}

TEST_CASE("forward rejects a dimension mismatch") {
  const auto net = single_layer(Matrix::Identity(3, 3));
  CHECK_THROWS_AS(forward(net, Vector::Ones(4)), InvalidArgument);
  CHECK_THROWS_AS(forward_batch(net, Matrix::Ones(2, 2)), InvalidArgument);
}

TEST_CASE("softmax temperature and kl") {
  Vector z(3);
  z << 1, 2, 3;
  const Vector p = softmax(z, 2.0);
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(p[2] / p[1] == doctest::Approx(std::exp(0.5)).epsilon(1e-12));
  CHECK(kl_divergence(p, p) == 0.0);
  CHECK(kl_divergence(p, softmax(z)) > 0);
  Vector one_hot = Vector::Zero(3);
  one_hot[1] = 1;
  CHECK(entropy(one_hot) == 0.0);
  CHECK(entropy(softmax(Vector::Zero(4))) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("ggn oracle on a linear layer matches the dense assembly") {
  std::mt19937_64 rng(5);
  const Eigen::Index out = 3, in = 4;
  Matrix w(out, in);
  w = random_inputs(out, in, rng);
  const auto net = single_layer(w);
  Matrix x = Matrix::Zero(in, in);
  for (Eigen::Index i = 0; i < in; ++i) x(i, i) = 1;  // one-hot inputs

  Matrix expect = Matrix::Zero(out * in, out * in);
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    const Vector p = softmax(w * x.row(n).transpose());
    const Matrix lambda = Matrix(p.asDiagonal()) - p * p.transpose();
    const Vector xn = x.row(n).transpose();
    Matrix k(out * in, out * in);
    for (Eigen::Index i = 0; i < out; ++i)
      for (Eigen::Index j = 0; j < out; ++j) k.block(i * in, j * in, in, in) = lambda(i, j) * xn * xn.transpose();
    expect += k;
  }
  expect /= static_cast<double>(x.rows());

  const Matrix h = ggn_matrix(net, 0, x);
  CHECK((h - expect).norm() < 1e-14);
  const auto oracle = ggn_oracle(net, 0, x);
  const Vector v = testing::normal_vector(out * in, rng);
  CHECK((oracle(v) - expect * v).norm() < 1e-14);
}

TEST_CASE("ggn oracle is linear symmetric and psd") {
  std::mt19937_64 rng(6);
  const auto net = make_toy_mlp({5, 8, 4}, 7);
  const Matrix x = random_inputs(20, 5, rng);
  for (int layer : {0, 1}) {
    const auto oracle = ggn_oracle(net, layer, x);
    CHECK(oracle(Vector::Zero(oracle.dim)).norm() == 0.0);
    for (int t = 0; t < 10; ++t) {
      const Vector u = testing::normal_vector(oracle.dim, rng);
      const Vector v = testing::normal_vector(oracle.dim, rng);
      CHECK(std::abs(v.dot(oracle(u)) - u.dot(oracle(v))) < 1e-8);
      CHECK(v.dot(oracle(v)) >= -1e-12);
    }
  }
  CHECK_THROWS_AS(ggn_oracle(net, 2, x), InvalidArgument);
  CHECK_THROWS_AS(ggn_oracle(net, 0, Matrix(0, 5)), InvalidArgument);
}

TEST_CASE("layer inputs and kfac batches") {
  std::mt19937_64 rng(8);
  const auto net = make_toy_mlp({4, 6, 3}, 9);
  const Matrix x = random_inputs(10, 4, rng);
  CHECK((layer_inputs(net, 0, x) - x).norm() == 0.0);
  const Matrix h = layer_inputs(net, 1, x);
  CHECK(h.cols() == 6);
  CHECK(h.minCoeff() >= 0.0);
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    const Vector pre = net.layers[0].w * x.row(n).transpose() + net.layers[0].b;
    CHECK((h.row(n).transpose() - pre.cwiseMax(0.0)).norm() < 1e-14);
  }

  const auto batches = kfac_batches(net, 1, x, 4, 3);
  REQUIRE(batches.size() == 3);
  CHECK(batches[2].inputs.rows() == 2);
  CHECK(batches[0].inputs.cols() == 6);
  CHECK(batches[0].gradients.cols() == 3);
  // Fisher gradients at the last layer are p - onehot(y): they sum to zero.
  for (const auto& b : batches)
    for (Eigen::Index r = 0; r < b.gradients.rows(); ++r) CHECK(std::abs(b.gradients.row(r).sum()) < 1e-12);
  const auto again = kfac_batches(net, 1, x, 4, 3);
  CHECK((again[1].gradients - batches[1].gradients).norm() == 0.0);
}

TEST_CASE("model roundtrip keeps the net") {
  const auto net = make_toy_mlp({6, 5, 3}, 11);
  const Model m = model_from_net(net, 8);
  CHECK(m.blocks.size() == 4);
  const ToyNet back = net_from_model(m);
  REQUIRE(back.layers.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK((back.layers[k].w - net.layers[k].w).norm() == 0.0);
    CHECK((back.layers[k].b - net.layers[k].b).norm() == 0.0);
    CHECK(back.layers[k].act == net.layers[k].act);
  }
  CHECK(back.layer_of("fc1.weight") == 1);
  CHECK(back.layer_of("fc1.bias") == -1);
}

TEST_CASE("teacher with one zero-variance sample is the softened softmax") {
  std::mt19937_64 rng(12);
  const auto net = make_toy_mlp({4, 6, 3}, 13);
  const Matrix x = random_inputs(15, 4, rng);
  LayerPosteriors posts;
  for (int k = 0; k < 2; ++k) {
    const auto& w = net.layers[static_cast<std::size_t>(k)].w;
    BlockPosterior p;
    p.mu = Vector(w.size());
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) p.mu[i * w.cols() + j] = w(i, j);
    p.cov = DenseCov{Matrix::Zero(w.size(), w.size())};
    posts[k] = p;
  }
  const auto t = teacher(net, posts, x, 1, 2.0, 4);
  const Matrix logits = forward_batch(net, x);
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    const Vector expect = softmax(logits.row(n).transpose(), 2.0);
    CHECK((t.probs.row(n).transpose() - expect).norm() < 1e-12);
  }
}

TEST_CASE("teacher at huge temperature is uniform") {
  std::mt19937_64 rng(14);
  const auto net = make_toy_mlp({3, 5, 4}, 15);
  const Matrix x = random_inputs(20, 3, rng);
  LayerPosteriors posts;
  posts[0] = BlockPosterior{Vector::Zero(15), DiagonalCov{Vector::Constant(15, 0.1)}};
  for (Eigen::Index i = 0; i < 15; ++i) posts[0].mu[i] = net.layers[0].w(i / 3, i % 3);
  const auto t = teacher(net, posts, x, 4, 1e6, 1);
  CHECK((t.probs.array() - 0.25).abs().maxCoeff() < 1e-4);
  CHECK_THROWS_AS(teacher(net, posts, x, 0, 2.0, 1), InvalidArgument);
  CHECK_THROWS_AS(teacher(net, posts, x, 4, 0.5, 1), InvalidArgument);
}

TEST_CASE("posterior teacher is at least as uncertain as the mean weights") {
  std::mt19937_64 rng(16);
  Matrix w(2, 3);
  w << 1.6, -0.8, 0.6, -1.0, 1.2, 0.2;
  const auto net = single_layer(w);
  // inputs with a clear mean-weight margin; at a zero margin the mean-weight
  // softmax already has maximal entropy
  Matrix x(100, 3);
  std::normal_distribution<double> nd;
  for (Eigen::Index n = 0; n < x.rows();) {
    const Vector xn = testing::normal_vector(3, rng);
    const Vector z = w * xn;
    if (std::abs(z[0] - z[1]) < 2.0) continue;
    x.row(n++) = xn.transpose();
  }
  LayerPosteriors posts;
  Vector mu(6);
  mu << 1.6, -0.8, 0.6, -1.0, 1.2, 0.2;
  posts[0] = BlockPosterior{mu, DiagonalCov{Vector::Constant(6, 1.5)}};
  const auto t = teacher(net, posts, x, 16, 1.0, 21);
  const Matrix logits = forward_batch(net, x);
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    CHECK(std::abs(t.probs.row(n).sum() - 1.0) < 1e-9);
    CHECK(t.probs.row(n).minCoeff() >= 0.0);
    CHECK(entropy(t.probs.row(n).transpose()) >= entropy(softmax(logits.row(n).transpose())));
  }
}

TEST_CASE("quantized layer base and groups") {
  QuantizedLayer q;
  q.layer = 0;
  q.group_size = 2;
  q.indices = {0, 3, 1, 2};
  CompiledAffine a;
  a.scale = 0.5;
  a.zero_point = 1.5;
  a.qmax = 3;
  CompiledAffine b = a;
  b.scale = 2.0;
  q.groups = {a, b};
  const Vector base = q.base();
  CHECK(base[0] == -1.5);
  CHECK(base[1] == 1.5);
  CHECK(base[3] == 0.5);
  CHECK(q.group_of() == std::vector<Eigen::Index>{0, 0, 1, 1});
  CHECK(q.scales() == std::vector<double>{0.5, 2.0});

  const auto net = single_layer(Matrix::Zero(2, 2));
  const auto qn = apply_scales(net, {q}, {{0.5, 2.0}});
  CHECK(qn.layers[0].w(0, 0) == -0.75);
  CHECK(qn.layers[0].w(0, 1) == 0.75);
  CHECK(qn.layers[0].w(1, 0) == -1.0);
  CHECK(qn.layers[0].w(1, 1) == 1.0);
}

TEST_CASE("distill gradient matches central differences") {
  std::mt19937_64 rng(22);
  for (int config = 0; config < 5; ++config) {
    auto net = make_toy_mlp({5, 6, 3}, 30 + static_cast<std::uint64_t>(config));
    const Matrix x = random_inputs(12, 5, rng);
    std::vector<QuantizedLayer> qs;
    qs.push_back(lut_layer(0, 30, 8, {0.3, 0.5, 0.4, 0.6}, rng));
    qs.push_back(lut_layer(1, 18, 6, {0.7, 0.2, 0.5}, rng));
    const auto truth = make_toy_mlp({5, 6, 3}, 99);
    const auto t = teacher(truth, {}, x, 1, 2.0, 0);
    const auto s = scales_of(qs);
    const auto g = distill_gradient(net, qs, s, t, x);
    const double h = 1e-5;
    for (std::size_t k = 0; k < s.size(); ++k)
      for (std::size_t j = 0; j < s[k].size(); ++j) {
        auto up = s, down = s;
        up[k][j] += h;
        down[k][j] -= h;
        const double fd = (distill_objective(net, qs, up, t, x) - distill_objective(net, qs, down, t, x)) / (2 * h);
        CHECK(std::abs(fd - g[k][j]) <= 1e-5 * std::max(std::abs(fd), 1e-3));
      }
  }
}

TEST_CASE("distillation is stationary when the teacher is the student") {
  std::mt19937_64 rng(23);
  const auto net = make_toy_mlp({4, 6, 3}, 31);
  const Matrix x = random_inputs(20, 4, rng);
  std::vector<QuantizedLayer> qs{lut_layer(0, 24, 8, {0.5, 0.6, 0.4}, rng)};
  const auto s = scales_of(qs);
  const auto t = plain_teacher(apply_scales(net, qs, s), x, 2.0);
  const auto g = distill_gradient(net, qs, s, t, x);
  double norm = 0;
  for (double v : g[0]) norm += v * v;
  CHECK(std::sqrt(norm) < 1e-8);
  DistillOptions opt;
  opt.steps = 20;
  const auto r = distill_scales(net, qs, t, x, opt);
  for (std::size_t j = 0; j < s[0].size(); ++j) CHECK(std::abs(r.scales[0][j] - s[0][j]) < 1e-12);
  CHECK(r.final_kl < 1e-12);
}

TEST_CASE("distillation recovers a mis-scaled block") {
  std::mt19937_64 rng(24);
  auto net = single_layer(Matrix::Zero(4, 6));
  const Matrix x = random_inputs(64, 6, rng);
  std::vector<QuantizedLayer> qs{lut_layer(0, 24, 24, {1.0}, rng)};
  const auto t = plain_teacher(apply_scales(net, qs, {{1.0}}), x, 2.0);
  qs[0].groups[0].scale = 0.5;
  DistillOptions opt;
  opt.learning_rate = 1.0;
  const auto r = distill_scales(net, qs, t, x, opt);
  MESSAGE("recovered scale " << r.scales[0][0] << ", kl " << r.kl_trace.front() << " -> " << r.final_kl);
  CHECK(std::abs(r.scales[0][0] - 1.0) < 0.05);
  CHECK(r.final_kl < r.kl_trace.front() / 10);
  CHECK(r.kl_trace.size() == static_cast<std::size_t>(opt.steps) + 1);
  CHECK_FALSE(r.aborted);
}

TEST_CASE("divergence guard halves and aborts") {
  std::mt19937_64 rng(25);
  auto net = single_layer(Matrix::Zero(4, 6));
  const Matrix x = random_inputs(32, 6, rng);
  std::vector<QuantizedLayer> qs{lut_layer(0, 24, 24, {1.0}, rng)};
  const auto t = plain_teacher(apply_scales(net, qs, {{1.0}}), x, 2.0);
  qs[0].groups[0].scale = 0.99;
  DistillOptions opt;
  opt.learning_rate = 16;
  opt.steps = 200;
  const auto r = distill_scales(net, qs, t, x, opt);
  CHECK(r.halvings == 2);
  CHECK_FALSE(r.aborted);
  CHECK(r.final_step == 4.0);
  CHECK(r.final_kl < 1e-12);

  opt.max_halvings = 0;
  const auto a = distill_scales(net, qs, t, x, opt);
  CHECK(a.aborted);
  CHECK(a.halvings == 1);
  CHECK(a.final_kl <= a.kl_trace.front());
  CHECK(a.kl_trace.size() < 200);
}

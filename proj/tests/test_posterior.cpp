#include <doctest.h>

#include <random>

#include "bayesq/error.hpp"
#include "bayesq/posterior.hpp"
#include "support.hpp"

using namespace bayesq;

namespace {

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

WeightBlock zeros(Eigen::Index d) { return testing::make_block("b", Vector::Zero(d)); }

WeightBlock matrix_block(Eigen::Index o, Eigen::Index i, std::mt19937_64& rng) {
  return testing::make_block("w", testing::normal_vector(o * i, rng), {o, i});
}

Matrix empirical_cov(const Matrix& x) {
  const Matrix c = x.rowwise() - x.colwise().mean();
  return c.transpose() * c / static_cast<double>(x.rows() - 1);
}

}  // namespace

TEST_CASE("hutchinson is exact for diagonal oracles") {
  Vector h(5);
  h << 0.5, 2, 3, 7, 1e-3;
  for (int m : {1, 3, 16}) CHECK((hutchinson_diag(diagonal_oracle(h), 5, m, 9) - h).cwiseAbs().maxCoeff() <= 1e-15 * h.maxCoeff());
  CHECK_THROWS_AS(hutchinson_diag(diagonal_oracle(h), 5, 0, 9), InvalidArgument);
  CHECK_THROWS_AS(hutchinson_diag(diagonal_oracle(h), 4, 1, 9), InvalidArgument);
}

TEST_CASE("hutchinson within sampling error on an explicit SPD matrix") {
  std::mt19937_64 rng(1);
  const Matrix h = testing::random_spd(32, rng);
  const int m = 1024;
  const Vector est = hutchinson_diag(explicit_oracle(h), 32, m, 4);
  // per-probe variance of v_i (Hv)_i is sum_{j != i} H_ij^2
  const Vector var = h.cwiseAbs2().rowwise().sum() - h.diagonal().cwiseAbs2();
  const double se = (var / m).cwiseSqrt().mean();
  CHECK((est - h.diagonal()).cwiseAbs().mean() < 3 * se);
}

TEST_CASE("hutchinson is deterministic per seed") {
  std::mt19937_64 rng(2);
  auto o = explicit_oracle(testing::random_spd(8, rng));
  CHECK(hutchinson_diag(o, 8, 4, 7) == hutchinson_diag(o, 8, 4, 7));
  CHECK(hutchinson_diag(o, 8, 4, 7) != hutchinson_diag(o, 8, 4, 8));
}

TEST_CASE("diagonal laplace variances") {
  DiagLaplaceOptions opt;
  opt.probes = 2;
  auto p = fit_diag_laplace(zeros(4), diagonal_oracle(Vector::Ones(4)), opt);
  for (double v : std::get<DiagonalCov>(p.cov).variances) CHECK(v == doctest::Approx(1 / 1.001).epsilon(1e-14));

  Vector h(3);
  h << -0.5, 1, 2;
  auto q = fit_diag_laplace(zeros(3), diagonal_oracle(h), opt);
  CHECK(std::get<DiagonalCov>(q.cov).variances[0] == doctest::Approx(1 / 1e-3).epsilon(1e-12));

  Matrix four(1, 1);
  four << 4;
  opt.damping = 0;
  CHECK_THROWS_AS(fit_diag_laplace(zeros(1), explicit_oracle(four), opt), InvalidArgument);
  opt.damping = 1e-6;
  CHECK(std::get<DiagonalCov>(fit_diag_laplace(zeros(1), explicit_oracle(four), opt).cov).variances[0] ==
        doctest::Approx(0.25).epsilon(1e-5));
}

TEST_CASE("damping rules") {
  Vector h(4);
  h << 1, 200, 300, 1000;
  DiagLaplaceOptions opt;
  CHECK(effective_damping(h, opt) == 1e-3);
  opt.rule = DampingRule::MedianHeuristic;
  CHECK(effective_damping(h, opt) == doctest::Approx(2.5));
  opt.small_calib = true;
  CHECK(effective_damping(h, opt) == doctest::Approx(12.5));
}

TEST_CASE("kfac identity factors give the identity whitener") {
  KfacBatch b{Matrix::Identity(3, 3), Matrix::Identity(3, 2) * std::sqrt(1.5)};
  b.gradients.bottomRows(1).setZero();
  b.gradients(2, 0) = 0;
  // two rows of g are one-hot scaled so that G = I over three samples
  b.gradients = Matrix::Zero(3, 2);
  b.gradients(0, 0) = std::sqrt(3.0);
  b.gradients(1, 1) = std::sqrt(3.0);
  b.inputs *= std::sqrt(3.0);
  KfacOptions opt;
  opt.damping = 0;
  std::mt19937_64 rng(3);
  auto blk = matrix_block(2, 3, rng);
  auto post = fit_kfac(blk, {b}, opt);
  const Whitener w = build_whitener(post);
  CHECK((w.sqrt_matrix() - Matrix::Identity(6, 6)).norm() < 1e-14);
  const Vector x = testing::normal_vector(6, rng);
  CHECK((w.forward(x) - (x - post.mu)).norm() < 1e-14);
}

TEST_CASE("kfac single batch with beta one reproduces the batch moment") {
  std::mt19937_64 rng(4);
  KfacBatch b{Matrix::Random(10, 3), Matrix::Random(10, 2)};
  KfacOptions opt;
  opt.beta = 1;
  opt.damping = 1e-4;
  auto post = fit_kfac(matrix_block(2, 3, rng), {b}, opt);
  const auto& k = std::get<KroneckerCov>(post.cov);
  Matrix a = k.a_chol * k.a_chol.transpose();
  a.diagonal().array() -= 1e-2;
  CHECK((a - b.inputs.transpose() * b.inputs / 10.0).norm() < 1e-13);
}

TEST_CASE("kfac ema weights the newest batch by beta") {
  std::mt19937_64 rng(5);
  KfacBatch b1{Matrix::Random(6, 3), Matrix::Random(6, 2)};
  KfacBatch b2{Matrix::Random(6, 3), Matrix::Random(6, 2)};
  KfacOptions opt;
  opt.beta = 0.25;
  opt.damping = 0.01;
  auto post = fit_kfac(matrix_block(2, 3, rng), {b1, b2}, opt);
  const auto& k = std::get<KroneckerCov>(post.cov);
  Matrix g = 0.75 * b1.gradients.transpose() * b1.gradients / 6.0 + 0.25 * b2.gradients.transpose() * b2.gradients / 6.0;
  g.diagonal().array() += 0.1;
  CHECK((k.g_chol * k.g_chol.transpose() - g).norm() < 1e-13);
}

TEST_CASE("kfac covariance matches the dense kronecker construction") {
  std::mt19937_64 rng(6);
  for (auto [o, i] : {std::pair<Eigen::Index, Eigen::Index>{2, 3}, {4, 8}, {8, 8}}) {
    KfacBatch b{Matrix::Random(16, i), Matrix::Random(16, o)};
    KfacOptions opt;
    opt.beta = 1;
    opt.damping = 0.04;
    auto post = fit_kfac(matrix_block(o, i, rng), {b}, opt);
    Matrix a = b.inputs.transpose() * b.inputs / 16.0;
    Matrix g = b.gradients.transpose() * b.gradients / 16.0;
    a.diagonal().array() += 0.2;
    g.diagonal().array() += 0.2;
    const Matrix sigma = kron(g.inverse(), a.inverse());
    CHECK(testing::rel_frobenius(post.dense_covariance(), sigma) < 1e-10);
    const Matrix s = build_whitener(post).sqrt_matrix();
    CHECK(testing::rel_frobenius(s * s.transpose(), sigma) < 1e-10);
    CHECK(post.marginal_variances().isApprox(sigma.diagonal(), 1e-12));
    CHECK(post.saliency() == doctest::Approx(sigma.inverse().trace() / double(o * i)).epsilon(1e-9));
  }
}

TEST_CASE("kfac rejects bad input") {
  std::mt19937_64 rng(7);
  auto blk = matrix_block(2, 3, rng);
  KfacOptions opt;
  CHECK_THROWS_AS(fit_kfac(blk, {}, opt), InvalidArgument);
  CHECK_THROWS_AS(fit_kfac(blk, {KfacBatch{Matrix::Ones(4, 2), Matrix::Ones(4, 2)}}, opt), InvalidArgument);
  opt.damping = 0;
  CHECK_THROWS_AS(fit_kfac(blk, {KfacBatch{Matrix::Zero(4, 3), Matrix::Zero(4, 2)}}, opt), NumericalError);
  CHECK_THROWS_AS(fit_kfac(zeros(6), {KfacBatch{Matrix::Ones(4, 3), Matrix::Ones(4, 2)}}, opt), InvalidArgument);
}

TEST_CASE("low rank with rank zero is the diagonal fit") {
  std::mt19937_64 rng(8);
  auto o = explicit_oracle(testing::random_spd(12, rng));
  LowRankOptions opt;
  opt.rank = 0;
  auto lr = fit_lowrank_diag(zeros(12), o, opt);
  auto dg = fit_diag_laplace(zeros(12), o, opt.diag);
  CHECK(std::get<DiagonalCov>(lr.cov).variances == std::get<DiagonalCov>(dg.cov).variances);
  opt.rank = 13;
  CHECK_THROWS_AS(fit_lowrank_diag(zeros(12), o, opt), InvalidArgument);
}

TEST_CASE("low rank at full rank matches the damped inverse") {
  std::mt19937_64 rng(9);
  const Matrix h = testing::random_spd(10, rng);
  LowRankOptions opt;
  opt.rank = 10;
  opt.diag.damping = 0.01;
  auto post = fit_lowrank_diag(zeros(10), explicit_oracle(h), opt);
  const Matrix exact = (h + 0.01 * Matrix::Identity(10, 10)).inverse();
  CHECK(testing::rel_frobenius(post.dense_covariance(), exact) < 1e-8);
}

TEST_CASE("low rank beats diagonal on diag plus rank one") {
  std::mt19937_64 rng(10);
  Vector d = Vector::LinSpaced(16, 1, 3);
  Vector u = testing::normal_vector(16, rng);
  Matrix h = Matrix(d.asDiagonal()) + 4 * u * u.transpose();
  const Matrix exact = (h + 1e-3 * Matrix::Identity(16, 16)).inverse();
  LowRankOptions opt;
  opt.rank = 2;
  opt.diag.probes = 64;
  auto lr = fit_lowrank_diag(zeros(16), explicit_oracle(h), opt);
  auto dg = fit_diag_laplace(zeros(16), explicit_oracle(h), opt.diag);
  auto whitened_error = [&](const BlockPosterior& p) {
    const Matrix s = build_whitener(p).sqrt_matrix();
    const Matrix si = s.inverse();
    return (si * exact * si.transpose() - Matrix::Identity(16, 16)).norm();
  };
  CHECK(whitened_error(lr) < whitened_error(dg));
}

TEST_CASE("whitener routes") {
  Vector mu(2), var(2);
  mu << 1, -1;
  var << 4, 9;
  BlockPosterior p{mu, DiagonalCov{var}};
  Whitener w = build_whitener(p);
  CHECK(w.kind() == Whitener::Kind::Diagonal);
  Vector x(2);
  x << 3, 2;
  CHECK(w.forward(x).isApprox(Vector(Eigen::Vector2d(1.0, 1.0))));

  BlockPosterior id{Vector::Zero(3), DenseCov{Matrix::Identity(3, 3)}};
  Vector y = Vector::LinSpaced(3, -1, 2);
  CHECK((build_whitener(id).forward(y) - y).norm() < 1e-15);
}

TEST_CASE("whitener consistency on explicit forms") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 10; ++t) {
    const Eigen::Index d = 4 + 6 * t;
    const Matrix sigma = testing::random_spd(d, rng);
    BlockPosterior dense{testing::normal_vector(d, rng), DenseCov{sigma}};
    const Whitener w = build_whitener(dense);
    const Matrix s = w.sqrt_matrix();
    CHECK(testing::rel_frobenius(s * s.transpose(), sigma) < 1e-10);
    const Vector x = testing::normal_vector(d, rng);
    CHECK((w.inverse(w.forward(x)) - x).norm() <= 1e-8 * x.norm());

    Matrix u(d, 3);
    for (Eigen::Index j = 0; j < 3; ++j) u.col(j) = testing::normal_vector(d, rng);
    const Vector v = Vector::LinSpaced(d, 0.1, 2.0);
    BlockPosterior lr{Vector::Zero(d), LowRankDiagCov{u, v}};
    const Matrix sl = build_whitener(lr).sqrt_matrix();
    CHECK(testing::rel_frobenius(sl * sl.transpose(), lr.dense_covariance()) < 1e-10);
    CHECK(lr.saliency() == doctest::Approx(lr.dense_covariance().inverse().trace() / double(d)).epsilon(1e-8));
    BlockPosterior neg{Vector::Zero(d), LowRankDiagCov{0.2 * u / std::sqrt(double(d)), v, -1.0}};
    const Matrix sn = build_whitener(neg).sqrt_matrix();
    CHECK(testing::rel_frobenius(sn * sn.transpose(), neg.dense_covariance()) < 1e-10);
    CHECK(neg.saliency() == doctest::Approx(neg.dense_covariance().inverse().trace() / double(d)).epsilon(1e-8));
    CHECK(neg.trace() == doctest::Approx(neg.dense_covariance().trace()).epsilon(1e-12));
  }
}

TEST_CASE("pca fallback whitens samples") {
  std::mt19937_64 rng(12);
  const Matrix sigma = testing::random_spd(4, rng);
  const Matrix l = sigma.llt().matrixL();
  Matrix x(100000, 4);
  for (Eigen::Index r = 0; r < x.rows(); ++r) x.row(r) = (l * testing::normal_vector(4, rng)).transpose();
  BlockPosterior broken{Vector::Zero(4), DiagonalCov{Vector::Constant(4, -1.0)}};
  CHECK_THROWS_AS(build_whitener(broken), InvalidArgument);
  const Whitener w = build_whitener(broken, x);
  CHECK(w.kind() == Whitener::Kind::PcaFallback);
  Matrix z(x.rows(), 4);
  for (Eigen::Index r = 0; r < x.rows(); ++r) z.row(r) = w.forward(x.row(r).transpose()).transpose();
  CHECK((empirical_cov(z) - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("posterior samples match mean and covariance") {
  std::mt19937_64 rng(13);
  const Matrix sigma = testing::random_spd(3, rng);
  BlockPosterior p{Vector::LinSpaced(3, -1, 1), DenseCov{sigma}};
  const Whitener w = build_whitener(p);
  const int n = 100000;
  Matrix x(n, 3);
  std::mt19937_64 draw(14);
  for (int r = 0; r < n; ++r) x.row(r) = w.sample(draw).transpose();
  const Vector mean = x.colwise().mean();
  for (int i = 0; i < 3; ++i) CHECK(std::abs(mean[i] - p.mu[i]) < 4 * std::sqrt(sigma(i, i) / n));
  const Matrix c = empirical_cov(x);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double se = std::sqrt((sigma(i, i) * sigma(j, j) + sigma(i, j) * sigma(i, j)) / n);
      CHECK(std::abs(c(i, j) - sigma(i, j)) < 4 * se);
    }
}

TEST_CASE("restricted oracle is the principal sub-block") {
  std::mt19937_64 rng(15);
  const Matrix h = testing::random_spd(9, rng);
  auto r = restrict_oracle(explicit_oracle(h), 3, 4);
  const Vector v = testing::normal_vector(4, rng);
  CHECK((r(v) - h.block(3, 3, 4, 4) * v).norm() < 1e-13);
  CHECK_THROWS_AS(restrict_oracle(explicit_oracle(h), 7, 4), InvalidArgument);
}

#include "bayesq/posterior.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <string>

#include "bayesq/error.hpp"

namespace bayesq {

namespace {

Vector to_double(const Eigen::VectorXf& v) { return v.cast<double>(); }

Matrix lower_inverse_transpose(const Matrix& l) {
  // L^-T
  Matrix inv = Matrix::Identity(l.rows(), l.cols());
  l.triangularView<Eigen::Lower>().solveInPlace(inv);
  return inv.transpose();
}

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

Vector standard_normal(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vector z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = nd(rng);
  return z;
}

Matrix orthonormalize(const Matrix& y) {
  Eigen::HouseholderQR<Matrix> qr(y);
  return qr.householderQ() * Matrix::Identity(y.rows(), y.cols());
}

}  // namespace

Vector CurvatureOracle::operator()(const Vector& v) const {
  if (v.size() != dim) throw InvalidArgument("curvature oracle: input dimension mismatch");
  Vector out = apply(v);
  if (out.size() != dim) throw InvalidArgument("curvature oracle: output dimension mismatch");
  return out;
}

CurvatureOracle explicit_oracle(Matrix h, CurvatureKind kind) {
  if (h.rows() != h.cols()) throw InvalidArgument("explicit_oracle: matrix must be square");
  const Eigen::Index d = h.rows();
  return {[h = std::move(h)](const Vector& v) -> Vector { return h * v; }, d, kind};
}

CurvatureOracle diagonal_oracle(Vector h, CurvatureKind kind) {
  const Eigen::Index d = h.size();
  return {[h = std::move(h)](const Vector& v) -> Vector { return h.cwiseProduct(v); }, d, kind};
}

CurvatureOracle restrict_oracle(CurvatureOracle parent, Eigen::Index offset, Eigen::Index length) {
  if (offset < 0 || length < 1 || offset + length > parent.dim)
    throw InvalidArgument("restrict_oracle: range outside parent");
  const CurvatureKind kind = parent.kind;
  return {[parent = std::move(parent), offset, length](const Vector& v) -> Vector {
            Vector full = Vector::Zero(parent.dim);
            full.segment(offset, length) = v;
            return parent(full).segment(offset, length);
          },
          length, kind};
}

Matrix KroneckerCov::a_inv_sqrt() const { return lower_inverse_transpose(a_chol); }
Matrix KroneckerCov::g_inv_sqrt() const { return lower_inverse_transpose(g_chol); }

double BlockPosterior::trace() const {
  struct {
    double operator()(const DiagonalCov& c) const { return c.variances.sum(); }
    double operator()(const KroneckerCov& c) const {
      return c.a_inv_sqrt().squaredNorm() * c.g_inv_sqrt().squaredNorm();
    }
    double operator()(const LowRankDiagCov& c) const { return c.v.sum() + c.sign * c.u.squaredNorm(); }
    double operator()(const DenseCov& c) const { return c.sigma.trace(); }
  } visitor;
  return std::visit(visitor, cov);
}

Vector BlockPosterior::marginal_variances() const {
  struct {
    Vector operator()(const DiagonalCov& c) const { return c.variances; }
    Vector operator()(const KroneckerCov& c) const {
      const Vector a = c.a_inv_sqrt().rowwise().squaredNorm();
      const Vector g = c.g_inv_sqrt().rowwise().squaredNorm();
      Vector out(c.rows * c.cols);
      for (Eigen::Index r = 0; r < c.rows; ++r) out.segment(r * c.cols, c.cols) = g[r] * a;
      return out;
    }
    Vector operator()(const LowRankDiagCov& c) const {
      return c.v + c.sign * c.u.rowwise().squaredNorm();
    }
    Vector operator()(const DenseCov& c) const { return c.sigma.diagonal(); }
  } visitor;
  return std::visit(visitor, cov);
}

double BlockPosterior::saliency() const {
  const double d = static_cast<double>(dim());
  struct {
    double operator()(const DiagonalCov& c) const { return c.variances.cwiseInverse().sum(); }
    double operator()(const KroneckerCov& c) const {
      return c.a_chol.squaredNorm() * c.g_chol.squaredNorm();
    }
    double operator()(const LowRankDiagCov& c) const {
      // Woodbury: tr(S^-1) = tr(D^-1) - tr((s I + U^T D^-1 U)^-1 U^T D^-2 U)
      const Vector dinv = c.v.cwiseInverse();
      if (c.u.cols() == 0) return dinv.sum();
      const Matrix du = dinv.asDiagonal() * c.u;
      Matrix core = c.sign * Matrix::Identity(c.u.cols(), c.u.cols()) + c.u.transpose() * du;
      const Matrix rhs = du.transpose() * du;
      return dinv.sum() - Eigen::LDLT<Matrix>(core).solve(rhs).trace();
    }
    double operator()(const DenseCov& c) const {
      return Eigen::LDLT<Matrix>(c.sigma).solve(Matrix::Identity(c.sigma.rows(), c.sigma.cols())).trace();
    }
  } visitor;
  return std::visit(visitor, cov) / d;
}

Matrix BlockPosterior::dense_covariance() const {
  if (dim() > kDenseCovarianceLimit) throw InvalidArgument("dense_covariance: block too large");
  struct {
    Matrix operator()(const DiagonalCov& c) const { return c.variances.asDiagonal(); }
    Matrix operator()(const KroneckerCov& c) const {
      const Matrix ai = c.a_inv_sqrt();
      const Matrix gi = c.g_inv_sqrt();
      return kron(gi * gi.transpose(), ai * ai.transpose());
    }
    Matrix operator()(const LowRankDiagCov& c) const {
      Matrix s = c.sign * c.u * c.u.transpose();
      s.diagonal() += c.v;
      return s;
    }
    Matrix operator()(const DenseCov& c) const { return c.sigma; }
  } visitor;
  return std::visit(visitor, cov);
}

void BlockPosterior::validate() const {
  if (!mu.allFinite()) throw InvalidArgument("posterior: non-finite mean");
  const Eigen::Index d = dim();
  if (const auto* c = std::get_if<DiagonalCov>(&cov)) {
    if (c->variances.size() != d) throw InvalidArgument("posterior: variance length mismatch");
    if (!c->variances.allFinite() || (c->variances.array() <= 0).any())
      throw InvalidArgument("posterior: variances must be positive");
  } else if (const auto* k = std::get_if<KroneckerCov>(&cov)) {
    if (k->rows * k->cols != d || k->a_chol.rows() != k->cols || k->g_chol.rows() != k->rows)
      throw InvalidArgument("posterior: Kronecker factor shape mismatch");
    if ((k->a_chol.diagonal().array() <= 0).any() || (k->g_chol.diagonal().array() <= 0).any())
      throw InvalidArgument("posterior: Kronecker factors must be positive definite");
  } else if (const auto* l = std::get_if<LowRankDiagCov>(&cov)) {
    if (l->v.size() != d || l->u.rows() != d) throw InvalidArgument("posterior: low-rank shape mismatch");
    if (!l->v.allFinite() || (l->v.array() <= 0).any())
      throw InvalidArgument("posterior: low-rank diagonal must be positive");
    if (l->sign != 1.0 && l->sign != -1.0) throw InvalidArgument("posterior: low-rank sign must be +1 or -1");
  } else if (const auto* s = std::get_if<DenseCov>(&cov)) {
    if (s->sigma.rows() != d || s->sigma.cols() != d) throw InvalidArgument("posterior: covariance shape mismatch");
  }
}

Vector hutchinson_diag(const CurvatureOracle& oracle, Eigen::Index d, int probes, std::uint64_t seed) {
  if (probes < 1) throw InvalidArgument("hutchinson_diag: probe count must be >= 1");
  if (d != oracle.dim) throw InvalidArgument("hutchinson_diag: dimension mismatch");
  std::mt19937_64 rng(seed);
  Vector acc = Vector::Zero(d);
  Vector v(d);
  for (int m = 0; m < probes; ++m) {
    for (Eigen::Index i = 0; i < d; ++i) v[i] = (rng() >> 63) ? 1.0 : -1.0;
    acc += v.cwiseProduct(oracle(v));
  }
  return acc / static_cast<double>(probes);
}

double effective_damping(const Vector& hdiag, const DiagLaplaceOptions& opt) {
  double lambda = opt.damping;
  if (opt.rule == DampingRule::MedianHeuristic && hdiag.size() > 0) {
    std::vector<double> h(hdiag.data(), hdiag.data() + hdiag.size());
    const auto mid = h.begin() + static_cast<std::ptrdiff_t>(h.size() / 2);
    std::nth_element(h.begin(), mid, h.end());
    double med = *mid;
    if (h.size() % 2 == 0) med = 0.5 * (med + *std::max_element(h.begin(), mid));
    lambda = std::max(1e-3, 0.01 * med);
  }
  if (opt.small_calib) lambda *= 5.0;
  return lambda;
}

BlockPosterior fit_diag_laplace(const WeightBlock& block, const CurvatureOracle& oracle,
                                const DiagLaplaceOptions& opt) {
  if (!(opt.damping > 0)) throw InvalidArgument("fit_diag_laplace: damping must be > 0");
  const Eigen::Index d = block.size();
  const Vector h = hutchinson_diag(oracle, d, opt.probes, opt.seed);
  const double lambda = effective_damping(h, opt);
  Vector var(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double damped = std::max(std::max(h[i], 0.0) + lambda, kCurvatureClamp);
    var[i] = std::max(1.0 / damped, kVarianceFloor);
  }
  BlockPosterior post;
  post.mu = to_double(block.values);
  post.cov = DiagonalCov{std::move(var)};
  post.damping = lambda;
  post.probes = opt.probes;
  post.seed = opt.seed;
  return post;
}

BlockPosterior fit_kfac(const WeightBlock& block, const std::vector<KfacBatch>& batches,
                        const KfacOptions& opt) {
  if (block.kind == BlockKind::GenericVector) throw InvalidArgument("fit_kfac: block " + block.id + " has no matrix shape");
  if (batches.empty()) throw InvalidArgument("fit_kfac: at least one batch required");
  if (!(opt.beta > 0 && opt.beta <= 1)) throw InvalidArgument("fit_kfac: beta must lie in (0, 1]");
  if (opt.damping < 0) throw InvalidArgument("fit_kfac: damping must be >= 0");
  const Eigen::Index o = block.channels();
  const Eigen::Index in = block.channel_size();
  Matrix a, g;
  for (std::size_t t = 0; t < batches.size(); ++t) {
    const auto& b = batches[t];
    if (b.inputs.cols() != in || b.gradients.cols() != o || b.inputs.rows() != b.gradients.rows() ||
        b.inputs.rows() == 0)
      throw InvalidArgument("fit_kfac: batch shape mismatch for block " + block.id);
    const double n = static_cast<double>(b.inputs.rows());
    const Matrix ab = b.inputs.transpose() * b.inputs / n;
    const Matrix gb = b.gradients.transpose() * b.gradients / n;
    if (t == 0) {
      a = ab;
      g = gb;
    } else {
      a = (1.0 - opt.beta) * a + opt.beta * ab;
      g = (1.0 - opt.beta) * g + opt.beta * gb;
    }
  }
  const double s = std::sqrt(opt.damping);
  a.diagonal().array() += s;
  g.diagonal().array() += s;
  Eigen::LLT<Matrix> la(a), lg(g);
  if (la.info() != Eigen::Success || lg.info() != Eigen::Success)
    throw NumericalError("fit_kfac: Cholesky failed for block " + block.id + " (damping too small)");
  KroneckerCov cov;
  cov.rows = o;
  cov.cols = in;
  cov.a_chol = la.matrixL();
  cov.g_chol = lg.matrixL();
  BlockPosterior post;
  post.mu = to_double(block.values);
  post.cov = std::move(cov);
  post.damping = opt.damping;
  return post;
}

BlockPosterior fit_lowrank_diag(const WeightBlock& block, const CurvatureOracle& oracle,
                                const LowRankOptions& opt) {
  const Eigen::Index d = block.size();
  if (opt.rank < 0 || opt.rank > d) throw InvalidArgument("fit_lowrank_diag: rank outside [0, d]");
  BlockPosterior diag = fit_diag_laplace(block, oracle, opt.diag);
  if (opt.rank == 0) return diag;
  const double lambda = diag.damping;

  // top-r curvature by randomized subspace iteration
  auto apply = [&](const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) out.col(j) = oracle(Vector(x.col(j)));
    return out;
  };
  std::mt19937_64 rng(opt.diag.seed ^ 0x9e3779b97f4a7c15ULL);
  const Eigen::Index k = std::min(d, opt.rank + opt.oversampling);
  Matrix omega(d, k);
  for (Eigen::Index j = 0; j < k; ++j) omega.col(j) = standard_normal(d, rng);
  Matrix q = orthonormalize(apply(omega));
  for (int it = 0; it < opt.power_iterations; ++it) q = orthonormalize(apply(q));
  Matrix t = q.transpose() * apply(q);
  t = 0.5 * (t + t.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(t);
  const Matrix v = q * es.eigenvectors().rightCols(opt.rank);
  const Vector theta = es.eigenvalues().tail(opt.rank);

  // residual diagonal from the deflated operator, same probes
  CurvatureOracle deflated{[&](const Vector& x) -> Vector { return oracle(x) - v * theta.cwiseProduct(v.transpose() * x); },
                           d, oracle.kind};
  const Vector hres = hutchinson_diag(deflated, d, opt.diag.probes, opt.diag.seed);
  Vector dinv(d);
  for (Eigen::Index i = 0; i < d; ++i) dinv[i] = 1.0 / std::max(std::max(hres[i], 0.0) + lambda, kCurvatureClamp);

  // (D + V Theta V^T)^-1 = D^-1 - D^-1 V T^1/2 (I + T^1/2 V^T D^-1 V T^1/2)^-1 T^1/2 V^T D^-1
  const Matrix vt = v * theta.cwiseMax(0.0).cwiseSqrt().asDiagonal();
  Matrix core = Matrix::Identity(opt.rank, opt.rank) + vt.transpose() * dinv.asDiagonal() * vt;
  Eigen::LLT<Matrix> llt(0.5 * (core + core.transpose()));
  Matrix u = (dinv.asDiagonal() * vt).transpose();
  llt.matrixL().solveInPlace(u);

  BlockPosterior post;
  post.mu = std::move(diag.mu);
  post.cov = LowRankDiagCov{u.transpose(), dinv.cwiseMax(kVarianceFloor), -1.0};
  post.damping = lambda;
  post.probes = diag.probes;
  post.seed = diag.seed;
  return post;
}

// Whitener

Vector Whitener::forward(const Vector& w) const {
  if (w.size() != dim()) throw InvalidArgument("whitener: dimension mismatch");
  const Vector c = w - mean_;
  struct {
    const Vector& c;
    Vector operator()(const DiagonalRep& r) const { return c.cwiseQuotient(r.sigma); }
    Vector operator()(const KroneckerRep& r) const {
      // Z = L_G^T mat(w - mu) L_A
      const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
          c.data(), r.rows, r.cols);
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> z =
          r.lg.transpose() * m * r.la;
      return Eigen::Map<const Vector>(z.data(), z.size());
    }
    Vector operator()(const DenseRep& r) const { return r.s_inv * c; }
    Vector operator()(const LowRankRep& r) const {
      const Vector y = c.cwiseQuotient(r.sqrt_v);
      return y + r.q * r.fwd_coef.cwiseProduct(r.q.transpose() * y);
    }
  } visitor{c};
  return std::visit(visitor, rep_);
}

Vector Whitener::apply_sqrt(const Vector& z) const {
  if (z.size() != dim()) throw InvalidArgument("whitener: dimension mismatch");
  struct {
    const Vector& z;
    Vector operator()(const DiagonalRep& r) const { return z.cwiseProduct(r.sigma); }
    Vector operator()(const KroneckerRep& r) const {
      // W = L_G^-T Z L_A^-1
      using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
      const Eigen::Map<const RowMat> zm(z.data(), r.rows, r.cols);
      RowMat w = zm;
      r.lg.transpose().triangularView<Eigen::Upper>().solveInPlace(w);
      RowMat wt = w.transpose();
      r.la.transpose().triangularView<Eigen::Upper>().solveInPlace(wt);
      w = wt.transpose();
      return Eigen::Map<const Vector>(w.data(), w.size());
    }
    Vector operator()(const DenseRep& r) const { return r.s * z; }
    Vector operator()(const LowRankRep& r) const {
      const Vector y = z + r.q * r.inv_coef.cwiseProduct(r.q.transpose() * z);
      return y.cwiseProduct(r.sqrt_v);
    }
  } visitor{z};
  return std::visit(visitor, rep_);
}

Vector Whitener::inverse(const Vector& z) const { return mean_ + apply_sqrt(z); }

Matrix Whitener::sqrt_matrix() const {
  const Eigen::Index d = dim();
  if (d > kDenseCovarianceLimit) throw InvalidArgument("sqrt_matrix: block too large");
  Matrix s(d, d);
  Vector e = Vector::Zero(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    e[j] = 1.0;
    s.col(j) = apply_sqrt(e);
    e[j] = 0.0;
  }
  return s;
}

const Vector* Whitener::diagonal_scales() const {
  if (const auto* r = std::get_if<DiagonalRep>(&rep_)) return &r->sigma;
  return nullptr;
}

Vector Whitener::sample(std::mt19937_64& rng) const { return inverse(standard_normal(dim(), rng)); }

Whitener Whitener::diagonal(Vector mean, Vector sigma) {
  if (mean.size() != sigma.size()) throw InvalidArgument("diagonal whitener: size mismatch");
  if (!sigma.allFinite() || (sigma.array() <= 0).any())
    throw NumericalError("diagonal whitener: scales must be positive");
  Whitener w;
  w.kind_ = Kind::Diagonal;
  w.mean_ = std::move(mean);
  w.rep_ = DiagonalRep{std::move(sigma)};
  return w;
}

Whitener Whitener::kronecker(Vector mean, const KroneckerCov& cov) {
  if (mean.size() != cov.rows * cov.cols) throw InvalidArgument("kronecker whitener: size mismatch");
  Whitener w;
  w.kind_ = Kind::Cholesky;
  w.mean_ = std::move(mean);
  w.rep_ = KroneckerRep{cov.rows, cov.cols, cov.a_chol, cov.g_chol};
  return w;
}

Whitener Whitener::dense(Vector mean, const Matrix& sigma, double clip, Kind kind) {
  const Eigen::Index d = sigma.rows();
  if (sigma.cols() != d || mean.size() != d) throw InvalidArgument("dense whitener: size mismatch");
  if (!sigma.allFinite()) throw NumericalError("dense whitener: non-finite covariance");
  DenseRep rep;
  if (kind == Kind::Cholesky) {
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success) throw NumericalError("dense whitener: Cholesky failed");
    rep.s = llt.matrixL();
    rep.s_inv = Matrix::Identity(d, d);
    llt.matrixL().solveInPlace(rep.s_inv);
  } else {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (sigma + sigma.transpose()));
    if (es.info() != Eigen::Success) throw NumericalError("dense whitener: eigendecomposition failed");
    const Vector lam = es.eigenvalues().cwiseMax(clip);
    const Matrix& u = es.eigenvectors();
    rep.s = u * lam.cwiseSqrt().asDiagonal() * u.transpose();
    rep.s_inv = u * lam.cwiseSqrt().cwiseInverse().asDiagonal() * u.transpose();
  }
  Whitener w;
  w.kind_ = kind;
  w.mean_ = std::move(mean);
  w.clip_ = clip;
  w.rep_ = std::move(rep);
  return w;
}

Whitener Whitener::lowrank(Vector mean, const LowRankDiagCov& cov, double clip) {
  const Eigen::Index d = cov.v.size();
  if (mean.size() != d || cov.u.rows() != d) throw InvalidArgument("low-rank whitener: size mismatch");
  if (!cov.v.allFinite() || !cov.u.allFinite()) throw NumericalError("low-rank whitener: non-finite covariance");
  LowRankRep rep;
  rep.sqrt_v = cov.v.cwiseMax(clip).cwiseSqrt();
  if (cov.u.cols() > 0) {
    const Matrix wu = rep.sqrt_v.cwiseInverse().asDiagonal() * cov.u;
    Eigen::JacobiSVD<Matrix> svd(wu, Eigen::ComputeThinU);
    rep.q = svd.matrixU();
    const Vector e = (cov.sign * svd.singularValues().cwiseAbs2().array()).max(clip - 1.0).matrix();
    rep.fwd_coef = (1.0 + e.array()).rsqrt() - 1.0;
    rep.inv_coef = (1.0 + e.array()).sqrt() - 1.0;
  } else {
    rep.q = Matrix(d, 0);
    rep.fwd_coef = Vector(0);
    rep.inv_coef = Vector(0);
  }
  Whitener w;
  w.kind_ = Kind::Eigen;
  w.mean_ = std::move(mean);
  w.clip_ = clip;
  w.rep_ = std::move(rep);
  return w;
}

Whitener pca_whitener(const Vector& mean, const Matrix& samples, double clip) {
  if (samples.cols() != mean.size() || samples.rows() < 2)
    throw InvalidArgument("pca_whitener: need at least two samples of matching dimension");
  const Eigen::RowVectorXd m = samples.colwise().mean();
  const Matrix c = samples.rowwise() - m;
  const Matrix cov = c.transpose() * c / static_cast<double>(samples.rows() - 1);
  return Whitener::dense(mean, cov, clip, Whitener::Kind::PcaFallback);
}

Whitener build_whitener(const BlockPosterior& post, const std::optional<Matrix>& fallback_samples) {
  try {
    post.validate();
    struct {
      const Vector& mu;
      Whitener operator()(const DiagonalCov& c) const { return Whitener::diagonal(mu, c.variances.cwiseSqrt()); }
      Whitener operator()(const KroneckerCov& c) const { return Whitener::kronecker(mu, c); }
      Whitener operator()(const LowRankDiagCov& c) const { return Whitener::lowrank(mu, c, kSpectrumClip); }
      Whitener operator()(const DenseCov& c) const { return Whitener::dense(mu, c.sigma, kSpectrumClip); }
    } visitor{post.mu};
    return std::visit(visitor, post.cov);
  } catch (const Error& e) {
    if (!fallback_samples) throw InvalidArgument(std::string("build_whitener: no valid route: ") + e.what());
    return pca_whitener(post.mu, *fallback_samples);
  }
}

}  // namespace bayesq

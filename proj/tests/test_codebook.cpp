#include <doctest.h>

#include <random>

#include "bayesq/codebook.hpp"
#include "bayesq/error.hpp"
#include "support.hpp"

using namespace bayesq;

namespace {

// defining integral of the clip-to-range form, by quadrature
double quad_expected(int m, double alpha) {
  const double delta = 2 * alpha / double(1 << m);
  double s = 0;
  for (int k = 0; k < (1 << m); ++k) {
    const double lo = -alpha + k * delta, c = lo + 0.5 * delta;
    s += testing::integrate([c](double z) { return (z - c) * (z - c) * testing::phi(z); }, lo, lo + delta);
  }
  return s + 2 * testing::integrate_right([alpha](double z) { return (z - alpha) * (z - alpha) * testing::phi(z); }, alpha);
}

Whitener identity(Eigen::Index d) { return Whitener::diagonal(Vector::Zero(d), Vector::Ones(d)); }

}  // namespace

TEST_CASE("uniform codebook layout") {
  auto cb = UniformCodebook::make(3, 2.0);
  CHECK(cb.delta == 0.5);
  CHECK(cb.levels() == 8);
  CHECK(cb.codepoint(0) == -1.75);
  CHECK(cb.codepoint(7) == 1.75);
  CHECK(cb.zero_point() == 4);
  CHECK(cb.index(-5.0) == 0);
  CHECK(cb.index(5.0) == 7);
  CHECK(cb.index(0.0) == 3);   // boundary goes low
  CHECK(cb.index(0.5) == 4);   // boundary goes low
  CHECK(cb.index(0.51) == 5);
  CHECK_THROWS_AS(UniformCodebook::make(0, 1.0), InvalidArgument);
  CHECK_THROWS_AS(UniformCodebook::make(2, 0.0), InvalidArgument);
}

TEST_CASE("expected mse matches quadrature") {
  for (int m : {1, 2, 5})
    for (double a : {0.7, 2.0, 3.3}) CHECK(std::abs(expected_mse_uniform(m, a) - quad_expected(m, a)) < 1e-10);
}

TEST_CASE("expected mse high resolution regime") {
  const double hr = high_resolution_mse(16, 4.0);
  CHECK(std::abs(expected_mse_uniform(16, 4.0) - hr) < 0.01 * hr);
}

TEST_CASE("expected mse small range limit") {
  CHECK(expected_mse_uniform(2, 1e-4) == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(saturating_mse_uniform(2, 1e-4) == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("mse forms against sampling") {
  const int m = 2;
  const double alpha = 2.5;
  const auto cb = UniformCodebook::make(m, alpha);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g;
  const int n = 1000000;
  double s_sat = 0, s2_sat = 0, s_clip = 0, s2_clip = 0;
  for (int i = 0; i < n; ++i) {
    const double z = g(rng);
    const double e = z - cb.codepoint(cb.index(z));
    s_sat += e * e;
    s2_sat += e * e * e * e;
    const double ec = std::abs(z) > alpha ? std::abs(z) - alpha : e;
    s_clip += ec * ec;
    s2_clip += ec * ec * ec * ec;
  }
  auto check = [n](double s, double s2, double exact) {
    const double mean = s / n;
    const double se = std::sqrt((s2 / n - mean * mean) / n);
    CHECK(std::abs(mean - exact) < 3 * se);
  };
  check(s_sat, s2_sat, saturating_mse_uniform(m, alpha));
  check(s_clip, s2_clip, expected_mse_uniform(m, alpha));
}

TEST_CASE("range search") {
  const auto r = optimize_range(2);
  double best = 0, bl = 1e300;
  for (int i = 0; i < 2000; ++i) {
    const double a = 1.5 + 3.0 * i / 1999.0;
    const double l = expected_mse_uniform(2, a);
    if (l < bl) bl = l, best = a;
  }
  CHECK(std::abs(r.alpha - best) < 0.01);
  CHECK(r.evaluations <= 20);
  CHECK(optimize_range(4).loss < optimize_range(3).loss);
  CHECK(optimize_range(3).loss < r.loss);

  for (int m : {2, 3, 4}) {
    int minima = 0;
    std::vector<double> l;
    for (int i = 0; i <= 300; ++i) l.push_back(expected_mse_uniform(m, 1.5 + 0.01 * i));
    for (std::size_t i = 1; i + 1 < l.size(); ++i) minima += l[i] < l[i - 1] && l[i] < l[i + 1];
    CHECK(minima <= 1);
  }
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(1.5, 4.5);
  for (int m : {2, 3, 4, 8}) {
    const auto rr = optimize_range(m);
    for (int t = 0; t < 50; ++t) CHECK(rr.loss <= expected_mse_uniform(m, u(rng)) + 1e-9);
  }
  const auto sat = optimize_range(3, {1.5, 4.5}, RangeObjective::Saturating);
  CHECK(sat.loss == doctest::Approx(saturating_mse_uniform(3, sat.alpha)));
}

TEST_CASE("scalar lloyd fixed points") {
  LloydOptions opt;
  opt.tol = 1e-15;
  opt.max_iter = 2000;
  auto k2 = lloyd_scalar(2, opt);
  CHECK(std::abs(k2.codepoints(1, 0) - std::sqrt(2 / M_PI)) < 1e-6);
  CHECK(std::abs(k2.codepoints(0, 0) + std::sqrt(2 / M_PI)) < 1e-6);
  auto k4 = lloyd_scalar(4, opt);
  CHECK(std::abs(k4.codepoints(3, 0) - 1.5104) < 1e-4);
  CHECK(std::abs(k4.codepoints(2, 0) - 0.4528) < 1e-4);
  CHECK(std::abs(k4.codepoints(1, 0) + 0.4528) < 1e-4);
  CHECK(k4.boundaries[1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("scalar lloyd objective never increases") {
  for (std::int64_t k : {2, 3, 4, 8, 16, 33, 64})
    for (auto init : {LloydInit::UniformCodepoints, LloydInit::KMeansPP})
      for (std::uint64_t seed : {0, 1, 2}) {
        auto cb = lloyd_scalar(k, {init, seed, 1e-6, 50});
        for (std::size_t i = 1; i < cb.objective.size(); ++i) CHECK(cb.objective[i] <= cb.objective[i - 1]);
        CHECK(cb.objective.back() == doctest::Approx(scalar_codebook_mse(cb.codepoints.col(0))));
        for (Eigen::Index b = 0; b < cb.boundaries.size(); ++b)
          CHECK(cb.boundaries[b] == 0.5 * (cb.codepoints(b, 0) + cb.codepoints(b + 1, 0)));
      }
}

TEST_CASE("lloyd beats optimized uniform") {
  for (int m : {1, 2, 3, 4}) {
    auto cb = lloyd_scalar(std::int64_t{1} << m, {LloydInit::UniformCodepoints, 0, 1e-8, 200});
    CHECK(cb.objective.back() <= optimize_range(m, {1.0, 4.5}, RangeObjective::Saturating).loss + 1e-12);
  }
  CHECK_THROWS_AS(lloyd_scalar(1), InvalidArgument);
}

TEST_CASE("vector lloyd") {
  const auto pool = standard_normal_pool(100000, 2, 4);
  auto one = lloyd_vector(2, 1, pool);
  CHECK(one.codepoints.norm() < 0.02);

  auto vq = lloyd_vector(2, 4, pool, {LloydInit::KMeansPP, 1, 1e-6, 50});
  for (std::size_t i = 1; i < vq.objective.size(); ++i) CHECK(vq.objective[i] <= vq.objective[i - 1]);
  const double product = 2 * (1 - 2 / M_PI);  // two independent K=2 scalars, per pair
  CHECK(std::abs(vq.objective.back() - product) < 0.05 * product);

  Eigen::MatrixXd same = Eigen::MatrixXd::Constant(10, 2, 0.75);
  auto dup = lloyd_vector(2, 3, same);
  CHECK((dup.codepoints.array() == 0.75).all());
  CHECK(dup.nearest(Eigen::Vector2d(0.75, 0.75)) == 0);
  CHECK_THROWS_AS(lloyd_vector(2, 11, same), InvalidArgument);
}

TEST_CASE("quantize block geometry") {
  const auto cb = UniformCodebook::make(8, 4.0);
  Vector w = Vector::LinSpaced(1001, -4, 4);
  auto q = quantize_vector(w, identity(w.size()), cb);
  CHECK((w - q.reconstruction).cwiseAbs().maxCoeff() <= cb.delta / 2 + 1e-15);

  Vector pre(8);
  for (int k = 0; k < 8; ++k) pre[k] = UniformCodebook::make(3, 2.0).codepoint(k);
  auto exact = quantize_vector(pre, identity(8), UniformCodebook::make(3, 2.0));
  CHECK((exact.reconstruction - pre).norm() == 0.0);

  auto lc = lloyd_scalar(4);
  Vector mid(1);
  mid << lc.boundaries[2];
  CHECK(quantize_vector(mid, identity(1), lc).indices[0] == 2);
}

TEST_CASE("quantize with a correlated whitener") {
  std::mt19937_64 rng(6);
  const Matrix sigma = testing::random_spd(6, rng);
  BlockPosterior p{testing::normal_vector(6, rng), DenseCov{sigma}};
  const Whitener w = build_whitener(p);
  const auto cb = UniformCodebook::make(4, 3.0);
  const Vector x = w.sample(rng);
  auto q = quantize_vector(x, w, cb);
  Vector zq(6);
  for (int i = 0; i < 6; ++i) zq[i] = cb.codepoint(q.indices[i]);
  CHECK((q.reconstruction - w.inverse(zq)).norm() < 1e-12);
  auto again = quantize_vector(q.reconstruction, w, cb);
  CHECK(again.indices == q.indices);
}

TEST_CASE("quantize is idempotent") {
  std::mt19937_64 rng(7);
  const Vector w = testing::normal_vector(300, rng);
  const Whitener wh = Whitener::diagonal(Vector::Zero(300), Vector::Constant(300, 0.8));
  for (Codebook cb : {Codebook{UniformCodebook::make(3, 2.5)}, Codebook{lloyd_scalar(8)}}) {
    auto q = quantize_vector(w, wh, cb);
    CHECK(quantize_vector(q.reconstruction, wh, cb).indices == q.indices);
  }
  auto vq = lloyd_vector(2, 16, standard_normal_pool(4000, 2, 1));
  auto q = quantize_vector(w, wh, vq);
  CHECK(q.indices.size() == 150);
  CHECK(quantize_vector(q.reconstruction, wh, vq).indices == q.indices);
}

TEST_CASE("kurtosis flag") {
  Vector w = Vector::Zero(100);
  w[0] = 10;
  auto q = quantize_vector(w, identity(100), UniformCodebook::make(2, 2));
  CHECK(q.kurtosis > kOutlierKurtosis);
  CHECK(q.outlier);
  std::mt19937_64 rng(8);
  CHECK(kurtosis(testing::normal_vector(200000, rng)) == doctest::Approx(3.0).epsilon(0.02));
}

TEST_CASE("uniform export is exact") {
  std::mt19937_64 rng(9);
  const Vector w = testing::normal_vector(200, rng);
  Vector sigma(200);
  for (int g = 0; g < 4; ++g) sigma.segment(g * 50, 50).setConstant(0.5 + g);
  const Whitener wh = Whitener::diagonal(Vector::Zero(200), sigma);
  const auto cb = UniformCodebook::make(3, 2.2);
  auto q = quantize_vector(w, wh, cb);
  auto groups = compile_to_affine(cb, q.indices, w, wh, 50);
  REQUIRE(groups.size() == 4);
  CHECK(groups[2].scale == 2.5 * cb.delta);
  CHECK(groups[0].integer_zero_point() == cb.zero_point());
  CHECK(dequantize(groups, q.indices, 200, 50) == q.reconstruction);
}

TEST_CASE("lut export is exact and least squares is not better") {
  std::mt19937_64 rng(10);
  const Vector w = testing::normal_vector(256, rng) * 0.3;
  const Whitener wh = Whitener::diagonal(Vector::Zero(256), Vector::Constant(256, 0.3));
  auto cb = lloyd_scalar(4);
  auto q = quantize_vector(w, wh, cb);
  auto lut = compile_to_affine(cb, q.indices, w, wh, 64, ExportMode::Lut);
  auto ls = compile_to_affine(cb, q.indices, w, wh, 64, ExportMode::LeastSquares);
  const Vector dl = dequantize(lut, q.indices, 256, 64);
  const Vector da = dequantize(ls, q.indices, 256, 64);
  CHECK((dl - q.reconstruction).norm() < 1e-15);
  CHECK((da - q.reconstruction).norm() > 0);
}

TEST_CASE("least squares affine matches the normal equations") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> qd(0, 7);
  std::vector<std::int64_t> q(40);
  Vector w(40);
  for (int i = 0; i < 40; ++i) {
    q[i] = qd(rng);
    w[i] = 0.3 * (q[i] - 3.2) + 0.01 * testing::normal_vector(1, rng)[0];
  }
  Eigen::MatrixXd a(40, 2);
  for (int i = 0; i < 40; ++i) a.row(i) << double(q[i]), 1.0;
  const Eigen::Vector2d sol = (a.transpose() * a).ldlt().solve(a.transpose() * w);
  double s = 0, z = 0;
  REQUIRE(fit_affine(q, w, s, z));
  CHECK(s == doctest::Approx(sol[0]).epsilon(1e-12));
  CHECK(-s * z == doctest::Approx(sol[1]).epsilon(1e-12));
  std::vector<std::int64_t> flat(5, 3);
  CHECK_FALSE(fit_affine(flat, Vector::Ones(5), s, z));
}

TEST_CASE("degenerate least squares group falls back to the lut") {
  const Vector w = Vector::Constant(8, 0.2);
  const Whitener wh = Whitener::diagonal(Vector::Zero(8), Vector::Constant(8, 0.25));
  auto cb = lloyd_scalar(4);
  auto q = quantize_vector(w, wh, cb);
  auto groups = compile_to_affine(cb, q.indices, w, wh, 8, ExportMode::LeastSquares);
  CHECK(groups[0].has_lut());
  CHECK((dequantize(groups, q.indices, 8, 8) - q.reconstruction).norm() < 1e-15);
}

TEST_CASE("designer strings and bits") {
  for (auto d : {Designer::Uniform, Designer::LloydScalar, Designer::LloydVector, Designer::None})
    CHECK(designer_from_string(to_string(d)) == d);
  CHECK(codebook_bits(UniformCodebook::make(3, 1)) == 3);
  CHECK(codebook_bits(lloyd_scalar(8)) == 3);
  CHECK(codebook_bits(lloyd_vector(2, 16, standard_normal_pool(100, 2, 0))) == 2);
}

#ifndef BAYESQ_TESTS_SUPPORT_HPP
#define BAYESQ_TESTS_SUPPORT_HPP

#include <Eigen/Dense>
#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <string>

#include "bayesq/model_store.hpp"

namespace testing {

inline double phi(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2 * M_PI); }

/// Adaptive Gauss-Kronrod on a finite interval.
template <class F>
double integrate(F f, double a, double b) {
  double err = 0;
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 15, 1e-14, &err);
}

/// Integral over [a, +inf).
template <class F>
double integrate_right(F f, double a) {
  boost::math::quadrature::exp_sinh<double> q;
  return q.integrate([&](double t) { return f(a + t); }, 0.0, std::numeric_limits<double>::infinity());
}

inline Eigen::MatrixXd random_spd(Eigen::Index n, std::mt19937_64& rng, double ridge = 0.5) {
  std::normal_distribution<double> g;
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
  return a * a.transpose() / static_cast<double>(n) + ridge * Eigen::MatrixXd::Identity(n, n);
}

inline Eigen::VectorXd normal_vector(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Eigen::VectorXd v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

inline bayesq::WeightBlock make_block(std::string id, const Eigen::VectorXd& values,
                                      std::vector<std::int64_t> shape = {}, std::int64_t group = 64) {
  bayesq::WeightBlock b;
  b.id = std::move(id);
  b.values = values.cast<float>();
  b.shape = shape.empty() ? std::vector<std::int64_t>{values.size()} : std::move(shape);
  b.kind = b.shape.size() == 2 ? bayesq::BlockKind::DenseMatrix : bayesq::BlockKind::GenericVector;
  b.group_size = group;
  return b;
}

inline double rel_frobenius(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

/// Fresh directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("bayesq_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing

#endif

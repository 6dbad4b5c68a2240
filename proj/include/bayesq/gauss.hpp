#ifndef BAYESQ_GAUSS_HPP
#define BAYESQ_GAUSS_HPP

// Standard-normal scalar mathematics. Everything downstream of whitening
// reduces to these few functions, so they are written for accuracy first:
// probability masses of far-tail cells are formed from the complementary
// side to avoid cancellation.

#include <cmath>
#include <limits>
#include <numbers>

#include "bayesq/error.hpp"

namespace bayesq::gauss {

template <typename Scalar>
struct BasicInterval {
  Scalar lo = -std::numeric_limits<Scalar>::infinity();
  Scalar hi = std::numeric_limits<Scalar>::infinity();

  static BasicInterval whole() { return {}; }
};

using Interval = BasicInterval<double>;

template <typename Scalar>
inline Scalar std_normal_pdf(Scalar z) {
  if (std::isinf(z)) return Scalar(0);
  return std::exp(-Scalar(0.5) * z * z) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
}

/// Phi(z) = erfc(-z/sqrt 2)/2, exact at the +-infinity sentinels.
template <typename Scalar>
inline Scalar std_normal_cdf(Scalar z) {
  if (z == std::numeric_limits<Scalar>::infinity()) return Scalar(1);
  if (z == -std::numeric_limits<Scalar>::infinity()) return Scalar(0);
  return Scalar(0.5) * std::erfc(-z / std::numbers::sqrt2_v<Scalar>);
}

/// z * phi(z) with the limit 0 at +-infinity.
template <typename Scalar>
inline Scalar z_pdf(Scalar z) {
  return std::isinf(z) ? Scalar(0) : z * std_normal_pdf(z);
}

/// Phi(b) - Phi(a), computed on whichever side of the origin keeps precision.
template <typename Scalar>
inline Scalar normal_mass(Scalar a, Scalar b) {
  if (a >= Scalar(0)) return std_normal_cdf(-a) - std_normal_cdf(-b);
  if (b <= Scalar(0)) return std_normal_cdf(b) - std_normal_cdf(a);
  return Scalar(1) - std_normal_cdf(a) - std_normal_cdf(-b);
}

/// I2(a, b; c) = integral over [a, b] of (z - c)^2 phi(z) dz.
template <typename Scalar>
inline Scalar cell_second_moment(BasicInterval<Scalar> iv, Scalar c) {
  if (!(iv.lo <= iv.hi)) throw InvalidArgument("cell_second_moment: interval with lo > hi");
  if (iv.lo == iv.hi) return Scalar(0);
  const Scalar mass = normal_mass(iv.lo, iv.hi);
  const Scalar pa = std_normal_pdf(iv.lo);
  const Scalar pb = std_normal_pdf(iv.hi);
  const Scalar value =
      (Scalar(1) + c * c) * mass - (z_pdf(iv.hi) - z_pdf(iv.lo)) + Scalar(2) * c * (pb - pa);
  return value < Scalar(0) ? Scalar(0) : value;
}

/// Clipping error 2 * integral_alpha^inf (z - alpha)^2 phi(z) dz
///   = 2[(1 + alpha^2) Phi(-alpha) - alpha phi(alpha)].
template <typename Scalar>
inline Scalar tail_term(Scalar alpha) {
  if (!(alpha > Scalar(0))) throw InvalidArgument("tail_term: alpha must be > 0");
  const Scalar v =
      Scalar(2) * ((Scalar(1) + alpha * alpha) * std_normal_cdf(-alpha) - alpha * std_normal_pdf(alpha));
  return v < Scalar(0) ? Scalar(0) : v;
}

/// Mean of the standard normal restricted to the interval.
template <typename Scalar>
inline Scalar truncated_mean(BasicInterval<Scalar> iv) {
  if (!(iv.lo <= iv.hi)) throw InvalidArgument("truncated_mean: interval with lo > hi");
  const Scalar mass = normal_mass(iv.lo, iv.hi);
  if (!(mass > Scalar(0))) throw InvalidArgument("truncated_mean: interval carries zero mass");
  return (std_normal_pdf(iv.lo) - std_normal_pdf(iv.hi)) / mass;
}

/// Per-coordinate clipping probability P(|z| > alpha).
template <typename Scalar>
inline Scalar clip_probability(Scalar alpha) {
  return Scalar(2) * std_normal_cdf(-alpha);
}

}  // namespace bayesq::gauss

#endif  // BAYESQ_GAUSS_HPP

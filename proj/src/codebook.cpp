#include "bayesq/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "bayesq/error.hpp"

namespace bayesq {

using gauss::Interval;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_bits(int m) {
  if (m < 1 || m > 30) throw InvalidArgument("codebook: bit-width must lie in [1, 30]");
}

template <typename F>
RangeResult golden_section(F&& f, Interval search, int budget) {
  const double r = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = search.lo, b = search.hi;
  double x1 = b - r * (b - a), x2 = a + r * (b - a);
  double f1 = f(x1), f2 = f(x2);
  RangeResult best = f2 < f1 ? RangeResult{x2, f2, 2} : RangeResult{x1, f1, 2};
  while (best.evaluations < budget) {
    double x, fx;
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x = x1 = b - r * (b - a);
      fx = f1 = f(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x = x2 = a + r * (b - a);
      fx = f2 = f(x2);
    }
    ++best.evaluations;
    if (fx < best.loss) {
      best.alpha = x;
      best.loss = fx;
    }
  }
  return best;
}

bool diagonal_zero_mean(const Whitener& wh) {
  return wh.diagonal_scales() && (wh.dim() == 0 || wh.mean().cwiseAbs().maxCoeff() == 0.0);
}

double group_constant(const Eigen::VectorXd& sigma, Eigen::Index lo, Eigen::Index n, bool& ok) {
  const double s = sigma[lo];
  ok = (sigma.segment(lo, n).array() == s).all();
  return s;
}

}  // namespace

std::string to_string(Designer d) {
  switch (d) {
    case Designer::Uniform: return "uniform";
    case Designer::LloydScalar: return "lloyd-scalar";
    case Designer::LloydVector: return "lloyd-vector";
    case Designer::None: return "none";
  }
  return "uniform";
}

Designer designer_from_string(const std::string& s) {
  if (s == "uniform") return Designer::Uniform;
  if (s == "lloyd-scalar") return Designer::LloydScalar;
  if (s == "lloyd-vector") return Designer::LloydVector;
  if (s == "none") return Designer::None;
  throw InvalidArgument("unknown designer '" + s + "'");
}

UniformCodebook UniformCodebook::make(int bits, double alpha) {
  check_bits(bits);
  if (!(alpha > 0)) throw InvalidArgument("uniform codebook: alpha must be > 0");
  UniformCodebook cb;
  cb.bits = bits;
  cb.alpha = alpha;
  cb.delta = 2.0 * alpha / static_cast<double>(cb.levels());
  return cb;
}

std::int64_t UniformCodebook::zero_point() const { return std::llround(alpha / delta - 0.5); }

std::int64_t UniformCodebook::index(double z) const {
  const double t = (z + alpha) / delta;
  const double k = std::ceil(t) - 1.0;
  if (k <= 0) return 0;
  const auto top = levels() - 1;
  if (k >= static_cast<double>(top)) return top;
  return static_cast<std::int64_t>(k);
}

std::int64_t LloydCodebook::index(double z) const {
  const double* b = boundaries.data();
  return std::lower_bound(b, b + boundaries.size(), z) - b;
}

std::int64_t LloydCodebook::nearest(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  const Eigen::Index n = x.size();
  std::int64_t best = 0;
  double best_d = kInf;
  for (Eigen::Index k = 0; k < codepoints.rows(); ++k) {
    const double d = (codepoints.row(k).head(n).transpose() - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

int codebook_bits(const Codebook& cb) {
  if (const auto* u = std::get_if<UniformCodebook>(&cb)) return u->bits;
  const auto& l = std::get<LloydCodebook>(cb);
  return static_cast<int>(std::lround(std::log2(static_cast<double>(l.levels())) / static_cast<double>(l.group())));
}

double expected_mse_levels(std::int64_t levels, double alpha) {
  if (levels < 1) throw InvalidArgument("expected_mse: need at least one level");
  if (!(alpha > 0)) throw InvalidArgument("expected_mse: alpha must be > 0");
  const double delta = 2.0 * alpha / static_cast<double>(levels);
  double sum = 0;
  for (std::int64_t k = 0; k < levels; ++k) {
    const double lo = -alpha + static_cast<double>(k) * delta;
    const double hi = k + 1 == levels ? alpha : -alpha + static_cast<double>(k + 1) * delta;
    sum += gauss::cell_second_moment(Interval{lo, hi}, lo + 0.5 * delta);
  }
  return sum + gauss::tail_term(alpha);
}

double expected_mse_uniform(int m, double alpha) {
  check_bits(m);
  return expected_mse_levels(std::int64_t{1} << m, alpha);
}

double saturating_mse_levels(std::int64_t levels, double alpha) {
  if (levels < 1) throw InvalidArgument("saturating_mse: need at least one level");
  if (!(alpha > 0)) throw InvalidArgument("saturating_mse: alpha must be > 0");
  const double delta = 2.0 * alpha / static_cast<double>(levels);
  double sum = 0;
  for (std::int64_t k = 0; k < levels; ++k) {
    const double lo = k == 0 ? -kInf : -alpha + static_cast<double>(k) * delta;
    const double hi = k + 1 == levels ? kInf : -alpha + static_cast<double>(k + 1) * delta;
    sum += gauss::cell_second_moment(Interval{lo, hi}, -alpha + (static_cast<double>(k) + 0.5) * delta);
  }
  return sum;
}

double saturating_mse_uniform(int m, double alpha) {
  check_bits(m);
  return saturating_mse_levels(std::int64_t{1} << m, alpha);
}

double high_resolution_mse(int m, double alpha) {
  check_bits(m);
  const double delta = 2.0 * alpha / static_cast<double>(std::int64_t{1} << m);
  return delta * delta / 12.0 * gauss::normal_mass(-alpha, alpha) + gauss::tail_term(alpha);
}

RangeResult optimize_range(int m, Interval search, RangeObjective objective) {
  check_bits(m);
  if (!(search.lo > 0) || !(search.lo < search.hi) || std::isinf(search.hi))
    throw InvalidArgument("optimize_range: search interval must be finite and positive");
  if (objective == RangeObjective::Saturating)
    return golden_section([m](double a) { return saturating_mse_uniform(m, a); }, search, 20);
  return golden_section([m](double a) { return expected_mse_uniform(m, a); }, search, 20);
}

double scalar_codebook_mse(const Eigen::VectorXd& c) {
  const Eigen::Index k = c.size();
  double sum = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    const double lo = i == 0 ? -kInf : 0.5 * (c[i - 1] + c[i]);
    const double hi = i + 1 == k ? kInf : 0.5 * (c[i] + c[i + 1]);
    sum += gauss::cell_second_moment(Interval{lo, hi}, c[i]);
  }
  return sum;
}

Eigen::MatrixXd standard_normal_pool(Eigen::Index rows, Eigen::Index group, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd out(rows, group);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < group; ++j) out(i, j) = nd(rng);
  return out;
}

namespace {

Eigen::MatrixXd kmeanspp(const Eigen::MatrixXd& x, std::int64_t k, std::uint64_t seed) {
  const Eigen::Index n = x.rows();
  std::mt19937_64 rng(seed);
  Eigen::MatrixXd c(k, x.cols());
  c.row(0) = x.row(static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(n)));
  Eigen::VectorXd d2 = (x.rowwise() - c.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::int64_t j = 1; j < k; ++j) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      const double target = u(rng) * total;
      double acc = 0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0) {
          pick = i;
          break;
        }
      }
    }
    c.row(j) = x.row(pick);
    d2 = d2.cwiseMin((x.rowwise() - c.row(j)).rowwise().squaredNorm());
  }
  return c;
}

}  // namespace

LloydCodebook lloyd_scalar(std::int64_t levels, const LloydOptions& opt) {
  if (levels < 2) throw InvalidArgument("lloyd_scalar: K must be >= 2");
  if (!(opt.tol > 0)) throw InvalidArgument("lloyd_scalar: tol must be > 0");
  Eigen::VectorXd c(levels);
  if (opt.init == LloydInit::UniformCodepoints) {
    const RangeResult rr = golden_section([levels](double a) { return saturating_mse_levels(levels, a); },
                                          Interval{0.5, 5.0}, 20);
    const double delta = 2.0 * rr.alpha / static_cast<double>(levels);
    for (std::int64_t k = 0; k < levels; ++k) c[k] = -rr.alpha + (static_cast<double>(k) + 0.5) * delta;
  } else {
    const Eigen::MatrixXd pool = standard_normal_pool(std::max<Eigen::Index>(4096, 8 * levels), 1, opt.seed);
    c = kmeanspp(pool, levels, opt.seed ^ 0x5851f42d4c957f2dULL).col(0);
    std::sort(c.data(), c.data() + c.size());
  }

  LloydCodebook cb;
  cb.objective.push_back(scalar_codebook_mse(c));
  for (int it = 0; it < opt.max_iter; ++it) {
    Eigen::VectorXd next(levels);
    for (std::int64_t k = 0; k < levels; ++k) {
      const double lo = k == 0 ? -kInf : 0.5 * (c[k - 1] + c[k]);
      const double hi = k + 1 == levels ? kInf : 0.5 * (c[k] + c[k + 1]);
      next[k] = gauss::normal_mass(lo, hi) > 0 ? gauss::truncated_mean(Interval{lo, hi}) : c[k];
    }
    const double prev = cb.objective.back();
    const double cur = scalar_codebook_mse(next);
    if (cur > prev) {
      cb.converged = true;
      break;
    }
    c = next;
    cb.objective.push_back(cur);
    cb.iterations = it + 1;
    if (prev - cur <= opt.tol * prev) {
      cb.converged = true;
      break;
    }
  }
  cb.codepoints = c;
  cb.boundaries.resize(levels - 1);
  for (std::int64_t k = 0; k + 1 < levels; ++k) cb.boundaries[k] = 0.5 * (c[k] + c[k + 1]);
  return cb;
}

LloydCodebook lloyd_vector(Eigen::Index group, std::int64_t levels, const Eigen::MatrixXd& samples,
                           const LloydOptions& opt) {
  if (group < 1 || samples.cols() != group) throw InvalidArgument("lloyd_vector: sample dimension must equal g");
  if (levels < 1) throw InvalidArgument("lloyd_vector: K must be >= 1");
  if (levels > samples.rows()) throw InvalidArgument("lloyd_vector: K exceeds the sample count");
  const Eigen::Index n = samples.rows();
  LloydCodebook cb;
  cb.codepoints = kmeanspp(samples, levels, opt.seed);
  std::vector<std::int64_t> assign(static_cast<std::size_t>(n));
  for (int it = 0; it < opt.max_iter; ++it) {
    double obj = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto q = cb.nearest(samples.row(i).transpose());
      assign[static_cast<std::size_t>(i)] = q;
      obj += (samples.row(i) - cb.codepoints.row(q)).squaredNorm();
    }
    obj /= static_cast<double>(n);
    if (!cb.objective.empty() && obj > cb.objective.back()) break;
    const double prev = cb.objective.empty() ? kInf : cb.objective.back();
    cb.objective.push_back(obj);
    cb.iterations = it + 1;
    if (std::isfinite(prev) && prev - obj <= opt.tol * prev) {
      cb.converged = true;
      break;
    }
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(levels, group);
    Eigen::VectorXd count = Eigen::VectorXd::Zero(levels);
    for (Eigen::Index i = 0; i < n; ++i) {
      sum.row(assign[static_cast<std::size_t>(i)]) += samples.row(i);
      count[assign[static_cast<std::size_t>(i)]] += 1;
    }
    for (std::int64_t k = 0; k < levels; ++k)
      if (count[k] > 0) cb.codepoints.row(k) = sum.row(k) / count[k];
  }
  if (group == 1) {
    std::vector<double> c(cb.codepoints.data(), cb.codepoints.data() + levels);
    std::sort(c.begin(), c.end());
    cb.codepoints = Eigen::Map<Eigen::VectorXd>(c.data(), levels);
    cb.boundaries.resize(levels - 1);
    for (std::int64_t k = 0; k + 1 < levels; ++k) cb.boundaries[k] = 0.5 * (c[k] + c[k + 1]);
  }
  return cb;
}

double kurtosis(const Eigen::VectorXd& w) {
  if (w.size() == 0) return 0;
  const Eigen::ArrayXd c = w.array() - w.mean();
  const double m2 = c.square().mean();
  if (!(m2 > 0)) return 0;
  return c.square().square().mean() / (m2 * m2);
}

QuantizedBlock quantize_block(const WeightBlock& block, const Whitener& whitener, const Codebook& cb) {
  return quantize_vector(block.values.cast<double>(), whitener, cb);
}

QuantizedBlock quantize_vector(const Eigen::VectorXd& w, const Whitener& whitener, const Codebook& cb) {
  const Eigen::Index d = w.size();
  if (whitener.dim() != d) throw InvalidArgument("quantize_block: whitener dimension mismatch");
  const Eigen::VectorXd z = whitener.forward(w);
  const Eigen::VectorXd* sigma = whitener.diagonal_scales();
  const Eigen::VectorXd& mu = whitener.mean();
  QuantizedBlock out;
  out.reconstruction.resize(d);
  Eigen::VectorXd zq(d);

  if (const auto* u = std::get_if<UniformCodebook>(&cb)) {
    out.indices.resize(static_cast<std::size_t>(d));
    const double center = u->center();
    for (Eigen::Index i = 0; i < d; ++i) {
      const auto q = u->index(z[i]);
      out.indices[static_cast<std::size_t>(i)] = q;
      if (sigma)
        out.reconstruction[i] = mu[i] + ((*sigma)[i] * u->delta) * (static_cast<double>(q) - center);
      else
        zq[i] = u->codepoint(q);
    }
  } else {
    const auto& l = std::get<LloydCodebook>(cb);
    const Eigen::Index g = l.group();
    if (g == 1) {
      out.indices.resize(static_cast<std::size_t>(d));
      for (Eigen::Index i = 0; i < d; ++i) {
        const auto q = l.boundaries.size() + 1 == l.codepoints.rows() ? l.index(z[i]) : l.nearest(z.segment(i, 1));
        out.indices[static_cast<std::size_t>(i)] = q;
        if (sigma)
          out.reconstruction[i] = mu[i] + (*sigma)[i] * l.codepoints(q, 0);
        else
          zq[i] = l.codepoints(q, 0);
      }
    } else {
      const Eigen::Index groups = (d + g - 1) / g;
      out.indices.resize(static_cast<std::size_t>(groups));
      for (Eigen::Index j = 0; j < groups; ++j) {
        const Eigen::Index lo = j * g, n = std::min(g, d - lo);
        const auto q = l.nearest(z.segment(lo, n));
        out.indices[static_cast<std::size_t>(j)] = q;
        for (Eigen::Index t = 0; t < n; ++t) {
          if (sigma)
            out.reconstruction[lo + t] = mu[lo + t] + (*sigma)[lo + t] * l.codepoints(q, t);
          else
            zq[lo + t] = l.codepoints(q, t);
        }
      }
    }
  }
  if (!sigma) out.reconstruction = whitener.inverse(zq);
  out.kurtosis = kurtosis(w);
  out.outlier = out.kurtosis > kOutlierKurtosis;
  return out;
}

std::int64_t CompiledAffine::integer_zero_point() const { return std::llround(zero_point); }

double CompiledAffine::dequantize(std::int64_t q, Eigen::Index t) const {
  if (q < qmin || q > qmax) throw InvalidArgument("dequantize: index out of range");
  if (has_lut()) return scale * lut[static_cast<std::size_t>(q * lut_width + t)];
  return scale * (static_cast<double>(q) - zero_point);
}

bool fit_affine(const std::vector<std::int64_t>& q, const Eigen::VectorXd& w, double& scale, double& zero_point) {
  const auto n = static_cast<double>(q.size());
  if (q.empty() || static_cast<Eigen::Index>(q.size()) != w.size()) return false;
  double sq = 0, sqq = 0, sw = 0, sqw = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto x = static_cast<double>(q[i]);
    sq += x;
    sqq += x * x;
    sw += w[static_cast<Eigen::Index>(i)];
    sqw += x * w[static_cast<Eigen::Index>(i)];
  }
  const double det = n * sqq - sq * sq;
  if (!(det > 0)) return false;
  const double a = (n * sqw - sq * sw) / det;
  const double b = (sw - a * sq) / n;
  if (a == 0 || !std::isfinite(a)) return false;
  scale = a;
  zero_point = -b / a;
  return true;
}

std::vector<CompiledAffine> compile_to_affine(const Codebook& cb, const std::vector<std::int64_t>& indices,
                                              const Eigen::VectorXd& weights, const Whitener& whitener,
                                              std::int64_t group_size, ExportMode mode) {
  const Eigen::Index d = weights.size();
  if (group_size < 1) throw InvalidArgument("compile_to_affine: group size must be >= 1");
  if (whitener.dim() != d) throw InvalidArgument("compile_to_affine: whitener dimension mismatch");
  const bool diag = diagonal_zero_mean(whitener);
  const Eigen::VectorXd* sigma = whitener.diagonal_scales();
  std::vector<CompiledAffine> out;

  if (const auto* l = std::get_if<LloydCodebook>(&cb); l && l->group() > 1) {
    const Eigen::Index g = l->group();
    if (static_cast<Eigen::Index>(indices.size()) != (d + g - 1) / g)
      throw InvalidArgument("compile_to_affine: index count mismatch");
    bool constant = diag && d > 0;
    const double s = constant ? group_constant(*sigma, 0, d, constant) : 1.0;
    if (!constant && d > 0) throw InvalidArgument("compile_to_affine: vector export needs a block-constant diagonal whitener");
    CompiledAffine c;
    c.scale = s;
    c.qmax = l->levels() - 1;
    c.lut_width = g;
    c.lut.resize(static_cast<std::size_t>(l->levels() * g));
    for (std::int64_t k = 0; k < l->levels(); ++k)
      for (Eigen::Index t = 0; t < g; ++t) c.lut[static_cast<std::size_t>(k * g + t)] = l->codepoints(k, t);
    out.push_back(std::move(c));
    return out;
  }

  if (static_cast<Eigen::Index>(indices.size()) != d) throw InvalidArgument("compile_to_affine: index count mismatch");
  const auto* u = std::get_if<UniformCodebook>(&cb);
  const auto* l = std::get_if<LloydCodebook>(&cb);
  const std::int64_t levels = u ? u->levels() : l->levels();
  for (Eigen::Index lo = 0; lo < d; lo += group_size) {
    const Eigen::Index n = std::min<Eigen::Index>(group_size, d - lo);
    CompiledAffine c;
    c.qmax = levels - 1;
    bool constant = diag;
    const double s = diag ? group_constant(*sigma, lo, n, constant) : 1.0;
    if (u && constant) {
      c.scale = s * u->delta;
      c.zero_point = u->center();
    } else {
      const std::vector<std::int64_t> q(indices.begin() + lo, indices.begin() + lo + n);
      const bool lut_ok = l && constant;
      if (mode == ExportMode::Lut && lut_ok) {
        c.scale = s;
        c.lut.assign(l->codepoints.data(), l->codepoints.data() + levels);
      } else if (!fit_affine(q, weights.segment(lo, n), c.scale, c.zero_point)) {
        if (!lut_ok) {
          // degenerate group without a usable LUT: constant reconstruction
          c.scale = n > 0 ? weights.segment(lo, n).mean() : 0.0;
          c.lut.assign(static_cast<std::size_t>(levels), 1.0);
        } else {
          c.scale = s;
          c.lut.assign(l->codepoints.data(), l->codepoints.data() + levels);
        }
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

Eigen::VectorXd dequantize(const std::vector<CompiledAffine>& groups, const std::vector<std::int64_t>& indices,
                           Eigen::Index size, std::int64_t group_size, Eigen::Index vq_group) {
  Eigen::VectorXd w(size);
  if (vq_group > 1) {
    if (groups.size() != 1) throw InvalidArgument("dequantize: vector export carries one group");
    for (Eigen::Index i = 0; i < size; ++i)
      w[i] = groups[0].dequantize(indices[static_cast<std::size_t>(i / vq_group)], i % vq_group);
    return w;
  }
  for (Eigen::Index i = 0; i < size; ++i)
    w[i] = groups[static_cast<std::size_t>(i / group_size)].dequantize(indices[static_cast<std::size_t>(i)]);
  return w;
}

}  // namespace bayesq

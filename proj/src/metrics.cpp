#include "bayesq/metrics.hpp"

#include <algorithm>
#include <array>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "bayesq/error.hpp"

namespace bayesq {

namespace {

std::int64_t tail_count(double fraction, std::size_t n) {
  return static_cast<std::int64_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

std::vector<std::size_t> by_confidence(const PredictionSet& p) {
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p.confidence(a) < p.confidence(b); });
  return order;
}

double entropy_of(const Eigen::VectorXd& q) {
  double h = 0;
  for (double v : q)
    if (v > 0) h -= v * std::log(v);
  return h;
}

Calibration calibrate(const PredictionSet& p, const std::vector<double>& edges) {
  const std::size_t nb = edges.size() - 1;
  std::vector<double> conf(nb, 0.0), hit(nb, 0.0);
  std::vector<std::int64_t> count(nb, 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double c = p.confidence(i);
    auto b = static_cast<std::ptrdiff_t>(std::lower_bound(edges.begin(), edges.end(), c) - edges.begin()) - 1;
    b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(nb) - 1);
    conf[static_cast<std::size_t>(b)] += c;
    hit[static_cast<std::size_t>(b)] += p.predicted[i] == p.labels[i] ? 1.0 : 0.0;
    ++count[static_cast<std::size_t>(b)];
  }
  Calibration out;
  const double n = static_cast<double>(p.size());
  for (std::size_t b = 0; b < nb; ++b) {
    if (count[b] == 0) continue;
    const double gap = std::abs(hit[b] - conf[b]) / static_cast<double>(count[b]);
    out.ece += static_cast<double>(count[b]) / n * gap;
    out.mce = std::max(out.mce, gap);
  }
  return out;
}

}  // namespace

double PredictionSet::confidence(std::size_t i) const { return probs.row(static_cast<Eigen::Index>(i)).maxCoeff(); }

void PredictionSet::validate() const {
  const auto n = static_cast<Eigen::Index>(labels.size());
  if (probs.rows() != n || predicted.size() != labels.size())
    throw InvalidArgument("prediction set: probabilities, predictions, and labels must have one entry per example");
  for (Eigen::Index i = 0; i < n; ++i) {
    if ((probs.row(i).array() < 0).any()) throw InvalidArgument("prediction set: negative probability");
    if (std::abs(probs.row(i).sum() - 1.0) > 1e-6) throw InvalidArgument("prediction set: row does not sum to 1");
    const auto c = probs.cols();
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= c ||
        predicted[static_cast<std::size_t>(i)] < 0 || predicted[static_cast<std::size_t>(i)] >= c)
      throw InvalidArgument("prediction set: label out of range");
  }
}

PredictionSet PredictionSet::from_probs(Eigen::MatrixXd probs, std::vector<int> labels) {
  PredictionSet p;
  p.probs = std::move(probs);
  p.labels = std::move(labels);
  for (Eigen::Index i = 0; i < p.probs.rows(); ++i) {
    Eigen::Index arg = 0;
    p.probs.row(i).maxCoeff(&arg);
    p.predicted.push_back(static_cast<int>(arg));
  }
  return p;
}

PredictionSet read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  PredictionSet p;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#' || line.rfind("label", 0) == 0) continue;
    std::istringstream ss(line);
    int y = 0, yhat = 0;
    if (!(ss >> y >> yhat)) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected labels");
    std::vector<double> r;
    for (double v; ss >> v;) r.push_back(v);
    if (r.empty() || (!rows.empty() && r.size() != rows.front().size()))
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": ragged probability vector");
    p.labels.push_back(y);
    p.predicted.push_back(yhat);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw FormatError(path.string() + ": no predictions");
  p.probs.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < rows[i].size(); ++c)
      p.probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
  try {
    p.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return p;
}

void write_predictions(const PredictionSet& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "label\tpredicted\tprobs\n";
  for (std::size_t i = 0; i < p.size(); ++i) {
    out << p.labels[i] << '\t' << p.predicted[i];
    for (double v : p.probs.row(static_cast<Eigen::Index>(i))) out << '\t' << v;
    out << '\n';
  }
}

double top1_accuracy(const PredictionSet& p) {
  if (p.size() == 0) throw InvalidArgument("top1_accuracy: empty prediction set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < p.size(); ++i) hits += p.predicted[i] == p.labels[i];
  return static_cast<double>(hits) / static_cast<double>(p.size());
}

Calibration ece_mce(const PredictionSet& p, const BinningConfig& cfg) {
  if (p.size() == 0) throw InvalidArgument("ece_mce: empty prediction set");
  if (cfg.bins < 1) throw InvalidArgument("ece_mce: need at least one bin");
  const double w = 1.0 / cfg.bins;
  std::vector<double> edges(static_cast<std::size_t>(cfg.bins) + 1);
  for (int b = 0; b <= cfg.bins; ++b) edges[static_cast<std::size_t>(b)] = b * w;
  if (cfg.jitter_seeds <= 0) return calibrate(p, edges);
  Calibration avg;
  for (int s = 0; s < cfg.jitter_seeds; ++s) {
    std::mt19937_64 rng(cfg.seed + static_cast<std::uint64_t>(s));
    std::uniform_real_distribution<double> u(-0.5 * w, 0.5 * w);
    auto e = edges;
    for (int b = 1; b < cfg.bins; ++b) e[static_cast<std::size_t>(b)] += u(rng);
    const auto c = calibrate(p, e);
    avg.ece += c.ece / cfg.jitter_seeds;
    avg.mce += c.mce / cfg.jitter_seeds;
  }
  return avg;
}

std::vector<ReliabilityBin> reliability_bins(const PredictionSet& p, int bins) {
  if (bins < 1) throw InvalidArgument("reliability_bins: need at least one bin");
  std::vector<ReliabilityBin> out(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    out[static_cast<std::size_t>(b)].lo = static_cast<double>(b) / bins;
    out[static_cast<std::size_t>(b)].hi = static_cast<double>(b + 1) / bins;
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double c = p.confidence(i);
    const int b = std::clamp(static_cast<int>(std::ceil(c * bins)) - 1, 0, bins - 1);
    auto& r = out[static_cast<std::size_t>(b)];
    ++r.count;
    r.confidence += c;
    r.accuracy += p.predicted[i] == p.labels[i] ? 1.0 : 0.0;
  }
  for (auto& r : out)
    if (r.count > 0) {
      r.confidence /= static_cast<double>(r.count);
      r.accuracy /= static_cast<double>(r.count);
    }
  return out;
}

TailMetrics worst_k_and_cvar(const PredictionSet& p, double k_percent, double alpha) {
  if (!(k_percent > 0 && k_percent <= 100)) throw InvalidArgument("worst-k: k must lie in (0, 100]");
  if (!(alpha > 0 && alpha < 1)) throw InvalidArgument("cvar: alpha must lie in (0, 1)");
  TailMetrics t;
  t.worst_k_count = tail_count(k_percent / 100.0, p.size());
  t.cvar_count = tail_count(1.0 - alpha, p.size());
  if (t.worst_k_count < 1 || t.cvar_count < 1) throw InvalidArgument("tail holds fewer than one example");
  const auto order = by_confidence(p);
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < t.worst_k_count; ++i) {
    const auto e = order[static_cast<std::size_t>(i)];
    hits += p.predicted[e] == p.labels[e];
  }
  t.worst_k_accuracy = static_cast<double>(hits) / static_cast<double>(t.worst_k_count);
  std::int64_t misses = 0;
  for (std::int64_t i = 0; i < t.cvar_count; ++i) {
    const auto e = order[static_cast<std::size_t>(i)];
    misses += p.predicted[e] != p.labels[e];
  }
  t.cvar = static_cast<double>(misses) / static_cast<double>(t.cvar_count);
  return t;
}

SignalMetrics snr_psnr(const Eigen::VectorXd& original, const Eigen::VectorXd& reconstructed, double peak) {
  if (original.size() != reconstructed.size()) throw InvalidArgument("snr_psnr: length mismatch");
  if (original.size() == 0) throw InvalidArgument("snr_psnr: empty vectors");
  const double err = (original - reconstructed).squaredNorm();
  SignalMetrics s;
  s.mse = err / static_cast<double>(original.size());
  const double inf = std::numeric_limits<double>::infinity();
  s.snr_db = err == 0 ? inf : 10.0 * std::log10(original.squaredNorm() / err);
  s.psnr_db = err == 0 ? inf : 10.0 * std::log10(peak * peak / s.mse);
  return s;
}

CodebookStats codebook_stats(const std::vector<std::int64_t>& indices, std::int64_t levels) {
  if (levels < 1) throw InvalidArgument("codebook_stats: need at least one level");
  std::vector<std::int64_t> count(static_cast<std::size_t>(levels), 0);
  for (auto q : indices) {
    if (q < 0 || q >= levels) throw InvalidArgument("codebook_stats: index out of range");
    ++count[static_cast<std::size_t>(q)];
  }
  CodebookStats s;
  if (indices.empty()) return s;
  const double n = static_cast<double>(indices.size());
  std::int64_t used = 0;
  for (auto c : count) {
    if (c == 0) continue;
    ++used;
    const double f = static_cast<double>(c) / n;
    s.entropy -= f * std::log(f);
  }
  s.utilization = static_cast<double>(used) / static_cast<double>(levels);
  return s;
}

Uncertainty uncertainty_diagnostics(const Eigen::MatrixXd& samples) {
  if (samples.rows() < 1) throw InvalidArgument("uncertainty: need at least one sample");
  const Eigen::VectorXd mean = samples.colwise().mean().transpose();
  double inner = 0;
  for (Eigen::Index s = 0; s < samples.rows(); ++s) inner += entropy_of(samples.row(s).transpose());
  inner /= static_cast<double>(samples.rows());
  Uncertainty u;
  u.predictive_entropy = entropy_of(mean);
  u.mutual_information = std::max(0.0, u.predictive_entropy - inner);
  return u;
}

Uncertainty uncertainty_diagnostics(const std::vector<Eigen::MatrixXd>& per_input) {
  if (per_input.empty()) throw InvalidArgument("uncertainty: no inputs");
  Uncertainty avg;
  for (const auto& s : per_input) {
    const auto u = uncertainty_diagnostics(s);
    avg.predictive_entropy += u.predictive_entropy;
    avg.mutual_information += u.mutual_information;
  }
  avg.predictive_entropy /= static_cast<double>(per_input.size());
  avg.mutual_information /= static_cast<double>(per_input.size());
  return avg;
}

ClippingRate clipping_rate(const Eigen::VectorXd& z, double alpha) {
  if (z.size() == 0) throw InvalidArgument("clipping_rate: empty sample");
  const double n = static_cast<double>(z.size());
  ClippingRate c;
  c.rate = static_cast<double>((z.array().abs() > alpha).count()) / n;
  c.se = std::sqrt(c.rate * (1 - c.rate) / n);
  return c;
}

double t_quantile_975(int df) {
  static constexpr std::array<double, 29> table = {
      12.7062, 4.3027, 3.1824, 2.7764, 2.5706, 2.4469, 2.3646, 2.3060, 2.2622, 2.2281,
      2.2010,  2.1788, 2.1604, 2.1448, 2.1314, 2.1199, 2.1098, 2.1009, 2.0930, 2.0860,
      2.0796,  2.0739, 2.0687, 2.0639, 2.0595, 2.0555, 2.0518, 2.0484, 2.0452};
  if (df < 1) throw InvalidArgument("t quantile: degrees of freedom must be positive");
  if (df <= static_cast<int>(table.size())) return table[static_cast<std::size_t>(df - 1)];
  return boost::math::quantile(boost::math::students_t(df), 0.975);
}

SeedInterval seed_ci(const std::vector<double>& values) {
  if (values.size() < 2) throw InvalidArgument("seed_ci: need at least two values");
  const double r = static_cast<double>(values.size());
  SeedInterval s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / r;
  double ss = 0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / (r - 1));
  s.t = t_quantile_975(static_cast<int>(values.size()) - 1);
  const double half = s.t * s.sd / std::sqrt(r);
  s.lo = s.mean - half;
  s.hi = s.mean + half;
  return s;
}

double glue_macro(const std::vector<double>& task_scores) {
  if (task_scores.empty()) throw InvalidArgument("glue_macro: no tasks");
  return std::accumulate(task_scores.begin(), task_scores.end(), 0.0) / static_cast<double>(task_scores.size());
}

double glue_micro(const std::vector<double>& task_scores, const std::vector<std::int64_t>& task_sizes) {
  if (task_scores.empty() || task_scores.size() != task_sizes.size())
    throw InvalidArgument("glue_micro: one size per task score");
  double num = 0;
  std::int64_t den = 0;
  for (std::size_t t = 0; t < task_scores.size(); ++t) {
    if (task_sizes[t] < 0) throw InvalidArgument("glue_micro: negative task size");
    num += static_cast<double>(task_sizes[t]) * task_scores[t];
    den += task_sizes[t];
  }
  if (den == 0) throw InvalidArgument("glue_micro: all task sizes are zero");
  return num / static_cast<double>(den);
}

}  // namespace bayesq

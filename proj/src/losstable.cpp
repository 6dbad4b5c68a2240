#include "bayesq/losstable.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "bayesq/error.hpp"

namespace bayesq {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix unflatten(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const RowMat>(v.data(), rows, cols);
}

std::string real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Matrix logits_with(const ToyNet& net, int layer, const Vector& w, const Matrix& inputs) {
  ToyNet n = net;
  auto& l = n.layers[static_cast<std::size_t>(layer)];
  l.w = unflatten(w, l.w.rows(), l.w.cols());
  return forward_batch(n, inputs);
}

}  // namespace

double closed_form_mse(const BlockPosterior& post, const Codebook& cb) {
  if (const auto* u = std::get_if<UniformCodebook>(&cb)) return saturating_mse_uniform(u->bits, u->alpha) * post.trace();
  const auto& l = std::get<LloydCodebook>(cb);
  if (l.group() != 1) throw InvalidArgument("closed_form_mse: vector codebooks need the Monte Carlo proxy");
  return scalar_codebook_mse(l.codepoints.col(0)) * post.trace();
}

double per_dimension_mse(const BlockPosterior& post, const Vector& deltas) {
  if (deltas.size() != post.dim()) throw InvalidArgument("per_dimension_mse: one step per coordinate");
  return (deltas.array().square() * post.marginal_variances().array()).sum() / 12.0;
}

std::string to_string(ProxyKind p) {
  switch (p) {
    case ProxyKind::WeightMse: return "weight-mse";
    case ProxyKind::LayerOutput: return "layer-output";
    case ProxyKind::LogitKl: return "logit-kl";
  }
  return "weight-mse";
}

ProxyKind proxy_from_string(const std::string& s) {
  if (s == "weight-mse") return ProxyKind::WeightMse;
  if (s == "layer-output") return ProxyKind::LayerOutput;
  if (s == "logit-kl") return ProxyKind::LogitKl;
  throw InvalidArgument("unknown proxy '" + s + "'");
}

McEstimate mc_proxy(const BlockPosterior& post, const BlockQuantizer& quantize, const ProxyConfig& proxy, int samples,
                    std::uint64_t seed) {
  if (samples < 2) throw InvalidArgument("mc_proxy: at least two samples are needed for a standard error");
  const Eigen::Index d = post.dim();
  if (proxy.kind == ProxyKind::LayerOutput &&
      (proxy.activations.rows() == 0 || proxy.rows * proxy.cols != d || proxy.activations.cols() != proxy.cols))
    throw InvalidArgument("mc_proxy: layer-output proxy needs activations matching the block shape");
  if (proxy.kind == ProxyKind::LogitKl &&
      (!proxy.net || proxy.layer < 0 || proxy.layer >= static_cast<int>(proxy.net->layers.size()) ||
       proxy.inputs.rows() == 0 || proxy.net->layers[static_cast<std::size_t>(proxy.layer)].w.size() != d))
    throw InvalidArgument("mc_proxy: logit-kl proxy needs a net, a matching layer, and inputs");

  const Whitener wh = build_whitener(post);
  std::mt19937_64 rng(seed);
  std::vector<Vector> draws;
  for (int s = 0; s < samples; ++s) draws.push_back(wh.sample(rng));

  std::vector<double> loss(static_cast<std::size_t>(samples));
  if (proxy.kind == ProxyKind::LogitKl) {
    const ToyNet& net = *proxy.net;
    const Eigen::Index n = proxy.inputs.rows();
    Matrix pt = Matrix::Zero(n, net.classes());
    if (proxy.teacher == KlTeacher::MeanWeight) {
      const Matrix lg = logits_with(net, proxy.layer, post.mu, proxy.inputs);
      for (Eigen::Index i = 0; i < n; ++i) pt.row(i) = softmax(lg.row(i).transpose(), proxy.tau).transpose();
    } else {
      for (const auto& w : draws) {
        const Matrix lg = logits_with(net, proxy.layer, w, proxy.inputs);
        for (Eigen::Index i = 0; i < n; ++i) pt.row(i) += softmax(lg.row(i).transpose(), proxy.tau).transpose();
      }
      pt /= static_cast<double>(samples);
    }
    for (int s = 0; s < samples; ++s) {
      const Matrix lg = logits_with(net, proxy.layer, quantize(draws[static_cast<std::size_t>(s)]), proxy.inputs);
      double kl = 0;
      for (Eigen::Index i = 0; i < n; ++i)
        kl += kl_divergence(pt.row(i).transpose(), softmax(lg.row(i).transpose(), proxy.tau));
      loss[static_cast<std::size_t>(s)] = kl / static_cast<double>(n);
    }
  } else {
    for (int s = 0; s < samples; ++s) {
      const Vector& w = draws[static_cast<std::size_t>(s)];
      const Vector err = w - quantize(w);
      if (proxy.kind == ProxyKind::WeightMse) {
        loss[static_cast<std::size_t>(s)] = err.squaredNorm();
      } else {
        const Matrix e = unflatten(err, proxy.rows, proxy.cols);
        loss[static_cast<std::size_t>(s)] =
            (proxy.activations * e.transpose()).squaredNorm() / static_cast<double>(proxy.activations.rows());
      }
    }
  }
  const Eigen::Map<const Vector> l(loss.data(), samples);
  const double mean = l.mean();
  const double var = (l.array() - mean).square().sum() / static_cast<double>(samples - 1);
  return {mean, std::sqrt(var / static_cast<double>(samples))};
}

McEstimate mc_proxy(const BlockPosterior& post, const Codebook& cb, const ProxyConfig& proxy, int samples,
                    std::uint64_t seed) {
  const Whitener wh = build_whitener(post);
  return mc_proxy(
      post, [&](const Vector& w) { return quantize_vector(w, wh, cb).reconstruction; }, proxy, samples, seed);
}

const LossRow& LossTable::at(const std::string& id, int m) const {
  const auto it = rows.find(id);
  if (it == rows.end()) throw InvalidArgument("loss table has no block '" + id + "'");
  for (const auto& r : it->second)
    if (r.bits == m) return r;
  throw InvalidArgument("loss table has no row (" + id + ", " + std::to_string(m) + ")");
}

std::vector<double> LossTable::losses(const std::string& id) const {
  std::vector<double> out;
  const auto it = rows.find(id);
  if (it == rows.end()) throw InvalidArgument("loss table has no block '" + id + "'");
  for (const auto& r : it->second) out.push_back(r.loss);
  return out;
}

int isotonic_nonincreasing(std::vector<double>& v) {
  int violations = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[i - 1]) ++violations;
  if (violations == 0) return 0;
  struct Pool {
    double sum;
    std::size_t count;
  };
  std::vector<Pool> pools;
  for (double x : v) {
    pools.push_back({x, 1});
    while (pools.size() > 1) {
      const auto& b = pools.back();
      const auto& a = pools[pools.size() - 2];
      if (b.sum / static_cast<double>(b.count) <= a.sum / static_cast<double>(a.count)) break;
      Pool merged{a.sum + b.sum, a.count + b.count};
      pools.pop_back();
      pools.back() = merged;
    }
  }
  std::size_t i = 0;
  for (const auto& p : pools)
    for (std::size_t k = 0; k < p.count; ++k) v[i++] = p.sum / static_cast<double>(p.count);
  return violations;
}

int clamp_rows(std::vector<LossRow>& rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.raw_loss);
  const int n = isotonic_nonincreasing(v);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].loss = std::max(v[i], 0.0);
  return n;
}

Designer DesignerPolicy::designer_for(const WeightBlock& block) const {
  if (const auto it = per_block.find(block.id); it != per_block.end()) return it->second;
  if (const auto it = per_kind.find(block.kind); it != per_kind.end()) return it->second;
  return scalar;
}

bool vq_feasible(int m, const DesignerPolicy& policy) {
  const Eigen::Index bits = m * policy.vq_group;
  return m >= 1 && bits <= 20 && (std::int64_t{1} << bits) <= policy.vq_pool;
}

Codebook design_codebook(Designer designer, int m, const DesignerPolicy& policy) {
  switch (designer) {
    case Designer::Uniform:
      return UniformCodebook::make(m, optimize_range(m, {1.5, 4.5}, RangeObjective::Saturating).alpha);
    case Designer::LloydScalar:
      if (m < 1 || m > 16) throw InvalidArgument("lloyd-scalar: bit-width must lie in [1, 16]");
      return lloyd_scalar(std::int64_t{1} << m, policy.lloyd);
    case Designer::LloydVector: {
      const Eigen::Index g = policy.vq_group;
      if (m < 1 || m * g > 20) throw InvalidArgument("lloyd-vector: index width out of range");
      const std::int64_t k = std::int64_t{1} << (m * g);
      if (k > policy.vq_pool)
        throw InvalidArgument("lloyd-vector: K = " + std::to_string(k) + " exceeds the sample pool at m = " +
                              std::to_string(m));
      LloydOptions o = policy.lloyd;
      o.init = LloydInit::KMeansPP;
      o.seed = policy.seed;
      return lloyd_vector(g, k, standard_normal_pool(policy.vq_pool, g, policy.seed), o);
    }
    case Designer::None:
      break;
  }
  throw InvalidArgument("design_codebook: designer 'none' has no codebook");
}

const Codebook& CodebookCache::get(Designer designer, int m) {
  const auto key = std::make_pair(designer, m);
  auto it = cache_.find(key);
  if (it == cache_.end()) it = cache_.emplace(key, design_codebook(designer, m, policy_)).first;
  return it->second;
}

LossTable build_table(const std::vector<WeightBlock>& blocks, const std::vector<BlockPosterior>& posteriors,
                      const std::vector<int>& bit_set, CodebookCache& codebooks, const TableOptions& opt) {
  if (blocks.size() != posteriors.size()) throw InvalidArgument("build_table: one posterior per block");
  if (bit_set.empty() || !std::is_sorted(bit_set.begin(), bit_set.end()) ||
      std::adjacent_find(bit_set.begin(), bit_set.end()) != bit_set.end())
    throw InvalidArgument("build_table: bit set must be nonempty, sorted, and unique");
  LossTable t;
  t.bit_set = bit_set;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const Designer designer = codebooks.policy().designer_for(b);
    if (designer == Designer::None) continue;
    if (posteriors[i].dim() != b.size()) throw InvalidArgument("build_table: posterior dimension mismatch for " + b.id);
    const auto pit = opt.proxies.find(b.id);
    const ProxyConfig proxy = pit == opt.proxies.end() ? ProxyConfig{} : pit->second;
    std::vector<LossRow> rows;
    for (int m : bit_set) {
      if (designer == Designer::LloydVector && !vq_feasible(m, codebooks.policy())) continue;
      const Codebook& cb = codebooks.get(designer, m);
      LossRow r;
      r.bits = m;
      r.designer = designer;
      const bool scalar = !std::holds_alternative<LloydCodebook>(cb) || std::get<LloydCodebook>(cb).group() == 1;
      if (proxy.kind == ProxyKind::WeightMse && scalar) {
        r.raw_loss = closed_form_mse(posteriors[i], cb);
      } else {
        const auto est = mc_proxy(posteriors[i], cb, proxy, opt.mc_samples, opt.seed);
        r.raw_loss = est.loss;
        r.se = est.se;
      }
      rows.push_back(r);
    }
    if (rows.empty()) throw InvalidArgument("build_table: no feasible bit-width for " + b.id);
    t.violations += clamp_rows(rows);
    t.block_ids.push_back(b.id);
    t.rows[b.id] = std::move(rows);
  }
  return t;
}

std::map<std::string, std::vector<MarginalGain>> marginal_gains(const LossTable& table, const CostFunction& cost) {
  std::map<std::string, std::vector<MarginalGain>> out;
  for (const auto& id : table.block_ids) {
    const auto& rows = table.rows.at(id);
    std::vector<MarginalGain> gains;
    for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
      MarginalGain g;
      g.from = rows[i].bits;
      g.to = rows[i + 1].bits;
      g.delta = rows[i].loss - rows[i + 1].loss;
      g.cost_increment = cost(id, g.to) - cost(id, g.from);
      if (g.cost_increment <= 0)
        throw InvalidArgument("marginal_gains: costs for '" + id + "' are not strictly increasing in m");
      g.gamma = g.delta / static_cast<double>(g.cost_increment);
      const double se = std::hypot(rows[i].se, rows[i + 1].se);
      g.noisy = se > 0 && g.delta <= 2.0 * se;
      gains.push_back(g);
    }
    out[id] = std::move(gains);
  }
  return out;
}

void write_table(const LossTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "block\tm\tloss\tse\tdesigner\traw_loss\n";
  for (const auto& id : table.block_ids)
    for (const auto& r : table.rows.at(id))
      out << id << '\t' << r.bits << '\t' << real(r.loss) << '\t' << real(r.se) << '\t' << to_string(r.designer) << '\t'
          << real(r.raw_loss) << '\n';
  if (!out) throw Error("I/O failure writing " + path.string());
}

LossTable read_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty table");
  LossTable t;
  std::set<int> bits;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, m, loss, se, designer, raw;
    if (!std::getline(ss, id, '\t') || !std::getline(ss, m, '\t') || !std::getline(ss, loss, '\t'))
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected block, m, loss");
    std::getline(ss, se, '\t');
    std::getline(ss, designer, '\t');
    std::getline(ss, raw, '\t');
    LossRow r;
    try {
      r.bits = std::stoi(m);
      r.loss = std::stod(loss);
      r.se = se.empty() ? 0.0 : std::stod(se);
      r.designer = designer.empty() ? Designer::Uniform : designer_from_string(designer);
      r.raw_loss = raw.empty() ? r.loss : std::stod(raw);
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!t.rows.count(id)) t.block_ids.push_back(id);
    t.rows[id].push_back(r);
    bits.insert(r.bits);
  }
  t.bit_set.assign(bits.begin(), bits.end());
  for (auto& [id, rows] : t.rows) {
    std::sort(rows.begin(), rows.end(), [](const LossRow& a, const LossRow& b) { return a.bits < b.bits; });
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (rows[i].bits == rows[i - 1].bits) throw FormatError(path.string() + ": duplicate row for block " + id);
  }
  return t;
}

}  // namespace bayesq

#include "bayesq/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "bayesq/error.hpp"
#include "file_io.hpp"

namespace bayesq {

namespace {

using json = nlohmann::ordered_json;

json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json to_json(const Matrix& m) {
  json data = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Vector vector_of(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Matrix matrix_of(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw FormatError("matrix payload has the wrong length");
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[k++].get<double>();
  return m;
}

json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(detail::read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const std::filesystem::path& path) { detail::write_file(path, j.dump(1) + "\n"); }

std::uint64_t block_seed(std::uint64_t seed, std::size_t index) {
  return seed * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull * (index + 1);
}

template <class F>
auto stage(const char* name, const std::string& block, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const VerificationError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, block, e.what());
  }
}

bool quantized(const Workspace& ws, const WeightBlock& b) { return ws.designer_for(b) != Designer::None; }

std::vector<BlockPosterior> aligned_posteriors(const Workspace& ws, const PosteriorMap& posts) {
  std::vector<BlockPosterior> out;
  for (const auto& b : ws.blocks) {
    if (!quantized(ws, b)) {
      out.emplace_back();
      continue;
    }
    const auto it = posts.find(b.id);
    if (it == posts.end()) throw StageError("build-table", b.id, "no posterior for block");
    out.push_back(it->second);
  }
  return out;
}

ProxyConfig proxy_for(const Workspace& ws, const WeightBlock& b, const PipelineConfig& cfg) {
  ProxyConfig p;
  if (cfg.proxy == ProxyKind::WeightMse) return p;
  const auto s = ws.slices.find(b.id);
  if (s == ws.slices.end() || !ws.net) return p;
  if (!s->second.whole)
    throw ConfigError("table.proxy = " + to_string(cfg.proxy) + " needs the per-tensor partition");
  const auto& layer = ws.net->layers[static_cast<std::size_t>(s->second.layer)];
  p.kind = cfg.proxy;
  p.tau = cfg.proxy_tau;
  p.teacher = cfg.teacher;
  if (cfg.proxy == ProxyKind::LayerOutput) {
    p.activations = layer_inputs(*ws.net, s->second.layer, ws.calibration);
    p.rows = layer.w.rows();
    p.cols = layer.w.cols();
  } else {
    p.net = &*ws.net;
    p.layer = s->second.layer;
    p.inputs = ws.calibration;
  }
  return p;
}

json codebook_json(Designer d, int m, const Codebook& cb) {
  json j{{"designer", to_string(d)}, {"bits", m}};
  if (const auto* u = std::get_if<UniformCodebook>(&cb)) {
    j["type"] = "uniform";
    j["alpha"] = u->alpha;
  } else {
    const auto& l = std::get<LloydCodebook>(cb);
    j["type"] = "lloyd";
    j["codepoints"] = to_json(l.codepoints);
    j["boundaries"] = to_json(l.boundaries);
    j["objective"] = l.objective;
    j["iterations"] = l.iterations;
    j["converged"] = l.converged;
  }
  return j;
}

}  // namespace

const WeightBlock& Workspace::block(const std::string& id) const {
  for (const auto& b : blocks)
    if (b.id == id) return b;
  throw InvalidArgument("no block '" + id + "'");
}

Matrix read_matrix(const std::filesystem::path& path) {
  std::istringstream in(detail::read_file(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::vector<double> r;
    std::string tok;
    while (ss >> tok) {
      try {
        r.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + tok + "'");
      }
    }
    if (r.empty()) continue;
    if (!rows.empty() && r.size() != rows.front().size())
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": ragged row");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw FormatError(path.string() + ": no rows");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

void write_matrix(const Matrix& m, const std::filesystem::path& path) {
  std::ostringstream out;
  char buf[40];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
      out << (j ? "\t" : "") << buf;
    }
    out << '\n';
  }
  detail::write_file(path, out.str());
}

Workspace load_workspace(const PipelineConfig& cfg) {
  Workspace ws;
  ws.model = stage("load", "", [&] { return load_model(cfg.model); });
  ws.policy = cfg.designers;
  std::set<std::string> biases;
  if (!ws.model.manifest.net.empty()) {
    ws.net = stage("load", "", [&] { return net_from_model(ws.model); });
    for (const auto& spec : ws.model.manifest.net)
      if (!spec.bias.empty()) biases.insert(spec.bias);
  }
  for (const auto& id : biases) ws.policy.per_block.try_emplace(id, Designer::None);
  for (auto b : ws.model.blocks) {
    b.group_size = cfg.group_size;
    if (biases.count(b.id)) {
      ws.blocks.push_back(std::move(b));
      continue;
    }
    const int layer = ws.net ? ws.net->layer_of(b.id) : -1;
    const auto parts = stage("load", b.id, [&] { return partition(b, cfg.partition); });
    Eigen::Index offset = 0;
    for (const auto& p : parts) {
      if (layer >= 0) ws.slices[p.id] = {layer, offset, parts.size() == 1};
      offset += p.size();
      ws.blocks.push_back(p);
    }
  }
  if (!cfg.calibration.empty()) {
    ws.calibration = stage("load", "", [&] { return read_matrix(cfg.calibration); });
    if (ws.net && ws.calibration.cols() != ws.net->input_dim())
      throw StageError("load", "", "calibration inputs have " + std::to_string(ws.calibration.cols()) +
                                       " columns, the net expects " + std::to_string(ws.net->input_dim()));
  }
  return ws;
}

PosteriorMap fit_posteriors(const Workspace& ws, const PipelineConfig& cfg) {
  if (ws.net && ws.calibration.rows() == 0)
    throw StageError("fit-posterior", "", "toy nets need calibration inputs (model.calibration)");
  const bool small = cfg.small_calib || (ws.calibration.rows() > 0 && ws.calibration.rows() < 50);
  PosteriorMap out;
  for (std::size_t i = 0; i < ws.blocks.size(); ++i) {
    const auto& b = ws.blocks[i];
    if (!quantized(ws, b)) continue;
    out[b.id] = stage("fit-posterior", b.id, [&] {
      const std::uint64_t seed = block_seed(cfg.seed, i);
      DiagLaplaceOptions diag;
      diag.probes = cfg.probes;
      diag.damping = cfg.damping;
      diag.seed = seed;
      diag.rule = cfg.damping_rule;
      diag.small_calib = small;
      const auto s = ws.slices.find(b.id);
      CurvatureOracle oracle;
      if (s != ws.slices.end()) {
        oracle = ggn_oracle(*ws.net, s->second.layer, ws.calibration);
        if (!s->second.whole) oracle = restrict_oracle(oracle, s->second.offset, b.size());
      } else {
        oracle = diagonal_oracle(Vector::Ones(b.size()));
      }
      switch (cfg.posterior) {
        case PosteriorKind::Kfac:
          if (s != ws.slices.end()) {
            if (!s->second.whole) throw ConfigError("posterior.kind = kfac needs the per-tensor partition");
            KfacOptions ko;
            ko.beta = cfg.kfac_beta;
            ko.damping = small ? 5 * cfg.damping : cfg.damping;
            return fit_kfac(b, kfac_batches(*ws.net, s->second.layer, ws.calibration, cfg.kfac_batch, seed), ko);
          }
          return fit_diag_laplace(b, oracle, diag);
        case PosteriorKind::LowRank: {
          LowRankOptions lo;
          lo.rank = std::min<Eigen::Index>(cfg.rank, b.size());
          lo.diag = diag;
          return fit_lowrank_diag(b, oracle, lo);
        }
        case PosteriorKind::Diagonal:
          break;
      }
      return fit_diag_laplace(b, oracle, diag);
    });
  }
  return out;
}

void save_posteriors(const PosteriorMap& posts, const std::filesystem::path& path) {
  json j = json::object();
  for (const auto& [id, p] : posts) {
    json e{{"mu", to_json(p.mu)}, {"damping", p.damping}, {"probes", p.probes}, {"seed", p.seed}};
    std::visit(
        [&](const auto& c) {
          using T = std::decay_t<decltype(c)>;
          if constexpr (std::is_same_v<T, DiagonalCov>) {
            e["cov"] = {{"type", "diagonal"}, {"variances", to_json(c.variances)}};
          } else if constexpr (std::is_same_v<T, KroneckerCov>) {
            e["cov"] = {{"type", "kronecker"},
                        {"rows", c.rows},
                        {"cols", c.cols},
                        {"a_chol", to_json(c.a_chol)},
                        {"g_chol", to_json(c.g_chol)}};
          } else if constexpr (std::is_same_v<T, LowRankDiagCov>) {
            e["cov"] = {{"type", "lowrank"}, {"u", to_json(c.u)}, {"v", to_json(c.v)}, {"sign", c.sign}};
          } else {
            e["cov"] = {{"type", "dense"}, {"sigma", to_json(c.sigma)}};
          }
        },
        p.cov);
    j[id] = std::move(e);
  }
  write_json(j, path);
}

PosteriorMap load_posteriors(const std::filesystem::path& path) {
  const json j = read_json(path);
  PosteriorMap out;
  try {
    for (const auto& [id, e] : j.items()) {
      BlockPosterior p;
      p.mu = vector_of(e.at("mu"));
      p.damping = e.at("damping").get<double>();
      p.probes = e.at("probes").get<int>();
      p.seed = e.at("seed").get<std::uint64_t>();
      const auto& c = e.at("cov");
      const auto type = c.at("type").get<std::string>();
      if (type == "diagonal") {
        p.cov = DiagonalCov{vector_of(c.at("variances"))};
      } else if (type == "kronecker") {
        KroneckerCov k;
        k.rows = c.at("rows").get<Eigen::Index>();
        k.cols = c.at("cols").get<Eigen::Index>();
        k.a_chol = matrix_of(c.at("a_chol"));
        k.g_chol = matrix_of(c.at("g_chol"));
        p.cov = std::move(k);
      } else if (type == "lowrank") {
        p.cov = LowRankDiagCov{matrix_of(c.at("u")), vector_of(c.at("v")), c.value("sign", 1.0)};
      } else if (type == "dense") {
        p.cov = DenseCov{matrix_of(c.at("sigma"))};
      } else {
        throw FormatError("unknown covariance type '" + type + "'");
      }
      p.validate();
      out[id] = std::move(p);
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return out;
}

CodebookCache design_codebooks(const Workspace& ws, const PipelineConfig& cfg) {
  CodebookCache cache(ws.policy);
  std::set<Designer> used;
  for (const auto& b : ws.blocks)
    if (quantized(ws, b)) used.insert(ws.designer_for(b));
  for (Designer d : used)
    for (int m : cfg.bit_set) {
      if (d == Designer::LloydVector && !vq_feasible(m, ws.policy)) continue;
      stage("design-codebooks", "", [&] { return cache.get(d, m); });
    }
  return cache;
}

void save_codebooks(const CodebookCache& cache, const std::filesystem::path& path) {
  json j = json::array();
  for (const auto& [key, cb] : cache.entries()) j.push_back(codebook_json(key.first, key.second, cb));
  write_json(j, path);
}

CodebookCache load_codebooks(const std::filesystem::path& path, const DesignerPolicy& policy) {
  const json j = read_json(path);
  CodebookCache cache(policy);
  try {
    for (const auto& e : j) {
      const Designer d = designer_from_string(e.at("designer").get<std::string>());
      const int m = e.at("bits").get<int>();
      if (e.at("type").get<std::string>() == "uniform") {
        cache.put(d, m, UniformCodebook::make(m, e.at("alpha").get<double>()));
      } else {
        LloydCodebook l;
        l.codepoints = matrix_of(e.at("codepoints"));
        l.boundaries = vector_of(e.at("boundaries"));
        l.objective = e.at("objective").get<std::vector<double>>();
        l.iterations = e.at("iterations").get<int>();
        l.converged = e.at("converged").get<bool>();
        cache.put(d, m, std::move(l));
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return cache;
}

LossTable build_loss_table(const Workspace& ws, const PosteriorMap& posts, CodebookCache& cache,
                           const PipelineConfig& cfg) {
  TableOptions opt;
  opt.mc_samples = cfg.mc_samples;
  opt.seed = cfg.seed;
  for (const auto& b : ws.blocks)
    if (quantized(ws, b)) opt.proxies[b.id] = proxy_for(ws, b, cfg);
  const auto aligned = aligned_posteriors(ws, posts);
  return stage("build-table", "", [&] { return build_table(ws.blocks, aligned, cfg.bit_set, cache, opt); });
}

AllocationRun allocate_bits(const Workspace& ws, const LossTable& table, const PosteriorMap* posts,
                            CodebookCache* cache, const PipelineConfig& cfg) {
  std::map<std::string, double> saliency;
  if (posts)
    for (const auto& [id, p] : *posts) saliency[id] = p.saliency();
  std::map<std::string, int> floors;
  if (cfg.bit_floor > 0)
    for (const auto& id : table.block_ids) floors[id] = cfg.bit_floor;
  for (const auto& [id, f] : cfg.floors) floors[id] = f;
  AllocationRun run;
  run.problem = stage("allocate", "", [&] { return make_problem(table, ws.blocks, cfg.cost, saliency, floors); });
  auto& p = run.problem;
  if (cfg.target_bits) {
    p.budget = budget_from_target(*cfg.target_bits, p.total_weights());
    p.target_average = cfg.target_bits;
  } else {
    p.budget = *cfg.budget_bits;
  }
  p.eta = cfg.eta;
  p.packing = cfg.packing;
  p.lambda_reg = cfg.lambda_reg;
  if (cfg.rescore_every > 0 && cfg.rescore_top_k > 0 && posts && cache) {
    p.rescore.every = cfg.rescore_every;
    p.rescore.top_k = cfg.rescore_top_k;
    p.rescore.estimate = [&ws, posts, cache, &cfg](const AllocBlock& ab) {
      const auto& b = ws.block(ab.id);
      const auto& post = posts->at(ab.id);
      const ProxyConfig proxy = proxy_for(ws, b, cfg);
      std::vector<double> out;
      for (int m : ab.bits)
        out.push_back(
            mc_proxy(post, cache->get(ws.designer_for(b), m), proxy, cfg.rescore_samples, cfg.seed + 1).loss);
      return out;
    };
  }
  run.allocation = stage("allocate", "", [&] { return greedy_allocate(p); });
  return run;
}

Whitener deployment_whitener(const WeightBlock& block, Designer designer) {
  const Eigen::Index d = block.size();
  const Vector w = block.values.cast<double>();
  Vector sigma(d);
  auto rms = [&](Eigen::Index start, Eigen::Index len) {
    const double r = std::sqrt(w.segment(start, len).squaredNorm() / static_cast<double>(len));
    return r > 0 && std::isfinite(r) ? r : 1.0;
  };
  if (designer == Designer::LloydVector) {
    sigma.setConstant(rms(0, d));
  } else {
    const Eigen::Index g = block.group_size;
    for (Eigen::Index s = 0; s < d; s += g) {
      const Eigen::Index len = std::min(g, d - s);
      sigma.segment(s, len).setConstant(rms(s, len));
    }
  }
  return Whitener::diagonal(Vector::Zero(d), sigma);
}

PackedModel export_model(const Workspace& ws, const std::map<std::string, int>& bits, CodebookCache& cache,
                         const PipelineConfig& cfg) {
  PackedModel pm;
  pm.cost = cfg.cost;
  for (const auto& b : ws.blocks) {
    const Designer d = ws.designer_for(b);
    pm.blocks.push_back(stage("export", b.id, [&] {
      if (d == Designer::None) return pack_block(b, 32, d, nullptr, nullptr, cfg.cost);
      const auto it = bits.find(b.id);
      if (it == bits.end()) throw InvalidArgument("allocation does not cover this block");
      const Whitener wh = deployment_whitener(b, d);
      return pack_block(b, it->second, d, &cache.get(d, it->second), &wh, cfg.cost, cfg.export_mode);
    }));
  }
  return pm;
}

ToyNet net_from_packed(const Workspace& ws, const PackedModel& packed) {
  if (!ws.net) throw InvalidArgument("model carries no net topology");
  ToyNet net = *ws.net;
  for (auto& l : net.layers) {
    Vector w(l.w.size());
    Eigen::Index offset = 0;
    for (const auto& [id, s] : ws.slices) {
      if (ws.net->layers[static_cast<std::size_t>(s.layer)].weight_id != l.weight_id) continue;
      const Vector part = packed.block(id).dequantize();
      w.segment(s.offset, part.size()) = part;
      offset += part.size();
    }
    if (offset != w.size()) throw InvalidArgument("packed model does not cover layer " + l.weight_id);
    l.w = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(w.data(), l.w.rows(),
                                                                                                   l.w.cols());
    if (!l.bias_id.empty()) l.b = packed.block(l.bias_id).dequantize();
  }
  return net;
}

DistillRun distill_model(const Workspace& ws, const PackedModel& packed, const PosteriorMap& posts,
                         const PipelineConfig& cfg) {
  return stage("distill", "", [&] {
    if (!ws.net) throw InvalidArgument("distillation needs a toy net");
    if (ws.calibration.rows() == 0) throw InvalidArgument("distillation needs calibration inputs");
    // Start from the packed model so passthrough blocks and biases match deployment.
    const ToyNet deployed = net_from_packed(ws, packed);
    std::vector<QuantizedLayer> qlayers;
    LayerPosteriors lp;
    for (const auto& [id, s] : ws.slices) {
      if (!s.whole) throw ConfigError("distill needs the per-tensor partition");
      const auto& pb = packed.block(id);
      if (pb.designer == Designer::None) continue;
      QuantizedLayer q;
      q.layer = s.layer;
      q.indices = pb.indices();
      q.groups = pb.groups;
      q.group_size = pb.group_size;
      q.vq_group = pb.vq_group;
      qlayers.push_back(std::move(q));
      if (const auto it = posts.find(id); it != posts.end()) lp.emplace(s.layer, it->second);
    }
    std::sort(qlayers.begin(), qlayers.end(),
              [](const QuantizedLayer& a, const QuantizedLayer& b) { return a.layer < b.layer; });
    const auto t = teacher(*ws.net, lp, ws.calibration, cfg.teacher_samples, cfg.distill_tau, cfg.seed);
    DistillRun run;
    run.result = distill_scales(deployed, qlayers, t, ws.calibration, cfg.distill_options);
    run.packed = packed;
    for (std::size_t k = 0; k < qlayers.size(); ++k) {
      const auto& id = ws.net->layers[static_cast<std::size_t>(qlayers[k].layer)].weight_id;
      for (auto& pb : run.packed.blocks)
        if (pb.id == id)
          for (std::size_t g = 0; g < pb.groups.size(); ++g) pb.groups[g].scale = run.result.scales[k][g];
    }
    return run;
  });
}

void write_kl_trace(const DistillResult& r, const std::filesystem::path& path) {
  std::ostringstream out;
  char buf[40];
  out << "step\tkl\n";
  for (std::size_t i = 0; i < r.kl_trace.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", r.kl_trace[i]);
    out << i << '\t' << buf << '\n';
  }
  detail::write_file(path, out.str());
}

std::vector<FrontierRow> frontier(const Workspace& ws, const PipelineConfig& cfg) {
  std::vector<FrontierRow> rows;
  for (const auto seed : cfg.frontier_seeds) {
    PipelineConfig c = cfg;
    c.seed = seed;
    const auto posts = fit_posteriors(ws, c);
    auto cache = design_codebooks(ws, c);
    const auto table = build_loss_table(ws, posts, cache, c);
    for (const double target : cfg.frontier_targets) {
      c.target_bits = target;
      c.budget_bits.reset();
      const auto run = allocate_bits(ws, table, &posts, &cache, c);
      rows.push_back({target, run.problem.budget, run.allocation.loss, run.allocation.average_bits, seed});
    }
  }
  return rows;
}

void write_frontier(const std::vector<FrontierRow>& rows, const std::filesystem::path& path) {
  std::ostringstream out;
  char buf[128];
  out << "target\tbudget\tloss\taverage_bits\tseed\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g\t%lld\t%.17g\t%.17g\t%llu", r.target, static_cast<long long>(r.budget),
                  r.loss, r.average_bits, static_cast<unsigned long long>(r.seed));
    out << buf << '\n';
  }
  detail::write_file(path, out.str());
}

std::string make_report(const PipelineConfig& cfg, const LossTable& table, const AllocationRun& alloc,
                        const PackedModel& packed, const DistillResult* distill) {
  const auto& a = alloc.allocation;
  const auto& p = alloc.problem;
  json j;
  j["seed"] = cfg.seed;
  j["posterior"] = to_string(cfg.posterior);
  j["bit_set"] = cfg.bit_set;
  if (cfg.target_bits) j["target_bits"] = *cfg.target_bits;
  j["budget_bits"] = p.budget;
  j["allocated_cost_bits"] = a.cost;
  j["allocated_weights"] = p.total_weights();
  j["achieved_average_bits"] = a.average_bits;
  j["under_target"] = a.under_target;
  j["expected_loss"] = a.loss;
  j["packed_total_bits"] = packed.total_bits();
  j["packed_average_bits"] = packed.average_bits();
  json blocks = json::array();
  for (std::size_t i = 0; i < a.ids.size(); ++i) blocks.push_back({{"id", a.ids[i]}, {"bits", a.bits[i]}});
  j["blocks"] = std::move(blocks);
  json trace = json::array();
  for (const auto& u : a.trace)
    trace.push_back({{"step", u.step},
                     {"block", p.blocks[u.block].id},
                     {"from", u.from},
                     {"to", u.to},
                     {"gamma", u.gamma},
                     {"cost_after", u.cost_after},
                     {"loss_after", u.loss_after}});
  j["trace"] = std::move(trace);
  j["rescores"] = a.rescores;
  json tab = json::array();
  for (const auto& id : table.block_ids)
    for (const auto& r : table.rows.at(id))
      tab.push_back({{"block", id}, {"m", r.bits}, {"loss", r.loss}, {"se", r.se}, {"designer", to_string(r.designer)}});
  j["loss_table"] = std::move(tab);
  j["isotonic_violations"] = table.violations;
  if (distill) {
    j["distill"] = {{"initial_kl", distill->kl_trace.empty() ? 0.0 : distill->kl_trace.front()},
                    {"final_kl", distill->final_kl},
                    {"halvings", distill->halvings},
                    {"aborted", distill->aborted},
                    {"kl_trace", distill->kl_trace}};
  }
  return j.dump(1) + "\n";
}

RunResult run_pipeline(const PipelineConfig& cfg) {
  RunResult r;
  const auto dir = cfg.out;
  std::filesystem::create_directories(dir);
  auto timed = [&](const char* name, auto&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    r.timings.emplace_back(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };
  Workspace ws;
  PosteriorMap posts;
  std::optional<CodebookCache> cache;
  timed("load", [&] { ws = load_workspace(cfg); });
  timed("fit-posterior", [&] {
    posts = fit_posteriors(ws, cfg);
    save_posteriors(posts, dir / files::posteriors);
  });
  timed("design-codebooks", [&] {
    cache.emplace(design_codebooks(ws, cfg));
    save_codebooks(*cache, dir / files::codebooks);
  });
  timed("build-table", [&] {
    r.table = build_loss_table(ws, posts, *cache, cfg);
    write_table(r.table, dir / files::table);
  });
  timed("allocate", [&] {
    r.allocation = allocate_bits(ws, r.table, &posts, &*cache, cfg);
    write_allocation(r.allocation.allocation, r.allocation.problem, dir / files::allocation);
    write_trace(r.allocation.allocation, r.allocation.problem, dir / files::trace);
  });
  timed("export", [&] {
    std::map<std::string, int> bits;
    for (std::size_t i = 0; i < r.allocation.allocation.ids.size(); ++i)
      bits[r.allocation.allocation.ids[i]] = r.allocation.allocation.bits[i];
    r.packed = export_model(ws, bits, *cache, cfg);
    export_packed(r.packed, dir / files::packed);
  });
  if (cfg.distill) {
    timed("distill", [&] {
      r.distill = distill_model(ws, r.packed, posts, cfg);
      export_packed(r.distill->packed, dir / files::distilled);
      write_kl_trace(r.distill->result, dir / files::kl_trace);
    });
  }
  detail::write_file(dir / files::report,
                     make_report(cfg, r.table, r.allocation, r.packed, r.distill ? &r.distill->result : nullptr));
  std::ostringstream t;
  t << "stage\tseconds\n";
  for (const auto& [name, s] : r.timings) t << name << '\t' << s << '\n';
  detail::write_file(dir / files::timings, t.str());
  return r;
}

}  // namespace bayesq

#include "bayesq/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <functional>
#include <sstream>

#include "bayesq/error.hpp"

namespace bayesq {

namespace {

namespace pt = boost::property_tree;

template <class T>
T number(const std::string& key, const std::string& v) {
  std::istringstream ss(v);
  T out{};
  if (!(ss >> out) || !(ss >> std::ws).eof()) throw ConfigError("'" + key + "': cannot parse '" + v + "'");
  return out;
}

bool boolean(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("'" + key + "': expected a boolean, got '" + v + "'");
}

template <class T>
std::vector<T> list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    const auto b = item.find_last_not_of(" \t");
    if (a == std::string::npos) continue;
    out.push_back(number<T>(key, item.substr(a, b - a + 1)));
  }
  return out;
}

// Wraps enum parsers so failures surface as configuration errors.
template <class F>
auto parsed(const std::string& key, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("'" + key + "': " + e.what());
  }
}

using Setter = std::function<void(PipelineConfig&, const std::string& key, const std::string& value)>;

}  // namespace

std::string to_string(PosteriorKind k) {
  switch (k) {
    case PosteriorKind::Diagonal: return "diag";
    case PosteriorKind::Kfac: return "kfac";
    case PosteriorKind::LowRank: return "lowrank";
  }
  return "diag";
}

PosteriorKind posterior_kind_from_string(const std::string& s) {
  if (s == "diag") return PosteriorKind::Diagonal;
  if (s == "kfac") return PosteriorKind::Kfac;
  if (s == "lowrank") return PosteriorKind::LowRank;
  throw InvalidArgument("unknown posterior kind '" + s + "'");
}

void PipelineConfig::validate() const {
  if (model.empty()) throw ConfigError("model.path is required");
  if (target_bits.has_value() == budget_bits.has_value())
    throw ConfigError("exactly one of budget.target_bits and budget.total_bits must be set");
  if (target_bits && !(*target_bits > 0)) throw ConfigError("budget.target_bits must be positive");
  if (budget_bits && *budget_bits <= 0) throw ConfigError("budget.total_bits must be positive");
  if (bit_set.empty()) throw ConfigError("quantizer.bits must not be empty");
  for (std::size_t i = 0; i < bit_set.size(); ++i) {
    if (bit_set[i] < 1 || bit_set[i] > 16) throw ConfigError("quantizer.bits entries must lie in [1, 16]");
    if (i > 0 && bit_set[i] <= bit_set[i - 1]) throw ConfigError("quantizer.bits must be strictly increasing");
  }
  if (probes < 1) throw ConfigError("posterior.probes must be >= 1");
  if (damping < 0) throw ConfigError("posterior.damping must be >= 0");
  if (!(kfac_beta > 0 && kfac_beta <= 1)) throw ConfigError("posterior.beta must lie in (0, 1]");
  if (kfac_batch < 1) throw ConfigError("posterior.batch must be >= 1");
  if (rank < 0) throw ConfigError("posterior.rank must be >= 0");
  if (group_size < 1) throw ConfigError("model.group_size must be >= 1");
  if (mc_samples < 2) throw ConfigError("table.mc_samples must be >= 2");
  if (proxy_tau <= 0) throw ConfigError("table.tau must be positive");
  if (eta < 0) throw ConfigError("allocator.eta must be >= 0");
  if (lambda_reg < 0) throw ConfigError("allocator.lambda_reg must be >= 0");
  if (rescore_every < 0 || rescore_top_k < 0) throw ConfigError("allocator rescore settings must be >= 0");
  if (rescore_samples < 2) throw ConfigError("allocator.rescore_samples must be >= 2");
  if (distill_tau < 1) throw ConfigError("distill.tau must be >= 1");
  if (teacher_samples < 1) throw ConfigError("distill.samples must be >= 1");
  if (distill_options.steps < 0 || distill_options.learning_rate <= 0)
    throw ConfigError("distill.steps must be >= 0 and distill.lr positive");
  if (frontier_targets.empty() || frontier_seeds.empty()) throw ConfigError("frontier needs targets and seeds");
  try {
    cost.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("cost: ") + e.what());
  }
}

PipelineConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  auto path = [&](const std::string& v) {
    const std::filesystem::path p(v);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  };

  const std::map<std::string, std::map<std::string, Setter>> keys = {
      {"model",
       {{"path", [&](auto& c, auto&, auto& v) { c.model = path(v); }},
        {"calibration", [&](auto& c, auto&, auto& v) { c.calibration = path(v); }},
        {"partition", [](auto& c, auto& k, auto& v) { c.partition = parsed(k, [&] { return partition_policy_from_string(v); }); }},
        {"group_size", [](auto& c, auto& k, auto& v) { c.group_size = number<std::int64_t>(k, v); }}}},
      {"posterior",
       {{"kind", [](auto& c, auto& k, auto& v) { c.posterior = parsed(k, [&] { return posterior_kind_from_string(v); }); }},
        {"probes", [](auto& c, auto& k, auto& v) { c.probes = number<int>(k, v); }},
        {"damping", [](auto& c, auto& k, auto& v) { c.damping = number<double>(k, v); }},
        {"damping_rule",
         [](auto& c, auto& k, auto& v) {
           if (v == "fixed") c.damping_rule = DampingRule::Fixed;
           else if (v == "median") c.damping_rule = DampingRule::MedianHeuristic;
           else throw ConfigError("'" + k + "': expected fixed or median");
         }},
        {"small_calib", [](auto& c, auto& k, auto& v) { c.small_calib = boolean(k, v); }},
        {"beta", [](auto& c, auto& k, auto& v) { c.kfac_beta = number<double>(k, v); }},
        {"batch", [](auto& c, auto& k, auto& v) { c.kfac_batch = number<Eigen::Index>(k, v); }},
        {"rank", [](auto& c, auto& k, auto& v) { c.rank = number<Eigen::Index>(k, v); }},
        {"seed", [](auto& c, auto& k, auto& v) { c.seed = number<std::uint64_t>(k, v); }}}},
      {"quantizer",
       {{"bits", [](auto& c, auto& k, auto& v) { c.bit_set = list<int>(k, v); }},
        {"designer", [](auto& c, auto& k, auto& v) { c.designers.scalar = parsed(k, [&] { return designer_from_string(v); }); }},
        {"vq_group",
         [](auto& c, auto& k, auto& v) {
           c.designers.vq_group = number<Eigen::Index>(k, v);
           c.cost.vq_group = c.designers.vq_group;
         }},
        {"vq_pool", [](auto& c, auto& k, auto& v) { c.designers.vq_pool = number<Eigen::Index>(k, v); }},
        {"lloyd_max_iter", [](auto& c, auto& k, auto& v) { c.designers.lloyd.max_iter = number<int>(k, v); }},
        {"lloyd_tol", [](auto& c, auto& k, auto& v) { c.designers.lloyd.tol = number<double>(k, v); }},
        {"export",
         [](auto& c, auto& k, auto& v) {
           if (v == "lut") c.export_mode = ExportMode::Lut;
           else if (v == "least-squares") c.export_mode = ExportMode::LeastSquares;
           else throw ConfigError("'" + k + "': expected lut or least-squares");
         }}}},
      {"table",
       {{"proxy", [](auto& c, auto& k, auto& v) { c.proxy = parsed(k, [&] { return proxy_from_string(v); }); }},
        {"mc_samples", [](auto& c, auto& k, auto& v) { c.mc_samples = number<int>(k, v); }},
        {"tau", [](auto& c, auto& k, auto& v) { c.proxy_tau = number<double>(k, v); }},
        {"teacher",
         [](auto& c, auto& k, auto& v) {
           if (v == "posterior-predictive") c.teacher = KlTeacher::PosteriorPredictive;
           else if (v == "mean-weight") c.teacher = KlTeacher::MeanWeight;
           else throw ConfigError("'" + k + "': expected posterior-predictive or mean-weight");
         }}}},
      {"budget",
       {{"target_bits", [](auto& c, auto& k, auto& v) { c.target_bits = number<double>(k, v); }},
        {"total_bits", [](auto& c, auto& k, auto& v) { c.budget_bits = number<std::int64_t>(k, v); }}}},
      {"allocator",
       {{"eta", [](auto& c, auto& k, auto& v) { c.eta = number<double>(k, v); }},
        {"lane_bits", [](auto& c, auto& k, auto& v) { c.packing.lane_bits = number<std::int64_t>(k, v); }},
        {"preferred", [](auto& c, auto& k, auto& v) { c.packing.preferred = list<int>(k, v); }},
        {"lambda_reg", [](auto& c, auto& k, auto& v) { c.lambda_reg = number<double>(k, v); }},
        {"floor", [](auto& c, auto& k, auto& v) { c.bit_floor = number<int>(k, v); }},
        {"rescore_every", [](auto& c, auto& k, auto& v) { c.rescore_every = number<int>(k, v); }},
        {"rescore_top_k", [](auto& c, auto& k, auto& v) { c.rescore_top_k = number<int>(k, v); }},
        {"rescore_samples", [](auto& c, auto& k, auto& v) { c.rescore_samples = number<int>(k, v); }}}},
      {"cost",
       {{"scale_bits", [](auto& c, auto& k, auto& v) { c.cost.scale_bits = number<std::int64_t>(k, v); }},
        {"zero_point_bits", [](auto& c, auto& k, auto& v) { c.cost.zero_point_bits = number<std::int64_t>(k, v); }},
        {"code_bits", [](auto& c, auto& k, auto& v) { c.cost.code_bits = number<std::int64_t>(k, v); }},
        {"header_bits", [](auto& c, auto& k, auto& v) { c.cost.header_bits = number<std::int64_t>(k, v); }},
        {"lane_bits", [](auto& c, auto& k, auto& v) { c.cost.lane_bits = number<std::int64_t>(k, v); }}}},
      {"distill",
       {{"enabled", [](auto& c, auto& k, auto& v) { c.distill = boolean(k, v); }},
        {"steps", [](auto& c, auto& k, auto& v) { c.distill_options.steps = number<int>(k, v); }},
        {"lr", [](auto& c, auto& k, auto& v) { c.distill_options.learning_rate = number<double>(k, v); }},
        {"patience", [](auto& c, auto& k, auto& v) { c.distill_options.patience = number<int>(k, v); }},
        {"samples", [](auto& c, auto& k, auto& v) { c.teacher_samples = number<int>(k, v); }},
        {"tau", [](auto& c, auto& k, auto& v) { c.distill_tau = number<double>(k, v); }}}},
      {"frontier",
       {{"targets", [](auto& c, auto& k, auto& v) { c.frontier_targets = list<double>(k, v); }},
        {"seeds", [](auto& c, auto& k, auto& v) { c.frontier_seeds = list<std::uint64_t>(k, v); }}}},
      {"output", {{"dir", [&](auto& c, auto&, auto& v) { c.out = path(v); }}}},
  };

  PipelineConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
    const auto sk = keys.find(section);
    if (sk == keys.end()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, node] : body) {
      const std::string full = section + "." + key;
      const std::string value = node.data();
      if (section == "quantizer" && key.rfind("designer.", 0) == 0) {
        const auto target = key.substr(9);
        const Designer d = parsed(full, [&] { return designer_from_string(value); });
        try {
          cfg.designers.per_kind[block_kind_from_string(target)] = d;
        } catch (const InvalidArgument&) {
          cfg.designers.per_block[target] = d;
        }
        continue;
      }
      if (section == "allocator" && key.rfind("floor.", 0) == 0) {
        cfg.floors[key.substr(6)] = number<int>(full, value);
        continue;
      }
      const auto setter = sk->second.find(key);
      if (setter == sk->second.end()) throw ConfigError("config: unknown key " + full);
      setter->second(cfg, full, value);
    }
  }
  cfg.cost.group_size = cfg.group_size;
  cfg.designers.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

}  // namespace bayesq

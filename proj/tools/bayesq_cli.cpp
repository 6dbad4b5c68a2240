#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "bayesq/allocator.hpp"
#include "bayesq/config.hpp"
#include "bayesq/error.hpp"
#include "bayesq/metrics.hpp"
#include "bayesq/packer.hpp"
#include "bayesq/pipeline.hpp"

using namespace bayesq;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kConfig = 2, kStage = 3, kVerify = 4 };

struct Common {
  std::string config;
  std::string out;
  std::int64_t seed = -1;
};

void add_common(CLI::App* app, Common& c, bool config_required = true) {
  auto* opt = app->add_option("--config", c.config, "pipeline config (INI)");
  if (config_required) opt->required();
  app->add_option("--out", c.out, "output directory (overrides output.dir)");
  app->add_option("--seed", c.seed, "seed override");
}

PipelineConfig configure(const Common& c) {
  PipelineConfig cfg = load_config(c.config);
  if (!c.out.empty()) cfg.out = c.out;
  if (c.seed >= 0) {
    cfg.seed = static_cast<std::uint64_t>(c.seed);
    cfg.designers.seed = cfg.seed;
  }
  fs::create_directories(cfg.out);
  return cfg;
}

fs::path need(const fs::path& p) {
  if (!fs::exists(p)) throw StageError("input", "", "missing stage input " + p.string());
  return p;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// block, m, cost (header row first)
std::map<std::string, std::map<int, std::int64_t>> read_costs(const fs::path& path) {
  std::ifstream in(need(path));
  std::string line;
  std::getline(in, line);
  std::map<std::string, std::map<int, std::int64_t>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id;
    int m = 0;
    std::int64_t c = 0;
    if (!(ss >> id >> m >> c)) throw FormatError(path.string() + ": expected block, m, cost");
    out[id][m] = c;
  }
  return out;
}

void print_allocation(const Allocation& a) {
  std::cout << "block\tm\n";
  for (std::size_t i = 0; i < a.ids.size(); ++i) std::cout << a.ids[i] << '\t' << a.bits[i] << '\n';
  std::cout << "# cost " << a.cost << " bits, loss " << fmt(a.loss) << ", average " << fmt(a.average_bits)
            << (a.under_target ? " (under target)" : "") << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bayesq: posterior-guided mixed-precision quantization"};
  app.require_subcommand(1);

  Common common;
  auto* fit = app.add_subcommand("fit-posterior", "fit per-block Gaussian posteriors");
  add_common(fit, common);
  auto* design = app.add_subcommand("design-codebooks", "design codebooks for every designer and bit-width");
  add_common(design, common);
  auto* table = app.add_subcommand("build-table", "posterior-expected loss table");
  add_common(table, common);

  auto* alloc = app.add_subcommand("allocate", "greedy bit allocation under the budget");
  add_common(alloc, common, false);
  std::string table_path, costs_path;
  std::int64_t budget = -1;
  bool with_dp = false;
  alloc->add_option("--table", table_path, "loss table (default: <out>/loss_table.tsv)");
  alloc->add_option("--costs", costs_path, "explicit costs (block, m, cost); no model needed");
  alloc->add_option("--budget", budget, "total budget in bits (overrides the config)");
  alloc->add_flag("--dp", with_dp, "also report the exact DP optimum");

  auto* exp = app.add_subcommand("export", "pack the allocated model");
  add_common(exp, common);
  bool verify = false;
  exp->add_flag("--verify", verify, "re-import and check the packed model bit-exactly");

  auto* dist = app.add_subcommand("distill", "calibration-only scale distillation");
  add_common(dist, common);

  auto* met = app.add_subcommand("metrics", "metrics from a predictions file");
  std::string predictions;
  int bins = 15, jitter = 3;
  double k_percent = 10, alpha = 0.9;
  met->add_option("--predictions", predictions, "label, predicted, probabilities")->required();
  met->add_option("--bins", bins, "calibration bins");
  met->add_option("--jitter", jitter, "random bin boundary draws");
  met->add_option("--k", k_percent, "worst-k percent");
  met->add_option("--alpha", alpha, "CVaR level");

  auto* front = app.add_subcommand("frontier", "sweep budgets and seeds");
  add_common(front, common);

  auto* run = app.add_subcommand("run", "all stages end to end");
  add_common(run, common);

  auto* toy = app.add_subcommand("make-toy", "write a toy MLP, calibration inputs, and a config");
  std::string toy_out = "toy";
  std::string dims_text = "16,48,48,10";
  std::uint64_t toy_seed = 0;
  int toy_samples = 256;
  toy->add_option("--out", toy_out, "directory");
  toy->add_option("--dims", dims_text, "layer widths");
  toy->add_option("--seed", toy_seed, "seed");
  toy->add_option("--samples", toy_samples, "calibration rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*toy) {
      std::vector<Eigen::Index> dims;
      std::istringstream ss(dims_text);
      for (std::string t; std::getline(ss, t, ',');) dims.push_back(std::stol(t));
      if (dims.size() < 2) throw ConfigError("--dims needs at least two widths");
      fs::create_directories(toy_out);
      const ToyNet net = make_toy_mlp(dims, toy_seed);
      save_model(model_from_net(net), fs::path(toy_out) / "toy");
      std::mt19937_64 rng(toy_seed + 1);
      std::normal_distribution<double> n01;
      Matrix x(toy_samples, dims.front());
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n01(rng);
      write_matrix(x, fs::path(toy_out) / "calib.tsv");
      std::ofstream cfg(fs::path(toy_out) / "config.ini");
      cfg << "[model]\npath = toy\ncalibration = calib.tsv\n\n[posterior]\nkind = diag\nseed = " << toy_seed
          << "\n\n[quantizer]\nbits = 2,3,4,8\ndesigner = uniform\n\n[budget]\ntarget_bits = 3.0\n\n[output]\ndir = out\n";
      std::cout << "wrote " << toy_out << "/toy.manifest, calib.tsv, config.ini\n";
      return kOk;
    }
    if (*met) {
      const auto p = read_predictions(predictions);
      const auto cal = ece_mce(p, {bins, jitter, 0});
      const auto tail = worst_k_and_cvar(p, k_percent, alpha);
      std::vector<Eigen::MatrixXd> per;
      for (Eigen::Index i = 0; i < p.probs.rows(); ++i) per.push_back(p.probs.row(i));
      const auto unc = uncertainty_diagnostics(per);
      std::cout << "metric\tvalue\n"
                << "examples\t" << p.size() << '\n'
                << "top1\t" << fmt(top1_accuracy(p)) << '\n'
                << "ece\t" << fmt(cal.ece) << '\n'
                << "mce\t" << fmt(cal.mce) << '\n'
                << "worst_k_accuracy\t" << fmt(tail.worst_k_accuracy) << '\n'
                << "cvar\t" << fmt(tail.cvar) << '\n'
                << "predictive_entropy\t" << fmt(unc.predictive_entropy) << '\n';
      std::cout << "\nbin_lo\tbin_hi\tcount\tconfidence\taccuracy\n";
      for (const auto& b : reliability_bins(p, bins))
        std::cout << fmt(b.lo) << '\t' << fmt(b.hi) << '\t' << b.count << '\t' << fmt(b.confidence) << '\t'
                  << fmt(b.accuracy) << '\n';
      return kOk;
    }
    if (*alloc && !costs_path.empty()) {
      const auto t = read_table(table_path.empty() ? need("loss_table.tsv") : need(table_path));
      const auto costs = read_costs(costs_path);
      AllocationProblem p;
      for (const auto& id : t.block_ids) {
        AllocBlock b;
        b.id = id;
        for (const auto& r : t.rows.at(id)) {
          const auto c = costs.find(id);
          if (c == costs.end() || !c->second.count(r.bits))
            throw StageError("allocate", id, "no cost for m = " + std::to_string(r.bits));
          b.bits.push_back(r.bits);
          b.loss.push_back(r.loss);
          b.cost.push_back(c->second.at(r.bits));
        }
        p.blocks.push_back(std::move(b));
      }
      if (budget < 0) throw ConfigError("--costs needs --budget");
      p.budget = budget;
      const auto a = greedy_allocate(p);
      print_allocation(a);
      if (with_dp) std::cout << "# dp loss " << fmt(dp_oracle(p).loss) << '\n';
      if (!common.out.empty()) {
        fs::create_directories(common.out);
        write_allocation(a, p, fs::path(common.out) / files::allocation);
        write_trace(a, p, fs::path(common.out) / files::trace);
      }
      return kOk;
    }

    if (common.config.empty()) throw ConfigError("--config is required");
    PipelineConfig cfg = configure(common);
    const fs::path dir = cfg.out;

    if (*run) {
      const auto r = run_pipeline(cfg);
      print_allocation(r.allocation.allocation);
      std::cout << "# packed " << r.packed.total_bits() << " bits, " << fmt(r.packed.average_bits())
                << " bits/weight overall\n";
      if (r.distill)
        std::cout << "# distill KL " << fmt(r.distill->result.kl_trace.front()) << " -> "
                  << fmt(r.distill->result.final_kl) << '\n';
      return kOk;
    }

    const Workspace ws = load_workspace(cfg);
    if (*fit) {
      save_posteriors(fit_posteriors(ws, cfg), dir / files::posteriors);
    } else if (*design) {
      save_codebooks(design_codebooks(ws, cfg), dir / files::codebooks);
    } else if (*table) {
      const auto posts = load_posteriors(need(dir / files::posteriors));
      auto cache = load_codebooks(need(dir / files::codebooks), ws.policy);
      write_table(build_loss_table(ws, posts, cache, cfg), dir / files::table);
    } else if (*alloc) {
      const auto t = read_table(need(table_path.empty() ? dir / files::table : fs::path(table_path)));
      std::optional<PosteriorMap> posts;
      std::optional<CodebookCache> cache;
      if (fs::exists(dir / files::posteriors)) posts = load_posteriors(dir / files::posteriors);
      if (fs::exists(dir / files::codebooks)) cache.emplace(load_codebooks(dir / files::codebooks, ws.policy));
      if (budget >= 0) {
        cfg.budget_bits = budget;
        cfg.target_bits.reset();
      }
      const auto r = allocate_bits(ws, t, posts ? &*posts : nullptr, cache ? &*cache : nullptr, cfg);
      write_allocation(r.allocation, r.problem, dir / files::allocation);
      write_trace(r.allocation, r.problem, dir / files::trace);
      print_allocation(r.allocation);
      if (with_dp) std::cout << "# dp loss " << fmt(dp_oracle(r.problem).loss) << '\n';
    } else if (*exp) {
      auto cache = load_codebooks(need(dir / files::codebooks), ws.policy);
      const auto bits = read_allocation(need(dir / files::allocation));
      const auto packed = export_model(ws, bits, cache, cfg);
      export_packed(packed, dir / files::packed);
      if (verify) {
        const auto back = import_packed(dir / files::packed);
        if (back.blocks.size() != packed.blocks.size()) throw VerificationError("block count differs after import");
        for (std::size_t i = 0; i < packed.blocks.size(); ++i) {
          const auto a = packed.blocks[i].dequantize();
          const auto b = back.blocks[i].dequantize();
          if (a.size() != b.size() || (a.array() != b.array()).any())
            throw VerificationError("block " + packed.blocks[i].id + " does not roundtrip bit-exactly");
        }
        std::cout << "verified " << packed.blocks.size() << " blocks, " << packed.total_bits() << " bits\n";
      }
    } else if (*dist) {
      const auto packed = import_packed(need(dir / files::packed));
      const auto posts = load_posteriors(need(dir / files::posteriors));
      const auto r = distill_model(ws, packed, posts, cfg);
      export_packed(r.packed, dir / files::distilled);
      write_kl_trace(r.result, dir / files::kl_trace);
      std::cout << "KL " << fmt(r.result.kl_trace.front()) << " -> " << fmt(r.result.final_kl) << '\n';
    } else if (*front) {
      const auto rows = frontier(ws, cfg);
      write_frontier(rows, dir / files::frontier);
      std::cout << "target\tbudget\tloss\taverage_bits\tseed\n";
      for (const auto& r : rows)
        std::cout << fmt(r.target) << '\t' << r.budget << '\t' << fmt(r.loss) << '\t' << fmt(r.average_bits) << '\t'
                  << r.seed << '\n';
    }
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const VerificationError& e) {
    std::cerr << "verification failed: " << e.what() << '\n';
    return kVerify;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStage;
  }
}

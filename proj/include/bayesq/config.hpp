#ifndef BAYESQ_CONFIG_HPP
#define BAYESQ_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bayesq/allocator.hpp"
#include "bayesq/codebook.hpp"
#include "bayesq/losstable.hpp"
#include "bayesq/model_store.hpp"
#include "bayesq/packer.hpp"
#include "bayesq/posterior.hpp"
#include "bayesq/proxy_distill.hpp"

namespace bayesq {

enum class PosteriorKind { Diagonal, Kfac, LowRank };

std::string to_string(PosteriorKind k);
PosteriorKind posterior_kind_from_string(const std::string& s);

struct PipelineConfig {
  std::filesystem::path model;
  std::filesystem::path calibration;  // optional: whitespace-separated rows of inputs
  std::filesystem::path out = "bayesq_out";
  std::uint64_t seed = 0;

  PosteriorKind posterior = PosteriorKind::Diagonal;
  int probes = 16;
  double damping = 1e-3;
  DampingRule damping_rule = DampingRule::Fixed;
  bool small_calib = false;
  double kfac_beta = 0.05;
  Eigen::Index kfac_batch = 32;
  Eigen::Index rank = 32;

  PartitionPolicy partition;
  std::int64_t group_size = 64;

  std::vector<int> bit_set{2, 3, 4, 8};
  DesignerPolicy designers;
  ExportMode export_mode = ExportMode::Lut;

  ProxyKind proxy = ProxyKind::WeightMse;
  KlTeacher teacher = KlTeacher::PosteriorPredictive;
  double proxy_tau = 1.0;
  int mc_samples = 16;

  std::optional<double> target_bits;
  std::optional<std::int64_t> budget_bits;

  double eta = 0;
  PackingModel packing;
  double lambda_reg = 0;
  int bit_floor = 0;
  std::map<std::string, int> floors;
  int rescore_every = 0;
  int rescore_top_k = 0;
  int rescore_samples = 64;

  CostModel cost;

  bool distill = false;
  DistillOptions distill_options;
  int teacher_samples = 8;
  double distill_tau = 2.0;

  std::vector<double> frontier_targets{3.0, 3.5, 4.0};
  std::vector<std::uint64_t> frontier_seeds{0};

  /// Throws ConfigError.
  void validate() const;
};

/// INI file with sections; relative paths resolve against the file's directory.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});

}  // namespace bayesq

#endif  // BAYESQ_CONFIG_HPP

#ifndef BAYESQ_PIPELINE_HPP
#define BAYESQ_PIPELINE_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "bayesq/allocator.hpp"
#include "bayesq/config.hpp"
#include "bayesq/losstable.hpp"
#include "bayesq/packer.hpp"
#include "bayesq/posterior.hpp"
#include "bayesq/proxy_distill.hpp"

namespace bayesq {

/// Stage outputs inside the output directory.
namespace files {
inline constexpr const char* posteriors = "posteriors.json";
inline constexpr const char* codebooks = "codebooks.json";
inline constexpr const char* table = "loss_table.tsv";
inline constexpr const char* allocation = "allocation.tsv";
inline constexpr const char* trace = "trace.tsv";
inline constexpr const char* packed = "model.qmanifest";
inline constexpr const char* distilled = "distilled.qmanifest";
inline constexpr const char* kl_trace = "kl_trace.tsv";
inline constexpr const char* report = "report.json";
inline constexpr const char* timings = "timings.tsv";
inline constexpr const char* frontier = "frontier.tsv";
}  // namespace files

/// Where a quantized block sits inside the toy net.
struct LayerSlice {
  int layer = -1;
  Eigen::Index offset = 0;  // into the row-major weight matrix
  bool whole = true;        // the block is the full weight matrix
};

struct Workspace {
  Model model;
  std::vector<WeightBlock> blocks;  // partitioned, model order
  std::optional<ToyNet> net;
  Matrix calibration;
  std::map<std::string, LayerSlice> slices;
  DesignerPolicy policy;  // config policy with biases forced to passthrough

  const WeightBlock& block(const std::string& id) const;
  Designer designer_for(const WeightBlock& b) const { return policy.designer_for(b); }
};

Workspace load_workspace(const PipelineConfig& cfg);

/// Whitespace-separated rows; '#' starts a comment line.
Matrix read_matrix(const std::filesystem::path& path);
void write_matrix(const Matrix& m, const std::filesystem::path& path);

using PosteriorMap = std::map<std::string, BlockPosterior>;

PosteriorMap fit_posteriors(const Workspace& ws, const PipelineConfig& cfg);
void save_posteriors(const PosteriorMap& posts, const std::filesystem::path& path);
PosteriorMap load_posteriors(const std::filesystem::path& path);

/// Designs every (designer, m) pair the model needs.
CodebookCache design_codebooks(const Workspace& ws, const PipelineConfig& cfg);
void save_codebooks(const CodebookCache& cache, const std::filesystem::path& path);
CodebookCache load_codebooks(const std::filesystem::path& path, const DesignerPolicy& policy);

LossTable build_loss_table(const Workspace& ws, const PosteriorMap& posts, CodebookCache& cache,
                           const PipelineConfig& cfg);

struct AllocationRun {
  AllocationProblem problem;
  Allocation allocation;
};

/// Posteriors and codebooks are optional; they feed saliency and the rescore sweep.
AllocationRun allocate_bits(const Workspace& ws, const LossTable& table, const PosteriorMap* posts,
                            CodebookCache* cache, const PipelineConfig& cfg);

/// Zero-mean diagonal whitener with each coordinate scaled by the RMS of its
/// scale group (the whole block for vector codebooks).
Whitener deployment_whitener(const WeightBlock& block, Designer designer);

PackedModel export_model(const Workspace& ws, const std::map<std::string, int>& bits, CodebookCache& cache,
                         const PipelineConfig& cfg);

/// Dequantized weights put back into the toy net.
ToyNet net_from_packed(const Workspace& ws, const PackedModel& packed);

struct DistillRun {
  PackedModel packed;
  DistillResult result;
};

DistillRun distill_model(const Workspace& ws, const PackedModel& packed, const PosteriorMap& posts,
                         const PipelineConfig& cfg);
void write_kl_trace(const DistillResult& r, const std::filesystem::path& path);

struct FrontierRow {
  double target = 0;
  std::int64_t budget = 0;
  double loss = 0;
  double average_bits = 0;
  std::uint64_t seed = 0;
};

std::vector<FrontierRow> frontier(const Workspace& ws, const PipelineConfig& cfg);
void write_frontier(const std::vector<FrontierRow>& rows, const std::filesystem::path& path);

struct RunResult {
  PackedModel packed;
  LossTable table;
  AllocationRun allocation;
  std::optional<DistillRun> distill;
  std::vector<std::pair<std::string, double>> timings;  // seconds per stage
};

/// All stages in order; every stage output lands in cfg.out.
RunResult run_pipeline(const PipelineConfig& cfg);

/// Deterministic JSON summary of a run.
std::string make_report(const PipelineConfig& cfg, const LossTable& table, const AllocationRun& alloc,
                        const PackedModel& packed, const DistillResult* distill);

}  // namespace bayesq

#endif  // BAYESQ_PIPELINE_HPP

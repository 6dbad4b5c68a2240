#ifndef BAYESQ_ALLOCATOR_HPP
#define BAYESQ_ALLOCATOR_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bayesq/losstable.hpp"
#include "bayesq/packer.hpp"

namespace bayesq {

/// One block's candidate ladder. bits, loss, and cost are aligned and bits is
/// strictly increasing.
struct AllocBlock {
  std::string id;
  std::vector<int> bits;
  std::vector<double> loss;
  std::vector<std::int64_t> cost;
  std::vector<double> latency;  // optional, aligned with bits
  double saliency = 0;          // tr(Sigma^-1) / d
  std::int64_t weights = 0;
  std::int64_t group_size = 64;

  void validate() const;
};

struct PackingModel {
  std::int64_t lane_bits = 32;
  std::vector<int> preferred;  // preferred bit families, ties only
};

/// Re-estimates a block's raw losses (aligned with its bits).
using RescoreFunction = std::function<std::vector<double>(const AllocBlock&)>;

struct RescoreConfig {
  int every = 0;  // S; 0 disables
  int top_k = 0;
  RescoreFunction estimate;
};

struct AllocationProblem {
  std::vector<AllocBlock> blocks;
  std::int64_t budget = 0;
  double eta = 0;
  PackingModel packing;
  double lambda_reg = 0;
  bool use_latency = false;
  RescoreConfig rescore;
  std::optional<double> target_average;  // set when the budget came from a target

  std::int64_t min_cost() const;
  std::int64_t total_weights() const;
  void validate() const;
};

struct Upgrade {
  int step = 0;
  std::size_t block = 0;
  int from = 0;
  int to = 0;
  double gamma = 0;
  std::int64_t cost_after = 0;
  double loss_after = 0;

  bool operator==(const Upgrade&) const = default;
};

struct Allocation {
  std::vector<std::string> ids;
  std::vector<int> bits;
  std::int64_t cost = 0;
  double loss = 0;
  double average_bits = 0;
  std::vector<Upgrade> trace;
  bool under_target = false;  // target average missed by more than the tolerance
  int rescores = 0;

  int bits_of(const std::string& id) const;
};

constexpr double kAverageBitsTolerance = 0.02;

double regularized_density(double delta, std::int64_t cost_increment, double lambda_reg);

struct Candidate {
  std::size_t block = 0;
  std::size_t from = 0;  // index into the block's ladder
  double delta = 0;
  std::int64_t cost_increment = 0;
  double density = 0;
};

/// Resolves near-ties: larger delta, then higher saliency, then packing
/// alignment of the upgraded groups, then the lowest block index.
std::size_t tie_break(const std::vector<Candidate>& candidates, const AllocationProblem& problem);

/// Heap greedy with lazy deletion.
Allocation greedy_allocate(AllocationProblem problem);
/// Full rescan every step; reference for the heap version.
Allocation naive_greedy(AllocationProblem problem);

constexpr std::int64_t kDpUnitLimit = 1'000'000;

/// Exact separable knapsack. unit = 0 picks the gcd of all cost increments.
Allocation dp_oracle(const AllocationProblem& problem, std::int64_t unit = 0);

/// Replays a trace from the minimum assignment.
std::vector<int> replay(const AllocationProblem& problem, const std::vector<Upgrade>& trace);

std::int64_t budget_from_target(double target_average, std::int64_t total_weights);

/// Ladder for every table block, costed with the cost model.
AllocationProblem make_problem(const LossTable& table, const std::vector<WeightBlock>& blocks, const CostModel& cm,
                               const std::map<std::string, double>& saliency = {},
                               const std::map<std::string, int>& floors = {});

/// Total loss and cost for an explicit assignment (bits per block).
Allocation evaluate(const AllocationProblem& problem, const std::vector<int>& bits);

/// Columns: block, m, cost, loss.
void write_allocation(const Allocation& a, const AllocationProblem& problem, const std::filesystem::path& path);
/// Block id to bit-width.
std::map<std::string, int> read_allocation(const std::filesystem::path& path);
/// Columns: step, block, from, to, gamma, cost_after, loss_after.
void write_trace(const Allocation& a, const AllocationProblem& problem, const std::filesystem::path& path);

}  // namespace bayesq

#endif  // BAYESQ_ALLOCATOR_HPP

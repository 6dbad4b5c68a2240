#include "bayesq/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <sstream>

#include "bayesq/error.hpp"

namespace bayesq {

namespace {

std::string real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double packing_score(const AllocBlock& b, int bits, const PackingModel& pk) {
  if (pk.lane_bits <= 0 || b.weights <= 0) return 0;
  const std::int64_t g = b.group_size > 0 ? b.group_size : b.weights;
  const std::int64_t full = b.weights / g;
  const std::int64_t tail = b.weights % g;
  std::int64_t aligned = (g * bits) % pk.lane_bits == 0 ? full : 0;
  if (tail > 0 && (tail * bits) % pk.lane_bits == 0) ++aligned;
  return static_cast<double>(aligned) / static_cast<double>(full + (tail > 0 ? 1 : 0));
}

bool preferred(int bits, const PackingModel& pk) {
  return std::find(pk.preferred.begin(), pk.preferred.end(), bits) != pk.preferred.end();
}

// State shared by the heap and rescan variants.
struct Engine {
  AllocationProblem& p;
  std::vector<std::size_t> cur;
  std::vector<int> version;
  std::int64_t cost = 0;
  Allocation out;

  explicit Engine(AllocationProblem& problem) : p(problem) {
    p.validate();
    cur.assign(p.blocks.size(), 0);
    version.assign(p.blocks.size(), 0);
    cost = p.min_cost();
    if (cost > p.budget)
      throw InvalidArgument("allocation infeasible: minimum-bit cost " + std::to_string(cost) + " exceeds budget " +
                            std::to_string(p.budget));
  }

  std::optional<Candidate> candidate(std::size_t b) const {
    const auto& blk = p.blocks[b];
    const std::size_t j = cur[b];
    if (j + 1 >= blk.bits.size()) return std::nullopt;
    Candidate c;
    c.block = b;
    c.from = j;
    c.delta = blk.loss[j] - blk.loss[j + 1];
    c.cost_increment = blk.cost[j + 1] - blk.cost[j];
    if (p.use_latency) {
      const double dt = blk.latency[j + 1] - blk.latency[j];
      c.density = c.delta / dt - p.lambda_reg * static_cast<double>(c.cost_increment);
    } else {
      c.density = regularized_density(c.delta, c.cost_increment, p.lambda_reg);
    }
    return c;
  }

  bool fits(const Candidate& c) const { return cost + c.cost_increment <= p.budget; }

  double total_loss() const {
    double l = 0;
    for (std::size_t b = 0; b < p.blocks.size(); ++b) l += p.blocks[b].loss[cur[b]];
    return l;
  }

  void apply(const Candidate& c) {
    const auto& blk = p.blocks[c.block];
    cur[c.block] = c.from + 1;
    cost += c.cost_increment;
    Upgrade u;
    u.step = static_cast<int>(out.trace.size());
    u.block = c.block;
    u.from = blk.bits[c.from];
    u.to = blk.bits[c.from + 1];
    u.gamma = c.density;
    u.cost_after = cost;
    u.loss_after = total_loss();
    out.trace.push_back(u);
  }

  // Returns the blocks whose rows changed.
  std::vector<std::size_t> maybe_rescore(int step) {
    const auto& rs = p.rescore;
    if (rs.every <= 0 || rs.top_k <= 0 || !rs.estimate || step % rs.every != 0) return {};
    std::vector<Candidate> live;
    for (std::size_t b = 0; b < p.blocks.size(); ++b)
      if (auto c = candidate(b)) live.push_back(*c);
    std::stable_sort(live.begin(), live.end(),
                     [](const Candidate& a, const Candidate& b) { return a.density > b.density; });
    if (live.size() > static_cast<std::size_t>(rs.top_k)) live.resize(static_cast<std::size_t>(rs.top_k));
    std::vector<std::size_t> changed;
    for (const auto& c : live) {
      auto& blk = p.blocks[c.block];
      auto fresh = rs.estimate(blk);
      if (fresh.size() != blk.bits.size())
        throw InvalidArgument("rescore: estimator returned the wrong number of rows for " + blk.id);
      isotonic_nonincreasing(fresh);
      for (double& v : fresh) v = std::max(v, 0.0);
      blk.loss = std::move(fresh);
      ++version[c.block];
      changed.push_back(c.block);
    }
    ++out.rescores;
    return changed;
  }

  Allocation finish() {
    out.ids.clear();
    out.bits.clear();
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
      out.ids.push_back(p.blocks[b].id);
      out.bits.push_back(p.blocks[b].bits[cur[b]]);
    }
    out.cost = cost;
    out.loss = total_loss();
    const auto n = p.total_weights();
    out.average_bits = n > 0 ? static_cast<double>(cost) / static_cast<double>(n) : 0.0;
    out.under_target = p.target_average && *p.target_average - out.average_bits > kAverageBitsTolerance;
    return out;
  }
};

struct HeapEntry {
  double density;
  std::size_t block;
  std::size_t from;
  int version;
};

struct HeapLess {
  bool operator()(const HeapEntry& a, const HeapEntry& b) const {
    if (a.density != b.density) return a.density < b.density;
    return a.block > b.block;
  }
};

}  // namespace

void AllocBlock::validate() const {
  if (bits.empty()) throw InvalidArgument("block " + id + " has no feasible bit-widths");
  if (loss.size() != bits.size() || cost.size() != bits.size())
    throw InvalidArgument("block " + id + ": bits, loss, and cost must align");
  if (!latency.empty() && latency.size() != bits.size())
    throw InvalidArgument("block " + id + ": latency must align with bits");
  for (std::size_t j = 1; j < bits.size(); ++j) {
    if (bits[j] <= bits[j - 1]) throw InvalidArgument("block " + id + ": bit-widths must be sorted and unique");
    if (cost[j] <= cost[j - 1]) throw InvalidArgument("block " + id + ": costs must increase with bit-width");
    if (!latency.empty() && latency[j] <= latency[j - 1])
      throw InvalidArgument("block " + id + ": latency must increase with bit-width");
  }
  for (double l : loss)
    if (!std::isfinite(l)) throw InvalidArgument("block " + id + ": non-finite loss");
}

std::int64_t AllocationProblem::min_cost() const {
  std::int64_t c = 0;
  for (const auto& b : blocks) c += b.cost.front();
  return c;
}

std::int64_t AllocationProblem::total_weights() const {
  std::int64_t n = 0;
  for (const auto& b : blocks) n += b.weights;
  return n;
}

void AllocationProblem::validate() const {
  for (const auto& b : blocks) {
    b.validate();
    if (use_latency && b.latency.empty()) throw InvalidArgument("latency density requested but " + b.id + " has none");
  }
  if (eta < 0) throw InvalidArgument("tie tolerance must be nonnegative");
  if (lambda_reg < 0) throw InvalidArgument("lambda_reg must be nonnegative");
}

int Allocation::bits_of(const std::string& id) const {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return bits[i];
  throw InvalidArgument("allocation has no block '" + id + "'");
}

double regularized_density(double delta, std::int64_t cost_increment, double lambda_reg) {
  if (cost_increment <= 0) throw InvalidArgument("cost increment must be positive");
  if (lambda_reg < 0) throw InvalidArgument("lambda_reg must be nonnegative");
  const double dc = static_cast<double>(cost_increment);
  return delta / dc - lambda_reg * dc;
}

std::size_t tie_break(const std::vector<Candidate>& candidates, const AllocationProblem& problem) {
  if (candidates.empty()) throw InvalidArgument("tie_break: no candidates");
  auto better = [&](const Candidate& a, const Candidate& b) {
    if (a.delta != b.delta) return a.delta > b.delta;
    const auto& ba = problem.blocks[a.block];
    const auto& bb = problem.blocks[b.block];
    if (ba.saliency != bb.saliency) return ba.saliency > bb.saliency;
    const int ta = ba.bits[a.from + 1];
    const int tb = bb.bits[b.from + 1];
    const double pa = packing_score(ba, ta, problem.packing);
    const double pb = packing_score(bb, tb, problem.packing);
    if (pa != pb) return pa > pb;
    const bool fa = preferred(ta, problem.packing);
    const bool fb = preferred(tb, problem.packing);
    if (fa != fb) return fa;
    return a.block < b.block;
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i)
    if (better(candidates[i], candidates[best])) best = i;
  return best;
}

Allocation greedy_allocate(AllocationProblem problem) {
  Engine e(problem);
  std::priority_queue<HeapEntry, std::vector<HeapEntry>, HeapLess> heap;
  auto push = [&](std::size_t b) {
    if (auto c = e.candidate(b)) heap.push({c->density, b, c->from, e.version[b]});
  };
  auto valid = [&](const HeapEntry& h) { return e.cur[h.block] == h.from && e.version[h.block] == h.version; };
  // Drops stale and unaffordable entries from the top.
  auto clean = [&] {
    while (!heap.empty()) {
      const auto& h = heap.top();
      if (valid(h) && e.fits(*e.candidate(h.block))) return;
      heap.pop();
    }
  };
  for (std::size_t b = 0; b < problem.blocks.size(); ++b) push(b);
  for (int step = 0;; ++step) {
    for (std::size_t b : e.maybe_rescore(step)) push(b);
    clean();
    if (heap.empty() || heap.top().density < 0) break;
    const double top = heap.top().density;
    std::vector<Candidate> ties;
    while (!heap.empty() && heap.top().density >= top - problem.eta) {
      ties.push_back(*e.candidate(heap.top().block));
      heap.pop();
      clean();
    }
    std::sort(ties.begin(), ties.end(), [](const Candidate& a, const Candidate& b) { return a.block < b.block; });
    const std::size_t pick = ties.size() == 1 ? 0 : tie_break(ties, problem);
    for (std::size_t i = 0; i < ties.size(); ++i)
      if (i != pick) heap.push({ties[i].density, ties[i].block, ties[i].from, e.version[ties[i].block]});
    e.apply(ties[pick]);
    push(ties[pick].block);
  }
  return e.finish();
}

Allocation naive_greedy(AllocationProblem problem) {
  Engine e(problem);
  for (int step = 0;; ++step) {
    e.maybe_rescore(step);
    std::vector<Candidate> live;
    for (std::size_t b = 0; b < problem.blocks.size(); ++b)
      if (auto c = e.candidate(b); c && e.fits(*c)) live.push_back(*c);
    if (live.empty()) break;
    double top = live.front().density;
    for (const auto& c : live) top = std::max(top, c.density);
    if (top < 0) break;
    std::vector<Candidate> ties;
    for (const auto& c : live)
      if (c.density >= top - problem.eta) ties.push_back(c);
    e.apply(ties[ties.size() == 1 ? 0 : tie_break(ties, problem)]);
  }
  return e.finish();
}

Allocation dp_oracle(const AllocationProblem& problem, std::int64_t unit) {
  problem.validate();
  const std::int64_t base = problem.min_cost();
  const std::int64_t headroom = problem.budget - base;
  if (headroom < 0) throw InvalidArgument("allocation infeasible: minimum-bit cost exceeds budget");
  if (unit < 0) throw InvalidArgument("dp_oracle: unit must be nonnegative");
  if (unit == 0) {
    for (const auto& b : problem.blocks)
      for (std::size_t j = 1; j < b.cost.size(); ++j) unit = std::gcd(unit, b.cost[j] - b.cost[0]);
    if (unit == 0) unit = 1;
  }
  for (const auto& b : problem.blocks)
    for (std::size_t j = 1; j < b.cost.size(); ++j)
      if ((b.cost[j] - b.cost[0]) % unit != 0)
        throw InvalidArgument("dp_oracle: cost increments of " + b.id + " are not integer in units of " +
                              std::to_string(unit));
  std::int64_t span = 0;
  for (const auto& b : problem.blocks) span += b.cost.back() - b.cost.front();
  const std::int64_t cap = std::min(headroom, span) / unit;
  if (cap > kDpUnitLimit)
    throw InvalidArgument("dp_oracle: " + std::to_string(cap) + " budget units exceed the table limit");
  const auto width = static_cast<std::size_t>(cap) + 1;
  const std::size_t nb = problem.blocks.size();
  std::vector<double> prev(width, 0.0), next(width);
  std::vector<std::vector<std::uint16_t>> choice(nb, std::vector<std::uint16_t>(width, 0));
  const double inf = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < nb; ++i) {
    const auto& b = problem.blocks[i];
    for (std::size_t c = 0; c < width; ++c) {
      double best = inf;
      std::uint16_t arg = 0;
      for (std::size_t j = 0; j < b.bits.size(); ++j) {
        const auto w = static_cast<std::size_t>((b.cost[j] - b.cost[0]) / unit);
        if (w > c || prev[c - w] == inf) continue;
        const double v = prev[c - w] + b.loss[j];
        if (v < best) {
          best = v;
          arg = static_cast<std::uint16_t>(j);
        }
      }
      next[c] = best;
      choice[i][c] = arg;
    }
    std::swap(prev, next);
  }
  std::vector<int> bits(nb);
  std::size_t c = width - 1;
  for (std::size_t i = nb; i-- > 0;) {
    const auto& b = problem.blocks[i];
    const std::size_t j = choice[i][c];
    bits[i] = b.bits[j];
    c -= static_cast<std::size_t>((b.cost[j] - b.cost[0]) / unit);
  }
  return evaluate(problem, bits);
}

std::vector<int> replay(const AllocationProblem& problem, const std::vector<Upgrade>& trace) {
  std::vector<int> bits;
  for (const auto& b : problem.blocks) bits.push_back(b.bits.front());
  for (const auto& u : trace) {
    if (u.block >= bits.size() || bits[u.block] != u.from)
      throw InvalidArgument("trace step " + std::to_string(u.step) + " does not replay");
    bits[u.block] = u.to;
  }
  return bits;
}

std::int64_t budget_from_target(double target_average, std::int64_t total_weights) {
  if (!(target_average > 0) || total_weights <= 0) throw InvalidArgument("target average bits must be positive");
  return static_cast<std::int64_t>(std::floor(target_average * static_cast<double>(total_weights) + 1e-9));
}

AllocationProblem make_problem(const LossTable& table, const std::vector<WeightBlock>& blocks, const CostModel& cm,
                               const std::map<std::string, double>& saliency, const std::map<std::string, int>& floors) {
  AllocationProblem p;
  for (const auto& id : table.block_ids) {
    const auto it = std::find_if(blocks.begin(), blocks.end(), [&](const WeightBlock& b) { return b.id == id; });
    if (it == blocks.end()) throw InvalidArgument("loss table block '" + id + "' is not in the model");
    AllocBlock a;
    a.id = id;
    a.weights = it->size();
    a.group_size = it->group_size;
    if (const auto s = saliency.find(id); s != saliency.end()) a.saliency = s->second;
    const auto f = floors.find(id);
    for (const auto& r : table.rows.at(id)) {
      if (f != floors.end() && r.bits < f->second) continue;
      a.bits.push_back(r.bits);
      a.loss.push_back(r.loss);
      a.cost.push_back(block_cost(*it, r.bits, r.designer, cm).total());
    }
    if (a.bits.empty()) throw InvalidArgument("bit floor leaves no feasible width for " + id);
    p.blocks.push_back(std::move(a));
  }
  return p;
}

Allocation evaluate(const AllocationProblem& problem, const std::vector<int>& bits) {
  if (bits.size() != problem.blocks.size()) throw InvalidArgument("evaluate: one bit-width per block");
  Allocation a;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    const auto& b = problem.blocks[i];
    const auto it = std::find(b.bits.begin(), b.bits.end(), bits[i]);
    if (it == b.bits.end()) throw InvalidArgument(std::to_string(bits[i]) + " bits is not feasible for " + b.id);
    const auto j = static_cast<std::size_t>(it - b.bits.begin());
    a.ids.push_back(b.id);
    a.bits.push_back(bits[i]);
    a.cost += b.cost[j];
    a.loss += b.loss[j];
  }
  const auto n = problem.total_weights();
  a.average_bits = n > 0 ? static_cast<double>(a.cost) / static_cast<double>(n) : 0.0;
  a.under_target = problem.target_average && *problem.target_average - a.average_bits > kAverageBitsTolerance;
  return a;
}

void write_allocation(const Allocation& a, const AllocationProblem& problem, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "block\tm\tcost\tloss\n";
  for (std::size_t i = 0; i < a.ids.size(); ++i) {
    const auto& b = problem.blocks[i];
    const auto j = static_cast<std::size_t>(std::find(b.bits.begin(), b.bits.end(), a.bits[i]) - b.bits.begin());
    out << a.ids[i] << '\t' << a.bits[i] << '\t' << b.cost[j] << '\t' << real(b.loss[j]) << '\n';
  }
  if (!out) throw Error("I/O failure writing " + path.string());
}

std::map<std::string, int> read_allocation(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::map<std::string, int> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, m;
    if (!std::getline(ss, id, '\t') || !std::getline(ss, m, '\t'))
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected block and m");
    try {
      out[id] = std::stoi(m);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad bit-width '" + m + "'");
    }
  }
  return out;
}

void write_trace(const Allocation& a, const AllocationProblem& problem, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "step\tblock\tfrom\tto\tgamma\tcost_after\tloss_after\n";
  for (const auto& u : a.trace)
    out << u.step << '\t' << problem.blocks[u.block].id << '\t' << u.from << '\t' << u.to << '\t' << real(u.gamma)
        << '\t' << u.cost_after << '\t' << real(u.loss_after) << '\n';
  if (!out) throw Error("I/O failure writing " + path.string());
}

}  // namespace bayesq

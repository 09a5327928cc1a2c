// Copyright 2026 The dery Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dery/partition.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "dery/errors.hpp"
#include "dery/parallel.hpp"
#include "dery/rng.hpp"

namespace dery {

NodeRange ZooPartition::range(int model, int stage) const {
  const auto& c = cuts[model];
  const int first = stage == 0 ? 0 : c[stage - 1];
  const int last = stage == k - 1 ? node_counts[model] - 1 : c[stage] - 1;
  return {first, last};
}

std::vector<std::vector<std::uint8_t>> ZooPartition::assignment_matrix() const {
  std::vector<std::vector<std::uint8_t>> a(assignment.size(), std::vector<std::uint8_t>(k, 0));
  for (std::size_t row = 0; row < assignment.size(); ++row) a[row][assignment[row]] = 1;
  return a;
}

double block_pair_similarity(const SimilarityTable& table, const ZooPartition& p, BlockId a,
                             BlockId b) {
  return block_similarity(table, a.model, p.range(a.model, a.stage), b.model,
                          p.range(b.model, b.stage));
}

double objective_J(const SimilarityTable& table, const ZooPartition& p) {
  double j = 0.0;
  for (int i = 0; i < p.num_models(); ++i) {
    for (int s = 0; s < p.k; ++s) {
      j += block_pair_similarity(table, p, {i, s}, p.anchors[p.set_of(i, s)]);
    }
  }
  return j;
}

namespace {

std::int64_t range_params(const ModelGraph& model, int first, int last) {
  std::int64_t total = 0;
  for (int n = first; n <= last; ++n) total += model.nodes[n].param_count;
  return total;
}

// Cut value after moving boundary `b` by `delta`, or nullopt when that empties
// a block or breaks the size bound on the block that grows.
std::optional<int> shifted_cut(const PartitionProblem& problem, const ZooPartition& p, int model,
                               int b, int delta) {
  const auto& cuts = p.cuts[model];
  const ModelGraph& g = problem.manifest.models[model];
  const int lo = b == 0 ? 0 : cuts[b - 1];
  const int hi = b + 1 == p.k - 1 ? g.num_nodes() : cuts[b + 1];
  const int moved = cuts[b] + delta;
  if (moved <= lo || moved >= hi) return std::nullopt;
  const std::int64_t total = g.total_params();
  const std::int64_t grown =
      delta < 0 ? range_params(g, moved, hi - 1) : range_params(g, lo, moved - 1);
  if (!satisfies_size_bound(grown, total, p.k, problem.eps)) return std::nullopt;
  return moved;
}

bool tie_less(const ZooManifest& manifest, BlockId a, BlockId b) {
  const auto& ida = manifest.models[a.model].model_id;
  const auto& idb = manifest.models[b.model].model_id;
  if (ida != idb) return ida < idb;
  return a.stage < b.stage;
}

}  // namespace

ZooPartition swap_step(const PartitionProblem& problem, int model, int boundary,
                       const ZooPartition& partition) {
  if (boundary < 0 || boundary >= partition.k - 1) {
    fail(ErrorKind::kInvalidArgument, "boundary index out of range");
  }
  ZooPartition best = partition;
  double best_j = objective_J(problem.table, partition);
  for (int delta : {-1, +1}) {
    const auto moved = shifted_cut(problem, partition, model, boundary, delta);
    if (!moved) continue;
    ZooPartition trial = partition;
    trial.cuts[model][boundary] = *moved;
    const double j = objective_J(problem.table, trial);
    if (j > best_j) {
      best_j = j;
      best = std::move(trial);
    }
  }
  best.objective = best_j;
  return best;
}

ZooPartition update_anchors(const PartitionProblem& problem, const ZooPartition& partition) {
  ZooPartition out = partition;
  std::vector<std::vector<BlockId>> members(partition.k);
  for (int i = 0; i < partition.num_models(); ++i) {
    for (int s = 0; s < partition.k; ++s) members[partition.set_of(i, s)].push_back({i, s});
  }
  for (int j = 0; j < partition.k; ++j) {
    if (members[j].empty()) {
      fail(ErrorKind::kDegenerate, "equivalence set " + std::to_string(j) + " is empty");
    }
    BlockId best{};
    double best_sum = -std::numeric_limits<double>::infinity();
    for (const BlockId& candidate : members[j]) {
      double sum = 0.0;
      for (const BlockId& m : members[j]) {
        sum += block_pair_similarity(problem.table, partition, m, candidate);
      }
      if (sum > best_sum || (sum == best_sum && tie_less(problem.manifest, candidate, best))) {
        best_sum = sum;
        best = candidate;
      }
    }
    out.anchors[j] = best;
  }
  out.objective = objective_J(problem.table, out);
  return out;
}

ZooPartition update_assignment(const PartitionProblem& problem, const ZooPartition& partition) {
  ZooPartition out = partition;
  for (int i = 0; i < partition.num_models(); ++i) {
    for (int s = 0; s < partition.k; ++s) {
      const int current = partition.set_of(i, s);
      int best = current;
      double best_s =
          block_pair_similarity(problem.table, partition, {i, s}, partition.anchors[current]);
      for (int j = 0; j < partition.k; ++j) {
        const double v =
            block_pair_similarity(problem.table, partition, {i, s}, partition.anchors[j]);
        if (v > best_s) {
          best_s = v;
          best = j;
        }
      }
      out.assignment[i * partition.k + s] = best;
    }
  }
  out.objective = objective_J(problem.table, out);
  return out;
}

bool is_swap_local_optimum(const PartitionProblem& problem, const ZooPartition& partition,
                           double slack) {
  const double base = objective_J(problem.table, partition);
  for (int i = 0; i < partition.num_models(); ++i) {
    for (int b = 0; b + 1 < partition.k; ++b) {
      for (int delta : {-1, +1}) {
        const auto moved = shifted_cut(problem, partition, i, b, delta);
        if (!moved) continue;
        ZooPartition trial = partition;
        trial.cuts[i][b] = *moved;
        if (objective_J(problem.table, trial) > base + slack) return false;
      }
    }
  }
  return true;
}

std::vector<std::vector<int>> enumerate_feasible_cuts(const ModelGraph& model, int k, double eps) {
  std::vector<std::vector<int>> out;
  const int n = model.num_nodes();
  if (k < 1 || n < k) return out;
  const std::int64_t total = model.total_params();
  std::vector<int> cuts(k - 1);
  // Depth-first over cut positions, pruning a prefix whose closed block
  // already breaks the bound.
  auto recurse = [&](auto&& self, int depth, int start) -> void {
    if (depth == k - 1) {
      if (satisfies_size_bound(range_params(model, start, n - 1), total, k, eps)) {
        out.push_back(cuts);
      }
      return;
    }
    for (int c = start + 1; c <= n - (k - 1 - depth); ++c) {
      if (!satisfies_size_bound(range_params(model, start, c - 1), total, k, eps)) break;
      cuts[depth] = c;
      self(self, depth + 1, c);
    }
  };
  recurse(recurse, 0, 0);
  return out;
}

std::optional<std::vector<int>> balanced_cuts(const ModelGraph& model, int k, double eps) {
  const int n = model.num_nodes();
  if (k < 1 || n < k) return std::nullopt;
  std::vector<std::int64_t> prefix(n + 1, 0);
  for (int i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + model.nodes[i].param_count;
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max();
  // best[b][e]: minimal largest-block params splitting nodes [0, e) into b blocks.
  std::vector<std::vector<std::int64_t>> best(k + 1, std::vector<std::int64_t>(n + 1, kInf));
  std::vector<std::vector<int>> from(k + 1, std::vector<int>(n + 1, -1));
  best[0][0] = 0;
  for (int b = 1; b <= k; ++b) {
    for (int e = b; e <= n; ++e) {
      for (int s = b - 1; s < e; ++s) {
        if (best[b - 1][s] == kInf) continue;
        const std::int64_t v = std::max(best[b - 1][s], prefix[e] - prefix[s]);
        if (v < best[b][e]) {
          best[b][e] = v;
          from[b][e] = s;
        }
      }
    }
  }
  if (best[k][n] == kInf || !satisfies_size_bound(best[k][n], prefix[n], k, eps)) {
    return std::nullopt;
  }
  std::vector<int> cuts(k - 1);
  int e = n;
  for (int b = k; b > 1; --b) {
    e = from[b][e];
    cuts[b - 2] = e;
  }
  return cuts;
}

namespace {

void check_problem(const PartitionProblem& problem) {
  if (problem.k < 1) fail(ErrorKind::kInvalidArgument, "K must be >= 1");
  if (problem.table.num_models() != problem.manifest.num_models()) {
    fail(ErrorKind::kConsistency, "similarity table and manifest disagree on the model count");
  }
  for (int i = 0; i < problem.manifest.num_models(); ++i) {
    const ModelGraph& g = problem.manifest.models[i];
    if (problem.table.num_nodes(i) != g.num_nodes()) {
      fail(ErrorKind::kConsistency, "similarity table node count differs for '" + g.model_id + "'");
    }
    if (g.num_nodes() < problem.k) {
      fail(ErrorKind::kInvalidArgument, "model '" + g.model_id + "' has " +
                                            std::to_string(g.num_nodes()) +
                                            " nodes, fewer than K=" + std::to_string(problem.k));
    }
    if (!balanced_cuts(g, problem.k, problem.eps)) {
      fail(ErrorKind::kInfeasible, "no K-cut of '" + g.model_id + "' satisfies the size bound " +
                                       "with eps=" + std::to_string(problem.eps));
    }
  }
}

}  // namespace

ZooPartition initial_partition(const PartitionProblem& problem, std::uint64_t seed,
                               bool stage_aligned) {
  const ZooManifest& m = problem.manifest;
  const int k = problem.k;
  Rng rng(seed);
  ZooPartition p;
  p.k = k;
  for (const auto& g : m.models) {
    const int n = g.num_nodes();
    std::optional<std::vector<int>> chosen;
    for (int attempt = 0; attempt < kInitAttempts && !chosen; ++attempt) {
      auto picks = rng.sample_without_replacement(static_cast<std::size_t>(n - 1),
                                                  static_cast<std::size_t>(k - 1));
      std::vector<int> cuts;
      for (auto v : picks) cuts.push_back(static_cast<int>(v) + 1);
      std::sort(cuts.begin(), cuts.end());
      if (validate_partition(g, cuts, problem.eps).empty()) chosen = std::move(cuts);
    }
    if (!chosen) chosen = balanced_cuts(g, k, problem.eps);
    if (!chosen) fail(ErrorKind::kInfeasible, "no feasible cut set for '" + g.model_id + "'");
    p.cuts.push_back(std::move(*chosen));
    p.node_counts.push_back(n);
  }
  p.assignment.resize(static_cast<std::size_t>(m.num_models()) * k);
  if (stage_aligned) {
    for (int i = 0; i < m.num_models(); ++i) {
      for (int s = 0; s < k; ++s) p.assignment[i * k + s] = s;
    }
  } else {
    // Uniform labels, redrawn until no set is empty.
    std::vector<bool> hit;
    do {
      hit.assign(k, false);
      for (int& a : p.assignment) {
        a = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
        hit[a] = true;
      }
    } while (std::find(hit.begin(), hit.end(), false) != hit.end());
  }
  p.anchors.assign(k, BlockId{});
  return update_anchors(problem, p);
}

RestartReport refine_partition(const PartitionProblem& problem, ZooPartition& p, int max_iters,
                               double tol) {
  RestartReport report;
  double previous = objective_J(problem.table, p);
  report.trace.push_back(previous);
  for (int t = 1; t <= max_iters; ++t) {
    for (int i = 0; i < p.num_models(); ++i) {
      for (int b = 0; b + 1 < p.k; ++b) p = swap_step(problem, i, b, p);
    }
    p = update_anchors(problem, p);
    p = update_assignment(problem, p);
    const double current = p.objective;
    report.trace.push_back(current);
    report.iterations = t;
    if (current - previous <= tol) break;
    previous = current;
  }
  p.objective = objective_J(problem.table, p);
  report.objective = p.objective;
  return report;
}

PartitionResult optimize_partition(const SimilarityTable& table, const ZooManifest& manifest,
                                   const PartitionOptions& options) {
  const PartitionProblem problem{table, manifest, options.k, options.eps};
  check_problem(problem);
  if (options.restarts < 1) fail(ErrorKind::kInvalidArgument, "restarts must be >= 1");

  std::vector<std::optional<ZooPartition>> finals(options.restarts);
  PartitionResult result;
  result.restarts.resize(options.restarts);
  parallel_for(static_cast<std::size_t>(options.restarts), options.workers, [&](std::size_t r) {
    RestartReport& report = result.restarts[r];
    const std::uint64_t seed = derive_seed(options.seed, r);
    try {
      ZooPartition p = initial_partition(problem, seed, r == 0);
      report = refine_partition(problem, p, options.max_iters, options.tol);
      finals[r] = std::move(p);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kDegenerate) throw;
      report.degenerate = true;
    }
    report.seed = seed;
  });

  for (int r = 0; r < options.restarts; ++r) {
    if (!finals[r]) {
      ++result.degenerate_restarts;
      continue;
    }
    if (result.best_restart < 0 || finals[r]->objective > result.best.objective) {
      result.best = *finals[r];
      result.best_restart = r;
    }
  }
  if (result.best_restart < 0) {
    fail(ErrorKind::kDegenerate, "every restart ended with an empty equivalence set");
  }
  return result;
}

std::vector<std::string> check_partition(const ZooManifest& manifest, const ZooPartition& p,
                                         double eps) {
  std::vector<std::string> problems;
  if (p.num_models() != manifest.num_models()) {
    problems.push_back("partition covers " + std::to_string(p.num_models()) + " models, manifest has " +
                       std::to_string(manifest.num_models()));
    return problems;
  }
  if (p.assignment.size() != static_cast<std::size_t>(p.num_models()) * p.k) {
    problems.push_back("assignment has the wrong number of rows");
    return problems;
  }
  if (static_cast<int>(p.anchors.size()) != p.k) problems.push_back("need exactly K anchors");
  for (int i = 0; i < manifest.num_models(); ++i) {
    const ModelGraph& g = manifest.models[i];
    if (p.node_counts.at(i) != g.num_nodes()) {
      problems.push_back("node count mismatch for '" + g.model_id + "'");
      continue;
    }
    if (static_cast<int>(p.cuts[i].size()) != p.k - 1) {
      problems.push_back("'" + g.model_id + "' needs K-1 cuts");
      continue;
    }
    try {
      for (const auto& v : validate_partition(g, p.cuts[i], eps)) problems.push_back(v.message);
    } catch (const Error& e) {
      problems.push_back(g.model_id + ": " + e.what());
    }
  }
  for (int row = 0; row < static_cast<int>(p.assignment.size()); ++row) {
    if (p.assignment[row] < 0 || p.assignment[row] >= p.k) {
      problems.push_back("assignment row " + std::to_string(row) + " has no valid set");
    }
  }
  for (int j = 0; j < static_cast<int>(p.anchors.size()); ++j) {
    const BlockId a = p.anchors[j];
    if (a.model < 0 || a.model >= p.num_models() || a.stage < 0 || a.stage >= p.k) {
      problems.push_back("anchor " + std::to_string(j) + " out of range");
    } else if (p.set_of(a.model, a.stage) != j) {
      problems.push_back("anchor of set " + std::to_string(j) + " is not a member of it");
    }
  }
  return problems;
}

}  // namespace dery

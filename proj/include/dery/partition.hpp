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

#pragma once

// Joint K-way partition of every model into contiguous blocks, grouped into K
// equivalence sets around anchor blocks. Alternates layer swaps at block
// boundaries with medoid-style anchor and assignment updates.

#include <cstdint>
#include <optional>
#include <vector>

#include "dery/similarity.hpp"
#include "dery/zoo.hpp"

namespace dery {

inline constexpr int kDefaultK = 4;
inline constexpr int kDefaultRestarts = 200;
inline constexpr int kDefaultMaxIters = 100;
inline constexpr double kDefaultTol = 1e-6;
inline constexpr int kInitAttempts = 1000;

struct BlockId {
  int model = 0;
  int stage = 0;

  bool operator==(const BlockId&) const = default;
  auto operator<=>(const BlockId&) const = default;
};

struct ZooPartition {
  int k = 0;
  // cuts[i] holds K-1 strictly increasing cut values for model i.
  std::vector<std::vector<int>> cuts;
  std::vector<int> node_counts;
  // Equivalence set of block (i, k), stored at i * K + k.
  std::vector<int> assignment;
  std::vector<BlockId> anchors;  // one per set
  double objective = 0.0;

  int num_models() const { return static_cast<int>(cuts.size()); }
  NodeRange range(int model, int stage) const;
  int set_of(int model, int stage) const { return assignment[model * k + stage]; }
  // Dense (N*K) x K 0/1 matrix; every row sums to 1 by construction.
  std::vector<std::vector<std::uint8_t>> assignment_matrix() const;

  bool operator==(const ZooPartition&) const = default;
};

// Read-only context shared by every update step.
struct PartitionProblem {
  const SimilarityTable& table;
  const ZooManifest& manifest;
  int k = kDefaultK;
  double eps = kDefaultSizeEps;
};

double block_pair_similarity(const SimilarityTable& table, const ZooPartition& p, BlockId a,
                             BlockId b);

// Sum over blocks of S(block, anchor of its set).
double objective_J(const SimilarityTable& table, const ZooPartition& partition);

// Best of {keep, move last node of block b forward into b+1, move first node
// of b+1 back into b}. Ties keep the current cut.
ZooPartition swap_step(const PartitionProblem& problem, int model, int boundary,
                       const ZooPartition& partition);

// Throws kDegenerate when a set has no members.
ZooPartition update_anchors(const PartitionProblem& problem, const ZooPartition& partition);
ZooPartition update_assignment(const PartitionProblem& problem, const ZooPartition& partition);

// True when no single forward/backward swap raises J by more than `slack`.
bool is_swap_local_optimum(const PartitionProblem& problem, const ZooPartition& partition,
                           double slack = 1e-9);

// Every cut set of `model` satisfying the size bound, lexicographic order.
std::vector<std::vector<int>> enumerate_feasible_cuts(const ModelGraph& model, int k, double eps);
// Cut set minimizing the largest block's params; nullopt if it breaks the bound.
std::optional<std::vector<int>> balanced_cuts(const ModelGraph& model, int k, double eps);

struct PartitionOptions {
  int k = kDefaultK;
  double eps = kDefaultSizeEps;
  int max_iters = kDefaultMaxIters;
  double tol = kDefaultTol;
  int restarts = kDefaultRestarts;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct RestartReport {
  std::uint64_t seed = 0;
  bool degenerate = false;
  int iterations = 0;
  double objective = 0.0;
  std::vector<double> trace;  // J after initialisation, then after each iteration
};

struct PartitionResult {
  ZooPartition best;
  int best_restart = -1;
  int degenerate_restarts = 0;
  std::vector<RestartReport> restarts;
};

// Random feasible cuts. The assignment puts every stage-k block in set k when
// `stage_aligned`, otherwise draws uniform labels with no empty set. Restart 0
// of optimize_partition is stage-aligned, the rest are random.
ZooPartition initial_partition(const PartitionProblem& problem, std::uint64_t seed,
                               bool stage_aligned);

// Iterates swap sweeps, anchor and assignment updates on `partition` until
// the J gain drops to `tol` or `max_iters` sweeps have run.
RestartReport refine_partition(const PartitionProblem& problem, ZooPartition& partition,
                               int max_iters, double tol);

PartitionResult optimize_partition(const SimilarityTable& table, const ZooManifest& manifest,
                                   const PartitionOptions& options);

// Checks cover, contiguity, size bound, assignment shape and anchor
// membership; returns human-readable problems.
std::vector<std::string> check_partition(const ZooManifest& manifest,
                                         const ZooPartition& partition, double eps);

}  // namespace dery

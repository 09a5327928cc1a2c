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

// Candidate networks built from one block per equivalence set and per stage,
// with stitching-layer costs, and the training-free log-det ranking.

#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dery/matrix_io.hpp"
#include "dery/partition.hpp"
#include "dery/rng.hpp"
#include "dery/zoo.hpp"

namespace dery {

inline constexpr int kDefaultCandidates = 500;
inline constexpr int kDefaultScoreBatches = 5;
inline constexpr int kDefaultScoreBatchSize = 32;
inline constexpr int kDrawCapFactor = 100;
inline constexpr double kRidgePerColumn = 1e-6;

enum class AdapterKind { kCnnToCnn, kCnnToSeq, kSeqToCnn, kSeqToSeq };

std::string_view adapter_kind_name(AdapterKind kind);

// Norm -> 1x1 projection -> activation between consecutive blocks.
struct StitchAdapter {
  AdapterKind kind = AdapterKind::kCnnToCnn;
  Interface in_iface;
  Interface out_iface;
  std::int64_t param_count = 0;
  double flops = 0.0;
};

StitchAdapter adapter_cost(const Interface& from, const Interface& to);

struct SelectionMatrices {
  int rows = 0;  // N * K
  int k = 0;
  std::vector<std::uint8_t> x;  // row-major rows x k: block chosen for set j
  std::vector<std::uint8_t> y;  // block occupies stage j

  std::uint8_t x_at(int row, int j) const { return x[row * k + j]; }
  std::uint8_t y_at(int row, int j) const { return y[row * k + j]; }
};

// Column sums of X and Y equal 1 and exactly K entries are set in each.
bool selection_valid(const SelectionMatrices& s);

struct AssemblyCandidate {
  std::vector<Block> blocks;  // ordered by stage
  std::vector<int> groups;    // equivalence set of each block
  std::vector<StitchAdapter> adapters;  // between consecutive blocks
  std::int64_t total_params = 0;
  double total_flops = 0.0;
  SelectionMatrices selection;

  std::vector<BlockId> block_ids() const;
};

struct Constraints {
  double max_params = std::numeric_limits<double>::infinity();
  double max_flops = std::numeric_limits<double>::infinity();
};

enum class RejectReason { kGroup, kBudgetParam, kBudgetFlops };
std::string_view reject_reason_name(RejectReason reason);

struct SampleOutcome {
  std::optional<AssemblyCandidate> candidate;
  std::optional<RejectReason> rejection;
};

// Builds the candidate for a fixed stage-ordered block choice; the totals
// include every adapter. Budgets are not checked here.
AssemblyCandidate assemble(const ZooPartition& partition, const ZooManifest& manifest,
                           std::span<const BlockId> blocks);

std::optional<RejectReason> check_budget(const AssemblyCandidate& candidate,
                                         const Constraints& constraints);

// Stage-major draw: for each stage, a uniform block of that stage whose set
// has not been used yet.
SampleOutcome sample_candidate(const ZooPartition& partition, const ZooManifest& manifest,
                               const Constraints& constraints, Rng& rng);

// Sentinel for a singular kernel.
inline constexpr double kSingularScore = -std::numeric_limits<double>::infinity();

// log|det(K_H + ridge I)| with K_H[a][b] = d - hamming(row a, row b) over the
// column-concatenated segments.
double naswot_score(std::span<const CodeMatrix> segments, double ridge);

// Score at ridge 0, falling back to the default ridge when the kernel is singular.
double naswot_with_fallback(std::span<const CodeMatrix> segments);

// Row subsets shared by every candidate in one search.
struct ScoreBatches {
  std::vector<std::vector<std::size_t>> rows;
};

ScoreBatches draw_score_batches(std::int64_t probe_count, int num_batches, int batch_size,
                                Rng& rng);

// Loads and caches per-node code matrices; safe for concurrent reads after
// preload().
class CodeStore {
 public:
  explicit CodeStore(const ZooManifest& manifest) : manifest_(&manifest) {}

  void preload(const ZooPartition& partition);
  // Column concatenation of the block's node codes. Throws kInvalidArgument
  // when a node has no code_file.
  CodeMatrix block_codes(int model, NodeRange nodes) const;

 private:
  const CodeMatrix& node_codes(int model, int node) const;

  const ZooManifest* manifest_;
  mutable std::mutex mutex_;
  mutable std::map<std::pair<int, int>, std::shared_ptr<const CodeMatrix>> cache_;
};

CodeMatrix select_rows(const CodeMatrix& codes, std::span<const std::size_t> rows);

// Mean batch score; any singular batch makes the mean the sentinel.
double score_candidate(const AssemblyCandidate& candidate, const CodeStore& codes,
                       const ScoreBatches& batches);

struct ConstraintAudit {
  double param_slack = 0.0;
  double flops_slack = 0.0;
};

struct ScoredPlan {
  AssemblyCandidate candidate;
  double score = 0.0;
  ConstraintAudit audit;
  int rank = 0;
};

// Sorted order: score desc, then total_params asc, then block ids.
bool plan_precedes(const ScoredPlan& a, const ScoredPlan& b, const ZooManifest& manifest);

struct SearchOptions {
  int num_candidates = kDefaultCandidates;
  int num_batches = kDefaultScoreBatches;
  int batch_size = kDefaultScoreBatchSize;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct SearchStats {
  std::int64_t draws = 0;
  std::int64_t accepted = 0;
  std::int64_t duplicates = 0;
  std::map<std::string, std::int64_t> rejections;
  bool exhausted = false;
  std::vector<std::string> warnings;
};

struct SearchResult {
  std::vector<ScoredPlan> plans;
  SearchStats stats;
};

SearchResult search(const ZooPartition& partition, const ZooManifest& manifest,
                    const Constraints& constraints, const SearchOptions& options);

}  // namespace dery

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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "dery/errors.hpp"
#include "dery/reassembly.hpp"
#include "dery/rng.hpp"
#include "dery/synthzoo.hpp"
#include "test_support.hpp"

using namespace dery;

namespace {

CodeMatrix codes_of(std::uint32_t rows, std::uint32_t cols, std::vector<std::uint8_t> bits) {
  return CodeMatrix{rows, cols, std::move(bits)};
}

CodeMatrix random_codes(Rng& rng, int rows, int cols) {
  CodeMatrix c{static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols), {}};
  for (int i = 0; i < rows * cols; ++i) c.bits.push_back(static_cast<std::uint8_t>(rng.below(2)));
  return c;
}

struct Fixture {
  testing::TempDir dir{"reassembly"};
  synth::SynthZoo zoo;
  ZooManifest manifest;
  ZooPartition partition;

  explicit Fixture(int models = 4, int k = 3) {
    synth::SynthSpec spec;
    spec.num_models = models;
    spec.partition_k = k;
    zoo = synth::generate(spec, 21);
    manifest = synth::write_zoo(zoo, dir.path());
    // Balanced cuts, stage-aligned sets.
    partition.k = k;
    for (const auto& g : manifest.models) {
      partition.cuts.push_back(*balanced_cuts(g, k, 0.2));
      partition.node_counts.push_back(g.num_nodes());
      for (int s = 0; s < k; ++s) partition.assignment.push_back(s);
    }
    for (int s = 0; s < k; ++s) partition.anchors.push_back({0, s});
  }
};

}  // namespace

TEST_CASE("adapter cost formulas") {
  const Interface sq{64, 8, 8, Layout::kSpatial};
  const StitchAdapter a = adapter_cost(sq, sq);
  CHECK(a.param_count == 4288);
  CHECK(a.flops == 262144.0);
  CHECK(a.kind == AdapterKind::kCnnToCnn);

  const Interface one{1, 1, 1, Layout::kSpatial};
  const StitchAdapter b = adapter_cost(one, one);
  CHECK(b.param_count == 4);
  CHECK(b.flops == 1.0);

  // Token layouts carry the token count in height.
  const Interface seq{384, 197, 1, Layout::kTokens};
  const StitchAdapter c = adapter_cost(Interface{256, 14, 14, Layout::kSpatial}, seq);
  CHECK(c.kind == AdapterKind::kCnnToSeq);
  CHECK(c.param_count == 256 * 384 + 384 + 2 * 256);
  CHECK(c.flops == 197.0 * 256 * 384);
  CHECK(adapter_cost(seq, sq).kind == AdapterKind::kSeqToCnn);
  CHECK(adapter_cost(seq, seq).kind == AdapterKind::kSeqToSeq);
  CHECK(adapter_kind_name(AdapterKind::kSeqToCnn) == "seq->cnn");
}

TEST_CASE("budget rejection includes adapter params") {
  AssemblyCandidate c;
  c.total_params = 29'500'000 + 600'000;
  c.total_flops = 1e9;
  const Constraints budget{30e6, 6e9};
  REQUIRE(check_budget(c, budget).has_value());
  CHECK(*check_budget(c, budget) == RejectReason::kBudgetParam);
  c.total_params = 29'000'000;
  CHECK_FALSE(check_budget(c, budget).has_value());
  c.total_flops = 7e9;
  CHECK(*check_budget(c, budget) == RejectReason::kBudgetFlops);
  CHECK(reject_reason_name(RejectReason::kGroup) == "group");
  CHECK(reject_reason_name(RejectReason::kBudgetParam) == "budget:param");
  CHECK(reject_reason_name(RejectReason::kBudgetFlops) == "budget:flops");
}

TEST_CASE("assemble totals and selection matrices") {
  Fixture f;
  const std::vector<BlockId> ids{{2, 0}, {0, 1}, {3, 2}};
  const AssemblyCandidate c = assemble(f.partition, f.manifest, ids);
  REQUIRE(c.blocks.size() == 3);
  REQUIRE(c.adapters.size() == 2);
  std::int64_t params = 0;
  double flops = 0.0;
  for (const auto& b : c.blocks) {
    params += b.param_count;
    flops += b.flops;
  }
  for (const auto& a : c.adapters) {
    params += a.param_count;
    flops += a.flops;
  }
  CHECK(c.total_params == params);
  CHECK(c.total_flops == doctest::Approx(flops));
  CHECK(c.adapters[0].in_iface == c.blocks[0].out_iface);
  CHECK(c.adapters[0].out_iface == c.blocks[1].in_iface);
  CHECK(selection_valid(c.selection));
  CHECK(c.selection.x_at(2 * 3 + 0, 0) == 1);
  CHECK(c.selection.y_at(3 * 3 + 2, 2) == 1);
  CHECK(c.block_ids() == ids);

  // Two blocks from the same set break the X constraint.
  const std::vector<BlockId> same_stage{{0, 0}, {1, 0}, {2, 2}};
  CHECK_FALSE(selection_valid(assemble(f.partition, f.manifest, same_stage).selection));
}

TEST_CASE("stage-aligned sets never reject on groups") {
  Fixture f;
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const SampleOutcome o = sample_candidate(f.partition, f.manifest, Constraints{}, rng);
    REQUIRE(o.candidate.has_value());
    CHECK_FALSE(o.rejection.has_value());
    CHECK(selection_valid(o.candidate->selection));
    const auto ids = o.candidate->block_ids();
    for (int s = 0; s < 3; ++s) CHECK(ids[s].stage == s);
  }
}

TEST_CASE("group dead ends are rejected") {
  Fixture f(2, 2);
  // Both stage-1 blocks are in set 0, as is model 0's stage-0 block.
  f.partition.assignment = {0, 0, 1, 0};
  f.partition.anchors = {{0, 0}, {1, 0}};
  Rng rng(2);
  int group = 0;
  int ok = 0;
  for (int i = 0; i < 200; ++i) {
    const SampleOutcome o = sample_candidate(f.partition, f.manifest, Constraints{}, rng);
    if (o.rejection) {
      CHECK(*o.rejection == RejectReason::kGroup);
      ++group;
    } else {
      // Only model 1's stage-0 block (set 1) leaves set 0 free for stage 1.
      CHECK(o.candidate->block_ids()[0] == BlockId{1, 0});
      ++ok;
    }
  }
  CHECK(group > 0);
  CHECK(ok > 0);
}

TEST_CASE("naswot hand case and singular sentinel") {
  const std::vector<CodeMatrix> hand{codes_of(2, 3, {1, 0, 1, 1, 1, 0})};
  CHECK(std::abs(naswot_score(hand, 0.0) - std::log(8.0)) < 1e-12);
  // Splitting the columns into segments does not change the kernel.
  const std::vector<CodeMatrix> split{codes_of(2, 1, {1, 1}), codes_of(2, 2, {0, 1, 1, 0})};
  CHECK(naswot_score(split, 0.0) == doctest::Approx(std::log(8.0)).epsilon(1e-14));

  const std::vector<CodeMatrix> dup{codes_of(3, 2, {1, 0, 0, 1, 1, 0})};
  CHECK(naswot_score(dup, 0.0) == kSingularScore);
  // The ridge fallback gives a finite score.
  CHECK(std::isfinite(naswot_with_fallback(dup)));
  CHECK(naswot_with_fallback(hand) == naswot_score(hand, 0.0));

  const std::vector<CodeMatrix> mismatch{codes_of(2, 1, {1, 0}), codes_of(3, 1, {1, 0, 1})};
  CHECK_THROWS_AS(naswot_score(mismatch, 0.0), Error);
  CHECK_THROWS_AS(naswot_score({}, 0.0), Error);
}

TEST_CASE("naswot is invariant to probe-row order") {
  Rng rng(8);
  for (int t = 0; t < 30; ++t) {
    const int n = 3 + static_cast<int>(rng.below(8));
    const CodeMatrix c = random_codes(rng, n, 24);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    const std::vector<CodeMatrix> a{c};
    const std::vector<CodeMatrix> b{select_rows(c, perm)};
    const double sa = naswot_score(a, 0.0);
    const double sb = naswot_score(b, 0.0);
    if (std::isfinite(sa)) {
      CHECK(sb == doctest::Approx(sa).epsilon(1e-10));
    } else {
      CHECK(sb == kSingularScore);
    }
  }
}

TEST_CASE("appending a duplicate row drives the score to the sentinel") {
  Rng rng(9);
  const CodeMatrix c = random_codes(rng, 5, 40);
  const std::vector<CodeMatrix> base{c};
  REQUIRE(std::isfinite(naswot_score(base, 0.0)));
  const std::vector<std::size_t> rows{0, 1, 2, 3, 4, 2};
  const std::vector<CodeMatrix> dup{select_rows(c, rows)};
  CHECK(naswot_score(dup, 0.0) == kSingularScore);
}

TEST_CASE("score batches") {
  Rng rng(3);
  const ScoreBatches b = draw_score_batches(64, 5, 32, rng);
  REQUIRE(b.rows.size() == 5);
  for (const auto& rows : b.rows) {
    CHECK(rows.size() == 32);
    CHECK(std::set<std::size_t>(rows.begin(), rows.end()).size() == 32);
    CHECK(*std::max_element(rows.begin(), rows.end()) < 64);
  }
  CHECK_THROWS_AS(draw_score_batches(16, 5, 32, rng), Error);
  CHECK_THROWS_AS(draw_score_batches(64, 0, 32, rng), Error);
}

TEST_CASE("one full batch scores the whole probe set") {
  Fixture f;
  const std::vector<BlockId> ids{{0, 0}, {1, 1}, {2, 2}};
  const AssemblyCandidate c = assemble(f.partition, f.manifest, ids);
  CodeStore store(f.manifest);
  ScoreBatches all;
  all.rows.emplace_back(static_cast<std::size_t>(f.manifest.probe_count));
  std::iota(all.rows[0].begin(), all.rows[0].end(), 0);
  std::vector<CodeMatrix> segments;
  for (const auto& b : c.blocks) segments.push_back(store.block_codes(b.model_index, b.nodes));
  CHECK(score_candidate(c, store, all) == naswot_with_fallback(segments));
}

TEST_CASE("block codes concatenate node codes") {
  Fixture f;
  CodeStore store(f.manifest);
  const CodeMatrix a = read_code_matrix(f.manifest.resolve(*f.manifest.models[1].nodes[1].code_ref));
  const CodeMatrix b = read_code_matrix(f.manifest.resolve(*f.manifest.models[1].nodes[2].code_ref));
  const CodeMatrix joined = store.block_codes(1, {1, 2});
  CHECK(joined.cols == a.cols + b.cols);
  CHECK(joined.at(5, 0) == a.at(5, 0));
  CHECK(joined.at(7, a.cols) == b.at(7, 0));
  ZooManifest stripped = f.manifest;
  stripped.models[0].nodes[0].code_ref.reset();
  CodeStore none(stripped);
  CHECK_THROWS_AS(none.block_codes(0, {0, 0}), Error);
}

TEST_CASE("search ranking, dedupe and determinism") {
  Fixture f;
  SearchOptions opts;
  opts.num_candidates = 30;
  opts.seed = 4;
  const SearchResult a = search(f.partition, f.manifest, Constraints{}, opts);
  opts.workers = 4;
  const SearchResult b = search(f.partition, f.manifest, Constraints{}, opts);
  REQUIRE(a.plans.size() == b.plans.size());
  std::set<std::vector<BlockId>> seen;
  for (std::size_t i = 0; i < a.plans.size(); ++i) {
    CHECK(a.plans[i].score == b.plans[i].score);
    CHECK(a.plans[i].candidate.block_ids() == b.plans[i].candidate.block_ids());
    CHECK(a.plans[i].rank == static_cast<int>(i) + 1);
    CHECK(seen.insert(a.plans[i].candidate.block_ids()).second);
    if (i > 0) CHECK_FALSE(plan_precedes(a.plans[i], a.plans[i - 1], f.manifest));
  }
  CHECK(a.stats.draws == a.stats.accepted + a.stats.duplicates);
}

TEST_CASE("search with an impossible budget returns nothing") {
  Fixture f;
  SearchOptions opts;
  opts.num_candidates = 5;
  const SearchResult r = search(f.partition, f.manifest, Constraints{10.0, 1e12}, opts);
  CHECK(r.plans.empty());
  CHECK(r.stats.exhausted);
  CHECK(r.stats.draws == 500);
  CHECK(r.stats.rejections.at("budget:param") == 500);
  CHECK_FALSE(r.stats.warnings.empty());
}

TEST_CASE("budgeted search audits slack") {
  Fixture f;
  SearchOptions opts;
  opts.num_candidates = 200;
  const SearchResult free = search(f.partition, f.manifest, Constraints{}, opts);
  std::vector<double> params;
  for (const auto& p : free.plans) params.push_back(static_cast<double>(p.candidate.total_params));
  std::sort(params.begin(), params.end());
  const Constraints budget{params[params.size() / 2], 1e12};
  const SearchResult r = search(f.partition, f.manifest, budget, opts);
  REQUIRE_FALSE(r.plans.empty());
  for (const auto& p : r.plans) {
    CHECK(p.audit.param_slack >= 0.0);
    CHECK(p.audit.flops_slack >= 0.0);
    CHECK(static_cast<double>(p.candidate.total_params) <= budget.max_params);
  }
  std::int64_t rejected = 0;
  for (const auto& [reason, n] : r.stats.rejections) rejected += n;
  CHECK(r.stats.draws == r.stats.accepted + r.stats.duplicates + rejected);
}

TEST_CASE("ranking ties break on params then block ids") {
  Fixture f;
  ScoredPlan a;
  ScoredPlan b;
  const std::vector<BlockId> ia{{0, 0}, {1, 1}, {2, 2}};
  const std::vector<BlockId> ib{{1, 0}, {1, 1}, {2, 2}};
  a.candidate = assemble(f.partition, f.manifest, ia);
  b.candidate = assemble(f.partition, f.manifest, ib);
  a.score = b.score = 1.0;
  a.candidate.total_params = b.candidate.total_params = 10;
  CHECK(plan_precedes(a, b, f.manifest));
  CHECK_FALSE(plan_precedes(b, a, f.manifest));
  b.candidate.total_params = 9;
  CHECK(plan_precedes(b, a, f.manifest));
  a.score = 2.0;
  CHECK(plan_precedes(a, b, f.manifest));
  b.score = kSingularScore;
  a.score = -1e300;
  CHECK(plan_precedes(a, b, f.manifest));
}

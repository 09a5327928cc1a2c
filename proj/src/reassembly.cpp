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

#include "dery/reassembly.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "dery/errors.hpp"
#include "dery/parallel.hpp"

namespace dery {

std::string_view adapter_kind_name(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::kCnnToCnn: return "cnn->cnn";
    case AdapterKind::kCnnToSeq: return "cnn->seq";
    case AdapterKind::kSeqToCnn: return "seq->cnn";
    case AdapterKind::kSeqToSeq: return "seq->seq";
  }
  return "cnn->cnn";
}

std::string_view reject_reason_name(RejectReason reason) {
  switch (reason) {
    case RejectReason::kGroup: return "group";
    case RejectReason::kBudgetParam: return "budget:param";
    case RejectReason::kBudgetFlops: return "budget:flops";
  }
  return "group";
}

StitchAdapter adapter_cost(const Interface& from, const Interface& to) {
  StitchAdapter a;
  a.in_iface = from;
  a.out_iface = to;
  const bool seq_in = from.layout == Layout::kTokens;
  const bool seq_out = to.layout == Layout::kTokens;
  a.kind = seq_in ? (seq_out ? AdapterKind::kSeqToSeq : AdapterKind::kSeqToCnn)
                  : (seq_out ? AdapterKind::kCnnToSeq : AdapterKind::kCnnToCnn);
  const std::int64_t c_in = from.channels;
  const std::int64_t c_out = to.channels;
  // Projection weights + bias, plus the norm's scale and shift. Resampling to
  // the downstream grid is parameter-free.
  a.param_count = c_in * c_out + c_out + 2 * c_in;
  a.flops = static_cast<double>(to.height) * static_cast<double>(to.width) *
            static_cast<double>(c_in) * static_cast<double>(c_out);
  return a;
}

bool selection_valid(const SelectionMatrices& s) {
  if (s.x.size() != static_cast<std::size_t>(s.rows) * s.k || s.y.size() != s.x.size()) {
    return false;
  }
  for (int j = 0; j < s.k; ++j) {
    int xs = 0;
    int ys = 0;
    for (int r = 0; r < s.rows; ++r) {
      xs += s.x_at(r, j);
      ys += s.y_at(r, j);
    }
    if (xs != 1 || ys != 1) return false;
  }
  const auto count = [](const std::vector<std::uint8_t>& v) {
    return std::count(v.begin(), v.end(), std::uint8_t{1});
  };
  return count(s.x) == s.k && count(s.y) == s.k;
}

std::vector<BlockId> AssemblyCandidate::block_ids() const {
  std::vector<BlockId> ids;
  for (const auto& b : blocks) ids.push_back({b.model_index, b.stage});
  return ids;
}

AssemblyCandidate assemble(const ZooPartition& partition, const ZooManifest& manifest,
                           std::span<const BlockId> blocks) {
  const int k = partition.k;
  AssemblyCandidate c;
  c.selection.rows = partition.num_models() * k;
  c.selection.k = k;
  c.selection.x.assign(static_cast<std::size_t>(c.selection.rows) * k, 0);
  c.selection.y.assign(c.selection.x.size(), 0);
  for (const BlockId& id : blocks) {
    c.blocks.push_back(make_block(manifest, id.model, id.stage, partition.range(id.model, id.stage)));
    const int group = partition.set_of(id.model, id.stage);
    c.groups.push_back(group);
    const int row = id.model * k + id.stage;
    c.selection.x[row * k + group] = 1;
    c.selection.y[row * k + id.stage] = 1;
    c.total_params += c.blocks.back().param_count;
    c.total_flops += c.blocks.back().flops;
  }
  for (std::size_t s = 0; s + 1 < c.blocks.size(); ++s) {
    c.adapters.push_back(adapter_cost(c.blocks[s].out_iface, c.blocks[s + 1].in_iface));
    c.total_params += c.adapters.back().param_count;
    c.total_flops += c.adapters.back().flops;
  }
  return c;
}

std::optional<RejectReason> check_budget(const AssemblyCandidate& c, const Constraints& limits) {
  if (static_cast<double>(c.total_params) > limits.max_params) return RejectReason::kBudgetParam;
  if (c.total_flops > limits.max_flops) return RejectReason::kBudgetFlops;
  return std::nullopt;
}

SampleOutcome sample_candidate(const ZooPartition& partition, const ZooManifest& manifest,
                               const Constraints& constraints, Rng& rng) {
  const int k = partition.k;
  std::vector<bool> used(k, false);
  std::vector<BlockId> chosen;
  std::vector<int> options;
  for (int stage = 0; stage < k; ++stage) {
    options.clear();
    for (int i = 0; i < partition.num_models(); ++i) {
      if (!used[partition.set_of(i, stage)]) options.push_back(i);
    }
    if (options.empty()) return {std::nullopt, RejectReason::kGroup};
    const int model = options[rng.below(options.size())];
    used[partition.set_of(model, stage)] = true;
    chosen.push_back({model, stage});
  }
  AssemblyCandidate c = assemble(partition, manifest, chosen);
  if (auto reason = check_budget(c, constraints)) return {std::nullopt, reason};
  return {std::move(c), std::nullopt};
}

// --- log-det proxy ---------------------------------------------------------

namespace {

double log_abs_det(std::vector<double> a, std::size_t n) {
  double max_abs = 0.0;
  for (double v : a) max_abs = std::max(max_abs, std::abs(v));
  if (max_abs == 0.0) return kSingularScore;
  const double tiny = static_cast<double>(n) * std::numeric_limits<double>::epsilon() * max_abs;
  double log_det = 0.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r * n + col]) > std::abs(a[pivot * n + col])) pivot = r;
    }
    const double p = a[pivot * n + col];
    if (std::abs(p) <= tiny) return kSingularScore;
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a[pivot * n + c], a[col * n + c]);
    }
    log_det += std::log(std::abs(p));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / p;
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
    }
  }
  return std::isfinite(log_det) ? log_det : kSingularScore;
}

}  // namespace

double naswot_score(std::span<const CodeMatrix> segments, double ridge) {
  if (segments.empty()) fail(ErrorKind::kInvalidArgument, "no code segments to score");
  const std::size_t n = segments.front().rows;
  for (const auto& s : segments) {
    if (s.rows != n) fail(ErrorKind::kInvalidArgument, "code segments disagree on the probe count");
  }
  std::vector<double> kernel(n * n, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a; b < n; ++b) {
      std::int64_t agree = 0;
      for (const auto& s : segments) {
        const auto ra = s.row(a);
        const auto rb = s.row(b);
        for (std::size_t c = 0; c < ra.size(); ++c) agree += ra[c] == rb[c];
      }
      kernel[a * n + b] = kernel[b * n + a] = static_cast<double>(agree);
    }
  }
  for (std::size_t a = 0; a < n; ++a) kernel[a * n + a] += ridge;
  return log_abs_det(std::move(kernel), n);
}

double naswot_with_fallback(std::span<const CodeMatrix> segments) {
  const double exact = naswot_score(segments, 0.0);
  if (std::isfinite(exact)) return exact;
  std::size_t width = 0;
  for (const auto& s : segments) width += s.cols;
  return naswot_score(segments, kRidgePerColumn * static_cast<double>(width));
}

ScoreBatches draw_score_batches(std::int64_t probe_count, int num_batches, int batch_size,
                                Rng& rng) {
  if (num_batches < 1) fail(ErrorKind::kInvalidArgument, "num_batches must be >= 1");
  if (batch_size < 1 || batch_size > probe_count) {
    fail(ErrorKind::kInvalidArgument, "batch_size " + std::to_string(batch_size) +
                                          " must lie in [1, probe_count=" +
                                          std::to_string(probe_count) + "]");
  }
  ScoreBatches out;
  for (int b = 0; b < num_batches; ++b) {
    out.rows.push_back(rng.sample_without_replacement(static_cast<std::size_t>(probe_count),
                                                      static_cast<std::size_t>(batch_size)));
  }
  return out;
}

const CodeMatrix& CodeStore::node_codes(int model, int node) const {
  std::lock_guard lock(mutex_);
  auto it = cache_.find({model, node});
  if (it != cache_.end()) return *it->second;
  const ModelGraph& g = manifest_->models.at(model);
  const NodeMeta& meta = g.nodes.at(node);
  if (!meta.code_ref) {
    fail(ErrorKind::kInvalidArgument, "unscorable candidate: model '" + g.model_id + "' node " +
                                          std::to_string(node) + " has no code_file");
  }
  auto codes = std::make_shared<const CodeMatrix>(read_code_matrix(manifest_->resolve(*meta.code_ref)));
  return *cache_.emplace(std::pair{model, node}, std::move(codes)).first->second;
}

void CodeStore::preload(const ZooPartition& partition) {
  for (int i = 0; i < partition.num_models(); ++i) {
    const ModelGraph& g = manifest_->models.at(i);
    for (int n = 0; n < g.num_nodes(); ++n) {
      if (g.nodes[n].code_ref) node_codes(i, n);
    }
  }
}

CodeMatrix CodeStore::block_codes(int model, NodeRange nodes) const {
  std::vector<const CodeMatrix*> parts;
  std::uint32_t cols = 0;
  for (int n = nodes.first; n <= nodes.last; ++n) {
    parts.push_back(&node_codes(model, n));
    cols += parts.back()->cols;
  }
  const std::uint32_t rows = parts.front()->rows;
  CodeMatrix out{rows, cols, std::vector<std::uint8_t>(std::size_t{rows} * cols)};
  std::size_t offset = 0;
  for (const CodeMatrix* p : parts) {
    for (std::uint32_t r = 0; r < rows; ++r) {
      std::copy_n(p->bits.begin() + std::size_t{r} * p->cols, p->cols,
                  out.bits.begin() + std::size_t{r} * cols + offset);
    }
    offset += p->cols;
  }
  return out;
}

CodeMatrix select_rows(const CodeMatrix& codes, std::span<const std::size_t> rows) {
  CodeMatrix out{static_cast<std::uint32_t>(rows.size()), codes.cols, {}};
  out.bits.reserve(rows.size() * codes.cols);
  for (std::size_t r : rows) {
    const auto row = codes.row(r);
    out.bits.insert(out.bits.end(), row.begin(), row.end());
  }
  return out;
}

double score_candidate(const AssemblyCandidate& candidate, const CodeStore& codes,
                       const ScoreBatches& batches) {
  std::vector<CodeMatrix> full;
  for (const auto& b : candidate.blocks) full.push_back(codes.block_codes(b.model_index, b.nodes));
  double total = 0.0;
  for (const auto& rows : batches.rows) {
    std::vector<CodeMatrix> segments;
    for (const auto& f : full) segments.push_back(select_rows(f, rows));
    const double s = naswot_with_fallback(segments);
    if (!std::isfinite(s)) return kSingularScore;
    total += s;
  }
  return total / static_cast<double>(batches.rows.size());
}

bool plan_precedes(const ScoredPlan& a, const ScoredPlan& b, const ZooManifest& manifest) {
  if (a.score != b.score) return a.score > b.score;
  if (a.candidate.total_params != b.candidate.total_params) {
    return a.candidate.total_params < b.candidate.total_params;
  }
  const auto& ba = a.candidate.blocks;
  const auto& bb = b.candidate.blocks;
  for (std::size_t s = 0; s < std::min(ba.size(), bb.size()); ++s) {
    const auto& ia = manifest.models[ba[s].model_index].model_id;
    const auto& ib = manifest.models[bb[s].model_index].model_id;
    if (ia != ib) return ia < ib;
    if (ba[s].stage != bb[s].stage) return ba[s].stage < bb[s].stage;
  }
  return ba.size() < bb.size();
}

SearchResult search(const ZooPartition& partition, const ZooManifest& manifest,
                    const Constraints& constraints, const SearchOptions& options) {
  if (options.num_candidates < 1) fail(ErrorKind::kInvalidArgument, "num_candidates must be >= 1");
  if (static_cast<int>(partition.anchors.size()) != partition.k) {
    fail(ErrorKind::kInvalidArgument, "partition must define K equivalence sets");
  }
  SearchResult result;
  Rng batch_rng(derive_seed(options.seed, 0));
  const ScoreBatches batches = draw_score_batches(manifest.probe_count, options.num_batches,
                                                  options.batch_size, batch_rng);
  Rng draw_rng(derive_seed(options.seed, 1));

  std::vector<AssemblyCandidate> accepted;
  std::set<std::vector<BlockId>> seen;
  const std::int64_t cap = static_cast<std::int64_t>(kDrawCapFactor) * options.num_candidates;
  while (static_cast<int>(accepted.size()) < options.num_candidates &&
         result.stats.draws < cap) {
    ++result.stats.draws;
    SampleOutcome outcome = sample_candidate(partition, manifest, constraints, draw_rng);
    if (outcome.rejection) {
      ++result.stats.rejections[std::string(reject_reason_name(*outcome.rejection))];
      continue;
    }
    AssemblyCandidate& c = *outcome.candidate;
    if (!selection_valid(c.selection) || check_budget(c, constraints)) {
      fail(ErrorKind::kInternal, "sampler emitted a candidate violating its constraints");
    }
    if (!seen.insert(c.block_ids()).second) {
      ++result.stats.duplicates;
      continue;
    }
    accepted.push_back(std::move(c));
  }
  result.stats.accepted = static_cast<std::int64_t>(accepted.size());
  if (static_cast<int>(accepted.size()) < options.num_candidates) {
    result.stats.exhausted = true;
    result.stats.warnings.push_back("draw cap of " + std::to_string(cap) + " reached with " +
                                    std::to_string(accepted.size()) + " of " +
                                    std::to_string(options.num_candidates) +
                                    " feasible candidates");
  }

  CodeStore codes(manifest);
  if (!accepted.empty()) codes.preload(partition);
  result.plans.resize(accepted.size());
  parallel_for(accepted.size(), options.workers, [&](std::size_t i) {
    ScoredPlan& plan = result.plans[i];
    plan.candidate = std::move(accepted[i]);
    plan.score = score_candidate(plan.candidate, codes, batches);
    plan.audit.param_slack =
        constraints.max_params - static_cast<double>(plan.candidate.total_params);
    plan.audit.flops_slack = constraints.max_flops - plan.candidate.total_flops;
  });
  std::sort(result.plans.begin(), result.plans.end(),
            [&](const ScoredPlan& a, const ScoredPlan& b) { return plan_precedes(a, b, manifest); });
  for (std::size_t i = 0; i < result.plans.size(); ++i) result.plans[i].rank = static_cast<int>(i) + 1;
  return result;
}

}  // namespace dery

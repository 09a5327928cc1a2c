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

#include "dery/commands.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "dery/errors.hpp"
#include "dery/hash.hpp"
#include "dery/matrix_io.hpp"

namespace dery {

using nlohmann::json;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kParse:
    case ErrorKind::kConsistency:
    case ErrorKind::kInvalidArgument:
    case ErrorKind::kIo:
      return kExitInput;
    case ErrorKind::kDegenerate:
    case ErrorKind::kInfeasible:
    case ErrorKind::kTooLarge:
      return kExitInfeasible;
    case ErrorKind::kInternal:
      return kExitInternal;
  }
  return kExitInternal;
}

namespace {

std::atomic<int> g_log_level{static_cast<int>(LogLevel::kWarn)};

json tool_json() { return {{"name", kToolName}, {"version", kToolVersion}}; }

// JSON has no infinities; unbounded values serialize as null.
json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json iface_json(const Interface& i) {
  return {{"channels", i.channels},
          {"height", i.height},
          {"width", i.width},
          {"layout", layout_name(i.layout)}};
}

json similarity_config_json(const SimilarityConfig& c) {
  return {{"manifest", c.manifest.filename().string()},
          {"subsample", c.subsample},
          {"seed", c.seed}};
}

}  // namespace

LogLevel parse_log_level(std::string_view name) {
  if (name == "error") return LogLevel::kError;
  if (name == "warn") return LogLevel::kWarn;
  if (name == "info") return LogLevel::kInfo;
  if (name == "debug") return LogLevel::kDebug;
  fail(ErrorKind::kInvalidArgument, "unknown log level '" + std::string(name) + "'");
}

void set_log_level(LogLevel level) { g_log_level.store(static_cast<int>(level)); }

void log_message(LogLevel level, const std::string& message) {
  if (static_cast<int>(level) > g_log_level.load()) return;
  static constexpr const char* kNames[] = {"error", "warn", "info", "debug"};
  std::cerr << "dery [" << kNames[static_cast<int>(level)] << "] " << message << "\n";
}

void write_json(const std::filesystem::path& path, const json& doc) {
  write_file_bytes(path, doc.dump(2) + "\n");
}

std::filesystem::path resolve_cache_path(const SimilarityConfig& config, const std::string& key) {
  if (!config.sim_cache.empty()) return config.sim_cache;
  const std::string name = "sim-" + key.substr(0, 16) + ".stb";
  if (const char* dir = std::getenv("DERY_CACHE_DIR"); dir != nullptr && *dir != '\0') {
    return std::filesystem::path(dir) / name;
  }
  return config.manifest.parent_path() / ".dery-cache" / name;
}

TableBuildResult load_or_build_table(const ZooManifest& manifest, const SimilarityConfig& config) {
  TableBuildOptions options;
  options.subsample = config.subsample;
  options.seed = config.seed;
  options.workers = config.workers;
  const std::string key = similarity_cache_key(manifest, config.subsample, config.seed);
  options.cache_path = resolve_cache_path(config, key);
  TableBuildResult result = build_similarity_table(manifest, options);
  for (const auto& w : result.stats.warnings) log_message(LogLevel::kWarn, w);
  log_message(LogLevel::kInfo,
              result.stats.cache_hit
                  ? "similarity table loaded from " + options.cache_path.string()
                  : "similarity table built: " + std::to_string(result.stats.evaluations) +
                        " evaluations, cached at " + options.cache_path.string());
  return result;
}

// --- synth -----------------------------------------------------------------

int cmd_synth(const SynthConfig& config) {
  const synth::SynthZoo zoo = synth::generate(config.spec, config.seed);
  const ZooManifest manifest = synth::write_zoo(zoo, config.out);
  log_message(LogLevel::kInfo, "wrote " + std::to_string(manifest.num_models()) +
                                   " synthetic models to " + config.out.string());
  return kExitOk;
}

// --- similarity ------------------------------------------------------------

int cmd_similarity(const SimilarityConfig& config) {
  const ZooManifest manifest = load_manifest(config.manifest);
  const TableBuildResult built = load_or_build_table(manifest, config);
  json summary;
  summary["tool"] = tool_json();
  summary["config"] = similarity_config_json(config);
  summary["inputs"] = {{"manifest_sha256", sha256_file(config.manifest)},
                       {"similarity_key", built.stats.cache_key}};
  summary["cells"] = built.stats.cells;
  summary["evaluations"] = built.stats.evaluations;
  summary["cache_hit"] = built.stats.cache_hit;
  summary["warnings"] = built.stats.warnings;
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

// --- partition -------------------------------------------------------------

json partition_to_json(const ZooPartition& p, const ZooManifest& manifest) {
  json doc;
  doc["k"] = p.k;
  json models = json::array();
  for (int i = 0; i < p.num_models(); ++i) {
    json ranges = json::array();
    for (int s = 0; s < p.k; ++s) {
      const NodeRange r = p.range(i, s);
      ranges.push_back({r.first, r.last});
    }
    models.push_back({{"model_id", manifest.models[i].model_id},
                      {"cuts", p.cuts[i]},
                      {"node_ranges", std::move(ranges)}});
  }
  doc["models"] = std::move(models);
  json triplets = json::array();
  for (int i = 0; i < p.num_models(); ++i) {
    for (int s = 0; s < p.k; ++s) {
      triplets.push_back({manifest.models[i].model_id, s, p.set_of(i, s)});
    }
  }
  doc["assignment"] = std::move(triplets);
  json anchors = json::array();
  for (int j = 0; j < static_cast<int>(p.anchors.size()); ++j) {
    const BlockId a = p.anchors[j];
    const NodeRange r = p.range(a.model, a.stage);
    anchors.push_back({{"set", j},
                       {"model_id", manifest.models[a.model].model_id},
                       {"stage", a.stage},
                       {"node_range", {r.first, r.last}}});
  }
  doc["anchors"] = std::move(anchors);
  doc["objective"] = p.objective;
  return doc;
}

ZooPartition partition_from_json(const json& doc, const ZooManifest& manifest) {
  try {
    ZooPartition p;
    p.k = doc.at("k").get<int>();
    if (p.k < 1) fail(ErrorKind::kParse, "partition: k must be >= 1");
    const json& models = doc.at("models");
    if (static_cast<int>(models.size()) != manifest.num_models()) {
      fail(ErrorKind::kConsistency, "partition lists a different number of models than the manifest");
    }
    for (int i = 0; i < manifest.num_models(); ++i) {
      const json& jm = models.at(i);
      if (jm.at("model_id").get<std::string>() != manifest.models[i].model_id) {
        fail(ErrorKind::kConsistency, "partition model order differs from the manifest at " +
                                          std::to_string(i));
      }
      auto cuts = jm.at("cuts").get<std::vector<int>>();
      if (static_cast<int>(cuts.size()) != p.k - 1) {
        fail(ErrorKind::kConsistency, "partition: model '" + manifest.models[i].model_id +
                                          "' needs K-1 cuts");
      }
      check_cuts(manifest.models[i].num_nodes(), cuts);
      p.cuts.push_back(std::move(cuts));
      p.node_counts.push_back(manifest.models[i].num_nodes());
    }
    p.assignment.assign(static_cast<std::size_t>(manifest.num_models()) * p.k, -1);
    for (const json& t : doc.at("assignment")) {
      const int model = manifest.index_of(t.at(0).get<std::string>());
      const int stage = t.at(1).get<int>();
      const int set = t.at(2).get<int>();
      if (model < 0 || stage < 0 || stage >= p.k || set < 0 || set >= p.k) {
        fail(ErrorKind::kConsistency, "partition: bad assignment triplet " + t.dump());
      }
      p.assignment[model * p.k + stage] = set;
    }
    for (int v : p.assignment) {
      if (v < 0) fail(ErrorKind::kConsistency, "partition: a block has no assignment");
    }
    p.anchors.assign(p.k, BlockId{});
    for (const json& a : doc.at("anchors")) {
      const int set = a.at("set").get<int>();
      const int model = manifest.index_of(a.at("model_id").get<std::string>());
      const int stage = a.at("stage").get<int>();
      if (set < 0 || set >= p.k || model < 0 || stage < 0 || stage >= p.k) {
        fail(ErrorKind::kConsistency, "partition: bad anchor " + a.dump());
      }
      p.anchors[set] = {model, stage};
    }
    p.objective = doc.at("objective").get<double>();
    return p;
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("partition file: ") + e.what());
  }
}

int cmd_partition(const PartitionConfig& config) {
  const ZooManifest manifest = load_manifest(config.similarity.manifest);
  const TableBuildResult built = load_or_build_table(manifest, config.similarity);
  PartitionOptions options = config.options;
  options.workers = config.similarity.workers;
  const PartitionResult result = optimize_partition(built.table, manifest, options);

  const auto problems = check_partition(manifest, result.best, options.eps);
  if (!problems.empty()) fail(ErrorKind::kInternal, "optimizer returned an invalid partition: " + problems.front());

  json doc = partition_to_json(result.best, manifest);
  doc["tool"] = tool_json();
  json cfg = similarity_config_json(config.similarity);
  cfg["k"] = options.k;
  cfg["eps"] = options.eps;
  cfg["restarts"] = options.restarts;
  cfg["max_iters"] = options.max_iters;
  cfg["tol"] = options.tol;
  doc["config"] = std::move(cfg);
  doc["inputs"] = {{"manifest_sha256", sha256_file(config.similarity.manifest)},
                   {"similarity_key", built.stats.cache_key}};

  json objectives = json::array();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& r : result.restarts) {
    objectives.push_back(r.degenerate ? json(nullptr) : json(r.objective));
    if (!r.degenerate) {
      lo = std::min(lo, r.objective);
      hi = std::max(hi, r.objective);
    }
  }
  constexpr int kBins = 10;
  std::vector<int> counts(kBins, 0);
  for (const auto& r : result.restarts) {
    if (r.degenerate) continue;
    int bin = hi > lo ? static_cast<int>((r.objective - lo) / (hi - lo) * kBins) : 0;
    counts[std::min(bin, kBins - 1)] += 1;
  }
  doc["restarts"] = {{"count", result.restarts.size()},
                     {"degenerate", result.degenerate_restarts},
                     {"best_index", result.best_restart},
                     {"objectives", std::move(objectives)},
                     {"histogram", {{"min", lo}, {"max", hi}, {"counts", counts}}}};
  write_json(config.out, doc);
  log_message(LogLevel::kInfo, "best J=" + std::to_string(result.best.objective) + " from restart " +
                                   std::to_string(result.best_restart));
  return kExitOk;
}

// --- reassemble ------------------------------------------------------------

json plan_to_json(const ScoredPlan& plan, const ZooManifest& manifest) {
  const AssemblyCandidate& c = plan.candidate;
  json blocks = json::array();
  for (std::size_t s = 0; s < c.blocks.size(); ++s) {
    const Block& b = c.blocks[s];
    blocks.push_back({{"model_id", manifest.models[b.model_index].model_id},
                      {"stage", b.stage},
                      {"set", c.groups[s]},
                      {"node_range", {b.nodes.first, b.nodes.last}},
                      {"params", b.param_count},
                      {"flops", b.flops},
                      {"in_iface", iface_json(b.in_iface)},
                      {"out_iface", iface_json(b.out_iface)}});
  }
  json adapters = json::array();
  for (std::size_t s = 0; s < c.adapters.size(); ++s) {
    const StitchAdapter& a = c.adapters[s];
    adapters.push_back({{"after_stage", s},
                        {"kind", adapter_kind_name(a.kind)},
                        {"structure", {"norm", "conv1x1", "activation"}},
                        {"in_iface", iface_json(a.in_iface)},
                        {"out_iface", iface_json(a.out_iface)},
                        {"params", a.param_count},
                        {"flops", a.flops}});
  }
  return {{"rank", plan.rank},
          {"score", finite_or_null(plan.score)},
          {"blocks", std::move(blocks)},
          {"adapters", std::move(adapters)},
          {"total_params", c.total_params},
          {"total_flops", c.total_flops},
          {"audit",
           {{"param_slack", finite_or_null(plan.audit.param_slack)},
            {"flops_slack", finite_or_null(plan.audit.flops_slack)}}}};
}

int cmd_reassemble(const ReassembleConfig& config) {
  const ZooManifest manifest = load_manifest(config.manifest);
  const std::string partition_text = read_file_bytes(config.partition);
  json partition_doc;
  try {
    partition_doc = json::parse(partition_text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kParse, std::string("partition file is not valid JSON: ") + e.what());
  }
  const ZooPartition partition = partition_from_json(partition_doc, manifest);
  const SearchResult result = search(partition, manifest, config.constraints, config.options);
  for (const auto& w : result.stats.warnings) log_message(LogLevel::kWarn, w);

  json doc;
  doc["tool"] = tool_json();
  doc["config"] = {{"manifest", config.manifest.filename().string()},
                   {"partition", config.partition.filename().string()},
                   {"max_params", finite_or_null(config.constraints.max_params)},
                   {"max_flops", finite_or_null(config.constraints.max_flops)},
                   {"candidates", config.options.num_candidates},
                   {"batches", config.options.num_batches},
                   {"batch_size", config.options.batch_size},
                   {"seed", config.options.seed},
                   {"top", config.top}};
  doc["inputs"] = {{"manifest_sha256", sha256_file(config.manifest)},
                   {"partition_sha256", sha256_hex(partition_text)}};
  doc["stats"] = {{"draws", result.stats.draws},
                  {"accepted", result.stats.accepted},
                  {"duplicates", result.stats.duplicates},
                  {"rejections", result.stats.rejections},
                  {"exhausted", result.stats.exhausted},
                  {"warnings", result.stats.warnings}};
  json plans = json::array();
  for (const auto& plan : result.plans) {
    if (config.top > 0 && plan.rank > config.top) break;
    plans.push_back(plan_to_json(plan, manifest));
  }
  doc["plans"] = std::move(plans);
  write_json(config.out, doc);
  if (result.plans.empty()) {
    log_message(LogLevel::kError, "no candidate satisfies the budgets");
    return kExitInfeasible;
  }
  return kExitOk;
}

// --- report ----------------------------------------------------------------

double diagonal_pattern(const SimilarityTable& table, int a, int b) {
  const int la = table.num_nodes(a);
  const int lb = table.num_nodes(b);
  double on = 0.0;
  double off = 0.0;
  int n_on = 0;
  int n_off = 0;
  for (int x = 0; x < la; ++x) {
    const double depth = la > 1 ? static_cast<double>(x) / (la - 1) : 0.5;
    const int match = static_cast<int>(std::lround(depth * (lb - 1)));
    for (int y = 0; y < lb; ++y) {
      const double v = table.at(a, x, b, y);
      if (y == match) {
        on += v;
        ++n_on;
      } else {
        off += v;
        ++n_off;
      }
    }
  }
  if (n_on == 0 || n_off == 0) return std::numeric_limits<double>::quiet_NaN();
  return on / n_on - off / n_off;
}

int cmd_report(const ReportConfig& config, std::ostream& os) {
  std::ostringstream out;
  json doc;
  try {
    doc = json::parse(read_file_bytes(config.plans));
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kParse, std::string("plans file is not valid JSON: ") + e.what());
  }
  try {
    out << "Reassembly plans (" << doc.at("plans").size() << " shown)\n";
    out << std::left << std::setw(6) << "rank" << std::setw(14) << "score" << std::setw(14)
        << "params" << std::setw(16) << "flops" << "blocks\n";
    for (const json& plan : doc.at("plans")) {
      std::ostringstream blocks;
      for (const json& b : plan.at("blocks")) {
        const auto range = b.at("node_range");
        blocks << b.at("model_id").get<std::string>() << "-" << range.at(0).get<int>() << ":"
               << range.at(1).get<int>() << "-s" << b.at("stage").get<int>() << " ";
      }
      std::ostringstream score;
      if (plan.at("score").is_null()) {
        score << "-inf";
      } else {
        score << std::fixed << std::setprecision(4) << plan.at("score").get<double>();
      }
      out << std::left << std::setw(6) << plan.at("rank").get<int>() << std::setw(14)
          << score.str() << std::setw(14) << plan.at("total_params").get<std::int64_t>()
          << std::setw(16) << std::setprecision(6) << plan.at("total_flops").get<double>()
          << blocks.str() << "\n";
    }
    if (doc.contains("stats")) {
      const json& stats = doc.at("stats");
      out << "draws=" << stats.at("draws") << " accepted=" << stats.at("accepted")
          << " duplicates=" << stats.at("duplicates") << " rejections=" << stats.at("rejections").dump()
          << "\n";
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("plans file: ") + e.what());
  }

  if (config.similarity) {
    const ZooManifest manifest = load_manifest(config.similarity->manifest);
    const TableBuildResult built = load_or_build_table(manifest, *config.similarity);
    out << "\nSimilarity diagonal pattern (mean on-diagonal - mean off-diagonal)\n";
    for (int i = 0; i < manifest.num_models(); ++i) {
      for (int j = i + 1; j < manifest.num_models(); ++j) {
        const double d = diagonal_pattern(built.table, i, j);
        out << "  " << manifest.models[i].model_id << " vs " << manifest.models[j].model_id << ": ";
        if (std::isnan(d)) {
          out << "n/a\n";
        } else {
          out << std::fixed << std::setprecision(4) << d << "\n";
        }
      }
    }
  }

  if (config.out.empty()) {
    os << out.str();
  } else {
    write_file_bytes(config.out, out.str());
  }
  return kExitOk;
}

}  // namespace dery

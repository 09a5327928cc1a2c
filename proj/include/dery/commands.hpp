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

// Subcommand bodies behind the `dery` CLI. Each writes its artifact, embeds
// the tool version, resolved configuration and input hashes, and returns a
// process exit status.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include <json.hpp>

#include "dery/errors.hpp"
#include "dery/partition.hpp"
#include "dery/reassembly.hpp"
#include "dery/similarity.hpp"
#include "dery/synthzoo.hpp"

namespace dery {

inline constexpr std::string_view kToolName = "dery";
inline constexpr std::string_view kToolVersion = "0.1.0";

enum ExitCode : int {
  kExitOk = 0,
  kExitInput = 2,
  kExitInfeasible = 3,
  kExitInternal = 4,
};

int exit_code_for(ErrorKind kind);

enum class LogLevel { kError, kWarn, kInfo, kDebug };
LogLevel parse_log_level(std::string_view name);
void set_log_level(LogLevel level);
void log_message(LogLevel level, const std::string& message);

struct SynthConfig {
  synth::SynthSpec spec;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};

struct SimilarityConfig {
  std::filesystem::path manifest;
  double subsample = kDefaultSubsample;
  std::uint64_t seed = 0;
  std::filesystem::path sim_cache;  // empty: default location
  int workers = 1;
};

struct PartitionConfig {
  SimilarityConfig similarity;
  PartitionOptions options;
  std::filesystem::path out;
};

struct ReassembleConfig {
  std::filesystem::path partition;
  std::filesystem::path manifest;
  Constraints constraints;
  SearchOptions options;
  int top = 20;
  std::filesystem::path out;
};

struct ReportConfig {
  std::filesystem::path plans;
  // Optional similarity summary inputs.
  std::optional<SimilarityConfig> similarity;
  std::filesystem::path out;  // empty: stdout
};

// Cache file for a manifest: explicit path, else $DERY_CACHE_DIR, else
// .dery-cache/ next to the manifest.
std::filesystem::path resolve_cache_path(const SimilarityConfig& config, const std::string& key);

TableBuildResult load_or_build_table(const ZooManifest& manifest, const SimilarityConfig& config);

int cmd_synth(const SynthConfig& config);
int cmd_similarity(const SimilarityConfig& config);
int cmd_partition(const PartitionConfig& config);
int cmd_reassemble(const ReassembleConfig& config);
int cmd_report(const ReportConfig& config, std::ostream& out);

nlohmann::json partition_to_json(const ZooPartition& partition, const ZooManifest& manifest);
// Needs the manifest to map model ids back to indices and node counts.
ZooPartition partition_from_json(const nlohmann::json& doc, const ZooManifest& manifest);

nlohmann::json plan_to_json(const ScoredPlan& plan, const ZooManifest& manifest);

// Mean on-diagonal minus mean off-diagonal node similarity between two models;
// node a of model i sits on the diagonal with the relative-depth-matched node
// of model j.
double diagonal_pattern(const SimilarityTable& table, int model_a, int model_b);

// Pretty-printed with sorted keys and a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);

}  // namespace dery

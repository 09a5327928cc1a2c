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

#include <charconv>
#include <iostream>
#include <string>
#include <thread>
#include <utility>

#include <CLI11.hpp>

#include "dery/commands.hpp"
#include "dery/errors.hpp"

namespace {

// "6..8" or a single "7".
std::pair<int, int> parse_range(const std::string& text, const char* flag) {
  const auto dots = text.find("..");
  auto to_int = [&](std::string_view s) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      dery::fail(dery::ErrorKind::kInvalidArgument,
                 std::string("bad range for ") + flag + ": '" + text + "'");
    }
    return v;
  };
  if (dots == std::string::npos) {
    const int v = to_int(text);
    return {v, v};
  }
  return {to_int(std::string_view(text).substr(0, dots)),
          to_int(std::string_view(text).substr(dots + 2))};
}

void add_similarity_flags(CLI::App* cmd, dery::SimilarityConfig& c, bool manifest_required) {
  auto* opt = cmd->add_option("--manifest", c.manifest, "Zoo manifest (JSON)");
  if (manifest_required) opt->required();
  cmd->add_option("--subsample", c.subsample, "Fraction of probe rows used for similarity")
      ->capture_default_str();
  cmd->add_option("--sim-cache", c.sim_cache, "Similarity cache file (STB1)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partition a model zoo into functional equivalence sets and reassemble blocks "
               "into budgeted candidate networks."};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  int workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  std::string log_level = "warn";
  app.add_option("--seed", seed, "Global seed")->capture_default_str();
  app.add_option("--workers", workers, "Worker threads (results do not depend on it)");
  app.add_option("--log-level", log_level, "error|warn|info|debug")->capture_default_str();

  dery::SynthConfig synth;
  std::string nodes = "6..8";
  std::string widths = "4..16";
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic model zoo");
  synth_cmd->add_option("--models", synth.spec.num_models)->capture_default_str();
  synth_cmd->add_option("--nodes", nodes, "Nodes per model, lo..hi")->capture_default_str();
  synth_cmd->add_option("--widths", widths, "Node widths, lo..hi")->capture_default_str();
  synth_cmd->add_option("--probe", synth.spec.probe_n, "Probe batch size")->capture_default_str();
  synth_cmd->add_option("--input-dim", synth.spec.input_dim)->capture_default_str();
  synth_cmd->add_option("--family", synth.spec.family_size,
                        "Number of leading models sharing all weights (0 = none)")
      ->capture_default_str();
  synth_cmd->add_option("--partitionable-k", synth.spec.partition_k,
                        "Redraw models until a K-cut under --partitionable-eps exists");
  synth_cmd->add_option("--partitionable-eps", synth.spec.partition_eps)->capture_default_str();
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  dery::SimilarityConfig similarity;
  auto* sim_cmd = app.add_subcommand("similarity", "Build the offline node-similarity table");
  add_similarity_flags(sim_cmd, similarity, true);

  dery::PartitionConfig partition;
  auto* part_cmd = app.add_subcommand("partition", "Optimize the zoo partition");
  add_similarity_flags(part_cmd, partition.similarity, true);
  part_cmd->add_option("--k", partition.options.k, "Blocks per model")->capture_default_str();
  part_cmd->add_option("--eps", partition.options.eps, "Block size coefficient")->capture_default_str();
  part_cmd->add_option("--restarts", partition.options.restarts)->capture_default_str();
  part_cmd->add_option("--max-iters", partition.options.max_iters)->capture_default_str();
  part_cmd->add_option("--tol", partition.options.tol, "Convergence threshold on J")
      ->capture_default_str();
  part_cmd->add_option("--out", partition.out, "partition.json")->required();

  dery::ReassembleConfig reassemble;
  auto* re_cmd = app.add_subcommand("reassemble", "Search budgeted reassembly candidates");
  re_cmd->add_option("--partition", reassemble.partition)->required();
  re_cmd->add_option("--manifest", reassemble.manifest)->required();
  re_cmd->add_option("--max-params", reassemble.constraints.max_params, "Parameter budget");
  re_cmd->add_option("--max-flops", reassemble.constraints.max_flops, "FLOP budget");
  re_cmd->add_option("--candidates", reassemble.options.num_candidates)->capture_default_str();
  re_cmd->add_option("--batches", reassemble.options.num_batches)->capture_default_str();
  re_cmd->add_option("--batch-size", reassemble.options.batch_size)->capture_default_str();
  re_cmd->add_option("--top", reassemble.top, "Plans written (0 = all)")->capture_default_str();
  re_cmd->add_option("--out", reassemble.out, "plans.json")->required();

  dery::ReportConfig report;
  dery::SimilarityConfig report_similarity;
  auto* report_cmd = app.add_subcommand("report", "Render plans and a similarity summary");
  report_cmd->add_option("--plans", report.plans)->required();
  add_similarity_flags(report_cmd, report_similarity, false);
  report_cmd->add_option("--out", report.out, "Write the report here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : dery::kExitInput;
  }

  try {
    dery::set_log_level(dery::parse_log_level(log_level));
    similarity.seed = partition.similarity.seed = report_similarity.seed = seed;
    similarity.workers = partition.similarity.workers = report_similarity.workers = workers;
    synth.seed = seed;
    partition.options.seed = seed;
    reassemble.options.seed = seed;
    reassemble.options.workers = workers;
    if (synth_cmd->parsed()) {
      std::tie(synth.spec.min_nodes, synth.spec.max_nodes) = parse_range(nodes, "--nodes");
      std::tie(synth.spec.min_width, synth.spec.max_width) = parse_range(widths, "--widths");
      return dery::cmd_synth(synth);
    }
    if (sim_cmd->parsed()) return dery::cmd_similarity(similarity);
    if (part_cmd->parsed()) return dery::cmd_partition(partition);
    if (re_cmd->parsed()) return dery::cmd_reassemble(reassemble);
    if (report_cmd->parsed()) {
      if (!report_similarity.manifest.empty()) report.similarity = report_similarity;
      return dery::cmd_report(report, std::cout);
    }
  } catch (const dery::Error& e) {
    std::cerr << "error class=" << dery::error_kind_name(e.kind()) << " message=\"" << e.what()
              << "\"\n";
    return dery::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error class=internal message=\"" << e.what() << "\"\n";
    return dery::kExitInternal;
  }
  return dery::kExitInternal;
}

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

// Desk-scale stand-in for a real model zoo: chains of affine + rectifier
// nodes with exact forwarding. Provides ground truth for the partition and
// reassembly oracles.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dery/matrix_io.hpp"
#include "dery/partition.hpp"
#include "dery/reassembly.hpp"
#include "dery/similarity.hpp"
#include "dery/zoo.hpp"

namespace dery::synth {

struct SynthSpec {
  int num_models = 4;
  int min_nodes = 6;
  int max_nodes = 8;
  int min_width = 4;
  int max_width = 16;
  int probe_n = 64;
  int input_dim = 8;
  // The first `family_size` models share every weight (0 or >= 2).
  int family_size = 0;
  // When > 0, every model is regenerated until a K-cut under `partition_eps`
  // exists.
  int partition_k = 0;
  double partition_eps = kDefaultSizeEps;
};

struct SynthNode {
  Eigen::MatrixXd weight;  // d_out x d_in
  Eigen::VectorXd bias;    // d_out

  std::int64_t param_count() const { return weight.size() + bias.size(); }
  double flops() const { return static_cast<double>(weight.size()); }
  int in_dim() const { return static_cast<int>(weight.cols()); }
  int out_dim() const { return static_cast<int>(weight.rows()); }
};

struct SynthModel {
  std::string model_id;
  std::vector<SynthNode> nodes;
};

struct SynthZoo {
  std::vector<SynthModel> models;
  Eigen::MatrixXd probe;  // probe_n x input_dim
  std::uint64_t seed = 0;
  int family_size = 0;
};

SynthZoo generate(const SynthSpec& spec, std::uint64_t seed);

// Per-node outputs (rows = inputs) and their positivity codes.
struct ForwardTrace {
  std::vector<Eigen::MatrixXd> features;
  std::vector<CodeMatrix> codes;
};

ForwardTrace forward(const SynthZoo& zoo, int model, const Eigen::MatrixXd& inputs);

// Forwards a stitched candidate with identity adapters; throws kInvalidArgument
// when consecutive block widths differ.
ForwardTrace forward_candidate(const SynthZoo& zoo, const AssemblyCandidate& candidate,
                               const Eigen::MatrixXd& inputs);

CodeMatrix concat_codes(std::span<const CodeMatrix> parts);

// In-memory manifest with the file layout write_zoo uses.
ZooManifest to_manifest(const SynthZoo& zoo);

// Writes manifest.json, probe.fmx, features/*.fmx and codes/*.bcx under dir.
ZooManifest write_zoo(const SynthZoo& zoo, const std::filesystem::path& dir);

inline constexpr std::int64_t kBruteForceLimit = 1'000'000;

struct BruteForceResult {
  ZooPartition partition;
  double objective = 0.0;
  std::int64_t cut_sets_considered = 0;  // all well-formed cut sets
  std::int64_t feasible_cut_sets = 0;
  std::int64_t anchor_sets = 0;
};

// Exact maximum of J over feasible cuts, anchors and assignments. Enumerates
// K-subsets of candidate anchor blocks and, for each, the best cut set of
// every model independently; throws kTooLarge past kBruteForceLimit subsets.
BruteForceResult brute_force_partition(const ZooManifest& manifest, const SimilarityTable& table,
                                       int k, double eps);

}  // namespace dery::synth

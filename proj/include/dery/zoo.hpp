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

// Model-zoo description: every network is a path graph of atomic nodes with
// precomputed costs and optional references to probe-batch dumps.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dery {

inline constexpr std::string_view kManifestVersion = "dery-zoo/1";
inline constexpr double kDefaultSizeEps = 0.2;

enum class Layout { kSpatial, kTokens };

std::string_view layout_name(Layout layout);
Layout parse_layout(std::string_view name);

// Shape of the tensor crossing a node boundary. For token layouts `height`
// holds the token count and `width` is 1.
struct Interface {
  std::int64_t channels = 1;
  std::int64_t height = 1;
  std::int64_t width = 1;
  Layout layout = Layout::kSpatial;

  bool operator==(const Interface&) const = default;
};

struct NodeMeta {
  int node_id = 0;
  std::int64_t param_count = 0;
  double flops = 0.0;  // multiply-accumulates per probe example
  std::int64_t out_channels = 1;
  std::int64_t out_h = 1;
  std::int64_t out_w = 1;
  Layout layout = Layout::kSpatial;
  // Relative to the manifest directory.
  std::optional<std::filesystem::path> feature_ref;
  std::optional<std::filesystem::path> code_ref;

  Interface out_iface() const { return {out_channels, out_h, out_w, layout}; }
  bool operator==(const NodeMeta&) const = default;
};

struct ModelGraph {
  std::string model_id;
  std::vector<NodeMeta> nodes;
  std::array<std::int64_t, 3> input_shape{1, 1, 1};  // channels, height, width

  int num_nodes() const { return static_cast<int>(nodes.size()); }
  std::int64_t total_params() const;
  double total_flops() const;
  Interface input_iface() const;
  // Interface entering node `node`: the model input for node 0.
  Interface iface_before(int node) const;

  bool operator==(const ModelGraph&) const = default;
};

struct ZooManifest {
  std::string version{kManifestVersion};
  std::int64_t probe_count = 0;
  std::vector<ModelGraph> models;
  // Optional FMX1 dump of the raw probe inputs, used to compare a raw-input
  // boundary against internal node outputs.
  std::optional<std::filesystem::path> probe_ref;
  std::filesystem::path base_dir;  // not serialized

  int num_models() const { return static_cast<int>(models.size()); }
  int index_of(std::string_view model_id) const;  // -1 if absent
  std::filesystem::path resolve(const std::filesystem::path& ref) const;

  bool operator==(const ZooManifest& other) const {
    return version == other.version && probe_count == other.probe_count &&
           models == other.models && probe_ref == other.probe_ref;
  }
};

ZooManifest parse_manifest(std::string_view json_text, const std::filesystem::path& base_dir);
// Parses and validates, header-checking every referenced matrix file.
ZooManifest load_manifest(const std::filesystem::path& path);
std::string manifest_to_json(const ZooManifest& manifest);
void save_manifest(const std::filesystem::path& path, const ZooManifest& manifest);

// Inclusive node ordinals.
struct NodeRange {
  int first = 0;
  int last = 0;

  int size() const { return last - first + 1; }
  bool operator==(const NodeRange&) const = default;
  auto operator<=>(const NodeRange&) const = default;
};

struct Block {
  std::string model_id;
  int model_index = 0;
  int stage = 0;  // 0-based stage index k
  NodeRange nodes;
  std::int64_t param_count = 0;
  double flops = 0.0;
  Interface in_iface;
  Interface out_iface;
};

Block make_block(const ZooManifest& manifest, int model_index, int stage, NodeRange nodes);

struct Cost {
  std::int64_t params = 0;
  double flops = 0.0;
};

Cost block_cost(const Block& block);
Cost range_cost(const ModelGraph& model, NodeRange nodes);

// A cut value c splits before node c, so the cuts {2} on a 4-node model give
// blocks [0,1] and [2,3]. Valid cuts are strictly increasing within [1, L-1].
void check_cuts(int num_nodes, std::span<const int> cuts);
std::vector<NodeRange> ranges_from_cuts(int num_nodes, std::span<const int> cuts);

struct PartitionViolation {
  enum class Kind { kEmptyBlock, kSizeBound };
  Kind kind;
  int block;  // 0-based stage index
  std::string message;
};

// Size bound: each block's params < (1 + eps) * total / K. Collects every
// violation; throws kInvalidArgument on malformed cuts.
std::vector<PartitionViolation> validate_partition(const ModelGraph& model,
                                                   std::span<const int> cuts,
                                                   double eps = kDefaultSizeEps);

bool satisfies_size_bound(std::int64_t block_params, std::int64_t total_params, int k,
                          double eps);

}  // namespace dery

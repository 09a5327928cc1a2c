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

#include "dery/zoo.hpp"

#include <cmath>
#include <numeric>
#include <set>

#include <json.hpp>

#include "dery/errors.hpp"
#include "dery/matrix_io.hpp"

namespace dery {

using nlohmann::json;

std::string_view layout_name(Layout layout) {
  return layout == Layout::kTokens ? "tokens" : "spatial";
}

Layout parse_layout(std::string_view name) {
  if (name == "spatial") return Layout::kSpatial;
  if (name == "tokens") return Layout::kTokens;
  fail(ErrorKind::kParse, "unknown layout '" + std::string(name) + "'");
}

std::int64_t ModelGraph::total_params() const {
  std::int64_t total = 0;
  for (const auto& n : nodes) total += n.param_count;
  return total;
}

double ModelGraph::total_flops() const {
  double total = 0.0;
  for (const auto& n : nodes) total += n.flops;
  return total;
}

Interface ModelGraph::input_iface() const {
  return {input_shape[0], input_shape[1], input_shape[2], Layout::kSpatial};
}

Interface ModelGraph::iface_before(int node) const {
  return node == 0 ? input_iface() : nodes.at(node - 1).out_iface();
}

int ZooManifest::index_of(std::string_view model_id) const {
  for (int i = 0; i < num_models(); ++i) {
    if (models[i].model_id == model_id) return i;
  }
  return -1;
}

std::filesystem::path ZooManifest::resolve(const std::filesystem::path& ref) const {
  return ref.is_absolute() ? ref : base_dir / ref;
}

namespace {

template <typename T>
T required(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    fail(ErrorKind::kParse, where + ": missing key '" + key + "'");
  }
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, where + ": bad value for '" + key + "': " + e.what());
  }
}

std::optional<std::filesystem::path> optional_path(const json& obj, const char* key,
                                                   const std::string& where) {
  if (!obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
  return std::filesystem::path(required<std::string>(obj, key, where));
}

void check_rows(const ZooManifest& m, const std::filesystem::path& ref,
                std::string_view expected_magic, const std::string& where) {
  const auto path = m.resolve(ref);
  if (!std::filesystem::exists(path)) {
    fail(ErrorKind::kConsistency, where + ": referenced file " + path.string() + " does not exist");
  }
  const MatrixHeader h = read_matrix_header(path);
  if (h.magic != expected_magic) {
    fail(ErrorKind::kConsistency, where + ": " + path.string() + " has magic " + h.magic +
                                      ", expected " + std::string(expected_magic));
  }
  if (static_cast<std::int64_t>(h.rows) != m.probe_count) {
    fail(ErrorKind::kConsistency, where + ": " + path.string() + " has n=" +
                                      std::to_string(h.rows) + " rows but probe_count=" +
                                      std::to_string(m.probe_count));
  }
}

void validate_manifest(const ZooManifest& m, bool check_files) {
  if (m.version != kManifestVersion) {
    fail(ErrorKind::kConsistency, "unsupported manifest version '" + m.version + "'");
  }
  if (m.probe_count < 0) fail(ErrorKind::kConsistency, "probe_count must be non-negative");
  if (m.models.empty()) fail(ErrorKind::kConsistency, "manifest lists no models");
  std::set<std::string> seen;
  for (const auto& model : m.models) {
    if (!seen.insert(model.model_id).second) {
      fail(ErrorKind::kConsistency, "duplicate model_id '" + model.model_id + "'");
    }
    if (model.nodes.empty()) {
      fail(ErrorKind::kConsistency, "model '" + model.model_id + "' has no nodes");
    }
    for (auto dim : model.input_shape) {
      if (dim < 1) fail(ErrorKind::kConsistency, "model '" + model.model_id + "': input_shape must be positive");
    }
    for (int i = 0; i < model.num_nodes(); ++i) {
      const NodeMeta& n = model.nodes[i];
      const std::string where = "model '" + model.model_id + "' node " + std::to_string(i);
      if (n.node_id != i) {
        fail(ErrorKind::kConsistency, where + ": node_id " + std::to_string(n.node_id) +
                                          " breaks the path order");
      }
      if (n.param_count < 0) fail(ErrorKind::kConsistency, where + ": negative param_count");
      if (!(n.flops >= 0.0) || !std::isfinite(n.flops)) {
        fail(ErrorKind::kConsistency, where + ": flops must be finite and non-negative");
      }
      if (n.out_channels < 1) fail(ErrorKind::kConsistency, where + ": out_channels must be >= 1");
      if (n.out_h < 1 || n.out_w < 1) fail(ErrorKind::kConsistency, where + ": spatial dims must be >= 1");
      if (check_files) {
        if (n.feature_ref) check_rows(m, *n.feature_ref, kFeatureMagic, where);
        if (n.code_ref) check_rows(m, *n.code_ref, kCodeMagic, where);
      }
    }
  }
  if (check_files && m.probe_ref) check_rows(m, *m.probe_ref, kFeatureMagic, "probe_file");
}

}  // namespace

ZooManifest parse_manifest(std::string_view json_text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kParse, std::string("manifest is not valid JSON: ") + e.what());
  }
  ZooManifest m;
  m.base_dir = base_dir;
  m.version = required<std::string>(doc, "version", "manifest");
  m.probe_count = required<std::int64_t>(doc, "probe_count", "manifest");
  m.probe_ref = optional_path(doc, "probe_file", "manifest");
  const json models = required<json>(doc, "models", "manifest");
  if (!models.is_array()) fail(ErrorKind::kParse, "manifest: 'models' must be an array");
  for (const auto& jm : models) {
    ModelGraph g;
    g.model_id = required<std::string>(jm, "model_id", "model");
    const std::string where = "model '" + g.model_id + "'";
    const auto shape = required<std::vector<std::int64_t>>(jm, "input_shape", where);
    if (shape.size() != 3) fail(ErrorKind::kParse, where + ": input_shape must be [c,h,w]");
    g.input_shape = {shape[0], shape[1], shape[2]};
    const json nodes = required<json>(jm, "nodes", where);
    if (!nodes.is_array()) fail(ErrorKind::kParse, where + ": 'nodes' must be an array");
    int ordinal = 0;
    for (const auto& jn : nodes) {
      const std::string nwhere = where + " node " + std::to_string(ordinal);
      NodeMeta n;
      n.node_id = jn.contains("node_id") ? required<int>(jn, "node_id", nwhere) : ordinal;
      n.param_count = required<std::int64_t>(jn, "param_count", nwhere);
      n.flops = required<double>(jn, "flops", nwhere);
      n.out_channels = required<std::int64_t>(jn, "out_channels", nwhere);
      n.out_h = required<std::int64_t>(jn, "out_h", nwhere);
      n.out_w = required<std::int64_t>(jn, "out_w", nwhere);
      n.layout = parse_layout(required<std::string>(jn, "layout", nwhere));
      n.feature_ref = optional_path(jn, "feature_file", nwhere);
      n.code_ref = optional_path(jn, "code_file", nwhere);
      g.nodes.push_back(std::move(n));
      ++ordinal;
    }
    m.models.push_back(std::move(g));
  }
  validate_manifest(m, /*check_files=*/false);
  return m;
}

ZooManifest load_manifest(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  ZooManifest m = parse_manifest(text, path.parent_path());
  validate_manifest(m, /*check_files=*/true);
  return m;
}

std::string manifest_to_json(const ZooManifest& m) {
  json doc;
  doc["version"] = m.version;
  doc["probe_count"] = m.probe_count;
  if (m.probe_ref) doc["probe_file"] = m.probe_ref->generic_string();
  json models = json::array();
  for (const auto& g : m.models) {
    json jm;
    jm["model_id"] = g.model_id;
    jm["input_shape"] = g.input_shape;
    json nodes = json::array();
    for (const auto& n : g.nodes) {
      json jn;
      jn["node_id"] = n.node_id;
      jn["param_count"] = n.param_count;
      jn["flops"] = n.flops;
      jn["out_channels"] = n.out_channels;
      jn["out_h"] = n.out_h;
      jn["out_w"] = n.out_w;
      jn["layout"] = layout_name(n.layout);
      if (n.feature_ref) jn["feature_file"] = n.feature_ref->generic_string();
      if (n.code_ref) jn["code_file"] = n.code_ref->generic_string();
      nodes.push_back(std::move(jn));
    }
    jm["nodes"] = std::move(nodes);
    models.push_back(std::move(jm));
  }
  doc["models"] = std::move(models);
  return doc.dump(2) + "\n";
}

void save_manifest(const std::filesystem::path& path, const ZooManifest& manifest) {
  write_file_bytes(path, manifest_to_json(manifest));
}

Cost range_cost(const ModelGraph& model, NodeRange nodes) {
  Cost c;
  for (int i = nodes.first; i <= nodes.last; ++i) {
    c.params += model.nodes[i].param_count;
    c.flops += model.nodes[i].flops;
  }
  return c;
}

Block make_block(const ZooManifest& manifest, int model_index, int stage, NodeRange nodes) {
  const ModelGraph& model = manifest.models.at(model_index);
  if (nodes.first < 0 || nodes.last >= model.num_nodes() || nodes.first > nodes.last) {
    fail(ErrorKind::kInvalidArgument, "node range [" + std::to_string(nodes.first) + "," +
                                          std::to_string(nodes.last) + "] outside model '" +
                                          model.model_id + "'");
  }
  const Cost c = range_cost(model, nodes);
  Block b;
  b.model_id = model.model_id;
  b.model_index = model_index;
  b.stage = stage;
  b.nodes = nodes;
  b.param_count = c.params;
  b.flops = c.flops;
  b.in_iface = model.iface_before(nodes.first);
  b.out_iface = model.nodes[nodes.last].out_iface();
  return b;
}

Cost block_cost(const Block& block) { return {block.param_count, block.flops}; }

void check_cuts(int num_nodes, std::span<const int> cuts) {
  int prev = 0;
  for (int c : cuts) {
    if (c <= prev || c >= num_nodes) {
      fail(ErrorKind::kInvalidArgument,
           "cuts must be strictly increasing within [1, " + std::to_string(num_nodes - 1) +
               "], got " + std::to_string(c));
    }
    prev = c;
  }
}

std::vector<NodeRange> ranges_from_cuts(int num_nodes, std::span<const int> cuts) {
  check_cuts(num_nodes, cuts);
  std::vector<NodeRange> out;
  out.reserve(cuts.size() + 1);
  int first = 0;
  for (int c : cuts) {
    out.push_back({first, c - 1});
    first = c;
  }
  out.push_back({first, num_nodes - 1});
  return out;
}

bool satisfies_size_bound(std::int64_t block_params, std::int64_t total_params, int k,
                          double eps) {
  if (total_params == 0) return true;
  return static_cast<double>(block_params) * k < (1.0 + eps) * static_cast<double>(total_params);
}

std::vector<PartitionViolation> validate_partition(const ModelGraph& model,
                                                   std::span<const int> cuts, double eps) {
  const auto ranges = ranges_from_cuts(model.num_nodes(), cuts);
  const int k = static_cast<int>(ranges.size());
  const std::int64_t total = model.total_params();
  std::vector<PartitionViolation> out;
  for (int b = 0; b < k; ++b) {
    if (ranges[b].size() < 1) {
      out.push_back({PartitionViolation::Kind::kEmptyBlock, b,
                     "block " + std::to_string(b) + " is empty"});
      continue;
    }
    const std::int64_t params = range_cost(model, ranges[b]).params;
    if (!satisfies_size_bound(params, total, k, eps)) {
      out.push_back({PartitionViolation::Kind::kSizeBound, b,
                     "block " + std::to_string(b) + " of '" + model.model_id + "' has " +
                         std::to_string(params) + " params, bound is (1+" + std::to_string(eps) +
                         ")*" + std::to_string(total) + "/" + std::to_string(k)});
    }
  }
  return out;
}

}  // namespace dery

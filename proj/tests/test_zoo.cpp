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

#include <functional>
#include <string>

#include "dery/errors.hpp"
#include "dery/matrix_io.hpp"
#include "dery/rng.hpp"
#include "dery/zoo.hpp"
#include "test_support.hpp"

using namespace dery;

namespace {

const char* kTwoNode = R"({
  "version": "dery-zoo/1",
  "probe_count": 32,
  "models": [
    {"model_id": "tiny", "input_shape": [3, 8, 8],
     "nodes": [
       {"param_count": 100, "flops": 6400, "out_channels": 4, "out_h": 8, "out_w": 8,
        "layout": "spatial", "feature_file": "f0.fmx"},
       {"param_count": 200, "flops": 3200, "out_channels": 8, "out_h": 4, "out_w": 4,
        "layout": "spatial"}
     ]}
  ]
})";

void write_features(const std::filesystem::path& path, std::uint32_t rows, std::uint32_t cols) {
  FeatureMatrix f;
  f.rows = rows;
  f.cols = cols;
  f.values.assign(static_cast<std::size_t>(rows) * cols, 0.5f);
  write_feature_matrix(path, f);
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::kInternal;
}

}  // namespace

TEST_CASE("minimal manifest loads") {
  testing::TempDir dir("zoo-min");
  write_file_bytes(dir / "m.json", kTwoNode);
  write_features(dir / "f0.fmx", 32, 256);
  const ZooManifest m = load_manifest(dir / "m.json");
  REQUIRE(m.num_models() == 1);
  CHECK(m.probe_count == 32);
  const ModelGraph& g = m.models[0];
  CHECK(g.num_nodes() == 2);
  CHECK(g.nodes[1].node_id == 1);
  CHECK(g.total_params() == 300);
  CHECK(g.iface_before(0) == Interface{3, 8, 8, Layout::kSpatial});
  CHECK(g.iface_before(1) == Interface{4, 8, 8, Layout::kSpatial});
  CHECK(m.resolve(*g.nodes[0].feature_ref) == dir / "f0.fmx");
  CHECK(m.index_of("tiny") == 0);
  CHECK(m.index_of("other") == -1);
}

TEST_CASE("row-count mismatch names the file") {
  testing::TempDir dir("zoo-rows");
  write_file_bytes(dir / "m.json", kTwoNode);
  write_features(dir / "f0.fmx", 16, 4);
  try {
    load_manifest(dir / "m.json");
    FAIL("expected a consistency error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kConsistency);
    CHECK(std::string(e.what()).find("f0.fmx") != std::string::npos);
  }
}

TEST_CASE("manifest consistency errors") {
  const std::filesystem::path base = ".";
  CHECK(kind_of([&] { parse_manifest("{not json", base); }) == ErrorKind::kParse);
  CHECK(kind_of([&] { parse_manifest(R"({"version":"dery-zoo/1","models":[]})", base); }) ==
        ErrorKind::kParse);

  std::string dup = R"({"version":"dery-zoo/1","probe_count":4,"models":[
    {"model_id":"a","input_shape":[1,1,1],"nodes":[{"param_count":1,"flops":1,"out_channels":1,"out_h":1,"out_w":1,"layout":"tokens"}]},
    {"model_id":"a","input_shape":[1,1,1],"nodes":[{"param_count":1,"flops":1,"out_channels":1,"out_h":1,"out_w":1,"layout":"tokens"}]}]})";
  CHECK(kind_of([&] { parse_manifest(dup, base); }) == ErrorKind::kConsistency);

  std::string order = R"({"version":"dery-zoo/1","probe_count":4,"models":[
    {"model_id":"a","input_shape":[1,1,1],"nodes":[
      {"node_id":1,"param_count":1,"flops":1,"out_channels":1,"out_h":1,"out_w":1,"layout":"tokens"}]}]})";
  CHECK(kind_of([&] { parse_manifest(order, base); }) == ErrorKind::kConsistency);

  std::string negative = R"({"version":"dery-zoo/1","probe_count":4,"models":[
    {"model_id":"a","input_shape":[1,1,1],"nodes":[
      {"param_count":-1,"flops":1,"out_channels":1,"out_h":1,"out_w":1,"layout":"tokens"}]}]})";
  CHECK(kind_of([&] { parse_manifest(negative, base); }) == ErrorKind::kConsistency);

  std::string layout = R"({"version":"dery-zoo/1","probe_count":4,"models":[
    {"model_id":"a","input_shape":[1,1,1],"nodes":[
      {"param_count":1,"flops":1,"out_channels":1,"out_h":1,"out_w":1,"layout":"graph"}]}]})";
  CHECK(kind_of([&] { parse_manifest(layout, base); }) != ErrorKind::kInternal);
}

TEST_CASE("save then load is the identity") {
  testing::TempDir dir("zoo-rt");
  Rng rng(4);
  ZooManifest m;
  m.probe_count = 8;
  for (int i = 0; i < 3; ++i) {
    ModelGraph g;
    g.model_id = "model" + std::to_string(i);
    g.input_shape = {3, 16, 16};
    const int n = 2 + static_cast<int>(rng.below(4));
    for (int j = 0; j < n; ++j) {
      NodeMeta node;
      node.node_id = j;
      node.param_count = static_cast<std::int64_t>(rng.below(100000));
      node.flops = static_cast<double>(rng.below(1u << 30)) * 0.25;
      node.out_channels = 1 + static_cast<std::int64_t>(rng.below(64));
      node.out_h = node.out_w = 1 + static_cast<std::int64_t>(rng.below(8));
      node.layout = rng.below(2) ? Layout::kTokens : Layout::kSpatial;
      if (rng.below(2)) node.code_ref = "codes/" + g.model_id + "_" + std::to_string(j) + ".bcx";
      g.nodes.push_back(node);
    }
    m.models.push_back(g);
  }
  save_manifest(dir / "m.json", m);
  for (const auto& g : m.models) {
    for (const auto& n : g.nodes) {
      if (n.code_ref) {
        CodeMatrix c;
        c.rows = 8;
        c.cols = 1;
        c.bits.assign(8, 1);
        write_code_matrix(dir.path() / *n.code_ref, c);
      }
    }
  }
  const ZooManifest back = load_manifest(dir / "m.json");
  CHECK(back == m);
  CHECK(manifest_to_json(back) == manifest_to_json(m));
}

TEST_CASE("block cost is additive") {
  const ModelGraph g = testing::chain_model("m", {100, 200, 50, 25});
  CHECK(range_cost(g, {0, 1}).params == 300);
  CHECK(range_cost(g, {0, 3}).params == g.total_params());
  for (int cut = 1; cut < 4; ++cut) {
    const Cost a = range_cost(g, {0, cut - 1});
    const Cost b = range_cost(g, {cut, 3});
    CHECK(a.params + b.params == g.total_params());
    CHECK(a.flops + b.flops == doctest::Approx(g.total_flops()));
  }
  ZooManifest m;
  m.models.push_back(g);
  const Block blk = make_block(m, 0, 1, {1, 2});
  CHECK(block_cost(blk).params == 250);
  CHECK(blk.in_iface == g.iface_before(1));
  CHECK(blk.out_iface == g.nodes[2].out_iface());
}

TEST_CASE("cuts become contiguous covering ranges") {
  const std::vector<int> cuts{2, 5};
  const auto ranges = ranges_from_cuts(7, cuts);
  REQUIRE(ranges.size() == 3);
  CHECK(ranges[0] == NodeRange{0, 1});
  CHECK(ranges[1] == NodeRange{2, 4});
  CHECK(ranges[2] == NodeRange{5, 6});
  const std::vector<int> bad1{3, 3};
  const std::vector<int> bad2{0};
  const std::vector<int> bad3{7};
  CHECK_THROWS_AS(ranges_from_cuts(7, bad1), Error);
  CHECK_THROWS_AS(ranges_from_cuts(7, bad2), Error);
  CHECK_THROWS_AS(ranges_from_cuts(7, bad3), Error);
}

TEST_CASE("size bound on an equal-cost model") {
  const ModelGraph g = testing::chain_model("eq", {10, 10, 10, 10});
  const std::vector<int> balanced{2};
  const std::vector<int> skewed{3};
  CHECK(validate_partition(g, balanced, 0.2).empty());
  const auto v = validate_partition(g, skewed, 0.2);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == PartitionViolation::Kind::kSizeBound);
  CHECK(v[0].block == 0);
  // Default eps is 0.2.
  CHECK(validate_partition(g, skewed).size() == 1);
  CHECK(validate_partition(g, skewed, 0.6).empty());
}

TEST_CASE("size bound reports every violation") {
  // Total 100, K=3: bound 40. Blocks 45, 50 and 5.
  const ModelGraph g = testing::chain_model("v", {45, 50, 5});
  const std::vector<int> cuts{1, 2};
  const auto v = validate_partition(g, cuts, 0.2);
  REQUIRE(v.size() == 2);
  CHECK(v[0].block == 0);
  CHECK(v[1].block == 1);
  CHECK(satisfies_size_bound(0, 0, 3, 0.2));
}

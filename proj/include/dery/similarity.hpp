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

// Representation similarity between probe-batch activations, and the offline
// node-pair table that block-level functional similarity is read from.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dery/matrix_io.hpp"
#include "dery/zoo.hpp"

namespace dery {

using Matrix = Eigen::MatrixXd;

inline constexpr double kDefaultSubsample = 1.0 / 20.0;
// Smallest row count the subsampled table build will use (all rows when the
// probe batch itself is smaller).
inline constexpr int kMinSubsampleRows = 32;
inline constexpr double kDegenerateNorm = 1e-12;

Matrix to_matrix(const FeatureMatrix& features);

// Requires at least two rows.
Matrix center_columns(const Matrix& m);

// Linear CKA on column-centered copies of x and y. Uses the d1 x d2 cross
// product when n exceeds both widths, n x n Grams otherwise. Throws
// kDegenerate when either centered matrix has Frobenius norm below 1e-12.
double linear_cka(const Matrix& x, const Matrix& y);

// Mean over `num_batches` seeded row batches of the unbiased-HSIC CKA ratio.
// Each batch draws `batch_size` distinct rows.
double minibatch_cka(const Matrix& x, const Matrix& y, int batch_size, int num_batches,
                     std::uint64_t seed);

// Pluggable s(., .) for the table build. Must be symmetric with values in [0,1].
using SimilarityFn = std::function<double(const Matrix&, const Matrix&)>;

// Boundary similarities for every pair of node outputs in the zoo. Boundary
// index -1 is the raw probe input of a model; 0..L-1 are node outputs.
class SimilarityTable {
 public:
  static constexpr int kInput = -1;

  SimilarityTable() = default;
  explicit SimilarityTable(std::vector<int> node_counts);

  int num_models() const { return static_cast<int>(node_counts_.size()); }
  int num_nodes(int model) const { return node_counts_.at(model); }
  const std::vector<int>& node_counts() const { return node_counts_; }

  // Throws kInvalidArgument for an entry that was never filled.
  double at(int model_a, int boundary_a, int model_b, int boundary_b) const;
  bool has(int model_a, int boundary_a, int model_b, int boundary_b) const;
  // Writes the entry and its mirror image.
  void set(int model_a, int boundary_a, int model_b, int boundary_b, double value);

  // Raw storage for the cache container: pairs (i <= j) in row-major order.
  const std::vector<double>& raw() const { return values_; }
  std::vector<double>& raw() { return values_; }

 private:
  std::size_t offset(int model_a, int boundary_a, int model_b, int boundary_b) const;

  std::vector<int> node_counts_;
  std::vector<std::size_t> pair_offsets_;  // indexed by i * N + j, i <= j
  std::vector<double> values_;
};

// S = s(inputs) + s(outputs). A block's input boundary is the output of the
// node preceding its range, or the raw probe for a block starting at node 0.
double block_similarity(const SimilarityTable& table, int model_a, NodeRange range_a,
                        int model_b, NodeRange range_b);
double functional_similarity(const SimilarityTable& table, const Block& a, const Block& b);

struct TableBuildOptions {
  double subsample = kDefaultSubsample;
  std::uint64_t seed = 0;
  int workers = 1;
  // Empty: no persistent cache.
  std::filesystem::path cache_path;
  // Null selects the built-in linear CKA fast path.
  SimilarityFn similarity;
};

struct TableBuildStats {
  std::int64_t cells = 0;            // node-pair cells, sum_i sum_j L_i * L_j over i <= j
  std::int64_t evaluations = 0;      // similarity evaluations actually run
  std::int64_t rows_used = 0;
  bool cache_hit = false;
  std::string cache_key;
  std::vector<std::string> warnings;
};

struct TableBuildResult {
  SimilarityTable table;
  TableBuildStats stats;
};

// Every node must carry a feature_ref.
TableBuildResult build_similarity_table(const ZooManifest& manifest,
                                        const TableBuildOptions& options);

// Key covering manifest content, feature bytes, and the sampling options.
std::string similarity_cache_key(const ZooManifest& manifest, double subsample,
                                 std::uint64_t seed);

void write_similarity_cache(const std::filesystem::path& path, const std::string& key,
                            const SimilarityTable& table);
// Returns false (leaving `table` untouched) when the file is absent or keyed
// differently.
bool read_similarity_cache(const std::filesystem::path& path, const std::string& key,
                           SimilarityTable& table);

int subsample_rows(std::int64_t probe_count, double fraction);

}  // namespace dery

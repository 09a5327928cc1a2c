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

#include "dery/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <sstream>

#include "dery/errors.hpp"
#include "dery/hash.hpp"
#include "dery/parallel.hpp"
#include "dery/rng.hpp"

namespace dery {

Matrix to_matrix(const FeatureMatrix& f) {
  Matrix m(f.rows, f.cols);
  for (std::uint32_t r = 0; r < f.rows; ++r) {
    for (std::uint32_t c = 0; c < f.cols; ++c) m(r, c) = f.at(r, c);
  }
  return m;
}

Matrix center_columns(const Matrix& m) {
  if (m.rows() < 2) fail(ErrorKind::kInvalidArgument, "centering needs at least 2 rows");
  return m.rowwise() - m.colwise().mean();
}

namespace {

// ||Yc^T Xc||_F^2 without forming n x n Grams unless they are the smaller side.
double cross_term(const Matrix& xc, const Matrix& yc) {
  const auto n = xc.rows();
  if (n > std::max(xc.cols(), yc.cols())) return (yc.transpose() * xc).squaredNorm();
  return (xc * xc.transpose()).cwiseProduct(yc * yc.transpose()).sum();
}

double self_term(const Matrix& xc) {
  if (xc.rows() > xc.cols()) return (xc.transpose() * xc).norm();
  return (xc * xc.transpose()).norm();
}

double cka_centered(const Matrix& xc, double x_self, const Matrix& yc, double y_self) {
  return cross_term(xc, yc) / (x_self * y_self);
}

void check_pair(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) {
    fail(ErrorKind::kInvalidArgument, "CKA inputs must share the probe count (" +
                                          std::to_string(x.rows()) + " vs " +
                                          std::to_string(y.rows()) + ")");
  }
  if (x.rows() < 2) fail(ErrorKind::kInvalidArgument, "CKA needs at least 2 probe rows");
}

// Unbiased HSIC estimator on kernels with zeroed diagonals (n >= 4).
double hsic_unbiased(const Matrix& k, const Matrix& l) {
  const double n = static_cast<double>(k.rows());
  const double trace_kl = k.cwiseProduct(l).sum();  // tr(K L) for symmetric L
  const double sum_k = k.sum();
  const double sum_l = l.sum();
  const double cross = (k.colwise().sum() * l.rowwise().sum())(0, 0);
  return (trace_kl + sum_k * sum_l / ((n - 1) * (n - 2)) - 2.0 / (n - 2) * cross) /
         (n * (n - 3));
}

Matrix zero_diag_gram(const Matrix& x) {
  Matrix k = x * x.transpose();
  k.diagonal().setZero();
  return k;
}

}  // namespace

double linear_cka(const Matrix& x, const Matrix& y) {
  check_pair(x, y);
  const Matrix xc = center_columns(x);
  const Matrix yc = center_columns(y);
  if (xc.norm() < kDegenerateNorm || yc.norm() < kDegenerateNorm) {
    fail(ErrorKind::kDegenerate, "degenerate similarity input: centered features are all zero");
  }
  return cka_centered(xc, self_term(xc), yc, self_term(yc));
}

double minibatch_cka(const Matrix& x, const Matrix& y, int batch_size, int num_batches,
                     std::uint64_t seed) {
  check_pair(x, y);
  const auto n = x.rows();
  if (batch_size > n) {
    fail(ErrorKind::kInvalidArgument, "batch_size " + std::to_string(batch_size) +
                                          " exceeds probe count " + std::to_string(n));
  }
  if (batch_size < 4) {
    fail(ErrorKind::kInvalidArgument, "the unbiased HSIC estimator needs batch_size >= 4");
  }
  if (num_batches < 1) fail(ErrorKind::kInvalidArgument, "num_batches must be >= 1");
  Rng rng(seed);
  double total = 0.0;
  Matrix xb(batch_size, x.cols());
  Matrix yb(batch_size, y.cols());
  for (int b = 0; b < num_batches; ++b) {
    const auto rows = rng.sample_without_replacement(static_cast<std::size_t>(n),
                                                     static_cast<std::size_t>(batch_size));
    for (int r = 0; r < batch_size; ++r) {
      xb.row(r) = x.row(static_cast<Eigen::Index>(rows[r]));
      yb.row(r) = y.row(static_cast<Eigen::Index>(rows[r]));
    }
    const Matrix k = zero_diag_gram(xb);
    const Matrix l = zero_diag_gram(yb);
    const double kk = hsic_unbiased(k, k);
    const double ll = hsic_unbiased(l, l);
    if (!(kk > 0.0) || !(ll > 0.0)) {
      fail(ErrorKind::kDegenerate, "degenerate mini-batch: non-positive self-HSIC in batch " +
                                       std::to_string(b));
    }
    total += hsic_unbiased(k, l) / std::sqrt(kk * ll);
  }
  return total / num_batches;
}

// --- SimilarityTable -------------------------------------------------------

SimilarityTable::SimilarityTable(std::vector<int> node_counts)
    : node_counts_(std::move(node_counts)) {
  const int n = num_models();
  pair_offsets_.assign(static_cast<std::size_t>(n) * n, 0);
  std::size_t total = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      pair_offsets_[static_cast<std::size_t>(i) * n + j] = total;
      total += static_cast<std::size_t>(node_counts_[i] + 1) * (node_counts_[j] + 1);
    }
  }
  values_.assign(total, std::numeric_limits<double>::quiet_NaN());
  // All models consume the same probe examples.
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) set(i, kInput, j, kInput, 1.0);
  }
}

std::size_t SimilarityTable::offset(int ma, int ba, int mb, int bb) const {
  const int n = num_models();
  if (ma < 0 || mb < 0 || ma >= n || mb >= n || ba < kInput || bb < kInput ||
      ba >= node_counts_[ma] || bb >= node_counts_[mb]) {
    fail(ErrorKind::kInvalidArgument, "similarity table index out of range");
  }
  if (ma > mb) {
    std::swap(ma, mb);
    std::swap(ba, bb);
  }
  const std::size_t cols = static_cast<std::size_t>(node_counts_[mb] + 1);
  return pair_offsets_[static_cast<std::size_t>(ma) * n + mb] +
         static_cast<std::size_t>(ba + 1) * cols + static_cast<std::size_t>(bb + 1);
}

bool SimilarityTable::has(int ma, int ba, int mb, int bb) const {
  return !std::isnan(values_[offset(ma, ba, mb, bb)]);
}

double SimilarityTable::at(int ma, int ba, int mb, int bb) const {
  const double v = values_[offset(ma, ba, mb, bb)];
  if (std::isnan(v)) {
    fail(ErrorKind::kInvalidArgument, "missing similarity entry (model " + std::to_string(ma) +
                                          ", boundary " + std::to_string(ba) + ") vs (model " +
                                          std::to_string(mb) + ", boundary " +
                                          std::to_string(bb) + ")");
  }
  return v;
}

void SimilarityTable::set(int ma, int ba, int mb, int bb, double value) {
  values_[offset(ma, ba, mb, bb)] = value;
  if (ma == mb) values_[offset(ma, bb, mb, ba)] = value;
}

double block_similarity(const SimilarityTable& table, int model_a, NodeRange range_a,
                        int model_b, NodeRange range_b) {
  const double input = table.at(model_a, range_a.first - 1, model_b, range_b.first - 1);
  const double output = table.at(model_a, range_a.last, model_b, range_b.last);
  return input + output;
}

double functional_similarity(const SimilarityTable& table, const Block& a, const Block& b) {
  return block_similarity(table, a.model_index, a.nodes, b.model_index, b.nodes);
}

// --- table build -----------------------------------------------------------

int subsample_rows(std::int64_t probe_count, double fraction) {
  if (probe_count < 2) fail(ErrorKind::kInvalidArgument, "probe batch needs at least 2 rows");
  if (!(fraction > 0.0) || fraction > 1.0) {
    fail(ErrorKind::kInvalidArgument, "subsample fraction must lie in (0, 1]");
  }
  const auto wanted = static_cast<std::int64_t>(std::ceil(fraction * probe_count));
  const std::int64_t floor_rows = std::min<std::int64_t>(probe_count, kMinSubsampleRows);
  return static_cast<int>(std::clamp(wanted, floor_rows, probe_count));
}

std::string similarity_cache_key(const ZooManifest& manifest, double subsample,
                                 std::uint64_t seed) {
  Sha256 h;
  h.update("dery-sim/1\n").update(manifest_to_json(manifest));
  std::ostringstream opts;
  opts.precision(17);
  opts << "subsample=" << subsample << " seed=" << seed << "\n";
  h.update(opts.str());
  auto add_file = [&](const std::optional<std::filesystem::path>& ref) {
    if (ref) h.update(read_file_bytes(manifest.resolve(*ref)));
  };
  add_file(manifest.probe_ref);
  for (const auto& model : manifest.models) {
    for (const auto& node : model.nodes) add_file(node.feature_ref);
  }
  return h.hex_digest();
}

void write_similarity_cache(const std::filesystem::path& path, const std::string& key,
                            const SimilarityTable& table) {
  std::string out = "STB1";
  put_u32(out, static_cast<std::uint32_t>(key.size()));
  out += key;
  put_u32(out, static_cast<std::uint32_t>(table.num_models()));
  for (int c : table.node_counts()) put_u32(out, static_cast<std::uint32_t>(c));
  put_u64(out, table.raw().size());
  for (double v : table.raw()) put_f64(out, v);
  write_file_bytes(path, out);
}

bool read_similarity_cache(const std::filesystem::path& path, const std::string& key,
                           SimilarityTable& table) {
  if (!std::filesystem::exists(path)) return false;
  const std::string bytes = read_file_bytes(path);
  if (bytes.size() < 4 || bytes.compare(0, 4, "STB1") != 0) {
    fail(ErrorKind::kParse, path.string() + ": not an STB1 similarity cache");
  }
  std::size_t pos = 4;
  const std::uint32_t key_len = get_u32(bytes, pos);
  if (pos + key_len > bytes.size()) fail(ErrorKind::kParse, path.string() + ": truncated key");
  const std::string stored = bytes.substr(pos, key_len);
  pos += key_len;
  if (stored != key) return false;
  const std::uint32_t models = get_u32(bytes, pos);
  std::vector<int> counts(models);
  for (auto& c : counts) c = static_cast<int>(get_u32(bytes, pos));
  SimilarityTable loaded(std::move(counts));
  const std::uint64_t size = get_u64(bytes, pos);
  if (size != loaded.raw().size()) fail(ErrorKind::kParse, path.string() + ": table size mismatch");
  for (auto& v : loaded.raw()) v = get_f64(bytes, pos);
  if (pos != bytes.size()) fail(ErrorKind::kParse, path.string() + ": trailing bytes");
  table = std::move(loaded);
  return true;
}

namespace {

struct PreparedFeatures {
  Matrix raw;       // subsampled rows, used by a custom similarity
  Matrix centered;  // subsampled and centered
  double self = 0.0;
  bool degenerate = false;
};

PreparedFeatures prepare(const ZooManifest& manifest, const std::filesystem::path& ref,
                         const std::vector<std::size_t>& rows) {
  const FeatureMatrix f = read_feature_matrix(manifest.resolve(ref));
  if (static_cast<std::int64_t>(f.rows) != manifest.probe_count) {
    fail(ErrorKind::kConsistency, ref.string() + ": row count does not match probe_count");
  }
  PreparedFeatures p;
  p.raw.resize(static_cast<Eigen::Index>(rows.size()), f.cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::uint32_t c = 0; c < f.cols; ++c) {
      p.raw(static_cast<Eigen::Index>(r), c) = f.at(rows[r], c);
    }
  }
  p.centered = center_columns(p.raw);
  p.degenerate = p.centered.norm() < kDegenerateNorm;
  if (!p.degenerate) p.self = self_term(p.centered);
  return p;
}

struct Task {
  int model_a, node_a, model_b, node_b;  // node_a == kInput marks the raw probe
};

}  // namespace

TableBuildResult build_similarity_table(const ZooManifest& manifest,
                                        const TableBuildOptions& options) {
  TableBuildResult result;
  std::vector<int> counts;
  for (const auto& m : manifest.models) counts.push_back(m.num_nodes());
  for (int i = 0; i < manifest.num_models(); ++i) {
    for (int j = i; j < manifest.num_models(); ++j) {
      result.stats.cells += static_cast<std::int64_t>(counts[i]) * counts[j];
    }
  }

  if (!options.cache_path.empty()) {
    result.stats.cache_key = similarity_cache_key(manifest, options.subsample, options.seed);
    if (read_similarity_cache(options.cache_path, result.stats.cache_key, result.table)) {
      if (result.table.node_counts() != counts) {
        fail(ErrorKind::kConsistency, "similarity cache does not match the manifest's node counts");
      }
      result.stats.cache_hit = true;
      return result;
    }
  }

  for (const auto& m : manifest.models) {
    for (const auto& n : m.nodes) {
      if (!n.feature_ref) {
        fail(ErrorKind::kInvalidArgument, "model '" + m.model_id + "' node " +
                                              std::to_string(n.node_id) + " has no feature_file");
      }
    }
  }

  const int rows = subsample_rows(manifest.probe_count, options.subsample);
  result.stats.rows_used = rows;
  Rng rng(options.seed);
  auto picked = rng.sample_without_replacement(static_cast<std::size_t>(manifest.probe_count),
                                               static_cast<std::size_t>(rows));
  std::sort(picked.begin(), picked.end());

  // Flattened index of every node, plus one slot for the probe input.
  std::vector<std::size_t> first_slot;
  std::size_t slots = 0;
  for (int c : counts) {
    first_slot.push_back(slots);
    slots += static_cast<std::size_t>(c);
  }
  const bool with_probe = manifest.probe_ref.has_value();
  std::vector<PreparedFeatures> prepared(slots + (with_probe ? 1 : 0));
  parallel_for(prepared.size(), options.workers, [&](std::size_t s) {
    if (s == slots) {
      prepared[s] = prepare(manifest, *manifest.probe_ref, picked);
      return;
    }
    const int model =
        static_cast<int>(std::upper_bound(first_slot.begin(), first_slot.end(), s) -
                         first_slot.begin()) - 1;
    const int node = static_cast<int>(s - first_slot[model]);
    prepared[s] = prepare(manifest, *manifest.models[model].nodes[node].feature_ref, picked);
  });

  SimilarityTable table(counts);
  std::vector<Task> tasks;
  const int n_models = manifest.num_models();
  for (int i = 0; i < n_models; ++i) {
    for (int a = 0; a < counts[i]; ++a) table.set(i, a, i, a, 1.0);
    for (int j = i; j < n_models; ++j) {
      for (int a = 0; a < counts[i]; ++a) {
        for (int b = (i == j ? a + 1 : 0); b < counts[j]; ++b) tasks.push_back({i, a, j, b});
      }
    }
  }
  // The raw probe is shared, so probe-vs-node entries depend on the node only.
  for (int j = 0; j < n_models; ++j) {
    for (int b = 0; b < counts[j]; ++b) {
      if (with_probe) {
        tasks.push_back({-1, SimilarityTable::kInput, j, b});
      } else {
        for (int i = 0; i < n_models; ++i) table.set(i, SimilarityTable::kInput, j, b, 0.0);
      }
    }
  }

  auto features_of = [&](int model, int node) -> const PreparedFeatures& {
    if (node == SimilarityTable::kInput) return prepared[slots];
    return prepared[first_slot[model] + static_cast<std::size_t>(node)];
  };

  std::vector<double> values(tasks.size(), 0.0);
  std::vector<char> degenerate(tasks.size(), 0);
  parallel_for(tasks.size(), options.workers, [&](std::size_t t) {
    const Task& task = tasks[t];
    const PreparedFeatures& x = features_of(task.model_a, task.node_a);
    const PreparedFeatures& y = features_of(task.model_b, task.node_b);
    if (x.degenerate || y.degenerate) {
      degenerate[t] = 1;
      return;
    }
    const double s = options.similarity ? options.similarity(x.raw, y.raw)
                                        : cka_centered(x.centered, x.self, y.centered, y.self);
    values[t] = std::clamp(s, 0.0, 1.0);
  });
  result.stats.evaluations = static_cast<std::int64_t>(tasks.size());

  auto label = [&](int model, int node) {
    if (node == SimilarityTable::kInput) return std::string("probe input");
    return manifest.models[model].model_id + ":" + std::to_string(node);
  };
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const Task& task = tasks[t];
    if (degenerate[t]) {
      result.stats.warnings.push_back("degenerate features for " +
                                      label(task.model_a, task.node_a) + " vs " +
                                      label(task.model_b, task.node_b) + "; similarity set to 0");
    }
    if (task.node_a == SimilarityTable::kInput) {
      for (int i = 0; i < n_models; ++i) {
        table.set(i, SimilarityTable::kInput, task.model_b, task.node_b, values[t]);
      }
    } else {
      table.set(task.model_a, task.node_a, task.model_b, task.node_b, values[t]);
    }
  }
  result.table = std::move(table);
  if (!options.cache_path.empty()) {
    write_similarity_cache(options.cache_path, result.stats.cache_key, result.table);
  }
  return result;
}

}  // namespace dery

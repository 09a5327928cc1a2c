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

#include "dery/synthzoo.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <map>

#include "dery/errors.hpp"
#include "dery/rng.hpp"

namespace dery::synth {

namespace {

constexpr int kMaxRegenerations = 1000;

int uniform_int(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

std::vector<SynthNode> random_chain(Rng& rng, const SynthSpec& spec) {
  const int count = uniform_int(rng, spec.min_nodes, spec.max_nodes);
  std::vector<SynthNode> nodes;
  int in = spec.input_dim;
  for (int n = 0; n < count; ++n) {
    const int out = uniform_int(rng, spec.min_width, spec.max_width);
    SynthNode node;
    node.weight.resize(out, in);
    node.bias.resize(out);
    const double scale = std::sqrt(2.0 / in);
    for (int r = 0; r < out; ++r) {
      for (int c = 0; c < in; ++c) node.weight(r, c) = scale * rng.normal();
      node.bias(r) = 0.1 * rng.normal();
    }
    nodes.push_back(std::move(node));
    in = out;
  }
  return nodes;
}

ModelGraph graph_of(const std::string& id, const std::vector<SynthNode>& nodes, int input_dim) {
  ModelGraph g;
  g.model_id = id;
  g.input_shape = {input_dim, 1, 1};
  for (int n = 0; n < static_cast<int>(nodes.size()); ++n) {
    NodeMeta meta;
    meta.node_id = n;
    meta.param_count = nodes[n].param_count();
    meta.flops = nodes[n].flops();
    meta.out_channels = nodes[n].out_dim();
    meta.layout = Layout::kTokens;
    g.nodes.push_back(std::move(meta));
  }
  return g;
}

std::vector<SynthNode> admissible_chain(Rng& rng, const SynthSpec& spec) {
  for (int attempt = 0; attempt < kMaxRegenerations; ++attempt) {
    auto nodes = random_chain(rng, spec);
    if (spec.partition_k <= 0) return nodes;
    if (balanced_cuts(graph_of("", nodes, spec.input_dim), spec.partition_k, spec.partition_eps)) {
      return nodes;
    }
  }
  fail(ErrorKind::kInfeasible, "could not draw a model admitting a K-cut under the size bound");
}

std::string model_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth%02d", index);
  return buf;
}

std::string node_stem(const std::string& model_id, int node) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "_n%02d", node);
  return model_id + buf;
}

Eigen::MatrixXd apply_node(const SynthNode& node, const Eigen::MatrixXd& x) {
  if (x.cols() != node.in_dim()) {
    fail(ErrorKind::kInvalidArgument, "dimension mismatch: node expects " +
                                          std::to_string(node.in_dim()) + " inputs, got " +
                                          std::to_string(x.cols()));
  }
  Eigen::MatrixXd y = x * node.weight.transpose();
  y.rowwise() += node.bias.transpose();
  return y.cwiseMax(0.0);
}

CodeMatrix positivity_codes(const Eigen::MatrixXd& f) {
  CodeMatrix c{static_cast<std::uint32_t>(f.rows()), static_cast<std::uint32_t>(f.cols()), {}};
  c.bits.resize(static_cast<std::size_t>(f.size()));
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    for (Eigen::Index col = 0; col < f.cols(); ++col) {
      c.bits[static_cast<std::size_t>(r * f.cols() + col)] = f(r, col) > 0.0 ? 1 : 0;
    }
  }
  return c;
}

FeatureMatrix to_feature_matrix(const Eigen::MatrixXd& m) {
  FeatureMatrix f{static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols()), {}};
  f.values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) f.values.push_back(static_cast<float>(m(r, c)));
  }
  return f;
}

}  // namespace

SynthZoo generate(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.num_models < 1) fail(ErrorKind::kInvalidArgument, "need at least one model");
  if (spec.min_nodes < 1 || spec.min_nodes > spec.max_nodes) {
    fail(ErrorKind::kInvalidArgument, "invalid node-count range");
  }
  if (spec.min_width < 1 || spec.min_width > spec.max_width || spec.input_dim < 1) {
    fail(ErrorKind::kInvalidArgument, "widths must be >= 1 with min <= max");
  }
  if (spec.probe_n < 2) fail(ErrorKind::kInvalidArgument, "probe_n must be >= 2");
  if (spec.family_size == 1 || spec.family_size < 0 || spec.family_size > spec.num_models) {
    fail(ErrorKind::kInvalidArgument, "family_size must be 0 or in [2, num_models]");
  }
  Rng rng(seed);
  SynthZoo zoo;
  zoo.seed = seed;
  zoo.family_size = spec.family_size;
  zoo.probe.resize(spec.probe_n, spec.input_dim);
  for (int r = 0; r < spec.probe_n; ++r) {
    for (int c = 0; c < spec.input_dim; ++c) zoo.probe(r, c) = rng.normal();
  }
  std::vector<SynthNode> family;
  if (spec.family_size > 0) family = admissible_chain(rng, spec);
  for (int m = 0; m < spec.num_models; ++m) {
    SynthModel model;
    model.model_id = model_name(m);
    model.nodes = m < spec.family_size ? family : admissible_chain(rng, spec);
    zoo.models.push_back(std::move(model));
  }
  return zoo;
}

ForwardTrace forward(const SynthZoo& zoo, int model, const Eigen::MatrixXd& inputs) {
  ForwardTrace trace;
  Eigen::MatrixXd x = inputs;
  for (const SynthNode& node : zoo.models.at(model).nodes) {
    x = apply_node(node, x);
    trace.codes.push_back(positivity_codes(x));
    trace.features.push_back(x);
  }
  return trace;
}

ForwardTrace forward_candidate(const SynthZoo& zoo, const AssemblyCandidate& candidate,
                               const Eigen::MatrixXd& inputs) {
  ForwardTrace trace;
  Eigen::MatrixXd x = inputs;
  for (std::size_t s = 0; s < candidate.blocks.size(); ++s) {
    const Block& b = candidate.blocks[s];
    const SynthModel& model = zoo.models.at(b.model_index);
    if (s > 0) {
      // Identity-initialised norm/projection/rectifier is the identity on
      // rectified inputs, which needs matching widths.
      if (x.cols() != model.nodes[b.nodes.first].in_dim()) {
        fail(ErrorKind::kInvalidArgument,
             "identity adapter needs matching widths at stage " + std::to_string(s) + " (" +
                 std::to_string(x.cols()) + " vs " +
                 std::to_string(model.nodes[b.nodes.first].in_dim()) + ")");
      }
      x = x.cwiseMax(0.0);
    }
    for (int n = b.nodes.first; n <= b.nodes.last; ++n) {
      x = apply_node(model.nodes[n], x);
      trace.codes.push_back(positivity_codes(x));
      trace.features.push_back(x);
    }
  }
  return trace;
}

CodeMatrix concat_codes(std::span<const CodeMatrix> parts) {
  if (parts.empty()) return {};
  const std::uint32_t rows = parts.front().rows;
  std::uint32_t cols = 0;
  for (const auto& p : parts) cols += p.cols;
  CodeMatrix out{rows, cols, std::vector<std::uint8_t>(std::size_t{rows} * cols)};
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::uint32_t r = 0; r < rows; ++r) {
      std::copy_n(p.bits.begin() + std::size_t{r} * p.cols, p.cols,
                  out.bits.begin() + std::size_t{r} * cols + offset);
    }
    offset += p.cols;
  }
  return out;
}

ZooManifest to_manifest(const SynthZoo& zoo) {
  ZooManifest m;
  m.probe_count = zoo.probe.rows();
  m.probe_ref = "probe.fmx";
  for (const auto& model : zoo.models) {
    ModelGraph g = graph_of(model.model_id, model.nodes, static_cast<int>(zoo.probe.cols()));
    for (auto& node : g.nodes) {
      const std::string stem = node_stem(model.model_id, node.node_id);
      node.feature_ref = std::filesystem::path("features") / (stem + ".fmx");
      node.code_ref = std::filesystem::path("codes") / (stem + ".bcx");
    }
    m.models.push_back(std::move(g));
  }
  return m;
}

ZooManifest write_zoo(const SynthZoo& zoo, const std::filesystem::path& dir) {
  ZooManifest m = to_manifest(zoo);
  m.base_dir = dir;
  std::filesystem::create_directories(dir);
  write_feature_matrix(dir / *m.probe_ref, to_feature_matrix(zoo.probe));
  for (int i = 0; i < static_cast<int>(zoo.models.size()); ++i) {
    const ForwardTrace trace = forward(zoo, i, zoo.probe);
    for (std::size_t n = 0; n < trace.features.size(); ++n) {
      const NodeMeta& meta = m.models[i].nodes[n];
      write_feature_matrix(dir / *meta.feature_ref, to_feature_matrix(trace.features[n]));
      write_code_matrix(dir / *meta.code_ref, trace.codes[n]);
    }
  }
  save_manifest(dir / "manifest.json", m);
  return m;
}

// --- exhaustive partition oracle ------------------------------------------

namespace {

std::int64_t binomial(std::int64_t n, std::int64_t k) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  long double r = 1;
  for (std::int64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return static_cast<std::int64_t>(r + 0.5L);
}

struct Candidate {
  int model;
  NodeRange range;
};

}  // namespace

BruteForceResult brute_force_partition(const ZooManifest& manifest, const SimilarityTable& table,
                                       int k, double eps) {
  const int n_models = manifest.num_models();
  BruteForceResult result;

  // Feasible cut sets per model, each expressed as indices into `blocks`.
  std::vector<Candidate> blocks;
  std::map<std::pair<int, NodeRange>, int> block_index;
  std::vector<std::vector<std::vector<int>>> cut_sets(n_models);
  std::vector<std::vector<std::vector<int>>> cut_blocks(n_models);
  for (int i = 0; i < n_models; ++i) {
    const ModelGraph& g = manifest.models[i];
    if (g.num_nodes() < k) {
      fail(ErrorKind::kInvalidArgument, "model '" + g.model_id + "' has fewer than K nodes");
    }
    result.cut_sets_considered += binomial(g.num_nodes() - 1, k - 1);
    cut_sets[i] = enumerate_feasible_cuts(g, k, eps);
    if (cut_sets[i].empty()) {
      fail(ErrorKind::kInfeasible, "no feasible cut set for '" + g.model_id + "'");
    }
    result.feasible_cut_sets += static_cast<std::int64_t>(cut_sets[i].size());
    for (const auto& cuts : cut_sets[i]) {
      std::vector<int> ids;
      for (const NodeRange& r : ranges_from_cuts(g.num_nodes(), cuts)) {
        auto [it, inserted] = block_index.try_emplace({i, r}, static_cast<int>(blocks.size()));
        if (inserted) blocks.push_back({i, r});
        ids.push_back(it->second);
      }
      cut_blocks[i].push_back(std::move(ids));
    }
  }

  const int c = static_cast<int>(blocks.size());
  result.anchor_sets = binomial(c, k);
  if (result.anchor_sets > kBruteForceLimit) {
    fail(ErrorKind::kTooLarge, "exhaustive partition needs " + std::to_string(result.anchor_sets) +
                                   " anchor sets, limit is " + std::to_string(kBruteForceLimit));
  }

  std::vector<double> sim(static_cast<std::size_t>(c) * c);
  for (int a = 0; a < c; ++a) {
    for (int b = 0; b < c; ++b) {
      sim[static_cast<std::size_t>(a) * c + b] =
          block_similarity(table, blocks[a].model, blocks[a].range, blocks[b].model, blocks[b].range);
    }
  }

  double best = -std::numeric_limits<double>::infinity();
  std::vector<int> best_anchors;
  std::vector<int> best_cut(n_models, -1);

  std::vector<int> anchors(k);
  for (int j = 0; j < k; ++j) anchors[j] = j;
  std::vector<int> chosen_cut(n_models);
  while (true) {
    double total = 0.0;
    bool valid = true;
    for (int i = 0; i < n_models && valid; ++i) {
      double model_best = -std::numeric_limits<double>::infinity();
      int model_cut = -1;
      for (int s = 0; s < static_cast<int>(cut_blocks[i].size()); ++s) {
        const auto& ids = cut_blocks[i][s];
        // Anchors from this model must be blocks of the chosen cut set.
        bool holds = true;
        for (int a : anchors) {
          if (blocks[a].model == i && std::find(ids.begin(), ids.end(), a) == ids.end()) {
            holds = false;
            break;
          }
        }
        if (!holds) continue;
        double v = 0.0;
        for (int b : ids) {
          double m = -std::numeric_limits<double>::infinity();
          for (int a : anchors) m = std::max(m, sim[static_cast<std::size_t>(b) * c + a]);
          v += m;
        }
        if (v > model_best) {
          model_best = v;
          model_cut = s;
        }
      }
      if (model_cut < 0) {
        valid = false;
      } else {
        total += model_best;
        chosen_cut[i] = model_cut;
      }
    }
    if (valid && total > best) {
      best = total;
      best_anchors = anchors;
      best_cut = chosen_cut;
    }
    // Next K-subset in lexicographic order.
    int pos = k - 1;
    while (pos >= 0 && anchors[pos] == c - k + pos) --pos;
    if (pos < 0) break;
    ++anchors[pos];
    for (int j = pos + 1; j < k; ++j) anchors[j] = anchors[j - 1] + 1;
  }
  if (best_anchors.empty()) fail(ErrorKind::kInfeasible, "no anchor set is realizable");

  ZooPartition& p = result.partition;
  p.k = k;
  for (int i = 0; i < n_models; ++i) {
    p.cuts.push_back(cut_sets[i][best_cut[i]]);
    p.node_counts.push_back(manifest.models[i].num_nodes());
  }
  auto block_id_of = [&](int idx) {
    const auto& ids = cut_blocks[blocks[idx].model][best_cut[blocks[idx].model]];
    const int stage = static_cast<int>(std::find(ids.begin(), ids.end(), idx) - ids.begin());
    return BlockId{blocks[idx].model, stage};
  };
  for (int a : best_anchors) p.anchors.push_back(block_id_of(a));
  p.assignment.assign(static_cast<std::size_t>(n_models) * k, 0);
  for (int i = 0; i < n_models; ++i) {
    const auto& ids = cut_blocks[i][best_cut[i]];
    for (int s = 0; s < k; ++s) {
      int set = -1;
      for (int j = 0; j < k; ++j) {
        if (best_anchors[j] == ids[s]) set = j;
      }
      if (set < 0) {
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < k; ++j) {
          const double v = sim[static_cast<std::size_t>(ids[s]) * c + best_anchors[j]];
          if (v > m) {
            m = v;
            set = j;
          }
        }
      }
      p.assignment[i * k + s] = set;
    }
  }
  p.objective = objective_J(table, p);
  result.objective = best;
  return result;
}

}  // namespace dery::synth

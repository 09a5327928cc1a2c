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

#include <cmath>
#include <string>
#include <vector>

#include "dery/errors.hpp"
#include "dery/matrix_io.hpp"
#include "dery/rng.hpp"
#include "dery/similarity.hpp"
#include "dery/zoo.hpp"
#include "test_support.hpp"

using namespace dery;
using testing::gaussian;

namespace {

Matrix column(std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

// Unbiased HSIC written out term by term, as an oracle for one full batch.
double hsic_oracle(const Matrix& x, const Matrix& y) {
  const auto n = x.rows();
  Matrix k = x * x.transpose();
  Matrix l = y * y.transpose();
  for (Eigen::Index i = 0; i < n; ++i) k(i, i) = l(i, i) = 0.0;
  double tr = 0.0;
  double sk = 0.0;
  double sl = 0.0;
  double skl = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      tr += k(i, j) * l(j, i);
      sk += k(i, j);
      sl += l(i, j);
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index m = 0; m < n; ++m) skl += k(i, j) * l(j, m);
    }
  }
  const double nn = static_cast<double>(n);
  return (tr + sk * sl / ((nn - 1) * (nn - 2)) - 2.0 / (nn - 2) * skl) / (nn * (nn - 3));
}

// Two models (3 and 4 nodes) with Gaussian features on a 40-row probe.
ZooManifest small_zoo(const std::filesystem::path& dir, bool with_probe = false,
                      bool dead_node = false) {
  Rng rng(9);
  ZooManifest m;
  m.probe_count = 40;
  m.base_dir = dir;
  const Matrix probe = gaussian(rng, 40, 5);
  if (with_probe) {
    write_feature_matrix(dir / "probe.fmx", testing::to_feature(probe));
    m.probe_ref = "probe.fmx";
  }
  const int sizes[2] = {3, 4};
  for (int i = 0; i < 2; ++i) {
    ModelGraph g = testing::chain_model("m" + std::to_string(i), std::vector<std::int64_t>(sizes[i], 10));
    Matrix x = probe;
    for (int j = 0; j < sizes[i]; ++j) {
      x = (x * gaussian(rng, static_cast<int>(x.cols()), 6)).cwiseMax(0.0);
      Matrix out = x;
      if (dead_node && i == 1 && j == 2) out.setConstant(3.0);
      const std::string ref = "f/m" + std::to_string(i) + "_" + std::to_string(j) + ".fmx";
      write_feature_matrix(dir / ref, testing::to_feature(out));
      g.nodes[j].feature_ref = ref;
    }
    m.models.push_back(g);
  }
  return m;
}

}  // namespace

TEST_CASE("center_columns") {
  const Matrix c = center_columns(column({1, 2, 3}));
  CHECK(c(0, 0) == doctest::Approx(-1.0));
  CHECK(c(1, 0) == doctest::Approx(0.0));
  CHECK(c(2, 0) == doctest::Approx(1.0));
  CHECK((center_columns(c) - c).cwiseAbs().maxCoeff() < 1e-12);

  Rng rng(1);
  const Matrix r = gaussian(rng, 32, 8) * 10.0;
  const Matrix rc = center_columns(r);
  for (Eigen::Index j = 0; j < r.cols(); ++j) {
    double mean = 0.0;
    for (Eigen::Index i = 0; i < r.rows(); ++i) mean += r(i, j);
    mean /= static_cast<double>(r.rows());
    CHECK(std::abs(rc.col(j).sum()) < 1e-5);
    CHECK(rc(0, j) == doctest::Approx(r(0, j) - mean));
  }
  CHECK_THROWS_AS(center_columns(Matrix::Ones(1, 3)), Error);
}

TEST_CASE("linear CKA examples") {
  CHECK(linear_cka(column({1, 2, 3}), column({2, 4, 6})) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(linear_cka(column({-1, 0, 1}), column({-1, 1, 0})) - 0.25) < 1e-12);
  Rng rng(2);
  const Matrix x = gaussian(rng, 50, 7);
  CHECK(std::abs(linear_cka(x, x) - 1.0) < 1e-9);
}

TEST_CASE("linear CKA: both evaluation paths agree") {
  // n > max(d1, d2) uses the cross product, otherwise the n x n Grams.
  Rng rng(3);
  const Matrix x = gaussian(rng, 20, 6);
  const Matrix y = gaussian(rng, 20, 30);
  const Matrix xc = center_columns(x);
  const Matrix yc = center_columns(y);
  const Matrix k = xc * xc.transpose();
  const Matrix l = yc * yc.transpose();
  const double oracle = (k.cwiseProduct(l)).sum() / (k.norm() * l.norm());
  CHECK(linear_cka(x, y) == doctest::Approx(oracle).epsilon(1e-12));
  const Matrix y2 = y.leftCols(4);
  const Matrix y2c = center_columns(y2);
  const Matrix l2 = y2c * y2c.transpose();
  CHECK(linear_cka(x, y2) ==
        doctest::Approx((k.cwiseProduct(l2)).sum() / (k.norm() * l2.norm())).epsilon(1e-12));
}

TEST_CASE("linear CKA properties") {
  Rng rng(4);
  for (int t = 0; t < 25; ++t) {
    const Matrix x = gaussian(rng, 30, 5);
    const Matrix y = gaussian(rng, 30, 9) + x * gaussian(rng, 5, 9);
    const double v = linear_cka(x, y);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0 + 1e-9);
    CHECK(linear_cka(y, x) == doctest::Approx(v).epsilon(1e-12));
    CHECK(linear_cka(x * 3.5, y) == doctest::Approx(v).epsilon(1e-12));
    // Translation invariance comes from centering.
    Matrix shifted = x;
    shifted.rowwise() += Eigen::RowVectorXd::Constant(5, 7.0);
    CHECK(linear_cka(shifted, y) == doctest::Approx(v).epsilon(1e-9));
  }
}

TEST_CASE("linear CKA errors") {
  CHECK_THROWS_AS(linear_cka(Matrix::Ones(5, 2), column({1, 2, 3, 4, 5})), Error);
  try {
    linear_cka(Matrix::Constant(5, 2, 4.0), column({1, 2, 3, 4, 5}));
    FAIL("constant features must be degenerate");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDegenerate);
  }
  CHECK_THROWS_AS(linear_cka(column({1, 2, 3}), column({1, 2})), Error);
}

TEST_CASE("mini-batch CKA") {
  Rng rng(5);
  const Matrix x = gaussian(rng, 12, 3);
  const Matrix y = x * gaussian(rng, 3, 4) + gaussian(rng, 12, 4);
  SUBCASE("one full batch equals the unbiased estimate on all rows") {
    const double expected = hsic_oracle(x, y) / std::sqrt(hsic_oracle(x, x) * hsic_oracle(y, y));
    CHECK(minibatch_cka(x, y, 12, 1, 3) == doctest::Approx(expected).epsilon(1e-10));
  }
  SUBCASE("seeded") {
    CHECK(minibatch_cka(x, y, 6, 10, 42) == minibatch_cka(x, y, 6, 10, 42));
  }
  SUBCASE("argument errors") {
    CHECK_THROWS_AS(minibatch_cka(x, y, 13, 1, 0), Error);
    CHECK_THROWS_AS(minibatch_cka(x, y, 3, 1, 0), Error);
    CHECK_THROWS_AS(minibatch_cka(x, y, 6, 0, 0), Error);
  }
}

TEST_CASE("similarity table storage") {
  SimilarityTable t({2, 3});
  t.set(0, 1, 1, 2, 0.75);
  CHECK(t.at(1, 2, 0, 1) == 0.75);
  CHECK(t.has(0, 1, 1, 2));
  CHECK_FALSE(t.has(0, 0, 1, 0));
  CHECK_THROWS_AS(t.at(0, 0, 1, 0), Error);
  CHECK_THROWS_AS(t.at(0, 2, 1, 0), Error);
  t.set(1, SimilarityTable::kInput, 0, 0, 0.5);
  CHECK(t.at(0, 0, 1, SimilarityTable::kInput) == 0.5);
}

TEST_CASE("functional similarity sums input and output sides") {
  SimilarityTable t({3, 3});
  // Blocks [1,2] of both models: input boundary is node 0, output node 2.
  t.set(0, 0, 1, 0, 0.6);
  t.set(0, 2, 1, 2, 0.8);
  CHECK(block_similarity(t, 0, {1, 2}, 1, {1, 2}) == doctest::Approx(1.4));
  CHECK(block_similarity(t, 1, {1, 2}, 0, {1, 2}) == block_similarity(t, 0, {1, 2}, 1, {1, 2}));
  // Stage-one blocks read the raw-probe boundary.
  t.set(0, SimilarityTable::kInput, 1, SimilarityTable::kInput, 1.0);
  t.set(0, 1, 1, 1, 0.3);
  CHECK(block_similarity(t, 0, {0, 1}, 1, {0, 1}) == doctest::Approx(1.3));
  // Missing entries are errors.
  CHECK_THROWS_AS(block_similarity(t, 0, {0, 0}, 1, {0, 2}), Error);
}

TEST_CASE("subsample row counts") {
  CHECK(subsample_rows(64, 1.0 / 20.0) == 32);
  CHECK(subsample_rows(2000, 0.05) == 100);
  CHECK(subsample_rows(10, 0.05) == 10);
  CHECK(subsample_rows(1000, 1.0) == 1000);
  CHECK_THROWS_AS(subsample_rows(1, 0.5), Error);
}

TEST_CASE("table build counts, symmetry and cache") {
  testing::TempDir dir("sim-table");
  const ZooManifest m = small_zoo(dir.path());
  TableBuildOptions opts;
  opts.subsample = 1.0;
  opts.cache_path = dir / "cache.stb";
  const TableBuildResult first = build_similarity_table(m, opts);
  CHECK(first.stats.cells == 37);
  CHECK_FALSE(first.stats.cache_hit);
  CHECK(first.stats.evaluations > 0);
  CHECK(first.stats.rows_used == 40);
  const SimilarityTable& t = first.table;
  for (int i = 0; i < 2; ++i) {
    for (int a = 0; a < t.num_nodes(i); ++a) {
      CHECK(t.at(i, a, i, a) == doctest::Approx(1.0).epsilon(1e-6));
      for (int j = 0; j < 2; ++j) {
        for (int b = 0; b < t.num_nodes(j); ++b) {
          const double v = t.at(i, a, j, b);
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
          CHECK(v == t.at(j, b, i, a));
        }
      }
    }
    // No probe dump: raw input matches raw input, nothing else.
    CHECK(t.at(i, SimilarityTable::kInput, 1 - i, SimilarityTable::kInput) == 1.0);
    CHECK(t.at(i, SimilarityTable::kInput, 0, 1) == 0.0);
  }
  // Node-pair values are exact linear CKA on the stored features.
  const Matrix f0 = to_matrix(read_feature_matrix(dir / "f/m0_1.fmx"));
  const Matrix f1 = to_matrix(read_feature_matrix(dir / "f/m1_3.fmx"));
  CHECK(t.at(0, 1, 1, 3) == doctest::Approx(linear_cka(f0, f1)).epsilon(1e-12));

  const TableBuildResult warm = build_similarity_table(m, opts);
  CHECK(warm.stats.cache_hit);
  CHECK(warm.stats.evaluations == 0);
  CHECK(warm.table.raw() == t.raw());

  // Different sampling options use a different key.
  CHECK(similarity_cache_key(m, 1.0, 0) != similarity_cache_key(m, 1.0, 1));
  CHECK(similarity_cache_key(m, 1.0, 0) != similarity_cache_key(m, 0.5, 0));
  SimilarityTable untouched;
  CHECK_FALSE(read_similarity_cache(dir / "cache.stb", "other-key", untouched));
  CHECK(untouched.num_models() == 0);
}

TEST_CASE("table build is independent of worker count") {
  testing::TempDir dir("sim-workers");
  const ZooManifest m = small_zoo(dir.path(), true);
  TableBuildOptions opts;
  opts.seed = 3;
  opts.subsample = 0.9;
  const auto one = build_similarity_table(m, opts);
  opts.workers = 4;
  const auto four = build_similarity_table(m, opts);
  CHECK(one.table.raw() == four.table.raw());
  CHECK(one.stats.rows_used == 36);
  // With a probe dump the raw input is compared against node outputs.
  CHECK(one.table.at(0, SimilarityTable::kInput, 1, 0) > 0.0);
  CHECK(one.table.at(1, SimilarityTable::kInput, 1, 0) == one.table.at(0, SimilarityTable::kInput, 1, 0));
}

TEST_CASE("degenerate features become zero with a warning") {
  testing::TempDir dir("sim-dead");
  const ZooManifest m = small_zoo(dir.path(), false, true);
  TableBuildOptions opts;
  opts.subsample = 1.0;
  const auto res = build_similarity_table(m, opts);
  CHECK(res.table.at(1, 2, 0, 0) == 0.0);
  CHECK(res.table.at(1, 2, 1, 2) == 1.0);
  CHECK_FALSE(res.stats.warnings.empty());
}

TEST_CASE("pluggable similarity function") {
  testing::TempDir dir("sim-custom");
  const ZooManifest m = small_zoo(dir.path());
  TableBuildOptions opts;
  opts.subsample = 1.0;
  int calls = 0;
  opts.similarity = [&calls](const Matrix&, const Matrix&) {
    ++calls;
    return 0.5;
  };
  opts.workers = 1;
  const auto res = build_similarity_table(m, opts);
  CHECK(calls == res.stats.evaluations);
  CHECK(res.table.at(0, 0, 1, 3) == 0.5);
}

TEST_CASE("table build needs feature files") {
  ZooManifest m;
  m.probe_count = 8;
  m.models.push_back(testing::chain_model("x", {1, 1}));
  CHECK_THROWS_AS(build_similarity_table(m, {}), Error);
}

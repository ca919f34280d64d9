#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "optrad/error.hpp"
#include "optrad/selection.hpp"
#include "test_util.hpp"

using namespace optrad;

namespace {

Eigen::MatrixXd random_matrix(datasets::Rng& rng, int rows, int cols) {
  Eigen::MatrixXd X(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) X(i, j) = rng.normal();
  return X;
}

double column_reconstruction_error(const Eigen::MatrixXd& X, const std::vector<int>& cols) {
  Eigen::MatrixXd C(X.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) C.col(static_cast<Eigen::Index>(k)) = X.col(cols[k]);
  const Eigen::MatrixXd coef = C.colPivHouseholderQr().solve(X);
  return (X - C * coef).norm();
}

}  // namespace

TEST(Cur, DominantColumnFirst) {
  datasets::Rng rng(1);
  Eigen::MatrixXd X = 1e-3 * random_matrix(rng, 15, 6);
  X.col(4) = 10.0 * random_matrix(rng, 15, 1);
  const auto res = cur_select(X, 2);
  EXPECT_EQ(res.method, "cur");
  EXPECT_EQ(res.indices.front(), 4);
  EXPECT_EQ(res.indices.size(), 2u);
  EXPECT_EQ(res.scores.size(), 2u);
}

TEST(Cur, AllColumnsSpan) {
  datasets::Rng rng(2);
  const auto X = random_matrix(rng, 12, 6);
  const auto res = cur_select(X, 6);
  auto sorted = res.indices;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<int>{0, 1, 2, 3, 4, 5}));
  EXPECT_LT(column_reconstruction_error(X, res.indices), 1e-12 * X.norm());
}

TEST(Cur, BeatsRandomColumns) {
  datasets::Rng rng(3);
  // columns with decaying scale and correlations so the choice matters
  Eigen::MatrixXd X = random_matrix(rng, 20, 8);
  const Eigen::MatrixXd mix = random_matrix(rng, 8, 8);
  X = X * Eigen::VectorXd::LinSpaced(8, 3.0, 0.2).asDiagonal() * mix;
  const int k = 3;
  const double cur = column_reconstruction_error(X, cur_select(X, k).indices);
  std::mt19937_64 gen(7);
  std::vector<double> errs;
  for (int t = 0; t < 50; ++t) {
    std::vector<int> idx(8);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), gen);
    idx.resize(k);
    errs.push_back(column_reconstruction_error(X, idx));
  }
  std::nth_element(errs.begin(), errs.begin() + 25, errs.end());
  EXPECT_LE(cur, errs[25]);
}

TEST(Cur, RankExhaustedIsAnError) {
  datasets::Rng rng(4);
  const Eigen::VectorXd u = random_matrix(rng, 10, 1);
  const Eigen::RowVectorXd v = random_matrix(rng, 1, 5);
  const Eigen::MatrixXd X = u * v;
  EXPECT_NO_THROW(cur_select(X, 1));
  try {
    cur_select(X, 2);
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("rank is 1"), std::string::npos);
  }
  EXPECT_THROW(cur_select(X, 6), ValidationError);
  EXPECT_THROW(cur_select(X, 0), ValidationError);
}

TEST(Cur, Deterministic) {
  datasets::Rng rng(5);
  const auto X = random_matrix(rng, 30, 12);
  const auto a = cur_select(X, 7), b = cur_select(X, 7);
  EXPECT_EQ(a.indices, b.indices);
  EXPECT_EQ(a.scores, b.scores);
}

TEST(Fps, FarColumnSecond) {
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(2, 3);
  X(0, 1) = 1.0;
  X(1, 2) = 10.0;
  const auto res = fps_select(X, 2, 0);
  EXPECT_EQ(res.method, "fps");
  EXPECT_EQ(res.indices, (std::vector<int>{0, 2}));
  EXPECT_DOUBLE_EQ(res.scores[1], 10.0);
}

TEST(Fps, SinglePickIsStart) {
  datasets::Rng rng(6);
  const auto X = random_matrix(rng, 5, 7);
  EXPECT_EQ(fps_select(X, 1, 4).indices, std::vector<int>{4});
  EXPECT_THROW(fps_select(X, 1, 7), ValidationError);
}

TEST(Fps, PermutationConsistent) {
  datasets::Rng rng(7);
  const auto X = random_matrix(rng, 6, 12);
  std::vector<int> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 gen(3);
  std::shuffle(perm.begin(), perm.end(), gen);
  // column j of Y is column perm[j] of X
  Eigen::MatrixXd Y(6, 12);
  std::vector<int> inverse(12);
  for (int j = 0; j < 12; ++j) {
    Y.col(j) = X.col(perm[j]);
    inverse[perm[j]] = j;
  }
  const auto a = fps_select(X, 6, 2);
  const auto b = fps_select(Y, 6, inverse[2]);
  for (std::size_t k = 0; k < a.indices.size(); ++k) EXPECT_EQ(perm[b.indices[k]], a.indices[k]);
}

TEST(Fps, DuplicatesWarnAndFallBackToLowestIndex) {
  Eigen::MatrixXd X = Eigen::MatrixXd::Ones(3, 5);
  X.col(3).setZero();
  const auto res = fps_select(X, 4, 0);
  EXPECT_EQ(res.indices, (std::vector<int>{0, 3, 1, 2}));
  EXPECT_FALSE(res.warnings.empty());
}

TEST(Fps, Deterministic) {
  datasets::Rng rng(8);
  const auto X = random_matrix(rng, 9, 20);
  EXPECT_EQ(fps_select(X, 10).indices, fps_select(X, 10).indices);
}

TEST(Selection, JsonHasIndices) {
  datasets::Rng rng(9);
  const auto j = fps_select(random_matrix(rng, 3, 4), 2).to_json();
  EXPECT_EQ(j.at("method"), "fps");
  EXPECT_EQ(j.at("indices").size(), 2u);
}

TEST(Shuffle, DeterministicPermutation) {
  const auto a = shuffled_indices(50, 11), b = shuffled_indices(50, 11);
  EXPECT_EQ(a, b);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_NE(a, shuffled_indices(50, 12));
}

TEST(Gfre, IdentityIsZero) {
  datasets::Rng rng(10);
  const auto X = random_matrix(rng, 200, 6);
  GfreOptions o;
  o.ridge = 1e-10;
  EXPECT_LT(gfre(X, X, o), 1e-6);
}

TEST(Gfre, IndependentIsOne) {
  datasets::Rng rng(11);
  const auto X = random_matrix(rng, 2000, 5);
  const auto Y = random_matrix(rng, 2000, 5);
  EXPECT_NEAR(gfre(X, Y), 1.0, 0.1);
}

TEST(Gfre, LinearMapRecoverable) {
  datasets::Rng rng(12);
  const auto X = random_matrix(rng, 300, 6);
  const auto W = random_matrix(rng, 6, 4);
  EXPECT_LT(gfre(X, X * W), 1e-4);
}

TEST(Gfre, InvariantUnderInvertibleTransformOfSource) {
  datasets::Rng rng(13);
  const auto X = random_matrix(rng, 400, 5);
  Eigen::MatrixXd Y = X.array().sin().matrix() + 0.3 * random_matrix(rng, 400, 5);
  const auto T = random_matrix(rng, 5, 5);
  EXPECT_NEAR(gfre(X * T, Y), gfre(X, Y), 1e-4);
}

TEST(Gfre, NestedSourceNeverWorse) {
  datasets::Rng rng(14);
  const int n = 600;
  Eigen::VectorXd x(n);
  for (int i = 0; i < n; ++i) x[i] = rng.uniform(-1.0, 1.0);
  Eigen::MatrixXd Y(n, 2);
  Y.col(0) = (3.0 * x).array().sin();
  Y.col(1) = (2.0 * x).array().cos();
  double prev = 1e300;
  for (int d = 1; d <= 8; ++d) {
    Eigen::MatrixXd X(n, d);
    for (int p = 0; p < d; ++p) X.col(p) = x.array().pow(p + 1);
    const double e = gfre(X, Y);
    EXPECT_LE(e, prev + 1e-6) << "d=" << d;
    prev = e;
  }
}

TEST(Gfre, DeterministicGivenSeed) {
  datasets::Rng rng(15);
  const auto X = random_matrix(rng, 100, 4);
  const auto Y = random_matrix(rng, 100, 3);
  GfreOptions a, b;
  a.seed = b.seed = 99;
  EXPECT_EQ(gfre(X, Y, a), gfre(X, Y, b));
}

TEST(Gfre, Errors) {
  datasets::Rng rng(16);
  const auto X = random_matrix(rng, 50, 3);
  EXPECT_THROW(gfre(X, Eigen::MatrixXd::Constant(50, 2, 4.0)), ValidationError);
  EXPECT_THROW(gfre(X, random_matrix(rng, 49, 2)), ValidationError);
  GfreOptions o;
  o.train_fraction = 1.0;
  EXPECT_THROW(gfre(X, X, o), ValidationError);
  o.train_fraction = 0.5;
  o.ridge = 0.0;
  EXPECT_THROW(gfre(X, X, o), ValidationError);
}

#include <gtest/gtest.h>

#include <map>
#include <numbers>

#include "optrad/correlations.hpp"
#include "optrad/error.hpp"
#include "test_util.hpp"

using namespace optrad;
using testutil::small_spec;

namespace {

const RadialTable& table() {
  static const RadialTable t = build_table(small_spec(3, 2), {1, 8}, nullptr, -1, 300);
  return t;
}

const CGTable& cg() {
  static const CGTable t(12);
  return t;
}

Environment random_env(datasets::Rng& rng, int n, double rmax = 3.6) {
  Environment e;
  for (int k = 0; k < n; ++k) {
    const Vec3 v = rng.unit_vector() * rng.uniform(0.7, rmax);
    e.neighbors.push_back({k % 2 ? 8 : 1, v, v.norm(), k + 1});
  }
  return e;
}

Environment rotated(const Environment& e, const Mat3& R) {
  auto r = e;
  for (auto& nb : r.neighbors) nb.r_vec = R * nb.r_vec;
  return r;
}

Eigen::MatrixXd random_orthogonal(datasets::Rng& rng, int d) {
  Eigen::MatrixXd A(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) A(i, j) = rng.normal();
  return Eigen::HouseholderQR<Eigen::MatrixXd>(A).householderQ();
}

DensityCoeffs map_channels(const DensityCoeffs& c, const std::vector<Eigen::MatrixXd>& U) {
  auto out = c;
  for (int l = 0; l <= c.lmax(); ++l) {
    out.values[l] = U[l].cast<std::complex<double>>() * c.values[l];
    out.channels[l].clear();
    for (Eigen::Index q = 0; q < U[l].rows(); ++q) out.channels[l].push_back({-1, static_cast<int>(q)});
  }
  return out;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

double vec_rel(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

// direct evaluation of the powerspectrum definition, redundant index set
double p_raw(const DensityCoeffs& c, int a, int b, int l) {
  std::complex<double> s = 0.0;
  for (int m = -l; m <= l; ++m) s += ((m % 2) ? -1.0 : 1.0) * c(a, l, m) * c(b, l, -m);
  return s.real() / std::sqrt(2.0 * l + 1.0);
}

}  // namespace

TEST(ClebschGordan, KnownValues) {
  const auto& t = cg();
  EXPECT_DOUBLE_EQ(t(0, 0, 0, 0, 0, 0), 1.0);
  EXPECT_NEAR(t(1, 1, 1, -1, 0, 0), 1.0 / std::sqrt(3.0), 1e-15);
  EXPECT_NEAR(t(1, 0, 1, 0, 0, 0), -1.0 / std::sqrt(3.0), 1e-15);
  EXPECT_NEAR(t(1, 1, 1, 0, 1, 1), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(t(1, 1, 1, -1, 2, 0), 1.0 / std::sqrt(6.0), 1e-15);
  EXPECT_NEAR(t(1, 0, 1, 0, 2, 0), std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(t(2, 2, 1, -1, 1, 1), std::sqrt(3.0 / 5.0), 1e-15);
}

TEST(ClebschGordan, SelectionRules) {
  const auto& t = cg();
  EXPECT_EQ(t(1, 1, 1, 1, 2, 0), 0.0);
  EXPECT_EQ(t(1, 0, 1, 0, 3, 0), 0.0);
  EXPECT_EQ(t(3, 0, 1, 0, 1, 0), 0.0);
  EXPECT_EQ(t(1, 0, 1, 0, 1, 0), 0.0);  // parity-odd coupling of m = 0
}

TEST(ClebschGordan, Orthogonality) {
  const auto& t = cg();
  double worst = 0.0;
  for (int l = 0; l <= 6; ++l)
    for (int k = 0; k <= 6; ++k)
      for (int L = std::abs(l - k); L <= std::min(6, l + k); ++L)
        for (int L2 = std::abs(l - k); L2 <= std::min(6, l + k); ++L2)
          for (int M = -L; M <= L; ++M)
            for (int M2 = -L2; M2 <= L2; ++M2) {
              double s = 0.0;
              for (int m = -l; m <= l; ++m)
                for (int mp = -k; mp <= k; ++mp) s += t(l, m, k, mp, L, M) * t(l, m, k, mp, L2, M2);
              worst = std::max(worst, std::abs(s - (L == L2 && M == M2 ? 1.0 : 0.0)));
            }
  EXPECT_LT(worst, 1e-12);
}

TEST(ClebschGordan, Limits) {
  EXPECT_THROW(CGTable(13), ValidationError);
  const CGTable small(2);
  EXPECT_THROW(small(3, 0, 0, 0, 3, 0), ValidationError);
}

TEST(Powerspectrum, EmptyEnvironmentIsZero) {
  const auto c = density_coeffs(Environment{}, table());
  const auto p = powerspectrum(c);
  EXPECT_EQ(p.size(), 3 * 21);
  EXPECT_EQ(p.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Powerspectrum, SingleNeighborAlongZ) {
  Environment e;
  e.neighbors.push_back({8, Vec3(0, 0, 1.7), 1.7, 1});
  const auto c = density_coeffs(e, table());
  const auto p = powerspectrum(c);
  const auto labels = powerspectrum_labels(c);
  ASSERT_EQ(static_cast<std::size_t>(p.size()), labels.size());
  for (std::size_t f = 0; f < labels.size(); ++f) {
    const int a = labels[f][0].channel, b = labels[f][1].channel, l = labels[f][0].l;
    const double w = a == b ? 1.0 : std::sqrt(2.0);
    const double expect = w * (c(a, l, 0) * c(b, l, 0)).real() / std::sqrt(2.0 * l + 1.0);
    EXPECT_NEAR(p[static_cast<Eigen::Index>(f)], expect, 1e-14);
  }
}

TEST(Powerspectrum, MatchesDefinitionAndNorm) {
  datasets::Rng rng(1);
  const auto c = density_coeffs(random_env(rng, 6), table());
  const auto p = powerspectrum(c);
  const auto labels = powerspectrum_labels(c);
  double full = 0.0;
  for (int l = 0; l <= c.lmax(); ++l)
    for (int a = 0; a < c.channel_count(l); ++a)
      for (int b = 0; b < c.channel_count(l); ++b) full += std::pow(p_raw(c, a, b, l), 2);
  for (std::size_t f = 0; f < labels.size(); ++f) {
    const int a = labels[f][0].channel, b = labels[f][1].channel, l = labels[f][0].l;
    EXPECT_LE(a, b);
    const double w = a == b ? 1.0 : std::sqrt(2.0);
    EXPECT_NEAR(p[static_cast<Eigen::Index>(f)], w * p_raw(c, a, b, l), 1e-14);
  }
  EXPECT_NEAR(p.squaredNorm(), full, 1e-12 * full);
}

TEST(Powerspectrum, RotationInvariant) {
  datasets::Rng rng(2);
  for (int k = 0; k < 5; ++k) {
    const auto e = random_env(rng, 7);
    const auto a = powerspectrum(density_coeffs(e, table()));
    const auto b = powerspectrum(density_coeffs(rotated(e, testutil::random_rotation(rng)), table()));
    EXPECT_LT(vec_rel(b, a), 1e-8);
  }
}

TEST(Powerspectrum, PermutationInvariant) {
  datasets::Rng rng(3);
  auto e = random_env(rng, 6);
  const auto a = powerspectrum(density_coeffs(e, table()));
  std::reverse(e.neighbors.begin(), e.neighbors.end());
  const auto b = powerspectrum(density_coeffs(e, table()));
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Nice, SecondOrderInvariantsArePowerspectrum) {
  datasets::Rng rng(4);
  const auto c = density_coeffs(random_env(rng, 6), table());
  const auto b2 = nice_iterate(seed_block(c), c, cg(), 2);
  const auto inv = invariants(b2);
  const auto labels = invariant_labels(*b2.layout);
  ASSERT_EQ(static_cast<std::size_t>(inv.size()), labels.size());
  std::size_t count = 0;
  for (int l = 0; l <= 2; ++l) count += static_cast<std::size_t>(c.channel_count(l) * c.channel_count(l));
  EXPECT_EQ(labels.size(), count);
  for (std::size_t f = 0; f < labels.size(); ++f) {
    ASSERT_EQ(labels[f].size(), 2u);
    const int a = labels[f][0].channel, b = labels[f][1].channel, l = labels[f][0].l;
    EXPECT_EQ(labels[f][1].l, l);
    const double sign = (l % 2) ? -1.0 : 1.0;
    EXPECT_NEAR(inv[static_cast<Eigen::Index>(f)], sign * p_raw(c, a, b, l), 1e-14);
  }
}

TEST(Nice, InvariantsRotationInvariant) {
  datasets::Rng rng(5);
  for (int k = 0; k < 3; ++k) {
    const auto e = random_env(rng, 5);
    auto inv3 = [&](const Environment& env) {
      const auto c = density_coeffs(env, table());
      const auto b2 = nice_iterate(seed_block(c), c, cg(), 2);
      return invariants(nice_iterate(b2, c, cg(), 0));
    };
    const auto a = inv3(e);
    const auto b = inv3(rotated(e, testutil::random_rotation(rng)));
    EXPECT_LT(vec_rel(b, a), 1e-8);
  }
}

TEST(Nice, BlocksRotateByWigner) {
  datasets::Rng rng(6);
  const auto e = random_env(rng, 5);
  const Mat3 R = testutil::random_rotation(rng);
  const auto ca = density_coeffs(e, table());
  const auto cb = density_coeffs(rotated(e, R), table());
  const auto a = nice_iterate(seed_block(ca), ca, cg(), 3);
  const auto b = nice_iterate(seed_block(cb), cb, cg(), 3);
  for (std::size_t g = 0; g < a.values.size(); ++g) {
    const int lam = a.layout->groups[g].lambda;
    Eigen::MatrixXcd D = testutil::wigner_from_samples(lam, R, rng);
    // seed entries c_{l,-m} = (-1)^m conj(c_{lm}) rotate with (-1)^{m-m'} D(m, m')
    for (int m = -lam; m <= lam; ++m)
      for (int mp = -lam; mp <= lam; ++mp)
        if ((m - mp) % 2) D(m + lam, mp + lam) *= -1.0;
    const Eigen::MatrixXcd expect = a.values[g] * D.transpose();
    EXPECT_LT(testutil::max_abs(b.values[g] - expect), 1e-8 * std::max(1.0, testutil::max_abs(a.values[g])))
        << "lambda " << lam;
  }
}

TEST(Nice, InversionAndMirrorParity) {
  datasets::Rng rng(7);
  const auto e = random_env(rng, 5);
  Environment inv = e;
  for (auto& nb : inv.neighbors) nb.r_vec = -nb.r_vec;
  auto third = [&](const Environment& env) {
    const auto c = density_coeffs(env, table());
    const auto b2 = nice_iterate(seed_block(c), c, cg(), 2);
    return nice_iterate(b2, c, cg(), 0);
  };
  const auto a = third(e), b = third(inv);
  const int gp = a.layout->find(1, 0), gm = a.layout->find(-1, 0);
  ASSERT_GE(gp, 0);
  ASSERT_GE(gm, 0);
  EXPECT_LT(testutil::max_abs(a.values[gp] - b.values[gp]), 1e-12);
  EXPECT_LT(testutil::max_abs(a.values[gm] + b.values[gm]), 1e-12);
  EXPECT_GT(testutil::max_abs(a.values[gm]), 1e-8);

  // planar environment: mirror z -> -z maps it to itself
  Environment planar;
  for (int k = 0; k < 5; ++k) {
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const Vec3 v = rng.uniform(0.8, 3.5) * Vec3(std::cos(phi), std::sin(phi), 0.0);
    planar.neighbors.push_back({k % 2 ? 8 : 1, v, v.norm(), k + 1});
  }
  const auto p = third(planar);
  EXPECT_LT(testutil::max_abs(p.values[p.layout->find(-1, 0)]), 1e-12);
}

TEST(Nice, SingleNeighborDependsOnDistanceOnly) {
  datasets::Rng rng(8);
  auto env_at = [](const Vec3& v) {
    Environment e;
    e.neighbors.push_back({8, v, v.norm(), 1});
    return e;
  };
  auto inv3 = [&](const Environment& env) {
    const auto c = density_coeffs(env, table());
    const auto b2 = nice_iterate(seed_block(c), c, cg(), 2);
    return invariants(nice_iterate(b2, c, cg(), 0));
  };
  const auto a = inv3(env_at(2.3 * rng.unit_vector()));
  const auto b = inv3(env_at(2.3 * rng.unit_vector()));
  EXPECT_LT(vec_rel(b, a), 1e-10);
}

TEST(Nice, NormPowerIdentity) {
  datasets::Rng rng(9);
  for (int k = 0; k < 3; ++k) {
    const auto c = density_coeffs(random_env(rng, 4), table());
    const auto b1 = seed_block(c);
    const auto b2 = nice_iterate(b1, c, cg(), 4);
    const auto b3 = nice_iterate(b2, c, cg(), 6);
    const double n1 = block_norm(b1);
    EXPECT_NEAR(n1, c.squared_norm(), 1e-14 * n1);
    EXPECT_LT(rel(block_norm(b2), n1 * n1), 1e-8);
    EXPECT_LT(rel(block_norm(b3), n1 * n1 * n1), 1e-8);
  }
}

TEST(Nice, AngularTruncationReducesNorm) {
  datasets::Rng rng(10);
  const auto c = density_coeffs(random_env(rng, 4), table());
  const auto b1 = seed_block(c);
  EXPECT_LT(block_norm(nice_iterate(b1, c, cg(), 1)), block_norm(nice_iterate(b1, c, cg(), 4)));
}

TEST(Nice, OrthogonalBasisChangePreservesNorm) {
  datasets::Rng rng(11);
  const auto c = density_coeffs(random_env(rng, 5), table());
  std::vector<Eigen::MatrixXd> U;
  for (int l = 0; l <= 2; ++l) U.push_back(random_orthogonal(rng, c.channel_count(l)));
  const auto cu = map_channels(c, U);
  EXPECT_LT(rel(cu.squared_norm(), c.squared_norm()), 1e-10);
  const auto a2 = nice_iterate(seed_block(c), c, cg(), 2);
  const auto b2 = nice_iterate(seed_block(cu), cu, cg(), 2);
  EXPECT_LT(rel(block_norm(b2), block_norm(a2)), 1e-10);
  const auto a3 = nice_iterate(a2, c, cg(), 2);
  const auto b3 = nice_iterate(b2, cu, cg(), 2);
  EXPECT_LT(rel(block_norm(b3), block_norm(a3)), 1e-10);
}

TEST(Nice, TruncationProductIdentity) {
  datasets::Rng rng(12);
  for (int k = 0; k < 3; ++k) {
    const auto c = density_coeffs(random_env(rng, 3), table());
    std::vector<Eigen::MatrixXd> U;
    for (int l = 0; l <= 2; ++l) U.push_back(random_orthogonal(rng, c.channel_count(l)).topRows(2));
    const auto cq = map_channels(c, U);
    const auto prev = nice_iterate(seed_block(c), c, cg(), 4);
    const auto sq = seed_block(cq);
    const CouplingPlan plan(sq.layout, prev.layout, cg(), 6);
    const double lhs = block_norm(plan.apply(sq, prev));
    // |rho_q|^2 * |rho^nu|^2, with the truncated norm evaluated from the
    // primitive coefficients projected on the kept channels
    double kept = 0.0;
    for (int l = 0; l <= 2; ++l) kept += (U[l].cast<std::complex<double>>() * c.values[l]).squaredNorm();
    EXPECT_LT(rel(lhs, kept * block_norm(prev)), 1e-8);
    EXPECT_LT(kept, c.squared_norm());
  }
}

TEST(Nice, BasisChangeCommutes) {
  datasets::Rng rng(13);
  const auto c = density_coeffs(random_env(rng, 5), table());
  std::vector<Eigen::MatrixXd> U;
  for (int l = 0; l <= 2; ++l) U.push_back(random_orthogonal(rng, c.channel_count(l)).topRows(4));
  const auto cq = map_channels(c, U);
  const auto direct = nice_iterate(seed_block(cq), cq, cg(), 2);
  const auto full = nice_iterate(seed_block(c), c, cg(), 2);
  const auto mapped = transform_channels(transform_channels(full, 0, U), 1, U);
  ASSERT_EQ(mapped.layout->groups.size(), direct.layout->groups.size());
  for (std::size_t g = 0; g < direct.values.size(); ++g) {
    const auto& dl = direct.layout->groups[g].labels;
    const auto& ml = mapped.layout->groups[g].labels;
    ASSERT_EQ(dl.size(), ml.size());
    std::map<FeaturePath, Eigen::Index> row;
    for (std::size_t f = 0; f < ml.size(); ++f) row[ml[f]] = static_cast<Eigen::Index>(f);
    for (std::size_t f = 0; f < dl.size(); ++f) {
      ASSERT_TRUE(row.count(dl[f])) << to_string(dl[f]);
      EXPECT_LT((mapped.values[g].row(row[dl[f]]) - direct.values[g].row(static_cast<Eigen::Index>(f)))
                    .cwiseAbs()
                    .maxCoeff(),
                1e-10);
    }
  }
}

TEST(Nice, LambdaBeyondTableRejected) {
  datasets::Rng rng(14);
  const auto c = density_coeffs(random_env(rng, 3), table());
  const CGTable small(2);
  const auto b2 = nice_iterate(seed_block(c), c, small, 2);
  EXPECT_THROW(nice_iterate(b2, c, small, 4), ValidationError);
}

namespace {

std::vector<EquivariantBlock> dataset_blocks(int count, std::uint64_t seed) {
  datasets::Rng rng(seed);
  std::vector<EquivariantBlock> out;
  for (int i = 0; i < count; ++i) {
    const auto c = density_coeffs(random_env(rng, rng.integer(2, 6)), table());
    out.push_back(nice_iterate(seed_block(c), c, cg(), 2));
  }
  return out;
}

}  // namespace

TEST(VarianceTruncation, KeepAllIsOrthogonal) {
  const auto blocks = dataset_blocks(20, 15);
  std::size_t largest = 0;
  for (const auto& g : blocks[0].layout->groups) largest = std::max(largest, g.labels.size());
  const auto res = variance_truncation(blocks, static_cast<int>(largest));
  EXPECT_NEAR(res.transform.discarded_fraction, 0.0, 1e-12);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    EXPECT_LT(rel(block_norm(res.blocks[i]), block_norm(blocks[i])), 1e-10);
  }
}

TEST(VarianceTruncation, WarnsWhenKeepExceedsFeatures) {
  const auto blocks = dataset_blocks(5, 16);
  const auto res = variance_truncation(blocks, 100000);
  EXPECT_FALSE(res.warnings.empty());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    EXPECT_LT(rel(block_norm(res.blocks[i]), block_norm(blocks[i])), 1e-10);
  }
}

TEST(VarianceTruncation, DiscardedFractionMonotone) {
  const auto blocks = dataset_blocks(25, 17);
  double prev = 1.0;
  for (int keep : {1, 2, 4, 8, 16, 36}) {
    const double d = variance_truncation(blocks, keep).transform.discarded_fraction;
    EXPECT_LE(d, prev + 1e-15) << keep;
    EXPECT_GE(d, 0.0);
    prev = d;
  }
}

TEST(VarianceTruncation, DuplicatedFeaturesHaveZeroDiscardAtRank) {
  // every feature appears twice, so each group has rank <= half its size
  auto blocks = dataset_blocks(30, 18);
  auto layout = std::make_shared<BlockLayout>(*blocks[0].layout);
  for (auto& g : layout->groups) {
    const auto n = g.labels.size();
    for (std::size_t f = 0; f < n; ++f) {
      auto copy = g.labels[f];
      copy.push_back({0, -2, 0, 0});
      g.labels.push_back(copy);
    }
  }
  std::size_t half = 0;
  for (auto& b : blocks) {
    for (auto& v : b.values) {
      Eigen::MatrixXcd twice(2 * v.rows(), v.cols());
      twice << v, v;
      v = twice;
      half = std::max(half, static_cast<std::size_t>(v.rows() / 2));
    }
    b.layout = layout;
  }
  const auto res = variance_truncation(blocks, static_cast<int>(half));
  EXPECT_LT(res.transform.discarded_fraction, 1e-12);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    EXPECT_LT(rel(block_norm(res.blocks[i]), block_norm(blocks[i])), 1e-10);
  }
}

TEST(VarianceTruncation, FewSamplesMatchDenseEigenproblem) {
  // 3 environments leave every group with fewer sample columns than features
  const auto blocks = dataset_blocks(3, 20);
  const int keep = 4;
  const auto res = variance_truncation(blocks, keep);
  const auto& layout = *blocks[0].layout;
  for (std::size_t k = 0; k < res.transform.source_group.size(); ++k) {
    const auto g = static_cast<std::size_t>(res.transform.source_group[k]);
    const auto d = static_cast<Eigen::Index>(layout.groups[g].labels.size());
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(d, d);
    for (const auto& b : blocks) C += (b.values[g] * b.values[g].adjoint()).real();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    const Eigen::VectorXd ev = es.eigenvalues().reverse();
    const Eigen::MatrixXd& U = res.transform.U[k];
    const auto kept = U.rows();
    ASSERT_LE(kept, keep);
    EXPECT_LT((U * U.transpose() - Eigen::MatrixXd::Identity(kept, kept)).cwiseAbs().maxCoeff(), 1e-10);
    const double scale = std::max(ev[0], 1e-300);
    EXPECT_LT((res.transform.eigenvalues[g].head(d) - ev).cwiseAbs().maxCoeff(), 1e-10 * scale);
    // rows are eigenvectors: U C U^T is diagonal with the leading eigenvalues
    const Eigen::MatrixXd D = U * C * U.transpose();
    for (Eigen::Index i = 0; i < kept; ++i)
      for (Eigen::Index j = 0; j < kept; ++j)
        EXPECT_NEAR(D(i, j), i == j ? ev[i] : 0.0, 1e-9 * scale);
    for (Eigen::Index i = 0; i < kept; ++i) {
      Eigen::Index imax = 0;
      U.row(i).cwiseAbs().maxCoeff(&imax);
      EXPECT_GT(U(i, imax), 0.0);
    }
  }
}

TEST(WeightedCovariance, UnitWeightsGiveScaledCovariance) {
  datasets::Rng rng(19);
  std::vector<DensityCoeffs> cs;
  for (int i = 0; i < 12; ++i) cs.push_back(density_coeffs(random_env(rng, 4), table()));
  for (int l = 0; l <= 2; ++l) {
    const auto W = weighted_covariance(cs, std::vector<double>(12, 1.0), l);
    const int d = cs[0].channel_count(l);
    Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(d, d);
    for (const auto& c : cs)
      for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b)
          for (int m = -l; m <= l; ++m) ref(a, b) += (c(a, l, m) * std::conj(c(b, l, m))).real();
    EXPECT_LT((W - ref).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, ref.norm()));
  }
}

TEST(WeightedCovariance, SingleEnvironmentRank) {
  datasets::Rng rng(20);
  const auto c = density_coeffs(random_env(rng, 6), table());
  for (int l = 0; l <= 1; ++l) {
    const auto W = weighted_covariance({c}, {2.5}, l);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(W);
    int rank = 0;
    for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k)
      if (es.eigenvalues()[k] > 1e-10 * es.eigenvalues().maxCoeff()) ++rank;
    EXPECT_LE(rank, 2 * l + 1);
  }
}

TEST(WeightedCovariance, MagnitudeWeightsMatchBruteForce) {
  datasets::Rng rng(21);
  std::vector<DensityCoeffs> cs;
  std::vector<EquivariantBlock> prev;
  for (int i = 0; i < 10; ++i) {
    cs.push_back(density_coeffs(random_env(rng, 4), table()));
    prev.push_back(nice_iterate(seed_block(cs.back()), cs.back(), cg(), 2));
  }
  const int g = prev[0].layout->find(1, 2);
  ASSERT_GE(g, 0);
  const int feature = 3, l = 1;
  const auto W = weighted_covariance(cs, prev, 1, 2, feature, l);
  const int d = cs[0].channel_count(l);
  Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t i = 0; i < cs.size(); ++i) {
    double w = 0.0;
    for (int p = 0; p < 5; ++p) w += std::norm(prev[i].values[g](feature, p));
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b)
        for (int m = -l; m <= l; ++m) ref(a, b) += w * (cs[i](a, l, m) * std::conj(cs[i](b, l, m))).real();
  }
  EXPECT_LT((W - ref).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, ref.norm()));
}

TEST(FeatureGradients, PowerspectrumMatchesFiniteDifference) {
  datasets::Rng rng(22);
  const auto e = random_env(rng, 4);
  const auto c = density_coeffs(e, table());
  const auto g = powerspectrum_gradients(c, density_coeff_gradients(e, table()));
  const double h = 1e-5;
  for (std::size_t j = 0; j < e.neighbors.size(); ++j) {
    const auto atom = e.neighbors[j].index;
    const auto it = std::find(g.atoms.begin(), g.atoms.end(), atom);
    ASSERT_NE(it, g.atoms.end());
    const auto a = it - g.atoms.begin();
    for (int d = 0; d < 3; ++d) {
      auto shift = [&](double s) {
        auto x = e;
        x.neighbors[j].r_vec[d] += s;
        x.neighbors[j].r = x.neighbors[j].r_vec.norm();
        return powerspectrum(density_coeffs(x, table()));
      };
      const Eigen::VectorXd fd = (shift(h) - shift(-h)) / (2 * h);
      const Eigen::VectorXd an = g.values.row(3 * a + d).transpose();
      EXPECT_LT((fd - an).cwiseAbs().maxCoeff(), 1e-5 * std::max(1e-3, an.cwiseAbs().maxCoeff()));
    }
  }
}

TEST(FeatureGradients, RadialSpectrumSumRule) {
  datasets::Rng rng(23);
  const auto e = random_env(rng, 5);
  const auto c = density_coeffs(e, table());
  const auto g = radial_spectrum_gradients(c, density_coeff_gradients(e, table()));
  for (int d = 0; d < 3; ++d) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(g.values.cols());
    for (std::size_t a = 0; a < g.atoms.size(); ++a) sum += g.values.row(3 * static_cast<Eigen::Index>(a) + d).transpose();
    EXPECT_LT(sum.cwiseAbs().maxCoeff(), 1e-10);
  }
  EXPECT_EQ(radial_spectrum(c).size(), c.channel_count(0));
}

namespace {

std::vector<DensityCoeffs> dataset_coeffs(int count, std::uint64_t seed) {
  datasets::Rng rng(seed);
  std::vector<DensityCoeffs> out;
  for (int i = 0; i < count; ++i) out.push_back(density_coeffs(random_env(rng, rng.integer(2, 6)), table()));
  return out;
}

}  // namespace

TEST(NiceFeaturizer, FitOutputMatchesTransform) {
  const auto cs = dataset_coeffs(15, 24);
  NiceSettings s;
  s.nu_max = 3;
  s.n_keep = 10;
  NiceOutput train;
  std::vector<std::string> warnings;
  const auto nf = NiceFeaturizer::fit(cs, s, 2, &train, &warnings);
  const auto out = nf.transform(cs, 3);
  ASSERT_EQ(out.invariants.size(), 3u);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(out.invariants[k].order, k + 1);
    EXPECT_EQ(out.invariants[k].labels, train.invariants[k].labels);
    EXPECT_LT((out.invariants[k].values - train.invariants[k].values).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_EQ(nf.discarded_fractions().size(), 3u);
  EXPECT_GT(nf.discarded_fractions()[1], 0.0);
  for (Eigen::Index i = 0; i < out.norms_full.rows(); ++i)
    for (int k = 0; k < 3; ++k) EXPECT_LE(out.norms_kept(i, k), out.norms_full(i, k) * (1 + 1e-12));
  // nu = 1 invariants are the radial spectrum
  EXPECT_LT((out.invariants[0].values.row(0).transpose() - radial_spectrum(cs[0])).cwiseAbs().maxCoeff(),
            1e-15);
}

TEST(NiceFeaturizer, BlobRoundTrip) {
  const auto cs = dataset_coeffs(12, 25);
  NiceSettings s;
  s.nu_max = 3;
  s.n_keep = 8;
  const auto nf = NiceFeaturizer::fit(cs, s, 1);
  const auto back = NiceFeaturizer::from_blob(decode_blob(encode_blob(nf.to_blob())));
  const auto a = nf.transform(cs, 1), b = back.transform(cs, 1);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(a.invariants[k].values, b.invariants[k].values);
  EXPECT_EQ(back.discarded_fractions(), nf.discarded_fractions());
}

TEST(NiceFeaturizer, WorkerCountDoesNotChangeResults) {
  const auto cs = dataset_coeffs(12, 26);
  NiceSettings s;
  s.nu_max = 3;
  s.n_keep = 6;
  NiceOutput a, b;
  NiceFeaturizer::fit(cs, s, 1, &a);
  NiceFeaturizer::fit(cs, s, 4, &b);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(a.invariants[k].values, b.invariants[k].values);
}

TEST(NiceFeaturizer, RejectsMismatchedCoefficients) {
  const auto cs = dataset_coeffs(5, 27);
  const auto nf = NiceFeaturizer::fit(cs, NiceSettings{}, 1);
  const auto other = build_table(small_spec(4, 2), {1, 8}, nullptr, -1, 100);
  EXPECT_THROW(nf.transform({density_coeffs(Environment{}, other)}, 1), ValidationError);
  NiceSettings bad;
  bad.n_keep = 0;
  EXPECT_THROW(NiceFeaturizer::fit(cs, bad, 1), ValidationError);
}

TEST(InvariantFeatures, BlobRoundTrip) {
  const auto cs = dataset_coeffs(6, 28);
  NiceOutput out;
  NiceSettings s;
  s.nu_max = 2;
  NiceFeaturizer::fit(cs, s, 1, &out);
  const auto& f = out.invariants[1];
  const auto back = InvariantFeatures::from_blob(decode_blob(encode_blob(f.to_blob())));
  EXPECT_EQ(back.order, f.order);
  EXPECT_EQ(back.basis_id, f.basis_id);
  EXPECT_EQ(back.labels, f.labels);
  EXPECT_EQ(back.values, f.values);
}

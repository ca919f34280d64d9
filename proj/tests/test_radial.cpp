#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>

#include "optrad/contraction.hpp"
#include "optrad/error.hpp"
#include "test_util.hpp"

using namespace optrad;
using testutil::small_spec;

namespace {

double overlap(const PrimitiveBasis& b, int n, int k, double xmax) {
  Eigen::VectorXd R(b.size());
  return testutil::trapezoid(
      [&](double x) {
        b.evaluate(x, R);
        return x * x * R[n] * R[k];
      },
      0.0, xmax, 40000);
}

/// Independent quadrature of the normalized-Gaussian radial integral.
double integral_oracle(const BasisSpec& spec, int n, int l, double r) {
  const PrimitiveBasis b(spec);
  const double s2 = spec.sigma_a * spec.sigma_a;
  const double norm = 4.0 * std::numbers::pi / std::pow(2.0 * std::numbers::pi * s2, 1.5);
  const double lo = std::max(0.0, r - 12.0 * spec.sigma_a);
  const double hi = r + 12.0 * spec.sigma_a;
  return norm * testutil::trapezoid(
                    [&](double x) {
                      const double z = x * r / s2;
                      const double g = std::exp(-(x * x + r * r) / (2.0 * s2));
                      return x * x * b.value(n, x) * g *
                             testutil::boost_sph_bessel_i(l, z);
                    },
                    lo, hi, 60000);
}

ContractionMap identity_map(const BasisSpec& spec, int z) {
  ContractionMap m;
  m.species_mode = SpeciesMode::PerSpecies;
  m.lmax = spec.lmax;
  m.species = {z};
  for (int l = 0; l <= spec.lmax; ++l) {
    ContractionBlock b;
    for (int n = 0; n < spec.nmax; ++n) b.inputs.push_back({z, n});
    b.U = Eigen::MatrixXd::Identity(spec.nmax, spec.nmax);
    b.eigenvalues = Eigen::VectorXd::Ones(spec.nmax);
    m.blocks[{-1, z, l}] = b;
  }
  return m;
}

}  // namespace

TEST(Cutoff, Values) {
  EXPECT_DOUBLE_EQ(cutoff_fn(5.0, 5.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(cutoff_fn(4.0, 5.0, 1.0), 1.0);
  EXPECT_NEAR(cutoff_fn(4.5, 5.0, 1.0), 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(cutoff_fn(6.0, 5.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(cutoff_fn(0.0, 5.0, 1.0), 1.0);
}

TEST(Cutoff, ContinuouslyDifferentiable) {
  const double h = 1e-7;
  for (double r : {3.9, 4.0, 4.2, 4.5, 4.8, 4.999, 5.0}) {
    const double fd = (cutoff_fn(r + h, 5.0, 1.0) - cutoff_fn(r - h, 5.0, 1.0)) / (2 * h);
    EXPECT_NEAR(cutoff_derivative(r, 5.0, 1.0), fd, 1e-6);
  }
  EXPECT_DOUBLE_EQ(cutoff_derivative(5.0, 5.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(cutoff_derivative(4.0, 5.0, 1.0), 0.0);
}

TEST(Cutoff, DensityWeightVanishesSmoothlyAtCutoff) {
  const auto [w, dw] = neighbor_weight(4.0, 4.0, 0.5, std::nullopt);
  EXPECT_DOUBLE_EQ(w, 0.0);
  EXPECT_DOUBLE_EQ(dw, 0.0);
  RadialScaling sc{1.0, 2.0, 3.0};
  const auto [ws, dws] = neighbor_weight(4.0, 4.0, 0.5, sc);
  EXPECT_DOUBLE_EQ(ws, 0.0);
  EXPECT_NEAR(dws, 0.0, 1e-15);
}

TEST(Scaling, ValueAndDerivative) {
  RadialScaling sc{0.5, 2.0, 4.0};
  EXPECT_DOUBLE_EQ(sc.value(0.0), 1.0);
  EXPECT_DOUBLE_EQ(sc.value(2.0), 0.5 / 1.5);
  const double h = 1e-6;
  EXPECT_NEAR(sc.derivative(1.7), (sc.value(1.7 + h) - sc.value(1.7 - h)) / (2 * h), 1e-8);
  EXPECT_THROW((RadialScaling{1.0, 0.0, 1.0}.validate()), ValidationError);
}

TEST(Bessel, ScaledMatchesBoost) {
  Eigen::VectorXd v(9);
  for (double z : {0.0, 1e-6, 0.3, 1.0, 4.5, 20.0, 150.0}) {
    scaled_bessel_i(z, v);
    for (int l = 0; l < 9; ++l) {
      const double ref = std::exp(-z) * testutil::boost_sph_bessel_i(l, z);
      EXPECT_NEAR(v[l], ref, 1e-12 * std::max(std::abs(ref), 1e-300) + 1e-300)
          << "l=" << l << " z=" << z;
    }
  }
}

TEST(Primitive, SingleGtoIsNormalized) {
  const PrimitiveBasis b(small_spec(1, 0));
  EXPECT_NEAR(overlap(b, 0, 0, 20.0), 1.0, 1e-10);
}

TEST(Primitive, GtoOrthonormal) {
  const auto spec = small_spec(8, 0, 5.0);
  const PrimitiveBasis b(spec);
  for (int n = 0; n < 8; ++n)
    for (int k = 0; k <= n; ++k) {
      EXPECT_NEAR(overlap(b, n, k, 20.0), n == k ? 1.0 : 0.0, 1e-10) << n << "," << k;
    }
}

TEST(Primitive, DvrOrthonormal) {
  auto spec = small_spec(6, 0, 5.0);
  spec.kind = BasisKind::DVR;
  const PrimitiveBasis b(spec);
  for (int n = 0; n < 6; ++n)
    for (int k = 0; k <= n; ++k) {
      EXPECT_NEAR(overlap(b, n, k, 20.0), n == k ? 1.0 : 0.0, 1e-10) << n << "," << k;
    }
}

TEST(Primitive, IllConditionedGtoRejected) {
  EXPECT_THROW(PrimitiveBasis(small_spec(60, 0, 5.0)), ValidationError);
}

TEST(Primitive, DerivativeMatchesFiniteDifference) {
  const PrimitiveBasis b(small_spec(6, 0));
  Eigen::VectorXd v(6), d(6), vp(6), vm(6);
  const double h = 1e-6;
  for (double x : {0.3, 1.1, 2.7}) {
    b.evaluate(x, v, &d);
    b.evaluate(x + h, vp);
    b.evaluate(x - h, vm);
    EXPECT_LT(((vp - vm) / (2 * h) - d).cwiseAbs().maxCoeff(), 1e-7);
  }
}

TEST(RadialIntegral, ZeroDistanceL0) {
  const auto spec = small_spec(5, 2);
  for (int n = 0; n < 5; ++n) {
    EXPECT_NEAR(radial_integral(spec, n, 0, 0.0), integral_oracle(spec, n, 0, 0.0), 1e-9);
  }
}

TEST(RadialIntegral, ZeroDistanceHigherLVanishes) {
  const auto spec = small_spec(5, 3);
  for (int n = 0; n < 5; ++n)
    for (int l = 1; l <= 3; ++l) EXPECT_EQ(radial_integral(spec, n, l, 0.0), 0.0);
}

TEST(RadialIntegral, MatchesDenseTrapezoid) {
  const auto spec = small_spec(6, 4);
  datasets::Rng rng(3);
  for (int k = 0; k < 12; ++k) {
    const int n = rng.integer(0, 5), l = rng.integer(0, 4);
    const double r = rng.uniform(0.0, spec.rcut);
    EXPECT_NEAR(radial_integral(spec, n, l, r), integral_oracle(spec, n, l, r), 1e-8)
        << "n=" << n << " l=" << l << " r=" << r;
  }
}

TEST(RadialIntegral, DerivativeMatchesFiniteDifference) {
  const auto spec = small_spec(5, 3);
  const RadialIntegrator in(spec);
  Eigen::MatrixXd v, d, vp, vm;
  const double h = 1e-5;
  for (double r : {0.4, 1.7, 3.2}) {
    in.integrals(r, v, &d);
    in.integrals(r + h, vp);
    in.integrals(r - h, vm);
    const Eigen::MatrixXd fd = (vp - vm) / (2 * h);
    EXPECT_LT((fd - d).cwiseAbs().maxCoeff(), 1e-7 * std::max(1.0, d.cwiseAbs().maxCoeff()));
  }
}

TEST(RadialIntegral, Preconditions) {
  auto spec = small_spec();
  EXPECT_THROW(radial_integral(spec, 0, 0, spec.rcut + 0.1), ValidationError);
  spec.sigma_a = 0.0;
  EXPECT_THROW(radial_integral(spec, 0, 0, 1.0), ValidationError);
}

TEST(RadialDelta, EqualsBasisValue) {
  auto spec = small_spec(5, 3);
  spec.sigma_a = 0.0;
  const PrimitiveBasis b(spec);
  for (int n = 0; n < 5; ++n) {
    EXPECT_DOUBLE_EQ(radial_integral_delta(spec, n, 0, 0.0), b.value(n, 0.0));
    for (int l = 0; l <= 3; ++l) {
      EXPECT_DOUBLE_EQ(radial_integral_delta(spec, n, l, 1.3), b.value(n, 1.3));
    }
  }
  EXPECT_THROW(radial_integral_delta(spec, 0, 0, spec.rcut + 1.0), ValidationError);
}

TEST(RadialDelta, SmallSigmaLimit) {
  auto spec = small_spec(5, 2);
  spec.sigma_a = 1e-3;
  for (int n = 0; n < 5; ++n)
    for (int l = 0; l <= 2; ++l)
      for (double r : {1.0, 2.0, 3.0}) {
        const double d = radial_integral_delta(spec, n, l, r);
        const double g = radial_integral(spec, n, l, r);
        if (std::abs(d) < 1e-3) continue;
        EXPECT_NEAR(g, d, 1e-3 * std::abs(d)) << n << " " << l << " " << r;
      }
}

TEST(Table, GridShapeAndNodes) {
  const auto spec = small_spec(4, 2);
  const auto t = build_table(spec, {1, 8}, nullptr, -1, 64);
  EXPECT_EQ(t.grid_points(), 64);
  EXPECT_DOUBLE_EQ(t.grid()[0], 0.0);
  EXPECT_DOUBLE_EQ(t.grid()[63], spec.rcut);
  const RadialIntegrator in(spec);
  Eigen::MatrixXd v;
  for (int i : {0, 10, 37, 63}) {
    in.integrals(t.grid()[i], v);
    for (int l = 0; l <= 2; ++l)
      for (int n = 0; n < 4; ++n) {
        EXPECT_NEAR(eval_table(t, 8, 4 + n, l, t.grid()[i]).first,
                    t.entry(l, 1).values(i, n), 1e-14);
        EXPECT_NEAR(t.entry(l, 1).values(i, n), v(n, l), 1e-14);
      }
  }
  EXPECT_THROW(build_table(spec, {1}, nullptr, -1, 16), ValidationError);
}

TEST(Table, SplineAccuracy) {
  const auto spec = small_spec(8, 4, 5.0);
  const auto t = build_table(spec, {14}, nullptr, -1, 600, 0);
  const RadialIntegrator in(spec);
  datasets::Rng rng(9);
  Eigen::MatrixXd ref;
  double worst = 0.0;
  for (int k = 0; k < 2000; ++k) {
    const double r = rng.uniform(0.0, spec.rcut);
    in.integrals(r, ref);
    for (int l = 0; l <= 4; ++l)
      for (int n = 0; n < 8; ++n) {
        worst = std::max(worst, std::abs(eval_table(t, 14, n, l, r).first - ref(n, l)));
      }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Table, DerivativeMatchesFiniteDifference) {
  const auto spec = small_spec(6, 3);
  const auto t = build_table(spec, {1}, nullptr, -1, 600);
  const double h = 1e-5;
  datasets::Rng rng(2);
  for (int k = 0; k < 50; ++k) {
    const double r = rng.uniform(0.1, spec.rcut - 0.1);
    const int n = rng.integer(0, 5), l = rng.integer(0, 3);
    const auto [v, d] = eval_table(t, 1, n, l, r);
    const double fd =
        (eval_table(t, 1, n, l, r + h).first - eval_table(t, 1, n, l, r - h).first) / (2 * h);
    EXPECT_NEAR(d, fd, 1e-5 * std::max(std::abs(fd), 1e-2)) << "r=" << r;
  }
}

TEST(Table, HermiteOvershootBound) {
  const auto spec = small_spec(6, 2);
  const auto t = build_table(spec, {1}, nullptr, -1, 40);
  const double hgrid = t.grid()[1] - t.grid()[0];
  for (int l = 0; l <= 2; ++l) {
    const auto& e = t.entry(l, 0);
    for (int i = 0; i + 1 < t.grid_points(); ++i)
      for (int n = 0; n < 6; ++n) {
        const double f0 = e.values(i, n), f1 = e.values(i + 1, n);
        const double slack = 4.0 / 27.0 * hgrid * (std::abs(e.derivs(i, n)) + std::abs(e.derivs(i + 1, n)));
        for (double u : {0.1, 0.33, 0.5, 0.77, 0.95}) {
          const double v = eval_table(t, 1, n, l, t.grid()[i] + u * hgrid).first;
          EXPECT_GE(v, std::min(f0, f1) - slack - 1e-15);
          EXPECT_LE(v, std::max(f0, f1) + slack + 1e-15);
        }
      }
  }
}

TEST(Table, HalvingSpacingConvergesAtCubicOrder) {
  const auto spec = small_spec(6, 3);
  const RadialIntegrator in(spec);
  datasets::Rng rng(5);
  std::vector<double> probes;
  for (int k = 0; k < 400; ++k) probes.push_back(rng.uniform(0.0, spec.rcut));
  std::vector<Eigen::MatrixXd> ref(probes.size());
  for (std::size_t k = 0; k < probes.size(); ++k) in.integrals(probes[k], ref[k]);
  auto error = [&](int points) {
    const auto t = build_table(spec, {1}, nullptr, -1, points);
    double worst = 0.0;
    for (std::size_t k = 0; k < probes.size(); ++k)
      for (int l = 0; l <= 3; ++l)
        for (int n = 0; n < 6; ++n)
          worst = std::max(worst, std::abs(eval_table(t, 1, n, l, probes[k]).first - ref[k](n, l)));
    return worst;
  };
  double prev = error(33);
  for (int points : {65, 129, 257}) {
    const double e = error(points);
    if (prev < 1e-9) break;
    EXPECT_GE(prev / e, 8.0) << "points " << points;
    prev = e;
  }
}

TEST(Table, IdentityContractionEqualsPrimitive) {
  const auto spec = small_spec(4, 2);
  const auto prim = build_table(spec, {6}, nullptr, -1, 64);
  const auto map = identity_map(spec, 6);
  const auto con = build_table(spec, {6}, &map, -1, 64);
  EXPECT_TRUE(con.contracted());
  for (int l = 0; l <= 2; ++l) {
    EXPECT_EQ(con.entry(l, 0).values, prim.entry(l, 0).values);
    EXPECT_EQ(con.entry(l, 0).derivs, prim.entry(l, 0).derivs);
  }
}

TEST(Table, ContractedRowsAreLinearCombinations) {
  const auto spec = small_spec(5, 2);
  const auto prim = build_table(spec, {6}, nullptr, -1, 64);
  auto map = identity_map(spec, 6);
  datasets::Rng rng(8);
  for (auto& [key, b] : map.blocks) {
    b.U = Eigen::MatrixXd(3, 5);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) b.U(i, j) = rng.normal();
  }
  const auto con = build_table(spec, {6}, &map, -1, 64);
  for (int l = 0; l <= 2; ++l) {
    const Eigen::MatrixXd expect = prim.entry(l, 0).values * map.blocks.at({-1, 6, l}).U.transpose();
    EXPECT_LT((con.entry(l, 0).values - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Table, BlobRoundTrip) {
  const auto spec = small_spec(4, 2);
  const auto t = build_table(spec, {1, 8}, nullptr, -1, 50);
  const auto back = RadialTable::from_blob(decode_blob(encode_blob(t.to_blob())));
  EXPECT_EQ(back.basis_id(), t.basis_id());
  EXPECT_EQ(back.species(), t.species());
  for (int l = 0; l <= 2; ++l) {
    EXPECT_EQ(back.entry(l, 1).values, t.entry(l, 1).values);
    EXPECT_EQ(back.entry(l, 1).derivs, t.entry(l, 1).derivs);
  }
}

TEST(Table, OutOfRangeRejected) {
  const auto spec = small_spec(3, 1);
  const auto t = build_table(spec, {1}, nullptr, -1, 40);
  EXPECT_THROW(eval_table(t, 1, 0, 0, spec.rcut + 0.01), ValidationError);
  EXPECT_THROW(eval_table(t, 1, 0, 0, -0.01), ValidationError);
  EXPECT_THROW(eval_table(t, 8, 0, 0, 1.0), ValidationError);
}

TEST(BasisSpec, ValidationAndJson) {
  auto spec = small_spec();
  spec.scaling = RadialScaling{1.0, 2.0, 3.0};
  const auto back = basis_spec_from_json(to_json(spec));
  EXPECT_EQ(back.id(), spec.id());
  auto bad = small_spec();
  bad.nmax = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = small_spec();
  bad.cutoff_width = bad.rcut;
  EXPECT_THROW(bad.validate(), ValidationError);
  EXPECT_THROW(basis_spec_from_json(json{{"nmax", 4}, {"bogus", 1}}), ValidationError);
}

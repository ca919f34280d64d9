#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "optrad/error.hpp"
#include "test_util.hpp"

using namespace optrad;
using testutil::cluster;

TEST(Extxyz, MinimalFrame) {
  const auto frames = parse_extxyz("1\nLattice=\"10 0 0 0 10 0 0 0 10\"\nSi 0 0 0\n");
  ASSERT_EQ(frames.size(), 1u);
  const auto& s = frames[0];
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s.species[0], 14);
  EXPECT_TRUE(s.cell.isApprox(10.0 * Mat3::Identity()));
  EXPECT_TRUE(s.periodic());
  EXPECT_FALSE(s.energy.has_value());
}

TEST(Extxyz, EnergyAndForces) {
  const auto frames = parse_extxyz(
      "2\nProperties=species:S:1:pos:R:3:forces:R:3 energy=-5.0 pbc=\"F F F\"\n"
      "H 0 0 0 0.1 0.2 0.3\nO 0 0 1 -0.1 -0.2 -0.3\n");
  ASSERT_EQ(frames.size(), 1u);
  const auto& s = frames[0];
  ASSERT_TRUE(s.energy.has_value());
  EXPECT_DOUBLE_EQ(*s.energy, -5.0);
  ASSERT_TRUE(s.forces.has_value());
  EXPECT_DOUBLE_EQ((*s.forces)[1].z(), -0.3);
  EXPECT_EQ(s.species[1], 8);
  EXPECT_FALSE(s.periodic());
}

TEST(Extxyz, UnknownElementNamesLine) {
  try {
    parse_extxyz("1\nLattice=\"10 0 0 0 10 0 0 0 10\"\nXx 0 0 0\n");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(Extxyz, MalformedCountAndColumns) {
  EXPECT_THROW(parse_extxyz("two\ncomment\nH 0 0 0\n"), ParseError);
  EXPECT_THROW(parse_extxyz("1\nProperties=species:S:1:pos:R:3\nH 0 0\n"), ParseError);
  EXPECT_THROW(parse_extxyz("2\ncomment\nH 0 0 0\n"), ParseError);
}

TEST(Extxyz, RoundTripIsExact) {
  auto frames = datasets::pair_potential_clusters(3, 5, {}, 4.0, 1.5, 11);
  frames.push_back(datasets::silicon_like(1, 2)[0]);
  const auto back = parse_extxyz(write_extxyz(frames));
  ASSERT_EQ(back.size(), frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) {
    ASSERT_EQ(back[f].size(), frames[f].size());
    EXPECT_EQ(back[f].species, frames[f].species);
    EXPECT_EQ(back[f].pbc, frames[f].pbc);
    EXPECT_EQ(back[f].cell, frames[f].cell);
    for (std::size_t a = 0; a < frames[f].size(); ++a) {
      EXPECT_EQ(back[f].positions[a], frames[f].positions[a]);
    }
    EXPECT_EQ(back[f].energy, frames[f].energy);
    ASSERT_EQ(back[f].forces.has_value(), frames[f].forces.has_value());
    if (frames[f].forces) {
      for (std::size_t a = 0; a < frames[f].size(); ++a) {
        EXPECT_EQ((*back[f].forces)[a], (*frames[f].forces)[a]);
      }
    }
  }
}

Structure dimer(double d) {
  Structure s;
  s.positions = {Vec3::Zero(), Vec3(0, 0, d)};
  s.species = {1, 1};
  return s;
}

TEST(NeighborList, DimerInsideCutoff) {
  const auto envs = neighbor_list(dimer(2.0), 3.0);
  ASSERT_EQ(envs.size(), 2u);
  for (const auto& e : envs) {
    ASSERT_EQ(e.neighbors.size(), 1u);
    EXPECT_DOUBLE_EQ(e.neighbors[0].r, 2.0);
  }
}

TEST(NeighborList, DimerOutsideCutoff) {
  for (const auto& e : neighbor_list(dimer(2.0), 1.5)) EXPECT_TRUE(e.neighbors.empty());
}

TEST(NeighborList, PeriodicImagesMatchSupercellEnumeration) {
  Structure s;
  s.positions = {Vec3(0.3, 0.1, 0.2)};
  s.species = {14};
  s.cell = 3.0 * Mat3::Identity();
  s.pbc = {true, true, true};
  const double rcut = 3.5;
  int brute = 0;
  for (int i = -2; i <= 2; ++i)
    for (int j = -2; j <= 2; ++j)
      for (int k = -2; k <= 2; ++k) {
        const double r = (Vec3(i, j, k) * 3.0).norm();
        if (r > 0.0 && r <= rcut) ++brute;
      }
  const auto envs = neighbor_list(s, rcut);
  ASSERT_EQ(envs.size(), 1u);
  EXPECT_EQ(static_cast<int>(envs[0].neighbors.size()), brute);
}

TEST(NeighborList, TriclinicMatchesBruteForce) {
  datasets::Rng rng(4);
  Structure s;
  s.cell << 4.0, 0.0, 0.0, 1.2, 3.5, 0.0, 0.7, -0.9, 3.8;
  s.pbc = {true, true, true};
  for (int a = 0; a < 3; ++a) {
    s.positions.push_back(s.cell.transpose() * Vec3(rng.uniform(), rng.uniform(), rng.uniform()));
    s.species.push_back(a == 0 ? 14 : 8);
  }
  const double rcut = 5.0;
  const auto envs = neighbor_list(s, rcut);
  for (std::size_t c = 0; c < s.size(); ++c) {
    int brute = 0;
    for (int i = -4; i <= 4; ++i)
      for (int j = -4; j <= 4; ++j)
        for (int k = -4; k <= 4; ++k)
          for (std::size_t b = 0; b < s.size(); ++b) {
            const Vec3 shift = s.cell.transpose() * Vec3(i, j, k);
            const double r = (s.positions[b] + shift - s.positions[c]).norm();
            if (r > 0.0 && r <= rcut) ++brute;
          }
    EXPECT_EQ(static_cast<int>(envs[c].neighbors.size()), brute);
  }
}

TEST(NeighborList, NonPeriodicEqualsAllPairs) {
  datasets::Rng rng(1);
  const auto s = cluster(rng, 12, {1, 6, 8}, 0.8, 4.0);
  const double rcut = 3.0;
  const auto envs = neighbor_list(s, rcut);
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::vector<int> expect, got;
    for (std::size_t j = 0; j < s.size(); ++j) {
      const double r = (s.positions[j] - s.positions[i]).norm();
      if (j != i && r <= rcut) expect.push_back(static_cast<int>(j));
    }
    for (const auto& n : envs[i].neighbors) {
      got.push_back(n.index);
      EXPECT_NEAR(n.r, n.r_vec.norm(), 1e-12 * n.r);
      EXPECT_GT(n.r, 0.0);
      EXPECT_LE(n.r, rcut);
      EXPECT_EQ(n.species, s.species[static_cast<std::size_t>(n.index)]);
    }
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, expect);
  }
}

std::multiset<std::pair<int, long long>> neighbor_multiset(const Environment& e) {
  std::multiset<std::pair<int, long long>> out;
  for (const auto& n : e.neighbors) out.insert({n.species, std::llround(n.r * 1e9)});
  return out;
}

TEST(NeighborList, PermutationCovariant) {
  datasets::Rng rng(2);
  const auto s = cluster(rng, 8, {1, 8});
  std::vector<std::size_t> perm(s.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = perm.size() - 1 - i;
  Structure p = s;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    p.positions[i] = s.positions[perm[i]];
    p.species[i] = s.species[perm[i]];
  }
  const auto a = neighbor_list(s, 3.0), b = neighbor_list(p, 3.0);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    EXPECT_EQ(neighbor_multiset(b[i]), neighbor_multiset(a[perm[i]]));
  }
}

TEST(NeighborList, RotationInvariantMultisets) {
  datasets::Rng rng(3);
  const auto s = cluster(rng, 10, {1, 8});
  const auto r = apply_rotation(s, testutil::random_rotation(rng));
  const auto a = neighbor_list(s, 3.0), b = neighbor_list(r, 3.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(neighbor_multiset(a[i]), neighbor_multiset(b[i]));
  }
}

TEST(NeighborList, SingularCellRejected) {
  Structure s;
  s.positions = {Vec3::Zero()};
  s.species = {1};
  s.pbc = {true, true, true};
  EXPECT_THROW(neighbor_list(s, 2.0), ValidationError);
  EXPECT_THROW(neighbor_list(dimer(1.0), 0.0), ValidationError);
}

TEST(Rotation, IdentityLeavesStructure) {
  datasets::Rng rng(5);
  const auto s = cluster(rng, 5, {1});
  const auto r = apply_rotation(s, Mat3::Identity());
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(r.positions[i], s.positions[i]);
}

TEST(Rotation, HalfTurnAboutZ) {
  Structure s;
  s.positions = {Vec3(1, 0, 0)};
  s.species = {1};
  const Mat3 R = Eigen::AngleAxisd(std::numbers::pi, Vec3::UnitZ()).toRotationMatrix();
  const auto r = apply_rotation(s, R);
  EXPECT_NEAR((r.positions[0] - Vec3(-1, 0, 0)).norm(), 0.0, 1e-15);
}

TEST(Rotation, DistancesPreserved) {
  datasets::Rng rng(6);
  const auto s = cluster(rng, 9, {1, 8});
  const auto r = apply_rotation(s, testutil::random_rotation(rng));
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      const double d0 = (s.positions[i] - s.positions[j]).norm();
      const double d1 = (r.positions[i] - r.positions[j]).norm();
      EXPECT_NEAR(d1, d0, 1e-12 * std::max(1.0, d0));
    }
  EXPECT_EQ(r.species, s.species);
}

TEST(Rotation, NonOrthogonalRejected) {
  datasets::Rng rng(7);
  const auto s = cluster(rng, 3, {1});
  Mat3 R = Mat3::Identity();
  R(0, 1) = 1e-6;
  EXPECT_THROW(apply_rotation(s, R), ValidationError);
}

TEST(Elements, SymbolTable) {
  EXPECT_EQ(atomic_number("H"), 1);
  EXPECT_EQ(atomic_number("Lr"), 103);
  EXPECT_EQ(atomic_number("Xx"), 0);
  EXPECT_EQ(element_symbol(14), "Si");
}

#include "optrad/datasets.hpp"

#include <cmath>
#include <numbers>

#include "optrad/error.hpp"
#include "optrad/radial.hpp"

namespace optrad::datasets {

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  while (u1 == 0.0) u1 = uniform();
  const double u2 = uniform();
  const double rad = std::sqrt(-2.0 * std::log(u1));
  const double ang = 2.0 * std::numbers::pi * u2;
  spare_ = rad * std::sin(ang);
  has_spare_ = true;
  return rad * std::cos(ang);
}

int Rng::integer(int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(engine_() % span);
}

Vec3 Rng::unit_vector() {
  const double z = uniform(-1.0, 1.0);
  const double phi = 2.0 * std::numbers::pi * uniform();
  const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {s * std::cos(phi), s * std::sin(phi), z};
}

Structure random_cluster(Rng& rng, int neighbors, const std::vector<int>& species,
                         double rmin, double rmax, double min_pair) {
  if (species.empty()) throw ValidationError("datasets", "no species given");
  Structure s;
  s.species.push_back(species[static_cast<std::size_t>(
      rng.integer(0, static_cast<int>(species.size()) - 1))]);
  s.positions.push_back(Vec3::Zero());
  int attempts = 0;
  while (static_cast<int>(s.size()) < neighbors + 1) {
    if (++attempts > 100000) {
      throw RuntimeError("datasets", "could not place cluster atoms");
    }
    // uniform in the spherical shell
    const double a = rmin * rmin * rmin, b = rmax * rmax * rmax;
    const double r = std::cbrt(a + (b - a) * rng.uniform());
    const Vec3 p = r * rng.unit_vector();
    bool ok = true;
    for (std::size_t j = 1; j < s.size() && ok; ++j) {
      ok = (s.positions[j] - p).norm() >= min_pair;
    }
    if (!ok) continue;
    s.positions.push_back(p);
    s.species.push_back(species[static_cast<std::size_t>(
        rng.integer(0, static_cast<int>(species.size()) - 1))]);
  }
  return s;
}

std::vector<Structure> random_clusters(int count, int max_neighbors,
                                       const std::vector<int>& species,
                                       double rmin, double rmax,
                                       std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Structure> out;
  for (int i = 0; i < count; ++i) {
    const int n = rng.integer(1, max_neighbors);
    out.push_back(random_cluster(rng, n, species, rmin, rmax));
  }
  return out;
}

std::vector<Structure> correlated_molecules(int count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Structure> out;
  for (int i = 0; i < count; ++i) {
    Structure s;
    s.species.push_back(6);
    s.positions.push_back(Vec3::Zero());
    const int fragments = rng.integer(2, 4);
    for (int f = 0; f < fragments; ++f) {
      const Vec3 u = rng.unit_vector();
      const bool carbonyl = rng.uniform() < 0.5;
      // heavy atom, then a hydrogen bonded outwards along the same axis
      const double d_heavy = (carbonyl ? 1.23 : 1.43) + 0.03 * rng.normal();
      const Vec3 heavy = d_heavy * u;
      s.species.push_back(carbonyl ? 8 : 6);
      s.positions.push_back(heavy);
      Vec3 w = rng.unit_vector();
      w -= w.dot(u) * u;
      w.normalize();
      const double d_h = (carbonyl ? 0.97 : 1.09) + 0.02 * rng.normal();
      const double tilt = 0.6 + 0.05 * rng.normal();
      s.species.push_back(1);
      s.positions.push_back(heavy + d_h * (std::cos(tilt) * u + std::sin(tilt) * w));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Structure> silicon_like(int structures, std::uint64_t seed,
                                    double rattle) {
  Rng rng(seed);
  const double a0 = 5.43;
  const Vec3 basis[8] = {{0, 0, 0},       {0, 0.5, 0.5},   {0.5, 0, 0.5},
                         {0.5, 0.5, 0},   {0.25, 0.25, 0.25},
                         {0.25, 0.75, 0.75}, {0.75, 0.25, 0.75},
                         {0.75, 0.75, 0.25}};
  std::vector<Structure> out;
  for (int k = 0; k < structures; ++k) {
    Structure s;
    Mat3 strain = Mat3::Identity();
    for (int i = 0; i < 3; ++i) {
      for (int j = i; j < 3; ++j) {
        const double e = 0.02 * rng.normal();
        strain(i, j) += e;
        if (i != j) strain(j, i) += e;
      }
    }
    const Mat3 cell = 2.0 * a0 * strain;
    s.cell = cell;
    s.pbc = {true, true, true};
    for (int x = 0; x < 2; ++x)
      for (int y = 0; y < 2; ++y)
        for (int z = 0; z < 2; ++z)
          for (const auto& b : basis) {
            const Vec3 frac = (Vec3(x, y, z) + b) / 2.0;
            Vec3 p = cell.transpose() * frac;
            for (int d = 0; d < 3; ++d) p[d] += rattle * rng.normal();
            s.positions.push_back(p);
            s.species.push_back(14);
          }
    out.push_back(std::move(s));
  }
  return out;
}

double PairPotential::energy(double r) const {
  const double x = std::pow(sigma / r, 6);
  return 4.0 * epsilon * (x * x - x) * cutoff_fn(r, rcut, width);
}

double PairPotential::derivative(double r) const {
  const double x = std::pow(sigma / r, 6);
  const double e = 4.0 * epsilon * (x * x - x);
  const double de = 4.0 * epsilon * (-12.0 * x * x + 6.0 * x) / r;
  return de * cutoff_fn(r, rcut, width) + e * cutoff_derivative(r, rcut, width);
}

void label_pair_potential(Structure& s, const PairPotential& potential) {
  double e = 0.0;
  std::vector<Vec3> f(s.size(), Vec3::Zero());
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = i + 1; j < s.size(); ++j) {
      const Vec3 d = s.positions[j] - s.positions[i];
      const double r = d.norm();
      if (r >= potential.rcut) continue;
      e += potential.energy(r);
      const Vec3 g = potential.derivative(r) * d / r;  // dE/dr_j
      f[j] -= g;
      f[i] += g;
    }
  }
  s.energy = e;
  s.forces = f;
}

std::vector<Structure> pair_potential_clusters(int count, int atoms,
                                               const PairPotential& potential,
                                               double radius, double min_pair,
                                               std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Structure> out;
  for (int i = 0; i < count; ++i) {
    Structure s;
    int attempts = 0;
    while (static_cast<int>(s.size()) < atoms) {
      if (++attempts > 100000) {
        throw RuntimeError("datasets", "could not place cluster atoms");
      }
      const Vec3 p = radius * std::cbrt(rng.uniform()) * rng.unit_vector();
      bool ok = true;
      for (const auto& q : s.positions) ok = ok && (q - p).norm() >= min_pair;
      if (!ok) continue;
      s.positions.push_back(p);
      s.species.push_back(18);
    }
    label_pair_potential(s, potential);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace optrad::datasets

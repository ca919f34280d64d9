#ifndef OPTRAD_DATASETS_HPP_
#define OPTRAD_DATASETS_HPP_

#include <cstdint>
#include <random>
#include <vector>

#include "optrad/structures.hpp"

namespace optrad::datasets {

/// mt19937_64 with platform-independent real and normal draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform();  // [0, 1)
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  double normal();
  int integer(int lo, int hi);  // [lo, hi]
  Vec3 unit_vector();
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Non-periodic cluster: atom 0 at the origin, `neighbors` further atoms at
/// distances in [rmin, rmax] with pairwise separation >= min_pair.
Structure random_cluster(Rng& rng, int neighbors, const std::vector<int>& species,
                         double rmin, double rmax, double min_pair = 0.5);

std::vector<Structure> random_clusters(int count, int max_neighbors,
                                       const std::vector<int>& species,
                                       double rmin, double rmax,
                                       std::uint64_t seed);

/// Three-species (H, C, O) molecules built from rigid bonded fragments, so
/// that radial and chemical channels are strongly correlated.
std::vector<Structure> correlated_molecules(int count, std::uint64_t seed);

/// Rattled, strained 64-atom diamond-cubic silicon supercells.
std::vector<Structure> silicon_like(int structures, std::uint64_t seed,
                                    double rattle = 0.25);

/// Smoothly truncated Lennard-Jones pair potential.
struct PairPotential {
  double epsilon = 1.0;
  double sigma = 2.0;
  double rcut = 5.0;
  double width = 1.0;

  double energy(double r) const;
  double derivative(double r) const;
};

/// Clusters labelled with energies and forces of `potential`.
std::vector<Structure> pair_potential_clusters(int count, int atoms,
                                               const PairPotential& potential,
                                               double radius, double min_pair,
                                               std::uint64_t seed);

void label_pair_potential(Structure& s, const PairPotential& potential);

}  // namespace optrad::datasets

#endif  // OPTRAD_DATASETS_HPP_

#ifndef OPTRAD_STRUCTURES_HPP_
#define OPTRAD_STRUCTURES_HPP_

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace optrad {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Atomic configuration. Cell rows are lattice vectors (Angstrom).
struct Structure {
  std::vector<Vec3> positions;
  std::vector<int> species;  // atomic numbers
  Mat3 cell = Mat3::Zero();
  std::array<bool, 3> pbc{false, false, false};
  std::optional<double> energy;
  std::optional<std::vector<Vec3>> forces;
  std::map<std::string, double> scalars;  // other numeric comment keys

  std::size_t size() const { return positions.size(); }
  bool periodic() const { return pbc[0] || pbc[1] || pbc[2]; }

  /// Throws ValidationError when positions/species disagree or a periodic
  /// cell is singular.
  void validate() const;
};

struct Neighbor {
  int species;
  Vec3 r_vec;  // r_j + shift - r_center
  double r;
  int index;  // atom index of the (possibly image) neighbor in the structure
};

/// Atom-centered neighborhood within a cutoff. The center itself is never
/// listed; periodic images of the center are.
struct Environment {
  std::size_t structure_id = 0;
  int center = 0;
  int center_species = 0;
  std::vector<Neighbor> neighbors;
};

int atomic_number(const std::string& symbol);  // 0 when unknown
const std::string& element_symbol(int z);

std::vector<Structure> parse_extxyz(const std::string& text);
std::vector<Structure> read_extxyz(const std::string& path);

/// Writes frames with 17 significant digits so that parse_extxyz recovers
/// every double exactly.
std::string write_extxyz(const std::vector<Structure>& frames);

std::vector<Environment> neighbor_list(const Structure& s, double rcut,
                                       std::size_t structure_id = 0);

/// Rotates positions, cell rows and forces by R (R^T R = I to 1e-12).
Structure apply_rotation(const Structure& s, const Mat3& R);

/// Uniformly distributed rotation from a quaternion built out of three
/// numbers in [0,1).
Mat3 rotation_from_uniform(double u1, double u2, double u3);

}  // namespace optrad

#endif  // OPTRAD_STRUCTURES_HPP_

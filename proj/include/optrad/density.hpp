#ifndef OPTRAD_DENSITY_HPP_
#define OPTRAD_DENSITY_HPP_

#include <array>
#include <complex>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "optrad/radial.hpp"
#include "optrad/structures.hpp"

namespace optrad {

using cplx = std::complex<double>;

/// Complex spherical harmonics with the Condon-Shortley phase, Y_lm stored at
/// index l*l + l + m. Gradients are taken with respect to the Cartesian
/// components of the (unit) argument, treating them as independent.
struct SphericalHarmonics {
  int lmax = 0;
  Eigen::VectorXcd values;
  std::optional<std::array<Eigen::VectorXcd, 3>> gradients;

  static int index(int l, int m) { return l * l + l + m; }
  cplx operator()(int l, int m) const { return values[index(l, m)]; }
};

SphericalHarmonics spherical_harmonics(int lmax, const Vec3& u,
                                       bool with_gradients = false);

/// Expansion coefficients <a n l m|rho_i>. values[l] is channels x (2l+1),
/// column m + l; channels are the table's channel labels at that l.
struct DensityCoeffs {
  std::size_t env_id = 0;
  int center_species = 0;
  std::string basis_id;
  bool contracted = false;
  std::vector<std::vector<ChannelLabel>> channels;
  std::vector<Eigen::MatrixXcd> values;

  int lmax() const { return static_cast<int>(values.size()) - 1; }
  int channel_count(int l) const {
    return static_cast<int>(values[static_cast<std::size_t>(l)].rows());
  }
  cplx operator()(int channel, int l, int m) const {
    return values[static_cast<std::size_t>(l)](channel, m + l);
  }
  double squared_norm() const;
};

/// d<anlm|rho_i>/dr_j for every listed neighbor j, and for the center atom.
struct CoeffGradients {
  std::size_t env_id = 0;
  int center = 0;
  std::vector<int> neighbor_atoms;
  /// neighbor[j][l][d]: channels x (2l+1) derivative along Cartesian d.
  std::vector<std::vector<std::array<Eigen::MatrixXcd, 3>>> neighbor;
  std::vector<std::array<Eigen::MatrixXcd, 3>> center_gradient;
};

/// Combined per-neighbor weight f_cut(r) * u(r) and its r-derivative.
std::pair<double, double> neighbor_weight(
    double r, double rcut, double width,
    const std::optional<RadialScaling>& scaling);

DensityCoeffs density_coeffs(const Environment& env, const RadialTable& table);
DensityCoeffs density_coeffs(const Environment& env, const RadialTable& table,
                             const std::optional<RadialScaling>& scaling);

CoeffGradients density_coeff_gradients(const Environment& env,
                                       const RadialTable& table);
CoeffGradients density_coeff_gradients(
    const Environment& env, const RadialTable& table,
    const std::optional<RadialScaling>& scaling);

}  // namespace optrad

#endif  // OPTRAD_DENSITY_HPP_

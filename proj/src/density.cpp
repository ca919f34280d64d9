#include "optrad/density.hpp"

#include <cmath>
#include <numbers>

#include "optrad/error.hpp"

namespace optrad {

SphericalHarmonics spherical_harmonics(int lmax, const Vec3& u,
                                       bool with_gradients) {
  if (lmax < 0 || lmax > 30) {
    throw ValidationError("density", "spherical harmonics support lmax <= 30");
  }
  if (std::abs(u.norm() - 1.0) > 1e-10) {
    throw ValidationError("density", "spherical harmonics need a unit vector");
  }
  const double x = u[0], y = u[1], z = u[2];
  const int L = lmax;
  // Normalized associated Legendre polynomials divided by sin^m(theta), and
  // their z-derivatives; p(l, m) for m >= 0.
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(L + 1, L + 1);
  Eigen::MatrixXd dp = Eigen::MatrixXd::Zero(L + 1, L + 1);
  p(0, 0) = 1.0 / std::sqrt(4.0 * std::numbers::pi);
  for (int m = 1; m <= L; ++m) {
    p(m, m) = -std::sqrt((2.0 * m + 1.0) / (2.0 * m)) * p(m - 1, m - 1);
  }
  for (int m = 0; m < L; ++m) {
    p(m + 1, m) = std::sqrt(2.0 * m + 3.0) * z * p(m, m);
    dp(m + 1, m) = std::sqrt(2.0 * m + 3.0) * p(m, m);
  }
  for (int m = 0; m <= L; ++m) {
    for (int l = m + 2; l <= L; ++l) {
      const double ll = l, mm = m;
      const double a = std::sqrt((4.0 * ll * ll - 1.0) / (ll * ll - mm * mm));
      const double b = std::sqrt(((ll - 1) * (ll - 1) - mm * mm) /
                                 (4.0 * (ll - 1) * (ll - 1) - 1.0));
      p(l, m) = a * (z * p(l - 1, m) - b * p(l - 2, m));
      dp(l, m) = a * (p(l - 1, m) + z * dp(l - 1, m) - b * dp(l - 2, m));
    }
  }
  // powers of (x + iy)
  std::vector<cplx> w(static_cast<std::size_t>(L + 1));
  w[0] = 1.0;
  const cplx xy(x, y);
  for (int m = 1; m <= L; ++m) w[m] = w[m - 1] * xy;

  SphericalHarmonics sh;
  sh.lmax = L;
  const int size = (L + 1) * (L + 1);
  sh.values.resize(size);
  std::array<Eigen::VectorXcd, 3> grad;
  if (with_gradients) {
    for (auto& g : grad) g.resize(size);
  }
  const cplx I(0.0, 1.0);
  for (int l = 0; l <= L; ++l) {
    for (int m = 0; m <= l; ++m) {
      const cplx val = p(l, m) * w[m];
      const int ip = SphericalHarmonics::index(l, m);
      const int im = SphericalHarmonics::index(l, -m);
      const double sign = (m % 2) ? -1.0 : 1.0;
      sh.values[ip] = val;
      sh.values[im] = sign * std::conj(val);
      if (with_gradients) {
        const cplx wm1 = m > 0 ? static_cast<double>(m) * w[m - 1] : cplx(0.0);
        const cplx gx = p(l, m) * wm1;
        const cplx gy = I * p(l, m) * wm1;
        const cplx gz = dp(l, m) * w[m];
        grad[0][ip] = gx;
        grad[1][ip] = gy;
        grad[2][ip] = gz;
        grad[0][im] = sign * std::conj(gx);
        grad[1][im] = sign * std::conj(gy);
        grad[2][im] = sign * std::conj(gz);
      }
    }
  }
  if (with_gradients) sh.gradients = grad;
  return sh;
}

double DensityCoeffs::squared_norm() const {
  double s = 0.0;
  for (const auto& v : values) s += v.squaredNorm();
  return s;
}

std::pair<double, double> neighbor_weight(
    double r, double rcut, double width,
    const std::optional<RadialScaling>& scaling) {
  double f = cutoff_fn(r, rcut, width);
  double df = cutoff_derivative(r, rcut, width);
  if (scaling) {
    const double u = scaling->value(r);
    const double du = scaling->derivative(r);
    return {f * u, df * u + f * du};
  }
  return {f, df};
}

namespace {

DensityCoeffs empty_coeffs(const Environment& env, const RadialTable& table) {
  DensityCoeffs c;
  c.center_species = env.center_species;
  c.basis_id = table.basis_id();
  c.contracted = table.contracted();
  const int lmax = table.lmax();
  for (int l = 0; l <= lmax; ++l) {
    c.channels.push_back(table.channels(l));
    c.values.push_back(Eigen::MatrixXcd::Zero(
        static_cast<Eigen::Index>(table.channels(l).size()), 2 * l + 1));
  }
  return c;
}

int checked_species(const RadialTable& table, const Neighbor& nb) {
  const int s = table.species_index(nb.species);
  if (s < 0) {
    throw ValidationError("density", "neighbor species " +
                                         std::to_string(nb.species) +
                                         " is not in the basis species set");
  }
  if (nb.r > table.spec().rcut * (1.0 + 1e-14)) {
    throw ValidationError("density",
                          "neighbor beyond the table cutoff; environment and "
                          "basis rcut differ");
  }
  return s;
}

}  // namespace

DensityCoeffs density_coeffs(const Environment& env, const RadialTable& table) {
  return density_coeffs(env, table, table.spec().scaling);
}

DensityCoeffs density_coeffs(const Environment& env, const RadialTable& table,
                             const std::optional<RadialScaling>& scaling) {
  auto c = empty_coeffs(env, table);
  const int lmax = table.lmax();
  const auto& spec = table.spec();
  Eigen::VectorXd v, dv;
  for (const auto& nb : env.neighbors) {
    const int s = checked_species(table, nb);
    const double w =
        neighbor_weight(nb.r, spec.rcut, spec.cutoff_width, scaling).first;
    if (w == 0.0) continue;
    const auto Y = spherical_harmonics(lmax, nb.r_vec / nb.r);
    for (int l = 0; l <= lmax; ++l) {
      const auto& e = table.entry(l, s);
      const auto nt = static_cast<Eigen::Index>(e.targets.size());
      v.resize(nt);
      dv.resize(nt);
      table.eval(l, s, nb.r, v, dv);
      const Eigen::VectorXcd ylm =
          Y.values.segment(l * l, 2 * l + 1).conjugate();
      auto& block = c.values[static_cast<std::size_t>(l)];
      for (Eigen::Index t = 0; t < nt; ++t) {
        block.row(e.targets[static_cast<std::size_t>(t)]) +=
            (w * v[t]) * ylm.transpose();
      }
    }
  }
  return c;
}

CoeffGradients density_coeff_gradients(const Environment& env,
                                       const RadialTable& table) {
  return density_coeff_gradients(env, table, table.spec().scaling);
}

CoeffGradients density_coeff_gradients(
    const Environment& env, const RadialTable& table,
    const std::optional<RadialScaling>& scaling) {
  const int lmax = table.lmax();
  const auto& spec = table.spec();
  CoeffGradients g;
  g.center = env.center;
  auto zero_set = [&] {
    std::vector<std::array<Eigen::MatrixXcd, 3>> out;
    for (int l = 0; l <= lmax; ++l) {
      const auto rows = static_cast<Eigen::Index>(table.channels(l).size());
      out.push_back({Eigen::MatrixXcd::Zero(rows, 2 * l + 1),
                     Eigen::MatrixXcd::Zero(rows, 2 * l + 1),
                     Eigen::MatrixXcd::Zero(rows, 2 * l + 1)});
    }
    return out;
  };
  g.center_gradient = zero_set();
  Eigen::VectorXd v, dv;
  for (const auto& nb : env.neighbors) {
    const int s = checked_species(table, nb);
    g.neighbor_atoms.push_back(nb.index);
    auto grads = zero_set();
    const auto [w, dw] =
        neighbor_weight(nb.r, spec.rcut, spec.cutoff_width, scaling);
    if (w != 0.0 || dw != 0.0) {
      const Vec3 u = nb.r_vec / nb.r;
      const auto Y = spherical_harmonics(lmax, u, true);
      const Mat3 proj = (Mat3::Identity() - u * u.transpose()) / nb.r;
      // gradient of Y with respect to the neighbor position
      std::array<Eigen::VectorXcd, 3> gy;
      for (int d = 0; d < 3; ++d) {
        gy[d] = proj(d, 0) * (*Y.gradients)[0] + proj(d, 1) * (*Y.gradients)[1] +
                proj(d, 2) * (*Y.gradients)[2];
      }
      for (int l = 0; l <= lmax; ++l) {
        const auto& e = table.entry(l, s);
        const auto nt = static_cast<Eigen::Index>(e.targets.size());
        v.resize(nt);
        dv.resize(nt);
        table.eval(l, s, nb.r, v, dv);
        const Eigen::VectorXcd ylm =
            Y.values.segment(l * l, 2 * l + 1).conjugate();
        for (int d = 0; d < 3; ++d) {
          const Eigen::VectorXcd gyd =
              gy[d].segment(l * l, 2 * l + 1).conjugate();
          auto& block = grads[static_cast<std::size_t>(l)][d];
          for (Eigen::Index t = 0; t < nt; ++t) {
            const double radial = (dw * v[t] + w * dv[t]) * u[d];
            block.row(e.targets[static_cast<std::size_t>(t)]) +=
                (radial * ylm + (w * v[t]) * gyd).transpose();
          }
        }
      }
    }
    for (int l = 0; l <= lmax; ++l) {
      for (int d = 0; d < 3; ++d) {
        g.center_gradient[static_cast<std::size_t>(l)][d] -=
            grads[static_cast<std::size_t>(l)][d];
      }
    }
    g.neighbor.push_back(std::move(grads));
  }
  return g;
}

}  // namespace optrad

#include "optrad/radial.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "optrad/contraction.hpp"
#include "optrad/error.hpp"

namespace optrad {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kPanelOrder = 20;
constexpr int kMaxPanels = 4096;
constexpr double kRelTol = 1e-9;
// absolute floor relative to the largest entry; absorbs rounding near zeros
constexpr double kAbsFloor = 1e-11;
constexpr double kWindowSigmas = 10.0;
constexpr double kMaxCondition = 1e12;

double log_double_factorial_odd(int l) {  // log((2l+1)!!)
  return std::lgamma(2.0 * l + 2.0) - l * std::numbers::ln2 -
         std::lgamma(l + 1.0);
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

}  // namespace

double RadialScaling::value(double r) const {
  return c / (c + std::pow(r / r0, m));
}

double RadialScaling::derivative(double r) const {
  if (m == 0.0) return 0.0;
  const double p = std::pow(r / r0, m);
  const double dp = (r > 0.0) ? m * p / r : (m == 1.0 ? 1.0 / r0 : 0.0);
  const double denom = c + p;
  return -c * dp / (denom * denom);
}

void RadialScaling::validate() const {
  if (!(r0 > 0.0)) throw ValidationError("radial", "scaling r0 must be > 0");
  if (!(m >= 0.0)) throw ValidationError("radial", "scaling m must be >= 0");
  if (!(c >= 0.0)) throw ValidationError("radial", "scaling c must be >= 0");
}

void BasisSpec::validate() const {
  if (nmax < 1) throw ValidationError("radial", "nmax must be >= 1");
  if (lmax < 0 || lmax > 20) {
    throw ValidationError("radial", "lmax must be in [0, 20]");
  }
  if (!(rcut > 0.0)) throw ValidationError("radial", "rcut must be > 0");
  if (!(cutoff_width > 0.0 && cutoff_width < rcut)) {
    throw ValidationError("radial", "cutoff_width must be in (0, rcut)");
  }
  if (!(sigma_a >= 0.0)) throw ValidationError("radial", "sigma_a must be >= 0");
  if (scaling) scaling->validate();
}

std::string BasisSpec::id() const {
  std::ostringstream ss;
  ss << (kind == BasisKind::GTO ? "GTO" : "DVR") << ":n" << nmax << ":l"
     << lmax << ":rc" << fmt(rcut) << ":s" << fmt(sigma_a) << ":w"
     << fmt(cutoff_width);
  if (scaling) {
    ss << ":u" << fmt(scaling->c) << "," << fmt(scaling->r0) << ","
       << fmt(scaling->m);
  }
  return ss.str();
}

json to_json(const BasisSpec& spec) {
  json j;
  j["kind"] = spec.kind == BasisKind::GTO ? "GTO" : "DVR";
  j["nmax"] = spec.nmax;
  j["lmax"] = spec.lmax;
  j["rcut"] = spec.rcut;
  j["sigma_a"] = spec.sigma_a;
  j["cutoff_width"] = spec.cutoff_width;
  if (spec.scaling) {
    j["scaling"] = {{"c", spec.scaling->c},
                    {"r0", spec.scaling->r0},
                    {"m", spec.scaling->m}};
  } else {
    j["scaling"] = nullptr;
  }
  return j;
}

BasisSpec basis_spec_from_json(const json& j) {
  static const std::set<std::string> known = {
      "kind", "nmax", "lmax", "rcut", "sigma_a", "cutoff_width", "scaling"};
  if (!j.is_object()) throw ValidationError("radial", "basis must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) {
      throw ValidationError("radial", "unknown basis key '" + k + "'");
    }
  }
  BasisSpec spec;
  try {
    if (j.contains("kind")) {
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "GTO") {
        spec.kind = BasisKind::GTO;
      } else if (kind == "DVR") {
        spec.kind = BasisKind::DVR;
      } else {
        throw ValidationError("radial", "basis kind must be GTO or DVR");
      }
    }
    if (j.contains("nmax")) spec.nmax = j.at("nmax").get<int>();
    if (j.contains("lmax")) spec.lmax = j.at("lmax").get<int>();
    if (j.contains("rcut")) spec.rcut = j.at("rcut").get<double>();
    if (j.contains("sigma_a")) spec.sigma_a = j.at("sigma_a").get<double>();
    if (j.contains("cutoff_width")) {
      spec.cutoff_width = j.at("cutoff_width").get<double>();
    }
    if (j.contains("scaling") && !j.at("scaling").is_null()) {
      const auto& s = j.at("scaling");
      for (const auto& [k, v] : s.items()) {
        if (k != "c" && k != "r0" && k != "m") {
          throw ValidationError("radial", "unknown scaling key '" + k + "'");
        }
      }
      RadialScaling sc;
      if (s.contains("c")) sc.c = s.at("c").get<double>();
      if (s.contains("r0")) sc.r0 = s.at("r0").get<double>();
      if (s.contains("m")) sc.m = s.at("m").get<double>();
      spec.scaling = sc;
    }
  } catch (const json::exception& e) {
    throw ValidationError("radial", std::string("bad basis field: ") + e.what());
  }
  spec.validate();
  return spec;
}

double cutoff_fn(double r, double rcut, double width) {
  if (r <= rcut - width) return 1.0;
  if (r >= rcut) return 0.0;
  return 0.5 * (1.0 + std::cos(kPi * (r - rcut + width) / width));
}

double cutoff_derivative(double r, double rcut, double width) {
  if (r <= rcut - width || r >= rcut) return 0.0;
  return -0.5 * kPi / width * std::sin(kPi * (r - rcut + width) / width);
}

void scaled_bessel_i(double z, Eigen::Ref<Eigen::VectorXd> out) {
  const int lmax = static_cast<int>(out.size()) - 1;
  if (z == 0.0) {
    out.setZero();
    if (lmax >= 0) out[0] = 1.0;
    return;
  }
  for (int l = 0; l <= lmax; ++l) {
    const double switch_z = std::max(20.0, static_cast<double>(l * (l + 1)));
    if (z <= switch_z) {
      // i_l(z) = z^l / (2l+1)!! * sum_k u_k, all terms positive.
      const double half_z2 = 0.5 * z * z;
      double sum = 1.0;
      double term = 1.0;
      for (int k = 0; k < 100000; ++k) {
        term *= half_z2 / ((k + 1.0) * (2.0 * l + 2.0 * k + 3.0));
        sum += term;
        if (term < 1e-17 * sum) break;
      }
      out[l] = std::exp(l * std::log(z) - log_double_factorial_odd(l) - z +
                        std::log(sum));
    } else {
      // exact finite form:
      // i_l(z) = [e^z S(-) + (-1)^{l+1} e^{-z} S(+)] / (2z),
      // S(+-) = sum_k (+-1)^k (l+k)! / (k! (l-k)! (2z)^k).
      const double t = 0.5 / z;
      double a = 1.0;
      double pw = 1.0;
      double alt = 0.0;
      double plain = 0.0;
      for (int k = 0; k <= l; ++k) {
        alt += ((k % 2) ? -a : a) * pw;
        plain += a * pw;
        a *= static_cast<double>(l + k + 1) * (l - k) / (k + 1.0);
        pw *= t;
      }
      const double sign = ((l + 1) % 2) ? -1.0 : 1.0;
      out[l] = t * (alt + sign * std::exp(-2.0 * z) * plain);
    }
  }
}

const std::pair<Eigen::VectorXd, Eigen::VectorXd>& gauss_legendre(int order) {
  static std::mutex mutex;
  static std::map<int, std::unique_ptr<std::pair<Eigen::VectorXd,
                                                 Eigen::VectorXd>>>
      cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto& slot = cache[order];
  if (!slot) {
    if (order < 1) throw ValidationError("radial", "quadrature order < 1");
    Eigen::VectorXd x(order), w(order);
    for (int i = 0; i < (order + 1) / 2; ++i) {
      double z = std::cos(kPi * (i + 0.75) / (order + 0.5));
      double dp = 0.0;
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = 0.0;
        for (int j = 1; j <= order; ++j) {
          const double p2 = p1;
          p1 = p0;
          p0 = ((2.0 * j - 1.0) * z * p1 - (j - 1.0) * p2) / j;
        }
        dp = order * (z * p0 - p1) / (z * z - 1.0);
        const double dz = p0 / dp;
        z -= dz;
        if (std::abs(dz) < 1e-16) break;
      }
      x[i] = -z;
      x[order - 1 - i] = z;
      w[i] = w[order - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    slot = std::make_unique<std::pair<Eigen::VectorXd, Eigen::VectorXd>>(x, w);
  }
  return *slot;
}

PrimitiveBasis::PrimitiveBasis(const BasisSpec& spec) {
  spec.validate();
  const int n = spec.nmax;
  power_.resize(static_cast<std::size_t>(n));
  center_.resize(static_cast<std::size_t>(n));
  width_.resize(static_cast<std::size_t>(n));
  norm_.resize(static_cast<std::size_t>(n));
  using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  MatL S(n, n);
  if (spec.kind == BasisKind::GTO) {
    for (int k = 0; k < n; ++k) {
      power_[k] = k;
      center_[k] = 0.0;
      width_[k] = spec.rcut * std::max(std::sqrt(static_cast<double>(k)), 1.0) /
                  spec.nmax;
    }
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) {
        const long double alpha =
            0.5L / (static_cast<long double>(width_[a]) * width_[a]) +
            0.5L / (static_cast<long double>(width_[b]) * width_[b]);
        const long double p = (power_[a] + power_[b] + 3.0L) / 2.0L;
        S(a, b) = 0.5L * std::exp(std::lgamma(p) - p * std::log(alpha));
      }
    }
  } else {
    const double h = spec.rcut / (spec.nmax + 1);
    for (int k = 0; k < n; ++k) {
      power_[k] = 0;
      center_[k] = (k + 1) * h;
      width_[k] = h;
    }
    // product of two equal-width Gaussians is a Gaussian of width h/sqrt(2)
    // centered at the midpoint; integrate x^2 against it on [0, inf).
    const long double s = h;
    const long double sqpi = std::sqrt(static_cast<long double>(kPi));
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) {
        const long double ca = center_[a], cb = center_[b];
        const long double c = 0.5L * (ca + cb);
        const long double pref = std::exp(-(ca - cb) * (ca - cb) / (4.0L * s * s));
        const long double e = std::exp(-c * c / (s * s));
        const long double i0 = s * sqpi / 2.0L * (1.0L + std::erf(c / s));
        const long double i1 = s * s / 2.0L * e;
        const long double i2 = -s * s / 2.0L * c * e + s * s / 2.0L * i0;
        S(a, b) = pref * (i2 + 2.0L * c * i1 + c * c * i0);
      }
    }
  }
  Eigen::Matrix<long double, Eigen::Dynamic, 1> d = S.diagonal();
  for (int k = 0; k < n; ++k) {
    norm_[k] = static_cast<double>(1.0L / std::sqrt(d[k]));
  }
  MatL Sn(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) Sn(a, b) = S(a, b) / std::sqrt(d[a] * d[b]);
  Eigen::SelfAdjointEigenSolver<MatL> es(Sn);
  const auto& ev = es.eigenvalues();
  condition_ = static_cast<double>(ev.maxCoeff() / ev.minCoeff());
  if (!(ev.minCoeff() > 0) || condition_ > kMaxCondition) {
    throw ValidationError(
        "radial", "primitive overlap matrix is numerically singular "
                  "(condition number " + fmt(condition_) +
                      " > 1e12); use a smaller nmax");
  }
  Eigen::Matrix<long double, Eigen::Dynamic, 1> inv_sqrt =
      ev.array().rsqrt().matrix();
  MatL T = es.eigenvectors() * inv_sqrt.asDiagonal() *
           es.eigenvectors().transpose();
  transform_ = T.cast<double>();
  raw_overlap_ = Sn.cast<double>();
}

void PrimitiveBasis::evaluate(double x, Eigen::Ref<Eigen::VectorXd> values,
                              Eigen::VectorXd* derivs) const {
  const int n = size();
  Eigen::VectorXd g(n), dg(n);
  for (int k = 0; k < n; ++k) {
    const double s = width_[k];
    const double dx = x - center_[k];
    const double e = std::exp(-dx * dx / (2.0 * s * s));
    const int p = static_cast<int>(power_[k]);
    const double xp = p == 0 ? 1.0 : std::pow(x, p);
    g[k] = norm_[k] * xp * e;
    if (derivs) {
      const double xpm1 = p == 0 ? 0.0 : (p == 1 ? 1.0 : std::pow(x, p - 1));
      dg[k] = norm_[k] * e * (p * xpm1 - xp * dx / (s * s));
    }
  }
  values.noalias() = transform_ * g;
  if (derivs) *derivs = transform_ * dg;
}

double PrimitiveBasis::value(int n, double x) const {
  Eigen::VectorXd v(size());
  evaluate(x, v);
  return v[n];
}

RadialIntegrator::RadialIntegrator(const BasisSpec& spec)
    : spec_(spec), basis_(spec) {}

void RadialIntegrator::integrals(double r, Eigen::MatrixXd& values,
                                 Eigen::MatrixXd* derivs) const {
  const int nmax = spec_.nmax;
  const int lmax = spec_.lmax;
  if (!(r >= 0.0)) throw ValidationError("radial", "r must be >= 0");
  values.setZero(nmax, lmax + 1);
  if (derivs) derivs->setZero(nmax, lmax + 1);

  if (spec_.sigma_a == 0.0) {
    Eigen::VectorXd R(nmax), dR(nmax);
    basis_.evaluate(r, R, &dR);
    for (int l = 0; l <= lmax; ++l) {
      values.col(l) = R;
      if (derivs) derivs->col(l) = dR;
    }
    return;
  }

  const double sigma = spec_.sigma_a;
  const double s2 = sigma * sigma;
  const double pref = 4.0 * kPi / std::pow(2.0 * kPi * s2, 1.5);
  const double a = std::max(0.0, r - kWindowSigmas * sigma);
  const double b = r + kWindowSigmas * sigma;
  const auto& [gx, gw] = gauss_legendre(kPanelOrder);

  Eigen::VectorXd R(nmax), bessel(lmax + 2), radial(lmax + 1),
      dradial(lmax + 1);
  auto quadrature = [&](int panels, Eigen::MatrixXd& val, Eigen::MatrixXd& der) {
    val.setZero(nmax, lmax + 1);
    der.setZero(nmax, lmax + 1);
    const double width = (b - a) / panels;
    for (int p = 0; p < panels; ++p) {
      const double lo = a + p * width;
      for (int i = 0; i < kPanelOrder; ++i) {
        const double x = lo + 0.5 * width * (gx[i] + 1.0);
        const double w = 0.5 * width * gw[i] * pref;
        basis_.evaluate(x, R);
        const double z = x * r / s2;
        scaled_bessel_i(z, bessel);
        const double gauss = std::exp(-(x - r) * (x - r) / (2.0 * s2));
        const double base = w * x * x * gauss;
        for (int l = 0; l <= lmax; ++l) {
          radial[l] = base * bessel[l];
          double dbessel;
          if (z > 0.0) {
            dbessel = bessel[l + 1] + (l / z - 1.0) * bessel[l];
          } else {
            dbessel = (l == 1 ? 1.0 / 3.0 : 0.0) - (l == 0 ? 1.0 : 0.0);
          }
          dradial[l] = base * ((x - r) / s2 * bessel[l] + x / s2 * dbessel);
        }
        val.noalias() += R * radial.transpose();
        der.noalias() += R * dradial.transpose();
      }
    }
  };

  Eigen::MatrixXd v1, d1, v2, d2;
  int panels = 2;
  quadrature(panels, v1, d1);
  for (;;) {
    panels *= 2;
    quadrature(panels, v2, d2);
    const double vscale = v2.cwiseAbs().maxCoeff();
    const double dscale = d2.cwiseAbs().maxCoeff();
    const Eigen::ArrayXXd vtol = kRelTol * v2.array().abs() + kAbsFloor * vscale;
    const Eigen::ArrayXXd dtol = kRelTol * d2.array().abs() + kAbsFloor * dscale;
    const bool ok = ((v2 - v1).array().abs() <= vtol).all() &&
                    ((d2 - d1).array().abs() <= dtol).all();
    if (ok) break;
    if (panels >= kMaxPanels) {
      Eigen::Index bn = 0, bl = 0;
      ((v2 - v1).array().abs() - vtol).maxCoeff(&bn, &bl);
      throw RuntimeError("radial", "radial integral did not converge for n=" +
                                       std::to_string(bn) +
                                       " l=" + std::to_string(bl) +
                                       " r=" + fmt(r));
    }
    v1.swap(v2);
    d1.swap(d2);
  }
  values = v2;
  if (derivs) *derivs = d2;
}

double RadialIntegrator::integral(int n, int l, double r) const {
  if (n < 0 || n >= spec_.nmax || l < 0 || l > spec_.lmax) {
    throw ValidationError("radial", "channel (n=" + std::to_string(n) + ", l=" +
                                        std::to_string(l) + ") out of range");
  }
  Eigen::MatrixXd v;
  integrals(r, v);
  return v(n, l);
}

double radial_integral(const BasisSpec& spec, int n, int l, double r) {
  if (spec.sigma_a <= 0.0) {
    throw ValidationError("radial",
                          "radial_integral needs sigma_a > 0; use the "
                          "delta-density form for sigma_a = 0");
  }
  if (r < 0.0 || r > spec.rcut) {
    throw ValidationError("radial", "r outside [0, rcut]");
  }
  return RadialIntegrator(spec).integral(n, l, r);
}

double radial_integral_delta(const BasisSpec& spec, int n, int l, double r) {
  if (r < 0.0 || r > spec.rcut) {
    throw ValidationError("radial", "r outside [0, rcut]");
  }
  if (n < 0 || n >= spec.nmax || l < 0 || l > spec.lmax) {
    throw ValidationError("radial", "channel out of range");
  }
  return PrimitiveBasis(spec).value(n, r);
}

int RadialTable::species_index(int z) const {
  auto it = std::find(species_.begin(), species_.end(), z);
  return it == species_.end() ? -1
                              : static_cast<int>(it - species_.begin());
}

void RadialTable::eval(int l, int s, double r, Eigen::Ref<Eigen::VectorXd> v,
                       Eigen::Ref<Eigen::VectorXd> dv) const {
  if (!(r >= 0.0) || r > spec_.rcut * (1.0 + 1e-14)) {
    throw ValidationError("radial", "table evaluated outside [0, rcut] at r=" +
                                        fmt(r));
  }
  const auto& e = entry(l, s);
  const int last = grid_points() - 1;
  int i = static_cast<int>(r / spacing_);
  i = std::clamp(i, 0, last - 1);
  const double h = spacing_;
  const double t = (r - grid_[i]) / h;
  const double t2 = t * t, t3 = t2 * t;
  const double h00 = 2 * t3 - 3 * t2 + 1, h10 = t3 - 2 * t2 + t,
               h01 = -2 * t3 + 3 * t2, h11 = t3 - t2;
  const double d00 = 6 * t2 - 6 * t, d10 = 3 * t2 - 4 * t + 1,
               d01 = -6 * t2 + 6 * t, d11 = 3 * t2 - 2 * t;
  const auto y0 = e.values.row(i), y1 = e.values.row(i + 1);
  const auto m0 = e.derivs.row(i), m1 = e.derivs.row(i + 1);
  v = (h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1).transpose();
  dv = ((d00 * y0 + d01 * y1) / h + d10 * m0 + d11 * m1).transpose();
}

RadialTable build_table(const BasisSpec& spec, const std::vector<int>& species,
                        const ContractionMap* contraction, int center,
                        int grid_points, int workers) {
  spec.validate();
  if (grid_points < 32) {
    throw ValidationError("radial", "grid_points must be >= 32");
  }
  RadialTable t;
  t.spec_ = spec;
  t.species_ = contraction ? contraction->species : species;
  if (contraction && !species.empty() && species != contraction->species) {
    throw ValidationError("radial",
                          "species list disagrees with the contraction map");
  }
  if (t.species_.empty()) throw ValidationError("radial", "empty species set");
  if (contraction && contraction->lmax != spec.lmax) {
    throw ValidationError("radial", "contraction lmax differs from basis lmax");
  }
  t.contracted_ = contraction != nullptr;
  t.basis_id_ = spec.id();
  if (contraction) {
    t.basis_id_ += "|" + contraction->method + ":" +
                   to_string(contraction->species_mode) + ":" +
                   to_string(contraction->center_mode) + ":c" +
                   std::to_string(center);
  }
  const int nmax = spec.nmax;
  const int lmax = spec.lmax;
  const int nspecies = static_cast<int>(t.species_.size());

  // mixing matrices M[l][s]: targets x nmax
  std::vector<std::vector<Eigen::MatrixXd>> mix(
      static_cast<std::size_t>(lmax + 1),
      std::vector<Eigen::MatrixXd>(static_cast<std::size_t>(nspecies)));
  t.channels_.assign(static_cast<std::size_t>(lmax + 1), {});
  t.entries_.assign(static_cast<std::size_t>(lmax + 1),
                    std::vector<RadialTable::Entry>(
                        static_cast<std::size_t>(nspecies)));
  for (int l = 0; l <= lmax; ++l) {
    auto& labels = t.channels_[static_cast<std::size_t>(l)];
    if (!contraction) {
      for (int s = 0; s < nspecies; ++s) {
        auto& entry = t.entries_[static_cast<std::size_t>(l)]
                                [static_cast<std::size_t>(s)];
        for (int n = 0; n < nmax; ++n) {
          entry.targets.push_back(static_cast<int>(labels.size()));
          labels.push_back({t.species_[static_cast<std::size_t>(s)], n});
        }
        mix[static_cast<std::size_t>(l)][static_cast<std::size_t>(s)] =
            Eigen::MatrixXd::Identity(nmax, nmax);
      }
      continue;
    }
    std::vector<std::vector<Eigen::VectorXd>> rows(
        static_cast<std::size_t>(nspecies));
    bool found = false;
    for (const auto& [key, block] : contraction->blocks) {
      if (key.center != center || key.l != l) continue;
      found = true;
      for (int q = 0; q < block.U.rows(); ++q) {
        const int channel = static_cast<int>(labels.size());
        labels.push_back({key.species, q});
        for (int s = 0; s < nspecies; ++s) {
          const int z = t.species_[static_cast<std::size_t>(s)];
          Eigen::VectorXd row = Eigen::VectorXd::Zero(nmax);
          bool touches = false;
          for (std::size_t c = 0; c < block.inputs.size(); ++c) {
            if (block.inputs[c].species != z) continue;
            const int n = block.inputs[c].index;
            if (n < 0 || n >= nmax) {
              throw ValidationError("radial",
                                    "contraction input channel out of range");
            }
            row[n] = block.U(q, static_cast<Eigen::Index>(c));
            touches = true;
          }
          if (touches) {
            t.entries_[static_cast<std::size_t>(l)][static_cast<std::size_t>(s)]
                .targets.push_back(channel);
            rows[static_cast<std::size_t>(s)].push_back(row);
          }
        }
      }
    }
    if (!found) {
      throw ValidationError("radial", "contraction map has no blocks for l=" +
                                          std::to_string(l) + " center=" +
                                          std::to_string(center));
    }
    for (int s = 0; s < nspecies; ++s) {
      const auto& rs = rows[static_cast<std::size_t>(s)];
      Eigen::MatrixXd M(static_cast<Eigen::Index>(rs.size()), nmax);
      for (std::size_t k = 0; k < rs.size(); ++k) {
        M.row(static_cast<Eigen::Index>(k)) = rs[k].transpose();
      }
      mix[static_cast<std::size_t>(l)][static_cast<std::size_t>(s)] = M;
    }
  }

  t.grid_ = Eigen::VectorXd::LinSpaced(grid_points, 0.0, spec.rcut);
  t.spacing_ = spec.rcut / (grid_points - 1);
  for (int l = 0; l <= lmax; ++l) {
    for (int s = 0; s < nspecies; ++s) {
      auto& e = t.entries_[static_cast<std::size_t>(l)]
                          [static_cast<std::size_t>(s)];
      e.values.setZero(grid_points, static_cast<Eigen::Index>(e.targets.size()));
      e.derivs.setZero(grid_points, static_cast<Eigen::Index>(e.targets.size()));
    }
  }
  const RadialIntegrator integrator(spec);
  parallel_for(static_cast<std::size_t>(grid_points), workers,
               [&](std::size_t gi) {
                 Eigen::MatrixXd v, d;
                 integrator.integrals(t.grid_[static_cast<Eigen::Index>(gi)],
                                      v, &d);
                 for (int l = 0; l <= lmax; ++l) {
                   for (int s = 0; s < nspecies; ++s) {
                     const auto& M = mix[static_cast<std::size_t>(l)]
                                        [static_cast<std::size_t>(s)];
                     auto& e = t.entries_[static_cast<std::size_t>(l)]
                                         [static_cast<std::size_t>(s)];
                     const auto row = static_cast<Eigen::Index>(gi);
                     e.values.row(row) = (M * v.col(l)).transpose();
                     e.derivs.row(row) = (M * d.col(l)).transpose();
                   }
                 }
               });
  return t;
}

std::pair<double, double> eval_table(const RadialTable& table, int species,
                                     int channel, int l, double r) {
  if (l < 0 || l > table.lmax()) {
    throw ValidationError("radial", "l out of range");
  }
  const int s = table.species_index(species);
  if (s < 0) {
    throw ValidationError("radial",
                          "species " + std::to_string(species) + " not in table");
  }
  const auto& e = table.entry(l, s);
  auto it = std::find(e.targets.begin(), e.targets.end(), channel);
  if (it == e.targets.end()) {
    throw ValidationError("radial", "channel " + std::to_string(channel) +
                                        " gets no contribution from species " +
                                        std::to_string(species));
  }
  Eigen::VectorXd v(static_cast<Eigen::Index>(e.targets.size())),
      dv(static_cast<Eigen::Index>(e.targets.size()));
  table.eval(l, s, r, v, dv);
  const auto k = it - e.targets.begin();
  return {v[k], dv[k]};
}

Blob RadialTable::to_blob() const {
  Blob blob;
  auto& h = blob.header;
  h["kind"] = "radial_table";
  h["spec"] = to_json(spec_);
  h["species"] = species_;
  h["contracted"] = contracted_;
  h["basis_id"] = basis_id_;
  h["grid_points"] = grid_points();
  json channels = json::array();
  json entries = json::array();
  for (std::size_t l = 0; l < channels_.size(); ++l) {
    json lab = json::array();
    for (const auto& c : channels_[l]) lab.push_back({c.species, c.index});
    channels.push_back(lab);
    json ent = json::array();
    for (const auto& e : entries_[l]) ent.push_back(e.targets);
    entries.push_back(ent);
  }
  h["channels"] = channels;
  h["entries"] = entries;
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& per_l : entries_) {
      for (const auto& e : per_l) {
        const auto& m = pass == 0 ? e.values : e.derivs;
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          for (Eigen::Index g = 0; g < m.rows(); ++g) {
            blob.payload.push_back(m(g, c));
          }
        }
      }
    }
  }
  return blob;
}

RadialTable RadialTable::from_blob(const Blob& blob) {
  const auto& h = blob.header;
  RadialTable t;
  try {
    if (h.at("kind") != "radial_table") {
      throw ValidationError("radial", "blob is not a radial table");
    }
    t.spec_ = basis_spec_from_json(h.at("spec"));
    t.species_ = h.at("species").get<std::vector<int>>();
    t.contracted_ = h.at("contracted").get<bool>();
    t.basis_id_ = h.at("basis_id").get<std::string>();
    const int G = h.at("grid_points").get<int>();
    if (G < 2) throw ValidationError("radial", "bad grid_points");
    t.grid_ = Eigen::VectorXd::LinSpaced(G, 0.0, t.spec_.rcut);
    t.spacing_ = t.spec_.rcut / (G - 1);
    const auto& channels = h.at("channels");
    const auto& entries = h.at("entries");
    if (static_cast<int>(channels.size()) != t.spec_.lmax + 1 ||
        entries.size() != channels.size()) {
      throw ValidationError("radial", "table header l-range mismatch");
    }
    std::size_t total = 0;
    for (std::size_t l = 0; l < channels.size(); ++l) {
      std::vector<ChannelLabel> labels;
      for (const auto& c : channels[l]) {
        labels.push_back({c.at(0).get<int>(), c.at(1).get<int>()});
      }
      t.channels_.push_back(labels);
      if (entries[l].size() != t.species_.size()) {
        throw ValidationError("radial", "table header species mismatch");
      }
      std::vector<Entry> per_l;
      for (const auto& targets : entries[l]) {
        Entry e;
        e.targets = targets.get<std::vector<int>>();
        for (int tg : e.targets) {
          if (tg < 0 || tg >= static_cast<int>(labels.size())) {
            throw ValidationError("radial", "table target out of range");
          }
        }
        e.values.resize(G, static_cast<Eigen::Index>(e.targets.size()));
        e.derivs.resize(G, static_cast<Eigen::Index>(e.targets.size()));
        total += e.targets.size() * static_cast<std::size_t>(G);
        per_l.push_back(std::move(e));
      }
      t.entries_.push_back(std::move(per_l));
    }
    if (blob.payload.size() != 2 * total) {
      throw ValidationError("radial", "table payload size mismatch");
    }
  } catch (const json::exception& e) {
    throw ValidationError("radial", std::string("bad table header: ") +
                                        e.what());
  }
  std::size_t pos = 0;
  for (int pass = 0; pass < 2; ++pass) {
    for (auto& per_l : t.entries_) {
      for (auto& e : per_l) {
        auto& m = pass == 0 ? e.values : e.derivs;
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          for (Eigen::Index g = 0; g < m.rows(); ++g) {
            m(g, c) = blob.payload[pos++];
          }
        }
      }
    }
  }
  return t;
}

}  // namespace optrad

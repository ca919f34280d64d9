#ifndef OPTRAD_RADIAL_HPP_
#define OPTRAD_RADIAL_HPP_

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "optrad/io.hpp"

namespace optrad {

struct ContractionMap;

enum class BasisKind { GTO, DVR };

/// u(r) = c / (c + (r/r0)^m), applied as a per-neighbor weight.
struct RadialScaling {
  double c = 1.0;
  double r0 = 1.0;
  double m = 0.0;

  double value(double r) const;
  double derivative(double r) const;
  void validate() const;
};

struct BasisSpec {
  BasisKind kind = BasisKind::GTO;
  int nmax = 8;
  int lmax = 4;
  double rcut = 5.0;
  double sigma_a = 0.5;  // 0 selects the delta-density limit
  double cutoff_width = 0.5;
  std::optional<RadialScaling> scaling;

  void validate() const;
  std::string id() const;
};

json to_json(const BasisSpec& spec);
BasisSpec basis_spec_from_json(const json& j);

/// Smooth cosine switch: 1 below rcut - width, 0 beyond rcut.
double cutoff_fn(double r, double rcut, double width);
double cutoff_derivative(double r, double rcut, double width);

/// Exponentially scaled modified spherical Bessel functions of the first
/// kind, e^{-z} i_l(z) for l = 0..out.size()-1, z >= 0.
void scaled_bessel_i(double z, Eigen::Ref<Eigen::VectorXd> out);

/// Gauss-Legendre nodes and weights on [-1, 1].
const std::pair<Eigen::VectorXd, Eigen::VectorXd>& gauss_legendre(int order);

/// Orthonormal (with weight x^2 on [0, inf)) l-independent radial family,
/// built as a Loewdin-orthogonalized set of Gaussian primitives
///   g_k(x) = x^p_k exp(-(x - c_k)^2 / (2 s_k^2)).
class PrimitiveBasis {
 public:
  explicit PrimitiveBasis(const BasisSpec& spec);

  int size() const { return static_cast<int>(power_.size()); }
  /// R_n(x) for all n; derivs (optional) receives dR_n/dx.
  void evaluate(double x, Eigen::Ref<Eigen::VectorXd> values,
                Eigen::VectorXd* derivs = nullptr) const;
  double value(int n, double x) const;
  /// Overlap of the normalized primitives (before orthogonalization).
  const Eigen::MatrixXd& raw_overlap() const { return raw_overlap_; }
  /// R = T * normalized primitives.
  const Eigen::MatrixXd& transform() const { return transform_; }
  double condition_number() const { return condition_; }

 private:
  std::vector<double> power_, center_, width_, norm_;
  Eigen::MatrixXd raw_overlap_;
  Eigen::MatrixXd transform_;
  double condition_ = 1.0;
};

/// Radial integrals <nl|r;g> of a normalized Gaussian density of width
/// sigma_a against the primitive family, by panel Gauss-Legendre quadrature
/// with doubling until 1e-9 relative agreement.
class RadialIntegrator {
 public:
  explicit RadialIntegrator(const BasisSpec& spec);

  const BasisSpec& spec() const { return spec_; }
  const PrimitiveBasis& basis() const { return basis_; }

  /// values(n, l) and optionally derivs(n, l) = d/dr at distance r.
  void integrals(double r, Eigen::MatrixXd& values,
                 Eigen::MatrixXd* derivs = nullptr) const;
  double integral(int n, int l, double r) const;

 private:
  BasisSpec spec_;
  PrimitiveBasis basis_;
};

double radial_integral(const BasisSpec& spec, int n, int l, double r);
double radial_integral_delta(const BasisSpec& spec, int n, int l, double r);

/// Radial channel. `species` is the neighbor element the channel belongs to,
/// or -1 for channels that mix elements.
struct ChannelLabel {
  int species = 0;
  int index = 0;
  bool operator==(const ChannelLabel&) const = default;
  auto operator<=>(const ChannelLabel&) const = default;
};

/// Cubic Hermite tables of primitive or contracted radial integrals on a
/// uniform grid over [0, rcut]. For each (l, neighbor species) the table
/// stores the splines of every channel that neighbor contributes to.
class RadialTable {
 public:
  using RowMatrix =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  struct Entry {
    std::vector<int> targets;  // channel indices at this l
    RowMatrix values;          // grid x targets
    RowMatrix derivs;
  };

  RadialTable() = default;

  const BasisSpec& spec() const { return spec_; }
  const std::vector<int>& species() const { return species_; }
  bool contracted() const { return contracted_; }
  const std::string& basis_id() const { return basis_id_; }
  int lmax() const { return spec_.lmax; }
  int grid_points() const { return static_cast<int>(grid_.size()); }
  const Eigen::VectorXd& grid() const { return grid_; }
  const std::vector<ChannelLabel>& channels(int l) const {
    return channels_[static_cast<std::size_t>(l)];
  }
  /// Position of element z in species(), or -1.
  int species_index(int z) const;
  const Entry& entry(int l, int species_index) const {
    return entries_[static_cast<std::size_t>(l)]
                   [static_cast<std::size_t>(species_index)];
  }
  Entry& mutable_entry(int l, int species_index) {
    return entries_[static_cast<std::size_t>(l)]
                   [static_cast<std::size_t>(species_index)];
  }

  /// Interpolates every target of entry (l, species_index) at r.
  void eval(int l, int species_index, double r, Eigen::Ref<Eigen::VectorXd> v,
            Eigen::Ref<Eigen::VectorXd> dv) const;

  Blob to_blob() const;
  static RadialTable from_blob(const Blob& blob);

  friend RadialTable build_table(const BasisSpec&, const std::vector<int>&,
                                 const ContractionMap*, int, int, int);

 private:
  BasisSpec spec_;
  std::vector<int> species_;
  bool contracted_ = false;
  std::string basis_id_;
  Eigen::VectorXd grid_;
  double spacing_ = 0.0;
  std::vector<std::vector<ChannelLabel>> channels_;
  std::vector<std::vector<Entry>> entries_;
};

/// Builds a table on `grid_points` uniform nodes. With a contraction map,
/// channel q of neighbor species a at angular momentum l holds
/// sum_n U_{q,(a,n)} <nl|r;g>; `center` picks the per-center-species block
/// set (-1 for center-agnostic maps).
RadialTable build_table(const BasisSpec& spec, const std::vector<int>& species,
                        const ContractionMap* contraction = nullptr,
                        int center = -1, int grid_points = 600,
                        int workers = 1);

/// Single-channel lookup. Throws when r is outside [0, rcut] or the channel
/// does not receive contributions from `species`.
std::pair<double, double> eval_table(const RadialTable& table, int species,
                                     int channel, int l, double r);

}  // namespace optrad

#endif  // OPTRAD_RADIAL_HPP_

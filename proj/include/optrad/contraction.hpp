#ifndef OPTRAD_CONTRACTION_HPP_
#define OPTRAD_CONTRACTION_HPP_

#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "optrad/density.hpp"
#include "optrad/radial.hpp"

namespace optrad {

enum class SpeciesMode { PerSpecies, Combined };
enum class CenterMode { Agnostic, PerCenterSpecies };

std::string to_string(SpeciesMode mode);
std::string to_string(CenterMode mode);
SpeciesMode species_mode_from_string(const std::string& s);
CenterMode center_mode_from_string(const std::string& s);

/// Key of a covariance / contraction block.
/// center: center element, -1 when center-agnostic.
/// species: neighbor element for per-species blocks, -1 when combined.
struct BlockKey {
  int center = -1;
  int species = -1;
  int l = 0;
  auto operator<=>(const BlockKey&) const = default;
};

/// Uncentered, rotationally invariant covariance of density coefficients,
/// one real symmetric matrix per block over the block's input channels.
struct CovarianceSet {
  SpeciesMode species_mode = SpeciesMode::PerSpecies;
  CenterMode center_mode = CenterMode::Agnostic;
  std::string basis_id;
  std::vector<int> species;
  std::map<BlockKey, std::vector<ChannelLabel>> inputs;
  std::map<BlockKey, Eigen::MatrixXd> matrices;
  /// number of environments contributing per center key
  std::map<int, std::size_t> sample_count;
};

/// Mergeable accumulator: partial sums from disjoint environment subsets can
/// be merged in any order before finalize().
class CovarianceAccumulator {
 public:
  CovarianceAccumulator(SpeciesMode species_mode, CenterMode center_mode);

  void add(const DensityCoeffs& coeffs);
  void merge(const CovarianceAccumulator& other);
  CovarianceSet finalize() const;

 private:
  CovarianceSet sums_;
  bool initialized_ = false;
};

CovarianceSet covariance(const std::vector<DensityCoeffs>& coeffs,
                         SpeciesMode species_mode, CenterMode center_mode);

struct ContractionBlock {
  std::vector<ChannelLabel> inputs;
  Eigen::MatrixXd U;            // qmax x inputs
  Eigen::VectorXd eigenvalues;  // all, descending
};

struct ContractionMap {
  SpeciesMode species_mode = SpeciesMode::PerSpecies;
  CenterMode center_mode = CenterMode::Agnostic;
  std::string method = "pca";
  std::string source_basis_id;
  int lmax = 0;
  std::vector<int> species;
  std::map<BlockKey, ContractionBlock> blocks;

  std::vector<int> centers() const;
  Blob to_blob() const;
  static ContractionMap from_blob(const Blob& blob);
};

/// Symmetric eigendecomposition; eigenvalues descending, each eigenvector's
/// largest-magnitude component made positive (first such index on ties).
void sorted_eigensystem(const Eigen::MatrixXd& C, Eigen::VectorXd& values,
                        Eigen::MatrixXd& vectors);

ContractionMap pca_contraction(const CovarianceSet& cov, int qmax);

/// Supervised contraction of the l = 0 blocks; l > 0 blocks come from PCA
/// of `cov`. X holds one row per sample over all l = 0 input channels of
/// `cov` (in block order), y the matching targets.
ContractionMap pcovr_contraction(const CovarianceSet& cov,
                                 const Eigen::MatrixXd& X,
                                 const Eigen::VectorXd& y, double alpha,
                                 double ridge, int qmax);

/// l = 0 input columns of `cov`, concatenated in block order.
std::vector<std::pair<BlockKey, ChannelLabel>> l0_columns(
    const CovarianceSet& cov);

struct ExplainedVariance {
  std::map<BlockKey, double> per_block;
  double overall = 0.0;
  double residual() const { return 1.0 - overall; }
};

ExplainedVariance explained_variance(const ContractionMap& map, int q);

/// Smallest number of channels (summed over l and blocks, allocating
/// eigenvalues greedily) reaching `fraction` of the covariance trace at
/// every l.
int channels_for_variance(const ContractionMap& map, double fraction);

/// Same count for a truncated primitive basis: keep n < n' for every
/// species, sampled from the covariance diagonal.
int primitive_channels_for_variance(const CovarianceSet& cov, int nmax,
                                    double fraction);

/// Contracted radial functions sum_n U_qn R_n(x) on `grid`, one column per
/// (block, neighbor species, q): keys carry (block, species, q).
struct OptimalBasisValues {
  std::vector<std::tuple<BlockKey, int, int>> keys;
  Eigen::MatrixXd values;  // grid x keys
};

OptimalBasisValues optimal_basis_values(const ContractionMap& map,
                                        const PrimitiveBasis& basis,
                                        const Eigen::VectorXd& grid);

}  // namespace optrad

#endif  // OPTRAD_CONTRACTION_HPP_

#ifndef OPTRAD_CORRELATIONS_HPP_
#define OPTRAD_CORRELATIONS_HPP_

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "optrad/density.hpp"

namespace optrad {

/// Dense Clebsch-Gordan table <l1 m1; l2 m2 | L M> for l1, l2, L <= lmax.
class CGTable {
 public:
  explicit CGTable(int lmax_coupling);

  int lmax() const { return lmax_; }
  /// Zero unless M = m1 + m2 and |l1 - l2| <= L <= l1 + l2.
  double operator()(int l1, int m1, int l2, int m2, int L, int M) const;

 private:
  std::size_t offset(int l1, int l2, int L) const;
  int lmax_;
  std::vector<double> data_;  // [l1][l2][L][m1][m2]
};

CGTable cg_table(int lmax_coupling);

/// One coupling step of a feature's construction path. The first step of a
/// density-derived feature has k = -1, s = 0. A step with l = -1 marks a
/// principal component (channel = component index) of the order-(k, s)
/// group it was fitted on.
struct PathStep {
  int channel = 0;
  int l = 0;
  int k = -1;
  int s = 0;
  bool operator==(const PathStep&) const = default;
  auto operator<=>(const PathStep&) const = default;
};
using FeaturePath = std::vector<PathStep>;

std::string to_string(const FeaturePath& path);

struct BlockGroup {
  int sigma = 1;
  int lambda = 0;
  std::vector<FeaturePath> labels;
};

struct BlockLayout {
  int order = 1;
  std::vector<BlockGroup> groups;
  /// index of the (sigma, lambda) group, -1 when absent
  int find(int sigma, int lambda) const;
  std::size_t feature_count() const;
};

/// Equivariant features of one environment: values[g] is
/// labels x (2 lambda + 1) for group g of the layout, column mu + lambda.
struct EquivariantBlock {
  std::shared_ptr<const BlockLayout> layout;
  std::vector<Eigen::MatrixXcd> values;

  int order() const { return layout->order; }
};

/// Invariant feature matrix (environments x features).
struct InvariantFeatures {
  int order = 0;
  std::string basis_id;
  std::vector<FeaturePath> labels;
  Eigen::MatrixXd values;

  Blob to_blob() const;
  static InvariantFeatures from_blob(const Blob& blob);
};

/// nu = 1 layout: one group per l holding every channel at that l.
std::shared_ptr<const BlockLayout> seed_layout(const DensityCoeffs& c);
std::shared_ptr<const BlockLayout> seed_layout(const std::vector<int>& channels_per_l);
/// nu = 1 block <n|rho[l m]> = <n l (-m)|rho>.
EquivariantBlock seed_block(const DensityCoeffs& c,
                            std::shared_ptr<const BlockLayout> layout);
EquivariantBlock seed_block(const DensityCoeffs& c);

/// Precomputed enumeration of one body-order increment: every
/// (seed feature n l) x (previous feature Q s k) pair and every admissible
/// (sigma, lambda <= lambda_max_out).
class CouplingPlan {
 public:
  CouplingPlan(std::shared_ptr<const BlockLayout> seed,
               std::shared_ptr<const BlockLayout> prev, const CGTable& cg,
               int lambda_max_out);

  std::shared_ptr<const BlockLayout> layout() const { return out_; }
  EquivariantBlock apply(const EquivariantBlock& seed,
                         const EquivariantBlock& prev) const;

 private:
  struct Term {
    int mu;       // output column offset (mu + lambda)
    int seed_col;
    int prev_col;
    double cg;
  };
  struct Op {
    int seed_group, seed_row, prev_group, prev_row;
    int terms;  // index into term_sets_
  };
  std::shared_ptr<const BlockLayout> seed_, prev_, out_;
  std::vector<std::vector<Op>> ops_;  // per output group, one per feature
  std::vector<std::vector<Term>> term_sets_;
};

/// Principal-component contraction of a block over its feature index, per
/// (sigma, lambda) group, fitted on a dataset.
struct BlockTruncation {
  std::shared_ptr<const BlockLayout> source;
  std::shared_ptr<const BlockLayout> target;
  std::vector<int> source_group;             // per target group
  std::vector<Eigen::MatrixXd> U;            // per target group: kept x features
  std::vector<Eigen::VectorXd> eigenvalues;  // per source group, descending
  double discarded_fraction = 0.0;

  EquivariantBlock apply(const EquivariantBlock& block) const;
};

EquivariantBlock nice_iterate(const EquivariantBlock& prev,
                              const DensityCoeffs& c, const CGTable& cg,
                              int lambda_max_out,
                              const BlockTruncation* keep = nullptr);

double block_norm(const EquivariantBlock& block);
/// Sum over mu of |value|^2 for every feature, per group.
std::vector<Eigen::VectorXd> feature_norms(const EquivariantBlock& block);

struct TruncationResult {
  BlockTruncation transform;
  std::vector<EquivariantBlock> blocks;
  std::vector<std::string> warnings;
};

TruncationResult variance_truncation(const std::vector<EquivariantBlock>& blocks,
                                     int n_keep);

/// Applies U (one matrix per l, rows q x columns n) to the channel index of
/// path step `step` of every feature. Requires features differing only in
/// that channel to be present for every n.
EquivariantBlock transform_channels(
    const EquivariantBlock& block, int step,
    const std::vector<Eigen::MatrixXd>& U_per_l);

/// sum_i w_i sum_m c_{n l m,i} conj(c_{n' l m,i}) (real part).
Eigen::MatrixXd weighted_covariance(const std::vector<DensityCoeffs>& coeffs,
                                    const std::vector<double>& weights, int l);
/// Weights from the magnitude sum_p |<Q|rho[s; k p]>|^2 of feature `feature`
/// of group (s, k) in the previous-order blocks.
Eigen::MatrixXd weighted_covariance(const std::vector<DensityCoeffs>& coeffs,
                                    const std::vector<EquivariantBlock>& prev,
                                    int s, int k, int feature, int l);

/// (sigma = +1, lambda = 0) entries, checked real.
Eigen::VectorXd invariants(const EquivariantBlock& block);
std::vector<FeaturePath> invariant_labels(const BlockLayout& layout);

/// SOAP powerspectrum with unique (k1 <= k2) pairs, off-diagonal entries
/// scaled by sqrt(2).
Eigen::VectorXd powerspectrum(const DensityCoeffs& c);
std::vector<FeaturePath> powerspectrum_labels(const DensityCoeffs& c);

/// l = 0 coefficients (the radial spectrum), real.
Eigen::VectorXd radial_spectrum(const DensityCoeffs& c);
std::vector<FeaturePath> radial_spectrum_labels(const DensityCoeffs& c);

/// Derivatives of per-environment features with respect to atom positions:
/// rows 3*a + d for atoms[a], Cartesian d.
struct FeatureGradients {
  std::vector<int> atoms;
  Eigen::MatrixXd values;
};

FeatureGradients radial_spectrum_gradients(const DensityCoeffs& c,
                                           const CoeffGradients& g);
FeatureGradients powerspectrum_gradients(const DensityCoeffs& c,
                                         const CoeffGradients& g);

struct NiceSettings {
  int nu_max = 2;
  int lambda_max = -1;  // intermediate orders; -1 selects the density lmax
  int n_keep = 1000;
  int lmax_coupling = 12;

  void validate() const;
};

json to_json(const NiceSettings& s);
NiceSettings nice_settings_from_json(const json& j);

/// Invariants of orders 1..nu_max with block norms per environment before
/// (full) and after (kept) the variance truncation of each order.
struct NiceOutput {
  std::vector<InvariantFeatures> invariants;
  Eigen::MatrixXd norms_full;  // environments x orders
  Eigen::MatrixXd norms_kept;
};

/// Dataset-level NICE iteration. Orders whose (sigma, lambda) groups exceed
/// n_keep features are contracted by a variance truncation fitted on the
/// training environments; intermediate orders keep lambda <= lambda_max,
/// the last order keeps invariants only.
class NiceFeaturizer {
 public:
  NiceFeaturizer() = default;

  static NiceFeaturizer fit(const std::vector<DensityCoeffs>& coeffs,
                            const NiceSettings& settings, int workers,
                            NiceOutput* train_output = nullptr,
                            std::vector<std::string>* warnings = nullptr);

  NiceOutput transform(const std::vector<DensityCoeffs>& coeffs,
                       int workers) const;

  const NiceSettings& settings() const { return settings_; }
  /// discarded-variance fraction per order (index 0 is nu = 1, always 0)
  const std::vector<double>& discarded_fractions() const { return discarded_; }

  Blob to_blob() const;
  static NiceFeaturizer from_blob(const Blob& blob);

 private:
  void build_plans();

  NiceSettings settings_;
  std::string basis_id_;
  std::vector<int> channels_per_l_;
  int lambda_mid_ = 0;
  std::shared_ptr<const CGTable> cg_;
  std::shared_ptr<const BlockLayout> seed_;
  std::vector<std::shared_ptr<const CouplingPlan>> plans_;  // nu = 2..
  std::vector<std::optional<BlockTruncation>> truncations_;
  std::vector<double> discarded_;
};

}  // namespace optrad

#endif  // OPTRAD_CORRELATIONS_HPP_

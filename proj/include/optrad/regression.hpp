#ifndef OPTRAD_REGRESSION_HPP_
#define OPTRAD_REGRESSION_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "optrad/correlations.hpp"
#include "optrad/io.hpp"
#include "optrad/structures.hpp"

namespace optrad {

enum class ModelKind { Linear, KernelPoly };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

struct Model {
  ModelKind kind = ModelKind::Linear;
  double lambda = 1e-8;
  int zeta = 1;
  // linear
  Eigen::VectorXd weights;
  double intercept = 0.0;
  // kernel: normalized support rows, the sample each row belongs to, and one
  // dual coefficient per sample
  Eigen::MatrixXd support;
  std::vector<int> support_group;
  Eigen::VectorXd dual;
  std::string pipeline_id;
  std::string target = "per_structure";
  json metadata = json::object();  // feature pipeline settings

  Blob to_blob() const;
  static Model from_blob(const Blob& blob);
};

/// Sums rows of `env_features` into rows of the result; structure_of[i] is
/// the output row of environment i.
Eigen::MatrixXd aggregate_structure_features(
    const Eigen::MatrixXd& env_features, const std::vector<int>& structure_of,
    int structure_count);

/// w = (Xc^T Xc + lambda N I)^{-1} Xc^T yc on centered data (plain X, y when
/// fit_intercept is false); intercept = mean(y) - mean(X) w.
Model ridge_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                double lambda, bool fit_intercept = true);
Eigen::VectorXd ridge_predict(const Model& model, const Eigen::MatrixXd& X);

/// k(x, x') = (x.x' / |x||x'|)^zeta; (K + lambda N I) alpha = y.
Model krr_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int zeta,
              double lambda);
/// Sample-level kernel K_AB = sum_{i in A, j in B} k(x_i, x_j): rows of X are
/// environments, group[i] the sample (0..y.size()-1) each belongs to.
Model krr_fit(const Eigen::MatrixXd& X, const std::vector<int>& group,
              const Eigen::VectorXd& y, int zeta, double lambda,
              int workers = 1);
Eigen::VectorXd krr_predict(const Model& model, const Eigen::MatrixXd& X);
Eigen::VectorXd krr_predict(const Model& model, const Eigen::MatrixXd& X,
                            const std::vector<int>& group, int group_count,
                            int workers = 1);

/// Normalized polynomial kernel between the rows of A and B.
Eigen::MatrixXd poly_kernel(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                            int zeta);

/// d(sum of environment features)/d r_atom for one structure: row 3*a + d.
/// `grads` are the feature gradients of the structure's environments.
Eigen::MatrixXd structure_gradient_rows(const std::vector<FeatureGradients>& grads,
                                        int atom_count, Eigen::Index features);

/// F = -G w over the leading G.cols() weights.
std::vector<Vec3> predict_forces(const Model& model, const Eigen::MatrixXd& G);

/// Stacked ridge over energy rows (X_E, y_E) and force rows (-G, y_F) scaled
/// by force_weight; regularization lambda N_E; intercept on energy rows only.
/// G may have fewer columns than X_E (trailing columns have no gradient).
Model joint_energy_force_fit(const Eigen::MatrixXd& X_E,
                             const Eigen::VectorXd& y_E,
                             const Eigen::MatrixXd& G, const Eigen::VectorXd& y_F,
                             double lambda, double force_weight,
                             bool fit_intercept = true);

/// fold[i] in 0..k-1 from a seeded shuffle; fold sizes differ by at most 1.
std::vector<int> k_fold_assignment(int n, int k, std::uint64_t seed);

double rmse(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
double mae(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace optrad

#endif  // OPTRAD_REGRESSION_HPP_

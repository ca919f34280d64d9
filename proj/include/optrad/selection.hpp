#ifndef OPTRAD_SELECTION_HPP_
#define OPTRAD_SELECTION_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "optrad/io.hpp"

namespace optrad {

struct SelectionResult {
  std::string method;
  std::vector<int> indices;
  std::vector<double> scores;  // per pick
  std::vector<std::string> warnings;

  json to_json() const;
};

/// Deterministic CUR column selection with rank-1 deflation: leverage from
/// the top right-singular vector of the residual, ties to the lowest index.
SelectionResult cur_select(const Eigen::MatrixXd& X, int k);

/// Farthest point sampling over columns (points in R^N).
SelectionResult fps_select(const Eigen::MatrixXd& X, int k, int start = 0);

/// Deterministic permutation of 0..n-1 (Fisher-Yates on mt19937_64).
std::vector<int> shuffled_indices(int n, std::uint64_t seed);

struct GfreOptions {
  double train_fraction = 0.5;
  double ridge = 1e-8;
  std::uint64_t seed = 0;
};

/// Global feature-space reconstruction error of X_dst from X_src.
double gfre(const Eigen::MatrixXd& X_src, const Eigen::MatrixXd& X_dst,
            const GfreOptions& options = {});

}  // namespace optrad

#endif  // OPTRAD_SELECTION_HPP_

#include "optrad/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "optrad/error.hpp"

namespace optrad {

json SelectionResult::to_json() const {
  json scores_json = json::array();
  for (double s : scores) scores_json.push_back(s);
  return {{"method", method},
          {"indices", indices},
          {"scores", scores_json},
          {"warnings", warnings}};
}

namespace {

void check_k(const Eigen::MatrixXd& X, int k) {
  if (X.rows() < 1 || X.cols() < 1) {
    throw ValidationError("selection", "empty feature matrix");
  }
  if (k < 1 || k > X.cols()) {
    throw ValidationError("selection", "k must lie in [1, " +
                                           std::to_string(X.cols()) + "], got " +
                                           std::to_string(k));
  }
  if (!X.allFinite()) throw ValidationError("selection", "non-finite input");
}

}  // namespace

SelectionResult cur_select(const Eigen::MatrixXd& X, int k) {
  check_k(X, k);
  SelectionResult res;
  res.method = "cur";
  Eigen::MatrixXd R = X;
  const double scale = X.norm();
  std::vector<bool> taken(static_cast<std::size_t>(X.cols()), false);
  for (int step = 0; step < k; ++step) {
    if (R.norm() <= 1e-12 * scale || scale == 0.0) {
      throw ValidationError("selection",
                            "residual vanished after " + std::to_string(step) +
                                " picks; achievable rank is " +
                                std::to_string(step));
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(R, Eigen::ComputeThinV);
    const Eigen::VectorXd v = svd.matrixV().col(0);
    int best = -1;
    double best_score = -1.0;
    for (Eigen::Index j = 0; j < R.cols(); ++j) {
      if (taken[static_cast<std::size_t>(j)]) continue;
      const double s = v[j] * v[j];
      if (s > best_score) {
        best_score = s;
        best = static_cast<int>(j);
      }
    }
    const Eigen::VectorXd col = R.col(best);
    const double cn = col.norm();
    if (cn <= 1e-12 * scale) {
      throw ValidationError("selection",
                            "residual vanished after " + std::to_string(step) +
                                " picks; achievable rank is " +
                                std::to_string(step));
    }
    const Eigen::VectorXd u = col / cn;
    R -= u * (u.transpose() * R);
    R.col(best).setZero();
    taken[static_cast<std::size_t>(best)] = true;
    res.indices.push_back(best);
    res.scores.push_back(best_score);
  }
  return res;
}

SelectionResult fps_select(const Eigen::MatrixXd& X, int k, int start) {
  check_k(X, k);
  if (start < 0 || start >= X.cols()) {
    throw ValidationError("selection", "start index out of range");
  }
  SelectionResult res;
  res.method = "fps";
  const auto d = X.cols();
  std::vector<bool> taken(static_cast<std::size_t>(d), false);
  Eigen::VectorXd mind(d);
  mind.setConstant(std::numeric_limits<double>::infinity());
  int pick = start;
  double score = 0.0;
  bool warned = false;
  for (int step = 0; step < k; ++step) {
    if (step > 0) {
      pick = -1;
      score = -1.0;
      for (Eigen::Index j = 0; j < d; ++j) {
        if (!taken[static_cast<std::size_t>(j)] && mind[j] > score) {
          score = mind[j];
          pick = static_cast<int>(j);
        }
      }
      if (score == 0.0 && !warned) {
        res.warnings.push_back(
            "duplicate columns exhausted distances after " +
            std::to_string(step) + " picks; remaining picks by lowest index");
        warned = true;
      }
    }
    taken[static_cast<std::size_t>(pick)] = true;
    res.indices.push_back(pick);
    res.scores.push_back(score);
    for (Eigen::Index j = 0; j < d; ++j) {
      mind[j] = std::min(mind[j], (X.col(j) - X.col(pick)).norm());
    }
  }
  return res;
}

std::vector<int> shuffled_indices(int n, std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  // explicit Fisher-Yates: std::shuffle's draw sequence is unspecified
  for (int i = n - 1; i > 0; --i) {
    const std::uint64_t bound = static_cast<std::uint64_t>(i) + 1;
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t r;
    do {
      r = rng();
    } while (r >= limit);
    std::swap(idx[static_cast<std::size_t>(i)],
              idx[static_cast<std::size_t>(r % bound)]);
  }
  return idx;
}

double gfre(const Eigen::MatrixXd& X_src, const Eigen::MatrixXd& X_dst,
            const GfreOptions& options) {
  if (X_src.rows() != X_dst.rows()) {
    throw ValidationError("selection", "source and destination row counts differ");
  }
  if (!(options.train_fraction > 0.0 && options.train_fraction < 1.0)) {
    throw ValidationError("selection", "train fraction must lie in (0, 1)");
  }
  if (!(options.ridge > 0.0)) {
    throw ValidationError("selection", "ridge must be > 0");
  }
  if (!X_src.allFinite() || !X_dst.allFinite()) {
    throw ValidationError("selection", "non-finite input");
  }
  const int n = static_cast<int>(X_src.rows());
  if (n < 2) throw ValidationError("selection", "GFRE needs at least 2 rows");
  int n_train = static_cast<int>(std::lround(options.train_fraction * n));
  n_train = std::clamp(n_train, 1, n - 1);
  const auto order = shuffled_indices(n, options.seed);
  auto gather = [&](const Eigen::MatrixXd& M, int begin, int end) {
    Eigen::MatrixXd out(end - begin, M.cols());
    for (int i = begin; i < end; ++i) {
      out.row(i - begin) = M.row(order[static_cast<std::size_t>(i)]);
    }
    return out;
  };
  Eigen::MatrixXd A_tr = gather(X_src, 0, n_train);
  Eigen::MatrixXd A_te = gather(X_src, n_train, n);
  Eigen::MatrixXd B_tr = gather(X_dst, 0, n_train);
  Eigen::MatrixXd B_te = gather(X_dst, n_train, n);

  // source: per-column standardization (the fit is invariant to it up to
  // the ridge); destination: column centering and one global scale, so
  // columns keep their relative weight
  for (Eigen::Index j = 0; j < A_tr.cols(); ++j) {
    const double mean = A_tr.col(j).mean();
    const double sd = std::sqrt((A_tr.col(j).array() - mean).square().mean());
    const double ref = std::max(1.0, A_tr.col(j).cwiseAbs().maxCoeff());
    A_tr.col(j).array() -= mean;
    A_te.col(j).array() -= mean;
    if (sd > 1e-12 * ref) {
      A_tr.col(j) /= sd;
      A_te.col(j) /= sd;
    }
  }
  const Eigen::RowVectorXd mean = B_tr.colwise().mean();
  Eigen::MatrixXd Y_tr = B_tr.rowwise() - mean;
  Eigen::MatrixXd Y_te = B_te.rowwise() - mean;
  const double scale = Y_tr.norm() / std::sqrt(static_cast<double>(n_train));
  const double ref = std::max(1.0, B_tr.cwiseAbs().maxCoeff());
  if (!(scale > 1e-12 * ref)) {
    throw ValidationError("selection",
                          "destination features have zero variance on the "
                          "training split");
  }
  Y_tr /= scale;
  Y_te /= scale;
  Eigen::MatrixXd G = A_tr.transpose() * A_tr;
  G.diagonal().array() += options.ridge * n_train;
  const Eigen::MatrixXd W = G.ldlt().solve(A_tr.transpose() * Y_tr);
  const double denom = Y_te.norm();
  if (denom == 0.0) {
    throw ValidationError("selection", "destination features vanish on the test split");
  }
  return (Y_te - A_te * W).norm() / denom;
}

}  // namespace optrad

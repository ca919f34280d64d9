#include "optrad/regression.hpp"

#include <cmath>

#include "optrad/error.hpp"
#include "optrad/selection.hpp"

namespace optrad {

std::string to_string(ModelKind kind) {
  return kind == ModelKind::Linear ? "linear" : "kernel_poly";
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "linear") return ModelKind::Linear;
  if (s == "kernel_poly") return ModelKind::KernelPoly;
  throw ValidationError("regression", "unknown model kind '" + s + "'");
}

Blob Model::to_blob() const {
  Blob b;
  b.header = {{"kind", "model"},
              {"model", to_string(kind)},
              {"lambda", lambda},
              {"zeta", zeta},
              {"intercept", intercept},
              {"pipeline_id", pipeline_id},
              {"target", target},
              {"metadata", metadata},
              {"weights", weights.size()},
              {"dual", dual.size()},
              {"support_rows", support.rows()},
              {"support_cols", support.cols()},
              {"support_group", support_group}};
  b.payload.assign(weights.data(), weights.data() + weights.size());
  b.payload.insert(b.payload.end(), dual.data(), dual.data() + dual.size());
  for (Eigen::Index i = 0; i < support.rows(); ++i) {
    for (Eigen::Index j = 0; j < support.cols(); ++j) {
      b.payload.push_back(support(i, j));
    }
  }
  return b;
}

Model Model::from_blob(const Blob& blob) {
  const auto& h = blob.header;
  if (h.value("kind", "") != "model") {
    throw ValidationError("regression", "blob is not a model");
  }
  Model m;
  m.kind = model_kind_from_string(h.at("model").get<std::string>());
  m.lambda = h.at("lambda").get<double>();
  m.zeta = h.at("zeta").get<int>();
  m.intercept = h.at("intercept").get<double>();
  m.pipeline_id = h.at("pipeline_id").get<std::string>();
  m.target = h.at("target").get<std::string>();
  m.metadata = h.value("metadata", json::object());
  const auto nw = h.at("weights").get<Eigen::Index>();
  const auto nd = h.at("dual").get<Eigen::Index>();
  const auto sr = h.at("support_rows").get<Eigen::Index>();
  const auto sc = h.at("support_cols").get<Eigen::Index>();
  m.support_group = h.at("support_group").get<std::vector<int>>();
  if (static_cast<Eigen::Index>(blob.payload.size()) != nw + nd + sr * sc ||
      static_cast<Eigen::Index>(m.support_group.size()) != sr) {
    throw ValidationError("regression", "model payload size mismatch");
  }
  const double* p = blob.payload.data();
  m.weights = Eigen::Map<const Eigen::VectorXd>(p, nw);
  m.dual = Eigen::Map<const Eigen::VectorXd>(p + nw, nd);
  m.support.resize(sr, sc);
  p += nw + nd;
  for (Eigen::Index i = 0; i < sr; ++i) {
    for (Eigen::Index j = 0; j < sc; ++j) m.support(i, j) = *p++;
  }
  return m;
}

Eigen::MatrixXd aggregate_structure_features(const Eigen::MatrixXd& env_features,
                                             const std::vector<int>& structure_of,
                                             int structure_count) {
  if (static_cast<Eigen::Index>(structure_of.size()) != env_features.rows()) {
    throw ValidationError("regression",
                          "every environment needs a structure index");
  }
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(structure_count, env_features.cols());
  for (std::size_t i = 0; i < structure_of.size(); ++i) {
    const int s = structure_of[i];
    if (s < 0 || s >= structure_count) {
      throw ValidationError("regression", "structure index out of range");
    }
    out.row(s) += env_features.row(static_cast<Eigen::Index>(i));
  }
  return out;
}

namespace {

void check_fit_inputs(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                      double lambda) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) {
    throw ValidationError("regression", "lambda must be a positive number");
  }
  if (X.rows() != y.size()) {
    throw ValidationError("regression", "feature rows and targets disagree");
  }
  if (X.rows() < 1) throw ValidationError("regression", "no training samples");
  if (!X.allFinite() || !y.allFinite()) {
    throw ValidationError("regression", "non-finite inputs");
  }
}

Eigen::VectorXd symmetric_solve(const Eigen::MatrixXd& A, const Eigen::MatrixXd& b) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  if (ldlt.info() != Eigen::Success) {
    throw RuntimeError("regression", "symmetric solve failed");
  }
  Eigen::VectorXd x = ldlt.solve(b);
  if (!x.allFinite()) throw RuntimeError("regression", "solution is not finite");
  return x;
}

Eigen::MatrixXd normalized_rows(const Eigen::MatrixXd& X) {
  Eigen::MatrixXd out = X;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double n = X.row(i).norm();
    if (!(n > 0.0)) {
      throw ValidationError("regression", "zero-norm feature row " +
                                              std::to_string(i));
    }
    out.row(i) /= n;
  }
  return out;
}

Eigen::MatrixXd raise(Eigen::MatrixXd K, int zeta) {
  if (zeta == 1) return K;
  const Eigen::ArrayXXd base = K.array();
  Eigen::ArrayXXd acc = base;
  for (int z = 1; z < zeta; ++z) acc *= base;
  return acc.matrix();
}

}  // namespace

Model ridge_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda,
                bool fit_intercept) {
  check_fit_inputs(X, y, lambda);
  Model m;
  m.kind = ModelKind::Linear;
  m.lambda = lambda;
  const auto n = static_cast<double>(X.rows());
  Eigen::RowVectorXd xmean = Eigen::RowVectorXd::Zero(X.cols());
  double ymean = 0.0;
  if (fit_intercept) {
    xmean = X.colwise().mean();
    ymean = y.mean();
  }
  const Eigen::MatrixXd Xc = X.rowwise() - xmean;
  const Eigen::VectorXd yc = y.array() - ymean;
  Eigen::MatrixXd A = Xc.transpose() * Xc;
  A.diagonal().array() += lambda * n;
  m.weights = symmetric_solve(A, Xc.transpose() * yc);
  m.intercept = fit_intercept ? ymean - xmean.dot(m.weights) : 0.0;
  return m;
}

Eigen::VectorXd ridge_predict(const Model& model, const Eigen::MatrixXd& X) {
  if (model.kind != ModelKind::Linear) {
    throw ValidationError("regression", "ridge_predict needs a linear model");
  }
  if (X.cols() != model.weights.size()) {
    throw ValidationError("regression", "feature count does not match the model");
  }
  return (X * model.weights).array() + model.intercept;
}

Eigen::MatrixXd poly_kernel(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                            int zeta) {
  if (zeta < 1) throw ValidationError("regression", "zeta must be >= 1");
  return raise(normalized_rows(A) * normalized_rows(B).transpose(), zeta);
}

Model krr_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int zeta,
              double lambda) {
  std::vector<int> group(static_cast<std::size_t>(X.rows()));
  for (std::size_t i = 0; i < group.size(); ++i) group[i] = static_cast<int>(i);
  return krr_fit(X, group, y, zeta, lambda);
}

namespace {

// K_AB summed over member rows; rows of Ka/Kb are normalized already
Eigen::MatrixXd grouped_kernel(const Eigen::MatrixXd& Xa, const std::vector<int>& ga,
                               int na, const Eigen::MatrixXd& Xb,
                               const std::vector<int>& gb, int nb, int zeta,
                               int workers) {
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(na, nb);
  std::vector<std::vector<Eigen::Index>> rows_a(static_cast<std::size_t>(na));
  for (std::size_t i = 0; i < ga.size(); ++i) {
    rows_a[static_cast<std::size_t>(ga[i])].push_back(static_cast<Eigen::Index>(i));
  }
  parallel_for(static_cast<std::size_t>(na), workers, [&](std::size_t A) {
    for (const auto i : rows_a[A]) {
      const Eigen::RowVectorXd k =
          raise(Xa.row(i) * Xb.transpose(), zeta);
      for (std::size_t j = 0; j < gb.size(); ++j) {
        K(static_cast<Eigen::Index>(A), gb[j]) += k[static_cast<Eigen::Index>(j)];
      }
    }
  });
  (void)nb;
  return K;
}

void check_groups(const std::vector<int>& group, Eigen::Index rows, int count) {
  if (static_cast<Eigen::Index>(group.size()) != rows) {
    throw ValidationError("regression", "one group index per feature row required");
  }
  std::vector<bool> seen(static_cast<std::size_t>(count), false);
  for (int g : group) {
    if (g < 0 || g >= count) {
      throw ValidationError("regression", "group index out of range");
    }
    seen[static_cast<std::size_t>(g)] = true;
  }
  for (bool s : seen) {
    if (!s) throw ValidationError("regression", "sample without feature rows");
  }
}

}  // namespace

Model krr_fit(const Eigen::MatrixXd& X, const std::vector<int>& group,
              const Eigen::VectorXd& y, int zeta, double lambda, int workers) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) {
    throw ValidationError("regression", "lambda must be a positive number");
  }
  if (zeta < 1) throw ValidationError("regression", "zeta must be >= 1");
  if (!X.allFinite() || !y.allFinite()) {
    throw ValidationError("regression", "non-finite inputs");
  }
  const int n = static_cast<int>(y.size());
  if (n < 1) throw ValidationError("regression", "no training samples");
  check_groups(group, X.rows(), n);
  Model m;
  m.kind = ModelKind::KernelPoly;
  m.zeta = zeta;
  m.lambda = lambda;
  m.support = normalized_rows(X);
  m.support_group = group;
  Eigen::MatrixXd K =
      grouped_kernel(m.support, group, n, m.support, group, n, zeta, workers);
  K = 0.5 * (K + K.transpose()).eval();
  K.diagonal().array() += lambda * n;
  m.dual = symmetric_solve(K, y);
  return m;
}

Eigen::VectorXd krr_predict(const Model& model, const Eigen::MatrixXd& X) {
  std::vector<int> group(static_cast<std::size_t>(X.rows()));
  for (std::size_t i = 0; i < group.size(); ++i) group[i] = static_cast<int>(i);
  return krr_predict(model, X, group, static_cast<int>(X.rows()));
}

Eigen::VectorXd krr_predict(const Model& model, const Eigen::MatrixXd& X,
                            const std::vector<int>& group, int group_count,
                            int workers) {
  if (model.kind != ModelKind::KernelPoly) {
    throw ValidationError("regression", "krr_predict needs a kernel model");
  }
  if (X.cols() != model.support.cols()) {
    throw ValidationError("regression", "feature count does not match the model");
  }
  check_groups(group, X.rows(), group_count);
  const Eigen::MatrixXd Xn = normalized_rows(X);
  const Eigen::MatrixXd K =
      grouped_kernel(Xn, group, group_count, model.support, model.support_group,
                     static_cast<int>(model.dual.size()), model.zeta, workers);
  return K * model.dual;
}

Eigen::MatrixXd structure_gradient_rows(const std::vector<FeatureGradients>& grads,
                                        int atom_count, Eigen::Index features) {
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(3 * atom_count, features);
  for (const auto& g : grads) {
    if (g.values.cols() != features) {
      throw ValidationError("regression", "gradient feature count mismatch");
    }
    for (std::size_t a = 0; a < g.atoms.size(); ++a) {
      const int atom = g.atoms[a];
      if (atom < 0 || atom >= atom_count) {
        throw ValidationError("regression", "gradient atom index out of range");
      }
      G.middleRows(3 * atom, 3) += g.values.middleRows(3 * static_cast<Eigen::Index>(a), 3);
    }
  }
  return G;
}

std::vector<Vec3> predict_forces(const Model& model, const Eigen::MatrixXd& G) {
  if (model.kind != ModelKind::Linear) {
    throw ValidationError("regression",
                          "force prediction is unsupported for kernel models");
  }
  if (G.cols() > model.weights.size() || G.rows() % 3 != 0) {
    throw ValidationError("regression", "gradient rows do not match the model");
  }
  const Eigen::VectorXd f = -(G * model.weights.head(G.cols()));
  std::vector<Vec3> out(static_cast<std::size_t>(G.rows() / 3));
  for (std::size_t a = 0; a < out.size(); ++a) {
    out[a] = f.segment<3>(3 * static_cast<Eigen::Index>(a));
  }
  return out;
}

Model joint_energy_force_fit(const Eigen::MatrixXd& X_E, const Eigen::VectorXd& y_E,
                             const Eigen::MatrixXd& G, const Eigen::VectorXd& y_F,
                             double lambda, double force_weight,
                             bool fit_intercept) {
  check_fit_inputs(X_E, y_E, lambda);
  if (G.rows() != y_F.size() || G.cols() > X_E.cols()) {
    throw ValidationError("regression", "force rows do not match the features");
  }
  if (!(force_weight >= 0.0) || !G.allFinite() || !y_F.allFinite()) {
    throw ValidationError("regression", "invalid force block");
  }
  Model m;
  m.kind = ModelKind::Linear;
  m.lambda = lambda;
  const auto n = static_cast<double>(X_E.rows());
  Eigen::RowVectorXd xmean = Eigen::RowVectorXd::Zero(X_E.cols());
  double ymean = 0.0;
  if (fit_intercept) {
    xmean = X_E.colwise().mean();
    ymean = y_E.mean();
  }
  const Eigen::MatrixXd Xc = X_E.rowwise() - xmean;
  const Eigen::VectorXd yc = y_E.array() - ymean;
  Eigen::MatrixXd A = Xc.transpose() * Xc;
  Eigen::VectorXd b = Xc.transpose() * yc;
  if (force_weight > 0.0 && G.rows() > 0) {
    const double w2 = force_weight * force_weight;
    const auto k = G.cols();
    // force rows are -G with targets y_F
    A.topLeftCorner(k, k).noalias() += w2 * (G.transpose() * G);
    b.head(k).noalias() -= w2 * (G.transpose() * y_F);
  }
  A.diagonal().array() += lambda * n;
  m.weights = symmetric_solve(A, b);
  m.intercept = fit_intercept ? ymean - xmean.dot(m.weights) : 0.0;
  return m;
}

std::vector<int> k_fold_assignment(int n, int k, std::uint64_t seed) {
  if (k < 2 || k > n) {
    throw ValidationError("regression", "fold count must lie in [2, samples]");
  }
  const auto order = shuffled_indices(n, seed);
  std::vector<int> fold(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) fold[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = i % k;
  return fold;
}

double rmse(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size() || a.size() == 0) {
    throw ValidationError("regression", "rmse needs equal non-empty vectors");
  }
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

double mae(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size() || a.size() == 0) {
    throw ValidationError("regression", "mae needs equal non-empty vectors");
  }
  return (a - b).cwiseAbs().mean();
}

}  // namespace optrad

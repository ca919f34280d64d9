#include "optrad/contraction.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <Eigen/Eigenvalues>

#include "optrad/error.hpp"

namespace optrad {

std::string to_string(SpeciesMode mode) {
  return mode == SpeciesMode::PerSpecies ? "per_species" : "combined";
}

std::string to_string(CenterMode mode) {
  return mode == CenterMode::Agnostic ? "center_agnostic"
                                      : "per_center_species";
}

SpeciesMode species_mode_from_string(const std::string& s) {
  if (s == "per_species") return SpeciesMode::PerSpecies;
  if (s == "combined") return SpeciesMode::Combined;
  throw ValidationError("contraction", "unknown species mode '" + s + "'");
}

CenterMode center_mode_from_string(const std::string& s) {
  if (s == "center_agnostic" || s == "agnostic") return CenterMode::Agnostic;
  if (s == "per_center_species" || s == "per_center") {
    return CenterMode::PerCenterSpecies;
  }
  throw ValidationError("contraction", "unknown center mode '" + s + "'");
}

namespace {

std::vector<int> block_rows(const std::vector<ChannelLabel>& all,
                            const std::vector<ChannelLabel>& inputs) {
  std::vector<int> rows;
  rows.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = std::find(all.begin(), all.end(), in);
    rows.push_back(static_cast<int>(it - all.begin()));
  }
  return rows;
}

}  // namespace

CovarianceAccumulator::CovarianceAccumulator(SpeciesMode species_mode,
                                             CenterMode center_mode) {
  sums_.species_mode = species_mode;
  sums_.center_mode = center_mode;
}

void CovarianceAccumulator::add(const DensityCoeffs& coeffs) {
  if (!initialized_) {
    sums_.basis_id = coeffs.basis_id;
    std::set<int> species;
    for (const auto& per_l : coeffs.channels)
      for (const auto& c : per_l) species.insert(c.species);
    sums_.species.assign(species.begin(), species.end());
    initialized_ = true;
  } else if (coeffs.basis_id != sums_.basis_id) {
    throw ValidationError("contraction",
                          "covariance inputs use different bases ('" +
                              coeffs.basis_id + "' vs '" + sums_.basis_id +
                              "')");
  }
  const int center = sums_.center_mode == CenterMode::Agnostic
                         ? -1
                         : coeffs.center_species;
  sums_.sample_count[center] += 1;
  for (int l = 0; l <= coeffs.lmax(); ++l) {
    const auto& labels = coeffs.channels[static_cast<std::size_t>(l)];
    const auto& vals = coeffs.values[static_cast<std::size_t>(l)];
    std::vector<int> keys_species;
    if (sums_.species_mode == SpeciesMode::Combined) {
      keys_species.push_back(-1);
    } else {
      keys_species = sums_.species;
    }
    for (int a : keys_species) {
      const BlockKey key{center, a, l};
      auto in_it = sums_.inputs.find(key);
      if (in_it == sums_.inputs.end()) {
        std::vector<ChannelLabel> inputs;
        for (const auto& c : labels) {
          if (a == -1 || c.species == a) inputs.push_back(c);
        }
        in_it = sums_.inputs.emplace(key, inputs).first;
        const auto d = static_cast<Eigen::Index>(inputs.size());
        sums_.matrices[key] = Eigen::MatrixXd::Zero(d, d);
        // imaginary parts are summed under l' = -1 - l; they must cancel
        sums_.matrices[BlockKey{center, a, -1 - l}] =
            Eigen::MatrixXd::Zero(d, d);
      }
      const auto rows = block_rows(labels, in_it->second);
      Eigen::MatrixXcd sub(static_cast<Eigen::Index>(rows.size()), vals.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= static_cast<int>(labels.size())) {
          throw ValidationError("contraction",
                                "covariance inputs have inconsistent channels");
        }
        sub.row(static_cast<Eigen::Index>(r)) = vals.row(rows[r]);
      }
      const Eigen::MatrixXcd outer = sub * sub.adjoint();
      sums_.matrices[key] += outer.real();
      sums_.matrices[BlockKey{center, a, -1 - l}] += outer.imag();
    }
  }
}

void CovarianceAccumulator::merge(const CovarianceAccumulator& other) {
  if (!other.initialized_) return;
  if (!initialized_) {
    *this = other;
    return;
  }
  if (other.sums_.basis_id != sums_.basis_id ||
      other.sums_.species_mode != sums_.species_mode ||
      other.sums_.center_mode != sums_.center_mode) {
    throw ValidationError("contraction", "cannot merge incompatible covariances");
  }
  for (const auto& [key, m] : other.sums_.matrices) {
    auto it = sums_.matrices.find(key);
    if (it == sums_.matrices.end()) {
      sums_.matrices[key] = m;
    } else {
      it->second += m;
    }
  }
  for (const auto& [key, in] : other.sums_.inputs) sums_.inputs[key] = in;
  for (const auto& [c, n] : other.sums_.sample_count) {
    sums_.sample_count[c] += n;
  }
}

CovarianceSet CovarianceAccumulator::finalize() const {
  if (!initialized_) {
    throw ValidationError("contraction", "covariance of an empty dataset");
  }
  CovarianceSet out;
  out.species_mode = sums_.species_mode;
  out.center_mode = sums_.center_mode;
  out.basis_id = sums_.basis_id;
  out.species = sums_.species;
  out.sample_count = sums_.sample_count;
  out.inputs = sums_.inputs;
  for (const auto& [key, m] : sums_.matrices) {
    if (key.l < 0) continue;
    const double n =
        static_cast<double>(sums_.sample_count.at(key.center));
    Eigen::MatrixXd c = m / n;
    const Eigen::MatrixXd& im =
        sums_.matrices.at(BlockKey{key.center, key.species, -1 - key.l});
    const double scale = std::max(c.cwiseAbs().maxCoeff(), 1e-300);
    if ((im / n).cwiseAbs().maxCoeff() > 1e-10 * std::max(scale, 1.0)) {
      throw RuntimeError("contraction",
                         "covariance has a non-negligible imaginary part; "
                         "coefficients violate conjugation symmetry");
    }
    out.matrices[key] = 0.5 * (c + c.transpose());
  }
  return out;
}

CovarianceSet covariance(const std::vector<DensityCoeffs>& coeffs,
                         SpeciesMode species_mode, CenterMode center_mode) {
  if (coeffs.empty()) {
    throw ValidationError("contraction", "covariance of an empty dataset");
  }
  CovarianceAccumulator acc(species_mode, center_mode);
  for (const auto& c : coeffs) acc.add(c);
  return acc.finalize();
}

std::vector<int> ContractionMap::centers() const {
  std::set<int> c;
  for (const auto& [key, b] : blocks) c.insert(key.center);
  return {c.begin(), c.end()};
}

void sorted_eigensystem(const Eigen::MatrixXd& C, Eigen::VectorXd& values,
                        Eigen::MatrixXd& vectors) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  if (es.info() != Eigen::Success) {
    throw RuntimeError("contraction", "eigendecomposition failed");
  }
  const auto d = C.rows();
  values.resize(d);
  vectors.resize(d, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    values[k] = es.eigenvalues()[d - 1 - k];
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - k);
    Eigen::Index imax = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < d; ++i) {
      if (std::abs(v[i]) > best) {
        best = std::abs(v[i]);
        imax = i;
      }
    }
    if (v[imax] < 0) v = -v;
    vectors.col(k) = v;
  }
}

ContractionMap pca_contraction(const CovarianceSet& cov, int qmax) {
  if (qmax < 1) throw ValidationError("contraction", "qmax must be >= 1");
  ContractionMap map;
  map.species_mode = cov.species_mode;
  map.center_mode = cov.center_mode;
  map.method = "pca";
  map.source_basis_id = cov.basis_id;
  map.species = cov.species;
  int lmax = 0;
  for (const auto& [key, C] : cov.matrices) {
    if (qmax > C.rows()) {
      throw ValidationError("contraction",
                            "qmax=" + std::to_string(qmax) +
                                " exceeds block dimension " +
                                std::to_string(C.rows()));
    }
    ContractionBlock block;
    block.inputs = cov.inputs.at(key);
    Eigen::MatrixXd vecs;
    sorted_eigensystem(C, block.eigenvalues, vecs);
    block.U = vecs.leftCols(qmax).transpose();
    map.blocks[key] = std::move(block);
    lmax = std::max(lmax, key.l);
  }
  map.lmax = lmax;
  return map;
}

std::vector<std::pair<BlockKey, ChannelLabel>> l0_columns(
    const CovarianceSet& cov) {
  std::vector<std::pair<BlockKey, ChannelLabel>> cols;
  for (const auto& [key, inputs] : cov.inputs) {
    if (key.l != 0) continue;
    for (const auto& c : inputs) cols.emplace_back(key, c);
  }
  return cols;
}

ContractionMap pcovr_contraction(const CovarianceSet& cov,
                                 const Eigen::MatrixXd& X,
                                 const Eigen::VectorXd& y, double alpha,
                                 double ridge, int qmax) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ValidationError("contraction", "PCovR alpha must be in [0, 1]");
  }
  if (!(ridge > 0.0)) {
    throw ValidationError("contraction", "PCovR ridge must be > 0");
  }
  if (cov.center_mode != CenterMode::Agnostic) {
    throw ValidationError("contraction",
                          "PCovR supports center-agnostic contractions only");
  }
  if (X.rows() != y.size() || X.rows() == 0) {
    throw ValidationError("contraction", "PCovR needs one target per row of X");
  }
  const auto columns = l0_columns(cov);
  if (static_cast<std::size_t>(X.cols()) != columns.size()) {
    throw ValidationError("contraction",
                          "X must have one column per l=0 input channel");
  }
  if (alpha < 1.0 && (y.array() == y[0]).all()) {
    throw ValidationError("contraction",
                          "constant targets carry no regression signal");
  }
  auto map = pca_contraction(cov, qmax);
  map.method = "pcovr";
  const double N = static_cast<double>(X.rows());
  Eigen::Index offset = 0;
  for (auto& [key, block] : map.blocks) {
    if (key.l != 0) continue;
    const auto d = static_cast<Eigen::Index>(block.inputs.size());
    const Eigen::MatrixXd Xb = X.middleCols(offset, d);
    offset += d;
    const Eigen::MatrixXd& C = cov.matrices.at(key);
    const double tr_norm = C.trace();
    if (!(tr_norm > 0.0)) {
      throw ValidationError("contraction", "PCovR block has zero variance");
    }
    Eigen::MatrixXd mixed = alpha * C / tr_norm;
    if (alpha < 1.0) {
      const Eigen::MatrixXd A =
          Xb.transpose() * Xb + ridge * N * Eigen::MatrixXd::Identity(d, d);
      const Eigen::VectorXd w = A.ldlt().solve(Xb.transpose() * y);
      const double wn = w.squaredNorm();
      if (!(wn > 0.0)) {
        throw ValidationError("contraction",
                              "ridge weights vanish; no regression signal");
      }
      mixed += (1.0 - alpha) * (w * w.transpose()) / wn;
    }
    Eigen::MatrixXd vecs;
    sorted_eigensystem(mixed, block.eigenvalues, vecs);
    block.U = vecs.leftCols(qmax).transpose();
  }
  return map;
}

ExplainedVariance explained_variance(const ContractionMap& map, int q) {
  ExplainedVariance ev;
  double kept = 0.0, total = 0.0;
  for (const auto& [key, block] : map.blocks) {
    const auto& lam = block.eigenvalues;
    const auto k = std::min<Eigen::Index>(std::max(q, 0), lam.size());
    const double t = lam.sum();
    const double top = lam.head(k).sum();
    ev.per_block[key] = t > 0.0 ? top / t : 1.0;
    kept += top;
    total += t;
  }
  ev.overall = total > 0.0 ? kept / total : 1.0;
  return ev;
}

namespace {

int count_for_fraction(std::vector<double> lam, double fraction) {
  std::sort(lam.begin(), lam.end(), std::greater<>());
  const double total = std::accumulate(lam.begin(), lam.end(), 0.0);
  if (total <= 0.0) return 0;
  double acc = 0.0;
  for (std::size_t k = 0; k < lam.size(); ++k) {
    acc += lam[k];
    if (acc >= fraction * total) return static_cast<int>(k + 1);
  }
  return static_cast<int>(lam.size());
}

}  // namespace

int channels_for_variance(const ContractionMap& map, double fraction) {
  int total = 0;
  for (int center : map.centers()) {
    for (int l = 0; l <= map.lmax; ++l) {
      std::vector<double> lam;
      for (const auto& [key, block] : map.blocks) {
        if (key.center != center || key.l != l) continue;
        for (Eigen::Index k = 0; k < block.eigenvalues.size(); ++k) {
          lam.push_back(block.eigenvalues[k]);
        }
      }
      total += count_for_fraction(lam, fraction);
    }
  }
  return total;
}

int primitive_channels_for_variance(const CovarianceSet& cov, int nmax,
                                    double fraction) {
  std::set<int> centers, ls;
  for (const auto& [key, m] : cov.matrices) {
    centers.insert(key.center);
    ls.insert(key.l);
  }
  const int nspecies = static_cast<int>(cov.species.size());
  int total = 0;
  for (int center : centers) {
    for (int l : ls) {
      std::vector<double> per_n(static_cast<std::size_t>(nmax), 0.0);
      for (const auto& [key, m] : cov.matrices) {
        if (key.center != center || key.l != l) continue;
        const auto& inputs = cov.inputs.at(key);
        for (std::size_t c = 0; c < inputs.size(); ++c) {
          per_n[static_cast<std::size_t>(inputs[c].index)] +=
              m(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
        }
      }
      const double sum = std::accumulate(per_n.begin(), per_n.end(), 0.0);
      int needed = nmax;
      double acc = 0.0;
      for (int n = 0; n < nmax; ++n) {
        acc += per_n[static_cast<std::size_t>(n)];
        if (sum <= 0.0 || acc >= fraction * sum) {
          needed = sum <= 0.0 ? 0 : n + 1;
          break;
        }
      }
      total += needed * nspecies;
    }
  }
  return total;
}

OptimalBasisValues optimal_basis_values(const ContractionMap& map,
                                        const PrimitiveBasis& basis,
                                        const Eigen::VectorXd& grid) {
  OptimalBasisValues out;
  const int nmax = basis.size();
  Eigen::MatrixXd prim(grid.size(), nmax);
  Eigen::VectorXd v(nmax);
  for (Eigen::Index i = 0; i < grid.size(); ++i) {
    basis.evaluate(grid[i], v);
    prim.row(i) = v.transpose();
  }
  std::vector<Eigen::VectorXd> columns;
  for (const auto& [key, block] : map.blocks) {
    std::set<int> species;
    for (const auto& c : block.inputs) species.insert(c.species);
    for (int z : species) {
      for (Eigen::Index q = 0; q < block.U.rows(); ++q) {
        Eigen::VectorXd coef = Eigen::VectorXd::Zero(nmax);
        for (std::size_t c = 0; c < block.inputs.size(); ++c) {
          if (block.inputs[c].species != z) continue;
          const int n = block.inputs[c].index;
          if (n >= nmax) {
            throw ValidationError("contraction",
                                  "map input exceeds primitive basis size");
          }
          coef[n] = block.U(q, static_cast<Eigen::Index>(c));
        }
        out.keys.emplace_back(key, z, static_cast<int>(q));
        columns.push_back(prim * coef);
      }
    }
  }
  out.values.resize(grid.size(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t k = 0; k < columns.size(); ++k) {
    out.values.col(static_cast<Eigen::Index>(k)) = columns[k];
  }
  return out;
}

Blob ContractionMap::to_blob() const {
  Blob blob;
  auto& h = blob.header;
  h["kind"] = "contraction_map";
  h["species_mode"] = to_string(species_mode);
  h["center_mode"] = to_string(center_mode);
  h["method"] = method;
  h["source_basis_id"] = source_basis_id;
  h["lmax"] = lmax;
  h["species"] = species;
  json blocks_json = json::array();
  for (const auto& [key, block] : blocks) {
    json b;
    b["center"] = key.center;
    b["species"] = key.species;
    b["l"] = key.l;
    json inputs = json::array();
    for (const auto& c : block.inputs) inputs.push_back({c.species, c.index});
    b["inputs"] = inputs;
    b["qmax"] = block.U.rows();
    b["eigenvalues"] = std::vector<double>(
        block.eigenvalues.data(),
        block.eigenvalues.data() + block.eigenvalues.size());
    blocks_json.push_back(b);
    for (Eigen::Index q = 0; q < block.U.rows(); ++q)
      for (Eigen::Index c = 0; c < block.U.cols(); ++c)
        blob.payload.push_back(block.U(q, c));
  }
  h["blocks"] = blocks_json;
  return blob;
}

ContractionMap ContractionMap::from_blob(const Blob& blob) {
  ContractionMap map;
  const auto& h = blob.header;
  std::size_t pos = 0;
  try {
    if (h.at("kind") != "contraction_map") {
      throw ValidationError("contraction", "blob is not a contraction map");
    }
    map.species_mode = species_mode_from_string(h.at("species_mode"));
    map.center_mode = center_mode_from_string(h.at("center_mode"));
    map.method = h.at("method").get<std::string>();
    map.source_basis_id = h.at("source_basis_id").get<std::string>();
    map.lmax = h.at("lmax").get<int>();
    map.species = h.at("species").get<std::vector<int>>();
    for (const auto& b : h.at("blocks")) {
      BlockKey key{b.at("center").get<int>(), b.at("species").get<int>(),
                   b.at("l").get<int>()};
      ContractionBlock block;
      for (const auto& c : b.at("inputs")) {
        block.inputs.push_back({c.at(0).get<int>(), c.at(1).get<int>()});
      }
      const auto ev = b.at("eigenvalues").get<std::vector<double>>();
      block.eigenvalues =
          Eigen::Map<const Eigen::VectorXd>(ev.data(),
                                            static_cast<Eigen::Index>(ev.size()));
      const auto qmax = b.at("qmax").get<Eigen::Index>();
      const auto d = static_cast<Eigen::Index>(block.inputs.size());
      if (pos + static_cast<std::size_t>(qmax * d) > blob.payload.size()) {
        throw ValidationError("contraction", "contraction payload too short");
      }
      block.U.resize(qmax, d);
      for (Eigen::Index q = 0; q < qmax; ++q)
        for (Eigen::Index c = 0; c < d; ++c) block.U(q, c) = blob.payload[pos++];
      map.blocks[key] = std::move(block);
    }
  } catch (const json::exception& e) {
    throw ValidationError("contraction",
                          std::string("bad contraction header: ") + e.what());
  }
  if (pos != blob.payload.size()) {
    throw ValidationError("contraction", "contraction payload size mismatch");
  }
  return map;
}

}  // namespace optrad

#include "optrad/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "optrad/datasets.hpp"
#include "optrad/density.hpp"
#include "optrad/error.hpp"
#include "optrad/regression.hpp"
#include "optrad/selection.hpp"
#include "optrad/structures.hpp"

namespace optrad {

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------- config

void check_keys(const json& j, const std::set<std::string>& known,
                const std::string& where) {
  if (!j.is_object()) {
    throw ValidationError("cli", (where.empty() ? "config" : where) +
                                     " must be a JSON object");
  }
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) {
      throw ValidationError("cli", "unknown config key '" +
                                       (where.empty() ? k : where + "." + k) + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError("cli", "bad value for '" + where + "." + key +
                                     "': " + e.what());
  }
}

std::optional<std::uint64_t> read_seed(const json& j, const char* key,
                                       const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    throw ValidationError("cli", "'" + where + key +
                                     "' must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

}  // namespace

JobConfig parse_job_config(const json& j) {
  JobConfig c;
  check_keys(j, {"seed", "workers", "output_dir", "inputs", "basis", "spline",
                 "contraction", "features", "selection", "gfre", "model",
                 "check"},
             "");
  if (auto s = read_seed(j, "seed", "")) c.seed = *s;
  read(j, "workers", c.workers, "");
  read(j, "output_dir", c.output_dir, "");
  if (j.contains("inputs")) {
    const auto& s = j.at("inputs");
    check_keys(s, {"train", "test", "basis_dir", "model_dir", "features",
                   "source_features", "target_features"},
               "inputs");
    read(s, "train", c.inputs.train, "inputs");
    read(s, "test", c.inputs.test, "inputs");
    read(s, "basis_dir", c.inputs.basis_dir, "inputs");
    read(s, "model_dir", c.inputs.model_dir, "inputs");
    read(s, "features", c.inputs.features, "inputs");
    read(s, "source_features", c.inputs.source_features, "inputs");
    read(s, "target_features", c.inputs.target_features, "inputs");
  }
  if (j.contains("basis")) c.basis = basis_spec_from_json(j.at("basis"));
  if (j.contains("spline")) {
    const auto& s = j.at("spline");
    check_keys(s, {"grid_points"}, "spline");
    read(s, "grid_points", c.grid_points, "spline");
  }
  if (j.contains("contraction")) {
    const auto& s = j.at("contraction");
    check_keys(s, {"method", "species_mode", "center_mode", "qmax", "alpha",
                   "ridge"},
               "contraction");
    read(s, "method", c.contraction.method, "contraction");
    std::string mode;
    read(s, "species_mode", mode, "contraction");
    if (!mode.empty()) c.contraction.species_mode = species_mode_from_string(mode);
    mode.clear();
    read(s, "center_mode", mode, "contraction");
    if (!mode.empty()) c.contraction.center_mode = center_mode_from_string(mode);
    read(s, "qmax", c.contraction.qmax, "contraction");
    read(s, "alpha", c.contraction.alpha, "contraction");
    read(s, "ridge", c.contraction.ridge, "contraction");
  }
  if (j.contains("features")) {
    const auto& s = j.at("features");
    check_keys(s, {"kind", "nu_max", "lambda_max", "n_keep", "lmax_coupling"},
               "features");
    read(s, "kind", c.features.kind, "features");
    read(s, "nu_max", c.features.nice.nu_max, "features");
    read(s, "lambda_max", c.features.nice.lambda_max, "features");
    read(s, "n_keep", c.features.nice.n_keep, "features");
    read(s, "lmax_coupling", c.features.nice.lmax_coupling, "features");
  }
  if (j.contains("selection")) {
    const auto& s = j.at("selection");
    check_keys(s, {"method", "k", "start", "order"}, "selection");
    read(s, "method", c.selection.method, "selection");
    read(s, "k", c.selection.k, "selection");
    read(s, "start", c.selection.start, "selection");
    read(s, "order", c.selection.order, "selection");
  }
  if (j.contains("gfre")) {
    const auto& s = j.at("gfre");
    check_keys(s, {"mode", "train_fraction", "ridge", "seed", "qmax_values",
                   "reference_nmax"},
               "gfre");
    read(s, "mode", c.gfre.mode, "gfre");
    read(s, "train_fraction", c.gfre.train_fraction, "gfre");
    read(s, "ridge", c.gfre.ridge, "gfre");
    c.gfre.seed = read_seed(s, "seed", "gfre.");
    read(s, "qmax_values", c.gfre.qmax_values, "gfre");
    read(s, "reference_nmax", c.gfre.reference_nmax, "gfre");
  }
  if (j.contains("model")) {
    const auto& s = j.at("model");
    check_keys(s, {"kind", "lambda", "zeta", "order", "use_forces",
                   "force_weight", "baseline", "folds", "fold_seed", "target"},
               "model");
    read(s, "kind", c.model.kind, "model");
    read(s, "lambda", c.model.lambda, "model");
    read(s, "zeta", c.model.zeta, "model");
    read(s, "order", c.model.order, "model");
    read(s, "use_forces", c.model.use_forces, "model");
    read(s, "force_weight", c.model.force_weight, "model");
    read(s, "baseline", c.model.baseline, "model");
    read(s, "folds", c.model.folds, "model");
    c.model.fold_seed = read_seed(s, "fold_seed", "model.");
    read(s, "target", c.model.target, "model");
  }
  if (j.contains("check")) {
    const auto& s = j.at("check");
    check_keys(s, {"table", "probes", "environments"}, "check");
    read(s, "table", c.check.table, "check");
    read(s, "probes", c.check.probes, "check");
    read(s, "environments", c.check.environments, "check");
  }
  c.validate();
  return c;
}

void JobConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("cli", m); };
  if (workers < 0) fail("workers must be >= 0");
  if (output_dir.empty()) fail("output_dir must not be empty");
  basis.validate();
  if (grid_points < 4) fail("spline.grid_points must be >= 4");
  const auto& m = contraction.method;
  if (m != "none" && m != "pca" && m != "pcovr") {
    fail("contraction.method must be none, pca or pcovr");
  }
  if (contraction.qmax < 1) fail("contraction.qmax must be >= 1");
  if (!(contraction.alpha >= 0.0 && contraction.alpha <= 1.0)) {
    fail("contraction.alpha must lie in [0, 1]");
  }
  if (!(contraction.ridge > 0.0)) fail("contraction.ridge must be > 0");
  if (features.kind != "soap" && features.kind != "nice") {
    fail("features.kind must be soap or nice");
  }
  features.nice.validate();
  if (features.kind == "soap" && features.nice.nu_max > 2) {
    fail("soap features stop at nu_max = 2; use kind nice for higher orders");
  }
  if (selection.method != "cur" && selection.method != "fps") {
    fail("selection.method must be cur or fps");
  }
  if (selection.k < 1) fail("selection.k must be >= 1");
  if (selection.order < 1) fail("selection.order must be >= 1");
  if (gfre.mode != "pair" && gfre.mode != "curve") {
    fail("gfre.mode must be pair or curve");
  }
  if (!(gfre.train_fraction > 0.0 && gfre.train_fraction < 1.0)) {
    fail("gfre.train_fraction must lie in (0, 1)");
  }
  if (!(gfre.ridge > 0.0)) fail("gfre.ridge must be > 0");
  if (gfre.qmax_values.empty()) fail("gfre.qmax_values must not be empty");
  for (int q : gfre.qmax_values) {
    if (q < 1) fail("gfre.qmax_values must be >= 1");
  }
  if (gfre.reference_nmax < 1) fail("gfre.reference_nmax must be >= 1");
  if (model.kind != "linear" && model.kind != "kernel_poly") {
    fail("model.kind must be linear or kernel_poly");
  }
  if (!(model.lambda > 0.0)) fail("model.lambda must be > 0");
  if (model.zeta < 1) fail("model.zeta must be >= 1");
  if (model.order == 0 || model.order < -1 || model.order > features.nice.nu_max) {
    fail("model.order must be -1 or lie in [1, features.nu_max]");
  }
  if (!(model.force_weight >= 0.0)) fail("model.force_weight must be >= 0");
  if (model.folds < 2) fail("model.folds must be >= 2");
  if (model.target != "per_structure" && model.target != "per_atom") {
    fail("model.target must be per_structure or per_atom");
  }
  if (model.target == "per_atom" && model.kind != "linear") {
    fail("per_atom targets are supported for linear models only");
  }
  if (check.probes < 1) fail("check.probes must be >= 1");
  if (check.environments < 1) fail("check.environments must be >= 1");
}

std::string JobConfig::basis_dir() const {
  return inputs.basis_dir.empty() ? output_dir : inputs.basis_dir;
}

std::string JobConfig::model_dir() const {
  return inputs.model_dir.empty() ? output_dir : inputs.model_dir;
}

json effective_config(const JobConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["output_dir"] = c.output_dir;
  j["inputs"] = {{"train", c.inputs.train},
                 {"test", c.inputs.test},
                 {"basis_dir", c.inputs.basis_dir},
                 {"model_dir", c.inputs.model_dir},
                 {"features", c.inputs.features},
                 {"source_features", c.inputs.source_features},
                 {"target_features", c.inputs.target_features}};
  j["basis"] = to_json(c.basis);
  j["spline"] = {{"grid_points", c.grid_points}};
  j["contraction"] = {{"method", c.contraction.method},
                      {"species_mode", to_string(c.contraction.species_mode)},
                      {"center_mode", to_string(c.contraction.center_mode)},
                      {"qmax", c.contraction.qmax},
                      {"alpha", c.contraction.alpha},
                      {"ridge", c.contraction.ridge}};
  j["features"] = to_json(c.features.nice);
  j["features"]["kind"] = c.features.kind;
  j["selection"] = {{"method", c.selection.method},
                    {"k", c.selection.k},
                    {"start", c.selection.start},
                    {"order", c.selection.order}};
  j["gfre"] = {{"mode", c.gfre.mode},
               {"train_fraction", c.gfre.train_fraction},
               {"ridge", c.gfre.ridge},
               {"seed", c.gfre_seed()},
               {"qmax_values", c.gfre.qmax_values},
               {"reference_nmax", c.gfre.reference_nmax}};
  j["model"] = {{"kind", c.model.kind},
                {"lambda", c.model.lambda},
                {"zeta", c.model.zeta},
                {"order", c.model.order},
                {"use_forces", c.model.use_forces},
                {"force_weight", c.model.force_weight},
                {"baseline", c.model.baseline},
                {"folds", c.model.folds},
                {"fold_seed", c.fold_seed()},
                {"target", c.model.target}};
  j["check"] = {{"table", c.check.table},
                {"probes", c.check.probes},
                {"environments", c.check.environments}};
  return j;
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {
      "fit-basis", "compute-features", "select", "gfre",
      "train",     "predict",          "check"};
  return names;
}

namespace {

// ------------------------------------------------------------------ files

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw RuntimeError("cli", "cannot create output directory '" + dir +
                                  "': " + ec.message());
  }
}

void write_json(const std::string& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

json read_json_file(const std::string& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("cli", "malformed JSON in '" + path + "': " + e.what());
  }
}

std::string num(double v) { return format_double(v); }

class Csv {
 public:
  explicit Csv(const std::vector<std::string>& header) { row(header); }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }
  void write(const std::string& path) const { write_text_file(path, out_.str()); }

 private:
  std::ostringstream out_;
};

// ------------------------------------------------------------------- data

struct Dataset {
  std::vector<Structure> structures;
  std::vector<Environment> envs;
  std::vector<int> structure_of;
};

Dataset make_dataset(std::vector<Structure> structures, double rcut) {
  Dataset d;
  d.structures = std::move(structures);
  for (std::size_t s = 0; s < d.structures.size(); ++s) {
    auto envs = neighbor_list(d.structures[s], rcut, s);
    for (auto& e : envs) {
      d.envs.push_back(std::move(e));
      d.structure_of.push_back(static_cast<int>(s));
    }
  }
  return d;
}

Dataset load_dataset(const std::string& path, double rcut, const std::string& role) {
  if (path.empty()) {
    throw ValidationError("cli", "inputs." + role + " is required for this command");
  }
  auto frames = read_extxyz(path);
  if (frames.empty()) throw ValidationError("cli", "'" + path + "' holds no frames");
  return make_dataset(std::move(frames), rcut);
}

std::vector<int> dataset_species(const Dataset& d) {
  std::set<int> s;
  for (const auto& st : d.structures) s.insert(st.species.begin(), st.species.end());
  return {s.begin(), s.end()};
}

/// Radial tables keyed by center species (-1 = shared by all centers).
struct TableSet {
  std::map<int, RadialTable> tables;

  const RadialTable& for_center(int z) const {
    auto it = tables.find(-1);
    if (it != tables.end()) return it->second;
    it = tables.find(z);
    if (it == tables.end()) {
      throw ValidationError("cli", "no radial table for center species " +
                                       element_symbol(z));
    }
    return it->second;
  }
  const RadialTable& any() const { return tables.begin()->second; }
  std::string basis_id() const {
    std::string id;
    for (const auto& [z, t] : tables) {
      if (!id.empty()) id += ";";
      id += t.basis_id();
      if (z >= 0) id += "@" + std::to_string(z);
    }
    return id;
  }
};

std::string table_file(int center) {
  return center < 0 ? "table.bin" : "table_" + std::to_string(center) + ".bin";
}

void save_tables(const std::string& dir, const TableSet& ts) {
  json centers = json::array();
  for (const auto& [z, t] : ts.tables) {
    write_blob(join(dir, table_file(z)), t.to_blob());
    centers.push_back(z);
  }
  write_json(join(dir, "tables.json"), {{"centers", centers}});
}

TableSet load_tables(const std::string& dir) {
  const auto index = join(dir, "tables.json");
  if (!fs::exists(index)) {
    throw ValidationError("cli", "no basis artifacts in '" + dir +
                                     "'; run fit-basis first");
  }
  TableSet ts;
  const auto j = read_json_file(index);
  for (const auto& z : j.at("centers")) {
    const int c = z.get<int>();
    ts.tables.emplace(c, RadialTable::from_blob(read_blob(join(dir, table_file(c)))));
  }
  if (ts.tables.empty()) throw ValidationError("cli", "empty table index");
  return ts;
}

std::vector<DensityCoeffs> coefficients(const Dataset& d, const TableSet& ts,
                                        int workers) {
  std::vector<DensityCoeffs> out(d.envs.size());
  parallel_for(d.envs.size(), workers, [&](std::size_t i) {
    out[i] = density_coeffs(d.envs[i], ts.for_center(d.envs[i].center_species));
    out[i].env_id = i;
  });
  return out;
}

std::vector<CoeffGradients> coefficient_gradients(const Dataset& d,
                                                  const TableSet& ts, int workers) {
  std::vector<CoeffGradients> out(d.envs.size());
  parallel_for(d.envs.size(), workers, [&](std::size_t i) {
    out[i] = density_coeff_gradients(d.envs[i],
                                     ts.for_center(d.envs[i].center_species));
    out[i].env_id = i;
  });
  return out;
}

/// Fixed chunking keeps the summation order independent of worker count.
CovarianceSet chunked_covariance(const std::vector<DensityCoeffs>& coeffs,
                                 SpeciesMode sm, CenterMode cm, int workers) {
  if (coeffs.empty()) throw ValidationError("cli", "dataset has no environments");
  const std::size_t n = coeffs.size();
  const std::size_t chunks = std::min<std::size_t>(64, n);
  std::vector<CovarianceAccumulator> acc(chunks, CovarianceAccumulator(sm, cm));
  parallel_for(chunks, workers, [&](std::size_t k) {
    for (std::size_t i = k * n / chunks; i < (k + 1) * n / chunks; ++i) {
      acc[k].add(coeffs[i]);
    }
  });
  for (std::size_t k = 1; k < chunks; ++k) acc[0].merge(acc[k]);
  return acc[0].finalize();
}

InvariantFeatures soap_features(const std::vector<DensityCoeffs>& coeffs, int order,
                                int workers) {
  if (coeffs.empty()) throw ValidationError("cli", "dataset has no environments");
  if (order < 1 || order > 2) {
    throw ValidationError("cli", "soap features exist for orders 1 and 2 only");
  }
  InvariantFeatures f;
  f.order = order;
  f.basis_id = coeffs.front().basis_id;
  f.labels = order == 1 ? radial_spectrum_labels(coeffs.front())
                        : powerspectrum_labels(coeffs.front());
  f.values.resize(static_cast<Eigen::Index>(coeffs.size()),
                  static_cast<Eigen::Index>(f.labels.size()));
  parallel_for(coeffs.size(), workers, [&](std::size_t i) {
    const Eigen::VectorXd v =
        order == 1 ? radial_spectrum(coeffs[i]) : powerspectrum(coeffs[i]);
    if (v.size() != f.values.cols()) {
      throw ValidationError("cli", "environments have inconsistent channels");
    }
    f.values.row(static_cast<Eigen::Index>(i)) = v.transpose();
  });
  return f;
}

std::vector<FeatureGradients> soap_feature_gradients(
    const std::vector<DensityCoeffs>& coeffs,
    const std::vector<CoeffGradients>& grads, int order, int workers) {
  std::vector<FeatureGradients> out(coeffs.size());
  parallel_for(coeffs.size(), workers, [&](std::size_t i) {
    out[i] = order == 1 ? radial_spectrum_gradients(coeffs[i], grads[i])
                        : powerspectrum_gradients(coeffs[i], grads[i]);
  });
  return out;
}

void write_features(const std::string& dir, const std::string& prefix,
                    const InvariantFeatures& f) {
  write_blob(join(dir, prefix + "_nu" + std::to_string(f.order) + ".bin"),
             f.to_blob());
}

void write_environments(const std::string& path, const Dataset& d) {
  Csv csv({"env", "structure", "center", "species"});
  for (std::size_t i = 0; i < d.envs.size(); ++i) {
    csv.row({std::to_string(i), std::to_string(d.structure_of[i]),
             std::to_string(d.envs[i].center),
             element_symbol(d.envs[i].center_species)});
  }
  csv.write(path);
}

// ------------------------------------------------------------ fit-basis

CommandResult cmd_fit_basis(const JobConfig& cfg) {
  CommandResult res;
  const auto dir = cfg.output_dir;
  const auto ds = load_dataset(cfg.inputs.train, cfg.basis.rcut, "train");
  const auto species = dataset_species(ds);
  const PrimitiveBasis prim_basis(cfg.basis);
  auto prim = build_table(cfg.basis, species, nullptr, -1, cfg.grid_points,
                          cfg.workers);
  json& rep = res.report;
  rep["command"] = "fit-basis";
  rep["structures"] = ds.structures.size();
  rep["environments"] = ds.envs.size();
  rep["species"] = species;
  rep["primitive_basis_id"] = prim.basis_id();
  rep["condition_number"] = prim_basis.condition_number();
  rep["method"] = cfg.contraction.method;
  TableSet out;
  if (cfg.contraction.method == "none") {
    out.tables.emplace(-1, std::move(prim));
  } else {
    if (ds.envs.empty()) throw ValidationError("cli", "dataset has no environments");
    TableSet prim_set;
    prim_set.tables.emplace(-1, prim);
    const auto coeffs = coefficients(ds, prim_set, cfg.workers);
    const auto cov = chunked_covariance(coeffs, cfg.contraction.species_mode,
                                        cfg.contraction.center_mode, cfg.workers);
    ContractionMap map;
    if (cfg.contraction.method == "pca") {
      map = pca_contraction(cov, cfg.contraction.qmax);
    } else {
      const auto cols = l0_columns(cov);
      Eigen::MatrixXd X = Eigen::MatrixXd::Zero(
          static_cast<Eigen::Index>(ds.structures.size()),
          static_cast<Eigen::Index>(cols.size()));
      Eigen::VectorXd y(static_cast<Eigen::Index>(ds.structures.size()));
      for (std::size_t s = 0; s < ds.structures.size(); ++s) {
        if (!ds.structures[s].energy) {
          throw ValidationError("cli", "PCovR needs an energy on every frame (frame " +
                                           std::to_string(s) + ")");
        }
        y[static_cast<Eigen::Index>(s)] = *ds.structures[s].energy;
      }
      for (std::size_t i = 0; i < coeffs.size(); ++i) {
        const auto& labels = coeffs[i].channels[0];
        for (std::size_t k = 0; k < cols.size(); ++k) {
          const auto it = std::find(labels.begin(), labels.end(), cols[k].second);
          const auto ch = static_cast<Eigen::Index>(it - labels.begin());
          X(ds.structure_of[i], static_cast<Eigen::Index>(k)) +=
              coeffs[i].values[0](ch, 0).real();
        }
      }
      map = pcovr_contraction(cov, X, y, cfg.contraction.alpha,
                              cfg.contraction.ridge, cfg.contraction.qmax);
    }
    map.source_basis_id = prim.basis_id();
    for (int center : map.centers()) {
      out.tables.emplace(center, build_table(cfg.basis, species, &map, center,
                                             cfg.grid_points, cfg.workers));
    }
    write_blob(join(dir, "contraction.bin"), map.to_blob());

    Csv eig({"center", "species", "l", "index", "eigenvalue", "cumulative_fraction"});
    for (const auto& [key, block] : map.blocks) {
      const auto& lam = block.eigenvalues;
      const double total = lam.sum();
      double acc = 0.0;
      for (Eigen::Index k = 0; k < lam.size(); ++k) {
        acc += lam[k];
        eig.row({std::to_string(key.center), std::to_string(key.species),
                 std::to_string(key.l), std::to_string(k), num(lam[k]),
                 num(total > 0.0 ? acc / total : 1.0)});
      }
    }
    eig.write(join(dir, "eigenvalues.csv"));

    const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(201, 0.0, cfg.basis.rcut);
    const auto vals = optimal_basis_values(map, prim_basis, grid);
    std::vector<std::string> header{"r"};
    for (const auto& [key, z, q] : vals.keys) {
      header.push_back("c" + std::to_string(key.center) + "_s" +
                       std::to_string(key.species) + "_l" + std::to_string(key.l) +
                       "_z" + std::to_string(z) + "_q" + std::to_string(q));
    }
    Csv basis_csv(header);
    for (Eigen::Index i = 0; i < grid.size(); ++i) {
      std::vector<std::string> row{num(grid[i])};
      for (Eigen::Index k = 0; k < vals.values.cols(); ++k) row.push_back(num(vals.values(i, k)));
      basis_csv.row(row);
    }
    basis_csv.write(join(dir, "optimal_basis.csv"));

    const auto ev = explained_variance(map, cfg.contraction.qmax);
    rep["qmax"] = cfg.contraction.qmax;
    rep["species_mode"] = to_string(map.species_mode);
    rep["center_mode"] = to_string(map.center_mode);
    rep["explained_variance"] = ev.overall;
    rep["residual_variance"] = ev.residual();
    json per_block = json::array();
    for (const auto& [key, frac] : ev.per_block) {
      per_block.push_back({{"center", key.center},
                           {"species", key.species},
                           {"l", key.l},
                           {"explained", frac}});
    }
    rep["per_block"] = per_block;
    rep["channels_for_1e-4_residual"] = channels_for_variance(map, 1.0 - 1e-4);
    rep["primitive_channels_for_1e-4_residual"] =
        primitive_channels_for_variance(cov, cfg.basis.nmax, 1.0 - 1e-4);
  }
  rep["basis_id"] = out.basis_id();
  save_tables(dir, out);
  write_json(join(dir, "basis_report.json"), rep);
  return res;
}

// ------------------------------------------------------ compute-features

struct FeatureSet {
  std::vector<InvariantFeatures> orders;  // index nu - 1
  Eigen::MatrixXd norms_full, norms_kept;
};

FeatureSet soap_feature_set(const std::vector<DensityCoeffs>& coeffs, int nu_max,
                            int workers) {
  FeatureSet fs_;
  const auto n = static_cast<Eigen::Index>(coeffs.size());
  fs_.norms_full.resize(n, nu_max);
  for (int nu = 1; nu <= nu_max; ++nu) {
    fs_.orders.push_back(soap_features(coeffs, nu, workers));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    fs_.norms_full(i, 0) = coeffs[static_cast<std::size_t>(i)].squared_norm();
    if (nu_max > 1) fs_.norms_full(i, 1) = fs_.orders[1].values.row(i).squaredNorm();
  }
  fs_.norms_kept = fs_.norms_full;
  return fs_;
}

void write_norms(const std::string& path, const FeatureSet& f) {
  Csv csv({"env", "order", "norm_full", "norm_kept"});
  for (Eigen::Index i = 0; i < f.norms_full.rows(); ++i) {
    for (Eigen::Index k = 0; k < f.norms_full.cols(); ++k) {
      csv.row({std::to_string(i), std::to_string(k + 1), num(f.norms_full(i, k)),
               num(f.norms_kept(i, k))});
    }
  }
  csv.write(path);
}

CommandResult cmd_compute_features(const JobConfig& cfg) {
  CommandResult res;
  const auto dir = cfg.output_dir;
  const auto tables = load_tables(cfg.basis_dir());
  const double rcut = tables.any().spec().rcut;
  const auto train = load_dataset(cfg.inputs.train, rcut, "train");
  const auto coeffs = coefficients(train, tables, cfg.workers);
  const int nu_max = cfg.features.nice.nu_max;
  json& rep = res.report;
  rep["command"] = "compute-features";
  rep["basis_id"] = tables.basis_id();
  rep["kind"] = cfg.features.kind;
  rep["environments"] = train.envs.size();
  FeatureSet train_set;
  std::optional<NiceFeaturizer> nice;
  if (cfg.features.kind == "soap") {
    train_set = soap_feature_set(coeffs, nu_max, cfg.workers);
  } else {
    NiceOutput o;
    nice = NiceFeaturizer::fit(coeffs, cfg.features.nice, cfg.workers, &o,
                               &res.warnings);
    train_set.orders = std::move(o.invariants);
    train_set.norms_full = std::move(o.norms_full);
    train_set.norms_kept = std::move(o.norms_kept);
    write_blob(join(dir, "nice.bin"), nice->to_blob());
    rep["discarded_fraction"] = nice->discarded_fractions();
  }
  json counts = json::array();
  for (auto& f : train_set.orders) {
    f.basis_id = tables.basis_id();
    write_features(dir, "features", f);
    counts.push_back({{"order", f.order}, {"features", f.values.cols()}});
  }
  rep["orders"] = counts;
  write_norms(join(dir, "norms.csv"), train_set);
  write_environments(join(dir, "environments.csv"), train);
  if (!cfg.inputs.test.empty()) {
    const auto test = load_dataset(cfg.inputs.test, rcut, "test");
    const auto tc = coefficients(test, tables, cfg.workers);
    FeatureSet test_set;
    if (nice) {
      auto o = nice->transform(tc, cfg.workers);
      test_set.orders = std::move(o.invariants);
      test_set.norms_full = std::move(o.norms_full);
      test_set.norms_kept = std::move(o.norms_kept);
    } else {
      test_set = soap_feature_set(tc, nu_max, cfg.workers);
    }
    for (auto& f : test_set.orders) {
      f.basis_id = tables.basis_id();
      write_features(dir, "features_test", f);
    }
    write_norms(join(dir, "norms_test.csv"), test_set);
    write_environments(join(dir, "environments_test.csv"), test);
    rep["test_environments"] = test.envs.size();
  }
  rep["warnings"] = res.warnings;
  write_json(join(dir, "features_report.json"), rep);
  return res;
}

// ---------------------------------------------------------------- select

CommandResult cmd_select(const JobConfig& cfg) {
  CommandResult res;
  const auto path = cfg.inputs.features.empty()
                        ? join(cfg.output_dir, "features_nu" +
                                                   std::to_string(cfg.selection.order) +
                                                   ".bin")
                        : cfg.inputs.features;
  const auto f = InvariantFeatures::from_blob(read_blob(path));
  const auto sel = cfg.selection.method == "cur"
                       ? cur_select(f.values, cfg.selection.k)
                       : fps_select(f.values, cfg.selection.k, cfg.selection.start);
  res.warnings = sel.warnings;
  json& rep = res.report;
  rep = sel.to_json();
  rep["command"] = "select";
  rep["source"] = path;
  json labels = json::array();
  for (int i : sel.indices) labels.push_back(to_string(f.labels[static_cast<std::size_t>(i)]));
  rep["labels"] = labels;
  write_json(join(cfg.output_dir, "selection.json"), rep);
  return res;
}

// ------------------------------------------------------------------ gfre

InvariantFeatures powerspectrum_on(const Dataset& d, const BasisSpec& spec,
                                   const std::vector<int>& species,
                                   const ContractionMap* map, int grid, int workers) {
  TableSet ts;
  if (map) {
    for (int c : map->centers()) {
      ts.tables.emplace(c, build_table(spec, species, map, c, grid, workers));
    }
  } else {
    ts.tables.emplace(-1, build_table(spec, species, nullptr, -1, grid, workers));
  }
  return soap_features(coefficients(d, ts, workers), 2, workers);
}

CommandResult cmd_gfre(const JobConfig& cfg) {
  CommandResult res;
  json& rep = res.report;
  rep["command"] = "gfre";
  rep["mode"] = cfg.gfre.mode;
  GfreOptions opt;
  opt.train_fraction = cfg.gfre.train_fraction;
  opt.ridge = cfg.gfre.ridge;
  opt.seed = cfg.gfre_seed();
  rep["train_fraction"] = opt.train_fraction;
  rep["ridge"] = opt.ridge;
  rep["seed"] = opt.seed;
  if (cfg.gfre.mode == "pair") {
    if (cfg.inputs.source_features.empty() || cfg.inputs.target_features.empty()) {
      throw ValidationError(
          "cli", "gfre pair mode needs inputs.source_features and inputs.target_features");
    }
    const auto src = InvariantFeatures::from_blob(read_blob(cfg.inputs.source_features));
    const auto dst = InvariantFeatures::from_blob(read_blob(cfg.inputs.target_features));
    rep["gfre"] = gfre(src.values, dst.values, opt);
    write_json(join(cfg.output_dir, "gfre.json"), rep);
    return res;
  }
  const auto ds = load_dataset(cfg.inputs.train, cfg.basis.rcut, "train");
  const auto species = dataset_species(ds);
  BasisSpec ref = cfg.basis;
  ref.kind = BasisKind::GTO;
  ref.nmax = cfg.gfre.reference_nmax;
  ref.validate();
  TableSet ref_tables;
  ref_tables.tables.emplace(-1, build_table(ref, species, nullptr, -1, cfg.grid_points,
                                            cfg.workers));
  const auto ref_coeffs = coefficients(ds, ref_tables, cfg.workers);
  const auto P_ref = soap_features(ref_coeffs, 2, cfg.workers);
  const auto cov = chunked_covariance(ref_coeffs, cfg.contraction.species_mode,
                                      cfg.contraction.center_mode, cfg.workers);
  Csv csv({"qmax", "gfre_optimal", "gfre_gto"});
  json rows = json::array();
  for (int q : cfg.gfre.qmax_values) {
    BasisSpec small = ref;
    small.nmax = q;
    const auto P_gto = powerspectrum_on(ds, small, species, nullptr, cfg.grid_points,
                                        cfg.workers);
    auto map = pca_contraction(cov, q);
    map.source_basis_id = ref_tables.any().basis_id();
    const auto P_opt =
        powerspectrum_on(ds, ref, species, &map, cfg.grid_points, cfg.workers);
    const double g_opt = gfre(P_opt.values, P_ref.values, opt);
    const double g_gto = gfre(P_gto.values, P_ref.values, opt);
    csv.row({std::to_string(q), num(g_opt), num(g_gto)});
    rows.push_back({{"qmax", q}, {"gfre_optimal", g_opt}, {"gfre_gto", g_gto}});
  }
  csv.write(join(cfg.output_dir, "gfre_curve.csv"));
  rep["reference_features"] = P_ref.values.cols();
  rep["environments"] = ds.envs.size();
  rep["curve"] = rows;
  write_json(join(cfg.output_dir, "gfre.json"), rep);
  return res;
}

// ----------------------------------------------------- train / predict

struct ModelData {
  Eigen::MatrixXd env_X;                   // environments x features
  std::vector<FeatureGradients> env_grads;  // when forces are used
  Eigen::MatrixXd counts;                  // structures x species
};

int feature_order(const JobConfig& cfg) {
  return cfg.model.order < 0 ? cfg.features.nice.nu_max : cfg.model.order;
}

Eigen::MatrixXd species_counts(const Dataset& d, const std::vector<int>& species) {
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(
      static_cast<Eigen::Index>(d.structures.size()),
      static_cast<Eigen::Index>(species.size()));
  for (std::size_t s = 0; s < d.structures.size(); ++s) {
    for (int z : d.structures[s].species) {
      const auto it = std::find(species.begin(), species.end(), z);
      if (it == species.end()) {
        throw ValidationError("cli", "species " + element_symbol(z) +
                                         " is not covered by the model");
      }
      B(static_cast<Eigen::Index>(s), it - species.begin()) += 1.0;
    }
  }
  return B;
}

std::vector<int> rows_of(const std::vector<int>& owner, const std::vector<int>& keep,
                         std::vector<int>* remap) {
  std::map<int, int> pos;
  for (std::size_t k = 0; k < keep.size(); ++k) pos[keep[k]] = static_cast<int>(k);
  std::vector<int> rows;
  if (remap) remap->clear();
  for (std::size_t i = 0; i < owner.size(); ++i) {
    auto it = pos.find(owner[i]);
    if (it == pos.end()) continue;
    rows.push_back(static_cast<int>(i));
    if (remap) remap->push_back(it->second);
  }
  return rows;
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& M, const std::vector<int>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), M.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = M.row(rows[k]);
  return out;
}

/// Structure-level design: aggregated environment features plus species counts.
Eigen::MatrixXd design(const Dataset& d, const ModelData& md,
                       const std::vector<int>& structs, bool baseline) {
  std::vector<int> remap;
  const auto rows = rows_of(d.structure_of, structs, &remap);
  const Eigen::MatrixXd Xs = aggregate_structure_features(
      take_rows(md.env_X, rows), remap, static_cast<int>(structs.size()));
  if (!baseline) return Xs;
  Eigen::MatrixXd X(Xs.rows(), Xs.cols() + md.counts.cols());
  X << Xs, take_rows(md.counts, structs);
  return X;
}

/// Stacked force design (-dE/dr rows use +G here; predict_forces negates).
void force_block(const Dataset& d, const ModelData& md, const std::vector<int>& structs,
                 Eigen::MatrixXd& G, Eigen::VectorXd* yF) {
  if (md.env_grads.size() != d.envs.size()) {
    throw RuntimeError("cli", "feature gradients were not computed");
  }
  std::vector<std::vector<FeatureGradients>> per(d.structures.size());
  for (std::size_t i = 0; i < d.envs.size(); ++i) {
    per[static_cast<std::size_t>(d.structure_of[i])].push_back(md.env_grads[i]);
  }
  Eigen::Index total = 0;
  for (int s : structs) total += 3 * static_cast<Eigen::Index>(d.structures[static_cast<std::size_t>(s)].size());
  G.resize(total, md.env_X.cols());
  if (yF) yF->resize(total);
  Eigen::Index r = 0;
  for (int s : structs) {
    const auto& st = d.structures[static_cast<std::size_t>(s)];
    const auto n = static_cast<int>(st.size());
    G.middleRows(r, 3 * n) =
        structure_gradient_rows(per[static_cast<std::size_t>(s)], n, md.env_X.cols());
    if (yF) {
      if (!st.forces) {
        throw ValidationError("cli", "frame " + std::to_string(s) +
                                         " has no forces but use_forces is set");
      }
      for (int a = 0; a < n; ++a) yF->segment<3>(r + 3 * a) = (*st.forces)[static_cast<std::size_t>(a)];
    }
    r += 3 * n;
  }
}

Eigen::VectorXd energies_of(const Dataset& d, const std::vector<int>& structs) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(structs.size()));
  for (std::size_t k = 0; k < structs.size(); ++k) {
    const auto& e = d.structures[static_cast<std::size_t>(structs[k])].energy;
    if (!e) {
      throw ValidationError("cli", "frame " + std::to_string(structs[k]) +
                                       " has no energy; training needs energies");
    }
    y[static_cast<Eigen::Index>(k)] = *e;
  }
  return y;
}

Eigen::VectorXd atom_counts(const Dataset& d, const std::vector<int>& structs) {
  Eigen::VectorXd n(static_cast<Eigen::Index>(structs.size()));
  for (std::size_t k = 0; k < structs.size(); ++k) {
    n[static_cast<Eigen::Index>(k)] =
        static_cast<double>(d.structures[static_cast<std::size_t>(structs[k])].size());
  }
  return n;
}

Model fit_model(const JobConfig& cfg, const Dataset& d, const ModelData& md,
                const std::vector<int>& structs) {
  const Eigen::VectorXd y = energies_of(d, structs);
  const bool baseline = cfg.model.baseline;
  if (cfg.model.kind == "linear") {
    const bool per_atom = cfg.model.target == "per_atom";
    const Eigen::VectorXd n = per_atom ? atom_counts(d, structs)
                                       : Eigen::VectorXd::Ones(y.size());
    const Eigen::MatrixXd X = n.cwiseInverse().asDiagonal() * design(d, md, structs, baseline);
    const Eigen::VectorXd yn = y.cwiseQuotient(n);
    Model m;
    if (!cfg.model.use_forces) {
      m = ridge_fit(X, yn, cfg.model.lambda);
    } else {
      Eigen::MatrixXd G;
      Eigen::VectorXd yF;
      force_block(d, md, structs, G, &yF);
      m = joint_energy_force_fit(X, yn, G, yF, cfg.model.lambda, cfg.model.force_weight);
    }
    m.target = cfg.model.target;
    return m;
  }
  // kernel: per-species baseline first, kernel on the residual
  Eigen::VectorXd resid = y;
  json meta = json::object();
  if (baseline) {
    const Eigen::MatrixXd B = take_rows(md.counts, structs);
    const auto base = ridge_fit(B, y, 1e-10);
    resid = y - ridge_predict(base, B);
    meta["baseline_weights"] = std::vector<double>(base.weights.data(),
                                                   base.weights.data() + base.weights.size());
    meta["baseline_intercept"] = base.intercept;
  }
  std::vector<int> remap;
  const auto rows = rows_of(d.structure_of, structs, &remap);
  auto m = krr_fit(take_rows(md.env_X, rows), remap, resid, cfg.model.zeta,
                   cfg.model.lambda, cfg.workers);
  m.metadata = meta;
  return m;
}

struct Predictions {
  Eigen::VectorXd energy;
  Eigen::VectorXd forces;  // stacked 3 per atom; empty if unavailable
};

Predictions predict_model(const Model& m, const Dataset& d, const ModelData& md,
                          const std::vector<int>& structs, bool with_forces,
                          int workers) {
  Predictions p;
  const bool baseline = m.metadata.value("baseline", true);
  if (m.kind == ModelKind::Linear) {
    const Eigen::VectorXd n = m.target == "per_atom"
                                  ? atom_counts(d, structs)
                                  : Eigen::VectorXd::Ones(static_cast<Eigen::Index>(structs.size()));
    p.energy = n.cwiseProduct(ridge_predict(
        m, n.cwiseInverse().asDiagonal() * design(d, md, structs, baseline)));
    if (with_forces) {
      Eigen::MatrixXd G;
      force_block(d, md, structs, G, nullptr);
      p.forces = -(G * m.weights.head(G.cols()));
    }
    return p;
  }
  std::vector<int> remap;
  const auto rows = rows_of(d.structure_of, structs, &remap);
  p.energy = krr_predict(m, take_rows(md.env_X, rows), remap,
                         static_cast<int>(structs.size()), workers);
  if (m.metadata.contains("baseline_weights")) {
    const auto w = m.metadata.at("baseline_weights").get<std::vector<double>>();
    const Eigen::MatrixXd B = take_rows(md.counts, structs);
    const Eigen::VectorXd wv = Eigen::Map<const Eigen::VectorXd>(
        w.data(), static_cast<Eigen::Index>(w.size()));
    p.energy += B * wv;
    p.energy.array() += m.metadata.at("baseline_intercept").get<double>();
  }
  return p;
}

Eigen::VectorXd reference_forces(const Dataset& d, const std::vector<int>& structs) {
  std::vector<double> out;
  for (int s : structs) {
    const auto& st = d.structures[static_cast<std::size_t>(s)];
    if (!st.forces) return {};
    for (const auto& f : *st.forces) out.insert(out.end(), {f[0], f[1], f[2]});
  }
  return Eigen::Map<const Eigen::VectorXd>(out.data(),
                                           static_cast<Eigen::Index>(out.size()));
}

double stddev(const Eigen::VectorXd& v) {
  if (v.size() == 0) return 0.0;
  return std::sqrt((v.array() - v.mean()).square().mean());
}

ModelData model_data(const JobConfig& cfg, const Dataset& d, const TableSet& tables,
                     const NiceFeaturizer* nice, bool with_grads,
                     const std::vector<int>& species) {
  ModelData md;
  const int order = feature_order(cfg);
  const auto coeffs = coefficients(d, tables, cfg.workers);
  if (cfg.features.kind == "soap") {
    md.env_X = soap_features(coeffs, order, cfg.workers).values;
    if (with_grads) {
      const auto grads = coefficient_gradients(d, tables, cfg.workers);
      md.env_grads = soap_feature_gradients(coeffs, grads, order, cfg.workers);
    }
  } else {
    if (with_grads) {
      throw ValidationError("cli", "force gradients are available for soap features only");
    }
    md.env_X = nice->transform(coeffs, cfg.workers)
                   .invariants[static_cast<std::size_t>(order - 1)]
                   .values;
  }
  md.counts = species_counts(d, species);
  return md;
}

std::vector<int> iota(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

std::string opt_num(double v, bool have) { return have ? num(v) : ""; }

CommandResult cmd_train(const JobConfig& cfg) {
  CommandResult res;
  const auto dir = cfg.output_dir;
  if (cfg.model.use_forces && cfg.model.kind != "linear") {
    throw ValidationError("cli", "force training is supported for linear models only");
  }
  const auto tables = load_tables(cfg.basis_dir());
  const double rcut = tables.any().spec().rcut;
  const auto d = load_dataset(cfg.inputs.train, rcut, "train");
  const auto species = tables.any().species();
  const int S = static_cast<int>(d.structures.size());
  if (cfg.model.folds > S) {
    throw ValidationError("cli", "model.folds exceeds the number of structures");
  }
  std::optional<NiceFeaturizer> nice;
  if (cfg.features.kind == "nice") {
    const auto coeffs = coefficients(d, tables, cfg.workers);
    nice = NiceFeaturizer::fit(coeffs, cfg.features.nice, cfg.workers, nullptr,
                               &res.warnings);
  }
  const bool forces = cfg.model.use_forces;
  const bool linear = cfg.model.kind == "linear";
  const bool force_metrics = linear && cfg.features.kind == "soap" &&
                             reference_forces(d, iota(S)).size() > 0;
  const auto md = model_data(cfg, d, tables, nice ? &*nice : nullptr,
                             forces || force_metrics, species);

  const auto fold = k_fold_assignment(S, cfg.model.folds, cfg.fold_seed());
  Csv cv({"fold", "n_test", "energy_rmse", "energy_mae", "force_rmse", "force_mae"});
  json folds = json::array();
  Eigen::VectorXd oof_e(S);
  std::vector<double> fold_e_rmse, fold_f_rmse;
  for (int f = 0; f < cfg.model.folds; ++f) {
    std::vector<int> tr, te;
    for (int s = 0; s < S; ++s) (fold[static_cast<std::size_t>(s)] == f ? te : tr).push_back(s);
    const auto m = [&] {
      auto mm = fit_model(cfg, d, md, tr);
      mm.metadata["baseline"] = cfg.model.baseline;
      return mm;
    }();
    const auto p = predict_model(m, d, md, te, force_metrics, cfg.workers);
    const Eigen::VectorXd ye = energies_of(d, te);
    for (std::size_t k = 0; k < te.size(); ++k) oof_e[te[k]] = p.energy[static_cast<Eigen::Index>(k)];
    const double er = rmse(p.energy, ye), ea = mae(p.energy, ye);
    double fr = 0.0, fa = 0.0;
    if (force_metrics) {
      const auto yf = reference_forces(d, te);
      fr = rmse(p.forces, yf);
      fa = mae(p.forces, yf);
      fold_f_rmse.push_back(fr);
    }
    fold_e_rmse.push_back(er);
    cv.row({std::to_string(f), std::to_string(te.size()), num(er), num(ea),
            opt_num(fr, force_metrics), opt_num(fa, force_metrics)});
    json fj = {{"fold", f}, {"n_test", te.size()}, {"energy_rmse", er}, {"energy_mae", ea}};
    if (force_metrics) {
      fj["force_rmse"] = fr;
      fj["force_mae"] = fa;
    }
    folds.push_back(fj);
  }
  cv.write(join(dir, "cv.csv"));

  auto model = fit_model(cfg, d, md, iota(S));
  const int order = feature_order(cfg);
  model.pipeline_id = tables.basis_id() + "|" + cfg.features.kind + ":nu" + std::to_string(order);
  model.metadata["basis_id"] = tables.basis_id();
  model.metadata["feature_kind"] = cfg.features.kind;
  model.metadata["order"] = order;
  model.metadata["species"] = species;
  model.metadata["baseline"] = cfg.model.baseline;
  model.metadata["features"] = md.env_X.cols();
  write_blob(join(dir, "model.bin"), model.to_blob());
  if (nice) write_blob(join(dir, "nice.bin"), nice->to_blob());

  const auto all = iota(S);
  const auto p = predict_model(model, d, md, all, force_metrics, cfg.workers);
  const Eigen::VectorXd ye = energies_of(d, all);
  json& rep = res.report;
  rep["command"] = "train";
  rep["model"] = cfg.model.kind;
  rep["target"] = cfg.model.target;
  rep["pipeline_id"] = model.pipeline_id;
  rep["structures"] = S;
  rep["features"] = md.env_X.cols();
  rep["train_energy_rmse"] = rmse(p.energy, ye);
  rep["energy_std"] = stddev(ye);
  rep["cv_energy_rmse"] = rmse(oof_e, ye);
  rep["cv_folds"] = folds;
  if (force_metrics) {
    const auto yf = reference_forces(d, all);
    rep["train_force_rmse"] = rmse(p.forces, yf);
    rep["force_std"] = stddev(yf);
    double m = 0.0;
    for (double v : fold_f_rmse) m += v;
    rep["cv_force_rmse_mean"] = m / static_cast<double>(fold_f_rmse.size());
  }
  rep["warnings"] = res.warnings;
  write_json(join(dir, "train_report.json"), rep);
  return res;
}

CommandResult cmd_predict(const JobConfig& cfg) {
  CommandResult res;
  const auto dir = cfg.output_dir;
  const auto model = Model::from_blob(read_blob(join(cfg.model_dir(), "model.bin")));
  const auto tables = load_tables(cfg.basis_dir());
  if (model.metadata.value("basis_id", "") != tables.basis_id()) {
    throw ValidationError("cli", "model was trained on basis '" +
                                     model.metadata.value("basis_id", "") +
                                     "' but the basis artifacts are '" +
                                     tables.basis_id() + "'");
  }
  JobConfig run = cfg;
  run.features.kind = model.metadata.at("feature_kind").get<std::string>();
  run.model.order = model.metadata.at("order").get<int>();
  std::optional<NiceFeaturizer> nice;
  if (run.features.kind == "nice") {
    nice = NiceFeaturizer::from_blob(read_blob(join(cfg.model_dir(), "nice.bin")));
    run.features.nice = nice->settings();
  } else {
    run.features.nice.nu_max = std::max(run.model.order, 1);
  }
  const auto path = cfg.inputs.test.empty() ? cfg.inputs.train : cfg.inputs.test;
  const auto d = load_dataset(path, tables.any().spec().rcut, "test");
  const auto species = model.metadata.at("species").get<std::vector<int>>();
  const bool with_forces = model.kind == ModelKind::Linear && run.features.kind == "soap";
  const auto md = model_data(run, d, tables, nice ? &*nice : nullptr, with_forces, species);
  const int S = static_cast<int>(d.structures.size());
  const auto all = iota(S);
  const auto p = predict_model(model, d, md, all, with_forces, cfg.workers);

  bool have_e = true;
  for (const auto& s : d.structures) have_e = have_e && s.energy.has_value();
  Csv pred(have_e ? std::vector<std::string>{"structure", "energy", "reference"}
                  : std::vector<std::string>{"structure", "energy"});
  for (int s = 0; s < S; ++s) {
    std::vector<std::string> row{std::to_string(s), num(p.energy[s])};
    if (have_e) row.push_back(num(*d.structures[static_cast<std::size_t>(s)].energy));
    pred.row(row);
  }
  pred.write(join(dir, "predictions.csv"));
  json& rep = res.report;
  rep["command"] = "predict";
  rep["structures"] = S;
  rep["pipeline_id"] = model.pipeline_id;
  if (have_e) rep["energy_rmse"] = rmse(p.energy, energies_of(d, all));
  if (with_forces) {
    Csv fc({"structure", "atom", "fx", "fy", "fz"});
    Eigen::Index r = 0;
    for (int s = 0; s < S; ++s) {
      for (std::size_t a = 0; a < d.structures[static_cast<std::size_t>(s)].size(); ++a) {
        fc.row({std::to_string(s), std::to_string(a), num(p.forces[r]),
                num(p.forces[r + 1]), num(p.forces[r + 2])});
        r += 3;
      }
    }
    fc.write(join(dir, "forces.csv"));
    const auto yf = reference_forces(d, all);
    if (yf.size() == p.forces.size() && yf.size() > 0) rep["force_rmse"] = rmse(p.forces, yf);
  }
  write_json(join(dir, "predict_report.json"), rep);
  return res;
}

// ----------------------------------------------------------------- check

struct CheckEntry {
  std::string name;
  double residual;
  double tolerance;
  std::string detail;
};

Eigen::MatrixXd random_orthogonal(datasets::Rng& rng, int n) {
  Eigen::MatrixXd A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
  return qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
}

DensityCoeffs truncate_l(const DensityCoeffs& c, int lmax) {
  DensityCoeffs out = c;
  out.values.resize(static_cast<std::size_t>(lmax + 1));
  out.channels.resize(static_cast<std::size_t>(lmax + 1));
  return out;
}

DensityCoeffs apply_channel_map(const DensityCoeffs& c,
                                const std::vector<Eigen::MatrixXd>& U) {
  DensityCoeffs out = c;
  for (int l = 0; l <= c.lmax(); ++l) {
    const auto& Ul = U[static_cast<std::size_t>(l)];
    out.values[static_cast<std::size_t>(l)] = Ul * c.values[static_cast<std::size_t>(l)];
    out.channels[static_cast<std::size_t>(l)].clear();
    for (Eigen::Index q = 0; q < Ul.rows(); ++q) {
      out.channels[static_cast<std::size_t>(l)].push_back({-1, static_cast<int>(q)});
    }
  }
  return out;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

double max_rel_vec(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) return INFINITY;
  const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-300);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

double spline_residual(const RadialTable& table, int probes, std::uint64_t seed) {
  if (table.contracted()) {
    throw ValidationError("cli", "spline audit needs a primitive (uncontracted) table");
  }
  const RadialIntegrator integ(table.spec());
  datasets::Rng rng(seed);
  Eigen::MatrixXd ref(table.spec().nmax, table.lmax() + 1);
  double worst = 0.0;
  for (int k = 0; k < probes; ++k) {
    const int s = rng.integer(0, static_cast<int>(table.species().size()) - 1);
    const int l = rng.integer(0, table.lmax());
    const double r = rng.uniform(0.0, table.spec().rcut);
    const auto& e = table.entry(l, s);
    Eigen::VectorXd v(static_cast<Eigen::Index>(e.targets.size())), dv(v.size());
    table.eval(l, s, r, v, dv);
    integ.integrals(r, ref);
    for (std::size_t t = 0; t < e.targets.size(); ++t) {
      const int n = table.channels(l)[static_cast<std::size_t>(e.targets[t])].index;
      const double err = std::abs(v[static_cast<Eigen::Index>(t)] - ref(n, l));
      if (!(err <= worst)) worst = std::isnan(err) ? INFINITY : err;
    }
  }
  return worst;
}

CommandResult cmd_check(const JobConfig& cfg) {
  CommandResult res;
  std::vector<CheckEntry> checks;
  datasets::Rng rng(cfg.seed);
  auto run = [&](const std::string& name, double tol, auto&& fn) {
    try {
      checks.push_back({name, fn(), tol, ""});
    } catch (const std::exception& e) {
      checks.push_back({name, INFINITY, tol, e.what()});
    }
  };

  // small basis keeps the correlation checks quick
  BasisSpec small = cfg.basis;
  small.nmax = std::min(cfg.basis.nmax, 4);
  small.lmax = std::min(cfg.basis.lmax, 3);
  const std::vector<int> species{1, 8};
  const auto frames = datasets::random_clusters(cfg.check.environments, 8, species, 0.7,
                                                0.9 * small.rcut, cfg.seed);
  const auto table = build_table(small, species, nullptr, -1, cfg.grid_points, cfg.workers);
  std::vector<Environment> envs;
  for (std::size_t s = 0; s < frames.size(); ++s) envs.push_back(neighbor_list(frames[s], small.rcut, s)[0]);
  std::vector<DensityCoeffs> coeffs;
  for (const auto& e : envs) coeffs.push_back(density_coeffs(e, table));

  run("cg_orthogonality", 1e-12, [&] {
    const CGTable cg(6);
    double worst = 0.0;
    for (int l = 0; l <= 6; ++l)
      for (int k = 0; k <= 6; ++k)
        for (int L = std::abs(l - k); L <= std::min(6, l + k); ++L)
          for (int L2 = std::abs(l - k); L2 <= std::min(6, l + k); ++L2)
            for (int M = -std::min(L, L2); M <= std::min(L, L2); ++M) {
              double s = 0.0;
              for (int m = -l; m <= l; ++m) s += cg(l, m, k, M - m, L, M) * cg(l, m, k, M - m, L2, M);
              worst = std::max(worst, std::abs(s - (L == L2 ? 1.0 : 0.0)));
            }
    return worst;
  });

  run("spline_accuracy", 1e-6, [&] {
    if (!cfg.check.table.empty()) {
      return spline_residual(RadialTable::from_blob(read_blob(cfg.check.table)),
                             cfg.check.probes, cfg.seed);
    }
    return spline_residual(build_table(cfg.basis, species, nullptr, -1, cfg.grid_points,
                                       cfg.workers),
                           cfg.check.probes, cfg.seed);
  });

  const CGTable cg(12);
  run("rotation_invariance_powerspectrum", 1e-8, [&] {
    double worst = 0.0;
    for (std::size_t s = 0; s < frames.size(); ++s) {
      const Mat3 R = rotation_from_uniform(rng.uniform(), rng.uniform(), rng.uniform());
      const auto rot = apply_rotation(frames[s], R);
      const auto c2 = density_coeffs(neighbor_list(rot, small.rcut, s)[0], table);
      worst = std::max(worst, max_rel_vec(powerspectrum(c2), powerspectrum(coeffs[s])));
    }
    return worst;
  });

  run("rotation_invariance_nice", 1e-8, [&] {
    double worst = 0.0;
    for (std::size_t s = 0; s < frames.size(); ++s) {
      const Mat3 R = rotation_from_uniform(rng.uniform(), rng.uniform(), rng.uniform());
      const auto rot = apply_rotation(frames[s], R);
      const auto c2 = density_coeffs(neighbor_list(rot, small.rcut, s)[0], table);
      auto inv3 = [&](const DensityCoeffs& c) {
        const auto b1 = seed_block(c);
        const auto b2 = nice_iterate(b1, c, cg, small.lmax);
        return invariants(nice_iterate(b2, c, cg, 0));
      };
      worst = std::max(worst, max_rel_vec(inv3(c2), inv3(coeffs[s])));
    }
    return worst;
  });

  const int lnorm = std::min(small.lmax, 2);
  run("norm_preservation_orthogonal", 1e-10, [&] {
    double worst = 0.0;
    for (const auto& c0 : coeffs) {
      const auto c = truncate_l(c0, lnorm);
      std::vector<Eigen::MatrixXd> U;
      for (int l = 0; l <= lnorm; ++l) U.push_back(random_orthogonal(rng, c.channel_count(l)));
      const auto cu = apply_channel_map(c, U);
      const auto a1 = seed_block(c), b1 = seed_block(cu);
      const auto a2 = nice_iterate(a1, c, cg, lnorm), b2 = nice_iterate(b1, cu, cg, lnorm);
      const auto a3 = nice_iterate(a2, c, cg, lnorm), b3 = nice_iterate(b2, cu, cg, lnorm);
      worst = std::max({worst, rel(block_norm(b2), block_norm(a2)),
                        rel(block_norm(b3), block_norm(a3))});
    }
    return worst;
  });

  run("norm_power_identity", 1e-8, [&] {
    double worst = 0.0;
    for (const auto& c0 : coeffs) {
      const auto c = truncate_l(c0, lnorm);
      const auto b1 = seed_block(c);
      const auto b2 = nice_iterate(b1, c, cg, 2 * lnorm);
      const auto b3 = nice_iterate(b2, c, cg, 3 * lnorm);
      const double n1 = block_norm(b1);
      worst = std::max({worst, rel(block_norm(b2), n1 * n1), rel(block_norm(b3), n1 * n1 * n1)});
    }
    return worst;
  });

  run("truncation_product_identity", 1e-8, [&] {
    double worst = 0.0;
    for (const auto& c0 : coeffs) {
      const auto c = truncate_l(c0, lnorm);
      std::vector<Eigen::MatrixXd> U;
      for (int l = 0; l <= lnorm; ++l) {
        const int n = c.channel_count(l);
        U.push_back(random_orthogonal(rng, n).topRows(std::max(1, n / 2)));
      }
      const auto cq = apply_channel_map(c, U);
      const auto prev = nice_iterate(seed_block(c), c, cg, 2 * lnorm);
      const auto sq = seed_block(cq);
      const CouplingPlan plan(sq.layout, prev.layout, cg, 3 * lnorm);
      const double lhs = block_norm(plan.apply(sq, prev));
      worst = std::max(worst, rel(lhs, block_norm(sq) * block_norm(prev)));
    }
    return worst;
  });

  run("basis_change_commutation", 1e-10, [&] {
    double worst = 0.0;
    for (const auto& c : coeffs) {
      std::vector<Eigen::MatrixXd> U;
      for (int l = 0; l <= c.lmax(); ++l) {
        const int n = c.channel_count(l);
        U.push_back(random_orthogonal(rng, n).topRows(std::max(1, n - 1)));
      }
      const auto cq = apply_channel_map(c, U);
      const auto direct = nice_iterate(seed_block(cq), cq, cg, small.lmax);
      const auto full = nice_iterate(seed_block(c), c, cg, small.lmax);
      const auto mapped = transform_channels(transform_channels(full, 0, U), 1, U);
      if (mapped.layout->groups.size() != direct.layout->groups.size()) return double(INFINITY);
      for (std::size_t g = 0; g < direct.values.size(); ++g) {
        const auto& dl = direct.layout->groups[g].labels;
        const auto& ml = mapped.layout->groups[g].labels;
        if (dl.size() != ml.size()) return double(INFINITY);
        std::map<FeaturePath, Eigen::Index> row;
        for (std::size_t f = 0; f < ml.size(); ++f) row[ml[f]] = static_cast<Eigen::Index>(f);
        for (std::size_t f = 0; f < dl.size(); ++f) {
          const auto it = row.find(dl[f]);
          if (it == row.end()) return double(INFINITY);
          worst = std::max(worst, (mapped.values[g].row(it->second) -
                                   direct.values[g].row(static_cast<Eigen::Index>(f)))
                                      .cwiseAbs()
                                      .maxCoeff());
        }
      }
    }
    return worst;
  });

  run("coefficient_gradient_fd", 1e-5, [&] {
    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t s = 0; s < frames.size(); ++s) {
      if (envs[s].neighbors.empty()) continue;
      const auto g = density_coeff_gradients(envs[s], table);
      const int atom = envs[s].neighbors.front().index;
      for (int d = 0; d < 3; ++d) {
        auto plus = frames[s], minus = frames[s];
        plus.positions[static_cast<std::size_t>(atom)][d] += h;
        minus.positions[static_cast<std::size_t>(atom)][d] -= h;
        const auto cp = density_coeffs(neighbor_list(plus, small.rcut, s)[0], table);
        const auto cm = density_coeffs(neighbor_list(minus, small.rcut, s)[0], table);
        double scale = 0.0, err = 0.0;
        for (int l = 0; l <= small.lmax; ++l) {
          const auto L = static_cast<std::size_t>(l);
          const Eigen::MatrixXcd fd = (cp.values[L] - cm.values[L]) / (2 * h);
          Eigen::MatrixXcd an = Eigen::MatrixXcd::Zero(fd.rows(), fd.cols());
          for (std::size_t j = 0; j < g.neighbor_atoms.size(); ++j) {
            if (g.neighbor_atoms[j] == atom) an += g.neighbor[j][L][d];
          }
          scale = std::max(scale, fd.cwiseAbs().maxCoeff());
          err = std::max(err, (fd - an).cwiseAbs().maxCoeff());
        }
        if (scale > 1e-8) worst = std::max(worst, err / scale);
      }
    }
    return worst;
  });

  run("translation_sum_rule", 1e-10, [&] {
    double worst = 0.0;
    for (const auto& e : envs) {
      const auto g = density_coeff_gradients(e, table);
      for (int l = 0; l <= small.lmax; ++l)
        for (int d = 0; d < 3; ++d) {
          const auto L = static_cast<std::size_t>(l);
          Eigen::MatrixXcd sum = g.center_gradient[L][d];
          double scale = g.center_gradient[L][d].cwiseAbs().maxCoeff();
          for (const auto& n : g.neighbor) sum += n[L][d];
          worst = std::max(worst, sum.cwiseAbs().maxCoeff() / std::max(scale, 1.0));
        }
    }
    return worst;
  });

  run("pcovr_alpha1_equals_pca", 1e-12, [&] {
    const auto cov = covariance(coeffs, SpeciesMode::Combined, CenterMode::Agnostic);
    const auto cols = l0_columns(cov);
    Eigen::MatrixXd X(static_cast<Eigen::Index>(coeffs.size()),
                      static_cast<Eigen::Index>(cols.size()));
    Eigen::VectorXd y(X.rows());
    for (std::size_t i = 0; i < coeffs.size(); ++i) {
      for (Eigen::Index k = 0; k < X.cols(); ++k) {
        X(static_cast<Eigen::Index>(i), k) = coeffs[i].values[0](k, 0).real();
      }
      y[static_cast<Eigen::Index>(i)] = static_cast<double>(i % 3) + rng.uniform();
    }
    // l=0 covariance rank is at most the environment count
    const int q = std::min({3, static_cast<int>(cols.size()), static_cast<int>(coeffs.size())});
    const auto pca = pca_contraction(cov, q);
    const auto pc = pcovr_contraction(cov, X, y, 1.0, 1e-6, q);
    double worst = 0.0;
    for (const auto& [key, block] : pca.blocks) {
      worst = std::max(worst, (block.U - pc.blocks.at(key).U).cwiseAbs().maxCoeff());
    }
    return worst;
  });

  json list = json::array();
  bool all = true;
  for (const auto& c : checks) {
    const bool ok = c.residual <= c.tolerance;
    all = all && ok;
    json j = {{"name", c.name},
              {"passed", ok},
              {"residual", std::isfinite(c.residual) ? json(c.residual) : json("inf")},
              {"tolerance", c.tolerance}};
    if (!c.detail.empty()) j["detail"] = c.detail;
    list.push_back(j);
    if (!ok) res.warnings.push_back("check failed: " + c.name);
  }
  res.passed = all;
  res.report = {{"command", "check"}, {"checks", list}, {"all_passed", all}};
  write_json(join(cfg.output_dir, "check_report.json"), res.report);
  return res;
}

}  // namespace

CommandResult run_command(const std::string& verb, const JobConfig& config) {
  config.validate();
  const auto& names = command_names();
  if (std::find(names.begin(), names.end(), verb) == names.end()) {
    throw ValidationError("cli", "unknown command '" + verb + "'");
  }
  ensure_dir(config.output_dir);
  write_json(join(config.output_dir, "effective_config.json"), effective_config(config));
  if (verb == "fit-basis") return cmd_fit_basis(config);
  if (verb == "compute-features") return cmd_compute_features(config);
  if (verb == "select") return cmd_select(config);
  if (verb == "gfre") return cmd_gfre(config);
  if (verb == "train") return cmd_train(config);
  if (verb == "predict") return cmd_predict(config);
  return cmd_check(config);
}

}  // namespace optrad

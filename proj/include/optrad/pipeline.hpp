#ifndef OPTRAD_PIPELINE_HPP_
#define OPTRAD_PIPELINE_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "optrad/contraction.hpp"
#include "optrad/correlations.hpp"
#include "optrad/io.hpp"
#include "optrad/radial.hpp"

namespace optrad {

/// Batch job settings. Every section is optional in the input document;
/// unknown keys anywhere are rejected.
struct JobConfig {
  std::uint64_t seed = 0;
  int workers = 0;  // 0 = all cores
  std::string output_dir = "optrad_out";

  struct Inputs {
    std::string train;
    std::string test;
    std::string basis_dir;  // defaults to output_dir
    std::string model_dir;  // defaults to output_dir
    std::string features;   // select: feature blob (defaults by order)
    std::string source_features;  // gfre pair mode
    std::string target_features;
  } inputs;

  BasisSpec basis;
  int grid_points = 600;

  struct Contraction {
    std::string method = "pca";  // none | pca | pcovr
    SpeciesMode species_mode = SpeciesMode::Combined;
    CenterMode center_mode = CenterMode::Agnostic;
    int qmax = 8;
    double alpha = 0.5;
    double ridge = 1e-6;
  } contraction;

  struct Features {
    std::string kind = "soap";  // soap | nice
    NiceSettings nice;          // nu_max also bounds soap (<= 2)
  } features;

  struct Selection {
    std::string method = "cur";  // cur | fps
    int k = 10;
    int start = 0;
    int order = 2;
  } selection;

  struct Gfre {
    std::string mode = "pair";  // pair | curve
    double train_fraction = 0.5;
    double ridge = 1e-8;
    std::optional<std::uint64_t> seed;
    std::vector<int> qmax_values{2, 4, 6, 8};
    int reference_nmax = 16;
  } gfre;

  struct ModelSettings {
    std::string kind = "linear";  // linear | kernel_poly
    double lambda = 1e-6;
    int zeta = 4;
    int order = -1;  // feature body order; -1 = features.nice.nu_max
    bool use_forces = false;
    double force_weight = 1.0;
    bool baseline = true;
    int folds = 5;
    std::optional<std::uint64_t> fold_seed;
    std::string target = "per_structure";  // per_structure | per_atom
  } model;

  struct Check {
    std::string table;  // optional table blob to audit
    int probes = 1000;
    int environments = 6;
  } check;

  void validate() const;
  std::string basis_dir() const;
  std::string model_dir() const;
  std::uint64_t gfre_seed() const { return gfre.seed.value_or(seed); }
  std::uint64_t fold_seed() const { return model.fold_seed.value_or(seed); }
};

JobConfig parse_job_config(const json& j);
/// Fully resolved configuration; parsing it yields an identical job.
json effective_config(const JobConfig& c);

struct CommandResult {
  json report;
  std::vector<std::string> warnings;
  bool passed = true;  // false when `check` finds a failing property
};

const std::vector<std::string>& command_names();

/// Runs one CLI verb. Throws ValidationError / RuntimeError on failure.
CommandResult run_command(const std::string& verb, const JobConfig& config);

}  // namespace optrad

#endif  // OPTRAD_PIPELINE_HPP_

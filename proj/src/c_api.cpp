#include "optrad/optrad.h"

#include <cstring>
#include <string>
#include <vector>

#include "optrad/correlations.hpp"
#include "optrad/density.hpp"
#include "optrad/error.hpp"
#include "optrad/pipeline.hpp"
#include "optrad/radial.hpp"
#include "optrad/structures.hpp"

struct optrad_structures {
  std::vector<optrad::Structure> frames;
};

struct optrad_table {
  optrad::RadialTable table;
};

namespace {

thread_local std::string last_error;

template <typename F>
optrad_status guarded(F&& fn) {
  try {
    fn();
    last_error.clear();
    return OPTRAD_OK;
  } catch (const optrad::ValidationError& e) {
    last_error = e.what();
    return OPTRAD_ERROR_VALIDATION;
  } catch (const std::invalid_argument& e) {
    last_error = e.what();
    return OPTRAD_ERROR_VALIDATION;
  } catch (const optrad::json::exception& e) {
    last_error = std::string("cli: ") + e.what();
    return OPTRAD_ERROR_VALIDATION;
  } catch (const std::exception& e) {
    last_error = e.what();
    return OPTRAD_ERROR_RUNTIME;
  } catch (...) {
    last_error = "unknown error";
    return OPTRAD_ERROR_RUNTIME;
  }
}

void require(const void* p, const char* what) {
  if (!p) throw optrad::ValidationError("api", std::string(what) + " is NULL");
}

char* duplicate(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

const optrad::Structure& frame_of(const optrad_structures* s, size_t frame) {
  require(s, "structures");
  if (frame >= s->frames.size()) {
    throw optrad::ValidationError("api", "frame index out of range");
  }
  return s->frames[frame];
}

}  // namespace

extern "C" {

const char* optrad_version(void) { return "0.1.0"; }

const char* optrad_last_error(void) { return last_error.c_str(); }

void optrad_string_free(char* s) { delete[] s; }

optrad_status optrad_run_command(const char* verb, const char* config_json,
                                 const char* output_dir, int workers,
                                 int64_t seed, char** report_json) {
  return guarded([&] {
    require(verb, "verb");
    require(config_json, "config_json");
    require(report_json, "report_json");
    *report_json = nullptr;
    optrad::json j;
    try {
      j = optrad::json::parse(config_json);
    } catch (const optrad::json::parse_error& e) {
      throw optrad::ValidationError("cli", std::string("malformed config: ") + e.what());
    }
    auto cfg = optrad::parse_job_config(j);
    if (output_dir) cfg.output_dir = output_dir;
    if (workers >= 0) cfg.workers = workers;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    const auto res = optrad::run_command(verb, cfg);
    const optrad::json out = {
        {"report", res.report}, {"warnings", res.warnings}, {"passed", res.passed}};
    *report_json = duplicate(out.dump(2));
  });
}

optrad_status optrad_structures_read(const char* path, optrad_structures** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new optrad_structures{optrad::read_extxyz(path)};
  });
}

optrad_status optrad_structures_parse(const char* text, optrad_structures** out) {
  return guarded([&] {
    require(text, "text");
    require(out, "out");
    *out = new optrad_structures{optrad::parse_extxyz(text)};
  });
}

size_t optrad_structures_count(const optrad_structures* s) {
  return s ? s->frames.size() : 0;
}

optrad_status optrad_structures_atom_count(const optrad_structures* s, size_t frame,
                                           size_t* atoms) {
  return guarded([&] {
    require(atoms, "atoms");
    *atoms = frame_of(s, frame).size();
  });
}

optrad_status optrad_structures_energy(const optrad_structures* s, size_t frame,
                                       int* has_energy, double* energy) {
  return guarded([&] {
    require(has_energy, "has_energy");
    require(energy, "energy");
    const auto& e = frame_of(s, frame).energy;
    *has_energy = e ? 1 : 0;
    *energy = e.value_or(0.0);
  });
}

void optrad_structures_free(optrad_structures* s) { delete s; }

optrad_status optrad_table_build(const char* basis_json, const int* species,
                                 size_t species_count, int grid_points, int workers,
                                 optrad_table** out) {
  return guarded([&] {
    require(basis_json, "basis_json");
    require(out, "out");
    if (species_count == 0) throw optrad::ValidationError("api", "no species given");
    require(species, "species");
    const auto spec = optrad::basis_spec_from_json(optrad::json::parse(basis_json));
    std::vector<int> z(species, species + species_count);
    *out = new optrad_table{
        optrad::build_table(spec, z, nullptr, -1, grid_points, workers)};
  });
}

optrad_status optrad_table_load(const char* path, optrad_table** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new optrad_table{optrad::RadialTable::from_blob(optrad::read_blob(path))};
  });
}

optrad_status optrad_table_save(const optrad_table* t, const char* path) {
  return guarded([&] {
    require(t, "table");
    require(path, "path");
    optrad::write_blob(path, t->table.to_blob());
  });
}

optrad_status optrad_table_eval(const optrad_table* t, int species, int channel,
                                int l, double r, double* value, double* derivative) {
  return guarded([&] {
    require(t, "table");
    require(value, "value");
    const auto [v, d] = optrad::eval_table(t->table, species, channel, l, r);
    *value = v;
    if (derivative) *derivative = d;
  });
}

optrad_status optrad_table_channel_count(const optrad_table* t, int l,
                                         size_t* count) {
  return guarded([&] {
    require(t, "table");
    require(count, "count");
    if (l < 0 || l > t->table.lmax()) {
      throw optrad::ValidationError("api", "l out of range");
    }
    *count = t->table.channels(l).size();
  });
}

void optrad_table_free(optrad_table* t) { delete t; }

optrad_status optrad_powerspectrum(const optrad_structures* s, size_t frame,
                                   const optrad_table* t, double* values,
                                   size_t capacity, size_t* rows, size_t* cols) {
  return guarded([&] {
    require(t, "table");
    require(rows, "rows");
    require(cols, "cols");
    const auto& st = frame_of(s, frame);
    const auto envs = optrad::neighbor_list(st, t->table.spec().rcut, frame);
    std::vector<Eigen::VectorXd> ps;
    for (const auto& e : envs) {
      ps.push_back(optrad::powerspectrum(optrad::density_coeffs(e, t->table)));
    }
    *rows = ps.size();
    *cols = ps.empty() ? 0 : static_cast<size_t>(ps.front().size());
    if (!values) return;
    if (capacity < *rows * *cols) {
      throw optrad::ValidationError("api", "output buffer too small");
    }
    for (size_t i = 0; i < ps.size(); ++i) {
      std::memcpy(values + i * *cols, ps[i].data(), *cols * sizeof(double));
    }
  });
}

}  // extern "C"

#ifndef OPTRAD_H_
#define OPTRAD_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#if defined(OPTRAD_BUILDING_LIBRARY)
#define OPTRAD_API __declspec(dllexport)
#else
#define OPTRAD_API __declspec(dllimport)
#endif
#else
#define OPTRAD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
  OPTRAD_OK = 0,
  OPTRAD_ERROR_VALIDATION = 1,
  OPTRAD_ERROR_RUNTIME = 2
} optrad_status;

typedef struct optrad_structures optrad_structures;
typedef struct optrad_table optrad_table;

OPTRAD_API const char* optrad_version(void);

/// Message of the last failed call on this thread ("" when none).
OPTRAD_API const char* optrad_last_error(void);

/// Frees strings returned through char** out-parameters.
OPTRAD_API void optrad_string_free(char* s);

/// Runs a pipeline verb on a JSON job configuration. output_dir may be NULL;
/// workers < 0 and seed < 0 keep the configured values. On success
/// *report_json receives {"report":..., "warnings":[...], "passed":bool}.
/// A failing `check` still returns OPTRAD_OK with passed = false.
OPTRAD_API optrad_status optrad_run_command(const char* verb,
                                            const char* config_json,
                                            const char* output_dir,
                                            int workers, int64_t seed,
                                            char** report_json);

/// Extended-XYZ frames.
OPTRAD_API optrad_status optrad_structures_read(const char* path,
                                                optrad_structures** out);
OPTRAD_API optrad_status optrad_structures_parse(const char* text,
                                                 optrad_structures** out);
OPTRAD_API size_t optrad_structures_count(const optrad_structures* s);
OPTRAD_API optrad_status optrad_structures_atom_count(const optrad_structures* s,
                                                      size_t frame,
                                                      size_t* atoms);
/// *has_energy is 0 when the frame carries no energy.
OPTRAD_API optrad_status optrad_structures_energy(const optrad_structures* s,
                                                  size_t frame, int* has_energy,
                                                  double* energy);
OPTRAD_API void optrad_structures_free(optrad_structures* s);

/// Primitive radial table from a JSON basis specification.
OPTRAD_API optrad_status optrad_table_build(const char* basis_json,
                                            const int* species,
                                            size_t species_count,
                                            int grid_points, int workers,
                                            optrad_table** out);
OPTRAD_API optrad_status optrad_table_load(const char* path, optrad_table** out);
OPTRAD_API optrad_status optrad_table_save(const optrad_table* t,
                                           const char* path);
/// Splined integral of channel `channel` at angular momentum l for a
/// neighbor of element `species` at distance r, with its r-derivative.
OPTRAD_API optrad_status optrad_table_eval(const optrad_table* t, int species,
                                           int channel, int l, double r,
                                           double* value, double* derivative);
OPTRAD_API optrad_status optrad_table_channel_count(const optrad_table* t,
                                                    int l, size_t* count);
OPTRAD_API void optrad_table_free(optrad_table* t);

/// Powerspectrum of every environment of frame `frame` (rows) computed with
/// table t; writes a rows x cols row-major buffer when values is non-NULL
/// and capacity suffices. Call with values = NULL to query the shape.
OPTRAD_API optrad_status optrad_powerspectrum(const optrad_structures* s,
                                              size_t frame,
                                              const optrad_table* t,
                                              double* values, size_t capacity,
                                              size_t* rows, size_t* cols);

#ifdef __cplusplus
}
#endif

#endif  // OPTRAD_H_

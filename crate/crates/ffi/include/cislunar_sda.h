#ifndef CISLUNAR_SDA_H
#define CISLUNAR_SDA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CsdaStatus {
  CSDA_STATUS_OK = 0,
  CSDA_STATUS_NULL_POINTER = 1,
  CSDA_STATUS_INVALID_ARGUMENT = 2,
  CSDA_STATUS_CONFIG_ERROR = 3,
  CSDA_STATUS_RUNTIME_ERROR = 4,
  CSDA_STATUS_INDEX_OUT_OF_RANGE = 5,
  /**
   * The target is not illuminated or the geometry is degenerate.
   */
  CSDA_STATUS_NOT_VISIBLE = 6,
  CSDA_STATUS_PANIC = 7,
} CsdaStatus;

/**
 * Parsed run configuration.
 */
typedef struct CsdaConfig CsdaConfig;

/**
 * Corrected periodic-orbit library.
 */
typedef struct CsdaLibrary CsdaLibrary;

/**
 * Propagated arc with dense output.
 */
typedef struct CsdaTrajectory CsdaTrajectory;

/**
 * One library member. Nondimensional rotating-frame units.
 */
typedef struct CsdaOrbit {
  /**
   * x, y, z, vx, vy, vz at the perpendicular x-axis crossing.
   */
  double state[6];
  double period;
  double stability_index;
  double jacobi;
} CsdaOrbit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *csda_version(void);

/**
 * Message of the last failed call on this thread. Writes at most `len`
 * bytes including the terminator; returns the size needed.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t csda_last_error(char *buf, size_t len);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CsdaStatus csda_config_default(struct CsdaConfig **out);

/**
 * Parse and validate a TOML configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
enum CsdaStatus csda_config_from_toml(const char *toml, struct CsdaConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from `csda_config_*` not yet freed.
 */
void csda_config_free(struct CsdaConfig *cfg);

/**
 * Master seed of the configuration.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CsdaStatus csda_config_seed(const struct CsdaConfig *cfg, uint64_t *out);

/**
 * Jacobi constant of a nondimensional state.
 *
 * # Safety
 * `state` must point to 6 doubles; other pointers must be valid.
 */
enum CsdaStatus csda_jacobi_constant(const struct CsdaConfig *cfg,
                                     const double *state,
                                     double *out);

/**
 * Propagate `state` from `t0` to `tf` (either direction) at tolerance `tol`.
 *
 * # Safety
 * `state` must point to 6 doubles; other pointers must be valid.
 */
enum CsdaStatus csda_propagate(const struct CsdaConfig *cfg,
                               const double *state,
                               double t0,
                               double tf,
                               double tol,
                               struct CsdaTrajectory **out);

/**
 * State at time `t` inside the propagated span.
 *
 * # Safety
 * `out` must point to 6 writable doubles; `traj` must be a live handle.
 */
enum CsdaStatus csda_trajectory_state(const struct CsdaTrajectory *traj, double t, double *out);

/**
 * State at the end of the propagated span.
 *
 * # Safety
 * `out` must point to 6 writable doubles; `traj` must be a live handle.
 */
enum CsdaStatus csda_trajectory_final(const struct CsdaTrajectory *traj, double *out);

/**
 * # Safety
 * `traj` must be null or a live handle.
 */
void csda_trajectory_free(struct CsdaTrajectory *traj);

/**
 * Build the orbit library described by the configuration's `[library]` table.
 * Seeds that fail to correct are skipped.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CsdaStatus csda_library_build(const struct CsdaConfig *cfg, struct CsdaLibrary **out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum CsdaStatus csda_library_len(const struct CsdaLibrary *lib, size_t *out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum CsdaStatus csda_library_orbit(const struct CsdaLibrary *lib,
                                   size_t index,
                                   struct CsdaOrbit *out);

/**
 * Family tag of a library member (e.g. `l2_halo_south`), NUL-terminated
 * and truncated to `len` bytes. `needed` receives the full size.
 *
 * # Safety
 * `buf` must point to `len` writable bytes; `needed` may be null.
 */
enum CsdaStatus csda_library_family(const struct CsdaLibrary *lib,
                                    size_t index,
                                    char *buf,
                                    size_t len,
                                    size_t *needed);

/**
 * # Safety
 * `lib` must be null or a live handle.
 */
void csda_library_free(struct CsdaLibrary *lib);

/**
 * Visual magnitude of a diffuse sphere (C_d = 0.3) of radius `radius_m`.
 * `r_ot` is observer→target and `r_st` Sun→target, both nondimensional.
 *
 * # Safety
 * `r_ot` and `r_st` must point to 3 doubles; other pointers must be valid.
 */
enum CsdaStatus csda_sphere_magnitude(const struct CsdaConfig *cfg,
                                      const double *r_ot,
                                      const double *r_st,
                                      double radius_m,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CISLUNAR_SDA_H */

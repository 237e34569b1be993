#ifndef APEX_CORE_IMPL_H
#define APEX_CORE_IMPL_H

/* Batched single-track dynamics integration (RK4, fixed substeps).
 * state:  (b_count, 8) row-major [x, y, yaw, vx, vy, r, delta, omega], updated in place
 * cmd:    (b_count, 2) [delta_ref, omega_ref]
 * params: (b_count, 20), column order as in modelmath.PARAM_FIELDS
 * Returns -1 on success, else the first env index whose state left the
 * finite range; *bad_substep then holds the substep index. */
int ax_integrate_batch(double* state, const double* cmd, const double* params,
                       int b_count, double dt, int substeps, int model_actuators,
                       int* bad_substep);

/* Batched Frenet projection.  Grid arrays have m+1 entries (last row
 * duplicates the first).  hint is in/out (-1 requests a full search). */
void ax_frenet_batch(const double* xs, const double* ys, const double* theta,
                     int m, double ds, double total,
                     const double* qx, const double* qy, const double* yaw,
                     long long* hint, int b_count,
                     double* s_out, double* n_out, double* u_out);

/* Batched lookahead interpolation of curvature and width. */
void ax_lookahead_batch(const double* curv, const double* width,
                        int m, double ds, double total,
                        const double* s, int b_count, int n_points,
                        double spacing, double* c_out, double* w_out);

#endif

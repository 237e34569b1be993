# cython: boundscheck=False, wraparound=False
"""Cython wrapper around the C kernel core (see core_impl.c)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "compiled"

cdef extern from "core_impl.h":
    int ax_integrate_batch(double* state, const double* cmd, const double* params,
                           int b_count, double dt, int substeps, int model_actuators,
                           int* bad_substep) nogil
    void ax_frenet_batch(const double* xs, const double* ys, const double* theta,
                         int m, double ds, double total,
                         const double* qx, const double* qy, const double* yaw,
                         long long* hint, int b_count,
                         double* s_out, double* n_out, double* u_out) nogil
    void ax_lookahead_batch(const double* curv, const double* width,
                            int m, double ds, double total,
                            const double* s, int b_count, int n_points,
                            double spacing, double* c_out, double* w_out) nogil


def integrate_batch(double[:, ::1] state, double[:, ::1] cmd,
                    double[:, ::1] params, double dt, int substeps,
                    bint model_actuators=True):
    """Advance (B, 8) states in place; returns (bad_env, bad_substep)."""
    cdef int b_count = state.shape[0]
    cdef int bad_ss = -1
    cdef int bad_env
    if state.shape[1] != 8 or cmd.shape[1] != 2 or params.shape[1] != 20:
        raise ValueError("expected state (B,8), cmd (B,2), params (B,20)")
    if cmd.shape[0] != b_count or params.shape[0] != b_count:
        raise ValueError("batch size mismatch")
    if b_count == 0:
        return -1, -1
    with nogil:
        bad_env = ax_integrate_batch(&state[0, 0], &cmd[0, 0], &params[0, 0],
                                     b_count, dt, substeps, model_actuators,
                                     &bad_ss)
    if bad_env == -2:
        raise MemoryError("kernel scratch allocation failed")
    return bad_env, bad_ss


def frenet_batch(double[::1] xs, double[::1] ys, double[::1] theta,
                 double ds, double total_length,
                 double[::1] qx, double[::1] qy, double[::1] yaw,
                 long long[::1] hint):
    """Project (B,) global poses onto the centerline; hint updated in place."""
    cdef int m = xs.shape[0] - 1
    cdef int b_count = qx.shape[0]
    if ys.shape[0] != m + 1 or theta.shape[0] != m + 1:
        raise ValueError("grid array length mismatch")
    if qy.shape[0] != b_count or yaw.shape[0] != b_count or hint.shape[0] != b_count:
        raise ValueError("batch size mismatch")
    s_out = np.empty(b_count, dtype=np.float64)
    n_out = np.empty(b_count, dtype=np.float64)
    u_out = np.empty(b_count, dtype=np.float64)
    cdef double[::1] s_v = s_out
    cdef double[::1] n_v = n_out
    cdef double[::1] u_v = u_out
    if b_count == 0:
        return s_out, n_out, u_out
    with nogil:
        ax_frenet_batch(&xs[0], &ys[0], &theta[0], m, ds, total_length,
                        &qx[0], &qy[0], &yaw[0], &hint[0], b_count,
                        &s_v[0], &n_v[0], &u_v[0])
    return s_out, n_out, u_out


def lookahead_batch(double[::1] curv, double[::1] width,
                    double ds, double total_length,
                    double[::1] s, int n_points, double spacing):
    """Interpolated curvature/width at s + k*spacing; returns (B, N) pairs."""
    cdef int m = curv.shape[0] - 1
    cdef int b_count = s.shape[0]
    if width.shape[0] != m + 1:
        raise ValueError("grid array length mismatch")
    c_out = np.empty((b_count, n_points), dtype=np.float64)
    w_out = np.empty((b_count, n_points), dtype=np.float64)
    cdef double[:, ::1] c_v = c_out
    cdef double[:, ::1] w_v = w_out
    if b_count == 0:
        return c_out, w_out
    with nogil:
        ax_lookahead_batch(&curv[0], &width[0], m, ds, total_length,
                           &s[0], b_count, n_points, spacing,
                           &c_v[0, 0], &w_v[0, 0])
    return c_out, w_out

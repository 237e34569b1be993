/* Compiled kernel core.
 *
 * Mirrors the equations in modelmath.py / pybackend.py.  The integrator
 * works on SoA chunks so the stage loops auto-vectorize (libmvec); sin and
 * cos of the same angle are computed in separate passes because gcc's
 * sincos fusion defeats the vectorizer.  Chunks are independent, so OpenMP
 * scheduling cannot change results.
 *
 * Built with -ffast-math: finiteness checks use the !(|x| < LIMIT) idiom,
 * which catches NaN and inf without relying on isfinite().
 */

#include "core_impl.h"

#include <math.h>
#include <stdlib.h>
#include <string.h>

#define CHUNK 128

static const double GRAVITY = 9.81;
static const double VX_SAFE = 0.3;
static const double V_CONTACT_MIN = 0.3;
static const double CREEP_BLEND_SPEED = 0.1;
static const double SIGMA_MIN = 1e-6;
static const double ROLL_SMOOTH = 0.05;
static const double BLOWUP_LIMIT = 1e12;

enum { P_M, P_IZ, P_LF, P_LR, P_RW, P_MU,
       P_BF, P_CF, P_DF, P_EF, P_BR, P_CR, P_DR, P_ER,
       P_TDELTA, P_TOMEGA, P_CDRAG, P_CROLL, P_DELTA_MAX, P_OMEGA_MAX,
       N_PARAMS };

typedef struct {
    double st[8][CHUNK];      /* SoA state */
    double cmd0[CHUNK], cmd1[CHUNK];
    double pm[N_PARAMS][CHUNK];
    double ytmp[8][CHUNK];
    double k1[8][CHUNK], k2[8][CHUNK], k3[8][CHUNK], k4[8][CHUNK];
    double cy[CHUNK], sy[CHUNK], cdl[CHUNK], sdl[CHUNK];
} Scratch;

static void deriv_block(int n, Scratch* sc, const double* const* y,
                        double* const* out, int model_actuators)
{
    const double* yaw = y[2];
    const double* vx = y[3];
    const double* vy = y[4];
    const double* r = y[5];
    const double* dl = y[6];
    const double* om = y[7];
    const double* dref = sc->cmd0;
    const double* oref = sc->cmd1;
    const double* p_m = sc->pm[P_M];
    const double* p_iz = sc->pm[P_IZ];
    const double* p_lf = sc->pm[P_LF];
    const double* p_lr = sc->pm[P_LR];
    const double* p_rw = sc->pm[P_RW];
    const double* p_mu = sc->pm[P_MU];
    const double* p_bf = sc->pm[P_BF];
    const double* p_cf = sc->pm[P_CF];
    const double* p_df = sc->pm[P_DF];
    const double* p_ef = sc->pm[P_EF];
    const double* p_br = sc->pm[P_BR];
    const double* p_cr = sc->pm[P_CR];
    const double* p_dr = sc->pm[P_DR];
    const double* p_er = sc->pm[P_ER];
    const double* p_td = sc->pm[P_TDELTA];
    const double* p_to = sc->pm[P_TOMEGA];
    const double* p_cd = sc->pm[P_CDRAG];
    const double* p_cl = sc->pm[P_CROLL];
    double* cy = sc->cy;
    double* sy = sc->sy;
    double* cdl = sc->cdl;
    double* sdl = sc->sdl;
    int b;

    /* sin/cos in separate passes: gcc fuses same-argument sin+cos into
     * sincos, which has no vector variant */
#pragma omp simd
    for (b = 0; b < n; b++) { cy[b] = cos(yaw[b]); cdl[b] = cos(dl[b]); }
#pragma omp simd
    for (b = 0; b < n; b++) { sy[b] = sin(yaw[b]); sdl[b] = sin(dl[b]); }

#pragma omp simd
    for (b = 0; b < n; b++) {
        double lf = p_lf[b], lr = p_lr[b];
        double vx_s = vx[b] > VX_SAFE ? vx[b] : VX_SAFE;
        double alpha_f = dl[b] - atan((vy[b] + lf * r[b]) / vx_s);
        double alpha_r = -atan((vy[b] - lr * r[b]) / vx_s);

        double v_cf = (vy[b] + lf * r[b]) * sdl[b] + vx[b] * cdl[b];
        double v_cr = vx[b];
        double den_f = fabs(v_cf); if (den_f < V_CONTACT_MIN) den_f = V_CONTACT_MIN;
        double den_r = fabs(v_cr); if (den_r < V_CONTACT_MIN) den_r = V_CONTACT_MIN;
        double wheel_v = om[b] * p_rw[b];
        double kappa_f = (wheel_v - v_cf) / den_f;
        double kappa_r = (wheel_v - v_cr) / den_r;

        double wheelbase = lf + lr;
        double fz_f = p_m[b] * GRAVITY * lr / wheelbase;
        double fz_r = p_m[b] * GRAVITY * lf / wheelbase;

        double lam = sqrt(vx[b] * vx[b] + vy[b] * vy[b]) / CREEP_BLEND_SPEED;
        if (lam > 1.0) lam = 1.0;

        /* front axle */
        double peak_f = p_mu[b] * fz_f * p_df[b];
        double sigma = sqrt(kappa_f * kappa_f + alpha_f * alpha_f);
        double sigma_s = sigma > SIGMA_MIN ? sigma : SIGMA_MIN;
        double bs = p_bf[b] * sigma_s;
        double shape = sin(p_cf[b] * atan(bs - p_ef[b] * (bs - atan(bs))));
        double per_slip = peak_f * shape / sigma_s;
        double lin_x = p_cf[b] * p_bf[b] * kappa_f;
        double lin_y = p_cf[b] * p_bf[b] * alpha_f;
        double creep_scale = peak_f / sqrt(1.0 + lin_x * lin_x + lin_y * lin_y);
        double fx_f = lam * per_slip * kappa_f + (1.0 - lam) * creep_scale * lin_x;
        double fy_f = lam * per_slip * alpha_f + (1.0 - lam) * creep_scale * lin_y;

        /* rear axle */
        double peak_r = p_mu[b] * fz_r * p_dr[b];
        double sigma_r = sqrt(kappa_r * kappa_r + alpha_r * alpha_r);
        double sigma_rs = sigma_r > SIGMA_MIN ? sigma_r : SIGMA_MIN;
        double bsr = p_br[b] * sigma_rs;
        double shape_r = sin(p_cr[b] * atan(bsr - p_er[b] * (bsr - atan(bsr))));
        double per_slip_r = peak_r * shape_r / sigma_rs;
        double lin_xr = p_cr[b] * p_br[b] * kappa_r;
        double lin_yr = p_cr[b] * p_br[b] * alpha_r;
        double creep_scale_r = peak_r / sqrt(1.0 + lin_xr * lin_xr + lin_yr * lin_yr);
        double fx_r = lam * per_slip_r * kappa_r + (1.0 - lam) * creep_scale_r * lin_xr;
        double fy_r = lam * per_slip_r * alpha_r + (1.0 - lam) * creep_scale_r * lin_yr;

        double resist = p_cd[b] * vx[b] * fabs(vx[b])
            + p_cl[b] * vx[b] / sqrt(vx[b] * vx[b] + ROLL_SMOOTH * ROLL_SMOOTH);

        double fx_body = fx_f * cdl[b] - fy_f * sdl[b] + fx_r - resist;
        double fy_body = fx_f * sdl[b] + fy_f * cdl[b] + fy_r;
        double moment = lf * (fy_f * cdl[b] + fx_f * sdl[b]) - lr * fy_r;

        out[0][b] = vx[b] * cy[b] - vy[b] * sy[b];
        out[1][b] = vx[b] * sy[b] + vy[b] * cy[b];
        out[2][b] = r[b];
        out[3][b] = fx_body / p_m[b] + r[b] * vy[b];
        out[4][b] = fy_body / p_m[b] - r[b] * vx[b];
        out[5][b] = moment / p_iz[b];
        if (model_actuators) {
            out[6][b] = (dref[b] - dl[b]) / p_td[b];
            out[7][b] = (oref[b] - om[b]) / p_to[b];
        } else {
            out[6][b] = 0.0;
            out[7][b] = 0.0;
        }
    }
}

static int integrate_chunk(Scratch* sc, int n, double dt, int substeps,
                           int model_actuators, int* bad_local, int* bad_ss)
{
    const double h = dt / substeps;
    const double h2 = 0.5 * h;
    const double h6 = h / 6.0;
    const double* yp[8];
    double* op[8];
    int ss, k, b;

    for (ss = 0; ss < substeps; ss++) {
        if (!model_actuators) {
            for (b = 0; b < n; b++) {
                double dmax = sc->pm[P_DELTA_MAX][b];
                double omax = sc->pm[P_OMEGA_MAX][b];
                double d = sc->cmd0[b];
                double o = sc->cmd1[b];
                if (d > dmax) d = dmax; else if (d < -dmax) d = -dmax;
                if (o > omax) o = omax; else if (o < 0.0) o = 0.0;
                sc->st[6][b] = d;
                sc->st[7][b] = o;
            }
        }
        for (k = 0; k < 8; k++) { yp[k] = sc->st[k]; op[k] = sc->k1[k]; }
        deriv_block(n, sc, yp, op, model_actuators);

        for (k = 0; k < 8; k++)
#pragma omp simd
            for (b = 0; b < n; b++) sc->ytmp[k][b] = sc->st[k][b] + h2 * sc->k1[k][b];
        for (k = 0; k < 8; k++) { yp[k] = sc->ytmp[k]; op[k] = sc->k2[k]; }
        deriv_block(n, sc, yp, op, model_actuators);

        for (k = 0; k < 8; k++)
#pragma omp simd
            for (b = 0; b < n; b++) sc->ytmp[k][b] = sc->st[k][b] + h2 * sc->k2[k][b];
        for (k = 0; k < 8; k++) { op[k] = sc->k3[k]; }
        deriv_block(n, sc, yp, op, model_actuators);

        for (k = 0; k < 8; k++)
#pragma omp simd
            for (b = 0; b < n; b++) sc->ytmp[k][b] = sc->st[k][b] + h * sc->k3[k][b];
        for (k = 0; k < 8; k++) { op[k] = sc->k4[k]; }
        deriv_block(n, sc, yp, op, model_actuators);

        for (k = 0; k < 8; k++)
#pragma omp simd
            for (b = 0; b < n; b++)
                sc->st[k][b] += h6 * (sc->k1[k][b] + 2.0 * sc->k2[k][b]
                                      + 2.0 * sc->k3[k][b] + sc->k4[k][b]);

        for (b = 0; b < n; b++) {
            double dmax = sc->pm[P_DELTA_MAX][b];
            double omax = sc->pm[P_OMEGA_MAX][b];
            if (sc->st[6][b] > dmax) sc->st[6][b] = dmax;
            else if (sc->st[6][b] < -dmax) sc->st[6][b] = -dmax;
            if (sc->st[7][b] > omax) sc->st[7][b] = omax;
            else if (sc->st[7][b] < 0.0) sc->st[7][b] = 0.0;
        }
        for (b = 0; b < n; b++) {
            for (k = 0; k < 8; k++) {
                if (!(fabs(sc->st[k][b]) < BLOWUP_LIMIT)) {
                    *bad_local = b;
                    *bad_ss = ss;
                    return 1;
                }
            }
        }
    }
    return 0;
}

int ax_integrate_batch(double* state, const double* cmd, const double* params,
                       int b_count, double dt, int substeps, int model_actuators,
                       int* bad_substep)
{
    int n_chunks = (b_count + CHUNK - 1) / CHUNK;
    int* bad_env = malloc(sizeof(int) * (size_t)n_chunks);
    int* bad_ss = malloc(sizeof(int) * (size_t)n_chunks);
    int c, result = -1;

    if (!bad_env || !bad_ss) { free(bad_env); free(bad_ss); *bad_substep = -2; return -2; }

#pragma omp parallel for schedule(static)
    for (c = 0; c < n_chunks; c++) {
        Scratch* sc = malloc(sizeof(Scratch));
        int b0 = c * CHUNK;
        int n = b_count - b0 < CHUNK ? b_count - b0 : CHUNK;
        int k, b, loc = -1, loc_ss = -1;
        bad_env[c] = -1;
        bad_ss[c] = -1;
        if (!sc) { bad_env[c] = -2; continue; }
        for (b = 0; b < n; b++) {
            for (k = 0; k < 8; k++) sc->st[k][b] = state[(size_t)(b0 + b) * 8 + k];
            sc->cmd0[b] = cmd[(size_t)(b0 + b) * 2];
            sc->cmd1[b] = cmd[(size_t)(b0 + b) * 2 + 1];
            for (k = 0; k < N_PARAMS; k++)
                sc->pm[k][b] = params[(size_t)(b0 + b) * N_PARAMS + k];
        }
        if (integrate_chunk(sc, n, dt, substeps, model_actuators, &loc, &loc_ss)) {
            bad_env[c] = b0 + loc;
            bad_ss[c] = loc_ss;
        }
        for (b = 0; b < n; b++)
            for (k = 0; k < 8; k++) state[(size_t)(b0 + b) * 8 + k] = sc->st[k][b];
        free(sc);
    }

    *bad_substep = -1;
    for (c = 0; c < n_chunks; c++) {
        if (bad_env[c] != -1) { result = bad_env[c]; *bad_substep = bad_ss[c]; break; }
    }
    free(bad_env);
    free(bad_ss);
    return result;
}

/* ------------------------------------------------------------------ */

#define K_WINDOW 40
#define N_ITER 12
#define RES_TOL 1e-9

static double wrap_pi(double a)
{
    double w = fmod(a, 2.0 * M_PI);
    if (w > M_PI) w -= 2.0 * M_PI;
    else if (w <= -M_PI) w += 2.0 * M_PI;
    return w;
}

static long long mod_ll(long long a, long long m)
{
    long long r = a % m;
    return r < 0 ? r + m : r;
}

void ax_frenet_batch(const double* xs, const double* ys, const double* theta,
                     int m, double ds, double total,
                     const double* qx, const double* qy, const double* yaw,
                     long long* hint, int b_count,
                     double* s_out, double* n_out, double* u_out)
{
    int bi;
#pragma omp parallel for schedule(static) if (b_count >= 64)
    for (bi = 0; bi < b_count; bi++) {
        const double px = qx[bi], py = qy[bi];
        long long j, i, i_fb;
        double t, n, t_fb, n_fb;
        double seg_x, seg_y, dth, th, sin_t, cos_t, rx, ry;
        int it;

        /* vertex search */
        if (hint[bi] >= 0 && hint[bi] < m) {
            long long h = hint[bi], best = -1;
            int off, best_off = 0;
            double best_d = 1e300;
            for (off = -K_WINDOW; off <= K_WINDOW; off++) {
                long long ix = mod_ll(h + off, m);
                double dx = xs[ix] - px, dy = ys[ix] - py;
                double d2 = dx * dx + dy * dy;
                if (d2 < best_d) { best_d = d2; best = ix; best_off = off; }
            }
            j = best;
            if (best_off == -K_WINDOW || best_off == K_WINDOW) j = -1;
        } else {
            j = -1;
        }
        if (j < 0) {
            double best_d = 1e300;
            long long ix;
            for (ix = 0; ix < m; ix++) {
                double dx = xs[ix] - px, dy = ys[ix] - py;
                double d2 = dx * dx + dy * dy;
                if (d2 < best_d) { best_d = d2; j = ix; }
            }
        }

        /* initial cell: nearer of the two segments adjacent to vertex j */
        {
            double best_d = 1e300;
            long long cand;
            i = j;
            t = 0.0;
            seg_x = seg_y = 0.0;
            for (cand = j - 1; cand <= j; cand++) {
                long long ix = mod_ll(cand, m);
                double sx = xs[ix + 1] - xs[ix];
                double sy = ys[ix + 1] - ys[ix];
                double tr = ((px - xs[ix]) * sx + (py - ys[ix]) * sy) / (ds * ds);
                double tc = tr < 0.0 ? 0.0 : (tr > 1.0 ? 1.0 : tr);
                double fx = xs[ix] + tc * sx - px;
                double fy = ys[ix] + tc * sy - py;
                double d2 = fx * fx + fy * fy;
                if (d2 <= best_d) {
                    best_d = d2; i = ix; t = tc; seg_x = sx; seg_y = sy;
                }
            }
        }
        n = (seg_x * (py - ys[i]) - seg_y * (px - xs[i])) / ds;
        i_fb = i; t_fb = t; n_fb = n;

        for (it = 0; it < N_ITER; it++) {
            dth = wrap_pi(theta[i + 1] - theta[i]);
            th = theta[i] + t * dth;
            sin_t = sin(th);
            cos_t = cos(th);
            seg_x = xs[i + 1] - xs[i];
            seg_y = ys[i + 1] - ys[i];
            rx = xs[i] + t * seg_x - n * sin_t - px;
            ry = ys[i] + t * seg_y + n * cos_t - py;
            {
                double j11 = seg_x - n * dth * cos_t;
                double j21 = seg_y - n * dth * sin_t;
                double det = j11 * cos_t + j21 * sin_t;
                if (fabs(det) < 1e-300) det = 1e-300;
                t += (-rx * cos_t - ry * sin_t) / det;
                n += (-j11 * ry + j21 * rx) / det;
            }
            if (t < 0.0) { i = mod_ll(i - 1, m); t += 1.0; }
            else if (t > 1.0) { i = mod_ll(i + 1, m); t -= 1.0; }
        }

        dth = wrap_pi(theta[i + 1] - theta[i]);
        th = theta[i] + t * dth;
        rx = xs[i] + t * (xs[i + 1] - xs[i]) - n * sin(th) - px;
        ry = ys[i] + t * (ys[i + 1] - ys[i]) + n * cos(th) - py;
        if (rx * rx + ry * ry > RES_TOL * RES_TOL) {
            i = i_fb; t = t_fb; n = n_fb;
            dth = wrap_pi(theta[i + 1] - theta[i]);
            th = theta[i] + t * dth;
        }

        {
            double s = fmod(((double)i + t) * ds, total);
            if (s < 0.0) s += total;
            s_out[bi] = s;
        }
        n_out[bi] = n;
        u_out[bi] = wrap_pi(yaw[bi] - th);
        hint[bi] = i;
    }
}

void ax_lookahead_batch(const double* curv, const double* width,
                        int m, double ds, double total,
                        const double* s, int b_count, int n_points,
                        double spacing, double* c_out, double* w_out)
{
    int bi, k;
    for (bi = 0; bi < b_count; bi++) {
        for (k = 0; k < n_points; k++) {
            double sq = fmod(s[bi] + k * spacing, total);
            if (sq < 0.0) sq += total;
            double pos = sq / ds;
            long long idx = (long long)pos;
            if (idx > m - 1) idx = m - 1;
            double t = pos - (double)idx;
            c_out[(size_t)bi * n_points + k] =
                curv[idx] * (1.0 - t) + curv[idx + 1] * t;
            w_out[(size_t)bi * n_points + k] =
                width[idx] * (1.0 - t) + width[idx + 1] * t;
        }
    }
}

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loops for the synthetic crowd stepper and best-of-K displacement errors.

Arithmetic mirrors ``_kernels_py`` term for term so both backends agree to
rounding.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, atan2, sin, cos

cnp.import_array()


def social_force_rollout(double[:, ::1] pos0, double[::1] heading0, double[::1] speed,
                         double[:, ::1] goals, double[:, ::1] heading_noise,
                         double dt, double goal_attraction,
                         double avoidance_strength, double avoidance_radius):
    cdef Py_ssize_t n = pos0.shape[0]
    cdef Py_ssize_t n_steps = heading_noise.shape[0]
    out = np.empty((n_steps + 1, n, 2), dtype=np.float64)
    cdef double[:, :, ::1] traj = out
    heading_arr = np.array(heading0, dtype=np.float64)
    cdef double[::1] heading = heading_arr
    seeking_arr = np.ones(n, dtype=np.uint8)
    cdef unsigned char[::1] seeking = seeking_arr
    vel_arr = np.empty((n, 2), dtype=np.float64)
    cdef double[:, ::1] vel = vel_arr
    cdef Py_ssize_t f, i, j
    cdef double gx, gy, dist, desired, diff, vx, vy, rx, ry, d, mag

    for i in range(n):
        traj[0, i, 0] = pos0[i, 0]
        traj[0, i, 1] = pos0[i, 1]

    for f in range(n_steps):
        for i in range(n):
            if seeking[i]:
                gx = goals[i, 0] - traj[f, i, 0]
                gy = goals[i, 1] - traj[f, i, 1]
                dist = sqrt(gx * gx + gy * gy)
                if dist <= speed[i] * dt:
                    seeking[i] = 0
                else:
                    desired = atan2(gy, gx)
                    diff = desired - heading[i]
                    diff = atan2(sin(diff), cos(diff))
                    heading[i] = heading[i] + goal_attraction * diff
            heading[i] = heading[i] + heading_noise[f, i]
            vx = speed[i] * cos(heading[i])
            vy = speed[i] * sin(heading[i])
            if avoidance_strength != 0.0:
                for j in range(n):
                    if j == i:
                        continue
                    rx = traj[f, i, 0] - traj[f, j, 0]
                    ry = traj[f, i, 1] - traj[f, j, 1]
                    d = sqrt(rx * rx + ry * ry)
                    if d > 0.0 and d < avoidance_radius:
                        mag = avoidance_strength * (1.0 - d / avoidance_radius)
                        vx = vx + mag * (rx / d)
                        vy = vy + mag * (ry / d)
            vel[i, 0] = vx
            vel[i, 1] = vy
        for i in range(n):
            traj[f + 1, i, 0] = traj[f, i, 0] + vel[i, 0] * dt
            traj[f + 1, i, 1] = traj[f, i, 1] + vel[i, 1] * dt
    return out


def best_of_k_errors(double[:, :, :, ::1] preds, double[:, :, ::1] gt):
    """Per-agent (minADE, minFDE) for preds (A, K, T, 2) against gt (A, T, 2)."""
    cdef Py_ssize_t n_agents = preds.shape[0]
    cdef Py_ssize_t k_count = preds.shape[1]
    cdef Py_ssize_t horizon = preds.shape[2]
    ade_arr = np.empty(n_agents, dtype=np.float64)
    fde_arr = np.empty(n_agents, dtype=np.float64)
    cdef double[::1] ade = ade_arr
    cdef double[::1] fde = fde_arr
    cdef Py_ssize_t a, k, t
    cdef double dx, dy, total, err, best_ade, best_fde, last
    for a in range(n_agents):
        best_ade = -1.0
        best_fde = -1.0
        for k in range(k_count):
            total = 0.0
            last = 0.0
            for t in range(horizon):
                dx = preds[a, k, t, 0] - gt[a, t, 0]
                dy = preds[a, k, t, 1] - gt[a, t, 1]
                err = sqrt(dx * dx + dy * dy)
                total = total + err
                last = err
            total = total / horizon
            if best_ade < 0.0 or total < best_ade:
                best_ade = total
            if best_fde < 0.0 or last < best_fde:
                best_fde = last
        ade[a] = best_ade
        fde[a] = best_fde
    return ade_arr, fde_arr

"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def social_force_rollout(pos0, heading0, speed, goals, heading_noise,
                         dt, goal_attraction, avoidance_strength, avoidance_radius):
    pos = np.array(pos0, dtype=np.float64)
    heading = np.array(heading0, dtype=np.float64)
    speed = np.asarray(speed, dtype=np.float64)
    goals = np.asarray(goals, dtype=np.float64)
    heading_noise = np.asarray(heading_noise, dtype=np.float64)
    n = pos.shape[0]
    n_steps = heading_noise.shape[0]
    traj = np.empty((n_steps + 1, n, 2), dtype=np.float64)
    traj[0] = pos
    seeking = np.ones(n, dtype=bool)
    for f in range(n_steps):
        cur = traj[f]
        g = goals - cur
        dist = np.sqrt(g[:, 0] * g[:, 0] + g[:, 1] * g[:, 1])
        seeking &= ~(dist <= speed * dt)
        diff = np.arctan2(g[:, 1], g[:, 0]) - heading
        diff = np.arctan2(np.sin(diff), np.cos(diff))
        heading = np.where(seeking, heading + goal_attraction * diff, heading)
        heading = heading + heading_noise[f]
        vx = speed * np.cos(heading)
        vy = speed * np.sin(heading)
        if avoidance_strength != 0.0:
            # Sequential accumulation over j keeps rounding identical to the compiled loop.
            rx = cur[:, None, 0] - cur[None, :, 0]
            ry = cur[:, None, 1] - cur[None, :, 1]
            d = np.sqrt(rx * rx + ry * ry)
            close = (d > 0.0) & (d < avoidance_radius)
            np.fill_diagonal(close, False)
            safe = np.where(close, d, 1.0)
            mag = avoidance_strength * (1.0 - safe / avoidance_radius)
            px = np.where(close, mag * (rx / safe), 0.0)
            py = np.where(close, mag * (ry / safe), 0.0)
            for j in range(n):
                hit = close[:, j]
                vx = np.where(hit, vx + px[:, j], vx)
                vy = np.where(hit, vy + py[:, j], vy)
        traj[f + 1, :, 0] = cur[:, 0] + vx * dt
        traj[f + 1, :, 1] = cur[:, 1] + vy * dt
    return traj


def best_of_k_errors(preds, gt):
    """Per-agent (minADE, minFDE) for preds (A, K, T, 2) against gt (A, T, 2)."""
    preds = np.asarray(preds, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    delta = preds - gt[:, None]
    err = np.sqrt(delta[..., 0] * delta[..., 0] + delta[..., 1] * delta[..., 1])
    ade = err.mean(axis=-1).min(axis=1)
    fde = err[..., -1].min(axis=1)
    return ade, fde

"""Independent brute-force references used to check the fast implementations."""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import CameraModel, longitudinal_distance, project_vehicle
from .risk import VehicleDims, ttc
from .state_estimator import VehicleState
from .tracker import systematic_indices


def ttc_point_sampled(ego: VehicleDims, obj: VehicleState, horizon_s: float = 10.0,
                      dt_s: float = 0.001, obj_dims: Optional[VehicleDims] = None) -> Optional[float]:
    """First sampled time with rectangle overlap, stepping the relative position in a loop."""
    obj_dims = obj_dims or ego
    hx = (ego.width_m + obj_dims.width_m) / 2
    hy = (ego.length_m + obj_dims.length_m) / 2
    steps = int(round(horizon_s / dt_s))
    for k in range(steps + 1):
        t = k * dt_s
        if abs(obj.d_x + obj.v_x * t) <= hx and abs(obj.d_y + obj.v_y * t) <= hy:
            return t
    return None


def ttc_analytic(ego: VehicleDims, obj: VehicleState, horizon_s: float = 10.0,
                 obj_dims: Optional[VehicleDims] = None) -> Optional[float]:
    """Exact entry time from per-axis slab intervals."""
    obj_dims = obj_dims or ego
    lo, hi = 0.0, horizon_s
    for p, v, h in ((obj.d_x, obj.v_x, (ego.width_m + obj_dims.width_m) / 2),
                    (obj.d_y, obj.v_y, (ego.length_m + obj_dims.length_m) / 2)):
        if v == 0:
            if abs(p) > h:
                return None
            continue
        a, b = sorted(((-h - p) / v, (h - p) / v))
        lo, hi = max(lo, a), min(hi, b)
    return lo if lo <= hi else None


def random_scene_objects(rng: np.random.Generator, n: int) -> List[VehicleState]:
    out = []
    for _ in range(n):
        out.append(VehicleState(d_x=float(rng.uniform(-15, 15)), d_y=float(rng.uniform(-60, 60)),
                                v_x=float(rng.uniform(-4, 4)), v_y=float(rng.uniform(-25, 25))))
    return out


def ttc_agreement(n: int = 1000, seed: int = 0, horizon_s: float = 10.0) -> Dict[str, float]:
    """Compare ttc(dt=0.1) with point sampling at dt=0.001 over random objects."""
    rng = np.random.default_rng(seed)
    dims = VehicleDims()
    worst, mismatched, finite = 0.0, 0, 0
    for obj in random_scene_objects(rng, n):
        coarse = ttc(dims, obj, horizon_s, 0.1)
        fine = ttc_point_sampled(dims, obj, horizon_s, 0.001)
        if coarse is not None and fine is not None:
            finite += 1
            worst = max(worst, abs(coarse - fine))
        elif (coarse is None) != (fine is None):
            exact = ttc_analytic(dims, obj, horizon_s + 1.0)
            if exact is None or abs(exact - horizon_s) > 0.1:
                mismatched += 1
    return {"scenes": n, "both_finite": finite, "max_abs_diff_s": worst,
            "finiteness_mismatches": mismatched}


def kalman_1d(zs, x0: float, p0: float, q: float, r: float, a: float = 1.0) -> np.ndarray:
    """Posterior means of x_k = a x_{k-1} + N(0, q), z_k = x_k + N(0, r)."""
    x, p, out = x0, p0, []
    for z in zs:
        x, p = a * x, a * a * p + q
        k = p / (p + r)
        x, p = x + k * (z - x), (1 - k) * p
        out.append(x)
    return np.array(out)


def grid_bayes_1d(zs, x0: float, p0: float, q: float, r: float, a: float = 1.0,
                  half_width: float = 40.0, cells: int = 4001) -> np.ndarray:
    """Posterior means of the same model by dense-grid Bayes recursion."""
    g = np.linspace(x0 - half_width, x0 + half_width, cells)
    post = np.exp(-0.5 * (g - x0) ** 2 / p0)
    post /= post.sum()
    trans = np.exp(-0.5 * (g[:, None] - a * g[None, :]) ** 2 / q)
    trans /= trans.sum(axis=0, keepdims=True)
    out = []
    for z in zs:
        post = trans @ post
        post *= np.exp(-0.5 * (z - g) ** 2 / r)
        post /= post.sum()
        out.append(float(g @ post))
    return np.array(out)


def particle_filter_1d(zs, x0: float, p0: float, q: float, r: float, n: int,
                       rng: np.random.Generator, a: float = 1.0) -> np.ndarray:
    """Bootstrap filter with the tracker's systematic resampler."""
    x = rng.normal(x0, math.sqrt(p0), n)
    out = []
    for z in zs:
        x = a * x + rng.normal(0.0, math.sqrt(q), n)
        log_w = -0.5 * (z - x) ** 2 / r
        w = np.exp(log_w - log_w.max())
        w /= w.sum()
        out.append(float(w @ x))
        x = x[systematic_indices(w, rng)]
    return np.array(out)


def simulate_linear_gaussian(steps: int, x0: float, p0: float, q: float, r: float,
                             rng: np.random.Generator, a: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    x = rng.normal(x0, math.sqrt(p0))
    xs, zs = [], []
    for _ in range(steps):
        x = a * x + rng.normal(0.0, math.sqrt(q))
        xs.append(x)
        zs.append(x + rng.normal(0.0, math.sqrt(r)))
    return np.array(xs), np.array(zs)


def tracker_posterior_check(seeds: int = 50, steps: int = 20, n: int = 10_000) -> Dict[str, float]:
    """RMS gap between particle, Kalman and grid posterior means, relative to the state scale."""
    x0, p0, q, r = 0.0, 4.0, 1.0, 2.0
    rel = []
    grid_gap = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        _, zs = simulate_linear_gaussian(steps, x0, p0, q, r, rng)
        kf = kalman_1d(zs, x0, p0, q, r)
        grid = grid_bayes_1d(zs, x0, p0, q, r)
        pf = particle_filter_1d(zs, x0, p0, q, r, n, rng)
        scale = math.sqrt(np.mean(kf ** 2) + p0)
        rel.append(math.sqrt(np.mean((pf - kf) ** 2)) / scale)
        grid_gap = max(grid_gap, float(np.max(np.abs(grid - kf))))
    return {"seeds": seeds, "max_rel_rms": max(rel), "mean_rel_rms": float(np.mean(rel)),
            "grid_vs_kalman_max_abs": grid_gap}


def geometry_roundtrip(camera: CameraModel, n: int = 10_000, seed: int = 0) -> Dict[str, float]:
    """Project random vehicles and recover their distance from the box bottom edge."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        d_y = float(rng.uniform(2, 100))
        d_x = float(rng.uniform(-1, 1)) * min(3.0, 0.4 * d_y)  # stays on screen
        box = project_vehicle(camera, (d_x, d_y), 1.8, 1.5)
        worst = max(worst, abs(longitudinal_distance(camera, box) - d_y) / d_y)
    return {"vehicles": n, "max_rel_err": worst}

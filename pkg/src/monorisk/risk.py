"""Collision risk: max inverse time-to-collision and Monte Carlo driver-model rollouts.

Relative positions ``(d_x, d_y)`` are treated as center-to-center offsets
between ego and object rectangles, so two vehicles collide when
``|d_x| <= (w_ego + w_obj) / 2`` and ``|d_y| <= (l_ego + l_obj) / 2``.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .state_estimator import VehicleState

STAY = "stay"
CHANGE_LEFT = "change_left"
CHANGE_RIGHT = "change_right"


class RiskModeError(ValueError):
    """Monte Carlo risk requested without an ego speed."""


@dataclass(frozen=True)
class VehicleDims:
    width_m: float = 1.8
    length_m: float = 4.5


@dataclass(frozen=True)
class SceneEstimate:
    frame_time_s: float
    objects: Mapping[int, VehicleState] = field(default_factory=dict)
    ego_speed_mps: Optional[float] = None


@dataclass(frozen=True)
class RiskReport:
    frame_time_s: float
    risk: float
    per_object_ttc: Dict[int, Optional[float]]
    mode: str = "ttc"
    rollout_count: int = 0


def _extent(ego: VehicleDims, obj: VehicleDims) -> Tuple[float, float]:
    return ((ego.width_m + obj.width_m) / 2, (ego.length_m + obj.length_m) / 2)


def _slab(p0: np.ndarray, step: float, half: float) -> Tuple[np.ndarray, np.ndarray]:
    """Parameter interval in [0, 1] per segment where ``|p0 + s*step| <= half``."""
    if step == 0:
        inside = np.abs(p0) <= half
        return np.where(inside, 0.0, np.inf), np.where(inside, 1.0, -np.inf)
    s1 = (-half - p0) / step
    s2 = (half - p0) / step
    return np.minimum(s1, s2), np.maximum(s1, s2)


def ttc(ego_dims: VehicleDims, obj: VehicleState, horizon_s: float = 10.0, dt_s: float = 0.1,
        obj_dims: Optional[VehicleDims] = None) -> Optional[float]:
    """Time of the first step whose motion brings the rectangles into contact.

    The object moves with constant relative velocity; each step's straight
    segment is tested against the collision rectangle so that grazing contacts
    shorter than ``dt_s`` are not skipped. Returns 0.0 when already
    overlapping and None when no contact happens within the horizon.
    """
    if not horizon_s > 0 or not dt_s > 0:
        raise ValueError("horizon_s and dt_s must be > 0")
    half_w, half_l = _extent(ego_dims, obj_dims or ego_dims)
    if abs(obj.d_x) <= half_w and abs(obj.d_y) <= half_l:
        return 0.0
    if obj.v_x == 0 and obj.v_y == 0:
        return None
    n_steps = int(round(horizon_s / dt_s))
    k = np.arange(n_steps)
    t0 = k * dt_s
    x0 = obj.d_x + obj.v_x * t0
    y0 = obj.d_y + obj.v_y * t0
    lo_x, hi_x = _slab(x0, obj.v_x * dt_s, half_w)
    lo_y, hi_y = _slab(y0, obj.v_y * dt_s, half_l)
    lo = np.maximum(np.maximum(lo_x, lo_y), 0.0)
    hi = np.minimum(np.minimum(hi_x, hi_y), 1.0)
    hit = np.flatnonzero(lo <= hi)
    if hit.size == 0:
        return None
    return float((hit[0] + 1) * dt_s)


def inverse_ttc(t: Optional[float], dt_s: float) -> float:
    """1/TTC, with immediate contact scored as one step."""
    if t is None:
        return 0.0
    return 1.0 / max(t, dt_s)


def risk_ttc(scene: SceneEstimate, horizon_s: float = 10.0, dt_s: float = 0.1,
             ego_dims: VehicleDims = VehicleDims(),
             obj_dims: Optional[VehicleDims] = None) -> RiskReport:
    per_object = {oid: ttc(ego_dims, s, horizon_s, dt_s, obj_dims)
                  for oid, s in sorted(scene.objects.items())}
    risk = max((inverse_ttc(t, dt_s) for t in per_object.values()), default=0.0)
    return RiskReport(scene.frame_time_s, risk, per_object, "ttc")


# driver models -----------------------------------------------------------

@dataclass(frozen=True)
class DriverModelParams:
    desired_speed: float = 33.3
    time_headway: float = 1.5
    min_gap: float = 2.0
    max_accel: float = 1.4
    comfort_decel: float = 2.0
    exponent: float = 4.0
    politeness: float = 0.5
    changing_threshold: float = 0.2
    safe_decel: float = 4.0

    def __post_init__(self):
        for name in ("desired_speed", "time_headway", "min_gap", "max_accel", "comfort_decel",
                     "exponent", "safe_decel"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 <= self.politeness <= 1:
            raise ValueError("politeness must be in [0, 1]")
        if self.changing_threshold < 0:
            raise ValueError("changing_threshold must be >= 0")


PARAM_NAMES = tuple(f.name for f in fields(DriverModelParams))
_LOWER = {name: 0.0 for name in PARAM_NAMES}
_UPPER = {name: math.inf for name in PARAM_NAMES}
_UPPER["politeness"] = 1.0


def _free_term(v, v0, delta):
    return (np.maximum(v, 0.0) / v0) ** delta


def desired_gap(v, v_lead, s0, T, a, b):
    """Dynamic desired gap, s0 + max(0, v*T + v*dv / (2*sqrt(a*b)))."""
    return s0 + np.maximum(0.0, v * T + v * (v - v_lead) / (2.0 * np.sqrt(a * b)))


def idm_accel(params: DriverModelParams, v: float, v_lead: Optional[float] = None,
              gap: Optional[float] = None) -> float:
    """IDM acceleration. ``gap=None`` (or inf) means free road; ``gap <= 0`` returns ``-safe_decel``."""
    p = params
    free = p.max_accel * (1.0 - float(_free_term(v, p.desired_speed, p.exponent)))
    if gap is None or math.isinf(gap):
        return free
    if gap <= 0:
        return -p.safe_decel
    s_star = float(desired_gap(v, v if v_lead is None else v_lead, p.min_gap, p.time_headway,
                               p.max_accel, p.comfort_decel))
    return free - p.max_accel * (s_star / gap) ** 2


def idm_accel_array(v, v_lead, gap, P: Mapping[str, np.ndarray]) -> np.ndarray:
    """Vectorized IDM; ``gap`` may hold inf (free road) or values <= 0 (emergency)."""
    a = P["max_accel"]
    free = a * (1.0 - _free_term(v, P["desired_speed"], P["exponent"]))
    s_star = desired_gap(v, v_lead, P["min_gap"], P["time_headway"], a, P["comfort_decel"])
    with np.errstate(divide="ignore", invalid="ignore"):
        interaction = np.where(np.isinf(gap), 0.0, (s_star / gap) ** 2)
    acc = free - a * interaction
    return np.where(gap <= 0, -P["safe_decel"], acc)


@dataclass(frozen=True)
class LaneChangeOption:
    """Accelerations before and after a hypothetical change into one adjacent lane.

    ``own`` is the deciding vehicle, ``new_follower`` the vehicle that would
    end up behind it and ``old_follower`` the one currently behind it.
    """

    own: float
    own_after: float
    new_follower: float = 0.0
    new_follower_after: float = 0.0
    old_follower: float = 0.0
    old_follower_after: float = 0.0


def mobil_incentive(own, own_after, nf, nf_after, of, of_after, politeness):
    return (own_after - own) + politeness * ((nf_after - nf) + (of_after - of))


def mobil_decide(params: DriverModelParams, left: Optional[LaneChangeOption] = None,
                 right: Optional[LaneChangeOption] = None) -> str:
    best, best_gain = STAY, None
    for decision, opt in ((CHANGE_LEFT, left), (CHANGE_RIGHT, right)):
        if opt is None or opt.new_follower_after < -params.safe_decel:
            continue
        gain = mobil_incentive(opt.own, opt.own_after, opt.new_follower, opt.new_follower_after,
                               opt.old_follower, opt.old_follower_after, params.politeness)
        if gain > params.changing_threshold and (best_gain is None or gain > best_gain):
            best, best_gain = decision, gain
    return best


@dataclass(frozen=True)
class DriverModelSampler:
    """Independent truncated Gaussians around ``mean``; ``std`` of None means 10% of each mean."""

    mean: DriverModelParams = field(default_factory=DriverModelParams)
    std: Optional[Dict[str, float]] = None

    def stds(self) -> Dict[str, float]:
        if self.std is None:
            return {n: 0.1 * getattr(self.mean, n) for n in PARAM_NAMES}
        return {n: float(self.std.get(n, 0.0)) for n in PARAM_NAMES}

    @classmethod
    def deterministic(cls, mean: DriverModelParams = DriverModelParams()) -> "DriverModelSampler":
        return cls(mean, {n: 0.0 for n in PARAM_NAMES})

    @cached_property
    def _table(self):
        stds = self.stds()
        mu = np.array([getattr(self.mean, n) for n in PARAM_NAMES])
        sd = np.array([stds[n] for n in PARAM_NAMES])
        lo = np.array([_LOWER[n] for n in PARAM_NAMES])
        hi = np.array([_UPPER[n] for n in PARAM_NAMES])
        closed_lo = np.array([n == "changing_threshold" for n in PARAM_NAMES])
        return mu[:, None], sd[:, None], lo[:, None], hi[:, None], closed_lo[:, None]

    def sample(self, rng: np.random.Generator, n_vehicles: int) -> Dict[str, np.ndarray]:
        """Rejection-sample every field at once; lower bounds are open except the threshold's."""
        mu, sd, lo, hi, closed_lo = self._table
        shape = (len(PARAM_NAMES), n_vehicles)
        mu_b, sd_b = np.broadcast_to(mu, shape), np.broadcast_to(sd, shape)
        values = mu_b.copy()
        active = np.broadcast_to(sd > 0, shape)
        bad = active.copy()
        while bad.any():
            values[bad] = mu_b[bad] + sd_b[bad] * rng.standard_normal(int(bad.sum()))
            inside = np.where(closed_lo, values >= lo, values > lo) & (values <= hi)
            bad = active & ~inside
        return dict(zip(PARAM_NAMES, values))


@dataclass(frozen=True)
class RolloutConfig:
    horizon_s: float = 10.0
    dt_s: float = 0.1
    lane_width_m: float = 3.7
    extra_lanes: int = 1
    lane_change_duration_s: float = 3.0
    max_brake_mps2: float = 9.0
    dims: VehicleDims = field(default_factory=VehicleDims)


_IDM_FIELDS = ("desired_speed", "time_headway", "min_gap", "max_accel", "comfort_decel",
               "exponent", "safe_decel")


def _nearest(candidates: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    idx = np.argmin(candidates, axis=2)
    return idx, np.take_along_axis(candidates, idx[..., None], axis=2)[..., 0]


def rollout_batch(scene: SceneEstimate, params: Mapping[str, np.ndarray],
                  config: RolloutConfig = RolloutConfig()) -> np.ndarray:
    """Simulate R futures at once; returns first ego collision time per rollout (nan if none).

    ``params`` maps each driver-model field to an (R, V) array; column 0 is
    the ego, columns 1.. follow the scene objects in id order.
    """
    if scene.ego_speed_mps is None:
        raise RiskModeError("Monte Carlo risk needs the ego speed")
    objs = [scene.objects[k] for k in sorted(scene.objects)]
    R = next(iter(params.values())).shape[0]
    V = len(objs) + 1
    dt = config.dt_s
    lw = config.lane_width_m
    half_w, half_l = _extent(config.dims, config.dims)
    length = 2 * half_l  # bumper gap = center offset - (l_a + l_b)/2

    y = np.tile(np.array([0.0] + [o.d_y for o in objs]), (R, 1))
    x = np.tile(np.array([0.0] + [o.d_x for o in objs]), (R, 1))
    v = np.tile(np.maximum(0.0, scene.ego_speed_mps + np.array([0.0] + [o.v_y for o in objs])),
                (R, 1))
    lane = np.rint(x / lw).astype(int)
    lane_min, lane_max = lane.min() - config.extra_lanes, lane.max() + config.extra_lanes
    lc_steps_total = max(1, int(round(config.lane_change_duration_s / dt)))
    lc_left = np.zeros((R, V), dtype=int)
    lc_rate = np.zeros((R, V))
    P = {k: np.broadcast_to(np.asarray(val, dtype=float), (R, V)) for k, val in params.items()}
    # IDM fields stacked so a neighbour's parameters come from one flat gather
    idm_flat = np.stack([P[n] for n in _IDM_FIELDS]).reshape(len(_IDM_FIELDS), R * V)
    row_offset = (np.arange(R) * V)[:, None]

    def flat(idx):
        return (idx + row_offset).ravel()

    def gather(arr, fi):
        return arr.reshape(-1)[fi].reshape(R, V)

    def neighbour_params(fi):
        return dict(zip(_IDM_FIELDS, idm_flat[:, fi].reshape(-1, R, V)))

    eye = np.eye(V, dtype=bool)[None]

    result = np.full(R, np.nan)
    hit0 = (np.abs(x[:, 1:] - x[:, :1]) <= half_w) & (np.abs(y[:, 1:] - y[:, :1]) <= half_l)
    result[hit0.any(axis=1)] = 0.0
    n_steps = int(round(config.horizon_s / dt))
    if V == 1 or not np.isnan(result).any():
        return result

    for k in range(1, n_steps + 1):
        dy = y[:, None, :] - y[:, :, None]            # dy[r, i, j] = y_j - y_i
        same = lane[:, :, None] == lane[:, None, :]
        lead_c = np.where(same & (dy > 0), dy, np.inf)
        lead, lead_dy = _nearest(lead_c)
        has_lead = np.isfinite(lead_dy)
        v_lead = gather(v, flat(lead))
        acc = idm_accel_array(v, v_lead, lead_dy - length, P)

        back_c = np.where(same & (dy < 0), -dy, np.inf)
        of, of_dist = _nearest(back_c)
        has_of = np.isfinite(of_dist)
        of_i = flat(of)
        Pof = neighbour_params(of_i)
        v_of = gather(v, of_i)

        best_gain = np.full((R, V), -np.inf)
        choice = np.zeros((R, V), dtype=int)
        for side in (-1, 1):   # left first: wins exact ties
            tgt = lane + side
            valid = (tgt >= lane_min) & (tgt <= lane_max) & (lc_left == 0)
            in_tgt = lane[:, None, :] == tgt[:, :, None]
            nl, nl_dy = _nearest(np.where(in_tgt & (dy > 0), dy, np.inf))
            nf, nf_dist = _nearest(np.where(in_tgt & (dy <= 0) & ~eye, -dy, np.inf))
            has_nl, has_nf = np.isfinite(nl_dy), np.isfinite(nf_dist)
            nf_i = flat(nf)
            v_nl, v_nf = gather(v, flat(nl)), gather(v, nf_i)
            Pnf = neighbour_params(nf_i)

            own_after = idm_accel_array(v, v_nl, nl_dy - length, P)
            nf_before = idm_accel_array(v_nf, v_nl, nl_dy + nf_dist - length, Pnf)
            nf_after = idm_accel_array(v_nf, v, nf_dist - length, Pnf)
            nf_before = np.where(has_nf, nf_before, 0.0)
            nf_after = np.where(has_nf, nf_after, 0.0)
            of_before = np.where(has_of, idm_accel_array(v_of, v, of_dist - length, Pof), 0.0)
            of_after_gap = np.where(has_lead, of_dist + lead_dy - length, np.inf)
            of_after = np.where(has_of, idm_accel_array(v_of, v_lead, of_after_gap, Pof), 0.0)

            gain = mobil_incentive(acc, own_after, nf_before, nf_after, of_before, of_after,
                                   P["politeness"])
            room = (~has_nl | (nl_dy - length > 0)) & (~has_nf | (nf_dist - length > 0))
            ok = valid & room & (nf_after >= -P["safe_decel"]) & (gain > P["changing_threshold"])
            better = ok & (gain > best_gain)
            choice = np.where(better, side, choice)
            best_gain = np.where(better, gain, best_gain)

        starting = choice != 0
        lane = lane + choice
        lc_left = np.where(starting, lc_steps_total, lc_left)
        lc_rate = np.where(starting, choice * lw / lc_steps_total, lc_rate)

        acc = np.maximum(acc, -config.max_brake_mps2)
        v_next = v + acc * dt
        with np.errstate(divide="ignore", invalid="ignore"):
            stop_dist = np.where(acc < 0, -v * v / (2 * acc), 0.0)
        y = y + np.where(v_next >= 0, v * dt + 0.5 * acc * dt * dt, stop_dist)
        v = np.maximum(v_next, 0.0)
        moving = lc_left > 0
        x = x + np.where(moving, lc_rate, 0.0)
        lc_left = np.where(moving, lc_left - 1, 0)

        hit = (np.abs(x[:, 1:] - x[:, :1]) <= half_w) & (np.abs(y[:, 1:] - y[:, :1]) <= half_l)
        new = hit.any(axis=1) & np.isnan(result)
        result[new] = k * dt
        if not np.isnan(result).any():
            break
    return result


def rollout(scene: SceneEstimate, params: Mapping[str, np.ndarray],
            config: RolloutConfig = RolloutConfig()) -> Optional[float]:
    """One future; ``params`` maps each field to a length-V array (ego first)."""
    batch = {k: np.asarray(val, dtype=float)[None, :] for k, val in params.items()}
    t = rollout_batch(scene, batch, config)[0]
    return None if np.isnan(t) else float(t)


SeedLike = Union[int, Sequence[int]]


def rollout_rng(seed: SeedLike, index: int) -> np.random.Generator:
    entropy = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    return np.random.default_rng(np.random.SeedSequence(entropy + [int(index)]))


def sample_rollout_params(sampler: DriverModelSampler, n_vehicles: int, n_rollouts: int,
                          seed: SeedLike) -> Dict[str, np.ndarray]:
    rows = [sampler.sample(rollout_rng(seed, i), n_vehicles) for i in range(n_rollouts)]
    return {name: np.stack([r[name] for r in rows]) for name in PARAM_NAMES}


def risk_mc(scene: SceneEstimate, n_rollouts: int = 10, horizon_s: float = 10.0,
            dt_s: float = 0.1, seed: SeedLike = 0,
            sampler: DriverModelSampler = DriverModelSampler(),
            config: RolloutConfig = RolloutConfig(), chunk: int = 2048) -> RiskReport:
    """Mean inverse collision time over sampled rollouts.

    Rollout ``i`` draws its parameters from a generator keyed by
    ``(seed, i)``, so results do not depend on batching or scheduling.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    if scene.ego_speed_mps is None:
        raise RiskModeError("Monte Carlo risk needs the ego speed")
    config = replace(config, horizon_s=horizon_s, dt_s=dt_s)
    n_vehicles = len(scene.objects) + 1
    # exact rational accumulation: n identical rollouts average to exactly that value
    total = Fraction(0)
    for start in range(0, n_rollouts, chunk):
        stop = min(n_rollouts, start + chunk)
        rows = [sampler.sample(rollout_rng(seed, i), n_vehicles) for i in range(start, stop)]
        params = {name: np.stack([r[name] for r in rows]) for name in PARAM_NAMES}
        times = rollout_batch(scene, params, config)
        total += sum(Fraction(inverse_ttc(None if np.isnan(t) else float(t), dt_s))
                     for t in times)
    per_object = {oid: ttc(config.dims, s, horizon_s, dt_s)
                  for oid, s in sorted(scene.objects.items())}
    return RiskReport(scene.frame_time_s, float(total / n_rollouts), per_object, "mc",
                      n_rollouts)


def params_to_dict(params: DriverModelParams) -> dict:
    return asdict(params)

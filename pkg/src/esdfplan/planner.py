"""Reactive planner: metric-weighted combination of a goal attractor and
an obstacle-avoidance policy driven by a distance field.

Each policy is a pair (f, A): an acceleration and a symmetric PSD metric.
Policies are resolved as

    xdd = (sum A_i)^+ (sum A_i f_i)

and integrated with semi-implicit Euler. The obstacle policy pushes along
the field gradient with exponentially decaying strength and damps only
the approach component; its metric is rank-1 along the obstacle normal,
so it never fights the attractor tangentially.

Every control step consumes exactly one field distance evaluation and
one field gradient evaluation; the field implementations count both.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import head as head_mod
from .errors import DomainError
from .head import EsdfCalibration, HeadModel
from .scenes import AnalyticScene, scene_distance, scene_distance_gradient

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Distance fields
# ---------------------------------------------------------------------------

class AnalyticDistanceField:
    """Exact union distance and outward normal of an analytic scene."""

    def __init__(self, scene: AnalyticScene):
        self.scene = scene
        self.forward_count = 0
        self.backward_count = 0

    def distance(self, x) -> float:
        self.forward_count += 1
        return float(scene_distance(self.scene, x))

    def gradient(self, x) -> np.ndarray:
        self.backward_count += 1
        return scene_distance_gradient(self.scene, x)


class HeadDistanceField:
    """Pseudo-distance d = -logit (optionally affine-calibrated) from a head.

    Queries outside the normalized cube are clamped onto it. ``distance``
    runs the forward pass and keeps the tape; a ``gradient`` call at the
    same point finishes it with a single backward pass, so one control
    step costs exactly one forward and one backward.
    """

    def __init__(self, head: HeadModel, r: float | None = None,
                 calibration: EsdfCalibration | None = None):
        self.head = head
        self.r = head.r_fixed if r is None else r
        self.calibration = calibration
        self.forward_count = 0
        self.backward_count = 0
        self._cache = None  # (position, tape, logit)

    def _scale(self) -> float:
        return self.calibration.scale if self.calibration is not None else 1.0

    def _forward(self, x) -> tuple[float, object, np.ndarray]:
        q = np.clip(np.asarray(x, dtype=float), -1.0, 1.0)
        z, tape = head_mod.logit_with_tape(self.head, q, self.r)
        self.forward_count += 1
        return z, tape, q

    def distance(self, x) -> float:
        z, tape, q = self._forward(x)
        self._cache = (np.asarray(x, dtype=float).copy(), tape, z, q)
        d = -z
        if self.calibration is not None:
            d = self.calibration.scale * d + self.calibration.offset
        return float(d)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._cache is not None and np.array_equal(self._cache[0], x):
            _, tape, z, q = self._cache
        else:
            z, tape, q = self._forward(x)
        self._cache = None
        self.backward_count += 1
        grad = head_mod.gradient_from_tape(self.head, q, tape, z, wrt="logit")
        return self._scale() * grad


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyEval:
    """One policy evaluated at a state: acceleration f and metric A."""
    f: np.ndarray  # (3,)
    A: np.ndarray  # (3, 3) symmetric PSD


@dataclass(frozen=True)
class GoalPolicyParams:
    gamma_p: float = 1.0   # pull strength
    gamma_d: float = 2.0   # velocity damping
    delta: float = 0.05    # soft-normalization radius

    def __post_init__(self):
        if min(self.gamma_p, self.gamma_d, self.delta) <= 0:
            raise DomainError("goal policy parameters must be positive")


@dataclass(frozen=True)
class ObstaclePolicyParams:
    eta: float = 4.0       # repulsion strength
    nu: float = 0.1        # repulsion length scale
    lambda_d: float = 2.0  # approach damping
    eps: float = 1e-6      # gradient-normalization floor

    def __post_init__(self):
        if min(self.eta, self.nu, self.lambda_d, self.eps) <= 0:
            raise DomainError("obstacle policy parameters must be positive")


def goal_policy(x, xdot, goal, params: GoalPolicyParams) -> PolicyEval:
    """Soft-normalized attractor with identity metric."""
    x = np.asarray(x, dtype=float)
    to_goal = np.asarray(goal, dtype=float) - x
    f = params.gamma_p * to_goal / max(np.linalg.norm(to_goal), params.delta) \
        - params.gamma_d * np.asarray(xdot, dtype=float)
    return PolicyEval(f=f, A=np.eye(3))


def obstacle_policy(x, xdot, dist: float, grad: np.ndarray,
                    params: ObstaclePolicyParams) -> PolicyEval:
    """Repulsion along the field gradient, damping only the approach speed.

    ``dist``/``grad`` are the field values at x (one forward, one backward).
    The metric w(s) v v^T weights only the obstacle-normal direction.
    """
    if not (np.isfinite(dist) and np.all(np.isfinite(grad))):
        raise DomainError("obstacle policy got non-finite field values")
    v = np.asarray(grad, dtype=float)
    v = v / max(np.linalg.norm(v), params.eps)
    approach = float(v @ np.asarray(xdot, dtype=float))
    # exponent clipped: an agent deep inside geometry must not overflow to inf
    w = float(np.exp(min(-dist / params.nu, 50.0)))
    f = params.eta * w * v - params.lambda_d * min(0.0, approach) * v
    return PolicyEval(f=f, A=w * np.outer(v, v))


def combine(policies: list[PolicyEval]) -> np.ndarray:
    """Metric-weighted resolution: (sum A)^+ (sum A f)."""
    if not policies:
        raise DomainError("combine needs at least one policy")
    metric_sum = np.zeros((3, 3))
    force_sum = np.zeros(3)
    for p in policies:
        metric_sum += p.A
        force_sum += p.A @ p.f
    if not metric_sum.any():
        log.warning("all policy metrics are zero; free drift")
        return np.zeros(3)
    return np.linalg.pinv(metric_sum, rcond=1e-10) @ force_sum


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RolloutConfig:
    start: tuple[float, float, float]
    goal: tuple[float, float, float]
    dt: float = 0.01
    max_steps: int = 5000
    goal_tolerance: float = 0.05
    goal_params: GoalPolicyParams = field(default_factory=GoalPolicyParams)
    obstacle_params: ObstaclePolicyParams = field(default_factory=ObstaclePolicyParams)

    def __post_init__(self):
        if self.dt <= 0 or self.max_steps < 1:
            raise DomainError("dt must be positive and max_steps >= 1")
        for p in (self.start, self.goal):
            if np.any(np.abs(np.asarray(p)) > 1.0):
                raise DomainError("start and goal must lie in [-1, 1]^3")


@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    t: float
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    distance: float


@dataclass
class Trajectory:
    records: list[TrajectoryRecord]
    reason: str             # goal_reached | max_steps | diverged
    forward_queries: int
    backward_queries: int

    @property
    def positions(self) -> np.ndarray:
        return np.stack([r.position for r in self.records])

    @property
    def path_length(self) -> float:
        p = self.positions
        return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1))) if len(p) > 1 else 0.0


def rollout(dist_field, cfg: RolloutConfig) -> Trajectory:
    """Integrate the combined policy from rest at the start until the goal,
    the step limit, or divergence (|x| > 2 or a non-finite state).

    Each iteration queries the field once for d and once for grad; the final
    record carries its own evaluation, so both counters equal the record
    count on return.
    """
    x = np.asarray(cfg.start, dtype=float).copy()
    v = np.zeros(3)
    goal = np.asarray(cfg.goal, dtype=float)
    fwd0, bwd0 = dist_field.forward_count, dist_field.backward_count
    records: list[TrajectoryRecord] = []
    reason = "max_steps"
    for step in range(cfg.max_steps + 1):
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 2.0:
            reason = "diverged"
            break
        d = dist_field.distance(x)
        g = dist_field.gradient(x)
        try:
            accel = combine([
                goal_policy(x, v, goal, cfg.goal_params),
                obstacle_policy(x, v, d, g, cfg.obstacle_params),
            ])
        except DomainError:
            reason = "diverged"
            break
        records.append(TrajectoryRecord(step=step, t=step * cfg.dt, position=x.copy(),
                                        velocity=v.copy(), acceleration=accel,
                                        distance=d))
        if np.linalg.norm(x - goal) <= cfg.goal_tolerance:
            reason = "goal_reached"
            break
        if step == cfg.max_steps:
            break
        v = v + accel * cfg.dt
        x = x + v * cfg.dt
    return Trajectory(records=records, reason=reason,
                      forward_queries=dist_field.forward_count - fwd0,
                      backward_queries=dist_field.backward_count - bwd0)


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditReport:
    min_clearance: float
    path_length: float
    steps: int
    success: bool
    reason: str


def audit(traj: Trajectory, scene: AnalyticScene, robot_radius: float = 0.02) -> AuditReport:
    """Check a trajectory against the true scene geometry."""
    if not traj.records:
        raise DomainError("cannot audit an empty trajectory")
    clearance = scene_distance(scene, traj.positions) - robot_radius
    min_clearance = float(clearance.min())
    return AuditReport(
        min_clearance=min_clearance,
        path_length=traj.path_length,
        steps=len(traj.records) - 1,
        success=(traj.reason == "goal_reached") and min_clearance > 0.0,
        reason=traj.reason,
    )


def sample_blocked_pair(scene: AnalyticScene, rng: np.random.Generator,
                        clearance: float = 0.08, segment_samples: int = 200,
                        max_tries: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """Draw a (start, goal) pair in free space whose straight connector
    intersects geometry. Deterministic given the generator state."""
    for _ in range(max_tries):
        start = rng.uniform(-0.9, 0.9, size=3)
        goal = rng.uniform(-0.9, 0.9, size=3)
        if np.linalg.norm(goal - start) < 0.8:
            continue
        if scene_distance(scene, start) < clearance or scene_distance(scene, goal) < clearance:
            continue
        ts = np.linspace(0.0, 1.0, segment_samples)[:, None]
        seg = start[None, :] * (1 - ts) + goal[None, :] * ts
        if np.any(scene_distance(scene, seg) <= 0.0):
            return start, goal
    raise DomainError("could not find a blocked start/goal pair")

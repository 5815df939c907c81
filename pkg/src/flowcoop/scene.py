"""Seeded synthetic traffic scenes and per-sensor point-cloud sampling.

Randomness is derived from ``numpy.random.SeedSequence`` keyed on
(seed, sensor, purpose[, frame]) so that any frame can be generated in any
order and replays bit-identically.

Actor surface points are drawn once per (sensor, actor) in the actor's body
frame and carried rigidly with it; ground clutter is drawn once per sensor in
the sensor frame. Only dropout is re-drawn per frame. A static scene with no
dropout therefore yields identical clouds at every timestamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import Box3D, Pose2, transform_box

SENSOR_IDS = {"infra": 1, "vehicle": 2}
_PURPOSE_ACTOR = 11
_PURPOSE_CLUTTER = 12
_PURPOSE_FRAME = 13
_PURPOSE_LAYOUT = 14


def make_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key]))


@dataclass(frozen=True)
class Actor:
    box0: Box3D
    velocity: tuple[float, float] = (0.0, 0.0)
    yaw_rate: float = 0.0
    max_speed: float = 30.0

    def __post_init__(self):
        if math.hypot(*self.velocity) > self.max_speed:
            raise ValueError(f"actor speed {math.hypot(*self.velocity):.2f} exceeds {self.max_speed} m/s")

    @property
    def class_id(self) -> int:
        return self.box0.class_id


def actor_box_at(actor: Actor, t: float) -> Box3D:
    """Constant-velocity, constant-yaw-rate motion."""
    if t < 0:
        raise ValueError("t must be non-negative")
    b = actor.box0
    return Box3D(
        b.cx + t * actor.velocity[0],
        b.cy + t * actor.velocity[1],
        b.cz,
        b.w, b.l, b.h,
        b.yaw + t * actor.yaw_rate,
        b.class_id,
        b.confidence,
    )


@dataclass(frozen=True)
class SensorSpec:
    name: str
    range: float
    points_per_actor: int
    clutter_points: int = 0
    dropout: float = 0.0
    pose: Pose2 | None = None  # None: follows the vehicle trajectory

    def __post_init__(self):
        if self.name not in SENSOR_IDS:
            raise ValueError(f"unknown sensor {self.name!r}")
        if self.range <= 0:
            raise ValueError("sensor range must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class Scenario:
    actors: tuple[Actor, ...]
    infra: SensorSpec
    vehicle: SensorSpec
    waypoints: tuple[tuple[float, Pose2], ...]  # (t seconds, pose), increasing t
    frame_period_ms: float = 100.0
    num_frames: int = 40
    seed: int = 0
    ground_z: float = -2.0

    def __post_init__(self):
        if self.frame_period_ms <= 0:
            raise ValueError("frame_period_ms must be positive")
        if not self.waypoints:
            raise ValueError("vehicle trajectory needs at least one waypoint")
        ts = [w[0] for w in self.waypoints]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("waypoint times must be strictly increasing")

    @property
    def period(self) -> float:
        return self.frame_period_ms / 1000.0

    @property
    def horizon(self) -> float:
        return self.num_frames * self.period

    def frame_time(self, index: int) -> float:
        return index * self.period

    def sensor(self, name: str) -> SensorSpec:
        return {"infra": self.infra, "vehicle": self.vehicle}[name]

    def vehicle_pose(self, t: float) -> Pose2:
        """Piecewise-linear interpolation of the ego trajectory, held at the ends."""
        wps = self.waypoints
        if t <= wps[0][0]:
            return wps[0][1]
        if t >= wps[-1][0]:
            return wps[-1][1]
        for (t0, p0), (t1, p1) in zip(wps, wps[1:]):
            if t0 <= t <= t1:
                a = (t - t0) / (t1 - t0)
                dyaw = math.remainder(p1.yaw - p0.yaw, 2 * math.pi)
                return Pose2(p0.x + a * (p1.x - p0.x), p0.y + a * (p1.y - p0.y), p0.yaw + a * dyaw)
        raise AssertionError("unreachable")

    def sensor_pose(self, name: str, t: float) -> Pose2:
        spec = self.sensor(name)
        return spec.pose if spec.pose is not None else self.vehicle_pose(t)


def _sample_surface(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform points on the four vertical faces and the top face, body frame."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.random(n) - 0.5
    v = rng.random(n) - 0.5
    pts = np.empty((n, 4))
    x = np.where(face == 0, l / 2, np.where(face == 1, -l / 2, u * l))
    y = np.where(face == 2, w / 2, np.where(face == 3, -w / 2, np.where(face < 2, u * w, v * w)))
    z = np.where(face == 4, h / 2, v * h)
    pts[:, 0], pts[:, 1], pts[:, 2] = x, y, z
    pts[:, 3] = rng.random(n)
    return pts


@lru_cache(maxsize=4096)
def _actor_pattern(seed: int, sensor_id: int, index: int, box0: Box3D, n: int) -> np.ndarray:
    pts = _sample_surface(box0, n, make_rng(seed, sensor_id, _PURPOSE_ACTOR, index))
    pts.setflags(write=False)
    return pts


@lru_cache(maxsize=64)
def _clutter_pattern(seed: int, sensor_id: int, n: int, radius: float, ground_z: float) -> np.ndarray:
    rng = make_rng(seed, sensor_id, _PURPOSE_CLUTTER)
    r = radius * np.sqrt(rng.random(n))
    phi = rng.uniform(-math.pi, math.pi, n)
    pts = np.column_stack([r * np.cos(phi), r * np.sin(phi), np.full(n, ground_z), rng.random(n)])
    pts.setflags(write=False)
    return pts


def sample_frame(scenario: Scenario, sensor: str, t: float, frame_index: int | None = None):
    """Point cloud (N, 4) float32 and in-range GT boxes, both in the sensor frame."""
    if not 0.0 <= t <= scenario.horizon:
        raise ValueError(f"t={t} outside scenario horizon [0, {scenario.horizon}]")
    spec = scenario.sensor(sensor)
    sid = SENSOR_IDS[sensor]
    if frame_index is None:
        frame_index = int(round(t / scenario.period))
    pose = scenario.sensor_pose(sensor, t)
    inv = pose.inverse()

    chunks, boxes = [], []
    for i, actor in enumerate(scenario.actors):
        box = actor_box_at(actor, t)
        if math.hypot(box.cx - pose.x, box.cy - pose.y) > spec.range:
            continue
        local = _actor_pattern(scenario.seed, sid, i, actor.box0, spec.points_per_actor)
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        world = np.empty_like(local)
        world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.cx
        world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.cy
        world[:, 2] = local[:, 2] + box.cz
        world[:, 3] = local[:, 3]
        world[:, :2] = inv.apply(world[:, :2])
        chunks.append(world)
        boxes.append(transform_box(box, inv))
    if spec.clutter_points:
        chunks.append(_clutter_pattern(scenario.seed, sid, spec.clutter_points, spec.range, scenario.ground_z))

    cloud = np.concatenate(chunks) if chunks else np.zeros((0, 4))
    if spec.dropout > 0 and len(cloud):
        keep = make_rng(scenario.seed, sid, _PURPOSE_FRAME, frame_index).random(len(cloud)) >= spec.dropout
        cloud = cloud[keep]
    return cloud.astype(np.float32), boxes


def ground_truth_ego(scenario: Scenario, t: float) -> list[Box3D]:
    """Every actor, visible or not, expressed in the ego frame at ``t``."""
    inv = scenario.vehicle_pose(t).inverse()
    return [transform_box(actor_box_at(a, t), inv) for a in scenario.actors]


@dataclass
class ScenarioConfig:
    """Parameters of the procedural lane-traffic generator."""

    seed: int = 7
    num_frames: int = 40
    frame_period_ms: float = 100.0
    num_lanes: int = 6
    lane_width: float = 3.5
    lane_origin_y: float = -7.0
    lane_yaw: float = 0.0
    actors_per_lane: int = 3
    lane_x_min: float = 8.0
    lane_x_max: float = 85.0
    min_gap: float = 8.0
    speed_min: float = 1.0
    speed_max: float = 8.0
    yaw_rate_max: float = 0.0
    max_speed: float = 30.0
    ego_speed: float = 4.0
    ego_y: float = -10.5
    infra_x: float = 4.0
    infra_y: float = -6.0
    infra_yaw: float = 0.05
    infra_range: float = 90.0
    vehicle_range: float = 20.0
    points_per_actor: int = 1200
    clutter_points: int = 400
    dropout: float = 0.0
    ground_z: float = -2.0


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    """Parallel lanes with alternating direction; one speed per lane so actors never overlap."""
    rng = make_rng(cfg.seed, 0, _PURPOSE_LAYOUT)
    actors = []
    cy, sy = math.cos(cfg.lane_yaw), math.sin(cfg.lane_yaw)
    for lane in range(cfg.num_lanes):
        offset = cfg.lane_origin_y + lane * cfg.lane_width
        direction = 1.0 if lane % 2 == 0 else -1.0
        speed = rng.uniform(cfg.speed_min, cfg.speed_max) if cfg.speed_max > 0 else 0.0
        span = cfg.lane_x_max - cfg.lane_x_min
        slots = max(1, int(span // (5.0 + cfg.min_gap)))
        n = min(cfg.actors_per_lane, slots)
        chosen = np.sort(rng.choice(slots, size=n, replace=False))
        for slot in chosen:
            along = cfg.lane_x_min + (slot + 0.5) * span / slots + rng.uniform(-1.0, 1.0)
            l, w, h = rng.uniform(3.9, 4.8), rng.uniform(1.7, 2.0), rng.uniform(1.45, 1.7)
            yaw = cfg.lane_yaw + (0.0 if direction > 0 else math.pi)
            box = Box3D(
                along * cy - offset * sy,
                along * sy + offset * cy,
                cfg.ground_z + h / 2,
                w, l, h, yaw,
            )
            yaw_rate = rng.uniform(-cfg.yaw_rate_max, cfg.yaw_rate_max) if cfg.yaw_rate_max > 0 else 0.0
            vel = (direction * speed * cy, direction * speed * sy)
            actors.append(Actor(box, vel, yaw_rate, cfg.max_speed))

    duration = cfg.num_frames * cfg.frame_period_ms / 1000.0
    waypoints = (
        (0.0, Pose2(0.0, cfg.ego_y, 0.0)),
        (duration, Pose2(cfg.ego_speed * duration, cfg.ego_y, 0.0)),
    )
    infra = SensorSpec(
        "infra", cfg.infra_range, cfg.points_per_actor, cfg.clutter_points, cfg.dropout,
        Pose2(cfg.infra_x, cfg.infra_y, cfg.infra_yaw),
    )
    vehicle = SensorSpec("vehicle", cfg.vehicle_range, cfg.points_per_actor, cfg.clutter_points, cfg.dropout)
    return Scenario(tuple(actors), infra, vehicle, waypoints, cfg.frame_period_ms, cfg.num_frames, cfg.seed, cfg.ground_z)

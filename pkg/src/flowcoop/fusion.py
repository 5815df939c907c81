"""Alignment, fusion, the proxy detector and the per-mode cooperative pipeline."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import codec
from .channel import LatencyLink, delivered_frame_index, pair_jitter, transmit
from .featurizer import FeatureGrid, GridConfig, rasterize
from .flow import EstimatorParams, FeatureFlow, estimate_derivative, predict
from .geometry import Box3D, Pose2, bev_iou, relative_pose, transform_box
from .scene import Scenario, ground_truth_ego, sample_frame

_SNAP = 1e-9


class FusionMode(str, enum.Enum):
    EARLY = "EarlyFusion"
    LATE = "LateFusion"
    NO_PREDICTION = "MiddleNoPrediction"
    FLOW_INFRA = "MiddleFlowInfra"
    FLOW_VEHICLE = "MiddleFlowVehicle"

    @classmethod
    def parse(cls, name: str) -> "FusionMode":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown fusion mode {name!r}; expected one of {[m.value for m in cls]}") from None


@dataclass(frozen=True)
class DetectorConfig:
    occupancy_threshold: float = 0.5
    min_cells: int = 6
    connectivity: int = 8
    z_center: float = -1.2
    height: float = 1.6
    points_per_actor: int = 1200
    class_id: int = 0

    def __post_init__(self):
        if not self.occupancy_threshold > 0:
            raise ValueError("occupancy_threshold must be positive")
        if self.min_cells < 1:
            raise ValueError("min_cells must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


# -- feature-level operations ----------------------------------------------------


def _snap(u: np.ndarray) -> np.ndarray:
    r = np.rint(u)
    return np.where(np.abs(u - r) < _SNAP, r, u)


def align(f: FeatureGrid, pose_src: Pose2, pose_dst: Pose2, grid_dst: GridConfig, frame: str = "") -> FeatureGrid:
    """Resample ``f`` (expressed in ``pose_src``) onto ``grid_dst`` in ``pose_dst``.

    Bilinear interpolation; anything outside the source extent reads as zero.
    """
    C, Hs, Ws = f.dims
    src = f.grid
    xs, ys = grid_dst.cell_centers()
    X, Y = np.meshgrid(xs, ys)
    rel = pose_src.inverse().compose(pose_dst)
    pts = rel.apply(np.stack([X.ravel(), Y.ravel()], axis=1))
    u = _snap((pts[:, 0] - src.x_range[0]) / src.cell - 0.5)
    v = _snap((pts[:, 1] - src.y_range[0]) / src.cell - 0.5)
    c0, r0 = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    fu, fv = u - c0, v - r0

    # one ring of zero padding; every out-of-extent index is clipped onto it
    padded = np.zeros((C, Hs + 2, Ws + 2))
    padded[:, 1:-1, 1:-1] = f.data
    flat = padded.reshape(C, -1)
    r1 = np.clip(r0 + 2, 0, Hs + 1)
    c1 = np.clip(c0 + 2, 0, Ws + 1)
    r0 = np.clip(r0 + 1, 0, Hs + 1)
    c0 = np.clip(c0 + 1, 0, Ws + 1)
    Wp = Ws + 2
    out = (
        flat[:, r0 * Wp + c0] * ((1 - fv) * (1 - fu))
        + flat[:, r0 * Wp + c1] * ((1 - fv) * fu)
        + flat[:, r1 * Wp + c0] * (fv * (1 - fu))
        + flat[:, r1 * Wp + c1] * (fv * fu)
    )
    return FeatureGrid(out.reshape(C, grid_dst.H, grid_dst.W), GridConfig(
        grid_dst.x_range, grid_dst.y_range, grid_dst.z_range, grid_dst.cell, C), frame)


def fuse(f_ego: FeatureGrid, f_infra: FeatureGrid) -> FeatureGrid:
    """Element-wise maximum."""
    if f_ego.dims != f_infra.dims:
        raise ValueError(f"dimension mismatch: {f_ego.dims} vs {f_infra.dims}")
    return f_ego.like(np.maximum(f_ego.data, f_infra.data))


def detect(f: FeatureGrid, cfg: DetectorConfig = DetectorConfig()) -> list[Box3D]:
    """Connected occupied cells -> oriented boxes.

    Centre is the occupancy-weighted centroid; heading and footprint come from
    PCA of the member cell centres, treating each cell as a uniform square.
    """
    occ = f.data[3].astype(np.float64)
    binary = occ >= cfg.occupancy_threshold
    structure = ndimage.generate_binary_structure(2, 2 if cfg.connectivity == 8 else 1)
    labels, n = ndimage.label(binary, structure=structure)
    if n == 0:
        return []
    g = f.grid
    xs, ys = g.cell_centers()
    norm = math.log1p(cfg.points_per_actor)
    boxes = []
    objects = ndimage.find_objects(labels)
    for idx, sl in enumerate(objects, start=1):
        sub = labels[sl] == idx
        rows, cols = np.nonzero(sub)
        if len(rows) < cfg.min_cells:
            continue
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        px, py = xs[cols], ys[rows]
        mass = np.maximum(occ[rows, cols], 0.0)
        cx = float(np.dot(mass, px) / mass.sum())
        cy = float(np.dot(mass, py) / mass.sum())
        cov = np.cov(np.stack([px, py]), bias=True) + np.eye(2) * (g.cell**2 / 12.0)
        evals, evecs = np.linalg.eigh(cov)
        major = evecs[:, 1]
        yaw = math.atan2(major[1], major[0])
        l = max(g.cell, 2.0 * math.sqrt(3.0 * max(evals[1], 0.0)))
        w = max(g.cell, 2.0 * math.sqrt(3.0 * max(evals[0], 0.0)))
        conf = float(np.clip(f.data[0][rows, cols].astype(np.float64).mean() / norm, 0.0, 1.0))
        boxes.append(Box3D(cx, cy, cfg.z_center, w, l, cfg.height, yaw, cfg.class_id, conf))
    return boxes


def early_fuse(cloud_v: np.ndarray, cloud_i: np.ndarray, rel_pose: Pose2) -> np.ndarray:
    """Move infrastructure points into the ego frame and concatenate."""
    moved = np.array(cloud_i, dtype=np.float64).reshape(-1, 4)
    if len(moved):
        moved[:, :2] = rel_pose.apply(moved[:, :2])
    return np.concatenate([np.asarray(cloud_v).reshape(-1, 4), moved.astype(np.asarray(cloud_v).dtype)])


def nms(boxes: list[Box3D], iou_threshold: float) -> list[Box3D]:
    """Greedy BEV NMS by descending confidence; ties keep the earlier box."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].confidence, i))
    kept: list[Box3D] = []
    for i in order:
        if all(bev_iou(boxes[i], k) < iou_threshold for k in kept):
            kept.append(boxes[i])
    return kept


def late_fuse(dets_v: list[Box3D], dets_i: list[Box3D], rel_pose: Pose2, iou_merge: float = 0.3) -> list[Box3D]:
    if not 0 < iou_merge < 1:
        raise ValueError("iou_merge must be in (0, 1)")
    moved = [transform_box(b, rel_pose) for b in dets_i]
    return nms(list(dets_v) + moved, iou_merge)


# -- cooperative pipeline -----------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridConfig = GridConfig()
    detector: DetectorConfig = DetectorConfig()
    codec: codec.CodecOptions = codec.CodecOptions()
    spatial_factor: int = 1
    channel_group: int = 1
    mask_patch: int = 1
    late_iou_merge: float = 0.3


@dataclass
class FrameResult:
    frame_id: int
    t_v: int  # microseconds
    t_i: int
    detections: list[Box3D]
    ground_truth: list[Box3D]
    ab_bytes: int


@dataclass
class ModeRun:
    mode: FusionMode
    latency_ms: float
    frames: list[FrameResult] = field(default_factory=list)
    storage: int = 0
    compute: int = 0

    @property
    def ab_log(self) -> list[int]:
        return [f.ab_bytes for f in self.frames]


class CooperativeSimulator:
    """Runs every fusion mode over one scenario, caching per-frame work.

    Raw infrastructure features, packets and ego features depend only on the
    frame, never on the latency, so they are computed once and reused across
    a latency sweep.
    """

    def __init__(self, scenario: Scenario, cfg: PipelineConfig, params: EstimatorParams | None = None):
        self.scenario = scenario
        self.cfg = cfg
        self.params = params if params is not None else EstimatorParams.fd_init(cfg.grid.channels)
        self.period_us = int(round(scenario.frame_period_ms * 1000))
        self._cache: dict = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    # infrastructure side

    def infra_cloud(self, i: int) -> np.ndarray:
        return self._memo(("icloud", i), lambda: sample_frame(self.scenario, "infra", i * self.scenario.period, i)[0])

    def infra_raw(self, i: int) -> FeatureGrid:
        return self._memo(("iraw", i), lambda: rasterize(self.infra_cloud(i), self.cfg.grid, "infra"))

    def _compress(self, f: FeatureGrid) -> FeatureGrid:
        return codec.spatial_compress(f, self.cfg.spatial_factor, self.cfg.channel_group)

    def _decompress(self, f: FeatureGrid) -> FeatureGrid:
        return codec.spatial_decompress(f, self.cfg.spatial_factor, self.cfg.channel_group, self.cfg.grid.shape, self.cfg.grid)

    def _mask_dims(self) -> tuple[int, int]:
        s = self.cfg.spatial_factor * self.cfg.mask_patch
        return self.cfg.grid.H // s, self.cfg.grid.W // s

    def base_packet(self, i: int) -> tuple[bytes, int]:
        def build():
            opts = codec.CodecOptions(self.cfg.codec.bits, False, self.cfg.codec.mask_threshold)
            return codec.encode_packet(self._compress(self.infra_raw(i)), self.scenario.infra.pose, opts, t_ref=i * self.period_us)
        return self._memo(("bpkt", i), build)

    def flow_packet(self, i: int) -> tuple[bytes, int]:
        if i < 1:
            raise ValueError("flow packets need a previous infrastructure frame")

        def build():
            f_prev, f_curr = self.infra_raw(i - 1), self.infra_raw(i)
            deriv = estimate_derivative(self.params, f_prev, f_curr, self.scenario.period)
            flow = FeatureFlow(self._compress(f_curr), self._compress(deriv), i * self.period_us)
            mask = None
            if self.cfg.codec.use_mask:
                mask = codec.attention_mask(f_prev, f_curr, self._mask_dims(), self.cfg.codec.mask_threshold)
            return codec.encode_packet(flow, self.scenario.infra.pose, self.cfg.codec, mask)
        return self._memo(("fpkt", i), build)

    def infra_detections(self, i: int) -> list[Box3D]:
        return self._memo(("idet", i), lambda: detect(self.infra_raw(i), self.cfg.detector))

    # vehicle side

    def ego_cloud(self, j: int, t_v: int) -> np.ndarray:
        return self._memo(("vcloud", j, t_v), lambda: sample_frame(self.scenario, "vehicle", t_v / 1e6, j)[0])

    def ego_feature(self, j: int, t_v: int) -> FeatureGrid:
        return self._memo(("vfeat", j, t_v), lambda: rasterize(self.ego_cloud(j, t_v), self.cfg.grid, "ego"))

    def _decoded(self, pkt: bytes, key) -> codec.DecodedPacket:
        return self._memo(("dec", key), lambda: codec.decode_packet(pkt, self._compressed_grid(), "infra"))

    def _compressed_grid(self) -> GridConfig:
        return self._compress(FeatureGrid.zeros(self.cfg.grid)).grid

    def _fuse_infra(self, f_infra_compressed: FeatureGrid, ego_pose: Pose2, ego: FeatureGrid) -> list[Box3D]:
        full = self._decompress(f_infra_compressed)
        aligned = align(full, self.scenario.infra.pose, ego_pose, self.cfg.grid, "ego")
        return detect(fuse(ego, aligned), self.cfg.detector)

    def run_mode(self, mode: FusionMode, link: LatencyLink, frames: list[int]) -> ModeRun:
        mode = FusionMode(mode)
        run = ModeRun(mode, link.latency_ms)
        received: dict[int, bytes] = {}
        storage = 0
        for j in frames:
            t_v = j * self.period_us + int(round(pair_jitter(link, j) * 1000))
            ki = delivered_frame_index(j, link.latency_ms, link.frame_period_ms)
            t_i = ki * self.period_us
            ego_pose = self.scenario.vehicle_pose(t_v / 1e6)
            rel = relative_pose(self.scenario.infra.pose, ego_pose)
            ego = self.ego_feature(j, t_v)
            gts = ground_truth_ego(self.scenario, t_v / 1e6)

            if mode is FusionMode.EARLY:
                cloud_i = self.infra_cloud(ki)
                delivery = transmit(link, b"", t_i, codec.transmission_cost("early", num_points=len(cloud_i)))
                fused = early_fuse(self.ego_cloud(j, t_v), cloud_i, rel)
                dets = detect(rasterize(fused, self.cfg.grid, "ego"), self.cfg.detector)
                storage = max(storage, 1)
            elif mode is FusionMode.LATE:
                dets_i = self.infra_detections(ki)
                delivery = transmit(link, b"", t_i, codec.transmission_cost("late", num_detections=len(dets_i)))
                dets = late_fuse(detect(ego, self.cfg.detector), dets_i, rel, self.cfg.late_iou_merge)
                storage = max(storage, 1)
            elif mode is FusionMode.NO_PREDICTION:
                pkt, _ = self.base_packet(ki)
                delivery = transmit(link, pkt, t_i)
                dec = self._decoded(pkt, ("b", ki))
                dets = self._fuse_infra(dec.base, ego_pose, ego)
                storage = max(storage, 1)
            elif mode is FusionMode.FLOW_INFRA:
                pkt, _ = self.flow_packet(ki)
                delivery = transmit(link, pkt, t_i)
                dec = self._decoded(pkt, ("f", ki))
                predicted = predict(dec.flow, max(t_v, dec.t_ref))
                dets = self._fuse_infra(predicted, ego_pose, ego)
                storage = max(storage, 1)
            elif mode is FusionMode.FLOW_VEHICLE:
                if ki < 1:
                    raise ValueError("vehicle-side flow needs two received frames")
                for i in range(min(received, default=max(0, ki - 1)), ki + 1):
                    received.setdefault(i, self.base_packet(i)[0])
                storage = max(storage, len(received))
                pkt = received[ki]
                delivery = transmit(link, pkt, t_i)
                prev = self._decoded(received[ki - 1], ("b", ki - 1)).base
                curr = self._decoded(pkt, ("b", ki)).base
                deriv = estimate_derivative(self.params, prev, curr, self.scenario.period)
                run.compute += 1
                predicted = predict(FeatureFlow(curr, deriv, t_i), max(t_v, t_i))
                dets = self._fuse_infra(predicted, ego_pose, ego)
            else:  # pragma: no cover
                raise ValueError(f"unsupported mode {mode}")
            run.frames.append(FrameResult(j, t_v, t_i, dets, gts, delivery.ab_bytes))
        run.storage = storage
        return run

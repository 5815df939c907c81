import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcoop import codec
from flowcoop.channel import LatencyLink
from flowcoop.featurizer import FeatureGrid, GridConfig, rasterize
from flowcoop.fusion import (
    CooperativeSimulator, DetectorConfig, FusionMode, PipelineConfig, align, detect, early_fuse, fuse, late_fuse, nms,
)
from flowcoop.geometry import Box3D, Pose2, bev_iou
from flowcoop.scene import Actor, Scenario, SensorSpec, sample_frame

SQUARE = GridConfig(x_range=(-16.0, 16.0), y_range=(-16.0, 16.0), cell=0.5)


def _scene(actors, n=1200, clutter=0, seed=3, infra_pose=Pose2(0, 0, 0), ego=Pose2(0, 0, 0), frames=10):
    return Scenario(tuple(actors), SensorSpec("infra", 60, n, clutter, 0, infra_pose),
                    SensorSpec("vehicle", 30, n, clutter), ((0.0, ego),), 100, frames, seed=seed)


def _cloud(seed=0):
    actors = [Actor(Box3D(5, 3, -1.2, 1.8, 4.4, 1.6, 0.3)), Actor(Box3D(-6, -4, -1.2, 2.0, 4.0, 1.5, 1.2))]
    return sample_frame(_scene(actors, seed=seed, clutter=200), "infra", 0.0)[0]


def test_align_identity():
    f = rasterize(_cloud(), SQUARE)
    out = align(f, Pose2(1, 2, 0.3), Pose2(1, 2, 0.3), SQUARE)
    np.testing.assert_allclose(out.data, f.data, atol=1e-6)


@pytest.mark.parametrize("k", [1, 3, -2])
def test_align_integer_shift(k):
    f = rasterize(_cloud(), SQUARE)
    out = align(f, Pose2(0, 0, 0), Pose2(k * SQUARE.cell, 0, 0), SQUARE).data
    want = np.zeros_like(f.data)
    if k > 0:
        want[:, :, :-k] = f.data[:, :, k:]
    else:
        want[:, :, -k:] = f.data[:, :, :k]
    np.testing.assert_allclose(out, want, atol=1e-6)


def test_align_quarter_turn_matches_direct_rasterization():
    cloud = _cloud(seed=5)
    src_pose = Pose2(0, 0, math.pi / 2)
    f = rasterize(cloud, SQUARE)
    moved = cloud.astype(np.float64)
    moved[:, :2] = src_pose.apply(moved[:, :2])
    direct = rasterize(moved, SQUARE).data
    aligned = align(f, src_pose, Pose2(0, 0, 0), SQUARE).data
    nz = (direct != 0) | (aligned != 0)
    assert np.abs(direct - aligned)[nz].mean() <= 0.05


def test_align_far_away_is_zero():
    f = rasterize(_cloud(), SQUARE)
    assert not align(f, Pose2(0, 0, 0), Pose2(500, 0, 0), SQUARE).data.any()


@settings(max_examples=30, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-3.2, 3.2))
def test_align_preserves_range(x, y, yaw):
    f = rasterize(_cloud(), SQUARE)
    out = align(f, Pose2(0, 0, 0), Pose2(x, y, yaw), SQUARE).data
    assert out.min() >= 0
    assert np.all(out.max(axis=(1, 2)) <= f.data.max(axis=(1, 2)) + 1e-6)


def test_fuse_is_max_and_commutative(rng):
    a = FeatureGrid(rng.random((4, 3, 3)), SQUARE)
    b = a.like(rng.random((4, 3, 3)))
    np.testing.assert_array_equal(fuse(a, b).data, np.maximum(a.data, b.data))
    np.testing.assert_array_equal(fuse(a, b).data, fuse(b, a).data)


def test_detect_empty():
    assert detect(FeatureGrid.zeros(SQUARE)) == []


def test_detect_single_actor():
    box = Box3D(4, -2, -1.2, 1.8, 4.4, 1.6, 0.4)
    cloud, gts = sample_frame(_scene([Actor(box)]), "infra", 0.0)
    dets = detect(rasterize(cloud, SQUARE), DetectorConfig(points_per_actor=1200))
    assert len(dets) == 1
    d = dets[0]
    assert math.hypot(d.cx - box.cx, d.cy - box.cy) <= 2 * SQUARE.cell
    assert 0 < d.confidence <= 1
    assert bev_iou(d, box) > 0.5


def test_detect_two_actors():
    actors = [Actor(Box3D(-5, 0, -1.2, 1.8, 4.4, 1.6)), Actor(Box3D(5, 2, -1.2, 1.8, 4.4, 1.6, 1.0))]
    cloud, _ = sample_frame(_scene(actors), "infra", 0.0)
    assert len(detect(rasterize(cloud, SQUARE))) == 2


def test_detect_min_cells_and_connectivity():
    g = GridConfig(x_range=(0, 6), y_range=(0, 6), cell=1.0)
    data = np.zeros(g.shape)
    data[3, 0, 0] = data[3, 1, 1] = data[3, 2, 2] = 1
    f = FeatureGrid(data, g)
    assert len(detect(f, DetectorConfig(min_cells=3, connectivity=8))) == 1
    assert detect(f, DetectorConfig(min_cells=3, connectivity=4)) == []


def test_early_fuse_examples(rng):
    v = rng.random((5, 4)).astype(np.float32)
    i = rng.random((3, 4)).astype(np.float32)
    np.testing.assert_array_equal(early_fuse(v, np.zeros((0, 4)), Pose2(3, 4, 1)), v)
    np.testing.assert_array_equal(early_fuse(v, i, Pose2(0, 0, 0)), np.concatenate([v, i]))


def test_late_fuse_examples():
    a = Box3D(0, 0, 0, 2, 4, 1.5, confidence=0.4)
    b = Box3D(20, 0, 0, 2, 4, 1.5, confidence=0.9)
    assert len(late_fuse([a], [b], Pose2(0, 0, 0))) == 2
    hi = Box3D(0, 0, 0, 2, 4, 1.5, confidence=0.8)
    assert late_fuse([a], [hi], Pose2(0, 0, 0)) == [hi]


def test_nms_orders_by_confidence():
    boxes = [Box3D(0, 0, 0, 2, 4, 1, confidence=c) for c in (0.2, 0.7, 0.7)]
    assert nms(boxes, 0.3) == [boxes[1]]


# -- simulator ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_sim():
    actors = [Actor(Box3D(12, 0, -1.2, 1.8, 4.4, 1.6), (3.0, 0.0)), Actor(Box3D(20, 5, -1.2, 1.8, 4.4, 1.6))]
    sc = _scene(actors, n=600, clutter=400, infra_pose=Pose2(2, -1, 0.05), frames=8)
    cfg = PipelineConfig(GridConfig(x_range=(0, 32), y_range=(-16, 16), cell=0.32),
                         DetectorConfig(points_per_actor=600), codec.CodecOptions(6, True), spatial_factor=2)
    return CooperativeSimulator(sc, cfg)


def test_mode_counters(small_sim):
    frames = list(range(3, 8))
    link = LatencyLink(200, (-30, 30), 100, 0)
    runs = {m: small_sim.run_mode(m, link, frames) for m in FusionMode}
    for m in FusionMode:
        assert runs[m].storage == (len(frames) + 1 if m is FusionMode.FLOW_VEHICLE else 1)
        assert runs[m].compute == (len(frames) if m is FusionMode.FLOW_VEHICLE else 0)
        assert len(runs[m].frames) == len(frames)
    early = runs[FusionMode.EARLY].frames
    assert all(f.ab_bytes == 16 * (2 * 600 + 400) for f in early)
    assert runs[FusionMode.NO_PREDICTION].ab_log == runs[FusionMode.FLOW_VEHICLE].ab_log


def test_early_fusion_ab_for_thousand_points():
    sc = _scene([Actor(Box3D(12, 0, -1.2, 1.8, 4.4, 1.6))], n=600, clutter=400, frames=4)
    sim = CooperativeSimulator(sc, PipelineConfig(GridConfig(x_range=(0, 32), y_range=(-16, 16), cell=0.32)))
    run = sim.run_mode(FusionMode.EARLY, LatencyLink(0, (0, 0)), [1, 2])
    assert run.ab_log == [16_000, 16_000]


def test_zero_latency_flow_equals_no_prediction(small_sim):
    link = LatencyLink(0, (0, 0), 100, 0)
    a = small_sim.run_mode(FusionMode.FLOW_INFRA, link, [2, 3, 4])
    b = small_sim.run_mode(FusionMode.NO_PREDICTION, link, [2, 3, 4])
    assert [f.detections for f in a.frames] == [f.detections for f in b.frames]


def test_mode_parse():
    assert FusionMode.parse("MiddleFlowInfra") is FusionMode.FLOW_INFRA
    with pytest.raises(ValueError):
        FusionMode.parse("Nope")

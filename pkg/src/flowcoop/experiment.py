"""Experiment drivers behind the CLI: latency sweeps, estimator training, benchmarks."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, codec
from .channel import LatencyLink
from .config import ExperimentConfig
from .featurizer import rasterize
from .flow import EstimatorParams, FeatureFlow, Frame, TrainResult, make_pairs, mean_loss, pair_features, train
from .fusion import CooperativeSimulator, FusionMode, ModeRun, align
from .geometry import Box3D
from .metrics import EvalResult, FrameBoxes, evaluate_run
from .scene import ScenarioConfig, build_scenario, sample_frame

log = logging.getLogger(__name__)

GAP_MIN_LATENCY = 200.0


def _fmt_thr(t: float) -> str:
    return f"{t:g}"


def map_columns(cfg: ExperimentConfig) -> list[tuple[str, str, float]]:
    return [(f"map_{m}_{_fmt_thr(t)}", m, t) for m in cfg.eval.modes for t in cfg.eval.iou_thresholds]


def load_params(cfg: ExperimentConfig, base_dir: Path | None = None) -> EstimatorParams:
    if not cfg.flow.params:
        return EstimatorParams.fd_init(cfg.grid_config().channels)
    path = Path(cfg.flow.params)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return EstimatorParams.load(path)


@dataclass
class SweepCell:
    run: ModeRun
    result: EvalResult


def evaluate_cell(sim: CooperativeSimulator, cfg: ExperimentConfig, mode: FusionMode, latency: float) -> SweepCell:
    link = LatencyLink(latency, cfg.jitter_range(), cfg.channel.period_ms, cfg.channel.seed)
    run = sim.run_mode(mode, link, cfg.eval_frames())
    res = evaluate_run([FrameBoxes(f.detections, f.ground_truth) for f in run.frames], cfg.eval_config(), run.ab_log)
    log.info("%s @ %g ms: %s", FusionMode(mode).value, latency, res.to_dict()["map"])
    return SweepCell(run, res)


def make_simulator(cfg: ExperimentConfig, params: EstimatorParams | None = None) -> CooperativeSimulator:
    return CooperativeSimulator(build_scenario(cfg.scenario), cfg.pipeline_config(), params)


def run_sweep(cfg: ExperimentConfig, params: EstimatorParams | None = None,
              sim: CooperativeSimulator | None = None) -> list[SweepCell]:
    """Evaluate every configured (mode, latency) pair on the configured scenario."""
    sim = sim or make_simulator(cfg, params)
    return [evaluate_cell(sim, cfg, mode, lat) for mode in cfg.fusion_modes() for lat in cfg.channel.latencies]


def build_report(cfg: ExperimentConfig, cells: list[SweepCell]) -> dict:
    cols = map_columns(cfg)
    rows = []
    for cell in cells:
        row = {"mode": cell.run.mode.value, "latency_ms": cell.run.latency_ms}
        for name, m, t in cols:
            row[name] = cell.result.map[(m, t)]
        row["ab_bytes"] = cell.result.ab_mean
        row["storage"] = cell.run.storage
        row["compute"] = cell.run.compute
        rows.append(row)

    gap_col = cols[0][0] if not any(c[0] == "map_bev_0.5" for c in cols) else "map_bev_0.5"
    by_key = {(r["mode"], r["latency_ms"]): r for r in rows}
    gaps = []
    for lat in cfg.channel.latencies:
        a = by_key.get((FusionMode.FLOW_INFRA.value, lat))
        b = by_key.get((FusionMode.NO_PREDICTION.value, lat))
        if a and b and lat >= GAP_MIN_LATENCY:
            gaps.append({"latency_ms": lat, "metric": gap_col, "gap": a[gap_col] - b[gap_col]})
    return {
        "metadata": {
            "tool": "flowcoop",
            "version": __version__,
            "seed": cfg.scenario.seed,
            "channel_seed": cfg.channel.seed,
            "config_hash": cfg.config_hash(),
            "eval_frames": [cfg.eval_frames()[0], cfg.eval_frames()[-1]],
        },
        "config": cfg.to_dict(),
        "rows": rows,
        "prediction_benefit": gaps,
    }


def report_csv(report: dict) -> str:
    rows = report["rows"]
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def write_report(report: dict, out_dir: Path, figures: bool = True) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in (("report.csv", report_csv(report)), ("report.json", report_json(report))):
        path = out_dir / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    if figures and report["rows"]:
        from . import plotting

        col = next((k for k in report["rows"][0] if k == "map_bev_0.5"), None) or next(
            k for k in report["rows"][0] if k.startswith("map_"))
        plotting.latency_sweep(report["rows"], col, out_dir / "latency_sweep.png")
        plotting.transmission_cost(report["rows"], out_dir / "transmission_cost.png")
        written += [out_dir / "latency_sweep.png", out_dir / "transmission_cost.png"]
    return written


# -- prediction / GT interchange ------------------------------------------------------


def box_to_json(b: Box3D, with_confidence: bool = True) -> dict:
    d = {"cx": b.cx, "cy": b.cy, "cz": b.cz, "w": b.w, "l": b.l, "h": b.h, "yaw": b.yaw, "class_id": b.class_id}
    if with_confidence:
        d["confidence"] = b.confidence
    return d


def box_from_json(d: dict) -> Box3D:
    return Box3D(
        float(d["cx"]), float(d["cy"]), float(d["cz"]), float(d["w"]), float(d["l"]), float(d["h"]),
        float(d["yaw"]), int(d.get("class_id", 0)), float(d.get("confidence", 1.0)),
    )


def write_frames_jsonl(path: Path, frames: list[tuple[int, int, list[Box3D]]], with_confidence=True, ab=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for idx, (fid, ts, boxes) in enumerate(frames):
            rec = {"frame_id": fid, "timestamp_us": ts, "boxes": [box_to_json(b, with_confidence) for b in boxes]}
            if ab is not None:
                rec["ab_bytes"] = ab[idx]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_frames_jsonl(path) -> dict[int, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                out[int(rec["frame_id"])] = {
                    "timestamp_us": int(rec.get("timestamp_us", 0)),
                    "boxes": [box_from_json(b) for b in rec["boxes"]],
                    "ab_bytes": rec.get("ab_bytes"),
                }
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed frame record ({exc})") from exc
    return out


def evaluate_files(pred_path, gt_path, cfg: ExperimentConfig) -> EvalResult:
    preds, gts = read_frames_jsonl(pred_path), read_frames_jsonl(gt_path)
    ids = sorted(set(preds) | set(gts))
    frames = [FrameBoxes(preds.get(i, {}).get("boxes", []), gts.get(i, {}).get("boxes", [])) for i in ids]
    ab = [preds[i]["ab_bytes"] for i in ids if i in preds and preds[i]["ab_bytes"] is not None]
    return evaluate_run(frames, cfg.eval_config(), ab)


def dump_frames(cells: list[SweepCell], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for cell in cells:
        stem = f"{cell.run.mode.value}_{cell.run.latency_ms:g}ms"
        fr = cell.run.frames
        write_frames_jsonl(out_dir / f"{stem}.pred.jsonl", [(f.frame_id, f.t_v, f.detections) for f in fr], True,
                           [f.ab_bytes for f in fr])
        write_frames_jsonl(out_dir / f"{stem}.gt.jsonl", [(f.frame_id, f.t_v, f.ground_truth) for f in fr], False)


# -- estimator training ---------------------------------------------------------------


def infra_frames(scfg: ScenarioConfig) -> list[Frame]:
    """Infrastructure-only sequence; no ego data is generated."""
    scen = build_scenario(scfg)
    period_us = int(round(scen.frame_period_ms * 1000))
    return [Frame(sample_frame(scen, "infra", i * scen.period, i)[0], i * period_us) for i in range(scen.num_frames)]


@dataclass
class TrainReport:
    result: TrainResult
    holdout_before: float
    holdout_after: float
    num_pairs: int
    num_holdout_pairs: int

    def to_dict(self) -> dict:
        return {
            **self.result.log_dict(),
            "holdout_before": self.holdout_before,
            "holdout_after": self.holdout_after,
            "num_pairs": self.num_pairs,
            "num_holdout_pairs": self.num_holdout_pairs,
        }


def train_estimator(cfg: ExperimentConfig) -> TrainReport:
    grid = cfg.grid_config()
    featurize = lambda cloud: rasterize(cloud, grid, "infra")  # noqa: E731
    f = cfg.flow
    pairs = make_pairs(infra_frames(cfg.scenario), f.k_min, f.k_max, f.seed)
    held_cfg = ScenarioConfig(**{**cfg.scenario.__dict__, "seed": cfg.scenario.seed + f.holdout_seed_offset})
    holdout = make_pairs(infra_frames(held_cfg), f.k_min, f.k_max, f.seed + 1)
    feats = [pair_features(p, featurize) for p in pairs]
    held = [pair_features(p, featurize) for p in holdout]
    C = grid.channels
    params0 = EstimatorParams.zeros(C) if f.init == "zero" else EstimatorParams.fd_init(C)
    before = mean_loss(params0, held)
    result = train(params0, feats, f.lr, f.weight_decay, f.epochs, f.seed)
    after = mean_loss(result.params, held)
    return TrainReport(result, before, after, len(feats), len(held))


# -- benchmark ------------------------------------------------------------------------------


def _rate(fn, units: float, min_time: float = 0.2) -> float:
    n, start = 0, time.perf_counter()
    while True:
        fn()
        n += 1
        elapsed = time.perf_counter() - start
        if elapsed >= min_time:
            return units * n / elapsed


def bench(cfg: ExperimentConfig) -> dict:
    scen = build_scenario(cfg.scenario)
    pcfg = cfg.pipeline_config()
    sim = CooperativeSimulator(scen, pcfg)
    i = min(max(1, cfg.channel.warmup_frames), scen.num_frames - 1)
    flow_pkt, flow_ab = sim.flow_packet(i)
    base_pkt, base_ab = sim.base_packet(i)

    f_prev, f_curr = sim.infra_raw(i - 1), sim.infra_raw(i)
    deriv = codec.spatial_compress(f_curr.like((f_curr.data - f_prev.data) / scen.period), pcfg.spatial_factor, pcfg.channel_group)
    flow = FeatureFlow(codec.spatial_compress(f_curr, pcfg.spatial_factor, pcfg.channel_group), deriv, 0)
    unmasked_opts = codec.CodecOptions(pcfg.codec.bits, False)
    _, unmasked_ab = codec.encode_packet(flow, scen.infra.pose, unmasked_opts)
    s = pcfg.spatial_factor * pcfg.mask_patch
    mask_bytes = codec.transmission_cost("mask", mask_dims=(pcfg.grid.H // s, pcfg.grid.W // s))

    cloud = sim.infra_cloud(i)
    grid = pcfg.grid
    cells = grid.H * grid.W
    ego_pose = scen.vehicle_pose(i * scen.period)
    return {
        "encode_bytes_per_s": _rate(lambda: codec.encode_packet(flow, scen.infra.pose, unmasked_opts), len(flow_pkt)),
        "decode_bytes_per_s": _rate(lambda: codec.decode_packet(flow_pkt), len(flow_pkt)),
        "rasterize_cells_per_s": _rate(lambda: rasterize(cloud, grid), cells),
        "align_cells_per_s": _rate(lambda: align(f_curr, scen.infra.pose, ego_pose, grid), cells),
        "packet_ab_bytes": {
            FusionMode.EARLY.value: codec.transmission_cost("early", num_points=len(cloud)),
            FusionMode.LATE.value: codec.transmission_cost("late", num_detections=len(sim.infra_detections(i))),
            FusionMode.NO_PREDICTION.value: base_ab,
            FusionMode.FLOW_INFRA.value: flow_ab,
            FusionMode.FLOW_VEHICLE.value: base_ab,
        },
        "flow_unmasked_ab_bytes": unmasked_ab,
        "flow_masked_ab_bytes": flow_ab if pcfg.codec.use_mask else None,
        "mask_bytes": mask_bytes,
        "flow_transmission_cost": codec.transmission_cost(
            "middle_flow", dims=flow.base.dims, bits=pcfg.codec.bits),
    }

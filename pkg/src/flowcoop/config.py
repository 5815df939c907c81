"""Experiment configuration: ``[section]`` / ``key = value`` files.

Every section and key is optional but nothing outside the known set is
accepted. Lists are comma separated; booleans are true/false/yes/no/on/off.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .codec import CodecOptions
from .featurizer import GridConfig
from .fusion import DetectorConfig, FusionMode, PipelineConfig
from .metrics import EvalConfig
from .scene import ScenarioConfig


class ConfigError(ValueError):
    """Unparseable or invalid experiment configuration."""


@dataclass
class GridSection:
    x_min: float = 0.0
    x_max: float = 92.16
    y_min: float = -46.08
    y_max: float = 46.08
    z_min: float = -3.0
    z_max: float = 1.0
    cell: float = 0.32


@dataclass
class DetectorSection:
    occupancy_threshold: float = 0.5
    min_cells: int = 6
    connectivity: int = 8
    z_center: float = -1.2
    height: float = 1.6
    points_per_actor: int = 0  # 0: use the scenario's value


@dataclass
class FlowSection:
    k_min: int = 1
    k_max: int = 2
    lr: float = 0.001
    weight_decay: float = 0.01
    epochs: int = 10
    init: str = "zero"  # initial parameters for train-flow: zero | fd
    params: str = ""  # trained parameter file used by simulate; empty: finite-difference init
    seed: int = 0
    holdout_seed_offset: int = 1000


@dataclass
class CodecSection:
    bits: int = 6  # 0: raw float32
    use_mask: bool = True
    mask_threshold: float = 0.0
    spatial_factor: int = 2
    channel_group: int = 1
    mask_patch: int = 1


@dataclass
class ChannelSection:
    latencies: list[float] = field(default_factory=lambda: [0.0, 100.0, 200.0, 300.0, 400.0, 500.0])
    jitter: bool = True
    jitter_lo: float = -30.0
    jitter_hi: float = 30.0
    period_ms: float = 100.0
    seed: int = 0
    warmup_frames: int = 6


@dataclass
class EvalSection:
    iou_thresholds: list[float] = field(default_factory=lambda: [0.5, 0.7])
    modes: list[str] = field(default_factory=lambda: ["3d", "bev"])
    roi: list[float] = field(default_factory=lambda: [0.0, -39.12, 100.0, 39.12])


@dataclass
class RunSection:
    modes: list[str] = field(default_factory=lambda: [m.value for m in FusionMode])
    late_iou_merge: float = 0.3
    figures: bool = True


SECTIONS = {
    "scenario": ScenarioConfig,
    "grid": GridSection,
    "detector": DetectorSection,
    "flow": FlowSection,
    "codec": CodecSection,
    "channel": ChannelSection,
    "eval": EvalSection,
    "run": RunSection,
}


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    grid: GridSection = field(default_factory=GridSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    flow: FlowSection = field(default_factory=FlowSection)
    codec: CodecSection = field(default_factory=CodecSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    # derived objects

    def grid_config(self) -> GridConfig:
        g = self.grid
        return GridConfig((g.x_min, g.x_max), (g.y_min, g.y_max), (g.z_min, g.z_max), g.cell)

    def detector_config(self) -> DetectorConfig:
        d = self.detector
        return DetectorConfig(
            d.occupancy_threshold, d.min_cells, d.connectivity, d.z_center, d.height,
            d.points_per_actor or self.scenario.points_per_actor,
        )

    def codec_options(self) -> CodecOptions:
        c = self.codec
        return CodecOptions(c.bits or None, c.use_mask, c.mask_threshold)

    def pipeline_config(self) -> PipelineConfig:
        c = self.codec
        return PipelineConfig(
            self.grid_config(), self.detector_config(), self.codec_options(),
            c.spatial_factor, c.channel_group, c.mask_patch, self.run.late_iou_merge,
        )

    def eval_config(self) -> EvalConfig:
        e = self.eval
        return EvalConfig(tuple(e.iou_thresholds), tuple(e.modes), tuple(e.roi))

    def fusion_modes(self) -> list[FusionMode]:
        return [FusionMode.parse(m) for m in self.run.modes]

    def jitter_range(self) -> tuple[float, float]:
        return (self.channel.jitter_lo, self.channel.jitter_hi) if self.channel.jitter else (0.0, 0.0)

    def eval_frames(self) -> list[int]:
        return list(range(self.channel.warmup_frames, self.scenario.num_frames))

    def validate(self) -> "ExperimentConfig":
        try:
            self.grid_config()
            self.detector_config()
            self.eval_config()
            modes = self.fusion_modes()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not modes:
            raise ConfigError("run.modes must not be empty")
        if self.channel.period_ms != self.scenario.frame_period_ms:
            raise ConfigError("channel.period_ms must equal scenario.frame_period_ms")
        if self.codec.bits and not 2 <= self.codec.bits <= 16:
            raise ConfigError("codec.bits must be 0 (raw) or in [2, 16]")
        if self.flow.init not in ("zero", "fd"):
            raise ConfigError("flow.init must be 'zero' or 'fd'")
        if not 1 <= self.flow.k_min <= self.flow.k_max:
            raise ConfigError("flow needs 1 <= k_min <= k_max")
        if any(l < 0 for l in self.channel.latencies):
            raise ConfigError("latencies must be non-negative")
        max_k = max((round(l / self.channel.period_ms) for l in self.channel.latencies), default=0)
        if self.channel.warmup_frames < max_k + 1:
            raise ConfigError(f"channel.warmup_frames must be >= {max_k + 1} for the configured latencies")
        if self.channel.warmup_frames >= self.scenario.num_frames:
            raise ConfigError("no frames left to evaluate after warmup")
        g = self.grid_config()
        s = self.codec.spatial_factor * self.codec.mask_patch
        if g.H % s or g.W % s:
            raise ConfigError("grid size must be divisible by spatial_factor * mask_patch")
        return self


def _convert(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ == list[float]:
            return [float(x) for x in raw.split(",") if x.strip()]
        if typ == list[str]:
            return [x.strip() for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported type {typ}")


def _field_types(cls) -> dict:
    import typing

    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",), comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig()
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        types = _field_types(SECTIONS[name])
        section = getattr(cfg, name)
        for key, raw in parser.items(name):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(section, key, _convert(raw, types[key], f"[{name}] {key}"))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config back to the file format."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)

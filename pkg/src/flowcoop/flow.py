"""Feature flow: first-order temporal prediction of BEV features.

A flow is a base feature plus a per-second derivative anchored at a
timestamp. The derivative comes either from a plain finite difference or
from a per-cell linear estimator (a 1x1 convolution over the concatenated
previous/current features) whose parameters are trained self-supervised
with a cosine-similarity loss against a later frame.

Timestamps are integer microseconds; derivatives are per second.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .featurizer import FeatureGrid

log = logging.getLogger(__name__)

US_PER_S = 1_000_000


class DivergenceError(RuntimeError):
    """Training produced a non-finite or out-of-range loss."""


@dataclass(frozen=True, eq=False)
class FeatureFlow:
    base: FeatureGrid
    deriv: FeatureGrid
    t_ref: int  # microseconds

    def __post_init__(self):
        if self.base.dims != self.deriv.dims:
            raise ValueError(f"base {self.base.dims} and derivative {self.deriv.dims} differ")
        if self.base.grid != self.deriv.grid:
            raise ValueError("base and derivative live on different grids")


@dataclass(eq=False)
class EstimatorParams:
    weights: np.ndarray  # (C, 2C) acting on concat(f_prev, f_curr)
    bias: np.ndarray  # (C,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        C = self.bias.shape[0]
        if self.weights.shape != (C, 2 * C):
            raise ValueError(f"weights must be ({C}, {2 * C}), got {self.weights.shape}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("estimator parameters must be finite")

    @property
    def channels(self) -> int:
        return self.bias.shape[0]

    @classmethod
    def fd_init(cls, channels: int) -> "EstimatorParams":
        """Parameters under which the estimator is exactly a finite difference."""
        eye = np.eye(channels)
        return cls(np.hstack([-eye, eye]), np.zeros(channels))

    @classmethod
    def zeros(cls, channels: int) -> "EstimatorParams":
        return cls(np.zeros((channels, 2 * channels)), np.zeros(channels))

    def copy(self) -> "EstimatorParams":
        return EstimatorParams(self.weights.copy(), self.bias.copy())

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorParams":
        return cls(np.array(d["weights"], dtype=np.float64), np.array(d["bias"], dtype=np.float64))

    def save(self, path, extra: dict | None = None) -> None:
        doc = {"estimator": self.to_dict()}
        if extra:
            doc.update(extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EstimatorParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh)["estimator"])


def _check_pair(f_prev: FeatureGrid, f_curr: FeatureGrid, dt: float) -> None:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if f_prev.dims != f_curr.dims:
        raise ValueError(f"dimension mismatch: {f_prev.dims} vs {f_curr.dims}")


def finite_difference_derivative(f_prev: FeatureGrid, f_curr: FeatureGrid, dt: float) -> FeatureGrid:
    _check_pair(f_prev, f_curr, dt)
    d = (f_curr.data.astype(np.float64) - f_prev.data.astype(np.float64)) / dt
    return f_curr.like(d)


def _linear_map(params: EstimatorParams, f_prev: np.ndarray, f_curr: np.ndarray) -> np.ndarray:
    x = np.concatenate([f_prev, f_curr]).astype(np.float64)
    return np.einsum("oi,ihw->ohw", params.weights, x) + params.bias[:, None, None]


def estimate_derivative(params: EstimatorParams, f_prev: FeatureGrid, f_curr: FeatureGrid, dt: float) -> FeatureGrid:
    _check_pair(f_prev, f_curr, dt)
    if params.channels != f_curr.dims[0]:
        raise ValueError(f"estimator has {params.channels} channels, features have {f_curr.dims[0]}")
    return f_curr.like(_linear_map(params, f_prev.data, f_curr.data) / dt)


def predict(flow: FeatureFlow, t_target: int) -> FeatureGrid:
    """Linear extrapolation ``base + (t_target - t_ref) * deriv``."""
    if t_target < flow.t_ref:
        raise ValueError(f"cannot predict into the past: {t_target} < {flow.t_ref}")
    dt = (t_target - flow.t_ref) / US_PER_S
    if dt == 0:
        return flow.base
    out = flow.base.data.astype(np.float64) + dt * flow.deriv.data.astype(np.float64)
    return flow.base.like(out)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm tensor")
    return float(np.vdot(a, b)) / (na * nb)


def cosine_similarity(a: FeatureGrid, b: FeatureGrid) -> float:
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")
    c = _cosine(a.data.astype(np.float64).ravel(), b.data.astype(np.float64).ravel())
    return min(1.0, max(-1.0, c))


# -- self-supervised training ------------------------------------------------


@dataclass(frozen=True)
class Frame:
    cloud: np.ndarray
    t: int  # microseconds


@dataclass(frozen=True)
class TrainingPair:
    p_prev: Frame
    p_curr: Frame
    p_future: Frame
    k: int

    def __post_init__(self):
        if not self.p_prev.t < self.p_curr.t < self.p_future.t:
            raise ValueError("pair timestamps must be strictly increasing")
        if self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass(frozen=True, eq=False)
class PairFeatures:
    f_prev: np.ndarray
    f_curr: np.ndarray
    target: np.ndarray
    dt: float  # seconds between prev and curr
    horizon: float  # seconds between curr and target


def pair_features(pair: TrainingPair, featurize: Callable[[np.ndarray], FeatureGrid]) -> PairFeatures:
    return PairFeatures(
        featurize(pair.p_prev.cloud).data.astype(np.float64),
        featurize(pair.p_curr.cloud).data.astype(np.float64),
        featurize(pair.p_future.cloud).data.astype(np.float64),
        (pair.p_curr.t - pair.p_prev.t) / US_PER_S,
        (pair.p_future.t - pair.p_curr.t) / US_PER_S,
    )


def _as_features(pair, featurize) -> PairFeatures:
    return pair if isinstance(pair, PairFeatures) else pair_features(pair, featurize)


def _prediction(params: EstimatorParams, pf: PairFeatures) -> np.ndarray:
    return pf.f_curr + (pf.horizon / pf.dt) * _linear_map(params, pf.f_prev, pf.f_curr)


def flow_loss(params: EstimatorParams, pair, featurize=None) -> float:
    """``1 - cos(prediction, target)`` for one pair, in [0, 2].

    ``pair`` may be a :class:`TrainingPair` (featurized on the fly) or
    precomputed :class:`PairFeatures`.
    """
    pf = _as_features(pair, featurize)
    c = _cosine(_prediction(params, pf).ravel(), pf.target.ravel())
    return min(2.0, max(0.0, 1.0 - c))


def _loss_and_grad(params: EstimatorParams, pf: PairFeatures) -> tuple[float, np.ndarray, np.ndarray]:
    r = pf.horizon / pf.dt
    p = _prediction(params, pf)
    y = pf.target
    np_, ny = float(np.linalg.norm(p)), float(np.linalg.norm(y))
    if np_ == 0.0 or ny == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm tensor")
    dot = float(np.vdot(p, y))
    loss = 1.0 - dot / (np_ * ny)
    # dL/dp
    g = -(y / (np_ * ny) - (dot / (np_**3 * ny)) * p)
    x = np.concatenate([pf.f_prev, pf.f_curr])
    gw = r * np.einsum("ohw,ihw->oi", g, x)
    gb = r * g.sum(axis=(1, 2))
    return min(2.0, max(0.0, loss)), gw, gb


def flow_loss_gradient(params: EstimatorParams, pair, featurize=None) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of :func:`flow_loss` w.r.t. (weights, bias)."""
    _, gw, gb = _loss_and_grad(params, _as_features(pair, featurize))
    return gw, gb


def make_pairs(frames: Sequence[Frame], k_min: int = 1, k_max: int = 2, seed: int = 0) -> list[TrainingPair]:
    """One pair per anchor that has a predecessor and ``k_max`` successors."""
    if not 1 <= k_min <= k_max:
        raise ValueError("need 1 <= k_min <= k_max")
    n = len(frames)
    if n < k_max + 2:
        raise ValueError(f"need at least {k_max + 2} frames, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5041]))
    pairs = []
    for i in range(1, n - k_max):
        k = int(rng.integers(k_min, k_max + 1))
        pairs.append(TrainingPair(frames[i - 1], frames[i], frames[i + k], k))
    return pairs


@dataclass
class TrainResult:
    params: EstimatorParams
    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    final_loss: float = math.nan

    def log_dict(self) -> dict:
        return {
            "initial_loss": self.initial_loss,
            "epoch_losses": list(self.epoch_losses),
            "final_loss": self.final_loss,
        }


def mean_loss(params: EstimatorParams, pairs, featurize=None) -> float:
    feats = [_as_features(p, featurize) for p in pairs]
    return float(np.mean([flow_loss(params, pf) for pf in feats]))


def _guard(value: float, what: str) -> None:
    if not math.isfinite(value) or value > 2.0 + 1e-6:
        raise DivergenceError(f"{what} diverged: {value}")


def train(
    params0: EstimatorParams,
    pairs,
    lr: float = 0.001,
    weight_decay: float = 0.01,
    epochs: int = 10,
    seed: int = 0,
    featurize=None,
) -> TrainResult:
    """Per-pair gradient descent with decoupled L2 decay, shuffled each epoch."""
    if not pairs:
        raise ValueError("no training pairs")
    feats = [_as_features(p, featurize) for p in pairs]
    params = params0.copy()
    try:
        initial = mean_loss(params, feats)
    except ValueError as exc:
        raise DivergenceError(str(exc)) from exc
    _guard(initial, "initial loss")
    result = TrainResult(params, initial)
    for epoch in range(epochs):
        order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(len(feats))
        losses = []
        for idx in order:
            try:
                loss, gw, gb = _loss_and_grad(params, feats[idx])
            except ValueError as exc:
                raise DivergenceError(str(exc)) from exc
            losses.append(loss)
            with np.errstate(over="ignore", invalid="ignore"):  # caught by the finiteness check below
                params.weights = params.weights - lr * (gw + weight_decay * params.weights)
                params.bias = params.bias - lr * (gb + weight_decay * params.bias)
        epoch_loss = float(np.mean(losses))
        _guard(epoch_loss, f"epoch {epoch} loss")
        if not (np.all(np.isfinite(params.weights)) and np.all(np.isfinite(params.bias))):
            raise DivergenceError(f"non-finite parameters after epoch {epoch}")
        result.epoch_losses.append(epoch_loss)
        log.debug("epoch %d mean loss %.6f", epoch, epoch_loss)
    try:
        result.final_loss = mean_loss(params, feats)
    except ValueError as exc:
        raise DivergenceError(str(exc)) from exc
    result.params = params
    return result

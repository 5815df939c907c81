"""Roadside-to-vehicle delivery: fixed latency, pair jitter, frame substitution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import HEADER_SIZE

_JITTER_KEY = 0x4A17


@dataclass(frozen=True)
class LatencyLink:
    latency_ms: float = 0.0
    jitter_range_ms: tuple[float, float] = (-30.0, 30.0)
    frame_period_ms: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ValueError("latency must be non-negative")
        lo, hi = self.jitter_range_ms
        if lo > hi:
            raise ValueError("jitter range must satisfy lo <= hi")
        if self.frame_period_ms <= 0:
            raise ValueError("frame period must be positive")


@dataclass(frozen=True)
class Delivery:
    packet: bytes
    t_send: int  # microseconds
    t_recv: int
    ab_bytes: int


def delivered_frame_index(current: int, latency_ms: float, frame_period_ms: float = 100.0) -> int:
    """Index of the newest infrastructure frame available after ``latency_ms``.

    A latency of k frame periods replaces the current frame by the one k
    frames earlier (rounded half-to-even), clamped at the first frame.
    """
    if current < 0:
        raise ValueError("frame index must be non-negative")
    k = int(np.rint(latency_ms / frame_period_ms))
    return max(0, current - k)


def pair_jitter(link: LatencyLink, frame_index: int) -> float:
    """Vehicle-vs-infrastructure timestamp offset (ms) for one frame pair."""
    lo, hi = link.jitter_range_ms
    if lo == hi:
        return float(lo)
    rng = np.random.default_rng(np.random.SeedSequence([link.seed, _JITTER_KEY, frame_index]))
    return float(rng.uniform(lo, hi))


def transmit(link: LatencyLink, packet: bytes, t_send: int, payload_bytes: int | None = None) -> Delivery:
    """Deliver ``packet`` after the link latency.

    AB counts payload only; for ``FFLW`` packets that is everything after the
    header. Other payloads (raw clouds, detection lists) pass their own count.
    """
    if payload_bytes is None:
        payload_bytes = max(0, len(packet) - HEADER_SIZE)
    return Delivery(packet, int(t_send), int(t_send) + int(round(link.latency_ms * 1000)), int(payload_bytes))

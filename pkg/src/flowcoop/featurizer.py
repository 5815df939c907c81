"""Closed-form BEV pillar rasterizer producing dense feature grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NUM_CHANNELS = 4


@dataclass(frozen=True)
class GridConfig:
    x_range: tuple[float, float] = (0.0, 92.16)
    y_range: tuple[float, float] = (-46.08, 46.08)
    z_range: tuple[float, float] = (-3.0, 1.0)
    cell: float = 0.16
    channels: int = NUM_CHANNELS

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise ValueError("ranges must be increasing")
        for lo, hi in (self.x_range, self.y_range):
            n = (hi - lo) / self.cell
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"extent {hi - lo} is not a multiple of cell {self.cell}")

    @property
    def W(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell))

    @property
    def H(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.H, self.W)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """x coordinates of columns and y coordinates of rows."""
        xs = self.x_range[0] + (np.arange(self.W) + 0.5) * self.cell
        ys = self.y_range[0] + (np.arange(self.H) + 0.5) * self.cell
        return xs, ys

    def coarsen(self, factor: int) -> "GridConfig":
        """Same extent with ``factor``-times larger cells."""
        return GridConfig(self.x_range, self.y_range, self.z_range, self.cell * factor, self.channels)


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """A (C, H, W) float32 tensor tied to a grid and a named frame."""

    data: np.ndarray
    grid: GridConfig
    frame: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"feature data must be 3-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature grid contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def like(self, data: np.ndarray) -> "FeatureGrid":
        return FeatureGrid(data, self.grid, self.frame)

    @classmethod
    def zeros(cls, grid: GridConfig, frame: str = "") -> "FeatureGrid":
        return cls(np.zeros(grid.shape, dtype=np.float32), grid, frame)


def rasterize(cloud: np.ndarray, grid: GridConfig, frame: str = "") -> FeatureGrid:
    """Per-cell (log1p count, max height above z_min, mean intensity, occupancy).

    Points outside the x/y/z ranges are dropped. The result does not depend on
    point order.
    """
    C, H, W = grid.shape
    if C != NUM_CHANNELS:
        raise ValueError(f"rasterizer produces {NUM_CHANNELS} channels, grid asks for {C}")
    out = np.zeros((C, H, W), dtype=np.float32)
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 4)
    if len(pts) == 0:
        return FeatureGrid(out, grid, frame)
    x, y, z, inten = pts.T
    (x0, x1), (y0, y1), (z0, z1) = grid.x_range, grid.y_range, grid.z_range
    keep = (x >= x0) & (x < x1) & (y >= y0) & (y < y1) & (z >= z0) & (z <= z1)
    if not keep.any():
        return FeatureGrid(out, grid, frame)
    col = np.floor((x[keep] - x0) / grid.cell).astype(np.int64)
    row = np.floor((y[keep] - y0) / grid.cell).astype(np.int64)
    np.clip(col, 0, W - 1, out=col)
    np.clip(row, 0, H - 1, out=row)
    flat = row * W + col

    count = np.bincount(flat, minlength=H * W)
    # integer-valued sums are order independent; intensity is summed in sorted order
    order = np.lexsort((inten[keep], flat))
    isum = np.zeros(H * W)
    np.add.at(isum, flat[order], inten[keep][order])
    zmax = np.full(H * W, -np.inf)
    np.maximum.at(zmax, flat, z[keep])

    occ = count > 0
    out[0] = np.log1p(count).reshape(H, W)
    out[1] = np.where(occ, zmax - z0, 0.0).reshape(H, W)
    out[2] = np.where(occ, isum / np.maximum(count, 1), 0.0).reshape(H, W)
    out[3] = occ.reshape(H, W)
    return FeatureGrid(out, grid, frame)

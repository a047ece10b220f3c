"""Playing and exploration metrics.

Playing: normalized time alive, kill counts, and the positive kill ratio
(share of matches with at least one kill). Exploration: a Gaussian KDE over
visited (x, y) positions normalized to sum 1, compared against the
demonstration density with regularized KL divergence, Pearson correlation
over cells, and histogram intersection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, MetricError

KDE_RESOLUTION = 64
KL_EPS = 1e-7


@dataclass(frozen=True)
class EpisodeResult:
    kills: int
    ticks_survived: int
    max_ticks: int
    reason: str

    @property
    def time_alive_normalized(self) -> float:
        return self.ticks_survived / self.max_ticks


@dataclass(frozen=True)
class PlayStats:
    time_alive: tuple[float, ...]   # normalized per episode
    kills: tuple[int, ...]
    mean_kills: float
    median_kills: float
    mean_time_alive: float
    median_time_alive: float
    pkr: float

    @property
    def n_episodes(self) -> int:
        return len(self.kills)


def play_stats(results: Sequence[EpisodeResult]) -> PlayStats:
    if not results:
        raise MetricError("play_stats needs at least one episode")
    time_alive = tuple(r.time_alive_normalized for r in results)
    kills = tuple(r.kills for r in results)
    return PlayStats(
        time_alive=time_alive,
        kills=kills,
        mean_kills=float(np.mean(kills)),
        median_kills=float(np.median(kills)),
        mean_time_alive=float(np.mean(time_alive)),
        median_time_alive=float(np.median(time_alive)),
        pkr=float(np.mean([k >= 1 for k in kills])),
    )


@dataclass(frozen=True)
class DensityGrid:
    values: np.ndarray                          # (R, R), sums to 1
    extent: tuple[float, float, float, float]   # xmin, xmax, ymin, ymax
    bandwidth: float

    @property
    def resolution(self) -> int:
        return self.values.shape[0]


def scott_bandwidth(points: np.ndarray) -> float:
    """Scott's rule for 2D data: n^(-1/6) times the per-axis std, averaged."""
    n = points.shape[0]
    spread = 0.5 * (points[:, 0].std() + points[:, 1].std())
    return float(n ** (-1.0 / 6.0) * spread)


def kde_2d(points, extent, resolution: int = KDE_RESOLUTION,
           bandwidth: float | None = None) -> DensityGrid:
    """Isotropic Gaussian KDE evaluated at cell centers, normalized to sum 1."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 1:
        raise MetricError(f"kde_2d needs (n, 2) points, got shape {points.shape}")
    if resolution < 2:
        raise ConfigError(f"field resolution: must be >= 2, got {resolution}")
    xmin, xmax, ymin, ymax = extent
    if not (xmax > xmin and ymax > ymin):
        raise ConfigError(f"field extent: degenerate extent {extent}")
    if bandwidth is None:
        bandwidth = scott_bandwidth(points)
    # Floor at half a cell so single points and zero-variance clouds stay finite.
    floor = 0.5 * max(xmax - xmin, ymax - ymin) / resolution
    bandwidth = max(float(bandwidth), floor)
    if bandwidth <= 0:
        raise ConfigError(f"field bandwidth: must be > 0, got {bandwidth}")

    cx = xmin + (np.arange(resolution) + 0.5) / resolution * (xmax - xmin)
    cy = ymin + (np.arange(resolution) + 0.5) / resolution * (ymax - ymin)
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    centers = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)

    inv = -0.5 / (bandwidth * bandwidth)
    density = np.zeros(centers.shape[0])
    for start in range(0, points.shape[0], 2048):
        chunk = points[start:start + 2048]
        d2 = ((centers[:, None, :] - chunk[None, :, :]) ** 2).sum(axis=2)
        density += np.exp(inv * d2).sum(axis=1)
    total = density.sum()
    if total <= 0.0:
        raise MetricError("all probability mass fell outside the grid")
    values = (density / total).reshape(resolution, resolution)
    return DensityGrid(values=values, extent=tuple(float(v) for v in extent),
                       bandwidth=float(bandwidth))


def _check_same_grid(p: DensityGrid, q: DensityGrid) -> None:
    if p.values.shape != q.values.shape:
        raise MetricError(
            f"grid shape mismatch: {p.values.shape} vs {q.values.shape}")
    if p.extent != q.extent:
        raise MetricError(f"grid extent mismatch: {p.extent} vs {q.extent}")


def kl_div(policy: DensityGrid, data: DensityGrid, eps: float = KL_EPS) -> float:
    """Regularized KL divergence of the data density from the policy density:
    sum_i Q_i * log(eps + Q_i / (eps + P_i)), natural log."""
    _check_same_grid(policy, data)
    p = policy.values.reshape(-1)
    q = data.values.reshape(-1)
    return float(np.sum(q * np.log(eps + q / (eps + p))))


def cross_corr(policy: DensityGrid, data: DensityGrid) -> float:
    """Pearson correlation between the two densities over flattened cells."""
    _check_same_grid(policy, data)
    p = policy.values.reshape(-1)
    q = data.values.reshape(-1)
    p_std = p.std()
    q_std = q.std()
    if p_std == 0.0 or q_std == 0.0:
        raise MetricError("correlation undefined: a density grid has zero variance")
    return float(((p - p.mean()) * (q - q.mean())).mean() / (p_std * q_std))


def similarity(policy: DensityGrid, data: DensityGrid) -> float:
    """Histogram intersection: 1 for identical normalized densities, 0 for
    disjoint support."""
    _check_same_grid(policy, data)
    return float(np.minimum(policy.values, data.values).sum())


def write_density_csv(grid: DensityGrid, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid.values:
            writer.writerow([f"{v:.9e}" for v in row])


def write_density_pgm(grid: DensityGrid, path: str | Path) -> None:
    """8-bit binary PGM scaled to the peak cell, for eyeballing."""
    peak = grid.values.max()
    scaled = np.zeros_like(grid.values) if peak <= 0 else grid.values / peak
    pixels = (scaled * 255.0).round().astype(np.uint8)
    r = grid.resolution
    with open(path, "wb") as fh:
        fh.write(f"P5\n{r} {r}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_stats_csv(stats: PlayStats, path: str | Path) -> None:
    """One row per episode plus an aggregate row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "time_alive_normalized", "kills"])
        for i, (alive, kills) in enumerate(zip(stats.time_alive, stats.kills)):
            writer.writerow([i, f"{alive:.6f}", kills])
        writer.writerow([
            "aggregate",
            f"mean={stats.mean_time_alive:.6f};median={stats.median_time_alive:.6f}",
            f"mean={stats.mean_kills:.6f};median={stats.median_kills:.6f};pkr={stats.pkr:.6f}",
        ])

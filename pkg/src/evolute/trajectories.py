"""Demonstration persistence, splitting, and minibatching.

The on-disk ``.evtraj`` format is a little-endian binary: a magic/version
header, a JSON metadata blob (sim config, feature layout, counts), then one
block per trajectory holding its own JSON meta plus a packed float32 payload
of one record per sample (flattened observation, continuous pair, discrete
pair). Floats survive a save/load round-trip bit-exactly because samples are
float32 end to end. A JSON-lines export exists for eyeballing records.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .sim import FeatureLayout, SimConfig

MAGIC = b"EVTJ"
MAJOR_VERSION = 1
MINOR_VERSION = 0


@dataclass
class Trajectory:
    """One episode of (observation, action) samples, stored as matrices.

    Row order is tick order. ``observations`` rows are flattened per
    ``layout``; ``continuous`` is (throttle, steering); ``discrete`` holds
    0.0/1.0 fire flags.
    """

    episode_id: int
    layout: FeatureLayout
    observations: np.ndarray   # (M, obs_dim) float32
    continuous: np.ndarray     # (M, 2) float32
    discrete: np.ndarray       # (M, 2) float32
    sim_config: dict
    source: str = "scripted"
    seed: int = 0
    config_hash: str = ""

    def __len__(self) -> int:
        return self.observations.shape[0]


@dataclass
class Batch:
    observations: np.ndarray        # (B, obs_dim) float64
    continuous_targets: np.ndarray  # (B, 2) float64
    discrete_targets: np.ndarray    # (B, 2) float64
    size: int


def trajectory_from_arrays(episode_id: int, sim_config: SimConfig,
                           observations: np.ndarray, continuous: np.ndarray,
                           discrete: np.ndarray, source: str, seed: int) -> Trajectory:
    if observations.shape[0] == 0:
        raise DataError("trajectory must contain at least one sample")
    layout = FeatureLayout.from_config(sim_config)
    return Trajectory(
        episode_id=episode_id,
        layout=layout,
        observations=np.ascontiguousarray(observations, dtype=np.float32),
        continuous=np.ascontiguousarray(continuous, dtype=np.float32),
        discrete=np.ascontiguousarray(discrete, dtype=np.float32),
        sim_config=sim_config.as_dict(),
        source=source,
        seed=seed,
        config_hash=sim_config.content_hash(),
    )


def _record_width(layout: FeatureLayout) -> int:
    return layout.obs_dim + 4


def save(trajectories: Sequence[Trajectory], path: str | Path) -> None:
    if not trajectories:
        raise DataError("refusing to save an empty dataset")
    path = Path(path)
    first = trajectories[0]
    layout = first.layout
    header_meta = {
        "version": [MAJOR_VERSION, MINOR_VERSION],
        "sim_config": first.sim_config,
        "layout": layout.as_dict(),
        "n_trajectories": len(trajectories),
        "config_hash": first.config_hash,
    }
    header_blob = json.dumps(header_meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", MAJOR_VERSION, MINOR_VERSION))
        fh.write(struct.pack("<I", len(header_blob)))
        fh.write(header_blob)
        for traj in trajectories:
            if traj.layout != layout:
                raise DataError(
                    f"episode {traj.episode_id}: layout {traj.layout} does not match file layout {layout}"
                )
            payload = np.concatenate(
                [traj.observations, traj.continuous, traj.discrete], axis=1
            ).astype("<f4").tobytes()
            meta = {
                "episode_id": traj.episode_id,
                "source": traj.source,
                "seed": traj.seed,
                "n_samples": len(traj),
                "config_hash": traj.config_hash,
                "crc32": zlib.crc32(payload),
            }
            blob = json.dumps(meta, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(payload)


def _validate_samples(traj: Trajectory, arena_size: float) -> None:
    obs = traj.observations
    layout = traj.layout
    checks = [
        np.isfinite(obs).all(axis=1),
        (obs[:, layout.depth_slice] >= 0.0).all(axis=1),
        (obs[:, layout.depth_slice] <= 1.0).all(axis=1),
        (obs[:, layout.occupancy_slice] >= 0.0).all(axis=1),
        (obs[:, layout.occupancy_slice] <= 1.0).all(axis=1),
        (obs[:, layout.telemetry_slice.start] >= 0.0) & (obs[:, layout.telemetry_slice.start] <= arena_size),
        (obs[:, layout.telemetry_slice.start + 1] >= 0.0) & (obs[:, layout.telemetry_slice.start + 1] <= arena_size),
        np.isfinite(traj.continuous).all(axis=1),
        (traj.continuous >= 0.0).all(axis=1),
        (traj.continuous <= 1.0).all(axis=1),
        np.isin(traj.discrete, (0.0, 1.0)).all(axis=1),
    ]
    ok = np.logical_and.reduce(checks)
    if not ok.all():
        index = int(np.argmin(ok))
        raise DataError(
            f"episode {traj.episode_id}: corrupted record {index} violates sample invariants"
        )


def load(path: str | Path) -> list[Trajectory]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(data) == 0:
        raise DataError(f"{path}: dataset file is empty")
    if len(data) < 12 or data[:4] != MAGIC:
        raise DataError(f"{path}: not an .evtraj file (bad magic)")
    major, minor = struct.unpack_from("<HH", data, 4)
    if major != MAJOR_VERSION:
        raise DataError(f"{path}: unsupported major version {major} (reader supports {MAJOR_VERSION})")
    offset = 8
    header, offset = _read_blob(data, offset, path, "header")
    try:
        layout = FeatureLayout(**header["layout"])
        sim_config = header["sim_config"]
        n_trajectories = header["n_trajectories"]
        file_hash = header.get("config_hash", "")
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed header: {exc}") from exc

    width = _record_width(layout)
    trajectories: list[Trajectory] = []
    for _ in range(n_trajectories):
        meta, offset = _read_blob(data, offset, path, f"trajectory {len(trajectories)}")
        n_samples = meta.get("n_samples", 0)
        if n_samples < 1:
            raise DataError(f"{path}: trajectory {len(trajectories)} has no samples")
        nbytes = n_samples * width * 4
        if offset + nbytes > len(data):
            got = (len(data) - offset) // (width * 4)
            raise DataError(
                f"{path}: truncated payload in episode {meta.get('episode_id')}: "
                f"record {got} of {n_samples} incomplete"
            )
        payload = data[offset:offset + nbytes]
        offset += nbytes
        matrix = np.frombuffer(payload, dtype="<f4").reshape(n_samples, width).copy()
        traj = Trajectory(
            episode_id=meta.get("episode_id", len(trajectories)),
            layout=layout,
            observations=matrix[:, :layout.obs_dim],
            continuous=matrix[:, layout.obs_dim:layout.obs_dim + 2],
            discrete=matrix[:, layout.obs_dim + 2:],
            sim_config=sim_config,
            source=meta.get("source", "scripted"),
            seed=meta.get("seed", 0),
            config_hash=meta.get("config_hash", ""),
        )
        if "crc32" in meta and zlib.crc32(payload) != meta["crc32"]:
            _validate_samples(traj, float(sim_config["arena_size"]))
            raise DataError(
                f"{path}: checksum mismatch in episode {traj.episode_id}"
            )
        _validate_samples(traj, float(sim_config["arena_size"]))
        if file_hash and traj.config_hash and traj.config_hash != file_hash:
            warnings.warn(
                f"{path}: episode {traj.episode_id} was recorded under a different "
                f"sim config ({traj.config_hash} vs {file_hash})",
                stacklevel=2,
            )
        trajectories.append(traj)
    if not trajectories:
        raise DataError(f"{path}: dataset contains no trajectories")
    return trajectories


def _read_blob(data: bytes, offset: int, path: Path, what: str) -> tuple[dict, int]:
    if offset + 4 > len(data):
        raise DataError(f"{path}: truncated {what} length")
    (length,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if offset + length > len(data):
        raise DataError(f"{path}: truncated {what} blob")
    try:
        blob = json.loads(data[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed {what}: {exc}") from exc
    return blob, offset + length


def export_jsonl(trajectories: Sequence[Trajectory], path: str | Path) -> None:
    """Debug export: one JSON record per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            for i in range(len(traj)):
                record = {
                    "episode_id": traj.episode_id,
                    "tick": i,
                    "observation": [float(v) for v in traj.observations[i]],
                    "continuous": [float(v) for v in traj.continuous[i]],
                    "discrete": [int(v) for v in traj.discrete[i]],
                }
                fh.write(json.dumps(record) + "\n")


def split(trajectories: Sequence[Trajectory], val_fraction: float,
          seed: int) -> tuple[list[Trajectory], list[Trajectory]]:
    """Shuffle and split at episode granularity, never inside one."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"field val_fraction: must be in [0, 1), got {val_fraction}")
    order = np.random.default_rng(np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF)).permutation(len(trajectories))
    n_val = int(round(val_fraction * len(trajectories)))
    val_idx = set(order[:n_val].tolist())
    train = [t for i, t in enumerate(trajectories) if i not in val_idx]
    val = [t for i, t in enumerate(trajectories) if i in val_idx]
    return train, val


class SamplePool:
    """All samples of a dataset pooled into contiguous matrices."""

    def __init__(self, observations: np.ndarray, continuous: np.ndarray,
                 discrete: np.ndarray, layout: FeatureLayout):
        self.observations = observations
        self.continuous = continuous
        self.discrete = discrete
        self.layout = layout

    def __len__(self) -> int:
        return self.observations.shape[0]

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "SamplePool":
        if not trajectories:
            raise DataError("cannot pool an empty dataset")
        return cls(
            observations=np.concatenate([t.observations for t in trajectories]),
            continuous=np.concatenate([t.continuous for t in trajectories]),
            discrete=np.concatenate([t.discrete for t in trajectories]),
            layout=trajectories[0].layout,
        )


def batch_iter(source: Sequence[Trajectory] | SamplePool, batch_size: int,
               seed: int) -> Iterator[Batch]:
    """One seeded-shuffle pass over all pooled samples; emits the last
    partial batch, so one epoch's batches partition the dataset exactly."""
    if batch_size < 1:
        raise ConfigError(f"field batch_size: must be >= 1, got {batch_size}")
    pool = source if isinstance(source, SamplePool) else SamplePool.from_trajectories(source)
    if len(pool) == 0:
        raise DataError("cannot iterate over an empty dataset")
    order = np.random.default_rng(np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF)).permutation(len(pool))
    for start in range(0, len(pool), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(
            observations=pool.observations[idx].astype(np.float64),
            continuous_targets=pool.continuous[idx].astype(np.float64),
            discrete_targets=pool.discrete[idx].astype(np.float64),
            size=len(idx),
        )

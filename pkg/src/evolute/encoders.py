"""Per-sensor feature encoders shared by both policy streams.

Each sensor block of the flattened observation (depth rays, occupancy grid,
telemetry) gets its own small MLP; the concatenated codes feed the stream
trunks. Telemetry is scaled by a fixed per-feature vector recorded with the
model, since raw positions are in meters.
"""

from __future__ import annotations

import numpy as np

from . import sim
from .errors import ConfigError
from .nn import Mlp, mlp_state, restore_mlp
from .sim import FeatureLayout, SimConfig

DEPTH_WIDTHS = (64, 32)
OCCUPANCY_WIDTHS = (128, 32)
TELEMETRY_WIDTHS = (32, 16)


def telemetry_scale_for(config: SimConfig) -> np.ndarray:
    """Normalizes (x, y, d_x, d_y, v, k) to roughly unit range."""
    return np.array([
        1.0 / config.arena_size, 1.0 / config.arena_size,
        1.0, 1.0, 1.0 / sim.V_MAX, 1.0 / sim.SECONDARY_AMMO,
    ])


class ObservationEncoder:
    def __init__(self, layout: FeatureLayout, telemetry_scale: np.ndarray, *,
                 rng: np.random.Generator):
        if len(telemetry_scale) != layout.telemetry_dim:
            raise ConfigError(
                f"field telemetry_scale: expected {layout.telemetry_dim} entries, "
                f"got {len(telemetry_scale)}")
        self.layout = layout
        self.telemetry_scale = np.asarray(telemetry_scale, dtype=np.float64)
        self.depth = Mlp([layout.n_rays, *DEPTH_WIDTHS], rng=rng)
        self.occupancy = Mlp([layout.grid_res ** 2, *OCCUPANCY_WIDTHS], rng=rng)
        self.telemetry = Mlp([layout.telemetry_dim, *TELEMETRY_WIDTHS], rng=rng)

    @property
    def feature_dim(self) -> int:
        return DEPTH_WIDTHS[-1] + OCCUPANCY_WIDTHS[-1] + TELEMETRY_WIDTHS[-1]

    def params(self) -> list[np.ndarray]:
        return self.depth.params() + self.occupancy.params() + self.telemetry.params()

    def forward(self, obs: np.ndarray) -> tuple[np.ndarray, tuple]:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 1:
            obs = obs[None, :]
        if obs.shape[1] != self.layout.obs_dim:
            raise ConfigError(
                f"observation width {obs.shape[1]} does not match layout "
                f"width {self.layout.obs_dim}")
        d, dc = self.depth.forward(obs[:, self.layout.depth_slice])
        o, oc = self.occupancy.forward(obs[:, self.layout.occupancy_slice])
        t, tc = self.telemetry.forward(obs[:, self.layout.telemetry_slice] * self.telemetry_scale)
        return np.concatenate([d, o, t], axis=1), (dc, oc, tc)

    def backward(self, cache: tuple, grad_features: np.ndarray) -> list[np.ndarray]:
        dc, oc, tc = cache
        i = DEPTH_WIDTHS[-1]
        j = i + OCCUPANCY_WIDTHS[-1]
        gd, _ = self.depth.backward(dc, grad_features[:, :i])
        go, _ = self.occupancy.backward(oc, grad_features[:, i:j])
        gt, _ = self.telemetry.backward(tc, grad_features[:, j:])
        return gd + go + gt

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        arrays = {}
        arrays.update(mlp_state(f"{prefix}.depth", self.depth))
        arrays.update(mlp_state(f"{prefix}.occupancy", self.occupancy))
        arrays.update(mlp_state(f"{prefix}.telemetry", self.telemetry))
        arrays[f"{prefix}.telemetry_scale"] = self.telemetry_scale
        return arrays

    @classmethod
    def restore(cls, prefix: str, layout: FeatureLayout,
                arrays: dict[str, np.ndarray]) -> "ObservationEncoder":
        enc = cls(layout, arrays[f"{prefix}.telemetry_scale"],
                  rng=np.random.default_rng(0))
        enc.depth = restore_mlp(f"{prefix}.depth", [layout.n_rays, *DEPTH_WIDTHS],
                                "identity", arrays)
        enc.occupancy = restore_mlp(f"{prefix}.occupancy",
                                    [layout.grid_res ** 2, *OCCUPANCY_WIDTHS],
                                    "identity", arrays)
        enc.telemetry = restore_mlp(f"{prefix}.telemetry",
                                    [layout.telemetry_dim, *TELEMETRY_WIDTHS],
                                    "identity", arrays)
        return enc

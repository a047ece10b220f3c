"""Shared synthetic fixtures for stream tests and the acceptance suite."""

import numpy as np

from evolute.sim import FeatureLayout
from evolute.trajectories import Batch

SMALL_LAYOUT = FeatureLayout(n_rays=4, grid_res=4)


def random_observations(n, layout=SMALL_LAYOUT, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, layout.obs_dim))


BIMODAL_MODES = (0.2, 0.8)
NOISE_BAND = (0.35, 0.65)
# Fake-action sampler used with this dataset: the steering uniform floor
# keeps the energy surface constrained across the whole action box.
BIMODAL_SAMPLER = dict(steering_uniform_weight=0.5)


def bimodal_scene(n_groups=120, repeats=15, n_sided=1200, seed=9,
                  layout=SMALL_LAYOUT):
    """The obstacle-avoidance story as a dataset.

    Observation dims 0/1 encode which side is more open. Sided states carry
    the matching steering mode; symmetric states are repeated verbatim with
    exactly balanced modes (a latent coin), so their conditional is genuinely
    bimodal and a squared-error fit has nothing to latch on to. Throttle
    carries irreducible noise around 0.6 so the energy model cannot satisfy
    the contrastive objective with a throttle well alone.
    """
    rng = np.random.default_rng(seed)
    lo, hi = NOISE_BAND
    d = layout.obs_dim

    group_obs = lo + rng.random((n_groups, d)) * (hi - lo)
    group_b = rng.uniform(-0.5, 0.5, n_groups)
    group_obs[:, 0] = (1 + group_b) / 2
    group_obs[:, 1] = (1 - group_b) / 2
    half = repeats // 2
    group_steer = np.tile(
        np.r_[np.full(half, BIMODAL_MODES[0]), np.full(repeats - half, BIMODAL_MODES[1])],
        n_groups)

    sided_obs = lo + rng.random((n_sided, d)) * (hi - lo)
    side_b = rng.uniform(0.6, 1.0, n_sided) * np.where(rng.random(n_sided) < 0.5, 1.0, -1.0)
    sided_obs[:, 0] = (1 + side_b) / 2
    sided_obs[:, 1] = (1 - side_b) / 2
    sided_steer = np.where(side_b > 0, BIMODAL_MODES[0], BIMODAL_MODES[1])

    observations = np.concatenate([np.repeat(group_obs, repeats, axis=0), sided_obs])
    steering = np.concatenate([group_steer, sided_steer])
    throttle = np.clip(rng.normal(0.6, 0.1, len(observations)), 0.0, 1.0)
    return observations, np.stack([throttle, steering], axis=1)


def bimodal_heldout(n, seed=12, depth=0.25, layout=SMALL_LAYOUT):
    """Fresh symmetric-approach states for evaluating the trained models."""
    rng = np.random.default_rng(seed)
    lo, hi = NOISE_BAND
    obs = lo + rng.random((n, layout.obs_dim)) * (hi - lo)
    b = rng.uniform(-depth, depth, n)
    obs[:, 0] = (1 + b) / 2
    obs[:, 1] = (1 - b) / 2
    return obs


def make_batches(observations, continuous=None, discrete=None, batch_size=128,
                 seed=0, shuffle=True):
    n = observations.shape[0]
    if continuous is None:
        continuous = np.zeros((n, 2))
    if discrete is None:
        discrete = np.zeros((n, 2))
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        batches.append(Batch(
            observations=observations[idx].astype(np.float64),
            continuous_targets=continuous[idx].astype(np.float64),
            discrete_targets=discrete[idx].astype(np.float64),
            size=len(idx),
        ))
    return batches


class QuadraticEnergy:
    """Synthetic bowl with its minimum at (0.5, 0.5)."""

    def energy_batch(self, obs, actions):
        actions = np.asarray(actions, dtype=np.float64)
        return ((actions - 0.5) ** 2).sum(axis=1)


class BimodalEnergy:
    """Two steering wells at 0.2 and 0.8, throttle well at 0.6."""

    def energy_batch(self, obs, actions):
        actions = np.asarray(actions, dtype=np.float64)
        steer = np.minimum((actions[:, 1] - 0.2) ** 2, (actions[:, 1] - 0.8) ** 2)
        return (actions[:, 0] - 0.6) ** 2 + steer


class CountingEnergy:
    def __init__(self, inner):
        self.inner = inner
        self.evaluations = 0

    def energy_batch(self, obs, actions):
        self.evaluations += np.asarray(actions).shape[0]
        return self.inner.energy_batch(obs, actions)

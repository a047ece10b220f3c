"""Energy-controlled behavioural cloning stream.

A scalar energy network over (observation, continuous action) pairs, trained
contrastively: the demonstrated action should have lower energy than fake
actions drawn from shaped distributions that mimic how controllers are
actually used (steering mass around center, throttle mass near full). At
decision time the lowest-energy action is found either by exhaustive grid
search or by an iterative derivative-free sampler.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import ObservationEncoder
from .errors import ConfigError, DataError, TrainingError
from .nn import Adam, Mlp, adam_state, load_checkpoint, mlp_state, restore_adam, \
    restore_mlp, save_checkpoint
from .sim import FeatureLayout

STREAM_ID = "ec-bc"
TRUNK_WIDTHS = (128, 64, 32)
N_CONTINUOUS = 2   # throttle, steering


@dataclass(frozen=True)
class NegativeSamplerConfig:
    """Shaped fake-action distributions, one per continuous dimension.

    A uniform floor mixed into either dimension keeps the energy surface
    constrained everywhere the minimizers can look; without it the model is
    free to dig spurious low-energy holes where fakes almost never land.
    """

    n_fake: int = 64
    steering_mean: float = 0.5
    steering_std: float = 0.25
    steering_uniform_weight: float = 0.0
    throttle_rate: float = 3.0
    throttle_uniform_weight: float = 0.5

    def __post_init__(self):
        if self.n_fake < 1:
            raise ConfigError(f"field n_fake: must be >= 1, got {self.n_fake}")
        if self.steering_std <= 0:
            raise ConfigError(f"field steering_std: must be > 0, got {self.steering_std}")
        if self.throttle_rate <= 0:
            raise ConfigError(f"field throttle_rate: must be > 0, got {self.throttle_rate}")
        for name in ("steering_uniform_weight", "throttle_uniform_weight"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"field {name}: must be in [0, 1], got {value}")


@dataclass(frozen=True)
class InferenceConfig:
    mode: str = "grid"        # grid | nograd
    n_pin: int = 33
    n_infer: int = 256
    n_iter: int = 3
    sigma: float = 0.33
    eta: float = 0.5
    a_min: float = 0.0
    a_max: float = 1.0

    def __post_init__(self):
        if self.mode not in ("grid", "nograd"):
            raise ConfigError(f"field mode: must be grid or nograd, got {self.mode!r}")
        if self.n_pin < 2:
            raise ConfigError(f"field n_pin: must be >= 2, got {self.n_pin}")
        if self.n_infer < 2:
            raise ConfigError(f"field n_infer: must be >= 2, got {self.n_infer}")
        if self.n_iter < 1:
            raise ConfigError(f"field n_iter: must be >= 1, got {self.n_iter}")
        if not 0.0 < self.eta <= 1.0:
            raise ConfigError(f"field eta: must be in (0, 1], got {self.eta}")
        if self.sigma <= 0:
            raise ConfigError(f"field sigma: must be > 0, got {self.sigma}")
        if self.a_min >= self.a_max:
            raise ConfigError(f"field a_min: bounds [{self.a_min}, {self.a_max}] are empty")


class EbmModel:
    """Scalar energy E(s, a_c); lower marks more expert-like pairs."""

    def __init__(self, layout: FeatureLayout, telemetry_scale, *,
                 rng: np.random.Generator):
        self.layout = layout
        self.encoder = ObservationEncoder(layout, telemetry_scale, rng=rng)
        self.trunk = Mlp([self.encoder.feature_dim + N_CONTINUOUS, *TRUNK_WIDTHS, 1],
                         rng=rng)

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.trunk.params()

    def energy_batch(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Energies of one observation against m candidate actions."""
        actions = _checked_actions(actions)
        features, _ = self.encoder.forward(np.asarray(obs)[None, :])
        tiled = np.broadcast_to(features, (actions.shape[0], features.shape[1]))
        energies, _ = self.trunk.forward(np.concatenate([tiled, actions], axis=1))
        return energies[:, 0]

    def energy(self, obs: np.ndarray, action) -> float:
        return float(self.energy_batch(obs, np.asarray(action, dtype=np.float64)[None, :])[0])

    def energies_training(self, obs: np.ndarray, actions: np.ndarray):
        """Energies for a batch of observations, each with C candidates."""
        features, enc_cache = self.encoder.forward(obs)
        n, c, _ = actions.shape
        tiled = np.repeat(features, c, axis=0)
        trunk_in = np.concatenate([tiled, actions.reshape(n * c, N_CONTINUOUS)], axis=1)
        energies, trunk_cache = self.trunk.forward(trunk_in)
        return energies.reshape(n, c), (enc_cache, trunk_cache, n, c)

    def backward_training(self, cache, grad_energies: np.ndarray) -> list[np.ndarray]:
        enc_cache, trunk_cache, n, c = cache
        trunk_grads, grad_in = self.trunk.backward(
            trunk_cache, grad_energies.reshape(n * c, 1))
        feat_dim = self.encoder.feature_dim
        grad_features = grad_in[:, :feat_dim].reshape(n, c, feat_dim).sum(axis=1)
        return self.encoder.backward(enc_cache, grad_features) + trunk_grads


def _checked_actions(actions: np.ndarray) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[1] != N_CONTINUOUS:
        raise ConfigError(f"actions must be (m, {N_CONTINUOUS}), got {actions.shape}")
    if not np.all((actions >= 0.0) & (actions <= 1.0)):
        raise ConfigError("out-of-bounds action: continuous components must lie in [0, 1]")
    return actions


def _truncated_normal(mean: float, std: float, size: int,
                      rng: np.random.Generator) -> np.ndarray:
    out = np.empty(size)
    remaining = np.arange(size)
    while remaining.size:
        draw = rng.normal(mean, std, size=remaining.size)
        good = (draw >= 0.0) & (draw <= 1.0)
        out[remaining[good]] = draw[good]
        remaining = remaining[~good]
    return out


def _throttle_mixture(cfg: NegativeSamplerConfig, size: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Half uniform, half exponential decay away from full throttle."""
    pick_uniform = rng.random(size) < cfg.throttle_uniform_weight
    u = rng.random(size)
    scale = 1.0 - np.exp(-cfg.throttle_rate)
    toward_one = 1.0 - (-np.log1p(-u * scale)) / cfg.throttle_rate
    uniform = rng.random(size)
    return np.where(pick_uniform, uniform, toward_one)


def sample_negatives(cfg: NegativeSamplerConfig, true_actions: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    """(B, n_fake, 2) fake actions shaped per dimension."""
    n = np.asarray(true_actions).shape[0]
    total = n * cfg.n_fake
    throttle = _throttle_mixture(cfg, total, rng)
    steering = _truncated_normal(cfg.steering_mean, cfg.steering_std, total, rng)
    if cfg.steering_uniform_weight > 0.0:
        pick_uniform = rng.random(total) < cfg.steering_uniform_weight
        steering = np.where(pick_uniform, rng.random(total), steering)
    return np.stack([throttle, steering], axis=1).reshape(n, cfg.n_fake, N_CONTINUOUS)


def infonce_loss(true_energy: float, negative_energies) -> float:
    """Contrastive loss: -log softmax weight of the true pair among all pairs."""
    negatives = np.asarray(negative_energies, dtype=np.float64).reshape(-1)
    all_energies = np.concatenate([[float(true_energy)], negatives])
    if not np.all(np.isfinite(all_energies)):
        raise TrainingError("non-finite energy in InfoNCE loss")
    neg = -all_energies
    peak = neg.max()
    return float(-(neg[0] - peak) + np.log(np.exp(neg - peak).sum()))


def _infonce_batch(energies: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and d(mean loss)/d(energies) for (B, 1 + n_fake) energies;
    column 0 holds the true pair."""
    if not np.all(np.isfinite(energies)):
        raise TrainingError("non-finite energy in InfoNCE batch")
    neg = -energies
    peak = neg.max(axis=1, keepdims=True)
    expd = np.exp(neg - peak)
    z = expd.sum(axis=1, keepdims=True)
    losses = -(neg[:, :1] - peak) + np.log(z)
    probs = expd / z
    grad = -probs
    grad[:, 0] += 1.0
    n = energies.shape[0]
    return float(losses.mean()), grad / n


def train_epoch(model: EbmModel, batches, sampler_cfg: NegativeSamplerConfig,
                opt: Adam, rng: np.random.Generator) -> float:
    """One contrastive pass: per batch, draw negatives, push the true action's
    energy below theirs."""
    total = 0.0
    count = 0
    for batch in batches:
        negatives = sample_negatives(sampler_cfg, batch.continuous_targets, rng)
        actions = np.concatenate(
            [batch.continuous_targets[:, None, :], negatives], axis=1)
        energies, cache = model.energies_training(batch.observations, actions)
        loss, grad = _infonce_batch(energies)
        opt.step(model.backward_training(cache, grad))
        total += loss * batch.size
        count += batch.size
    if count == 0:
        raise DataError("no batches to train on")
    mean = total / count
    if not np.isfinite(mean):
        raise TrainingError(f"non-finite InfoNCE loss {mean}")
    return mean


def softmax_neg_energies(energies: np.ndarray) -> np.ndarray:
    neg = -np.asarray(energies, dtype=np.float64)
    peak = neg.max()
    expd = np.exp(neg - peak)
    return expd / expd.sum()


def infer_grid(model, obs: np.ndarray, cfg: InferenceConfig) -> np.ndarray:
    """Evaluate every pin combination, return the lowest-energy action;
    ties resolve to the lexicographically smallest action."""
    pins = np.linspace(cfg.a_min, cfg.a_max, cfg.n_pin)
    throttle, steering = np.meshgrid(pins, pins, indexing="ij")
    candidates = np.stack([throttle.reshape(-1), steering.reshape(-1)], axis=1)
    energies = model.energy_batch(obs, candidates)
    return candidates[int(np.argmin(energies))].copy()


def infer_nograd(model, obs: np.ndarray, cfg: InferenceConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Iterative sampler: softmax-weight the candidates by negated energy,
    resample with replacement, perturb, shrink the noise, and finally pick
    the most probable candidate of the last iteration."""
    samples = rng.uniform(cfg.a_min, cfg.a_max, size=(cfg.n_infer, N_CONTINUOUS))
    sigma = cfg.sigma
    probs = None
    for iteration in range(cfg.n_iter):
        energies = model.energy_batch(obs, samples)
        probs = softmax_neg_energies(energies)
        if iteration < cfg.n_iter - 1:
            picked = rng.choice(cfg.n_infer, size=cfg.n_infer, replace=True, p=probs)
            samples = samples[picked] + rng.normal(0.0, sigma, size=samples.shape)
            samples = np.clip(samples, cfg.a_min, cfg.a_max)
            sigma *= cfg.eta
    return samples[int(np.argmax(probs))].copy()


def save_ebm(path: str | Path, model: EbmModel, opt: Adam | None = None) -> None:
    arrays = model.encoder.state("enc")
    arrays.update(mlp_state("trunk", model.trunk))
    meta = {"stream": STREAM_ID, "layout": model.layout.as_dict(), "optimizers": {}}
    if opt is not None:
        opt_meta, opt_arrays = adam_state("opt", opt)
        meta["optimizers"]["energy"] = opt_meta
        arrays.update(opt_arrays)
    save_checkpoint(path, meta, arrays)


def load_ebm(path: str | Path) -> tuple[EbmModel, Adam | None]:
    meta, arrays = load_checkpoint(path)
    if meta.get("stream") != STREAM_ID:
        raise DataError(f"{path}: checkpoint stream {meta.get('stream')!r} is not {STREAM_ID!r}")
    layout = FeatureLayout(**meta["layout"])
    model = EbmModel(layout, arrays["enc.telemetry_scale"], rng=np.random.default_rng(0))
    model.encoder = ObservationEncoder.restore("enc", layout, arrays)
    model.trunk = restore_mlp("trunk",
                              [model.encoder.feature_dim + N_CONTINUOUS, *TRUNK_WIDTHS, 1],
                              "identity", arrays)
    opt = None
    if "energy" in meta["optimizers"]:
        opt = restore_adam("opt", meta["optimizers"]["energy"], model.params(), arrays)
    return model, opt

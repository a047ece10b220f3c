"""Feed-forward behavioural cloning stream.

Multi-head binary classifier over the discrete fire actions, trained with
binary cross entropy. The baseline variant adds a regression head that also
predicts the continuous pair with squared error; on multimodal targets that
head converges to the mode average, which is exactly the pathology the
energy stream exists to avoid.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .encoders import ObservationEncoder
from .errors import ConfigError, DataError, TrainingError
from .nn import Adam, Mlp, adam_state, load_checkpoint, mlp_state, restore_adam, \
    restore_mlp, save_checkpoint
from .sim import FeatureLayout

STREAM_ID = "ff-bc"
TRUNK_WIDTHS = (128, 64, 32)
N_DISCRETE = 2
N_CONTINUOUS = 2
PREDICTION_EPS = 1e-7
DECISION_THRESHOLD = 0.5


def bce_loss(prediction, target):
    """Negative log likelihood of a Bernoulli label, prediction clamped away
    from 0 and 1. Elementwise over arrays; plain float for scalars."""
    p = np.clip(np.asarray(prediction, dtype=np.float64), PREDICTION_EPS, 1.0 - PREDICTION_EPS)
    a = np.asarray(target, dtype=np.float64)
    if not np.isin(a, (0.0, 1.0)).all():
        raise ConfigError(f"field target: BCE targets must be 0 or 1, got {target!r}")
    loss = -(a * np.log(p) + (1.0 - a) * np.log(1.0 - p))
    return float(loss) if loss.ndim == 0 else loss


def _bce_grad(prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    p = np.clip(prediction, PREDICTION_EPS, 1.0 - PREDICTION_EPS)
    return -target / p + (1.0 - target) / (1.0 - p)


class FfBcModel:
    def __init__(self, layout: FeatureLayout, telemetry_scale, *,
                 rng: np.random.Generator, with_continuous_head: bool = True):
        self.layout = layout
        self.encoder = ObservationEncoder(layout, telemetry_scale, rng=rng)
        self.trunk = Mlp([self.encoder.feature_dim, *TRUNK_WIDTHS], rng=rng)
        self.heads = [Mlp([TRUNK_WIDTHS[-1], 1], "sigmoid", rng=rng)
                      for _ in range(N_DISCRETE)]
        self.continuous_head = (
            Mlp([TRUNK_WIDTHS[-1], N_CONTINUOUS], rng=rng)
            if with_continuous_head else None
        )

    def params_discrete(self) -> list[np.ndarray]:
        params = self.encoder.params() + self.trunk.params()
        for head in self.heads:
            params += head.params()
        return params

    def params_continuous(self) -> list[np.ndarray]:
        if self.continuous_head is None:
            raise ConfigError("model was built without a continuous head")
        return self.encoder.params() + self.trunk.params() + self.continuous_head.params()

    def _trunk_forward(self, obs: np.ndarray):
        features, enc_cache = self.encoder.forward(obs)
        hidden, trunk_cache = self.trunk.forward(features)
        return hidden, enc_cache, trunk_cache

    def predict_batch(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        hidden, _, _ = self._trunk_forward(obs)
        probs = np.concatenate([head.forward(hidden)[0] for head in self.heads], axis=1)
        continuous = None
        if self.continuous_head is not None:
            continuous, _ = self.continuous_head.forward(hidden)
        return probs, continuous

    def predict(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        probs, continuous = self.predict_batch(np.asarray(obs)[None, :])
        return probs[0], None if continuous is None else continuous[0]


def train_discrete_epoch(model: FfBcModel, batches, opt: Adam) -> float:
    """One pass of BCE training on the fire heads; mean loss over samples
    and heads."""
    total_loss = 0.0
    total_terms = 0
    saw_batch = False
    for batch in batches:
        saw_batch = True
        hidden, enc_cache, trunk_cache = model._trunk_forward(batch.observations)
        n = batch.size * len(model.heads)
        grad_hidden = np.zeros_like(hidden)
        head_grads: list[np.ndarray] = []
        for k, head in enumerate(model.heads):
            p, cache = head.forward(hidden)
            target = batch.discrete_targets[:, k:k + 1]
            total_loss += float(np.sum(bce_loss(p, target)))
            gk, dh = head.backward(cache, _bce_grad(p, target) / n)
            head_grads += gk
            grad_hidden += dh
        trunk_grads, grad_features = model.trunk.backward(trunk_cache, grad_hidden)
        enc_grads = model.encoder.backward(enc_cache, grad_features)
        opt.step(enc_grads + trunk_grads + head_grads)
        total_terms += n
    if not saw_batch:
        raise DataError("no batches to train on")
    mean = total_loss / total_terms
    if not np.isfinite(mean):
        raise TrainingError(f"non-finite discrete loss {mean}")
    return mean


def train_continuous_mse_epoch(model: FfBcModel, batches, opt: Adam) -> float:
    """One pass of squared-error training on the continuous head (baseline)."""
    if model.continuous_head is None:
        raise ConfigError("model was built without a continuous head")
    total_loss = 0.0
    total_terms = 0
    saw_batch = False
    for batch in batches:
        saw_batch = True
        hidden, enc_cache, trunk_cache = model._trunk_forward(batch.observations)
        pred, cache = model.continuous_head.forward(hidden)
        err = pred - batch.continuous_targets
        n = err.size
        total_loss += float(np.sum(err ** 2))
        total_terms += n
        head_grads, grad_hidden = model.continuous_head.backward(cache, 2.0 * err / n)
        trunk_grads, grad_features = model.trunk.backward(trunk_cache, grad_hidden)
        enc_grads = model.encoder.backward(enc_cache, grad_features)
        opt.step(enc_grads + trunk_grads + head_grads)
    if not saw_batch:
        raise DataError("no batches to train on")
    mean = total_loss / total_terms
    if not np.isfinite(mean):
        raise TrainingError(f"non-finite continuous loss {mean}")
    return mean


def save_ffbc(path: str | Path, model: FfBcModel, opt_discrete: Adam | None = None,
              opt_continuous: Adam | None = None) -> None:
    arrays = model.encoder.state("enc")
    arrays.update(mlp_state("trunk", model.trunk))
    for k, head in enumerate(model.heads):
        arrays.update(mlp_state(f"head{k}", head))
    meta = {
        "stream": STREAM_ID,
        "layout": model.layout.as_dict(),
        "with_continuous_head": model.continuous_head is not None,
        "optimizers": {},
    }
    if model.continuous_head is not None:
        arrays.update(mlp_state("cont", model.continuous_head))
    if opt_discrete is not None:
        opt_meta, opt_arrays = adam_state("opt_d", opt_discrete)
        meta["optimizers"]["discrete"] = opt_meta
        arrays.update(opt_arrays)
    if opt_continuous is not None:
        opt_meta, opt_arrays = adam_state("opt_c", opt_continuous)
        meta["optimizers"]["continuous"] = opt_meta
        arrays.update(opt_arrays)
    save_checkpoint(path, meta, arrays)


def load_ffbc(path: str | Path) -> tuple[FfBcModel, Adam | None, Adam | None]:
    meta, arrays = load_checkpoint(path)
    if meta.get("stream") != STREAM_ID:
        raise DataError(f"{path}: checkpoint stream {meta.get('stream')!r} is not {STREAM_ID!r}")
    layout = FeatureLayout(**meta["layout"])
    model = FfBcModel(layout, arrays["enc.telemetry_scale"],
                      rng=np.random.default_rng(0),
                      with_continuous_head=meta["with_continuous_head"])
    model.encoder = ObservationEncoder.restore("enc", layout, arrays)
    model.trunk = restore_mlp("trunk", [model.encoder.feature_dim, *TRUNK_WIDTHS],
                              "identity", arrays)
    model.heads = [restore_mlp(f"head{k}", [TRUNK_WIDTHS[-1], 1], "sigmoid", arrays)
                   for k in range(N_DISCRETE)]
    if meta["with_continuous_head"]:
        model.continuous_head = restore_mlp("cont", [TRUNK_WIDTHS[-1], N_CONTINUOUS],
                                            "identity", arrays)
    opt_discrete = opt_continuous = None
    if "discrete" in meta["optimizers"]:
        opt_discrete = restore_adam("opt_d", meta["optimizers"]["discrete"],
                                    model.params_discrete(), arrays)
    if "continuous" in meta["optimizers"]:
        opt_continuous = restore_adam("opt_c", meta["optimizers"]["continuous"],
                                      model.params_continuous(), arrays)
    return model, opt_discrete, opt_continuous

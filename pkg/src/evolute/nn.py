"""Dense network substrate: MLPs with explicit caches, exact reverse-mode
gradients, and Adam. Float64 throughout; all randomness comes from
caller-provided generators, so training is bit-reproducible.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, TrainingError

OUTPUT_ACTIVATIONS = ("identity", "sigmoid")

ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Mlp:
    """Fully connected net: ReLU hidden layers, identity or sigmoid output.

    ``forward`` returns the output plus a cache holding each layer's input;
    ``backward`` consumes that cache and yields gradients ordered like
    ``params()`` (W0, b0, W1, b1, ...) along with the input gradient.
    """

    def __init__(self, widths: list[int], output_activation: str = "identity", *,
                 rng: np.random.Generator):
        if len(widths) < 2:
            raise ConfigError(f"field widths: need at least input and output, got {widths}")
        if any(w < 1 for w in widths):
            raise ConfigError(f"field widths: zero-width layer in {widths}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(
                f"field output_activation: {output_activation!r} not in {OUTPUT_ACTIVATIONS}")
        self.widths = list(widths)
        self.output_activation = output_activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.widths[0]:
            raise ConfigError(
                f"input width {x.shape[1]} does not match layer 0 width {self.widths[0]}")
        cache = [x]
        a = x
        for i in range(self.n_layers):
            z = a @ self.weights[i] + self.biases[i]
            if i < self.n_layers - 1:
                a = np.maximum(z, 0.0)
            elif self.output_activation == "sigmoid":
                a = sigmoid(z)
            else:
                a = z
            cache.append(a)
        return a, cache

    def backward(self, cache: list[np.ndarray],
                 grad_output: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        if len(cache) != self.n_layers + 1:
            raise ConfigError(
                f"stale cache: {len(cache)} entries for a {self.n_layers}-layer net")
        grad_output = np.asarray(grad_output, dtype=np.float64)
        if grad_output.ndim == 1:
            grad_output = grad_output[None, :]
        if grad_output.shape != cache[-1].shape:
            raise ConfigError(
                f"gradient shape {grad_output.shape} does not match output {cache[-1].shape}")

        grads: list[np.ndarray | None] = [None] * (2 * self.n_layers)
        if self.output_activation == "sigmoid":
            y = cache[-1]
            delta = grad_output * y * (1.0 - y)
        else:
            delta = grad_output
        for i in reversed(range(self.n_layers)):
            a_prev = cache[i]
            grads[2 * i] = a_prev.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            grad_prev = delta @ self.weights[i].T
            if i > 0:
                grad_prev = grad_prev * (cache[i] > 0.0)
            delta = grad_prev
        return grads, delta


class Adam:
    """Adam over a flat list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = ADAM_LR,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ConfigError(
                f"got {len(grads)} gradients for {len(self.params)} parameters")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient; aborting training")
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


# Checkpoint file: magic, version, JSON meta, then named float64 arrays.
CKPT_MAGIC = b"EVCK"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    index = []
    blobs = []
    for name, array in arrays.items():
        blob = np.ascontiguousarray(array, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(array.shape), "nbytes": len(blob)})
        blobs.append(blob)
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 10 or data[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", data, 6)
    try:
        header = json.loads(data[10:10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint header: {exc}") from exc
    offset = 10 + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        nbytes = entry["nbytes"]
        if offset + nbytes > len(data):
            raise DataError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(
            data[offset:offset + nbytes], dtype="<f8"
        ).reshape(entry["shape"]).copy()
        offset += nbytes
    return header["meta"], arrays


def mlp_state(prefix: str, mlp: Mlp) -> dict[str, np.ndarray]:
    state = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        state[f"{prefix}.w{i}"] = w
        state[f"{prefix}.b{i}"] = b
    return state


def restore_mlp(prefix: str, widths: list[int], output_activation: str,
                arrays: dict[str, np.ndarray]) -> Mlp:
    mlp = Mlp(widths, output_activation, rng=np.random.default_rng(0))
    for i in range(mlp.n_layers):
        mlp.weights[i] = arrays[f"{prefix}.w{i}"]
        mlp.biases[i] = arrays[f"{prefix}.b{i}"]
    return mlp


def adam_state(prefix: str, opt: Adam) -> tuple[dict, dict[str, np.ndarray]]:
    meta = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "step_count": opt.step_count}
    arrays = {}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        arrays[f"{prefix}.m{i}"] = m
        arrays[f"{prefix}.v{i}"] = v
    return meta, arrays


def restore_adam(prefix: str, meta: dict, params: list[np.ndarray],
                 arrays: dict[str, np.ndarray]) -> Adam:
    opt = Adam(params, lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"],
               eps=meta["eps"])
    opt.step_count = meta["step_count"]
    opt.m = [arrays[f"{prefix}.m{i}"] for i in range(len(params))]
    opt.v = [arrays[f"{prefix}.v{i}"] for i in range(len(params))]
    return opt

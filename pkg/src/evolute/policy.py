"""Policy bundles: the two-stream ensemble, the feed-forward baseline, and
the scripted expert wrapped behind one rollout interface.

The ensemble routes one observation to both streams and merges the results:
continuous control comes from energy minimization, discrete fire decisions
from thresholded classifier probabilities. The baseline takes both from the
feed-forward model, clipping its regression output into the controller box.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import ebm as ebm_mod
from . import expert as expert_mod
from . import sim
from .config import parse_kv_text
from .ebm import EbmModel, InferenceConfig, infer_grid, infer_nograd, load_ebm
from .errors import ConfigError, DataError
from .expert import ExpertConfig
from .ffbc import DECISION_THRESHOLD, FfBcModel, load_ffbc
from .metrics import EpisodeResult
from .sim import ActionPair, FeatureLayout, SimConfig, WorldState
from .trajectories import Trajectory, trajectory_from_arrays

KINDS = ("evolute", "ffbc-baseline", "expert")

_STREAM_ROLLOUT = 20


@dataclass
class PolicyBundle:
    kind: str
    ff_model: FfBcModel | None = None
    ebm_model: EbmModel | None = None
    inference: InferenceConfig | None = None
    expert_config: ExpertConfig | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"field kind: {self.kind!r} not in {KINDS}")
        if self.kind == "evolute":
            if self.ff_model is None or self.ebm_model is None:
                raise ConfigError("evolute bundle requires both stream checkpoints")
            if self.ff_model.layout != self.ebm_model.layout:
                raise ConfigError(
                    f"stream layouts differ: {self.ff_model.layout} vs {self.ebm_model.layout}")
            if self.inference is None:
                self.inference = InferenceConfig()
        elif self.kind == "ffbc-baseline":
            if self.ff_model is None:
                raise ConfigError("ffbc-baseline bundle requires the ff checkpoint")
            if self.ff_model.continuous_head is None:
                raise ConfigError("ffbc-baseline requires a model with a continuous head")
        elif self.kind == "expert" and self.expert_config is None:
            self.expert_config = ExpertConfig()

    @property
    def layout(self) -> FeatureLayout | None:
        return self.ff_model.layout if self.ff_model is not None else None


def act(bundle: PolicyBundle, observation: np.ndarray,
        rng: np.random.Generator) -> ActionPair:
    """One action from a model-backed bundle. The expert kind acts on world
    state, not observations; use rollout for it."""
    if bundle.kind == "expert":
        raise ConfigError("expert bundles act on world state; use rollout")
    observation = np.asarray(observation, dtype=np.float64)
    probs, continuous = bundle.ff_model.predict(observation)
    fire_primary = int(probs[0] >= DECISION_THRESHOLD)
    fire_secondary = int(probs[1] >= DECISION_THRESHOLD)
    if bundle.kind == "evolute":
        cfg = bundle.inference
        if cfg.mode == "grid":
            a_c = infer_grid(bundle.ebm_model, observation, cfg)
        else:
            a_c = infer_nograd(bundle.ebm_model, observation, cfg, rng)
    else:
        a_c = np.clip(continuous, 0.0, 1.0)
    return ActionPair(throttle=float(a_c[0]), steering=float(a_c[1]),
                      fire_primary=fire_primary, fire_secondary=fire_secondary)


def rollout(bundle: PolicyBundle, sim_cfg: SimConfig,
            seed: int) -> tuple[Trajectory, EpisodeResult]:
    """Closed-loop episode: act, step, record, until the episode ends.
    ``seed`` overrides the sim config seed and derives the inference rng."""
    config = replace(sim_cfg, seed=seed)
    rng = sim.derived_rng(seed, _STREAM_ROLLOUT)
    state = sim.reset(config)
    observations: list[np.ndarray] = []
    continuous: list[tuple[float, float]] = []
    discrete: list[tuple[int, int]] = []
    while True:
        obs = sim.observe(state)
        if bundle.kind == "expert":
            action = expert_mod.expert_action(state, bundle.expert_config)
        else:
            action = act(bundle, obs.flatten(), rng)
        observations.append(obs.flatten())
        continuous.append(action.continuous)
        discrete.append(action.discrete)
        state, events = sim.step(state, action)
        if events.episode_over:
            break
    trajectory = trajectory_from_arrays(
        episode_id=0,
        sim_config=config,
        observations=np.stack(observations),
        continuous=np.asarray(continuous, dtype=np.float32),
        discrete=np.asarray(discrete, dtype=np.float32),
        source="scripted",
        seed=seed,
    )
    result = EpisodeResult(kills=state.kills_scored, ticks_survived=state.tick,
                           max_ticks=config.max_ticks, reason=events.reason)
    return trajectory, result


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_bundle(path: str | Path, kind: str, ff_path: str | Path | None = None,
                ebm_path: str | Path | None = None,
                inference: InferenceConfig | None = None) -> None:
    """Manifest referencing checkpoints by relative path and content hash."""
    path = Path(path)
    lines = [f"kind={kind}"]
    if ff_path is not None:
        ff_path = Path(ff_path)
        lines.append(f"ff_checkpoint={ff_path.name}")
        lines.append(f"ff_sha256={file_sha256(ff_path)}")
    if ebm_path is not None:
        ebm_path = Path(ebm_path)
        lines.append(f"ebm_checkpoint={ebm_path.name}")
        lines.append(f"ebm_sha256={file_sha256(ebm_path)}")
    if inference is not None:
        lines.append(f"mode={inference.mode}")
        lines.append(f"n_pin={inference.n_pin}")
        lines.append(f"n_infer={inference.n_infer}")
        lines.append(f"n_iter={inference.n_iter}")
        lines.append(f"sigma={inference.sigma}")
        lines.append(f"eta={inference.eta}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_bundle(path: str | Path) -> PolicyBundle:
    path = Path(path)
    try:
        values = parse_kv_text(path.read_text(encoding="utf-8"), origin=str(path))
    except OSError as exc:
        raise DataError(f"cannot read bundle manifest {path}: {exc}") from exc
    kind = values.get("kind")
    if kind is None:
        raise DataError(f"{path}: bundle manifest missing kind")
    if kind == "expert":
        return PolicyBundle(kind="expert")

    ff_model = None
    ebm_model = None
    if "ff_checkpoint" in values:
        ff_file = path.parent / values["ff_checkpoint"]
        digest = file_sha256(ff_file)
        if values.get("ff_sha256") not in (None, digest):
            raise DataError(
                f"{path}: ff checkpoint hash mismatch ({digest} != {values['ff_sha256']})")
        ff_model, _, _ = load_ffbc(ff_file)
    if "ebm_checkpoint" in values:
        ebm_file = path.parent / values["ebm_checkpoint"]
        digest = file_sha256(ebm_file)
        if values.get("ebm_sha256") not in (None, digest):
            raise DataError(
                f"{path}: ebm checkpoint hash mismatch ({digest} != {values['ebm_sha256']})")
        ebm_model, _ = load_ebm(ebm_file)

    inference = None
    inference_keys = {"mode", "n_pin", "n_infer", "n_iter", "sigma", "eta"}
    if inference_keys & set(values):
        inference = InferenceConfig(
            mode=values.get("mode", "grid"),
            n_pin=int(values.get("n_pin", 33)),
            n_infer=int(values.get("n_infer", 256)),
            n_iter=int(values.get("n_iter", 3)),
            sigma=float(values.get("sigma", 0.33)),
            eta=float(values.get("eta", 0.5)),
        )
    return PolicyBundle(kind=kind, ff_model=ff_model, ebm_model=ebm_model,
                        inference=inference)

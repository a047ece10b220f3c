import numpy as np
import pytest

from evolute import ebm, ffbc, policy, sim
from evolute.ebm import EbmModel, InferenceConfig, infer_grid
from evolute.errors import ConfigError, DataError
from evolute.ffbc import FfBcModel
from evolute.policy import PolicyBundle, act, load_bundle, rollout, save_bundle
from evolute.sim import SimConfig

from helpers import SMALL_LAYOUT, random_observations

TINY_SIM = SimConfig(seed=0, n_rays=4, grid_res=4, episode_length=3.0)


def models(seed=0):
    ff = FfBcModel(SMALL_LAYOUT, np.ones(6), rng=np.random.default_rng(seed))
    eb = EbmModel(SMALL_LAYOUT, np.ones(6), rng=np.random.default_rng(seed + 1))
    return ff, eb


def test_evolute_bundle_requires_both_models():
    ff, _ = models()
    with pytest.raises(ConfigError, match="both"):
        PolicyBundle(kind="evolute", ff_model=ff)


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError, match="kind"):
        PolicyBundle(kind="hybrid")


def test_evolute_continuous_equals_grid_inference_exactly():
    ff, eb = models(seed=2)
    cfg = InferenceConfig(mode="grid", n_pin=9)
    bundle = PolicyBundle(kind="evolute", ff_model=ff, ebm_model=eb, inference=cfg)
    obs = random_observations(1, seed=3)[0]
    action = act(bundle, obs, np.random.default_rng(0))
    expected = infer_grid(eb, obs, cfg)
    assert action.continuous == (expected[0], expected[1])


def test_baseline_clips_continuous_output():
    ff, _ = models(seed=4)
    ff.continuous_head.weights[-1][:] = 0.0
    ff.continuous_head.biases[-1][:] = np.array([2.0, -1.0])
    bundle = PolicyBundle(kind="ffbc-baseline", ff_model=ff)
    action = act(bundle, random_observations(1, seed=5)[0], np.random.default_rng(0))
    assert action.throttle == 1.0
    assert action.steering == 0.0


def test_discrete_thresholding():
    ff, eb = models(seed=6)
    for head, bias in zip(ff.heads, (5.0, -5.0)):
        head.weights[-1][:] = 0.0
        head.biases[-1][:] = bias
    bundle = PolicyBundle(kind="ffbc-baseline", ff_model=ff)
    action = act(bundle, random_observations(1, seed=7)[0], np.random.default_rng(0))
    assert action.discrete == (1, 0)


def test_expert_bundle_act_raises():
    bundle = PolicyBundle(kind="expert")
    with pytest.raises(ConfigError, match="rollout"):
        act(bundle, random_observations(1)[0], np.random.default_rng(0))


def test_rollout_length_and_determinism():
    ff, eb = models(seed=8)
    bundle = PolicyBundle(kind="evolute", ff_model=ff, ebm_model=eb,
                          inference=InferenceConfig(mode="nograd", n_infer=16, n_iter=2))
    t1, r1 = rollout(bundle, TINY_SIM, seed=11)
    t2, r2 = rollout(bundle, TINY_SIM, seed=11)
    assert len(t1) <= TINY_SIM.max_ticks
    assert r1 == r2
    assert np.array_equal(t1.observations, t2.observations)
    assert np.array_equal(t1.continuous, t2.continuous)
    assert np.array_equal(t1.discrete, t2.discrete)


def test_rollout_seed_changes_world():
    ff, _ = models(seed=9)
    bundle = PolicyBundle(kind="ffbc-baseline", ff_model=ff)
    t1, _ = rollout(bundle, TINY_SIM, seed=1)
    t2, _ = rollout(bundle, TINY_SIM, seed=2)
    assert not np.array_equal(t1.observations, t2.observations)


def test_expert_bundle_rollout_survives_default_arena():
    bundle = PolicyBundle(kind="expert")
    cfg = SimConfig()
    trajectory, result = rollout(bundle, cfg, seed=cfg.seed)
    assert result.reason == "timeout"
    assert result.ticks_survived == cfg.max_ticks
    assert len(trajectory) == cfg.max_ticks


def test_bundle_manifest_round_trip(tmp_path):
    ff, eb = models(seed=10)
    ff_path = tmp_path / "ff.ckpt"
    ebm_path = tmp_path / "ebm.ckpt"
    ffbc.save_ffbc(ff_path, ff)
    ebm.save_ebm(ebm_path, eb)
    manifest = tmp_path / "evolute.bundle"
    save_bundle(manifest, "evolute", ff_path, ebm_path,
                InferenceConfig(mode="nograd", n_pin=17))
    bundle = load_bundle(manifest)
    assert bundle.kind == "evolute"
    assert bundle.inference.mode == "nograd"
    assert bundle.inference.n_pin == 17
    obs = random_observations(1, seed=11)[0]
    probs_a, _ = ff.predict(obs)
    probs_b, _ = bundle.ff_model.predict(obs)
    assert np.array_equal(probs_a, probs_b)


def test_bundle_manifest_detects_tampered_checkpoint(tmp_path):
    ff, _ = models(seed=12)
    ff_path = tmp_path / "ff.ckpt"
    ffbc.save_ffbc(ff_path, ff)
    manifest = tmp_path / "ffbc.bundle"
    save_bundle(manifest, "ffbc-baseline", ff_path)
    data = bytearray(ff_path.read_bytes())
    data[-1] ^= 0xFF
    ff_path.write_bytes(bytes(data))
    with pytest.raises(DataError, match="hash mismatch"):
        load_bundle(manifest)


def test_bundle_manifest_missing_kind(tmp_path):
    manifest = tmp_path / "broken.bundle"
    manifest.write_text("mode=grid\n")
    with pytest.raises(DataError, match="kind"):
        load_bundle(manifest)

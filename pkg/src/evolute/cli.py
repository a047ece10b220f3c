"""Command-line entry point: demonstration generation, two-stream training,
evaluation with play/exploration metrics, and the interactive play server.

Config precedence is built-in defaults, then a key=value config file, then
repeatable KEY=VAL flags; everything shares one flat namespace. Every
command writes a manifest recording the resolved config, seeds, and content
hashes of inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import ebm as ebm_mod
from . import expert as expert_mod
from . import ffbc as ffbc_mod
from . import metrics as metrics_mod
from . import nn
from . import policy as policy_mod
from . import trajectories as tr
from .config import build_config, parse_kv_pairs, read_kv_file, reject_unknown
from .ebm import EbmModel, InferenceConfig, NegativeSamplerConfig
from .encoders import telemetry_scale_for
from .errors import ConfigError, DataError, EvoluteError
from .expert import ExpertConfig
from .ffbc import FfBcModel
from .service import Server
from .sim import SimConfig

DEFAULT_BATCH_SIZE = 256
DEFAULT_LEARNING_RATE = nn.ADAM_LR
_EXTRA_KEYS = ("batch_size", "learning_rate", "kde_resolution", "kde_bandwidth")


def _merge_config(config_path: str | None, overrides: list[str]) -> dict[str, str]:
    values: dict[str, str] = {}
    if config_path:
        values.update(read_kv_file(config_path))
    values.update(parse_kv_pairs(overrides or []))
    return values


def _resolve(values: dict[str, str]):
    """Build every config the pipeline knows from the flat namespace."""
    claimed: set[str] = set()
    sim_cfg = build_config(SimConfig, values, claimed)
    expert_cfg = build_config(ExpertConfig, values, claimed)
    sampler_cfg = build_config(NegativeSamplerConfig, values, claimed)
    inference_cfg = build_config(InferenceConfig, values, claimed)
    extras = {
        "batch_size": int(values.get("batch_size", DEFAULT_BATCH_SIZE)),
        "learning_rate": float(values.get("learning_rate", DEFAULT_LEARNING_RATE)),
        "kde_resolution": int(values.get("kde_resolution", metrics_mod.KDE_RESOLUTION)),
        "kde_bandwidth": float(values.get("kde_bandwidth", 0.0)),
    }
    claimed.update(k for k in _EXTRA_KEYS if k in values)
    reject_unknown(values, claimed)
    if extras["batch_size"] < 1:
        raise ConfigError(f"field batch_size: must be >= 1, got {extras['batch_size']}")
    if extras["learning_rate"] <= 0:
        raise ConfigError(f"field learning_rate: must be > 0, got {extras['learning_rate']}")
    return sim_cfg, expert_cfg, sampler_cfg, inference_cfg, extras


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(path: Path, command: str, config_snapshot: dict, seeds: dict,
                    inputs: list[Path], outputs: list[Path], wall_clock: float,
                    report: dict | None = None) -> None:
    lines = [f"command: {command}", f"argv: {' '.join(sys.argv[1:])}"]
    for key in sorted(config_snapshot):
        lines.append(f"config.{key}: {config_snapshot[key]}")
    for key in sorted(seeds):
        lines.append(f"seed.{key}: {seeds[key]}")
    for p in inputs:
        lines.append(f"input: {p} sha256={_sha256(Path(p))}")
    for p in outputs:
        lines.append(f"output: {p} sha256={_sha256(Path(p))}")
    if report:
        for key in sorted(report):
            lines.append(f"{key}: {report[key]}")
    lines.append(f"wall_clock_seconds: {wall_clock:.3f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _config_snapshot(*configs, extras: dict | None = None) -> dict:
    snapshot = {}
    for cfg in configs:
        fields = cfg.as_dict() if hasattr(cfg, "as_dict") else vars(cfg)
        snapshot.update(fields)
    if extras:
        snapshot.update(extras)
    return snapshot


def cmd_gen_data(args) -> int:
    start = time.perf_counter()
    values = _merge_config(args.config, args.sim)
    sim_cfg, expert_cfg, _, _, _ = _resolve(values)
    if args.episodes < 1:
        raise ConfigError(f"field episodes: must be >= 1, got {args.episodes}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset = expert_mod.generate_dataset(args.episodes, sim_cfg, expert_cfg, args.seed)
    tr.save(dataset, out)
    n_samples = sum(len(t) for t in dataset)
    print(f"wrote {out}: {len(dataset)} episodes, {n_samples} samples")
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest"), "gen-data",
        _config_snapshot(sim_cfg, expert_cfg), {"dataset": args.seed}, [], [out],
        time.perf_counter() - start, {"episodes": args.episodes, "samples": n_samples},
    )
    return 0


def _epoch_seed(base: int, epoch: int, stream: int) -> int:
    words = np.random.SeedSequence(
        entropy=base & 0xFFFFFFFFFFFFFFFF, spawn_key=(30 + stream, epoch)
    ).generate_state(2, dtype=np.uint64)
    return int(words[0])


def cmd_train(args) -> int:
    start = time.perf_counter()
    values = _merge_config(args.config, args.set)
    _, _, sampler_cfg, inference_cfg, extras = _resolve(values)
    if args.epochs < 1:
        raise ConfigError(f"field epochs: must be >= 1, got {args.epochs}")
    data_path = Path(args.data)
    dataset = tr.load(data_path)
    pool = tr.SamplePool.from_trajectories(dataset)
    data_sim_cfg = build_config(SimConfig, {k: str(v) for k, v in dataset[0].sim_config.items()})
    scale = telemetry_scale_for(data_sim_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    outputs: list[Path] = []
    report: dict = {"samples": len(pool)}
    batch = extras["batch_size"]
    lr = extras["learning_rate"]

    ff_path = out / "ff.ckpt"
    ebm_path = out / "ebm.ckpt"
    if args.stream in ("ff", "both"):
        rng = np.random.default_rng(np.random.SeedSequence(args.seed & 0xFFFFFFFFFFFFFFFF))
        model = FfBcModel(pool.layout, scale, rng=rng)
        opt_d = nn.Adam(model.params_discrete(), lr=lr)
        opt_c = nn.Adam(model.params_continuous(), lr=lr)
        loss_csv = out / "ff_loss.csv"
        with open(loss_csv, "w") as fh:
            fh.write("epoch,bce_loss,mse_loss\n")
            for epoch in range(args.epochs):
                bce = ffbc_mod.train_discrete_epoch(
                    model, tr.batch_iter(pool, batch, _epoch_seed(args.seed, epoch, 0)), opt_d)
                mse = ffbc_mod.train_continuous_mse_epoch(
                    model, tr.batch_iter(pool, batch, _epoch_seed(args.seed, epoch, 1)), opt_c)
                fh.write(f"{epoch},{bce:.9f},{mse:.9f}\n")
        ffbc_mod.save_ffbc(ff_path, model, opt_d, opt_c)
        outputs += [ff_path, loss_csv]
        report["ff_final_bce"] = f"{bce:.9f}"
        report["ff_final_mse"] = f"{mse:.9f}"
        print(f"ff-bc trained: bce {bce:.4f}, mse {mse:.4f}")

    if args.stream in ("ebm", "both"):
        rng = np.random.default_rng(np.random.SeedSequence((args.seed + 1) & 0xFFFFFFFFFFFFFFFF))
        model = EbmModel(pool.layout, scale, rng=rng)
        opt = nn.Adam(model.params(), lr=lr)
        neg_rng = np.random.default_rng(np.random.SeedSequence((args.seed + 2) & 0xFFFFFFFFFFFFFFFF))

        first = next(tr.batch_iter(pool, batch, _epoch_seed(args.seed, 0, 2)))
        negatives = ebm_mod.sample_negatives(
            sampler_cfg, first.continuous_targets,
            np.random.default_rng(np.random.SeedSequence((args.seed + 3) & 0xFFFFFFFFFFFFFFFF)))
        actions = np.concatenate([first.continuous_targets[:, None, :], negatives], axis=1)
        energies, _ = model.energies_training(first.observations, actions)
        initial_loss = float(np.mean(
            [ebm_mod.infonce_loss(row[0], row[1:]) for row in energies]))
        report["ebm_initial_loss"] = f"{initial_loss:.9f}"
        print(f"ec-bc initial loss {initial_loss:.4f} (log(1+n_fake) = "
              f"{np.log(1 + sampler_cfg.n_fake):.4f})")

        loss_csv = out / "ebm_loss.csv"
        with open(loss_csv, "w") as fh:
            fh.write("epoch,infonce_loss\n")
            for epoch in range(args.epochs):
                loss = ebm_mod.train_epoch(
                    model, tr.batch_iter(pool, batch, _epoch_seed(args.seed, epoch, 2)),
                    sampler_cfg, opt, neg_rng)
                fh.write(f"{epoch},{loss:.9f}\n")
        ebm_mod.save_ebm(ebm_path, model, opt)
        outputs += [ebm_path, loss_csv]
        report["ebm_final_loss"] = f"{loss:.9f}"
        print(f"ec-bc trained: infonce {loss:.4f}")

    # Bundles cover whatever checkpoints the directory now holds, so the two
    # streams may be trained by separate invocations (e.g. different epochs).
    if ff_path.exists():
        bundle_path = out / "ffbc.bundle"
        policy_mod.save_bundle(bundle_path, "ffbc-baseline", ff_path=ff_path)
        outputs.append(bundle_path)
    if ff_path.exists() and ebm_path.exists():
        bundle_path = out / "evolute.bundle"
        policy_mod.save_bundle(bundle_path, "evolute", ff_path=ff_path,
                               ebm_path=ebm_path, inference=inference_cfg)
        outputs.append(bundle_path)

    _write_manifest(
        out / "manifest.txt", "train",
        _config_snapshot(sampler_cfg, inference_cfg, extras={
            "batch_size": batch, "learning_rate": lr, "epochs": args.epochs,
            "stream": args.stream}),
        {"train": args.seed}, [data_path], outputs,
        time.perf_counter() - start, report,
    )
    return 0


def _match_seed(base: int, match: int) -> int:
    words = np.random.SeedSequence(
        entropy=base & 0xFFFFFFFFFFFFFFFF, spawn_key=(40, match)
    ).generate_state(2, dtype=np.uint64)
    return int(words[0])


def cmd_eval(args) -> int:
    start = time.perf_counter()
    values = _merge_config(args.config, args.set)
    ref_data = None
    if args.ref_data:
        ref_data = tr.load(args.ref_data)
        # Default the arena to the demonstrations' config; flags still win.
        base = {k: str(v) for k, v in ref_data[0].sim_config.items()}
        base.update(values)
        values = base
    sim_cfg, _, _, _, extras = _resolve(values)
    if args.matches < 1:
        raise ConfigError(f"field matches: must be >= 1, got {args.matches}")

    bundle = policy_mod.load_bundle(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run_match(i: int):
        return policy_mod.rollout(bundle, sim_cfg, _match_seed(args.seed, i))

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool_exec:
            results = list(pool_exec.map(run_match, range(args.matches)))
    else:
        results = [run_match(i) for i in range(args.matches)]

    trajectories = [t for t, _ in results]
    episodes = [r for _, r in results]
    stats = metrics_mod.play_stats(episodes)
    stats_path = out / "stats.csv"
    metrics_mod.write_stats_csv(stats, stats_path)

    layout = trajectories[0].layout
    x_col = layout.telemetry_slice.start
    points = np.concatenate(
        [t.observations[:, x_col:x_col + 2].astype(np.float64) for t in trajectories])
    extent = (0.0, sim_cfg.arena_size, 0.0, sim_cfg.arena_size)
    bandwidth = extras["kde_bandwidth"] if extras["kde_bandwidth"] > 0 else None
    density = metrics_mod.kde_2d(points, extent, extras["kde_resolution"], bandwidth)
    density_csv = out / "density.csv"
    density_pgm = out / "density.pgm"
    metrics_mod.write_density_csv(density, density_csv)
    metrics_mod.write_density_pgm(density, density_pgm)

    report_lines = [
        f"matches: {args.matches}",
        f"time_alive_mean: {stats.mean_time_alive:.6f}",
        f"time_alive_median: {stats.median_time_alive:.6f}",
        f"kills_mean: {stats.mean_kills:.6f}",
        f"kills_median: {stats.median_kills:.6f}",
        f"pkr: {stats.pkr:.6f}",
    ]
    if ref_data is not None:
        ref_points = np.concatenate(
            [t.observations[:, x_col:x_col + 2].astype(np.float64) for t in ref_data])
        ref_density = metrics_mod.kde_2d(ref_points, extent, extras["kde_resolution"],
                                         bandwidth)
        metrics_mod.write_density_csv(ref_density, out / "ref_density.csv")
        metrics_mod.write_density_pgm(ref_density, out / "ref_density.pgm")
        report_lines += [
            f"kl: {metrics_mod.kl_div(density, ref_density):.6f}",
            f"cc: {metrics_mod.cross_corr(density, ref_density):.6f}",
            f"sim: {metrics_mod.similarity(density, ref_density):.6f}",
        ]
    report_path = out / "report.txt"
    report_path.write_text("\n".join(report_lines) + "\n", encoding="utf-8")
    print("\n".join(report_lines))

    outputs = [stats_path, density_csv, density_pgm, report_path]
    inputs = [Path(args.bundle)]
    if args.ref_data:
        inputs.append(Path(args.ref_data))
    _write_manifest(
        out / "manifest.txt", "eval",
        _config_snapshot(sim_cfg, extras=extras),
        {"eval": args.seed}, inputs, outputs,
        time.perf_counter() - start, {"matches": args.matches, "jobs": args.jobs},
    )
    return 0


def cmd_serve(args) -> int:
    values = _merge_config(args.config, args.sim)
    sim_cfg, _, _, _, _ = _resolve(values)
    record_dir = Path(args.record_dir) if args.record_dir else None
    server = Server(host=args.host, port=args.port, sim_config=sim_cfg,
                    record_dir=record_dir)
    server.start()
    print(f"listening on {server.address[0]}:{server.address[1]}")
    try:
        server.wait()
    except KeyboardInterrupt:
        print("interrupted, shutting down")
    finally:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evolute",
        description="Two-stream imitation learning in a toy driving arena.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="record scripted demonstrations")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--sim", action="append", metavar="KEY=VAL", default=[])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the policy streams")
    p.add_argument("--stream", choices=("ff", "ebm", "both"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VAL", default=[])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run evaluation matches and metrics")
    p.add_argument("--bundle", required=True)
    p.add_argument("--matches", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--ref-data", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VAL", default=[])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the interactive session server")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--record-dir", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--sim", action="append", metavar="KEY=VAL", default=[])
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EvoluteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

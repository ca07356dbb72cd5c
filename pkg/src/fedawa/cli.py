"""Command-line entry point.

    fedawa run <config> -o <dir> [--seed N] [--strategy NAME]
    fedawa partition <config> -o <dir> [--seed N]
    fedawa analyze <dir> --probe {distance_matrix,ideal_vector,weight_trajectory}
    fedawa config --schema

FEDAWA_THREADS caps how many clients train concurrently (0 = serial).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, artifacts, config as cfgmod, tensor
from .analysis import (
    dataset_vector,
    ideal_vector_probe,
    label_distance_matrix,
    vector_distance_matrix,
    weight_trajectory_similarity,
)
from .data import DataError, PartitionError, partition_manifest
from .model import local_train
from .orchestrator import (
    STRATEGIES,
    ConfigError,
    ExperimentConfig,
    Simulation,
    build_data,
    build_partitions,
    client_seed,
    derive_seed,
    run_experiment,
)

log = logging.getLogger("fedawa")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
PROBES = ("distance_matrix", "ideal_vector", "weight_trajectory")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load_config(path: str, seed: int | None = None, strategy: str | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    cfg = cfgmod.parse(text)
    overrides = {}
    if seed is not None:
        overrides["master_seed"] = seed
    if strategy is not None:
        overrides["strategy"] = strategy
    return cfg.with_overrides(**overrides) if overrides else cfg


def cmd_run(config_path: str, out_dir: str, seed: int | None = None, strategy: str | None = None) -> int:
    try:
        cfg = _load_config(config_path, seed, strategy)
        sim = Simulation(cfg)
    except (ConfigError, PartitionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(out_dir)
    started = _now()
    log.info("running %s for %d rounds (config %s)", cfg.strategy, cfg.rounds, cfgmod.content_hash(cfg)[:12])
    try:
        records = run_experiment(cfg, sim)
    except Exception as exc:  # any failure inside a round is reported with its round
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = {
        "config": cfgmod.to_dict(cfg),
        "config_hash": cfgmod.content_hash(cfg),
        "output_dir": str(out),
        "started_at": started,
        "finished_at": _now(),
        "version": __version__,
    }
    artifacts.atomic_write(out / artifacts.CONFIG_FILE, cfgmod.emit(cfg))
    artifacts.atomic_write(out / artifacts.RECORDS_FILE, artifacts.records_jsonl(records))
    artifacts.atomic_write(out / artifacts.SUMMARY_FILE, artifacts.summary_csv(records))
    artifacts.atomic_write(out / artifacts.CHECKPOINT_FILE, tensor.to_bytes(sim.theta))
    artifacts.atomic_write(out / artifacts.MANIFEST_FILE, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    final = [r.accuracy for r in records if r.accuracy is not None]
    if final:
        log.info("final accuracy %.4f", final[-1])
    return EXIT_OK


def cmd_partition(config_path: str, out_dir: str, seed: int | None = None) -> int:
    try:
        cfg = _load_config(config_path, seed)
        train, _ = build_data(cfg)
        parts = build_partitions(cfg, train)
    except (ConfigError, PartitionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    alpha = cfg.data.alpha if cfg.data.partitioner == "dirichlet" else None
    manifest = partition_manifest(train, parts, cfg.master_seed, alpha)
    artifacts.atomic_write(Path(out_dir) / artifacts.PARTITION_FILE, json.dumps(manifest, indent=2) + "\n")
    return EXIT_OK


def _full_weights(record, k: int) -> np.ndarray:
    w = np.zeros(k)
    w[record.participants] = record.weights
    return w


def cmd_analyze(run_dir: str, probe: str, max_rounds: int | None = None) -> int:
    root = Path(run_dir)
    cfg_path = root / artifacts.CONFIG_FILE
    if not cfg_path.exists():
        print(f"missing {cfg_path}; run `fedawa run` first", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        cfg = cfgmod.load(cfg_path)
    except ConfigError as exc:
        print(f"bad run config: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if probe not in PROBES:
        print(f"unknown probe {probe!r}", file=sys.stderr)
        return EXIT_CONFIG

    if probe == "weight_trajectory":
        rec_path = root / artifacts.RECORDS_FILE
        if not rec_path.exists():
            print(f"missing {rec_path}", file=sys.stderr)
            return EXIT_RUNTIME
        records = [r for r in artifacts.read_records(rec_path) if r.accuracy is not None]
        if records and isinstance(records[0].weights[0], list):
            print("weight_trajectory needs flat (per-client) weights; layer-wise runs are not supported", file=sys.stderr)
            return EXIT_RUNTIME
        sim = Simulation(cfg)
        dv = dataset_vector(sim.hists, sim.global_hist)
        sims = weight_trajectory_similarity([_full_weights(r, cfg.clients) for r in records], dv)
        text = artifacts.table_csv(("round", "similarity"), [(r.round, s) for r, s in zip(records, sims)])
        artifacts.atomic_write(root / "weight_trajectory.csv", text)
        return EXIT_OK

    if probe == "distance_matrix":
        ckpt = root / artifacts.CHECKPOINT_FILE
        if not ckpt.exists():
            print(f"missing {ckpt}", file=sys.stderr)
            return EXIT_RUNTIME
        sim = Simulation(cfg)
        theta_g = tensor.load(ckpt)
        t = cfg.rounds + 1
        lr = sim.tc.round_lr(t)
        thetas = [
            local_train(theta_g, sim.mlp, d, sim.tc, lr, client_seed(cfg.master_seed, t, k))
            for k, d in enumerate(sim.client_data)
        ]
        ids = list(range(cfg.clients))
        taus = [th - theta_g for th in thetas]
        artifacts.atomic_write(root / "distance_matrix.csv", artifacts.matrix_csv(vector_distance_matrix(taus).values, ids))
        artifacts.atomic_write(root / "distance_matrix_params.csv", artifacts.matrix_csv(vector_distance_matrix(thetas).values, ids))
        artifacts.atomic_write(root / "distance_matrix_data.csv", artifacts.matrix_csv(label_distance_matrix(sim.hists).values, ids))
        return EXIT_OK

    # ideal_vector: replay the run and probe every round against pooled training
    sim = Simulation(cfg)
    limit = cfg.rounds if max_rounds is None else min(cfg.rounds, max_rounds)
    rows = []
    for _ in range(limit):
        t = sim.round + 1
        theta_g = sim.theta
        rec, thetas = sim.step()
        reuse = thetas if len(rec.participants) == cfg.clients else None
        _, dists = ideal_vector_probe(
            theta_g, sim.mlp, sim.client_data, sim.tc, sim.tc.round_lr(t),
            derive_seed(cfg.master_seed, 29, t),
            client_seeds=[client_seed(cfg.master_seed, t, k) for k in range(cfg.clients)],
            client_thetas=reuse,
        )
        rows.append((t, *dists))
    header = ("round", "tau_g", *[f"client_{k}" for k in range(cfg.clients)])
    artifacts.atomic_write(root / "ideal_vector.csv", artifacts.table_csv(header, rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedawa", description="Federated learning with adaptive aggregation weights")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config")
    run.add_argument("-o", "--out", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--strategy", choices=STRATEGIES)

    part = sub.add_parser("partition", help="write the client partition manifest")
    part.add_argument("config")
    part.add_argument("-o", "--out", required=True)
    part.add_argument("--seed", type=int)

    ana = sub.add_parser("analyze", help="run an analysis probe on a finished run")
    ana.add_argument("run_dir")
    ana.add_argument("--probe", required=True, choices=PROBES)
    ana.add_argument("--max-rounds", type=int)

    conf = sub.add_parser("config", help="inspect configuration")
    conf.add_argument("--schema", action="store_true", help="print every key with its default")
    conf.add_argument("path", nargs="?", help="print the canonical form and hash of this config")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.strategy)
        if args.command == "partition":
            return cmd_partition(args.config, args.out, args.seed)
        if args.command == "analyze":
            return cmd_analyze(args.run_dir, args.probe, args.max_rounds)
        if args.schema or not args.path:
            print(cfgmod.schema_text())
            return EXIT_OK
        cfg = _load_config(args.path)
        print(f"# hash {cfgmod.content_hash(cfg)}")
        print(cfgmod.emit(cfg), end="")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end.

Six subcommands, one per thing worth running standalone:

  run-rl             the full desk-scale RL loop, then a threshold report
  kl-study           estimator bias/variance table over Gaussian shifts
  quant-check        verify packaged quantization fixtures and error ordering
  pack-bench         LPT packing quality against random instances
  sync-demo          publish/crash/reconstruct walkthrough in a scratch store
  detect-prefix-bug  scan a directory of response JSON files

Inputs arrive as JSON config files (--config), artifacts land under --out.
Every subcommand prints a JSON object to stdout and uses its exit code to
say pass/fail, so all of them compose with shell scripts and CI.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import detector, klmath, quant, sched, sync
from .runner import (
    ConfigError,
    RunConfig,
    emit_report,
    run_rl,
)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    with fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    return data


def _check_keys(data: Mapping[str, Any], allowed: set[str], what: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {what}.{key}")


def _emit(payload: dict, out: str | None, name: str) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text + "\n", encoding="utf-8")


# --- subcommands ---------------------------------------------------------


def _cmd_run_rl(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_dict(_load_config(args.config))
    out_dir = Path(args.out)
    rows = run_rl(cfg, out_dir)
    summary, code = emit_report(rows, cfg.report, out_dir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return code


def _cmd_kl_study(args: argparse.Namespace) -> int:
    raw = _load_config(args.config)
    _check_keys(raw, {"deltas", "n", "seed"}, "kl_study")
    deltas = [float(d) for d in raw.get("deltas", klmath.DEFAULT_DELTAS)]
    n = int(raw.get("n", klmath.DEFAULT_STUDY_N))
    seed = int(raw.get("seed", 0))
    table = klmath.kl_study(deltas, n, seed)
    payload = {
        "n": table.n,
        "seed": table.seed,
        "rows": [
            {
                "delta": r.delta,
                "estimator": r.estimator.value,
                "mean": r.mean,
                "variance": r.variance,
                "analytic_kl": r.analytic_kl,
            }
            for r in table.rows
        ],
    }
    _emit(payload, args.out, "kl_study.json")
    if args.out is not None:
        (Path(args.out) / "kl_study.csv").write_text(table.to_csv(), encoding="utf-8")
    return 0


def _cmd_quant_check(args: argparse.Namespace) -> int:
    fixture_dir = Path(args.dir) if args.dir else quant.default_fixture_dir()
    reports = quant.check_fixture_dir(fixture_dir)
    payload = {
        "fixture_dir": str(fixture_dir),
        "checks": [
            {
                "name": r.name,
                "format": r.format,
                "ok": r.ok,
                "mismatches": list(r.mismatches),
            }
            for r in reports
        ],
        "ok": bool(reports) and all(r.ok for r in reports),
    }
    _emit(payload, args.out, "quant_check.json")
    return 0 if payload["ok"] else 1


def _cmd_pack_bench(args: argparse.Namespace) -> int:
    raw = _load_config(args.config)
    _check_keys(
        raw,
        {"instances", "max_items", "max_length", "ranks", "alpha", "beta", "token_budget", "seed"},
        "pack_bench",
    )
    instances = int(raw.get("instances", 200))
    max_items = int(raw.get("max_items", 16))
    max_length = int(raw.get("max_length", 512))
    ranks = int(raw.get("ranks", 3))
    model = sched.CostModel(
        alpha=float(raw.get("alpha", 0.1)), beta=float(raw.get("beta", 1.0))
    )
    token_budget = int(raw.get("token_budget", 1 << 20))
    rng = np.random.Generator(np.random.Philox(int(raw.get("seed", 0))))
    ratios = []
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, max_items + 1))
        lengths = [int(v) for v in rng.integers(1, max_length + 1, size=n)]
        plan = sched.pack(lengths, ranks, model, token_budget)
        ratio = plan.imbalance_ratio()
        ratios.append(ratio)
        worst = max(worst, ratio)
    payload = {
        "instances": instances,
        "ranks": ranks,
        "mean_imbalance": float(np.mean(ratios)),
        "worst_imbalance": worst,
        "guarantee": "max_load <= 4/3 * optimal for the cost objective",
    }
    _emit(payload, args.out, "pack_bench.json")
    return 0


def _cmd_sync_demo(args: argparse.Namespace) -> int:
    raw = _load_config(args.config)
    _check_keys(raw, {"versions", "shard_bytes", "flip_fraction", "seed"}, "sync_demo")
    versions = int(raw.get("versions", 30))
    shard_bytes = int(raw.get("shard_bytes", 4096))
    flip_fraction = float(raw.get("flip_fraction", 0.01))
    rng = np.random.Generator(np.random.Philox(int(raw.get("seed", 0))))

    if args.out is not None:
        store: sync.Store = sync.LocalDirStore(Path(args.out) / "store")
    else:
        store = sync.MemoryStore()
    publisher = sync.WeightPublisher(store)
    blob = rng.integers(0, 256, size=shard_bytes, dtype=np.uint8).tobytes()
    delta_sizes: list[int] = []
    crashes = 0
    for v in range(versions):
        if v > 0:
            arr = np.frombuffer(blob, dtype=np.uint8).copy()
            flips = rng.random(shard_bytes) < flip_fraction
            arr[flips] ^= rng.integers(1, 256, size=int(flips.sum()), dtype=np.uint8)
            blob = arr.tobytes()
        # every 7th publish dies mid-upload, then retries; readers never
        # see the torn attempt because the manifest goes last
        if v % 7 == 3:
            crashed = sync.FaultInjectingStore(store, puts_before_crash=0)
            try:
                sync.WeightPublisher(
                    crashed, snapshot_interval=publisher.snapshot_interval
                ).publish(v, {"w": blob})
            except sync.SimulatedCrash:
                crashes += 1
        entry = publisher.publish(v, {"w": blob})
        delta_sizes.append(entry["shards"]["w"]["stored_size"])
    head = sync.manifest_head(store)
    final = sync.reconstruct(store, head)
    payload = {
        "versions_published": versions,
        "head": head,
        "simulated_crashes": crashes,
        "bitexact_reconstruction": final["w"] == blob,
        "full_bytes": shard_bytes,
        "min_stored": min(delta_sizes),
        "max_stored": max(delta_sizes),
    }
    _emit(payload, args.out, "sync_demo.json")
    return 0 if payload["bitexact_reconstruction"] else 1


def _cmd_detect_prefix_bug(args: argparse.Namespace) -> int:
    counts = detector.scan_response_dir(args.dir)
    payload = dict(counts)
    _emit(payload, args.out, "detect_prefix_bug.json")
    return 0


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskrl", description="desk-scale RL post-training toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-rl", help="full RL loop plus threshold report")
    p.add_argument("--config", default=None, help="run config JSON")
    p.add_argument("--out", required=True, help="artifact directory")
    p.set_defaults(fn=_cmd_run_rl)

    p = sub.add_parser("kl-study", help="KL estimator bias/variance study")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_kl_study)

    p = sub.add_parser("quant-check", help="verify quantization golden fixtures")
    p.add_argument("--dir", default=None, help="fixture directory override")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_quant_check)

    p = sub.add_parser("pack-bench", help="sequence packing balance benchmark")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_pack_bench)

    p = sub.add_parser("sync-demo", help="weight store crash/recovery walkthrough")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_sync_demo)

    p = sub.add_parser("detect-prefix-bug", help="scan responses for streamed prefix repetition")
    p.add_argument("--dir", required=True, help="directory of .json response files")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_detect_prefix_bug)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.fn(args))
    except ConfigError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

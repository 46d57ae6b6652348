"""Batch command-line surface tying the modules together.

Exit codes: 0 success, 1 I/O or parse error, 2 domain precondition
violation, 3 numeric divergence.  All randomness flows from --seed; output
bytes are a pure function of (inputs, config, seed).  Each successful
command writes exactly one manifest into its output directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import blobio, errors
from .actions import (
    chunk_rows,
    chunk_starts,
    denormalize,
    fit_norm,
    make_chunk,
    normalize,
    resample,
    trajectory_from_jsonl,
)
from .flow import FmConfig
from .tokens import TokenVocab3D, fit_vocab
from .trainer import TrainConfig, ablation_run, train, unimodal_task, wide_rotation_task
from .vqa import generate_vqa, load_scene, pairs_to_jsonl, verify_pair

_DOMAIN_ERRORS = (
    errors.ZeroNorm,
    errors.DegenerateInput,
    errors.ShapeMismatch,
    errors.InvalidStep,
    errors.InsufficientData,
    errors.IndexOutOfRange,
    errors.EmptyMask,
    errors.TooFewPoints,
    errors.DegenerateCloud,
    errors.EmptyCloud,
    errors.NoObjects,
    errors.TooShort,
    errors.OutOfRange,
    errors.EmptySpec,
    errors.DegenerateCovariance,
    errors.BehindCamera,
)


def _read_values_file(path: Path) -> np.ndarray:
    if path.suffix == ".blob":
        return blobio.read_blob(path).astype(float).ravel()
    return np.loadtxt(path).ravel()


def cmd_fit_tokenizer(args) -> int:
    started = time.time()
    values = _read_values_file(Path(args.values))
    vocab = fit_vocab(values, n_bins=args.n_bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    blobio.atomic_write_text(out / "vocab.json", vocab.to_json())
    blobio.write_manifest(
        out,
        command="fit-tokenizer",
        config={"n_bins": args.n_bins, "values": str(args.values)},
        seed=args.seed,
        inputs=[args.values],
        started=started,
        format_versions={"vocab": 1},
    )
    print(f"wrote vocabulary with {vocab.n_bins} bins to {out / 'vocab.json'}")
    return 0


def _scene_dirs(root: Path) -> list:
    if (root / "index.json").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "index.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no scene index.json under {root}")
    return dirs


def cmd_gen_vqa(args) -> int:
    started = time.time()
    vocab = TokenVocab3D.from_json(Path(args.vocab).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    n_no_objects = 0
    scene_dirs = _scene_dirs(Path(args.scenes))
    for i, scene_dir in enumerate(scene_dirs):
        scene = load_scene(scene_dir)
        rng = np.random.default_rng(args.seed + i)
        try:
            pairs = generate_vqa(scene, vocab, rng)
        except errors.NoObjects:
            n_no_objects += 1
            continue
        for p in pairs:
            if not verify_pair(scene, vocab, p):
                raise errors.NoObjects(f"self-check failed for a pair in {scene_dir}")
            rec = p.to_record()
            rec["scene"] = scene.name
            lines.append(json.dumps(rec, sort_keys=True))
    if n_no_objects == len(scene_dirs):
        raise errors.NoObjects("every scene was filtered down to zero usable objects")
    blobio.atomic_write_text(out / "vqa.jsonl", "\n".join(lines) + "\n")
    blobio.write_manifest(
        out,
        command="gen-vqa",
        config={"scenes": str(args.scenes), "vocab": str(args.vocab)},
        seed=args.seed,
        inputs=[args.scenes, args.vocab],
        started=started,
        format_versions={"vqa": 1, "scene": 1},
    )
    print(f"wrote {len(lines)} records to {out / 'vqa.jsonl'}")
    return 0


def cmd_pipeline(args) -> int:
    started = time.time()
    traj = trajectory_from_jsonl(Path(args.traj).read_text())
    resampled = resample(traj, args.dst_hz)
    starts = chunk_starts(len(resampled), args.horizon, args.stride)
    chunks = [make_chunk(resampled, int(s), args.horizon) for s in starts]
    if not chunks:
        raise errors.TooShort("no complete chunk fits the resampled trajectory")
    rows = np.concatenate([chunk_rows(c) for c in chunks])
    stats = fit_norm(rows, args.scheme) if args.scheme != "minmax_const" else fit_norm(
        rows, "minmax_const"
    )
    raw = np.stack([np.concatenate([c.dt, c.dr, c.g[:, None].astype(float)], axis=1) for c in chunks])
    normed = raw.copy()
    per_chunk = normalize(rows, stats).reshape(len(chunks), args.horizon, 4)
    normed[:, :, 0:3] = per_chunk[:, :, 0:3]
    normed[:, :, 7] = per_chunk[:, :, 3]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    blobio.write_blob(out / "chunks_raw.blob", raw)
    blobio.write_blob(out / "chunks_norm.blob", normed)
    blobio.atomic_write_text(out / "norm_stats.json", stats.to_json())
    if args.denorm_verify:
        back = denormalize(normalize(rows, stats), stats)
        max_err = float(np.max(np.abs(back - rows)))
        print(f"denormalize(normalize(.)) max roundtrip error: {max_err:.3e}")
    blobio.write_manifest(
        out,
        command="pipeline",
        config={
            "traj": str(args.traj),
            "dst_hz": args.dst_hz,
            "horizon": args.horizon,
            "scheme": args.scheme,
            "stride": args.stride,
        },
        seed=args.seed,
        inputs=[args.traj],
        started=started,
        format_versions={"norm_stats": 1, "blob": 1},
    )
    print(f"wrote {len(chunks)} chunks to {out}")
    return 0


def _train_config_from_dict(data: dict) -> tuple[TrainConfig, dict]:
    fm = FmConfig(**data.get("fm", {}))
    fields = {k: v for k, v in data.items() if k not in ("fm", "task")}
    if "hidden" in fields:
        fields["hidden"] = tuple(fields["hidden"])
    cfg = TrainConfig(fm=fm, **fields)
    task_spec = data.get("task", {"kind": "unimodal", "seed": cfg.seed})
    return cfg, task_spec


def _build_task(task_spec: dict, seed: int):
    kind = task_spec.get("kind", "unimodal")
    task_seed = task_spec.get("seed", seed)
    kwargs = {k: v for k, v in task_spec.items() if k not in ("kind", "seed")}
    if kind == "unimodal":
        return unimodal_task(task_seed, **kwargs)
    if kind == "wide_rotation":
        return wide_rotation_task(task_seed, **kwargs)
    raise ValueError(f"unknown task kind: {kind}")


def cmd_train_toy(args) -> int:
    started = time.time()
    data = json.loads(Path(args.config).read_text())
    cfg, task_spec = _train_config_from_dict(data)
    task = _build_task(task_spec, cfg.seed)
    out = Path(args.out)
    result = train(cfg, task, out_dir=out)
    last = result.metrics[-1]
    blobio.write_manifest(
        out,
        command="train-toy",
        config=data,
        seed=cfg.seed,
        inputs=[args.config],
        started=started,
        format_versions={"checkpoint": 1, "metrics": 1},
    )
    print(
        f"finished {cfg.steps} steps; eval geodesic error {last['eval_geo_ema']:.4f} rad, "
        f"translation {last['eval_trans_ema']:.4f}"
    )
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    grid = json.loads(Path(args.grid).read_text())
    seeds = grid.get("seeds", [0, 1, 2])
    configs = []
    task_specs = []
    for entry in grid["configs"]:
        cfg, task_spec = _train_config_from_dict(entry)
        configs.append(cfg)
        task_specs.append(task_spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_run(
        configs,
        task_builder=lambda seed: _build_task(task_specs[0], seed),
        seeds=seeds,
        out_csv=out / "ablation.csv",
    )
    blobio.write_manifest(
        out,
        command="ablate",
        config=grid,
        seed=grid.get("seed"),
        inputs=[args.grid],
        started=started,
        format_versions={"ablation": 1},
    )
    for row in rows:
        if row["kind"] == "summary":
            print(
                f"{row['config']}: geodesic {row['geo_err']:.4f} +- {row['geo_std']:.4f}, "
                f"translation {row['trans_err']:.4f} +- {row['trans_std']:.4f}"
            )
    return 0


def cmd_report(args) -> int:
    started = time.time()
    run_dirs = [Path(p) for p in args.runs]
    manifests = []
    for run in run_dirs:
        manifests.append(blobio.read_manifest(run))
    versions = {}
    for m in manifests:
        for key, val in m.get("format_versions", {}).items():
            if key in versions and versions[key] != val:
                raise ValueError(
                    f"incompatible format versions for {key}: {versions[key]} vs {val}"
                )
            versions[key] = val
    rows = []
    for run, m in zip(run_dirs, manifests):
        row = {
            "run_dir": str(run),
            "command": m["command"],
            "config_hash": m["config_hash"],
            "seed": m["seed"],
            "output_hash": m["output_hash"],
        }
        metrics = run / "metrics.csv"
        if metrics.exists():
            last = list(csv.DictReader(metrics.open()))
            if last:
                row.update({f"final_{k}": v for k, v in last[-1].items()})
        rows.append(row)
    rows.sort(key=lambda r: r["config_hash"])
    cols = sorted({k for r in rows for k in r})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    blobio.atomic_write_text(out / "report.csv", buf.getvalue())
    md = ["# Run report", "", "| run | command | config | seed |", "|---|---|---|---|"]
    for row in rows:
        md.append(f"| {row['run_dir']} | {row['command']} | {row['config_hash']} | {row['seed']} |")
    blobio.atomic_write_text(out / "report.md", "\n".join(md) + "\n")
    blobio.write_manifest(
        out,
        command="report",
        config={"runs": [str(p) for p in run_dirs]},
        seed=None,
        inputs=[str(p) for p in run_dirs],
        started=started,
        format_versions=versions,
    )
    print(f"aggregated {len(rows)} runs into {out / 'report.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quatflow", description="Flow-matching and robot-action data toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-tokenizer", help="fit a 3D token vocabulary from a values file")
    p.add_argument("--values", required=True, help="text file of floats or a .blob tensor")
    p.add_argument("--n-bins", type=int, default=1024)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_tokenizer)

    p = sub.add_parser("gen-vqa", help="generate a VQA corpus from scene directories")
    p.add_argument("--scenes", required=True, help="scene dir or a directory of scene dirs")
    p.add_argument("--vocab", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_vqa)

    p = sub.add_parser("pipeline", help="resample a trajectory and emit delta-action chunks")
    p.add_argument("--traj", required=True, help="trajectory JSONL file")
    p.add_argument("--dst-hz", type=float, default=5.0)
    p.add_argument("--horizon", type=int, default=5)
    p.add_argument("--scheme", choices=("quantile", "minmax_const", "mean_std"), default="quantile")
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--denorm-verify", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("train-toy", help="train the toy denoiser from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("ablate", help="run a grid of training configs and compare")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate manifests and metrics from run dirs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except errors.DivergenceDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line surface.

Verbs: msa, synth, validate, stats, train, eval, gradcheck. Options merge a
JSON config file with command-line flags (flags win); every run echoes its
fully resolved configuration into the output directory. Exit codes:
0 success, 1 validation/contract failure, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import numpy as np
from dataclasses import asdict
from pathlib import Path

from . import data as D
from . import imageio
from . import losses as L
from . import metrics as ME
from . import model as MOD
from . import msa as MSA
from . import tensor as T
from . import train as TR
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (CheckpointError, ConfigError, ContractError,
                     DatasetError, ShapeError, TrainingDiverged)

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"config file not found: {p}")
    return json.loads(p.read_text())


def _resolve(file_cfg: dict, flag_values: dict) -> dict:
    resolved = dict(file_cfg)
    for k, v in flag_values.items():
        if v is not None:
            resolved[k] = v
    return resolved


def _echo_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(resolved, indent=2))


def _msa_config(resolved: dict) -> MSA.MsaConfig:
    fields = ("gray_min", "gray_max", "s_min", "s_max", "v_min", "v_max",
              "kernel", "weight_strength", "weight_strategy")
    return MSA.MsaConfig(**{k: resolved[k] for k in fields if k in resolved})


def cmd_msa(args) -> int:
    resolved = _resolve(_load_config_file(args.config), {
        "gray_min": args.gray_min, "gray_max": args.gray_max,
        "weight_strength": args.weight, "kernel": args.kernel,
    })
    cfg = _msa_config(resolved)
    in_dir = Path(args.input)
    out_dir = Path(args.out)
    if not in_dir.is_dir():
        print(f"error: input directory not found: {in_dir}", file=sys.stderr)
        return EXIT_IO
    _echo_config(out_dir, {**resolved, "command": "msa", "input": str(in_dir)})
    frames = sorted(p for p in in_dir.iterdir()
                    if p.suffix.lower() in (".png", ".ppm"))
    summary = []
    failures = 0
    for p in frames:
        try:
            rgb = imageio.read_frame(p)
        except Exception as e:
            print(f"error reading {p}: {e}", file=sys.stderr)
            failures += 1
            continue
        mask, _, weighted = MSA.msa_map(MSA.Frame(rgb), cfg)
        imageio.write_mask(out_dir / f"{p.stem}_mask.png", mask.bits)
        imageio.write_overlay(out_dir / f"{p.stem}_overlay.png", weighted)
        summary.append({
            "frame": p.name,
            "shadow_fraction": float(mask.bits.sum() / mask.bits.size),
        })
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return EXIT_IO if failures else EXIT_OK


def cmd_synth(args) -> int:
    resolved = _resolve(_load_config_file(args.config), {
        "n_videos": args.videos, "n_train": args.train_videos,
        "frames_per_video": args.frames, "height": args.size,
        "width": args.size, "seed": args.seed, "n_shadows": args.shadows,
    })
    known = {f for f in D.SynthConfig.__dataclass_fields__}
    cfg = D.SynthConfig(**{k: v for k, v in resolved.items() if k in known})
    out_dir = Path(args.out)
    manifest_path, manifest = D.generate_synthetic(cfg, out_dir)
    _echo_config(out_dir, {**resolved, "command": "synth"})
    print(f"wrote {manifest_path} ({len(manifest.records)} records)")
    return EXIT_OK


def cmd_validate(args) -> int:
    manifest = D.load_manifest(args.manifest)
    report = D.validate(manifest)
    for v in report.violations:
        print(f"violation: {v}")
    print(f"{len(report.violations)} violation(s) in "
          f"{len(manifest.records)} record(s)")
    return EXIT_OK if report.ok else EXIT_CONTRACT


def cmd_stats(args) -> int:
    manifest = D.load_manifest(args.manifest)
    report = D.stats(manifest)
    print(report.to_json())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(report.to_json())
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    resolved = _resolve(file_cfg, {
        "epochs": args.epochs, "lr": args.lr, "seed": args.seed,
        "msa_on": None if args.msa is None else args.msa == "on",
        "memory_mode": args.memory,
    })
    out_dir = Path(args.out)
    manifest = D.load_manifest(args.manifest)
    train_fields = {f for f in TR.TrainConfig.__dataclass_fields__}
    tcfg = TR.TrainConfig(**{k: v for k, v in resolved.items()
                             if k in train_fields})
    model_fields = {f for f in MOD.ModelConfig.__dataclass_fields__}
    mcfg = MOD.ModelConfig(**{k: v for k, v in resolved.items()
                              if k in model_fields and k != "seed"},
                           seed=tcfg.seed)
    msa_cfg = _msa_config(resolved)
    _echo_config(out_dir, {**resolved, "command": "train",
                           "manifest": str(args.manifest)})
    samples = TR.load_samples(manifest, "train")
    if not samples:
        print("error: train split is empty", file=sys.stderr)
        return EXIT_CONTRACT
    vocab = MOD.Vocabulary.from_expressions(s.expression for s in samples)
    params = MOD.init_params(mcfg, vocab)
    try:
        report = TR.train(samples, mcfg, params, vocab, tcfg,
                          msa_cfg=msa_cfg)
    except TrainingDiverged as e:
        partial = e.args[1] if len(e.args) > 1 else TR.TrainReport()
        (out_dir / "train_report.jsonl").write_text(partial.to_jsonl())
        print(f"error: {e.args[0]}", file=sys.stderr)
        return EXIT_CONTRACT
    (out_dir / "train_report.jsonl").write_text(report.to_jsonl())
    save_checkpoint(out_dir / "checkpoint.json", mcfg, params, vocab)
    print(f"final mean loss {report.epochs[-1]['mean_loss']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    resolved = _resolve(_load_config_file(args.config), {
        "msa_on": None if args.msa is None else args.msa == "on",
        "memory_mode": args.memory,
    })
    out_dir = Path(args.out)
    manifest = D.load_manifest(args.manifest)
    samples = TR.load_samples(manifest, args.split)
    if not samples:
        print(f"error: {args.split} split is empty", file=sys.stderr)
        return EXIT_CONTRACT
    if args.oracle:
        cfg = params = vocab = None
    else:
        if not args.checkpoint:
            print("error: --checkpoint is required unless --oracle is given",
                  file=sys.stderr)
            return EXIT_CONTRACT
        cfg, params, vocab = load_checkpoint(args.checkpoint)
    msa_cfg = _msa_config(resolved)
    _echo_config(out_dir, {**resolved, "command": "eval",
                           "oracle": bool(args.oracle)})
    trace: list | None = [] if args.trace else None
    report = TR.evaluate(samples, cfg, params, vocab, msa_cfg=msa_cfg,
                         msa_on=resolved.get("msa_on", True),
                         memory_mode=resolved.get("memory_mode", "intra+hier"),
                         oracle=bool(args.oracle), trace=trace)
    (out_dir / "metrics.json").write_text(report.to_json())
    (out_dir / "metrics.txt").write_text(report.to_table() + "\n")
    if trace is not None:
        from .memory import dump_trace
        dump_trace(trace, out_dir / "memory_trace.jsonl")
    print(report.to_table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed or 0)
    checks = []

    x0 = T.Tensor(rng.normal(size=(3, 4)))
    weights = rng.normal(size=(3, 4))
    checks.append(("sum_of_squares",
                   T.grad_check(lambda t: T.sum_(t * t), x0)))
    checks.append(("softmax_rows",
                   T.grad_check(lambda t: T.sum_(T.softmax_rows(t) * weights),
                                x0)))
    attn = T.init_attention(8, rng)
    kv = T.constant(rng.normal(size=(4, 8)))
    xq = T.Tensor(rng.normal(size=(2, 8)))
    checks.append(("attention", T.grad_check(
        lambda t: T.sum_(T.multi_head_attention(t, kv, kv, 2, attn)), xq)))
    ok = True
    for name, rep in checks:
        status = "pass" if rep.passed else "FAIL"
        print(f"{name}: max_rel_err={rep.max_rel_err:.3e} [{status}]")
        ok = ok and rep.passed
    return EXIT_OK if ok else EXIT_CONTRACT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refshadow")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int)
        if out_required:
            p.add_argument("--out", required=True)

    p = sub.add_parser("msa", help="shadow masks and overlays for a frame dir")
    p.add_argument("--input", required=True)
    p.add_argument("--gray-min", type=int, dest="gray_min")
    p.add_argument("--gray-max", type=int, dest="gray_max")
    p.add_argument("--kernel", type=int)
    p.add_argument("--weight", type=float)
    common(p)
    p.set_defaults(func=cmd_msa)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--videos", type=int)
    p.add_argument("--train-videos", type=int, dest="train_videos")
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--shadows", type=int)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="validate a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train the toy segmenter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--msa", choices=("on", "off"))
    p.add_argument("--memory", choices=MOD.MEMORY_MODES)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--msa", choices=("on", "off"))
    p.add_argument("--memory", choices=MOD.MEMORY_MODES)
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself")
    p.add_argument("--trace", action="store_true",
                   help="dump per-frame memory trace")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError,) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DatasetError, ConfigError, ContractError, ShapeError,
            CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())

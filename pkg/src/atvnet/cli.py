"""Command-line entry point: ``atvnet <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Errors are printed as a single ``error: ...`` line on stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, checkpoint_load
from .config import RunConfig, load_config
from .data import DatasetError, REGIMES, generate_triscenes, load_all, load_dataset
from .netpbm import NetpbmError, read_ppm, write_pgm

log = logging.getLogger("atvnet")


class UsageError(Exception):
    """Bad arguments or inputs: exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _split_dir(data: str, split: str) -> Path:
    root = Path(data)
    if not root.is_dir():
        raise UsageError(f"dataset directory {root} not found")
    d = root / split
    return d if d.is_dir() else root


def cmd_gen_data(args):
    if args.size % 8 or args.size < 8:
        raise UsageError(f"--size {args.size} is not a positive multiple of 8")
    if args.classes < 3:
        raise UsageError("--classes must be at least 3")
    out = Path(args.out)
    for split, n in (("train", args.num), ("val", args.num_val)):
        if n <= 0:
            continue
        man = generate_triscenes(n, args.size, args.classes, args.regime, args.seed, out / split, split)
        regimes = {r: sum(e["regime"] == r for e in man.entries) for r in ("local", "context")}
        print(f"{split}: {len(man)} samples, {args.size}x{args.size}, K={args.classes}, "
              f"regimes {regimes} -> {out / split}")
    return 0


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.gate is not None:
        cfg.model.gate = args.gate
    cfg.data_dir = args.data
    cfg.model.validate()
    return cfg


def cmd_train(args):
    from .train import train

    if not Path(args.data).is_dir():
        raise UsageError(f"dataset directory {args.data} not found")
    try:
        cfg = _run_config(args)
    except (ValueError, TypeError, OSError) as e:
        raise UsageError(f"bad config: {e}") from e
    print("config " + cfg.to_json())
    t0 = time.time()
    result = train(cfg, args.data, args.out, resume=args.resume, stop_after=args.stop_after)
    for h in result.history:
        alphas = " ".join(f"{k}={v}" for k, v in h.items() if k.startswith("alpha_"))
        print(f"epoch {h['epoch']} loss={h['loss']:.6f} lr={h['lr']:.3e} "
              f"val_miou={h['val_miou']:.6f} {alphas}")
    print(f"best_val_miou={result.best_miou:.6f} steps={result.state.t} "
          f"seconds={time.time() - t0:.1f}")
    return 0


def _load_ckpt(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    try:
        return checkpoint_load(path)
    except CheckpointError as e:
        raise UsageError(str(e)) from e


def cmd_eval(args):
    from .metrics import format_report
    from .train import evaluate

    cfg, params, _, _ = _load_ckpt(args.ckpt)
    man = load_dataset(_split_dir(args.data, args.split))
    if man.num_classes != cfg.model.num_classes:
        raise UsageError(f"dataset has K={man.num_classes} but checkpoint has K={cfg.model.num_classes}")
    ev = evaluate(params, load_all(man))
    print(format_report(ev.cm))
    return 0


def infer_image(params, image: np.ndarray) -> np.ndarray:
    """(3, H, W) float image -> (H, W) class ids. Sizes not divisible by 8 are
    reflect-padded and the prediction cropped back."""
    from .model import predict

    h, w = image.shape[1:]
    ph, pw = -h % 8, -w % 8
    x = image[None]
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    return predict(x.astype(np.float32), params)[0, :h, :w]


def cmd_infer(args):
    cfg, params, _, _ = _load_ckpt(args.ckpt)
    try:
        rgb = read_ppm(args.image)
    except NetpbmError as e:
        raise UsageError(str(e)) from e
    mask = infer_image(params, rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)
    write_pgm(args.out, mask.astype(np.uint8))
    print(f"wrote {args.out} ({mask.shape[0]}x{mask.shape[1]}, classes {sorted(np.unique(mask).tolist())})")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    t0 = time.time()
    reports = run_suite(args.seed)
    for r in reports:
        print(r)
        for key, idx, a, n in r.failures[:5]:
            print(f"    {key}[{idx}]: analytic={a:.6e} numeric={n:.6e}")
    ok = all(r.passed for r in reports)
    print(f"gradcheck {'passed' if ok else 'FAILED'} in {time.time() - t0:.1f}s")
    return 0 if ok else 1


def cmd_inspect_gate(args):
    from .train import alpha_histogram, evaluate, gate_summary

    cfg, params, _, _ = _load_ckpt(args.ckpt)
    ev = evaluate(params, load_all(load_dataset(_split_dir(args.data, args.split))))
    print("regime   n    alpha_micro        alpha_local        alpha_scout")
    for regime, s in gate_summary(ev).items():
        cells = "  ".join(f"{m:.4f}+-{sd:.4f}" for m, sd in zip(s["mean"], s["std"]))
        print(f"{regime:8s} {s['count']:<4d} {cells}")
    for regime, a in ev.alpha_by_regime().items():
        print(f"alpha_scout histogram ({regime}):")
        print(alpha_histogram(a[:, 2]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atvnet", description="Adaptive triple-view segmentation on TriScenes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a TriScenes dataset (train + val splits)")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, default=200, help="training scenes")
    g.add_argument("--num-val", type=int, default=50, help="validation scenes")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--regime", choices=REGIMES, default="mixed")
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--stop-after", type=int, help="stop after this many epochs (schedule unchanged)")
    t.add_argument("--gate", choices=("adaptive", "fixed"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="val")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one PPM image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("inspect-gate", help="gate weights per scene regime")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.set_defaults(func=cmd_inspect_gate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, NetpbmError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level report
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: gen | train | register | eval.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command is
deterministic given its flags; one root seed derives all internal streams.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config_file, write_config_file
from .errors import ContractError, FormatError, NumericsError, ShapeError
from .fields import recursive_register, warp
from .losses import total_loss
from .metrics import evaluate_labels
from .network import load_checkpoint
from .synth import derive_seed, gen_pair
from .train import load_split, time_register, train
from .volio import read_volume, write_manifest, write_volume


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="scanreg",
                     description="Deformable 3D registration with state-space scan blocks")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--n-train", type=int, default=20)
    gen.add_argument("--n-val", type=int, default=4)
    gen.add_argument("--n-test", type=int, default=4)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--amplitude", type=float, default=4.0,
                     help="max ground-truth displacement in voxels")
    gen.add_argument("--size", type=int, default=32, help="cubic volume extent")
    gen.add_argument("--n-labels", type=int, default=4)

    tr = sub.add_parser("train", help="train a registration model")
    tr.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    tr.add_argument("--config", help="key=value config file")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--epochs", type=int, help="override epoch count")
    tr.add_argument("--seed", type=int, help="override root seed")
    tr.add_argument("--k-train", type=int, help="override training recursion depth")
    tr.add_argument("--lr", type=float, help="override learning rate")
    tr.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    tr.add_argument("--quiet", action="store_true")

    reg = sub.add_parser("register", help="register one volume pair")
    reg.add_argument("--ckpt", required=True)
    reg.add_argument("--src", required=True, help="source image (VMMVOL01)")
    reg.add_argument("--tgt", required=True, help="target image (VMMVOL01)")
    reg.add_argument("--src-seg", help="optional source labels; warped with nearest lookup")
    reg.add_argument("--k", type=int, default=2, help="inference recursion depth")
    reg.add_argument("--out", required=True, help="output directory")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--k", type=int, default=2)
    ev.add_argument("--out", help="metrics JSON path (default: print to stdout)")
    ev.add_argument("--no-plots", action="store_true")
    return parser


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    counts = [("train", args.n_train), ("val", args.n_val), ("test", args.n_test)]
    for split, count in counts:
        for i in range(count):
            pair_seed = derive_seed(args.seed, f"pair/{split}/{i}")
            pair = gen_pair(pair_seed, args.size, args.n_labels, args.amplitude)
            stem = f"{split}_{i:03d}"
            files = {"i_src": pair.i_src, "i_tgt": pair.i_tgt,
                     "s_src": pair.s_src, "s_tgt": pair.s_tgt, "u_gt": pair.u_gt}
            entry = {"seed": pair_seed, "split": split}
            for key, data in files.items():
                name = f"{stem}_{key}.vol"
                write_volume(out / name, data)
                entry[key] = name
            entries.append(entry)
    write_manifest(out / "manifest.json", entries)
    print(f"wrote {len(entries)} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig()
    if args.config:
        cfg = parse_config_file(args.config, cfg)
    for key in ("epochs", "seed", "lr"):
        if getattr(args, key) is not None:
            cfg = _override(cfg, key, getattr(args, key))
    if args.k_train is not None:
        cfg = _override(cfg, "k_train", args.k_train)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(out / "config.txt", cfg)

    def progress(row):
        if not args.quiet:
            print(f"epoch {row['epoch']:4d}  train {row['train_loss']:.4f}  "
                  f"val {row['val_loss']:.4f}  dice {row['val_dice']:.2f}")

    train(cfg, args.data, out, progress=progress)
    if not args.no_plots:
        from .plots import plot_history
        plot_history(out / "history.csv", out / "history.png")
    print(f"checkpoints and history in {out}")
    return 0


def cmd_register(args) -> int:
    model = load_checkpoint(args.ckpt)
    i_src, _ = read_volume(args.src)
    i_tgt, _ = read_volume(args.tgt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    field, seconds = time_register(model, i_src, i_tgt, args.k)
    write_volume(out / "field.vol", field)
    write_volume(out / "warped_src.vol", warp(i_src, field))
    report = {"k": args.k, "time_s": seconds,
              "field": "field.vol", "warped_src": "warped_src.vol"}
    if args.src_seg:
        seg, _ = read_volume(args.src_seg)
        write_volume(out / "warped_seg.vol", warp(seg, field, mode="nearest"))
        report["warped_seg"] = "warped_seg.vol"
    with open(out / "register.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"registered in {seconds:.2f}s -> {out}")
    return 0


def _aggregate(reports: list[dict]) -> dict:
    agg = {}
    for key in ("dice_pct", "hd95_vox", "njd_pct", "time_s"):
        values = [r[key] for r in reports if r.get(key) is not None]
        if values:
            agg[f"{key}_mean"] = float(np.mean(values))
            agg[f"{key}_std"] = float(np.std(values))
        else:
            agg[f"{key}_mean"] = None
            agg[f"{key}_std"] = None
    return agg


def evaluate_split(model, data_dir, split: str, k: int) -> dict:
    pairs = load_split(data_dir, split)
    if not pairs:
        raise ContractError(f"split {split!r} is empty in {data_dir}")
    rows = []
    for pair in pairs:
        initial = evaluate_labels(pair.s_src, pair.s_tgt)
        field, seconds = time_register(model, pair.i_src, pair.i_tgt, k)
        warped = warp(pair.s_src, field, mode="nearest")
        registered = evaluate_labels(warped, pair.s_tgt, u=field, inference_time_s=seconds)
        rows.append({"seed": pair.entry["seed"],
                     "initial": initial.to_json_dict(),
                     "registered": registered.to_json_dict()})
    return {
        "split": split,
        "k": k,
        "n_pairs": len(rows),
        "initial": _aggregate([r["initial"] for r in rows]),
        "registered": _aggregate([r["registered"] for r in rows]),
        "pairs": rows,
    }


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    report = evaluate_split(model, args.data, args.split, args.k)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        if not args.no_plots:
            from .plots import plot_eval_report
            plot_eval_report(report, Path(args.out).with_suffix(".png"))
        print(f"dice {report['initial']['dice_pct_mean']:.2f} -> "
              f"{report['registered']['dice_pct_mean']:.2f} % ({args.out})")
    else:
        print(text, end="")
    return 0


def _override(cfg: RunConfig, key: str, value) -> RunConfig:
    from dataclasses import replace
    return replace(cfg, **{key: value})


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "register": cmd_register, "eval": cmd_eval}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ContractError, FormatError, NumericsError, ShapeError, OSError) as exc:
        print(f"scanreg {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

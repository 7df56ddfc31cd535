"""Adam optimizer and the recursive-registration training loop."""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .config import RunConfig
from .errors import NumericsError
from .fields import recursive_register, warp
from .losses import total_loss
from .metrics import dice_score
from .network import RegistrationModel, save_checkpoint
from .synth import derive_seed
from .volio import read_manifest, read_volume

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_dice")


class Adam:
    """Per-parameter adaptive steps with bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (p.grad * p.grad)
            p.data -= scale * self.m[k] / (np.sqrt(self.v[k]) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class PairData:
    """One dataset pair loaded from disk."""

    def __init__(self, entry: dict, root: Path):
        self.entry = entry
        self.i_src = read_volume(root / entry["i_src"])[0]
        self.i_tgt = read_volume(root / entry["i_tgt"])[0]
        self.s_src = read_volume(root / entry["s_src"])[0]
        self.s_tgt = read_volume(root / entry["s_tgt"])[0]


def load_split(data_dir, split: str) -> list[PairData]:
    root = Path(data_dir)
    entries = [e for e in read_manifest(root / "manifest.json") if e["split"] == split]
    return [PairData(e, root) for e in entries]


def pair_loss(model: RegistrationModel, pair: PairData, k: int,
              smooth_weight: float) -> float:
    """Objective value without gradient tracking."""
    _, level_fields = recursive_register(model, Tensor(pair.i_src), Tensor(pair.i_tgt), k)
    return float(total_loss(level_fields, pair.s_src, pair.s_tgt, smooth_weight).data)


def pair_dice(model: RegistrationModel, pair: PairData, k: int) -> float:
    phi, _ = recursive_register(model, Tensor(pair.i_src), Tensor(pair.i_tgt), k)
    warped = warp(pair.s_src, phi.data, mode="nearest")
    return dice_score(warped, pair.s_tgt)


def train(cfg: RunConfig, data_dir, out_dir,
          progress=None) -> tuple[RegistrationModel, list[dict]]:
    """Train on the manifest's train split; returns (best model, history rows).

    Writes history.csv incrementally plus best.ckpt / last.ckpt under out_dir.
    Raises NumericsError on divergence, leaving partial history on disk.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_pairs = load_split(data_dir, "train")
    val_pairs = load_split(data_dir, "val")

    model = RegistrationModel(cfg.net_config(), seed=derive_seed(cfg.seed, "init"))
    opt = Adam(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "order"))

    history: list[dict] = []
    best_dice = -np.inf
    history_path = out / "history.csv"
    with open(history_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        fh.flush()
        for epoch in range(1, cfg.epochs + 1):
            order = order_rng.permutation(len(train_pairs))
            losses = []
            for idx in order:
                pair = train_pairs[idx]
                opt.zero_grad()
                with Tape() as tape:
                    _, level_fields = recursive_register(
                        model, Tensor(pair.i_src), Tensor(pair.i_tgt), cfg.k_train)
                    loss = total_loss(level_fields, pair.s_src, pair.s_tgt,
                                      cfg.smooth_weight)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NumericsError(f"training loss diverged at epoch {epoch}")
                backward(tape, loss)
                opt.step()
                losses.append(value)

            train_loss = float(np.mean(losses))
            if val_pairs:
                val_loss = float(np.mean([
                    pair_loss(model, p, cfg.k_train, cfg.smooth_weight) for p in val_pairs]))
                val_dice = float(np.mean([
                    pair_dice(model, p, cfg.k_train) for p in val_pairs]))
            else:
                val_loss, val_dice = train_loss, float("nan")
            row = {"epoch": epoch, "train_loss": train_loss,
                   "val_loss": val_loss, "val_dice": val_dice}
            history.append(row)
            writer.writerow([row[c] for c in HISTORY_COLUMNS])
            fh.flush()
            if progress is not None:
                progress(row)
            if not val_pairs or val_dice >= best_dice:
                best_dice = val_dice
                save_checkpoint(out / "best.ckpt", model)
            save_checkpoint(out / "last.ckpt", model)

    if cfg.epochs == 0:
        save_checkpoint(out / "best.ckpt", model)
        save_checkpoint(out / "last.ckpt", model)
    return model, history


def time_register(model: RegistrationModel, i_src, i_tgt, k: int):
    """Inference field plus wall-clock seconds."""
    start = time.perf_counter()
    phi, _ = recursive_register(model, Tensor(i_src), Tensor(i_tgt), k)
    return phi.data, time.perf_counter() - start

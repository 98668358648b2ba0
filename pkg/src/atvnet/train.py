"""Training, evaluation and gate inspection loops."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import checkpoint_load, checkpoint_save
from .config import RunConfig
from .data import AugmentConfig, augment, load_all, load_dataset, make_batch, sample_rng
from .loss import ohem_loss
from .metrics import ConfusionMatrix, mean_iou
from .model import ATVNetParams, build_model, model_backward, model_forward
from .optim import AdamWState, PolySchedule, adamw_step, no_decay

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class EvalResult:
    cm: ConfusionMatrix
    alpha: np.ndarray          # (num_samples, 3)
    regimes: list

    @property
    def miou(self) -> float:
        return mean_iou(self.cm)

    def alpha_by_regime(self) -> dict:
        out = {}
        for r in sorted(set(self.regimes)):
            sel = np.array([g == r for g in self.regimes])
            out[r] = self.alpha[sel]
        return out


@dataclass
class TrainResult:
    params: ATVNetParams
    state: AdamWState
    losses: list = field(default_factory=list)       # per optimiser step
    history: list = field(default_factory=list)      # per epoch dicts
    best_miou: float = -1.0

    @property
    def final_miou(self) -> float:
        return self.history[-1]["val_miou"] if self.history else float("nan")


def evaluate(params: ATVNetParams, samples, batch_size: int = 10) -> EvalResult:
    """Eval-mode forward over ``samples`` (all the same size)."""
    cm = ConfusionMatrix(params.config.num_classes)
    alphas = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x, y = make_batch(chunk)
        logits, trace = model_forward(x, params, "eval")
        cm.update(logits.argmax(axis=1), y)
        alphas.append(trace.alpha.reshape(-1, 3).astype(np.float64))
    return EvalResult(cm, np.concatenate(alphas), [s.regime for s in samples])


def _load_split(data_dir, split):
    root = Path(data_dir)
    return load_all(load_dataset(root / split if (root / split).is_dir() else root))


def train(cfg: RunConfig, data_dir=None, out=None, resume=None, stop_after=None,
          train_samples=None, val_samples=None) -> TrainResult:
    """Run (or resume) training.

    Writes ``out`` whenever validation mIoU improves and ``out.last`` after
    every epoch. ``stop_after`` ends the run after that many total epochs
    while keeping the schedule of the full run, which is what resuming needs.
    """
    data_dir = data_dir or cfg.data_dir
    if train_samples is None:
        train_samples = _load_split(data_dir, "train")
    if val_samples is None:
        val_samples = _load_split(data_dir, "val")
    tc = cfg.train
    start_epoch, best = 0, -1.0
    if resume:
        saved_cfg, params, state, extra = checkpoint_load(resume)
        if saved_cfg.model != cfg.model:
            raise TrainingError(f"{resume}: model config differs from the run config")
        state = state or AdamWState()
        start_epoch = int(extra.get("epoch", 0))
        best = extra.get("best_miou", -1.0)
    else:
        params = build_model(cfg.model, seed=tc.seed)
        state = AdamWState()
    steps_per_epoch = math.ceil(len(train_samples) / tc.batch_size)
    sched = PolySchedule(cfg.optim.lr0, cfg.optim.power, tc.epochs * steps_per_epoch)
    aug = AugmentConfig(tc.scale_choices, (tc.crop_size, tc.crop_size), tc.hflip_prob, tc.seed)
    exclude = None if cfg.optim.decay_norm_and_bias else no_decay
    result = TrainResult(params, state, best_miou=best)
    last_epoch = tc.epochs if stop_after is None else min(stop_after, tc.epochs)
    o = cfg.optim

    for epoch in range(start_epoch, last_epoch):
        order = np.random.default_rng([tc.seed, epoch, 1 << 30]).permutation(len(train_samples))
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * tc.batch_size:(b + 1) * tc.batch_size]
            batch = [augment(train_samples[i], aug, sample_rng(tc.seed, epoch, int(i))) for i in idx]
            x, y = make_batch(batch)
            logits, trace = model_forward(x, params, "train")
            loss, dlogits, _ = ohem_loss(logits, y, cfg.loss)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {state.t} (epoch {epoch}, batch {b})")
            grads = model_backward(trace, params, dlogits)
            adamw_step(params.weights, grads, state, sched(state.t), o.beta1, o.beta2, o.eps,
                       o.weight_decay, exclude)
            result.losses.append(loss)
            epoch_losses.append(loss)

        ev = evaluate(params, val_samples)
        miou = float(np.float32(ev.miou))   # stored as float32 in checkpoints
        rec = {"epoch": epoch + 1, "loss": float(np.mean(epoch_losses)),
               "lr": sched(state.t), "val_miou": miou}
        for r, a in ev.alpha_by_regime().items():
            rec[f"alpha_{r}"] = a.mean(axis=0).round(4).tolist()
        result.history.append(rec)
        log.info("epoch %d loss %.4f lr %.2e val_miou %.4f %s", epoch + 1, rec["loss"], rec["lr"],
                 miou, " ".join(f"{k}={v}" for k, v in rec.items() if k.startswith("alpha_")))
        if miou > result.best_miou:
            result.best_miou = miou
            if out:
                checkpoint_save(out, params, cfg, state, {"epoch": epoch + 1, "best_miou": miou})
        if out:
            checkpoint_save(f"{out}.last", params, cfg, state,
                            {"epoch": epoch + 1, "best_miou": result.best_miou})
    return result


def gate_summary(ev: EvalResult) -> dict:
    """Per regime: count, mean and std of (alpha_micro, alpha_local, alpha_scout)."""
    return {r: {"count": len(a), "mean": a.mean(axis=0), "std": a.std(axis=0)}
            for r, a in ev.alpha_by_regime().items()}


def alpha_histogram(values, bins: int = 10, width: int = 40) -> str:
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    top = max(counts.max(), 1)
    return "\n".join(f"  [{edges[i]:.1f},{edges[i + 1]:.1f}) {'#' * int(round(width * c / top))} {c}"
                     for i, c in enumerate(counts))

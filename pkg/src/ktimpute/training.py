"""Minibatch training with early stopping, shared by the generative models and the regressors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numeric import Adam, Tape, Tensor, backward


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class FitConfig:
    lr: float = 1e-2
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-5
    batch_size: int = 16


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    recon: float
    kl: float


@dataclass
class FitResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    stopped_early: bool = False

    def best_so_far(self) -> list[float]:
        out, best = [], math.inf
        for rec in self.history:
            best = min(best, rec.val_loss)
            out.append(best)
        return out


# step_fn(batch_indices, rng) -> (loss tensor, recon float, kl float), evaluated under a tape
StepFn = Callable[[np.ndarray, np.random.Generator], tuple[Tensor, float, float]]


def fit(
    params: Sequence[Tensor],
    n_train: int,
    step_fn: StepFn,
    eval_fn: Callable[[], tuple[float, float, float]],
    train_eval_fn: Callable[[], float],
    cfg: FitConfig,
    seed: int,
) -> FitResult:
    """Run Adam over shuffled minibatches until validation stops improving.

    Epoch 0 records the untrained model. An epoch improves when the
    validation loss drops by more than ``min_delta``; after ``patience``
    consecutive non-improving epochs training stops, and the parameters of
    the best epoch are restored.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(params, lr=cfg.lr)
    res = FitResult()

    v0, r0, k0 = eval_fn()
    _check_finite(v0, 0, "validation")
    res.history.append(EpochRecord(0, train_eval_fn(), v0, r0, k0))
    res.best_val, res.best_epoch = v0, 0
    best = [p.data.copy() for p in params]
    wait = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n_train)
        tot = rec = klt = 0.0
        nb = 0
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with Tape() as tape:
                loss, r, k = step_fn(idx, rng)
            lv = loss.item()
            if not math.isfinite(lv):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: loss={lv} recon={r} kl={k}"
                )
            grads = backward(tape, loss, params)
            opt.step(grads)
            tot += lv
            rec += r
            klt += k
            nb += 1
        val, _, _ = eval_fn()
        _check_finite(val, epoch, "validation")
        res.history.append(EpochRecord(epoch, tot / nb, val, rec / nb, klt / nb))
        if val < res.best_val - cfg.min_delta:
            res.best_val, res.best_epoch = val, epoch
            best = [p.data.copy() for p in params]
            wait = 0
        else:
            wait += 1
            if wait > cfg.patience:
                res.stopped_early = True
                break
    for p, b in zip(params, best):
        p.data = b
    return res


def _check_finite(v: float, epoch: int, what: str) -> None:
    if not math.isfinite(v):
        raise NonFiniteLoss(f"non-finite {what} loss at epoch {epoch}: {v}")


def history_rows(res: FitResult) -> list[list]:
    return [[r.epoch, r.train_loss, r.val_loss, r.recon, r.kl] for r in res.history]


HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "recon", "kl"]

"""Recurrent score-rate regressors (LSTM or GRU) with a sigmoid head."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .core_types import GeneratedSeries
from .numeric import (
    GruCellParams,
    LstmCellParams,
    ShapeMismatch,
    Tensor,
    dense_init,
    gru_cell,
    linear,
    lstm_cell,
    masked_mean_square,
    no_grad,
    reshape,
    sigmoid,
    stack,
)
from .pipeline import MinMaxScaler, SequenceBatch
from .training import FitConfig, FitResult, fit


class CellKind(str, enum.Enum):
    LSTM = "lstm"
    GRU = "gru"


class NotTrained(RuntimeError):
    pass


@dataclass
class RegressorParams:
    kind: CellKind
    cell: object
    W_out: Tensor
    b_out: Tensor
    trained: bool = False

    @classmethod
    def init(cls, kind, n_features: int, hidden: int, seed: int) -> "RegressorParams":
        kind = CellKind(kind)
        rng = np.random.default_rng(seed)
        if kind is CellKind.LSTM:
            cell = LstmCellParams.init(n_features, hidden, rng)
        else:
            cell = GruCellParams.init(n_features, hidden, rng)
        W, b = dense_init(1, hidden, rng)
        return cls(kind, cell, W, b)

    @classmethod
    def zeros(cls, kind, n_features: int, hidden: int) -> "RegressorParams":
        kind = CellKind(kind)
        cell = (LstmCellParams if kind is CellKind.LSTM else GruCellParams).zeros(n_features, hidden)
        return cls(kind, cell, Tensor(np.zeros((1, hidden)), True), Tensor(np.zeros(1), True))

    @property
    def hidden_size(self) -> int:
        return self.cell.hidden_size

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.cell.named_parameters("cell.") + [("W_out", self.W_out), ("b_out", self.b_out)]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def to_checkpoint(self, meta: Optional[dict] = None) -> bytes:
        m = {"model": self.kind.value, "n_features": self.cell.input_size, "hidden": self.hidden_size}
        m.update(meta or {})
        return checkpoint.dumps([(n, p.data) for n, p in self.named_parameters()], m)

    @classmethod
    def from_checkpoint(cls, blob: bytes) -> "RegressorParams":
        params, meta = checkpoint.loads(blob)
        model = cls.zeros(meta["model"], meta["n_features"], meta["hidden"])
        for name, p in model.named_parameters():
            p.data = params[name].copy()
        model.trained = True
        return model


def forward(params: RegressorParams, y) -> Tensor:
    """Per-step predictions in (0, 1): (B, T, D) -> (B, T)."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[2] != params.cell.input_size:
        raise ShapeMismatch(f"expected (B, T, {params.cell.input_size}), got {y.shape}")
    B, T, _ = y.shape
    H = params.hidden_size
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    outs = []
    for t in range(T):
        x = Tensor(y[:, t])
        if params.kind is CellKind.LSTM:
            h, c = lstm_cell(params.cell, x, h, c)
        else:
            h = gru_cell(params.cell, x, h)
        outs.append(linear(h, params.W_out, params.b_out))
    logits = stack(outs, axis=1)  # (B, T, 1)
    return sigmoid(_squeeze_last(logits))


def _squeeze_last(t: Tensor) -> Tensor:
    return reshape(t, t.shape[:-1])


def masked_loss(params: RegressorParams, batch: SequenceBatch) -> Tensor:
    pred = forward(params, batch.y)
    return masked_mean_square(pred, batch.target, batch.target_mask)


def train_regressor(
    params: RegressorParams,
    train_batch: SequenceBatch,
    val_batch: SequenceBatch,
    cfg: FitConfig,
    seed: int = 0,
) -> FitResult:
    """Minimise masked MSE on target-carrying positions, early-stopping on validation MSE."""

    def step(idx, rng):
        loss = masked_loss(params, train_batch.take(idx))
        return loss, loss.item(), 0.0

    def val_eval():
        v = mse(params, val_batch)
        return v, v, 0.0

    res = fit(params.parameters(), len(train_batch), step, val_eval, lambda: mse(params, train_batch), cfg, seed)
    params.trained = True
    return res


def predict(params: RegressorParams, y: np.ndarray) -> np.ndarray:
    with no_grad():
        return forward(params, y).data


def mse(params: RegressorParams, batch: SequenceBatch) -> float:
    pred = predict(params, batch.y)
    m = batch.target_mask
    if not m.any():
        return 0.0
    d = pred[m] - batch.target[m]
    return float(np.mean(d * d))


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        return 0.0
    d = pred - target
    return math.sqrt(float(np.mean(d * d)))


@dataclass(frozen=True)
class EvalResult:
    rmse: float
    seed: int
    model: str
    padding: str
    dataset: str


def evaluate(params: RegressorParams, test_batch: SequenceBatch, seed=0, padding="", dataset="") -> EvalResult:
    """RMSE over the target-carrying real positions of ``test_batch``."""
    pred = predict(params, test_batch.y)
    m = test_batch.target_mask
    return EvalResult(rmse(pred[m], test_batch.target[m]), seed, params.kind.value, padding, dataset)


def select_best(cells: dict):
    """Key with the minimum mean RMSE; ``cells`` maps key -> list of RMSEs.

    Ties go to the first key in insertion order.
    """
    best_key, best = None, math.inf
    for key, vals in cells.items():
        m = float(np.mean(vals))
        if m < best:
            best_key, best = key, m
    return best_key


def predict_targets(
    params: RegressorParams,
    generated: Sequence[GeneratedSeries],
    scaler: MinMaxScaler,
) -> list[GeneratedSeries]:
    """Attach a predicted score rate to every generated row.

    Each generated sequence is scaled with the downstream scaler and run
    through the regressor as its own sequence.
    """
    if not params.trained:
        raise NotTrained("regressor must be trained before predicting targets")
    todo = [g for g in generated if g.features]
    preds: dict[int, np.ndarray] = {}
    if todo:
        # pads go after each sequence and the cell is causal, so one padded pass is exact
        Tmax = max(len(g.features) for g in todo)
        y = np.zeros((len(todo), Tmax, len(todo[0].features[0])))
        for b, g in enumerate(todo):
            y[b, : len(g.features)] = scaler.scale(np.array(g.features))
        p = predict(params, y)
        for b, g in enumerate(todo):
            preds[id(g)] = p[b, : len(g.features)]
    return [replace(g, targets=tuple(float(v) for v in preds.get(id(g), ()))) for g in generated]

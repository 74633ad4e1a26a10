"""Evaluation protocol: accuracies, backward transfer, flatness, landscapes.

Robust accuracy attacks every example with PGD; with several restarts an
example only counts as correct when it survives all of them. Gradient and
Hessian forgetting compare input-space derivatives of the final model
against each per-task model on that task's test data. Landscape grids
sweep the loss along an adversarial direction and a random sign
direction.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import losses
from .attacks import AttackConfig, pgd
from .data import Dataset
from .errors import ArgumentError, ContractError, UndefinedValueError
from .network import (HESSIAN_DIM_CAP, Network, grad_input, hessian_input,
                      snapshot)
from .seeding import derive_rng, derive_seed

Array = np.ndarray


# ---------------------------------------------------------------------------
# accuracies


def accuracy(model: Network, dataset: Dataset) -> float:
    """Percentage of argmax-correct predictions (ties go to the lowest class)."""
    if len(dataset) == 0:
        raise UndefinedValueError("accuracy is undefined on an empty dataset")
    preds = np.argmax(model.forward(dataset.inputs), axis=1)
    return float(np.mean(preds == dataset.labels) * 100.0)


def robust_accuracy(model: Network, dataset: Dataset, attack_cfg: AttackConfig) -> float:
    """Accuracy under per-example PGD; restarts are AND-ed per example."""
    if len(dataset) == 0:
        raise UndefinedValueError("robust accuracy is undefined on an empty dataset")
    if attack_cfg.n_steps < 1:
        raise ArgumentError("robust accuracy needs at least one attack step")
    if not model.frozen:
        model = snapshot(model)
    x, y = dataset.inputs, dataset.labels
    correct = np.ones(len(dataset), dtype=bool)
    base = replace(attack_cfg, n_restarts=1)
    for restart in range(attack_cfg.n_restarts):
        cfg = replace(base, seed=derive_seed(attack_cfg.seed, purpose="eval-attack",
                                             extra=restart))
        x_adv = pgd(model, x, y, cfg)
        correct &= np.argmax(model.forward(x_adv), axis=1) == y
    return float(np.mean(correct) * 100.0)


# ---------------------------------------------------------------------------
# accuracy matrix and backward transfer


class AccuracyMatrix:
    """Lower-triangular matrix of accuracies; entry [i][j] is written once."""

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ArgumentError("need at least one task")
        self.n_tasks = n_tasks
        self.values = np.full((n_tasks, n_tasks), np.nan)

    def set(self, i: int, j: int, value: float) -> None:
        if not (0 <= j <= i < self.n_tasks):
            raise ArgumentError("only the lower triangle is defined")
        if not np.isnan(self.values[i, j]):
            raise ContractError(f"entry ({i}, {j}) was already written")
        if not 0.0 <= value <= 100.0:
            raise ArgumentError("accuracies are percentages in [0, 100]")
        self.values[i, j] = value

    def get(self, i: int, j: int) -> float:
        v = self.values[i, j]
        if np.isnan(v):
            raise UndefinedValueError(f"entry ({i}, {j}) was never written")
        return float(v)

    def final_row_mean(self) -> float:
        return float(np.nanmean(self.values[self.n_tasks - 1, :]))

    def to_rows(self) -> list[list[float | None]]:
        return [[None if np.isnan(v) else float(v) for v in row]
                for row in self.values]


def r_bwt(matrix: AccuracyMatrix) -> float:
    """Robust backward transfer: mean over past tasks of (final - when-learned)."""
    t_final = matrix.n_tasks - 1
    if matrix.n_tasks < 2:
        raise UndefinedValueError("backward transfer needs at least two tasks")
    diffs = [matrix.get(t_final, j) - matrix.get(j, j) for j in range(t_final)]
    return float(np.mean(diffs))


# ---------------------------------------------------------------------------
# gradient / Hessian forgetting


@dataclass(frozen=True)
class FlatnessReport:
    gf: float
    hf: float | None
    per_task_gf: tuple[float, ...]
    per_task_hf: tuple[float, ...] | None
    hf_available: bool


def _point_scalar(model: Network, scalar_def: str, x_row: Array, y: int):
    """(loss adapter, aux) pair for one example under one model.

    "ce" differentiates the cross-entropy at the true label; "max-logit"
    pins the class to the model's argmax at the center point and
    differentiates that logit, which keeps finite differences smooth.
    """
    if scalar_def == "ce":
        return (lambda z, aux: losses.ce(z, aux)), np.asarray([y])
    if scalar_def == "max-logit":
        from . import autodiff as ad
        c = int(np.argmax(model.forward(x_row[None, :])[0]))

        def pick(z, aux):
            return ad.mean_all(ad.take_per_row(z, aux))
        return pick, np.asarray([c])
    raise ArgumentError(f"unknown scalar definition {scalar_def!r}")


def flatness_forgetting(models: Sequence[Network], task_testsets: Sequence[Dataset],
                        scalar_def: str = "ce", subsample: int = 64,
                        seed: int = 0, hessian_step: float = 1e-4,
                        hessian_cap: int = HESSIAN_DIM_CAP) -> FlatnessReport:
    """Mean input-gradient and input-Hessian drift of the final model.

    For each past task i, draws a seeded subsample of its test set and
    averages ||grad_x s_T(x) - grad_x s_i(x)||_2; the Hessian counterpart
    uses the Frobenius norm. Hessians are skipped (hf=None) above the
    dimension cap.
    """
    if len(models) < 2:
        raise UndefinedValueError("flatness forgetting needs at least two models")
    if len(task_testsets) < len(models) - 1:
        raise ArgumentError("need one test set per past task")
    final = models[-1]
    input_dim = final.input_dim
    if any(m.input_dim != input_dim for m in models):
        raise ArgumentError("all models must share input_dim")
    hf_ok = input_dim <= hessian_cap
    gf_per: list[float] = []
    hf_per: list[float] = []
    for i, past in enumerate(models[:-1]):
        ds = task_testsets[i]
        if len(ds) == 0:
            raise UndefinedValueError("empty test set for flatness estimation")
        rng = derive_rng(seed, task=i, purpose="subsample")
        idx = rng.choice(len(ds), size=min(subsample, len(ds)), replace=False)
        g_drift = []
        h_drift = []
        for k in idx:
            x_row = ds.inputs[k]
            y = int(ds.labels[k])
            loss_f, aux_f = _point_scalar(final, scalar_def, x_row, y)
            loss_p, aux_p = _point_scalar(past, scalar_def, x_row, y)
            g_final = grad_input(final, loss_f, x_row[None, :], aux_f)[0]
            g_past = grad_input(past, loss_p, x_row[None, :], aux_p)[0]
            g_drift.append(np.linalg.norm(g_final - g_past))
            if hf_ok:
                h_final = hessian_input(final, loss_f, x_row, aux_f,
                                        step=hessian_step, dim_cap=hessian_cap)
                h_past = hessian_input(past, loss_p, x_row, aux_p,
                                       step=hessian_step, dim_cap=hessian_cap)
                h_drift.append(np.linalg.norm(h_final - h_past, ord="fro"))
        gf_per.append(float(np.mean(g_drift)))
        if hf_ok:
            hf_per.append(float(np.mean(h_drift)))
    gf = float(np.mean(gf_per))
    hf = float(np.mean(hf_per)) if hf_ok else None
    return FlatnessReport(gf, hf, tuple(gf_per),
                          tuple(hf_per) if hf_ok else None, hf_ok)


# ---------------------------------------------------------------------------
# loss-landscape grids


def landscape_grid(model: Network, x: Array, y: int, attack_cfg: AttackConfig,
                   extent: float, n: int) -> Array:
    """Cross-entropy over a 2-D slice of input space around `x`.

    Axis u is the (max-normalized) PGD perturbation direction at x; axis v
    is a seeded random sign direction. Entry [a, b] is the loss at
    x + u * s_a + v * s_b with s = linspace(-extent, extent, n).
    """
    if n < 2:
        raise ArgumentError("grid needs n >= 2")
    if not model.frozen:
        model = snapshot(model)
    x = np.asarray(x, dtype=np.float64)
    y_arr = np.asarray([int(y)])
    x_adv = pgd(model, x[None, :], y_arr, attack_cfg)[0]
    delta = x_adv - x
    peak = np.abs(delta).max()
    u = delta / peak if peak > 0 else np.zeros_like(delta)
    rng = derive_rng(attack_cfg.seed, purpose="landscape")
    v = rng.integers(0, 2, size=x.shape).astype(np.float64) * 2.0 - 1.0
    s = np.linspace(-extent, extent, n)
    points = (x[None, None, :] + s[:, None, None] * u[None, None, :]
              + s[None, :, None] * v[None, None, :]).reshape(n * n, -1)
    logits = model.forward(points)
    rows = losses.ce_rows(logits, np.full(n * n, int(y), dtype=np.int64))
    return rows.value.reshape(n, n).copy()

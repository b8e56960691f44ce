"""Multi-task loss, hard-example selection, SGD, and gradient checking.

The step loss over a batch of RoIs is

    total = (1/N_cls) * sum_sel L_cls  +  w_reg * (1/N_reg) * sum_sel,fg L_reg

where both sums run over the hard-example selection, each RoI's term is
averaged over the mixture components (every component is supervised
against the same label and target), N_cls is the number of selected
RoIs and N_reg the number of selected foreground RoIs (1 when none).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .head import ComponentScores
from .pooling import PooledFeature


@dataclass
class RoISample:
    """One proposal's training view: pooled features and scores per
    component, assigned label, and (foreground only) regression target."""

    features: list[PooledFeature]
    scores: list[ComponentScores]
    label: int
    target: np.ndarray | None

    def __post_init__(self) -> None:
        if self.label == 0 and self.target is not None:
            raise ValueError("background samples carry no regression target")
        if self.label > 0 and self.target is None:
            raise ValueError(f"foreground label {self.label} needs a target")


@dataclass
class LossReport:
    l_cls: float
    l_reg: float
    reg_weight: float
    total: float
    n_cls: int
    n_reg: int
    per_roi: np.ndarray
    selected: list[int] = field(default_factory=list)


def cross_entropy(prob: np.ndarray, label: int) -> float:
    """Negative log probability of the label, clamped at 1e-12."""
    prob = np.asarray(prob)
    if prob.ndim != 1 or not 0 <= label < prob.size:
        raise ValueError(f"label {label} invalid for distribution of {prob.size}")
    if np.any(prob < -1e-9) or abs(float(prob.sum()) - 1.0) > 1e-6:
        raise ValueError("prob is not a distribution")
    return -float(np.log(max(float(prob[label]), 1e-12)))


def smooth_l1(t: np.ndarray, t_star: np.ndarray) -> float:
    """Piecewise loss: quadratic inside |d| < 1, linear outside, summed."""
    d = np.abs(np.asarray(t, dtype=np.float64) - np.asarray(t_star, dtype=np.float64))
    per = np.where(d < 1.0, 0.5 * d * d, d - 0.5)
    return float(per.sum())


def smooth_l1_grad(t: np.ndarray, t_star: np.ndarray) -> np.ndarray:
    d = np.asarray(t, dtype=np.float64) - np.asarray(t_star, dtype=np.float64)
    return np.clip(d, -1.0, 1.0)


def ohem_select(losses: Sequence[float], n: int = 128) -> list[int]:
    """Indices of the n highest-loss entries, descending, ties to lower index."""
    if n < 1:
        raise ValueError(f"selection size must be >= 1, got {n}")
    arr = np.asarray(losses, dtype=np.float64)
    order = np.argsort(-arr, kind="stable")
    return [int(i) for i in order[: min(n, arr.size)]]


GradPair = tuple[np.ndarray, np.ndarray]


def multi_task_loss(
    batch: list[RoISample],
    reg_weight: float = 1.0,
    ohem_n: int | None = None,
) -> tuple[LossReport, list[list[GradPair]]]:
    """Batch loss plus gradients on each component's raw scores and treg.

    Gradients of RoIs outside the hard-example selection are exact
    zeros; selected gradients are scaled by the batch normalizers, so
    feeding them to the backward chain yields d(total)/d(parameters).
    """
    if not batch:
        raise ValueError("empty batch")
    m = len(batch[0].scores)
    per_cls = np.zeros(len(batch))
    per_reg = np.zeros(len(batch))
    for j, roi in enumerate(batch):
        if len(roi.scores) != m:
            raise ValueError("inconsistent component count across batch")
        ce = np.mean([cross_entropy(s.prob, roi.label) for s in roi.scores])
        per_cls[j] = ce
        if roi.label >= 1:
            per_reg[j] = np.mean(
                [smooth_l1(s.treg, roi.target) for s in roi.scores]
            )
    per_roi = per_cls + reg_weight * per_reg
    selected = (
        ohem_select(per_roi, ohem_n) if ohem_n is not None else list(range(len(batch)))
    )
    sel_set = set(selected)
    n_cls = len(selected)
    fg_sel = [j for j in selected if batch[j].label >= 1]
    n_reg = max(len(fg_sel), 1)
    l_cls = float(per_cls[selected].sum() / n_cls)
    l_reg = float(per_reg[fg_sel].sum() / n_reg) if fg_sel else 0.0
    total = l_cls + reg_weight * l_reg

    grads: list[list[GradPair]] = []
    for j, roi in enumerate(batch):
        roi_grads: list[GradPair] = []
        for s in roi.scores:
            g_raw = np.zeros_like(s.prob)
            g_treg = np.zeros(4, dtype=np.float64)
            if j in sel_set:
                # soft-max cross entropy: d(ce)/d(raw) = prob - onehot
                g_raw = s.prob.astype(np.float64).copy()
                g_raw[roi.label] -= 1.0
                g_raw /= m * n_cls
                if roi.label >= 1:
                    g_treg = (
                        reg_weight
                        * smooth_l1_grad(s.treg, roi.target)
                        / (m * n_reg)
                    )
            roi_grads.append((g_raw, g_treg))
        grads.append(roi_grads)
    report = LossReport(
        l_cls, l_reg, reg_weight, total, n_cls, n_reg, per_roi, selected
    )
    return report, grads


class SGD:
    """Heavy-ball SGD: v <- mu*v - lr*(g + wd*theta); theta <- theta + v."""

    def __init__(
        self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0005
    ) -> None:
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if set(params) != set(grads):
            raise ValueError("params and grads must cover the same names")
        for name in sorted(params):
            theta = params[name]
            g = grads[name]
            if g.shape != theta.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(theta)
                self.velocity[name] = v
            v *= self.momentum
            v -= self.lr * (g + self.weight_decay * theta).astype(theta.dtype)
            theta += v
        self.steps += 1

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"optim.v.{n}": v for n, v in self.velocity.items()}
        out["optim.steps"] = np.array([self.steps], dtype=np.float32)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.velocity = {
            n[len("optim.v.") :]: t
            for n, t in tensors.items()
            if n.startswith("optim.v.")
        }
        if "optim.steps" in tensors:
            self.steps = int(tensors["optim.steps"][0])


def finite_difference_check(
    fn: Callable[[np.ndarray], float],
    theta: np.ndarray,
    analytic: np.ndarray,
    eps: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between central differences and `analytic`.

    Probes every coordinate of `theta`, or `sample` random ones.  The
    relative error of a pair (a, n) is |a - n| / max(|a| + |n|, 1e-8).
    """
    if theta.shape != analytic.shape:
        raise ValueError("analytic gradient shape must match theta")
    flat = theta.reshape(-1)
    coords = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(flat.size, size=sample, replace=False)
    worst = 0.0
    aflat = analytic.reshape(-1)
    for c in coords:
        keep = flat[c]
        flat[c] = keep + eps
        hi = fn(theta)
        flat[c] = keep - eps
        lo = fn(theta)
        flat[c] = keep
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(aflat[c] - numeric) / max(abs(aflat[c]) + abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst

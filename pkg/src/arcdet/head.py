"""Per-component template scoring, component selection, RoI prediction.

Each mixture component owns class templates (one per class plus
background), a category-agnostic box regressor, and a bias vector.
Scores are inner products with the pooled feature; the component whose
best soft-max probability wins supplies the final label, score and box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CenterBox, RegressionTarget, decode
from .pooling import PooledFeature, pool_roi
from .psmap import ARConfig, PSMapSet

# decoded boxes stay finite for |t| <= this bound; inference clamps
# instead of propagating an invalid-regression failure
TREG_CLAMP = 4.0


@dataclass
class TemplateBank:
    """Per-component parameters: cls (C+1, roles*K, h, w), reg
    (4, roles*K*h*w), bias (C+5,) with class biases first."""

    cls: list[np.ndarray]
    reg: list[np.ndarray]
    bias: list[np.ndarray]

    @classmethod
    def init(
        cls, cfg: ARConfig, rng: np.random.Generator, dtype=np.float32
    ) -> "TemplateBank":
        """Gaussian class templates with variance 2/fan_in; regression rows
        and biases start at zero so refinement begins at the identity map."""
        cls_t, reg_t, bias_t = [], [], []
        for i in range(cfg.n_components):
            shape = cfg.pooled_shape(i)
            fan_in = int(np.prod(shape))
            std = np.sqrt(2.0 / fan_in)
            cls_t.append(
                rng.normal(0.0, std, (cfg.num_classes + 1,) + shape).astype(dtype)
            )
            reg_t.append(np.zeros((4, fan_in), dtype=dtype))
            bias_t.append(np.zeros(cfg.num_classes + 5, dtype=dtype))
        return cls(cls_t, reg_t, bias_t)

    @classmethod
    def zeros(cls, cfg: ARConfig, dtype=np.float32) -> "TemplateBank":
        rng = np.random.default_rng(0)
        bank = cls.init(cfg, rng, dtype)
        for arr in bank.cls + bank.reg + bank.bias:
            arr[:] = 0.0
        return bank

    @property
    def n_components(self) -> int:
        return len(self.cls)

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Live views keyed by checkpoint names (comp{i}.cls/.reg/.bias)."""
        out: dict[str, np.ndarray] = {}
        for i in range(self.n_components):
            out[f"{prefix}comp{i}.cls"] = self.cls[i]
            out[f"{prefix}comp{i}.reg"] = self.reg[i]
            out[f"{prefix}comp{i}.bias"] = self.bias[i]
        return out

    def load_parameters(self, params: dict[str, np.ndarray], prefix: str = "") -> None:
        for i in range(self.n_components):
            self.cls[i] = params[f"{prefix}comp{i}.cls"]
            self.reg[i] = params[f"{prefix}comp{i}.reg"]
            self.bias[i] = params[f"{prefix}comp{i}.bias"]

    def astype(self, dtype) -> "TemplateBank":
        return TemplateBank(
            [a.astype(dtype) for a in self.cls],
            [a.astype(dtype) for a in self.reg],
            [a.astype(dtype) for a in self.bias],
        )


@dataclass
class ComponentScores:
    """One component's view of one RoI: raw scores, probabilities, box offsets."""

    raw: np.ndarray
    prob: np.ndarray
    treg: np.ndarray


@dataclass
class Detection:
    box: CenterBox
    label: int
    score: float
    component: int


def softmax(raw: np.ndarray) -> np.ndarray:
    shifted = raw - raw.max()
    e = np.exp(shifted)
    return e / e.sum()


def score_component(f: PooledFeature, bank: TemplateBank, i: int) -> ComponentScores:
    """Inner-product class scores and box offsets for component i."""
    if f.component != i:
        raise ValueError(f"feature pooled for component {f.component}, scoring {i}")
    cls_t = bank.cls[i]
    if cls_t.shape[1:] != f.values.shape:
        raise ValueError(
            f"template shape {cls_t.shape[1:]} != pooled shape {f.values.shape}"
        )
    n_cls = cls_t.shape[0]
    raw = np.tensordot(cls_t, f.values, axes=3) + bank.bias[i][:n_cls]
    treg = bank.reg[i] @ f.values.reshape(-1) + bank.bias[i][n_cls:]
    return ComponentScores(raw, softmax(raw), treg)


def select_component(scores: list[ComponentScores], include_background: bool = True) -> int:
    """Index of the component with the best class probability; ties to lower."""
    if not scores:
        raise ValueError("need at least one component")
    lo = 0 if include_background else 1
    best = 0
    best_val = -np.inf
    for i, s in enumerate(scores):
        v = float(s.prob[lo:].max())
        if v > best_val:
            best_val = v
            best = i
    return best


def score_all_components(
    maps: PSMapSet, bank: TemplateBank, cfg: ARConfig, b: CenterBox
) -> tuple[list[PooledFeature], list[ComponentScores]]:
    feats = [pool_roi(maps, cfg, b, i) for i in range(cfg.n_components)]
    scores = [score_component(feats[i], bank, i) for i in range(cfg.n_components)]
    return feats, scores


def predict_roi(
    maps: PSMapSet, bank: TemplateBank, cfg: ARConfig, b: CenterBox
) -> Detection:
    """Pool and score all components for one RoI, report the winner's verdict.

    Background verdicts leave the box unrefined; foreground verdicts
    decode the winning component's regression (clamped so exp stays
    finite on untrained banks).
    """
    _, scores = score_all_components(maps, bank, cfg, b)
    star = select_component(scores, cfg.select_with_background)
    win = scores[star]
    label = int(np.argmax(win.prob))
    score = float(win.prob[label])
    if label == 0:
        box = b
    else:
        t = np.clip(win.treg.astype(np.float64), -TREG_CLAMP, TREG_CLAMP)
        box = decode(b, RegressionTarget(*(float(v) for v in t)))
    return Detection(box, label, score, star)


def head_backward(
    f: PooledFeature,
    bank: TemplateBank,
    i: int,
    grad_raw: np.ndarray,
    grad_treg: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of score_component.

    Returns (grad_f, grad_cls, grad_reg, grad_bias) where grad_bias
    stacks the class part before the regression part, mirroring the
    bank's bias layout.
    """
    cls_t = bank.cls[i]
    reg_t = bank.reg[i]
    if grad_raw.shape != (cls_t.shape[0],) or grad_treg.shape != (4,):
        raise ValueError(
            f"upstream shapes {grad_raw.shape}/{grad_treg.shape} do not match head"
        )
    grad_cls = grad_raw[:, None, None, None] * f.values[None, :, :, :]
    grad_reg = np.outer(grad_treg, f.values.reshape(-1))
    grad_f = np.tensordot(grad_raw, cls_t, axes=([0], [0]))
    grad_f = grad_f + (reg_t.T @ grad_treg).reshape(f.values.shape)
    grad_bias = np.concatenate([grad_raw, grad_treg])
    return grad_f, grad_cls, grad_reg, grad_bias

"""Synthetic scenes standing in for backbone features.

Each scene is a low-resolution feature stack plus ground-truth boxes.
Objects write position ramps, an occupancy channel, and a per-class
signature whose strength varies with the within-box coordinates, so a
pooled cell reveals which part of the object it covers.  Two cues live
outside the box itself: a halo of the true class painted around the
object, and flat whole-scene channels carrying the class mix.  Classes
come in confusable pairs whose in-box signatures bleed into each other;
the halo and scene channels are what disambiguate them.

Channel layout for C classes (D = 3 + 3C):
    0        horizontal within-box ramp, weighted by pixel coverage
    1        vertical within-box ramp
    2        coverage (soft occupancy)
    3 .. 3+C-1    in-box class signatures (confusable)
    3+C .. 3+2C-1 class halos around each box
    3+2C .. 3+3C-1 whole-scene class-mix channels
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    CenterBox,
    RegressionTarget,
    ScoredBox,
    encode,
    iou,
    nms,
    to_corner,
)
from .rng import stream


@dataclass(frozen=True)
class DatasetSpec:
    """Knobs of the scene generator and proposal source."""

    image_size: int = 192
    stride: int = 8
    num_classes: int = 3
    # width/height ratio mode per class (cycled when C is larger)
    aspect_modes: tuple[float, ...] = (1.0, 0.4, 2.5)
    aspect_jitter: float = 0.08
    area_lo: float = 2000.0
    area_hi: float = 4000.0
    objects_lo: int = 1
    objects_hi: int = 3
    margin: float = 10.0
    max_pair_iou: float = 0.15
    noise: float = 0.3
    signature_gain: float = 1.0
    confusion: float = 0.6
    ring_gain: float = 1.2
    global_gain: float = 0.6
    theme_bias: float = 0.6
    context_cues: bool = True
    # proposal source
    jitter_center: float = 0.12
    jitter_logsize: float = 0.12
    n_fg: int = 4
    n_bg: int = 4
    tau_rpn: float = 0.7

    def __post_init__(self) -> None:
        if self.image_size < self.stride or self.image_size % self.stride:
            raise ValueError("stride must divide image_size")
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if not self.aspect_modes or any(a <= 0 for a in self.aspect_modes):
            raise ValueError("aspect ratio modes must be positive")
        if not 0 < self.area_lo <= self.area_hi:
            raise ValueError("invalid area range")
        if not 0 <= self.objects_lo <= self.objects_hi:
            raise ValueError("invalid object count range")
        if min(self.noise, self.aspect_jitter, self.signature_gain,
               self.ring_gain, self.global_gain) < 0:
            raise ValueError("gains and noise must be non-negative")
        if not 0 <= self.confusion < 1:
            raise ValueError("confusion must lie in [0,1)")
        if not 0 <= self.theme_bias <= 1:
            raise ValueError("theme_bias must lie in [0,1]")
        if min(self.jitter_center, self.jitter_logsize) < 0:
            raise ValueError("jitter sigmas must be non-negative")
        if min(self.n_fg, self.n_bg) < 0:
            raise ValueError("proposal counts must be non-negative")
        side = self.image_size - 2 * self.margin
        worst = max(max(r, 1 / r) for r in self.aspect_modes)
        if math.sqrt(self.area_hi * worst) * math.exp(3 * self.aspect_jitter) > side:
            raise ValueError("largest boxes cannot fit inside the margins")

    @property
    def feature_channels(self) -> int:
        return 3 + 3 * self.num_classes

    @property
    def map_size(self) -> int:
        return self.image_size // self.stride

    def signature(self, cls: int) -> np.ndarray:
        """In-box signature: own channel 1, paired partner's `confusion`."""
        s = np.zeros(self.num_classes)
        s[cls - 1] = 1.0
        partner = cls + 1 if cls % 2 else cls - 1
        if 1 <= partner <= self.num_classes:
            s[partner - 1] = self.confusion
        return s


@dataclass(frozen=True)
class SyntheticScene:
    features: np.ndarray
    gts: list[tuple[CenterBox, int]]
    seed: int
    index: int
    split: str
    image_size: int

    @property
    def image_id(self) -> str:
        return f"{self.split}{self.index:06d}"


def _sample_box(spec: DatasetSpec, g: np.random.Generator, cls: int) -> CenterBox:
    area = g.uniform(spec.area_lo, spec.area_hi)
    mode = spec.aspect_modes[(cls - 1) % len(spec.aspect_modes)]
    ratio = mode * math.exp(g.normal(0.0, spec.aspect_jitter))
    wd = math.sqrt(area * ratio)
    ht = math.sqrt(area / ratio)
    lo_x = spec.margin + wd / 2
    hi_x = spec.image_size - spec.margin - wd / 2
    lo_y = spec.margin + ht / 2
    hi_y = spec.image_size - spec.margin - ht / 2
    if lo_x > hi_x or lo_y > hi_y:
        raise ValueError("box larger than usable image area")
    return CenterBox(g.uniform(lo_x, hi_x), g.uniform(lo_y, hi_y), wd, ht)


def generate_scene(
    spec: DatasetSpec, seed: int, index: int = 0, split: str = "train"
) -> SyntheticScene:
    """Deterministic scene for (seed, split, index)."""
    g = stream(seed, f"scene.{split}", index)
    n = spec.map_size
    d = spec.feature_channels
    feats = spec.noise * g.normal(size=(d, n, n))

    theme = int(g.integers(1, spec.num_classes + 1))
    n_obj = int(g.integers(spec.objects_lo, spec.objects_hi + 1))
    gts: list[tuple[CenterBox, int]] = []
    for _ in range(n_obj):
        for _ in range(50):
            pick_theme = g.random() < spec.theme_bias
            cls = theme if pick_theme else int(g.integers(1, spec.num_classes + 1))
            box = _sample_box(spec, g, cls)
            bc = to_corner(box)
            if all(iou(bc, to_corner(b)) <= spec.max_pair_iou for b, _ in gts):
                gts.append((box, cls))
                break

    xs = (np.arange(n) + 0.5) * spec.stride
    c = spec.num_classes
    for box, cls in gts:
        bc = to_corner(box)
        # per-axis coverage of each pixel footprint, clipped to [0,1]
        fx = np.clip(
            (np.minimum(bc.x2, xs + spec.stride / 2)
             - np.maximum(bc.x, xs - spec.stride / 2)) / spec.stride,
            0.0, 1.0,
        )
        fy = np.clip(
            (np.minimum(bc.y2, xs + spec.stride / 2)
             - np.maximum(bc.y, xs - spec.stride / 2)) / spec.stride,
            0.0, 1.0,
        )
        cov = fy[:, None] * fx[None, :]
        u = np.clip((xs - bc.x) / box.wd, 0.0, 1.0)[None, :]
        v = np.clip((xs - bc.y) / box.ht, 0.0, 1.0)[:, None]
        feats[0] += cov * u
        feats[1] += cov * v
        feats[2] += cov
        ramp = 0.5 + 0.5 * u + 0.5 * v
        sig = spec.signature_gain * spec.signature(cls)
        for ch in range(c):
            if sig[ch]:
                feats[3 + ch] += sig[ch] * cov * ramp
        if spec.context_cues:
            # halo of the true class just outside the box
            a = np.abs(xs - box.x)[None, :] / (box.wd / 2)
            b = np.abs(xs - box.y)[:, None] / (box.ht / 2)
            q = np.maximum(a, b)
            halo = (q > 1.05) & (q <= 1.45)
            feats[3 + c + cls - 1] += spec.ring_gain * halo
            feats[3 + 2 * c + cls - 1] += spec.global_gain / max(len(gts), 1)

    return SyntheticScene(
        feats.astype(np.float32), gts, seed, index, split, spec.image_size
    )


@dataclass
class ProposalSet:
    """Candidate boxes for the head, already pruned by agnostic NMS."""

    entries: list[ScoredBox]
    targets: list[RegressionTarget | None]
    provenance: str = "synthetic"

    def __len__(self) -> int:
        return len(self.entries)

    def boxes(self) -> list[CenterBox]:
        return [e.box for e in self.entries]


def _label_proposals(
    boxes: list[CenterBox],
    gts: list[tuple[CenterBox, int]],
) -> tuple[list[ScoredBox], list[RegressionTarget | None]]:
    """Fill (l, p) per box: best-IoU class above 0.5, IoU as score."""
    entries: list[ScoredBox] = []
    targets: list[RegressionTarget | None] = []
    gcs = [(to_corner(b), b, cls) for b, cls in gts]
    for box in boxes:
        bc = to_corner(box)
        best_iou, best = 0.0, -1
        for gi, (gc, _, _) in enumerate(gcs):
            v = iou(bc, gc)
            if v > best_iou:
                best_iou, best = v, gi
        if best >= 0 and best_iou >= 0.5:
            _, gbox, cls = gcs[best]
            entries.append(ScoredBox(box, cls, best_iou))
            targets.append(encode(box, gbox))
        else:
            entries.append(ScoredBox(box, 0, best_iou))
            targets.append(None)
    return entries, targets


def proposal_source(
    scene: SyntheticScene,
    rng: np.random.Generator,
    jitter: tuple[float, float],
    n_fg: int,
    n_bg: int,
    tau_rpn: float = 0.7,
) -> ProposalSet:
    """Jittered ground-truth copies plus uniform negatives, NMS-pruned."""
    sig_c, sig_l = jitter
    if sig_c < 0 or sig_l < 0:
        raise ValueError("jitter sigmas must be non-negative")
    size = scene.image_size
    boxes: list[CenterBox] = []
    for gt, _ in scene.gts:
        for _ in range(n_fg):
            dx = rng.normal(0.0, sig_c) * gt.wd
            dy = rng.normal(0.0, sig_c) * gt.ht
            dw = math.exp(rng.normal(0.0, sig_l))
            dh = math.exp(rng.normal(0.0, sig_l))
            cx = min(max(gt.x + dx, 1.0), size - 1.0)
            cy = min(max(gt.y + dy, 1.0), size - 1.0)
            boxes.append(CenterBox(cx, cy, gt.wd * dw, gt.ht * dh))
    for _ in range(n_bg):
        wd = rng.uniform(16.0, size / 2)
        ht = rng.uniform(16.0, size / 2)
        boxes.append(
            CenterBox(rng.uniform(4.0, size - 4.0),
                      rng.uniform(4.0, size - 4.0), wd, ht)
        )
    entries, targets = _label_proposals(boxes, scene.gts)
    keep = nms(entries, tau_rpn)
    return ProposalSet(
        [entries[i] for i in keep], [targets[i] for i in keep], "synthetic"
    )

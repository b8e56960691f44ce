"""Boxes, the regression codec, IoU, NMS, and RoI/ground-truth matching.

Two box conventions coexist on purpose.  `CenterBox` carries (center x,
center y, width, height) and is the currency of proposals, regression
and detections; `CornerBox` carries (left, top, width, height) and is
the currency of pooling regions.  Conversions are explicit; nothing
coerces silently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class InvalidRegressionError(ValueError):
    """Decoding a regression target produced a non-finite or empty box."""


class DataFileError(ValueError):
    """A detection/ground-truth text file is malformed."""


def _check_size(wd: float, ht: float) -> None:
    if not (math.isfinite(wd) and math.isfinite(ht) and wd > 0 and ht > 0):
        raise ValueError(f"box size must be positive and finite, got {wd} x {ht}")


@dataclass(frozen=True)
class CornerBox:
    """Box as (left, top, width, height)."""

    x: float
    y: float
    wd: float
    ht: float

    def __post_init__(self) -> None:
        _check_size(self.wd, self.ht)
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("box coordinates must be finite")

    @property
    def x2(self) -> float:
        return self.x + self.wd

    @property
    def y2(self) -> float:
        return self.y + self.ht

    def area(self) -> float:
        return self.wd * self.ht


@dataclass(frozen=True)
class CenterBox:
    """Box as (center x, center y, width, height)."""

    x: float
    y: float
    wd: float
    ht: float

    def __post_init__(self) -> None:
        _check_size(self.wd, self.ht)
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("box coordinates must be finite")

    def area(self) -> float:
        return self.wd * self.ht


@dataclass(frozen=True)
class RegressionTarget:
    """Box offsets: center shifts relative to size, log-scale size factors."""

    tx: float
    ty: float
    twd: float
    tht: float

    def __post_init__(self) -> None:
        vals = (self.tx, self.ty, self.twd, self.tht)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("regression target must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.twd, self.tht], dtype=np.float64)


@dataclass(frozen=True)
class ScoredBox:
    """A proposal or detection candidate: box, class label, probability."""

    box: CenterBox
    label: int
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0,1], got {self.score}")
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")


def to_corner(b: CenterBox) -> CornerBox:
    """Convert a center-convention box to corner convention."""
    return CornerBox(b.x - b.wd / 2.0, b.y - b.ht / 2.0, b.wd, b.ht)


def to_center(b: CornerBox) -> CenterBox:
    """Convert a corner-convention box to center convention."""
    return CenterBox(b.x + b.wd / 2.0, b.y + b.ht / 2.0, b.wd, b.ht)


def iou(a: CornerBox, b: CornerBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    # cancellation in the union can push the ratio past 1 by a few ulp
    return min(1.0, inter / (a.area() + b.area() - inter))


def decode(b: CenterBox, t: RegressionTarget) -> CenterBox:
    """Apply a regression target to a box.

    Center moves by the offset times the box size; width and height are
    scaled by the exponential of the log-scale factors.
    """
    try:
        wd = b.wd * math.exp(t.twd)
        ht = b.ht * math.exp(t.tht)
    except OverflowError as exc:
        raise InvalidRegressionError(f"size factor overflow: {t}") from exc
    x = t.tx * b.wd + b.x
    y = t.ty * b.ht + b.y
    if not (wd > 0 and ht > 0 and math.isfinite(wd) and math.isfinite(ht)):
        raise InvalidRegressionError(f"decoded size degenerate: {wd} x {ht}")
    return CenterBox(x, y, wd, ht)


def encode(b: CenterBox, g: CenterBox) -> RegressionTarget:
    """Regression target that moves box ``b`` onto box ``g``; inverse of decode."""
    return RegressionTarget(
        (g.x - b.x) / b.wd,
        (g.y - b.y) / b.ht,
        math.log(g.wd / b.wd),
        math.log(g.ht / b.ht),
    )


def enlarge(b: CornerBox, factor: float) -> CornerBox:
    """Scale a box about its own center; the result contains the original."""
    if factor < 1.0:
        raise ValueError(f"enlargement factor must be >= 1, got {factor}")
    wd = b.wd * factor
    ht = b.ht * factor
    return CornerBox(b.x + (b.wd - wd) / 2.0, b.y + (b.ht - ht) / 2.0, wd, ht)


def nms(dets: Sequence[ScoredBox], tau: float) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited in descending score order (equal scores: lower
    input index first).  A box is suppressed when its IoU with an
    already kept box reaches ``tau``, so any two kept boxes overlap
    strictly below the threshold.  Returns kept indices in pick order.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"NMS threshold must lie in (0,1], got {tau}")
    n = len(dets)
    if n == 0:
        return []
    x1 = np.empty(n)
    y1 = np.empty(n)
    x2 = np.empty(n)
    y2 = np.empty(n)
    scores = np.empty(n)
    for i, d in enumerate(dets):
        c = to_corner(d.box)
        x1[i], y1[i], x2[i], y2[i] = c.x, c.y, c.x2, c.y2
        scores[i] = d.score
    areas = (x2 - x1) * (y2 - y1)
    # stable sort on negated scores: ties resolve to the lower index
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        rest = order[1:]
        ix = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        iy = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.maximum(ix, 0.0) * np.maximum(iy, 0.0)
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr < tau]
    return keep


def match_rois(
    proposals: Sequence[CenterBox],
    gts: Sequence[tuple[CenterBox, int]],
    fg_iou: float = 0.5,
) -> list[tuple[int, RegressionTarget | None]]:
    """Assign a training label and regression target to each proposal.

    Each proposal is matched to its highest-IoU ground truth (ties to
    the lower gt index).  At or above ``fg_iou`` the proposal becomes a
    foreground sample of that gt's class with the encoding of the gt as
    target; below it the proposal is background (label 0, no target).
    """
    out: list[tuple[int, RegressionTarget | None]] = []
    gt_corners = [to_corner(g) for g, _ in gts]
    for p in proposals:
        pc = to_corner(p)
        best_iou = 0.0
        best = -1
        for gi, gc in enumerate(gt_corners):
            v = iou(pc, gc)
            if v > best_iou:
                best_iou = v
                best = gi
        if best >= 0 and best_iou >= fg_iou:
            gbox, glabel = gts[best]
            out.append((glabel, encode(p, gbox)))
        else:
            out.append((0, None))
    return out


def format_quantity(v: float) -> str:
    """Render a number in decimal notation with 6 significant digits."""
    return np.format_float_positional(
        float(v), precision=6, unique=False, fractional=False
    ).rstrip(".")


# Detection record: (image_id, class_id, score, box).
DetectionRecord = tuple[str, int, float, CenterBox]


def format_detection_line(rec: DetectionRecord) -> str:
    image_id, class_id, score, box = rec
    fields = [image_id, str(int(class_id))]
    fields += [format_quantity(v) for v in (score, box.x, box.y, box.wd, box.ht)]
    return " ".join(fields)


def write_detections(path: str, records: Sequence[DetectionRecord]) -> None:
    """Write detection records, one `image_id class_id score cx cy wd ht` line each."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for rec in records:
            fh.write(format_detection_line(rec) + "\n")


def read_detections(path: str) -> list[DetectionRecord]:
    """Parse a detection file; malformed lines are reported with their number."""
    records: list[DetectionRecord] = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7:
                raise DataFileError(
                    f"{path}:{lineno}: expected 7 fields, got {len(parts)}"
                )
            try:
                class_id = int(parts[1])
                score = float(parts[2])
                cx, cy, wd, ht = (float(p) for p in parts[3:7])
                box = CenterBox(cx, cy, wd, ht)
                if not 0.0 <= score <= 1.0:
                    raise ValueError(f"score out of range: {score}")
            except ValueError as exc:
                raise DataFileError(f"{path}:{lineno}: {exc}") from exc
            records.append((parts[0], class_id, score, box))
    return records

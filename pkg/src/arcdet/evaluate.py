"""Average-precision evaluation of detection files.

Matching is greedy per image and class: detections in descending score
order claim the unmatched ground truth with the highest IoU at or above
the threshold; duplicate hits on an already claimed ground truth count
as false positives.  Ranking across images orders by descending score
with ties broken by image id and per-image arrival order, so shuffling
input lines never changes a result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import CenterBox, DetectionRecord, iou, read_detections, to_corner

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class EvalResult:
    """APs keyed by (class, threshold), mAPs by threshold, hit counts."""

    ap: dict[tuple[int, float], float]
    map_at: dict[float, float]
    counts: dict[float, tuple[int, int, int]]
    coco_ap: float | None = None
    num_classes: int = 0


def match_detections(
    dets: Sequence[tuple[float, CenterBox]],
    gts: Sequence[CenterBox],
    tau: float,
) -> list[bool]:
    """True/false-positive flags for pre-sorted same-class detections."""
    taken = [False] * len(gts)
    gt_corners = [to_corner(g) for g in gts]
    flags = []
    for _, box in dets:
        c = to_corner(box)
        best = -1
        best_iou = 0.0
        for gi, gc in enumerate(gt_corners):
            if taken[gi]:
                continue
            v = iou(c, gc)
            if v > best_iou:
                best_iou = v
                best = gi
        hit = best >= 0 and best_iou >= tau
        if hit:
            taken[best] = True
        flags.append(hit)
    return flags


def average_precision(
    flags: Sequence[bool], n_gt: int, eleven_point: bool = False
) -> float:
    """Area under the interpolated precision-recall curve."""
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    if n_gt == 0 or len(flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / n_gt
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if eleven_point:
        levels = np.linspace(0.0, 1.0, 11)
        vals = []
        for r in levels:
            mask = recall >= r - 1e-12
            vals.append(float(envelope[mask][0]) if mask.any() else 0.0)
        return float(np.mean(vals))
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(envelope * steps))


GtRecord = tuple[str, int, CenterBox]


def evaluate(
    dets: Sequence[DetectionRecord],
    gts: Sequence[GtRecord],
    thresholds: Sequence[float],
    num_classes: int | None = None,
    coco: bool = False,
    eleven_point: bool = False,
) -> EvalResult:
    """Per-class AP at each threshold plus mAPs and TP/FP/miss counts."""
    if num_classes is None:
        cands = [c for _, c, *_ in list(dets) + list(gts)]
        num_classes = max(cands) if cands else 0
    taus = list(thresholds) + (list(COCO_THRESHOLDS) if coco else [])
    taus = sorted(set(taus))

    gt_by_cls_img: dict[int, dict[str, list[CenterBox]]] = {}
    n_gt_by_cls: dict[int, int] = {}
    for img, cls, box in gts:
        gt_by_cls_img.setdefault(cls, {}).setdefault(img, []).append(box)
        n_gt_by_cls[cls] = n_gt_by_cls.get(cls, 0) + 1
    det_by_cls_img: dict[int, dict[str, list[tuple[float, int, CenterBox]]]] = {}
    for order, (img, cls, score, box) in enumerate(dets):
        det_by_cls_img.setdefault(cls, {}).setdefault(img, []).append(
            (score, order, box)
        )

    ap: dict[tuple[int, float], float] = {}
    counts: dict[float, list[int]] = {t: [0, 0, 0] for t in taus}
    for tau in taus:
        for cls in range(1, num_classes + 1):
            ranked: list[tuple[float, str, int, bool]] = []
            per_img = det_by_cls_img.get(cls, {})
            for img in per_img:
                cand = sorted(per_img[img], key=lambda t: (-t[0], t[1]))
                flags = match_detections(
                    [(s, b) for s, _, b in cand],
                    gt_by_cls_img.get(cls, {}).get(img, []),
                    tau,
                )
                ranked += [
                    (s, img, order, f)
                    for (s, order, _), f in zip(cand, flags)
                ]
            ranked.sort(key=lambda t: (-t[0], t[1], t[2]))
            flags = [f for *_, f in ranked]
            n_gt = n_gt_by_cls.get(cls, 0)
            ap[(cls, tau)] = average_precision(flags, n_gt, eleven_point)
            tp = sum(flags)
            counts[tau][0] += tp
            counts[tau][1] += len(flags) - tp
            counts[tau][2] += n_gt - tp

    map_at = {
        t: float(np.mean([ap[(c, t)] for c in range(1, num_classes + 1)]))
        if num_classes
        else 0.0
        for t in taus
    }
    coco_ap = (
        float(np.mean([map_at[t] for t in COCO_THRESHOLDS])) if coco else None
    )
    return EvalResult(
        ap={k: v for k, v in ap.items() if k[1] in thresholds or coco},
        map_at=map_at,
        counts={t: tuple(v) for t, v in counts.items()},
        coco_ap=coco_ap,
        num_classes=num_classes,
    )


def evaluate_files(
    dets_path: str,
    gts_path: str,
    thresholds: Sequence[float],
    num_classes: int | None = None,
    coco: bool = False,
    eleven_point: bool = False,
) -> EvalResult:
    dets = read_detections(dets_path)
    gts = [(img, cls, box) for img, cls, _, box in read_detections(gts_path)]
    return evaluate(dets, gts, thresholds, num_classes, coco, eleven_point)


def format_metrics(result: EvalResult) -> str:
    """Machine-readable lines: `class threshold AP`, then `mAP threshold value`."""
    lines = []
    for (cls, tau), v in sorted(result.ap.items()):
        lines.append(f"{cls} {tau:g} {v:.6f}")
    for tau in sorted(result.map_at):
        lines.append(f"mAP {tau:g} {result.map_at[tau]:.6f}")
    if result.coco_ap is not None:
        lines.append(f"mAP coco {result.coco_ap:.6f}")
    return "\n".join(lines) + "\n"


def format_table(result: EvalResult) -> str:
    """Human-readable per-class AP table."""
    taus = sorted(result.map_at)
    head = "class " + " ".join(f"AP@{t:g}".rjust(8) for t in taus)
    rows = [head, "-" * len(head)]
    for cls in range(1, result.num_classes + 1):
        cells = " ".join(
            f"{result.ap.get((cls, t), float('nan')):8.4f}" for t in taus
        )
        rows.append(f"{cls:5d} {cells}")
    rows.append(
        "  mAP " + " ".join(f"{result.map_at[t]:8.4f}" for t in taus)
    )
    if result.coco_ap is not None:
        rows.append(f"coco AP {result.coco_ap:.4f}")
    return "\n".join(rows) + "\n"


def write_metrics(path: str, result: EvalResult) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(format_metrics(result))

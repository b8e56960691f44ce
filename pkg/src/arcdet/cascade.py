"""Multi-stage detection and the training loop.

All stages share one feature projection; each stage owns a template
bank.  Stage k+1 consumes stage k's regressed boxes after background
drop, class-agnostic NMS, and a recall-friendly score floor.  Training
runs the stages in sequence: the first stage learns the projection and
its bank from synthetic proposals, later stages keep the projection
frozen and learn their banks on the previous stage's detections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointError, load_tensors, save_tensors
from .geometry import CenterBox, ScoredBox, match_rois, nms
from .head import (
    Detection,
    TemplateBank,
    head_backward,
    predict_roi,
    score_all_components,
)
from .loss_optim import SGD, LossReport, RoISample, multi_task_loss
from .pooling import pool_backward
from .psmap import ARConfig, ProjectionWeights, project, project_backward
from .rng import stream
from .synth import DatasetSpec, ProposalSet, generate_scene, proposal_source


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class Schedule:
    """Optimizer settings and per-stage step counts."""

    lr: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 0.0005
    reg_weight: float = 1.0
    ohem: int = 128
    stage_steps: tuple[int, ...] = (1200, 600)
    lr_drop_frac: float = 0.75
    lr_drop_factor: float = 0.1
    log_every: int = 20

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0,1)")
        if self.weight_decay < 0 or self.reg_weight < 0:
            raise ValueError("weights must be non-negative")
        if self.ohem < 1:
            raise ValueError("ohem must keep at least one sample")
        if any(s < 0 for s in self.stage_steps):
            raise ValueError("step counts must be non-negative")
        if not 0 <= self.lr_drop_frac <= 1 or not 0 < self.lr_drop_factor <= 1:
            raise ValueError("invalid learning-rate drop")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")

    def steps_for(self, stage: int) -> int:
        if not self.stage_steps:
            return 0
        return self.stage_steps[min(stage, len(self.stage_steps) - 1)]

    def lr_at(self, stage: int, step: int) -> float:
        steps = self.steps_for(stage)
        dropped = steps and step >= self.lr_drop_frac * steps
        return self.lr * (self.lr_drop_factor if dropped else 1.0)


@dataclass
class TrainState:
    stage: int = 0
    step: int = 0
    global_step: int = 0


@dataclass
class CascadeModel:
    """Shared projection plus one template bank per stage."""

    cfg: ARConfig
    feature_channels: int
    proj: ProjectionWeights
    banks: list[TemplateBank]

    @classmethod
    def init(
        cls, cfg: ARConfig, feature_channels: int, seed: int, stages: int = 2
    ) -> "CascadeModel":
        if stages < 1:
            raise ValueError("need at least one stage")
        proj = ProjectionWeights.init(cfg, feature_channels, stream(seed, "init.proj"))
        banks = [
            TemplateBank.init(cfg, stream(seed, "init.bank", s)) for s in range(stages)
        ]
        return cls(cfg, feature_channels, proj, banks)

    @property
    def stages(self) -> int:
        return len(self.banks)

    def parameters(self) -> dict[str, np.ndarray]:
        out = dict(self.proj.parameters())
        for s, bank in enumerate(self.banks):
            out.update(bank.parameters(f"stage{s}."))
        return out

    def trainable_parameters(self, stage: int) -> dict[str, np.ndarray]:
        """Stage 0 trains the projection too; later stages freeze it."""
        out = dict(self.proj.parameters()) if stage == 0 else {}
        out.update(self.banks[stage].parameters(f"stage{stage}."))
        return out

    def save(self, path: str, extra: dict[str, np.ndarray] | None = None) -> None:
        tensors = dict(self.parameters())
        tensors["meta.feature_channels"] = np.array(
            [self.feature_channels], dtype=np.float32
        )
        tensors["meta.stages"] = np.array([self.stages], dtype=np.float32)
        if extra:
            tensors.update(extra)
        save_tensors(path, tensors)

    @classmethod
    def load(cls, path: str, cfg: ARConfig) -> tuple["CascadeModel", dict[str, np.ndarray]]:
        """Rebuild a model; returns it plus any non-model tensors."""
        tensors = load_tensors(path)
        for key in ("meta.feature_channels", "meta.stages"):
            if key not in tensors:
                raise CheckpointError(f"checkpoint lacks {key}")
        d = int(tensors["meta.feature_channels"][0])
        stages = int(tensors["meta.stages"][0])
        model = cls.init(cfg, d, 0, stages)
        want = model.parameters()
        for name, ref in want.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor {name!r}")
            if tensors[name].shape != ref.shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {tensors[name].shape}, "
                    f"config expects {ref.shape}"
                )
        model.proj.load_parameters(tensors)
        for s, bank in enumerate(model.banks):
            bank.load_parameters(tensors, f"stage{s}.")
        extra = {
            k: v
            for k, v in tensors.items()
            if k not in want and not k.startswith("meta.")
        }
        return model, extra


def keep_high_recall(
    dets: list[Detection],
    p_keep: float = 0.01,
    tau_cascade: float = 0.7,
    provenance: str = "stage1",
    keep_background: bool = False,
) -> ProposalSet:
    """Detections to next-stage proposals, erring on the side of recall.

    Background verdicts are dropped unless keep_background is set (the
    training path keeps them so later stages still see negatives);
    survivors pass class-agnostic NMS and a low score floor.  Boxes
    arrive already regressed.
    """
    scored = [
        ScoredBox(d.box, d.label, d.score)
        for d in dets
        if keep_background or d.label >= 1
    ]
    keep = nms(scored, tau_cascade) if scored else []
    entries = [scored[i] for i in keep if scored[i].score >= p_keep]
    return ProposalSet(entries, [None] * len(entries), provenance)


def _clip_detection(d: Detection, width: float, height: float) -> Detection | None:
    """Clip a refined box to the image; None when nothing usable is left."""
    x0 = max(0.0, d.box.x - d.box.wd / 2)
    y0 = max(0.0, d.box.y - d.box.ht / 2)
    x1 = min(width, d.box.x + d.box.wd / 2)
    y1 = min(height, d.box.y + d.box.ht / 2)
    if x1 - x0 < 1.0 or y1 - y0 < 1.0:
        return None
    box = CenterBox((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)
    return Detection(box, d.label, d.score, d.component)


def _cascade_rois(
    maps,
    model: CascadeModel,
    props: ProposalSet,
    n_stages: int,
    p_keep: float,
    tau_cascade: float,
) -> tuple[ProposalSet, list[Detection]]:
    """Run the first n_stages; returns the last stage's input and output."""
    first = next(iter(maps.maps.values()))
    height, width = (
        first.shape[-2] * model.cfg.stride,
        first.shape[-1] * model.cfg.stride,
    )
    dets: list[Detection] = []
    for s in range(n_stages):
        if s > 0:
            props = keep_high_recall(dets, p_keep, tau_cascade, f"stage{s}")
        if not props.entries:
            return props, []
        raw = [
            predict_roi(maps, model.banks[s], model.cfg, e.box)
            for e in props.entries
        ]
        dets = [d for d in (_clip_detection(r, width, height) for r in raw) if d]
    return props, dets


def cascade_detect(
    features: np.ndarray,
    model: CascadeModel,
    proposals: ProposalSet,
    stage_count: int | None = None,
    p_keep: float = 0.01,
    tau_cascade: float = 0.7,
    nms_final: float = 0.3,
    score_floor: float = 0.05,
) -> list[Detection]:
    """Refine proposals through the stage chain, then filter per class."""
    n_stages = model.stages if stage_count is None else stage_count
    if not 1 <= n_stages <= model.stages:
        raise ValueError(f"stage_count must lie in [1,{model.stages}]")
    maps = project(features, model.proj, model.cfg)
    _, dets = _cascade_rois(maps, model, proposals, n_stages, p_keep, tau_cascade)
    out: list[Detection] = []
    for cls in range(1, model.cfg.num_classes + 1):
        cand = [d for d in dets if d.label == cls and d.score >= score_floor]
        keep = nms([ScoredBox(d.box, d.label, d.score) for d in cand], nms_final)
        out.extend(cand[i] for i in keep)
    return out


@dataclass
class TrainItem:
    """One scene's contribution to a step: features plus labeled RoIs."""

    features: np.ndarray
    rois: list[tuple[CenterBox, int, np.ndarray | None]]


def batch_gradients(
    model: CascadeModel,
    stage: int,
    items: list[TrainItem],
    reg_weight: float = 1.0,
    ohem_n: int | None = None,
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Loss and analytic parameter gradients for one optimizer step.

    Gradients cover exactly the stage's trainable parameters: the
    template bank, plus the projection when stage is 0.
    """
    cfg = model.cfg
    bank = model.banks[stage]
    train_proj = stage == 0
    samples: list[RoISample] = []
    per_item: list[tuple[np.ndarray, object, list]] = []
    for item in items:
        maps = project(item.features, model.proj, cfg)
        feats_list = []
        for box, label, target in item.rois:
            feats, scores = score_all_components(maps, bank, cfg, box)
            samples.append(RoISample(feats, scores, label, target))
            feats_list.append(feats)
        per_item.append((item.features, maps, feats_list))
    if not samples:
        raise ValueError("no RoIs in batch")
    report, roi_grads = multi_task_loss(samples, reg_weight, ohem_n)
    selected = set(report.selected)

    grads = {
        name: np.zeros_like(p)
        for name, p in model.trainable_parameters(stage).items()
    }
    pre = f"stage{stage}."
    roi_cursor = 0
    for features, maps, feats_list in per_item:
        grad_maps = {
            key: np.zeros_like(maps.maps[key]) for key in cfg.map_keys
        }
        touched = False
        for feats in feats_list:
            j = roi_cursor
            roi_cursor += 1
            if j not in selected:
                continue
            touched = True
            for i in range(cfg.n_components):
                g_raw, g_treg = roi_grads[j][i]
                gf, g_cls, g_reg, g_bias = head_backward(
                    feats[i], bank, i, g_raw, g_treg
                )
                grads[f"{pre}comp{i}.cls"] += g_cls
                grads[f"{pre}comp{i}.reg"] += g_reg
                grads[f"{pre}comp{i}.bias"] += g_bias
                pool_backward(feats[i], gf, cfg, grad_maps)
        if train_proj and touched:
            _, gw, gb = project_backward(grad_maps, features, model.proj, cfg)
            for key in cfg.map_keys:
                i, role = key
                grads[f"proj{i}.{role}.w"] += gw[key]
                grads[f"proj{i}.{role}.b"] += gb[key]
    return report, grads


def train_multistage(
    spec: DatasetSpec,
    cfg: ARConfig,
    sched: Schedule,
    seed: int,
    n_train: int,
    stages: int = 2,
    warm_start: bool = True,
    p_keep: float = 0.01,
    tau_cascade: float = 0.7,
    log=None,
    on_batch=None,
    model: CascadeModel | None = None,
    optimizer: SGD | None = None,
    state: TrainState | None = None,
    stop_after: int | None = None,
) -> tuple[CascadeModel, SGD, TrainState]:
    """Sequentially train each stage; deterministic given (spec, seed).

    The proposal regeneration between stages is the identity here: the
    synthetic source depends only on (seed, scene index), so stage two
    rebuilds stage-one detections from the same proposals rather than
    from a retrained proposal network.
    """
    if n_train < 1:
        raise ValueError("n_train must be positive")
    if model is None:
        model = CascadeModel.init(cfg, spec.feature_channels, seed, stages)
    if optimizer is None:
        optimizer = SGD(sched.lr, sched.momentum, sched.weight_decay)
    if state is None:
        state = TrainState()

    while state.stage < model.stages:
        s = state.stage
        steps = sched.steps_for(s)
        if s >= 1 and warm_start and state.step == 0:
            for prev, cur in zip(
                model.banks[s - 1].parameters().values(),
                model.banks[s].parameters().values(),
            ):
                cur[:] = prev
        while state.step < steps:
            if stop_after is not None and state.global_step >= stop_after:
                return model, optimizer, state
            step = state.step
            idx = step % n_train
            scene = generate_scene(spec, seed, idx, "train")
            props = proposal_source(
                scene,
                stream(seed, "prop.train", idx),
                (spec.jitter_center, spec.jitter_logsize),
                spec.n_fg,
                spec.n_bg,
                spec.tau_rpn,
            )
            if s > 0:
                maps = project(scene.features, model.proj, cfg)
                _, dets = _cascade_rois(maps, model, props, s, p_keep, tau_cascade)
                props = keep_high_recall(
                    dets, p_keep, tau_cascade, f"stage{s}", keep_background=True
                )
            if on_batch is not None:
                on_batch(s, step, props)
            state.step += 1
            state.global_step += 1
            if not props.entries:
                continue
            matches = match_rois(props.boxes(), scene.gts)
            rois = [
                (box, label, target.as_array() if target else None)
                for box, (label, target) in zip(props.boxes(), matches)
            ]
            optimizer.lr = sched.lr_at(s, step)
            report, grads = batch_gradients(
                model,
                s,
                [TrainItem(scene.features, rois)],
                sched.reg_weight,
                ohem_n=min(sched.ohem, len(rois)),
            )
            if not math.isfinite(report.total):
                raise TrainingDivergedError(
                    f"non-finite loss at stage {s} step {step}"
                )
            optimizer.step(model.trainable_parameters(s), grads)
            if log is not None and (
                step % sched.log_every == 0 or step == steps - 1
            ):
                log(
                    f"{state.global_step} {optimizer.lr:.6f} "
                    f"{report.l_cls:.6f} {report.l_reg:.6f} {report.total:.6f}"
                )
        state.stage += 1
        state.step = 0
    return model, optimizer, state


def detect_dataset(
    spec: DatasetSpec,
    model: CascadeModel,
    seed: int,
    indices: list[int],
    split: str = "test",
    stage_count: int | None = None,
    p_keep: float = 0.01,
    tau_cascade: float = 0.7,
    nms_final: float = 0.3,
    score_floor: float = 0.05,
) -> tuple[list, list]:
    """Detections and ground-truth records over the given scene indices."""
    det_records = []
    gt_records = []
    for idx in indices:
        scene = generate_scene(spec, seed, idx, split)
        props = proposal_source(
            scene,
            stream(seed, f"prop.{split}", idx),
            (spec.jitter_center, spec.jitter_logsize),
            spec.n_fg,
            spec.n_bg,
            spec.tau_rpn,
        )
        dets = cascade_detect(
            scene.features, model, props, stage_count,
            p_keep, tau_cascade, nms_final, score_floor,
        )
        det_records += [
            (scene.image_id, d.label, d.score, d.box) for d in dets
        ]
        gt_records += [
            (scene.image_id, cls, box) for box, cls in scene.gts
        ]
    return det_records, gt_records

"""Command-line entry point: synth, train, detect, eval, gradcheck, ablate.

Every command is deterministic given (config, seed) and copies the
exact config it ran with into its output directory.  Exit codes: 0
success, 1 usage or configuration error, 2 broken or missing data,
3 numerical failure (divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import multiprocessing
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .cascade import (
    CascadeModel,
    TrainingDivergedError,
    TrainItem,
    batch_gradients,
    detect_dataset,
    train_multistage,
    TrainState,
)
from .checkpoint import CheckpointError, save_tensors
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    default_config,
    parse_config,
    serialize_config,
)
from .evaluate import evaluate, format_metrics, format_table, read_detections
from .geometry import DataFileError, match_rois, write_detections
from .loss_optim import SGD, finite_difference_check
from .rng import stream
from .synth import generate_scene, proposal_source

# aspect-ratio sweep variants, smallest to largest mixture
BRANCH_SETS = {
    "a": ((7, 7),),
    "b": ((7, 7), (5, 10), (10, 5)),
    "c": ((7, 7), (5, 10), (10, 5), (3, 12), (12, 3)),
    "d": ((7, 7), (5, 10), (10, 5), (4, 12), (12, 4), (3, 12), (12, 3)),
    "e": (
        (7, 7), (5, 10), (10, 5), (4, 12), (12, 4),
        (3, 12), (12, 3), (3, 15), (15, 3),
    ),
}
CONTEXT_MODES = ("none", "global", "local_global")


class UsageError(Exception):
    """Bad flags or an unusable configuration; exits with code 1."""


class DataError(Exception):
    """Missing or inconsistent data on disk; exits with code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="config file; defaults applied underneath")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="config override, repeatable (wins over the file)",
    )
    p.add_argument("--seed", type=int, help="overrides run.seed and ARC_SEED")
    if out:
        p.add_argument("--out", help="output directory (overrides run.out)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arcdet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    _add_common(p)
    p.add_argument("--force", action="store_true",
                   help="replace an existing dataset directory")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the cascade on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--resume", action="store_true",
                   help="continue from <out>/checkpoint.ckpt")
    p.add_argument("--stop-after", type=int, default=None, metavar="N",
                   help="pause once N optimizer steps have run in total")
    p.add_argument("--quiet", action="store_true",
                   help="log to file only, not stdout")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run the cascade over a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--stages", type=int, default=None,
                   help="run only the first N cascade stages")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score a detections file against ground truth")
    _add_common(p)
    p.add_argument("--dets", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--thresholds", help="comma list, e.g. 0.5,0.7 "
                   "(default: run.thresholds)")
    p.add_argument("--classes", type=int, default=None,
                   help="class count (default: inferred from the files)")
    p.add_argument("--coco", action="store_true",
                   help="also average AP over IoU 0.5:0.05:0.95")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference probe of the analytic gradients")
    _add_common(p, out=False)
    p.add_argument("--samples", type=int, default=4,
                   help="probed coordinates per parameter block")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score a sweep along one axis")
    _add_common(p)
    p.add_argument("--axis", required=True,
                   choices=("aspect_ratios", "context", "stages"))
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def _load_config(args) -> RunConfig:
    cfg = default_config()
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="ascii")
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        cfg = parse_config(text, cfg)
    cfg = apply_overrides(cfg, args.set)
    env = os.environ.get("ARC_SEED")
    if env is not None:
        cfg = apply_overrides(cfg, [f"run.seed={env}"])
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"run.seed={args.seed}"])
    if getattr(args, "out", None):
        cfg = apply_overrides(cfg, [f"run.out={args.out}"])
    return cfg


def _write_config(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(
        serialize_config(cfg), encoding="ascii", newline="\n"
    )


def _check_workers(n: int) -> int:
    if n < 1:
        raise UsageError("--workers must be at least 1")
    return n


def _chunked(indices: list[int], size: int = 25) -> list[list[int]]:
    return [indices[i : i + size] for i in range(0, len(indices), size)]


# Fork-shared context for worker pools; set right before the fork.
_POOL_CTX: dict = {}


def _map_chunks(worker, chunks: list, workers: int) -> list:
    """Order-preserving map; output is workers-count independent."""
    if workers == 1 or len(chunks) <= 1:
        return [worker(c) for c in chunks]
    with multiprocessing.get_context("fork").Pool(workers) as pool:
        return pool.map(worker, chunks)


def _synth_chunk(task):
    split, indices = task
    cfg: RunConfig = _POOL_CTX["cfg"]
    root: Path = _POOL_CTX["root"]
    gt_lines = []
    for idx in indices:
        scene = generate_scene(cfg.dataset, cfg.run.seed, idx, split)
        save_tensors(
            str(root / split / f"scene{idx:06d}.ckpt"),
            {"features": scene.features},
        )
        gt_lines += [
            (scene.image_id, cls, 1.0, box) for box, cls in scene.gts
        ]
    return gt_lines


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    workers = _check_workers(args.workers)
    root = Path(cfg.run.out)
    if root.exists() and any(root.iterdir()):
        if not args.force:
            raise DataError(
                f"{root} already exists; pass --force to replace it"
            )
        shutil.rmtree(root)
    _write_config(root, cfg)

    for split, count in (("train", cfg.run.n_train), ("test", cfg.run.n_test)):
        if count == 0:
            continue
        (root / split).mkdir()
        _POOL_CTX.update(cfg=cfg, root=root)
        tasks = [(split, c) for c in _chunked(list(range(count)))]
        gt_lines = [
            line for chunk in _map_chunks(_synth_chunk, tasks, workers)
            for line in chunk
        ]
        write_detections(str(root / split / "gts.txt"), gt_lines)

    listed = sorted(
        p.relative_to(root).as_posix()
        for p in root.rglob("*")
        if p.is_file() and p.name not in ("config.cfg", "manifest.txt")
    )
    with open(root / "manifest.txt", "w", encoding="ascii", newline="\n") as fh:
        for rel in listed:
            digest = hashlib.sha256((root / rel).read_bytes()).hexdigest()
            fh.write(f"{digest}  {rel}\n")
    print(f"wrote {len(listed)} files to {root}")
    return 0


def _check_dataset(data: str, cfg: RunConfig) -> Path:
    root = Path(data)
    if not (root / "manifest.txt").is_file():
        raise DataError(f"{data} is not a dataset directory (no manifest.txt)")
    stored = parse_config((root / "config.cfg").read_text(encoding="ascii"))
    if stored.dataset != cfg.dataset:
        raise DataError(
            f"{data} was synthesized with a different [dataset] block; "
            f"try --config {root / 'config.cfg'}"
        )
    want = (stored.run.seed, stored.run.n_train, stored.run.n_test)
    have = (cfg.run.seed, cfg.run.n_train, cfg.run.n_test)
    if want != have:
        raise DataError(
            f"{data} holds (seed, n_train, n_test)={want}, config says {have}; "
            f"try --config {root / 'config.cfg'}"
        )
    return root


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg.run.n_train < 1:
        raise UsageError("run.n_train must be positive to train")
    _check_dataset(args.data, cfg)
    out = Path(cfg.run.out)
    _write_config(out, cfg)
    ckpt = out / "checkpoint.ckpt"

    model = optimizer = state = None
    log_mode = "w"
    if args.resume:
        model, extra = CascadeModel.load(str(ckpt), cfg.model)
        if "train.state" not in extra:
            raise CheckpointError(f"{ckpt} carries no training state")
        optimizer = SGD(cfg.schedule.lr, cfg.schedule.momentum,
                        cfg.schedule.weight_decay)
        optimizer.load_state(extra)
        state = TrainState(*(int(v) for v in extra["train.state"]))
        log_mode = "a"

    with open(out / "train.log", log_mode, encoding="ascii", newline="\n") as fh:
        def log(line: str) -> None:
            fh.write(line + "\n")
            if not args.quiet:
                print(line)

        model, optimizer, state = train_multistage(
            cfg.dataset, cfg.model, cfg.schedule, cfg.run.seed,
            n_train=cfg.run.n_train, stages=cfg.run.stages, log=log,
            model=model, optimizer=optimizer, state=state,
            stop_after=args.stop_after,
        )

    extra = optimizer.state_tensors()
    extra["train.state"] = np.array(
        [state.stage, state.step, state.global_step], dtype=np.float32
    )
    model.save(str(ckpt), extra)
    done = state.stage >= model.stages
    print(f"{'finished' if done else 'paused'} at stage {state.stage} "
          f"step {state.step} ({state.global_step} total); wrote {ckpt}")
    return 0


def _detect_chunk(indices):
    c = _POOL_CTX
    dets, _ = detect_dataset(
        c["spec"], c["model"], c["seed"], indices,
        split=c["split"], stage_count=c["stages"],
    )
    return dets


def _run_detection(cfg: RunConfig, model: CascadeModel, split: str,
                   count: int, stage_count, workers: int):
    _POOL_CTX.update(
        spec=cfg.dataset, model=model, seed=cfg.run.seed,
        split=split, stages=stage_count,
    )
    chunks = _chunked(list(range(count)))
    return [
        d for chunk in _map_chunks(_detect_chunk, chunks, workers)
        for d in chunk
    ]


def cmd_detect(args) -> int:
    if args.config is None:
        sidecar = Path(args.checkpoint).parent / "config.cfg"
        if not sidecar.is_file():
            raise UsageError(
                f"no config.cfg next to {args.checkpoint}; pass --config"
            )
        args.config = str(sidecar)
    cfg = _load_config(args)
    workers = _check_workers(args.workers)
    _check_dataset(args.data, cfg)
    model, _ = CascadeModel.load(args.checkpoint, cfg.model)
    if args.stages is not None and not 1 <= args.stages <= model.stages:
        raise UsageError(f"--stages must lie in [1,{model.stages}]")

    count = cfg.run.n_test if args.split == "test" else cfg.run.n_train
    dets = _run_detection(cfg, model, args.split, count, args.stages, workers)
    out = Path(cfg.run.out)
    _write_config(out, cfg)
    write_detections(str(out / "detections.txt"), dets)
    print(f"wrote {len(dets)} detections over {count} scenes "
          f"to {out / 'detections.txt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    thresholds = cfg.run.thresholds
    if args.thresholds:
        try:
            thresholds = tuple(
                float(t) for t in args.thresholds.split(",") if t.strip()
            )
        except ValueError:
            raise UsageError(
                f"bad --thresholds {args.thresholds!r}"
            ) from None
    dets = read_detections(args.dets)
    gts = [(img, cls, box) for img, cls, _, box in read_detections(args.gts)]
    result = evaluate(dets, gts, thresholds, args.classes, coco=args.coco)
    out = Path(cfg.run.out)
    _write_config(out, cfg)
    (out / "metrics.txt").write_text(
        format_metrics(result), encoding="ascii", newline="\n"
    )
    print(format_table(result), end="")
    return 0


def _gradcheck_items(cfg: RunConfig, n_scenes: int = 2, max_rois: int = 16):
    items = []
    per_scene = max_rois // n_scenes
    for idx in range(n_scenes):
        scene = generate_scene(cfg.dataset, cfg.run.seed, idx, "train")
        props = proposal_source(
            scene, stream(cfg.run.seed, "prop.train", idx),
            (cfg.dataset.jitter_center, cfg.dataset.jitter_logsize),
            cfg.dataset.n_fg, cfg.dataset.n_bg, cfg.dataset.tau_rpn,
        )
        matches = match_rois(props.boxes(), scene.gts)
        rois = [
            (box, label, t.as_array() if t else None)
            for box, (label, t) in zip(props.boxes(), matches)
        ][:per_scene]
        items.append(TrainItem(scene.features.astype(np.float64), rois))
    return items


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    if args.samples < 1:
        raise UsageError("--samples must be at least 1")
    model = CascadeModel.init(cfg.model, cfg.dataset.feature_channels,
                              cfg.run.seed, cfg.run.stages)
    model.proj = model.proj.astype(np.float64)
    model.banks = [b.astype(np.float64) for b in model.banks]
    items = _gradcheck_items(cfg)
    n_rois = sum(len(it.rois) for it in items)
    ohem_n = max(1, n_rois // 2)

    report, grads = batch_gradients(model, 0, items,
                                    cfg.schedule.reg_weight, ohem_n)

    def loss_fn(_):
        r, _ = batch_gradients(model, 0, items,
                               cfg.schedule.reg_weight, ohem_n)
        return r.total

    worst = 0.0
    for name, theta in sorted(model.trainable_parameters(0).items()):
        err = finite_difference_check(
            loss_fn, theta, grads[name],
            sample=args.samples, rng=stream(cfg.run.seed, "gradcheck"),
        )
        worst = max(worst, err)
        print(f"{name} {err:.3e}")
    print(f"worst {worst:.3e} over {n_rois} RoIs "
          f"({'PASS' if worst < 1e-4 else 'FAIL'} at 1e-4)")
    return 0 if worst < 1e-4 else 3


def _ablate_variants(cfg: RunConfig, axis: str):
    """(row name, config, stage_count) per variant; None trains fresh."""
    if axis == "aspect_ratios":
        for key, tilings in BRANCH_SETS.items():
            text = ",".join(f"{h}x{w}" for h, w in tilings)
            yield (f"{key}:{text}",
                   apply_overrides(cfg, [f"model.tilings={text}"]), None)
    elif axis == "context":
        for mode in CONTEXT_MODES:
            yield mode, apply_overrides(cfg, [f"model.context={mode}"]), None
    else:
        for n in range(1, cfg.run.stages + 1):
            yield f"stage{n}", cfg, n


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    workers = _check_workers(args.workers)
    out = Path(cfg.run.out)
    _write_config(out, cfg)

    rows = []
    shared_model = None
    for name, variant, stage_count in _ablate_variants(cfg, args.axis):
        if stage_count is None or shared_model is None:
            model, _, _ = train_multistage(
                variant.dataset, variant.model, variant.schedule,
                variant.run.seed, n_train=variant.run.n_train,
                stages=variant.run.stages,
            )
            if stage_count is not None:
                shared_model = model
        else:
            model = shared_model
        dets = _run_detection(variant, model, "test", variant.run.n_test,
                              stage_count, workers)
        scenes = [
            generate_scene(variant.dataset, variant.run.seed, i, "test")
            for i in range(variant.run.n_test)
        ]
        gts = [
            (s.image_id, cls, box) for s in scenes for box, cls in s.gts
        ]
        result = evaluate(dets, gts, variant.run.thresholds,
                          variant.model.num_classes)
        rows.append((name, result.map_at))
        print(f"done: {name}")

    taus = sorted(cfg.run.thresholds)
    width = max(len(name) for name, _ in rows)
    lines = [
        " ".join([f"{'variant':<{width}}"] + [f"mAP@{t:g}".rjust(8) for t in taus])
    ]
    for name, map_at in rows:
        lines.append(
            " ".join([f"{name:<{width}}"] + [f"{map_at[t]:8.4f}" for t in taus])
        )
    table = "\n".join(lines) + "\n"
    (out / f"ablate_{args.axis}.txt").write_text(
        table, encoding="ascii", newline="\n"
    )
    print(table, end="")
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (DataFileError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Text run configuration: bracket sections of key = value lines.

Sections map one-to-one onto the dataclasses they configure: [model] is
the mixture (ARConfig), [dataset] the scene generator (DatasetSpec),
[schedule] the optimizer (Schedule), and [run] the orchestration knobs.
Value types come straight from the field annotations, so a key parses
exactly as its dataclass says; unknown sections and keys are rejected,
and serialize(parse(text)) is a fixed point.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, fields, replace

from .cascade import Schedule
from .psmap import ARConfig
from .synth import DatasetSpec


class ConfigError(ValueError):
    """Raised for unparseable or inconsistent configuration text."""


@dataclass(frozen=True)
class RunArgs:
    """Orchestration knobs: seeding, output location, dataset sizes."""

    seed: int = 0
    out: str = "runs/arc"
    n_train: int = 2000
    n_test: int = 500
    stages: int = 2
    thresholds: tuple[float, ...] = (0.5, 0.7)

    def __post_init__(self) -> None:
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("dataset sizes must be non-negative")
        if self.stages < 1:
            raise ValueError("need at least one stage")
        if not self.thresholds or any(not 0 < t < 1 for t in self.thresholds):
            raise ValueError("thresholds must lie in (0,1)")
        if not self.out:
            raise ValueError("out must be a path")


@dataclass(frozen=True)
class RunConfig:
    model: ARConfig
    dataset: DatasetSpec
    schedule: Schedule
    run: RunArgs

    def __post_init__(self) -> None:
        if self.model.num_classes != self.dataset.num_classes:
            raise ConfigError(
                f"model.num_classes={self.model.num_classes} does not match "
                f"dataset.num_classes={self.dataset.num_classes}"
            )
        if self.model.stride != self.dataset.stride:
            raise ConfigError(
                f"model.stride={self.model.stride} does not match "
                f"dataset.stride={self.dataset.stride}"
            )


def default_config() -> RunConfig:
    return RunConfig(
        model=ARConfig(
            tilings=((7, 7), (5, 10), (10, 5), (3, 12), (12, 3)),
            cell_channels=3,
            num_classes=3,
        ),
        dataset=DatasetSpec(),
        schedule=Schedule(),
        run=RunArgs(),
    )


def _parse_scalar(text: str, hint, where: str):
    if hint is bool:
        if text in ("true", "false"):
            return text == "true"
        raise ConfigError(f"{where}: expected true or false, got {text!r}")
    if hint in (int, float, str):
        try:
            return hint(text)
        except ValueError:
            raise ConfigError(
                f"{where}: {text!r} is not a valid {hint.__name__}"
            ) from None
    raise ConfigError(f"{where}: unsupported field type {hint!r}")


def _parse_value(text: str, hint, where: str):
    if typing.get_origin(hint) is not tuple:
        return _parse_scalar(text, hint, where)
    elem = typing.get_args(hint)[0]
    items = [p.strip() for p in text.split(",") if p.strip()]
    if typing.get_origin(elem) is tuple:
        # grid list: "7x7,5x10"
        out = []
        for item in items:
            h, sep, w = item.partition("x")
            if not sep:
                raise ConfigError(f"{where}: expected HxW, got {item!r}")
            out.append(
                (
                    _parse_scalar(h.strip(), int, where),
                    _parse_scalar(w.strip(), int, where),
                )
            )
        return tuple(out)
    return tuple(_parse_scalar(item, elem, where) for item in items)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{h}x{w}" for h, w in value)
        return ",".join(_format_value(v) for v in value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text over `base` (package defaults when omitted)."""
    base = base if base is not None else default_config()
    blocks: dict[str, dict[str, tuple[int, str]]] = {
        f.name: {} for f in fields(RunConfig)
    }
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in blocks:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value")
        if section is None:
            raise ConfigError(f"line {lineno}: key before any [section]")
        if key in blocks[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        blocks[section][key] = (lineno, value)

    built = {}
    for name, pairs in blocks.items():
        block = getattr(base, name)
        hints = typing.get_type_hints(type(block))
        known = {f.name for f in fields(type(block))}
        kw = {}
        for key, (lineno, value) in pairs.items():
            if key not in known:
                raise ConfigError(
                    f"line {lineno}: unknown key {key!r} in [{name}]"
                )
            kw[key] = _parse_value(value, hints[key], f"line {lineno}")
        try:
            built[name] = replace(block, **kw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return RunConfig(**built)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        block = getattr(cfg, f.name)
        lines.append(f"[{f.name}]")
        for bf in fields(type(block)):
            lines.append(f"{bf.name} = {_format_value(getattr(block, bf.name))}")
        lines.append("")
    return "\n".join(lines)


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply `section.key=value` strings on top of a config.

    Repeating a key is allowed; the last occurrence wins.
    """
    by_section: dict[str, dict[str, str]] = {}
    for pair in pairs:
        lhs, sep, value = pair.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot or not section or not key.strip():
            raise ConfigError(
                f"override {pair!r}: expected section.key=value"
            )
        by_section.setdefault(section, {})[key.strip()] = value.strip()
    text = "\n".join(
        f"[{section}]\n"
        + "\n".join(f"{k} = {v}" for k, v in entries.items())
        for section, entries in by_section.items()
    )
    return parse_config(text, base=cfg)

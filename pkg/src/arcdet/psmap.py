"""Position-sensitive map construction and its channel-indexing contract.

Each mixture component i tiles RoIs into an h_i x w_i grid and owns map
stacks of K*h_i*w_i channels: the cell at (row j, column k) reads the K
channels starting at (j*w_i + k)*K.  Maps exist per pooling role (the
RoI itself, the enlarged local-context box, the whole-map global box)
and are produced from backbone-like features by per-role 1x1 linear
projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROLE_ORDER = ("roi", "local", "global")

_CONTEXT_ROLES = {
    "none": ("roi",),
    "global": ("roi", "global"),
    "local_global": ("roi", "local", "global"),
}

MapKey = tuple[int, str]


@dataclass(frozen=True)
class ARConfig:
    """Mixture specification: tilings, channel budget, classes, context.

    Attributes:
        tilings: (rows, cols) cell grid per mixture component.
        cell_channels: K, map channels dedicated to each cell.
        num_classes: C, number of foreground classes; labels run 0..C
            with 0 reserved for background.
        ctx_scale: side enlargement factor of the local-context box.
        stride: pixel-to-map downsampling factor.
        context: which pooling roles exist ("none", "global",
            "local_global").
        share_maps: pool every role from one shared map per component
            instead of per-role maps.
        select_with_background: let the background score participate
            when ranking components against each other.
    """

    tilings: tuple[tuple[int, int], ...]
    cell_channels: int
    num_classes: int
    ctx_scale: float = 1.5
    stride: int = 8
    context: str = "local_global"
    share_maps: bool = False
    select_with_background: bool = True

    def __post_init__(self) -> None:
        if len(self.tilings) < 1:
            raise ValueError("at least one tiling is required")
        for h, w in self.tilings:
            if h < 1 or w < 1:
                raise ValueError(f"tiling cells must be >= 1, got {h}x{w}")
        if self.cell_channels < 1:
            raise ValueError("cell_channels must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.ctx_scale < 1.0:
            raise ValueError("ctx_scale must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.context not in _CONTEXT_ROLES:
            raise ValueError(f"unknown context mode {self.context!r}")
        if len(set(self.tilings)) != len(self.tilings):
            raise ValueError("tilings must be distinct")

    @property
    def n_components(self) -> int:
        return len(self.tilings)

    @property
    def roles(self) -> tuple[str, ...]:
        return _CONTEXT_ROLES[self.context]

    def map_channels(self, component: int) -> int:
        h, w = self.tilings[component]
        return self.cell_channels * h * w

    def pooled_shape(self, component: int) -> tuple[int, int, int]:
        h, w = self.tilings[component]
        return (len(self.roles) * self.cell_channels, h, w)

    def map_key(self, component: int, role: str) -> MapKey:
        if role not in self.roles:
            raise ValueError(f"role {role!r} not active under context={self.context!r}")
        return (component, "shared" if self.share_maps else role)

    @property
    def map_keys(self) -> list[MapKey]:
        keys = []
        for i in range(self.n_components):
            seen = set()
            for role in self.roles:
                key = self.map_key(i, role)
                if key not in seen:
                    seen.add(key)
                    keys.append(key)
        return keys


def channel_index(cfg: ARConfig, component: int, cell: tuple[int, int], slot: int) -> int:
    """Map channel read by `slot` of the cell at (row, col); row-major cells."""
    if not 0 <= component < cfg.n_components:
        raise ValueError(f"component {component} out of range")
    h, w = cfg.tilings[component]
    j, k = cell
    if not (0 <= j < h and 0 <= k < w):
        raise ValueError(f"cell {cell} outside {h}x{w} grid")
    if not 0 <= slot < cfg.cell_channels:
        raise ValueError(f"slot {slot} outside [0, {cfg.cell_channels})")
    return (j * w + k) * cfg.cell_channels + slot


@dataclass
class PSMapSet:
    """Per-component, per-role map stacks of shape (K*h_i*w_i, H, W)."""

    maps: dict[MapKey, np.ndarray]

    def get(self, cfg: ARConfig, component: int, role: str) -> np.ndarray:
        return self.maps[cfg.map_key(component, role)]

    @property
    def height(self) -> int:
        return next(iter(self.maps.values())).shape[1]

    @property
    def width(self) -> int:
        return next(iter(self.maps.values())).shape[2]


@dataclass
class ProjectionWeights:
    """1x1 linear projections from D feature channels to each map stack."""

    weight: dict[MapKey, np.ndarray] = field(default_factory=dict)
    bias: dict[MapKey, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(
        cls,
        cfg: ARConfig,
        feature_channels: int,
        rng: np.random.Generator,
        scale: float = 0.2,
    ) -> "ProjectionWeights":
        """Zero-mean gaussian weights with std scale/sqrt(fan_in), zero biases.

        The default scale keeps pooled responses small enough that the
        template layer trains inside the step-size stability region.
        """
        std = scale / np.sqrt(feature_channels)
        out = cls()
        for key in cfg.map_keys:
            n = cfg.map_channels(key[0])
            out.weight[key] = rng.normal(0.0, std, (n, feature_channels)).astype(
                np.float32
            )
            out.bias[key] = np.zeros(n, dtype=np.float32)
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        """Live views keyed by checkpoint names (proj{i}.{role}.w / .b)."""
        out: dict[str, np.ndarray] = {}
        for (i, role), w in self.weight.items():
            out[f"proj{i}.{role}.w"] = w
            out[f"proj{i}.{role}.b"] = self.bias[(i, role)]
        return out

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        for (i, role) in list(self.weight):
            self.weight[(i, role)] = params[f"proj{i}.{role}.w"]
            self.bias[(i, role)] = params[f"proj{i}.{role}.b"]

    def astype(self, dtype) -> "ProjectionWeights":
        out = ProjectionWeights()
        out.weight = {k: v.astype(dtype) for k, v in self.weight.items()}
        out.bias = {k: v.astype(dtype) for k, v in self.bias.items()}
        return out


def _check_shapes(features: np.ndarray, weights: ProjectionWeights) -> None:
    if features.ndim != 3:
        raise ValueError(f"features must be (D,H,W), got shape {features.shape}")
    d = features.shape[0]
    for key, w in weights.weight.items():
        if w.shape[1] != d:
            raise ValueError(
                f"projection {key} expects {w.shape[1]} channels, features have {d}"
            )


def project(features: np.ndarray, weights: ProjectionWeights, cfg: ARConfig) -> PSMapSet:
    """Apply every per-role 1x1 projection to the feature stack."""
    _check_shapes(features, weights)
    maps: dict[MapKey, np.ndarray] = {}
    for key in cfg.map_keys:
        w = weights.weight[key].astype(features.dtype, copy=False)
        b = weights.bias[key].astype(features.dtype, copy=False)
        maps[key] = np.tensordot(w, features, axes=([1], [0])) + b[:, None, None]
    return PSMapSet(maps)


def project_backward(
    grad_maps: dict[MapKey, np.ndarray],
    features: np.ndarray,
    weights: ProjectionWeights,
    cfg: ARConfig,
) -> tuple[np.ndarray, dict[MapKey, np.ndarray], dict[MapKey, np.ndarray]]:
    """Adjoint of `project`: gradients for features, weights, and biases."""
    _check_shapes(features, weights)
    grad_features = np.zeros_like(features)
    grad_w: dict[MapKey, np.ndarray] = {}
    grad_b: dict[MapKey, np.ndarray] = {}
    for key in cfg.map_keys:
        g = grad_maps[key]
        w = weights.weight[key].astype(features.dtype, copy=False)
        if g.shape != (w.shape[0],) + features.shape[1:]:
            raise ValueError(f"gradient shape mismatch for map {key}: {g.shape}")
        grad_features += np.tensordot(w.T, g, axes=([1], [0]))
        grad_w[key] = np.tensordot(g, features, axes=([1, 2], [1, 2]))
        grad_b[key] = g.sum(axis=(1, 2))
    return grad_features, grad_w, grad_b

"""Deep hierarchical reconstruction network.

The encoder is a plain CNN split into stages. Stage ``l`` maps ``x_{l-1}`` to
``x_l`` (convolutions + ReLU, then optional 2x2 max pooling). Stages flagged
``lateral`` emit a bottleneck code ``z_l = h_l(x_l)`` (ReLU + 1x1 conv) and the
decoder walks back down::

    t_l = g_l(up(t_{l+1}) + h~_l(z_l))       g_l = 3x3 conv + ReLU

starting from ``t_{top+1} = 0`` at the deepest lateral stage. A final linear
3x3 conv maps the decoder output at input resolution to the reconstruction.
The classifier head (fully connected layers on the flattened last stage)
produces the activation vector ``y``; ``z`` is the concatenation of the
spatially max-pooled ``z_l``.

Variants: ``dhrnet`` as above, ``ladder`` with identity ``h_l``/``h~_l`` (so
``z_l = x_l``) and ``plain`` with no decoder at all.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fileformat
from .errors import ConfigurationError, FormatError, InputError
from .tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    dense,
    dropout,
    global_max_pool,
    max_pool2d,
    relu,
    reshape,
    upsample_nearest,
)

VARIANTS = ("dhrnet", "ladder", "plain")
FEATURE_MODES = ("av", "joint")


@dataclass(frozen=True)
class StageSpec:
    convs: int
    channels: int
    pool: bool = True
    lateral: bool = True

    def to_text(self) -> str:
        return f"{self.convs}:{self.channels}:{int(self.pool)}:{int(self.lateral)}"

    @classmethod
    def from_text(cls, text: str) -> "StageSpec":
        try:
            convs, channels, pool, lateral = (int(v) for v in text.split(":"))
        except ValueError:
            raise ConfigurationError(f"bad stage spec {text!r}, expected convs:channels:pool:lateral") from None
        return cls(convs, channels, bool(pool), bool(lateral))


def _mnist_stages() -> tuple[StageSpec, ...]:
    # conv conv pool | conv conv pool | conv; laterals after each pooling layer
    return (StageSpec(2, 100), StageSpec(2, 100), StageSpec(1, 100, pool=False, lateral=False))


@dataclass(frozen=True)
class DHRNetConfig:
    input_shape: tuple[int, int, int] = (1, 28, 28)
    num_classes: int = 10
    stages: tuple[StageSpec, ...] = field(default_factory=_mnist_stages)
    head: tuple[int, ...] = (500,)
    bottleneck_dim: int = 32
    variant: str = "dhrnet"
    kernel_size: int = 3
    dropout: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "head", tuple(int(v) for v in self.head))

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be (C, H, W) with positive extents, got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if not self.stages:
            raise ConfigurationError("at least one stage is required")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if any(h < 1 for h in self.head):
            raise ConfigurationError(f"head sizes must be positive, got {self.head}")
        _, h, w = self.input_shape
        for i, st in enumerate(self.stages):
            if st.convs < 1 or st.channels < 1:
                raise ConfigurationError(f"stage {i}: convs and channels must be positive")
            if st.pool:
                if h % 2 or w % 2:
                    raise ConfigurationError(f"stage {i}: cannot pool a {h}x{w} map with stride 2")
                h, w = h // 2, w // 2
        if self.variant != "plain":
            if not any(st.lateral for st in self.stages):
                raise ConfigurationError(f"variant {self.variant} needs at least one lateral stage")
            if self.variant == "dhrnet" and self.bottleneck_dim <= 0:
                raise ConfigurationError("bottleneck_dim must be positive for variant dhrnet")

    @property
    def lateral_stages(self) -> list[int]:
        if self.variant == "plain":
            return []
        return [i for i, st in enumerate(self.stages) if st.lateral]

    @property
    def latent_dim(self) -> int:
        if self.variant == "plain":
            return 0
        if self.variant == "ladder":
            return sum(self.stages[i].channels for i in self.lateral_stages)
        return self.bottleneck_dim * len(self.lateral_stages)

    def feature_dim(self, mode: str) -> int:
        return self.num_classes + (self.latent_dim if mode == "joint" else 0)

    def to_header(self) -> dict[str, str]:
        return {
            "net.variant": self.variant,
            "net.input_shape": ",".join(map(str, self.input_shape)),
            "net.num_classes": str(self.num_classes),
            "net.stages": ";".join(st.to_text() for st in self.stages),
            "net.head": ",".join(map(str, self.head)),
            "net.bottleneck_dim": str(self.bottleneck_dim),
            "net.kernel_size": str(self.kernel_size),
            "net.dropout": repr(float(self.dropout)),
        }

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "DHRNetConfig":
        try:
            return cls(
                input_shape=tuple(int(v) for v in header["net.input_shape"].split(",")),
                num_classes=int(header["net.num_classes"]),
                stages=tuple(StageSpec.from_text(s) for s in header["net.stages"].split(";")),
                head=tuple(int(v) for v in header["net.head"].split(",") if v),
                bottleneck_dim=int(header["net.bottleneck_dim"]),
                variant=header["net.variant"],
                kernel_size=int(header["net.kernel_size"]),
                dropout=float(header["net.dropout"]),
            )
        except KeyError as exc:
            raise FormatError(f"model header lacks {exc.args[0]!r}") from None
        except ValueError as exc:
            raise FormatError(f"malformed model header: {exc}") from None


@dataclass
class ForwardOutput:
    y: Tensor
    z: Tensor | None
    recon: Tensor | None
    z_maps: list[Tensor]


def _init(rng: np.random.Generator, shape: Sequence[int], fan_in: int, relu_after: bool) -> np.ndarray:
    # He scaling ahead of a ReLU, LeCun scaling for linear outputs
    gain = 2.0 if relu_after else 1.0
    return rng.standard_normal(shape) * np.sqrt(gain / fan_in)


def _stage_shapes(config: DHRNetConfig) -> list[tuple[int, int, int]]:
    """(C, H, W) at every level; level 0 is the input."""
    c, h, w = config.input_shape
    shapes = [(c, h, w)]
    for st in config.stages:
        if st.pool:
            h, w = h // 2, w // 2
        shapes.append((st.channels, h, w))
    return shapes


class DHRNetModel:
    """Network weights plus the configuration that shapes them.

    ``params`` is an ordered mapping from names to float64 arrays; training
    updates the arrays in place.
    """

    def __init__(self, config: DHRNetConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None,
                params: dict[str, Tensor] | None = None) -> ForwardOutput:
        return forward(self, x, "train" if training else "eval", rng=rng, params=params)

    def copy(self) -> "DHRNetModel":
        return DHRNetModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def save(self, path: str | Path) -> None:
        fileformat.write(path, {"kind": "dhrnet", **self.config.to_header()}, self.params)

    def to_bytes(self) -> bytes:
        return fileformat.encode({"kind": "dhrnet", **self.config.to_header()}, self.params)

    @classmethod
    def from_parts(cls, header: dict[str, str], arrays: dict[str, np.ndarray], prefix: str = "") -> "DHRNetModel":
        config = DHRNetConfig.from_header(header)
        config.validate()
        expected = build(config, np.random.default_rng(0)).params
        params = {}
        for name, ref in expected.items():
            arr = arrays.get(prefix + name)
            if arr is None:
                raise FormatError(f"model file lacks weight array {prefix + name!r}")
            if arr.shape != ref.shape:
                raise FormatError(f"weight {prefix + name!r} has shape {arr.shape}, expected {ref.shape}")
            params[name] = arr.copy()
        return cls(config, params)

    @classmethod
    def load(cls, path: str | Path) -> "DHRNetModel":
        header, arrays = fileformat.read(path)
        if header.get("kind") != "dhrnet":
            raise FormatError(f"{path}: not a network file (kind={header.get('kind')!r})")
        return cls.from_parts(header, arrays)


def build(config: DHRNetConfig, rng: np.random.Generator) -> DHRNetModel:
    """Allocate randomly initialised weights for ``config``."""
    config.validate()
    k = config.kernel_size
    shapes = _stage_shapes(config)
    params: dict[str, np.ndarray] = {}

    def conv(name, cin, cout, ksize, relu_after=True):
        params[f"{name}.w"] = _init(rng, (cout, cin, ksize, ksize), cin * ksize * ksize, relu_after)
        params[f"{name}.b"] = np.zeros(cout)

    cin = config.input_shape[0]
    for i, st in enumerate(config.stages):
        for j in range(st.convs):
            conv(f"f{i}.conv{j}", cin, st.channels, k)
            cin = st.channels
    c, h, w = shapes[-1]
    width = c * h * w
    for j, units in enumerate(config.head):
        params[f"head{j}.w"] = _init(rng, (units, width), width, True)
        params[f"head{j}.b"] = np.zeros(units)
        width = units
    params["out.w"] = _init(rng, (config.num_classes, width), width, False)
    params["out.b"] = np.zeros(config.num_classes)

    lateral = config.lateral_stages
    if lateral:
        top = max(lateral)
        for i in range(top, -1, -1):
            level_c = shapes[i + 1][0]
            if config.variant == "dhrnet" and i in lateral:
                conv(f"h{i}", level_c, config.bottleneck_dim, 1, relu_after=False)
                conv(f"hr{i}", config.bottleneck_dim, level_c, 1, relu_after=False)
            # g_i maps stage i's width to the width one level down; the first
            # stage keeps its own width at input resolution
            target_c = shapes[i][0] if i > 0 else level_c
            conv(f"g{i}", level_c, target_c, k)
        conv("recon", shapes[1][0], config.input_shape[0], k, relu_after=False)
    return DHRNetModel(config, params)


def forward(model: DHRNetModel, x, mode: str = "eval", rng: np.random.Generator | None = None,
            params: dict[str, Tensor] | None = None, dropout_rate: float | None = None) -> ForwardOutput:
    """Run the network on a batch ``x`` of shape [B, C, H, W].

    ``params`` overrides the model's arrays with caller-owned tensors (the
    trainer passes gradient-tracked leaves here); ``dropout_rate`` overrides
    the configured rate.
    """
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    cfg = model.config
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != cfg.input_shape:
        raise InputError(f"input shape {x.shape} does not match [B, {', '.join(map(str, cfg.input_shape))}]")
    p = params if params is not None else {k: Tensor(v) for k, v in model.params.items()}
    rate = cfg.dropout if dropout_rate is None else dropout_rate

    h = x
    levels = [x]
    for i, st in enumerate(cfg.stages):
        for j in range(st.convs):
            h = relu(conv2d(h, p[f"f{i}.conv{j}.w"], p[f"f{i}.conv{j}.b"]))
        if st.pool:
            h = max_pool2d(h, 2)
        h = dropout(h, rate, training, rng)
        levels.append(h)

    b = x.shape[0]
    a = reshape(h, (b, -1))
    for j in range(len(cfg.head)):
        a = dropout(relu(dense(a, p[f"head{j}.w"], p[f"head{j}.b"])), rate, training, rng)
    y = dense(a, p["out.w"], p["out.b"])

    lateral = cfg.lateral_stages
    if not lateral:
        return ForwardOutput(y=y, z=None, recon=None, z_maps=[])

    z_maps: dict[int, Tensor] = {}
    for i in lateral:
        xl = levels[i + 1]
        if cfg.variant == "ladder":
            z_maps[i] = xl
        else:
            z_maps[i] = conv2d(relu(xl), p[f"h{i}.w"], p[f"h{i}.b"])

    t = None
    for i in range(max(lateral), -1, -1):
        parts = []
        if t is not None:
            factor = levels[i + 1].shape[2] // t.shape[2]
            parts.append(upsample_nearest(t, factor))
        if i in z_maps:
            lat = z_maps[i] if cfg.variant == "ladder" else conv2d(z_maps[i], p[f"hr{i}.w"], p[f"hr{i}.b"])
            parts.append(lat)
        s = parts[0] if len(parts) == 1 else add(parts[0], parts[1])
        t = relu(conv2d(s, p[f"g{i}.w"], p[f"g{i}.b"]))
    factor = cfg.input_shape[1] // t.shape[2]
    recon = conv2d(upsample_nearest(t, factor), p["recon.w"], p["recon.b"])

    maps = [z_maps[i] for i in lateral]
    z = concat([global_max_pool(m) for m in maps], axis=1)
    return ForwardOutput(y=y, z=z, recon=recon, z_maps=maps)


def extract_features(model: DHRNetModel, x, mode: str = "joint", batch_size: int = 256) -> np.ndarray:
    """Eval-mode features: ``y`` for mode ``av``, ``[y, z]`` for mode ``joint``."""
    if mode not in FEATURE_MODES:
        raise ConfigurationError(f"feature mode must be one of {FEATURE_MODES}, got {mode!r}")
    if mode == "joint" and model.config.variant == "plain":
        raise ConfigurationError("joint features need a latent code; variant plain has none")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    chunks = []
    for start in range(0, x.shape[0], batch_size):
        out = forward(model, x[start:start + batch_size], "eval")
        if mode == "av":
            chunks.append(out.y.data)
        else:
            chunks.append(np.concatenate([out.y.data, out.z.data], axis=1))
    if not chunks:
        return np.zeros((0, model.config.feature_dim(mode)))
    return np.concatenate(chunks, axis=0)


def with_variant(config: DHRNetConfig, variant: str) -> DHRNetConfig:
    return replace(config, variant=variant)

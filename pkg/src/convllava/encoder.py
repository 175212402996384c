"""Hierarchical ConvNeXt visual encoder with an optional fifth stage.

Stage indices in the public API (``freeze_mask``, ``EncoderConfig``) are
1-based to match the usual "stage 1 .. stage 5" naming; parameter paths use
0-based indices (``stages.2.blocks.14.pwconv1.weight``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    depths: tuple[int, ...] = (3, 3, 27, 3)
    channels: tuple[int, ...] = (192, 384, 768, 1536)
    kernel_size: int = 7
    stem_patch: int = 4
    ffn_expansion: int = 4
    layer_scale_init: float = 1e-6
    use_stage5: bool = False
    stage5_depth: int = 6
    stage5_channels: int | None = None  # defaults to 2x the last stage
    ln_eps: float = 1e-6
    in_channels: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.depths) != len(self.channels) or len(self.depths) not in (1, 2, 3, 4, 5):
            raise ValueError(f"depths {self.depths} and channels {self.channels} must have equal length <= 5")
        if self.use_stage5 and len(self.depths) != 4:
            raise ValueError("use_stage5 appends a stage to a 4-stage topology; give 4 depths/channels")
        if min(self.stage_depths) <= 0 or min(self.stage_channels) <= 0:
            raise ValueError("stage depths and channels must be positive")
        if self.kernel_size <= 0 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.stem_patch <= 0 or self.ffn_expansion <= 0:
            raise ValueError("stem_patch and ffn_expansion must be positive")

    @property
    def stage_depths(self) -> tuple[int, ...]:
        return self.depths + ((self.stage5_depth,) if self.use_stage5 else ())

    @property
    def stage_channels(self) -> tuple[int, ...]:
        if not self.use_stage5:
            return self.channels
        return self.channels + (self.stage5_channels or 2 * self.channels[-1],)

    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    @property
    def downsample_factor(self) -> int:
        return self.stem_patch * 2 ** (self.num_stages - 1)

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def total_blocks(self) -> int:
        return sum(self.stage_depths)

    def receptive_radius(self) -> float:
        """Half-width in input pixels of one output cell's receptive field."""
        radius, jump = (self.stem_patch - 1) / 2, self.stem_patch
        for s, depth in enumerate(self.stage_depths):
            if s > 0:
                radius += 0.5 * jump
                jump *= 2
            radius += depth * (self.kernel_size - 1) / 2 * jump
        return radius


PRESETS: dict[str, EncoderConfig] = {
    # CLIP ConvNeXt-L geometry
    "convnext-l": EncoderConfig(),
    "convnext-l-5": EncoderConfig(use_stage5=True),
    # same downsampling as the 5-stage model with desk-size widths
    "toy5": EncoderConfig(depths=(1, 1, 1, 1), channels=(4, 8, 16, 32), use_stage5=True,
                          stage5_depth=1, stage5_channels=64),
    # training / gradcheck geometry: D = 16 so 64x64 images give a 4x4 grid
    "tiny": EncoderConfig(depths=(1, 1, 1, 1), channels=(4, 8, 8, 16), stem_patch=1,
                          use_stage5=True, stage5_depth=1, stage5_channels=16, layer_scale_init=0.5),
}


@dataclass
class EncoderState:
    config: EncoderConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def trainable(self) -> dict[str, bool]:
        return {k: p.requires_grad for k, p in self.params.items()}

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def trainable_count(self) -> int:
        return sum(p.size for p in self.params.values() if p.requires_grad)

    def block_names(self) -> list[tuple[int, int]]:
        """(stage, block) pairs in forward order, 0-based."""
        return [(s, b) for s, d in enumerate(self.config.stage_depths) for b in range(d)]


@dataclass
class VisualTokens:
    tokens: Tensor  # (B, N, C)
    grid_h: int
    grid_w: int

    @property
    def count(self) -> int:
        return self.grid_h * self.grid_w


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.standard_normal(shape, dtype=np.float32 if dtype == np.float32 else np.float64)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()), dtype=out.dtype)
        bad = np.abs(out) > 2.0
    out *= std
    return out.astype(dtype, copy=False)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter path and its shape, in forward order."""
    shapes: dict[str, tuple[int, ...]] = {}
    c0, p, k, e = config.stage_channels[0], config.stem_patch, config.kernel_size, config.ffn_expansion
    shapes["stem.conv.weight"] = (c0, config.in_channels, p, p)
    shapes["stem.conv.bias"] = (c0,)
    shapes["stem.norm.weight"] = (c0,)
    shapes["stem.norm.bias"] = (c0,)
    prev = c0
    for s, (depth, c) in enumerate(zip(config.stage_depths, config.stage_channels)):
        if s > 0:
            pre = f"stages.{s}.downsample"
            shapes[f"{pre}.norm.weight"] = (prev,)
            shapes[f"{pre}.norm.bias"] = (prev,)
            shapes[f"{pre}.conv.weight"] = (c, prev, 2, 2)
            shapes[f"{pre}.conv.bias"] = (c,)
        for b in range(depth):
            pre = f"stages.{s}.blocks.{b}"
            shapes[f"{pre}.dwconv.weight"] = (c, 1, k, k)
            shapes[f"{pre}.dwconv.bias"] = (c,)
            shapes[f"{pre}.norm.weight"] = (c,)
            shapes[f"{pre}.norm.bias"] = (c,)
            shapes[f"{pre}.pwconv1.weight"] = (e * c, c, 1, 1)
            shapes[f"{pre}.pwconv1.bias"] = (e * c,)
            shapes[f"{pre}.pwconv2.weight"] = (c, e * c, 1, 1)
            shapes[f"{pre}.pwconv2.bias"] = (c,)
            shapes[f"{pre}.gamma"] = (c,)
        prev = c
    shapes["norm.weight"] = (prev,)
    shapes["norm.bias"] = (prev,)
    return shapes


def count_params(config: EncoderConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


def build_encoder(config: EncoderConfig, seed: int = 0) -> EncoderState:
    """Randomly initialize an encoder; identical seeds give identical weights."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            data = np.full(shape, config.layer_scale_init, dtype=dtype)
        elif name.endswith("norm.weight"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith(".weight"):
            data = _trunc_normal(rng, shape, 0.02, dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)
    return EncoderState(config, params)


def convnext_block(x: Tensor, params: dict[str, Tensor], prefix: str, config: EncoderConfig) -> Tensor:
    c = x.shape[1]
    pad = (config.kernel_size - 1) // 2
    h = ops.conv2d(x, params[f"{prefix}.dwconv.weight"], params[f"{prefix}.dwconv.bias"],
                   padding=pad, groups=c)
    h = ops.layer_norm_channels(h, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"], config.ln_eps)
    h = ops.conv2d(h, params[f"{prefix}.pwconv1.weight"], params[f"{prefix}.pwconv1.bias"])
    h = ops.gelu(h)
    h = ops.conv2d(h, params[f"{prefix}.pwconv2.weight"], params[f"{prefix}.pwconv2.bias"])
    h = ops.scale_axis(h, params[f"{prefix}.gamma"], axis=1)
    return ops.add(x, h)


def encode_features(state: EncoderState, image: Tensor) -> Tensor:
    """Run the encoder and return the final normalized (B, C, h, w) map."""
    cfg, p = state.config, state.params
    if image.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise ValueError(f"encode: expected image of shape (B, {cfg.in_channels}, H, W), got {image.shape}")
    d = cfg.downsample_factor
    h, w = image.shape[2:]
    if h < d or w < d:
        raise ValueError(f"encode: input {h}x{w} is smaller than the minimum size {d}x{d} "
                         f"(total downsampling factor {d})")
    x = ops.conv2d(image, p["stem.conv.weight"], p["stem.conv.bias"], stride=cfg.stem_patch)
    x = ops.layer_norm_channels(x, p["stem.norm.weight"], p["stem.norm.bias"], cfg.ln_eps)
    for s, depth in enumerate(cfg.stage_depths):
        if s > 0:
            pre = f"stages.{s}.downsample"
            x = ops.layer_norm_channels(x, p[f"{pre}.norm.weight"], p[f"{pre}.norm.bias"], cfg.ln_eps)
            x = ops.conv2d(x, p[f"{pre}.conv.weight"], p[f"{pre}.conv.bias"], stride=2)
        for b in range(depth):
            x = convnext_block(x, p, f"stages.{s}.blocks.{b}", cfg)
    return ops.layer_norm_channels(x, p["norm.weight"], p["norm.bias"], cfg.ln_eps)


def encode(state: EncoderState, image) -> VisualTokens:
    """Encode images into a row-major flattened token grid (B, N, C)."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image), dtype=np.dtype(state.config.dtype))
    feats = encode_features(state, image)
    b, c, gh, gw = feats.shape
    tokens = ops.transpose(ops.reshape(feats, (b, c, gh * gw)), (0, 2, 1))
    return VisualTokens(tokens, gh, gw)


def token_grid(config: EncoderConfig, height: int, width: int) -> tuple[int, int]:
    """Grid size produced by :func:`encode` without running it."""
    def reduce(n: int) -> int:
        n = n // config.stem_patch
        for _ in range(config.num_stages - 1):
            n = n // 2
        return n
    return reduce(height), reduce(width)


# -- freeze masks ----------------------------------------------------------


@dataclass(frozen=True)
class FreezeSpec:
    mode: str  # "last_n_blocks" | "from_stage" | "all" | "none"
    value: int | None = None

    @classmethod
    def parse(cls, text: "str | FreezeSpec | dict") -> "FreezeSpec":
        if isinstance(text, FreezeSpec):
            return text
        if isinstance(text, dict):
            mode = text["mode"]
            value = text.get("n", text.get("s", text.get("value")))
            return cls(mode, None if value is None else int(value))
        mode, _, value = str(text).partition(":")
        return cls(mode.strip(), int(value) if value.strip() else None)

    def __str__(self) -> str:
        return self.mode if self.value is None else f"{self.mode}:{self.value}"


def _block_of(name: str) -> tuple[int, int] | None:
    parts = name.split(".")
    if parts[0] == "stages" and parts[2] == "blocks":
        return int(parts[1]), int(parts[3])
    return None


def _stage_of(name: str, num_stages: int) -> int:
    """0-based stage owning a parameter; the stem belongs to stage 0 and the
    final norm to the last stage."""
    parts = name.split(".")
    if parts[0] == "stem":
        return 0
    if parts[0] == "stages":
        return int(parts[1])
    return num_stages - 1


def freeze_mask(state: EncoderState, spec) -> int:
    """Set trainable flags in place and return the number of trainable scalars.

    ``last_n_blocks:n`` opens only the final ``n`` ConvNeXt blocks;
    ``from_stage:s`` opens stage ``s`` (1-based) onward together with its
    downsamplers and the output norm.
    """
    spec = FreezeSpec.parse(spec)
    cfg = state.config
    if spec.mode == "all":
        selected = set(state.params)
    elif spec.mode == "none":
        selected = set()
    elif spec.mode == "last_n_blocks":
        n = spec.value
        if n is None or not 0 <= n <= cfg.total_blocks:
            raise ValueError(f"last_n_blocks needs 0 <= n <= {cfg.total_blocks}, got {n}")
        order = state.block_names()
        chosen = set(order[len(order) - n:]) if n else set()
        selected = {k for k in state.params if _block_of(k) in chosen}
    elif spec.mode == "from_stage":
        s = spec.value
        if s is None or not 1 <= s <= cfg.num_stages:
            raise ValueError(f"from_stage needs 1 <= s <= {cfg.num_stages}, got {s}")
        selected = {k for k in state.params if _stage_of(k, cfg.num_stages) >= s - 1}
    else:
        raise ValueError(f"unknown freeze mode {spec.mode!r}; expected last_n_blocks, from_stage, all or none")
    for name, p in state.params.items():
        p.requires_grad = name in selected
    return state.trainable_count()


def with_config(config: EncoderConfig, **overrides) -> EncoderConfig:
    return replace(config, **overrides)

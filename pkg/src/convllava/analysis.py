"""Analytic cost model for visual encoders and the LLM prefill they feed.

Counts are exact Python integers. FLOPs are multiply-accumulates times two:
the primitive formulas :func:`attention_flops` and :func:`dwconv_flops`
return the textbook operation counts (one per multiply-accumulate), and
:func:`lmm_total_flops` doubles every term when it assembles totals.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .encoder import PRESETS, EncoderConfig

KINDS = ("vit", "convnext4", "convnext5")
TOKEN_FACTORS = {"vit": 14, "convnext4": 32, "convnext5": 64}


@dataclass(frozen=True)
class ViTGeometry:
    patch: int = 14
    width: int = 1024
    depth: int = 24
    mlp_ratio: int = 4
    in_channels: int = 3


@dataclass(frozen=True)
class FlopsModel:
    kind: str
    vit: ViTGeometry = field(default_factory=ViTGeometry)
    convnext: EncoderConfig | None = None
    llm_dim: int = 4096
    llm_layers: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if self.convnext is None and self.kind != "vit":
            object.__setattr__(self, "convnext", PRESETS["convnext-l-5" if self.kind == "convnext5" else "convnext-l"])

    @property
    def factor(self) -> int:
        if self.kind == "vit":
            return self.vit.patch
        return self.convnext.downsample_factor


@dataclass(frozen=True)
class LmmFlops:
    encoder: int
    llm_prefill: int

    @property
    def total(self) -> int:
        return self.encoder + self.llm_prefill


def _hw(resolution) -> tuple[int, int]:
    if isinstance(resolution, int):
        return resolution, resolution
    h, w = resolution
    return int(h), int(w)


def token_count(kind: str, resolution, strict: bool = True) -> int:
    """Visual tokens for ``kind`` at ``resolution`` (int or (H, W)).

    ``strict`` rejects sizes that are not multiples of the kind's factor;
    otherwise partial cells are dropped, as a strided patch embedding does.
    """
    if kind not in TOKEN_FACTORS:
        raise ValueError(f"unknown encoder kind {kind!r}; valid kinds: {', '.join(KINDS)}")
    f = TOKEN_FACTORS[kind]
    h, w = _hw(resolution)
    if strict and (h % f or w % f):
        raise ValueError(f"resolution {h}x{w} is not a multiple of the {kind} downsampling factor {f}")
    return (h // f) * (w // f)


def attention_flops(c: int, n: int) -> int:
    """Self-attention layer cost ``4 C^2 N + 2 C N^2``."""
    return 4 * c * c * n + 2 * c * n * n


def dwconv_flops(k: int, c: int, n: int) -> int:
    """Depthwise k x k convolution cost ``k^2 C N``."""
    return k * k * c * n


def llm_prefill_layer_macs(d: int, n: int) -> int:
    """One dense decoder layer over ``n`` tokens: attention plus a 4x MLP."""
    return attention_flops(d, n) + 16 * d * d * n


def convnext_encoder_macs(cfg: EncoderConfig, resolution) -> int:
    """Multiply-accumulates of every convolution in the encoder."""
    h, w = _hw(resolution)
    p, k, e = cfg.stem_patch, cfg.kernel_size, cfg.ffn_expansion
    h, w = h // p, w // p
    c_prev = cfg.stage_channels[0]
    macs = c_prev * cfg.in_channels * p * p * h * w
    for s, (depth, c) in enumerate(zip(cfg.stage_depths, cfg.stage_channels)):
        if s > 0:
            h, w = h // 2, w // 2
            macs += c * c_prev * 4 * h * w
        n = h * w
        macs += depth * (dwconv_flops(k, c, n) + 2 * e * c * c * n)
        c_prev = c
    return macs


def vit_encoder_macs(geo: ViTGeometry, resolution) -> int:
    h, w = _hw(resolution)
    n = (h // geo.patch) * (w // geo.patch)
    c = geo.width
    embed = c * geo.in_channels * geo.patch * geo.patch * n
    per_layer = attention_flops(c, n) + 2 * geo.mlp_ratio * c * c * n
    return embed + geo.depth * per_layer


def lmm_total_flops(model: FlopsModel, resolution) -> LmmFlops:
    n = token_count(model.kind, resolution, strict=False)
    if model.kind == "vit":
        enc = vit_encoder_macs(model.vit, resolution)
    else:
        enc = convnext_encoder_macs(model.convnext, resolution)
    llm = model.llm_layers * llm_prefill_layer_macs(model.llm_dim, n)
    return LmmFlops(encoder=2 * enc, llm_prefill=2 * llm)


CSV_HEADER = ("kind", "resolution", "tokens", "encoder_flops", "llm_flops", "total_flops")


def curve_rows(kinds, resolutions) -> list[tuple]:
    for kind in kinds:
        if kind not in KINDS:
            raise ValueError(f"unknown encoder kind {kind!r}; valid kinds: {', '.join(KINDS)}")
    rows = []
    for kind in sorted(set(kinds)):
        model = FlopsModel(kind)
        for r in sorted(set(int(r) for r in resolutions)):
            cost = lmm_total_flops(model, r)
            rows.append((kind, r, token_count(kind, r, strict=False), cost.encoder, cost.llm_prefill, cost.total))
    return rows


def emit_curves(kinds, resolutions) -> str:
    """CSV text with one row per (kind, resolution), sorted, header first."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(curve_rows(kinds, resolutions))
    return buf.getvalue()


def total_ratio(kind_a: str, kind_b: str, resolution) -> float:
    a = lmm_total_flops(FlopsModel(kind_a), resolution).total
    b = lmm_total_flops(FlopsModel(kind_b), resolution).total
    return a / b

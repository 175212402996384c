"""Staged training: freeze plans, AdamW, warmup + cosine schedule, synthetic data."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import FreezeSpec, freeze_mask
from .pipeline import ConvLLaVA, MultimodalBatch, lm_loss
from .preprocess import CLIP_MEAN, CLIP_STD
from .tensor import backward_all, set_deterministic, is_deterministic

logger = logging.getLogger(__name__)


# -- schedule --------------------------------------------------------------


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return max(1, math.ceil(warmup_ratio * total_steps))


def cosine_lr(step: int, total_steps: int, peak_lr: float, warmup_ratio: float = 0.03) -> float:
    """Linear warmup to ``peak_lr`` then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0 < warmup_ratio < 1:
        raise ValueError(f"warmup_ratio must be in (0, 1), got {warmup_ratio}")
    warm = warmup_steps(total_steps, warmup_ratio)
    if step <= warm:
        return peak_lr * step / warm
    progress = (step - warm) / (total_steps - warm)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- optimizer -------------------------------------------------------------


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params, grads: dict[str, np.ndarray], opt: OptimizerState, lr: float) -> None:
    """One bias-corrected AdamW update, in place.

    Only parameters that have a gradient and ``requires_grad`` move. A NaN or
    infinite gradient aborts before anything is modified.
    """
    bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise FloatingPointError(f"non-finite gradient for {', '.join(sorted(bad))}; step aborted")
    for k, g in grads.items():
        if k in params and params[k].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for k in sorted(grads):
        p = params[k]
        if not p.requires_grad:
            continue
        g = grads[k]
        m = opt.m.get(k)
        if m is None:
            m = opt.m[k] = np.zeros_like(p.data)
            opt.v[k] = np.zeros_like(p.data)
        v = opt.v[k]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if opt.weight_decay > 0:
            p.data *= 1.0 - lr * opt.weight_decay
        p.data -= (lr * update).astype(p.dtype, copy=False)


# -- stage plans -----------------------------------------------------------


@dataclass
class StagePlan:
    stage: int
    encoder: str  # freeze spec, e.g. "from_stage:5", "none"
    projector: bool
    lm: bool
    peak_lr: float
    batch_size: int
    warmup_ratio: float = 0.03
    epochs: int = 1
    data: str = "synth"
    micro_batch: int | None = None
    steps: int | None = None  # overrides epochs when set
    weight_decay: float = 0.0

    def total_steps(self, n_samples: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_samples / self.batch_size)


def default_plans(num_stages: int = 5) -> list[StagePlan]:
    """The three-stage protocol with its published learning rates and batch sizes.

    With a 5-stage encoder: stage 1 trains the appended stage and the
    projector, stage 2 opens stage 3 upward plus projector and LM, stage 3
    trains projector and LM. A 4-stage encoder keeps the encoder frozen in
    stage 1 and opens its last 18 blocks in stage 2.
    """
    if num_stages == 5:
        first, second = "from_stage:5", "from_stage:3"
    else:
        first, second = "none", "last_n_blocks:18"
    return [
        StagePlan(1, first, projector=True, lm=False, peak_lr=3e-4, batch_size=256),
        StagePlan(2, second, projector=True, lm=True, peak_lr=2e-5, batch_size=256),
        StagePlan(3, "none", projector=True, lm=True, peak_lr=2e-5, batch_size=128),
    ]


def plan_from_kv(values: dict[str, str]) -> StagePlan:
    stage = int(values["stage"])
    n_stages = int(values.get("encoder_stages", 5))
    base = default_plans(n_stages)[stage - 1]
    kw = asdict(base)
    for key in kw:
        if key in values and key != "stage":
            raw = values[key]
            cur = kw[key]
            if isinstance(cur, bool):
                kw[key] = raw.lower() in ("1", "true", "yes")
            elif key in ("micro_batch", "steps"):
                kw[key] = None if raw.lower() == "none" else int(raw)
            elif isinstance(cur, int):
                kw[key] = int(raw)
            elif isinstance(cur, float):
                kw[key] = float(raw)
            else:
                kw[key] = raw
    return StagePlan(**kw)


def apply_plan(model: ConvLLaVA, plan: StagePlan) -> int:
    """Set every trainable flag for ``plan``; returns trainable scalar count."""
    freeze_mask(model.encoder, FreezeSpec.parse(plan.encoder))
    for p in model.projector.values():
        p.requires_grad = plan.projector
    for p in model.lm.values():
        p.requires_grad = plan.lm
    return sum(p.size for p in model.trainable_parameters().values())


# -- synthetic data --------------------------------------------------------

BOS, EOS = 0, 1
GRID = 4


def caption_layout(vocab: int) -> tuple[int, int]:
    """(number of rectangle colours, grid side) that fit in ``vocab``."""
    n_colors = vocab - 2 - 2 * GRID
    if n_colors < 2:
        raise ValueError(f"vocab {vocab} too small; need at least {2 + 2 * GRID + 2}")
    return n_colors, GRID


def _palette(n: int) -> np.ndarray:
    hues = np.arange(n) / n
    k = (hues[:, None] * 6 + np.array([5.0, 3.0, 1.0])) % 6
    rgb = 1.0 - np.clip(np.minimum(k, 4 - k), 0, 1)  # HSV with S=V=1
    return np.round(rgb * 255).astype(np.uint8)


def caption_tokens(color: int, row: int, col: int, caption_len: int, vocab: int) -> list[int]:
    n_colors, g = caption_layout(vocab)
    content = [2 + color, 2 + n_colors + row, 2 + n_colors + g + col]
    body = [content[i % 3] for i in range(caption_len - 2)]
    return [BOS] + body + [EOS]


def render_sample(rng: np.random.Generator, image_size: int, vocab: int):
    """One image (H, W, 3) uint8 plus the attributes its caption encodes."""
    n_colors, g = caption_layout(vocab)
    color = int(rng.integers(n_colors))
    row, col = int(rng.integers(g)), int(rng.integers(g))
    bg = int(rng.integers(20, 110))
    img = np.full((image_size, image_size, 3), bg, dtype=np.uint8)
    cell = image_size / g
    rh = max(1, int(round(cell * rng.uniform(0.5, 1.0))))
    rw = max(1, int(round(cell * rng.uniform(0.5, 1.0))))
    top = int(row * cell) + int(rng.integers(0, max(1, int(cell) - rh + 1)))
    left = int(col * cell) + int(rng.integers(0, max(1, int(cell) - rw + 1)))
    img[top:top + rh, left:left + rw] = _palette(n_colors)[color]
    return img, (color, row, col)


def synth_data(seed: int, n_samples: int, image_size: int = 64, caption_len: int = 5, vocab: int = 16,
               n_visual: int | None = None, shuffle_images: bool = False) -> MultimodalBatch:
    """Coloured rectangles on solid backgrounds with rule-derived captions.

    Captions spell the rectangle colour, grid row and grid column. With
    ``shuffle_images`` the images are permuted so captions no longer describe
    them (control experiment). ``n_visual`` sizes the loss mask and defaults
    to a factor-16 grid.
    """
    if caption_len < 3:
        raise ValueError("caption_len must be at least 3")
    rng = np.random.default_rng(seed)
    images, captions = [], []
    for _ in range(n_samples):
        img, (color, row, col) = render_sample(rng, image_size, vocab)
        images.append(img)
        captions.append(caption_tokens(color, row, col, caption_len, vocab))
    pix = np.stack(images).astype(np.float32) / 255.0
    pix = (pix - np.asarray(CLIP_MEAN, dtype=np.float32)) / np.asarray(CLIP_STD, dtype=np.float32)
    pix = pix.transpose(0, 3, 1, 2).copy()
    if shuffle_images:
        pix = pix[np.random.default_rng(seed + 1).permutation(n_samples)]
    if n_visual is None:
        n_visual = (image_size // 16) ** 2
    text = np.asarray(captions, dtype=np.int64)
    mask = np.zeros((n_samples, n_visual + caption_len), dtype=bool)
    mask[:, n_visual + 1:] = True
    return MultimodalBatch(pix, text, mask)


# -- training loop ---------------------------------------------------------


@dataclass
class MetricRecord:
    step: int
    stage: int
    lr: float
    loss: float

    def line(self) -> str:
        return f"{self.step},{self.stage},{self.lr!r},{self.loss!r}"


METRICS_HEADER = "step,stage,lr,loss"


def read_metrics(path) -> list[MetricRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"{path}: missing metrics header {METRICS_HEADER!r}")
    out = []
    for line in lines[1:]:
        step, stage, lr, loss = line.split(",")
        out.append(MetricRecord(int(step), int(stage), float(lr), float(loss)))
    return out


def write_metrics(records, path) -> None:
    Path(path).write_text("\n".join([METRICS_HEADER] + [r.line() for r in records]) + "\n")


def _batch_indices(n: int, batch_size: int, total_steps: int, rng: np.random.Generator):
    order = rng.permutation(n)
    pos = 0
    for _ in range(total_steps):
        idx = []
        while len(idx) < min(batch_size, n):
            if pos == n:
                order = rng.permutation(n)
                pos = 0
            take = min(batch_size - len(idx), n - pos)
            idx.extend(order[pos:pos + take])
            pos += take
        yield np.asarray(idx)


def train_step(model: ConvLLaVA, batch: MultimodalBatch, micro_batch: int | None):
    """Loss and accumulated gradients over ``batch``.

    Micro-batches are weighted by their share of target tokens so the result
    equals one pass over the whole batch.
    """
    params = model.trainable_parameters()
    n = len(batch)
    mb = micro_batch or n
    total_targets = int(batch.loss_mask.sum())
    grads = {k: np.zeros_like(p.data) for k, p in params.items()}
    loss_parts = []
    for lo in range(0, n, mb):
        sub = batch.subset(slice(lo, lo + mb))
        weight = int(sub.loss_mask.sum()) / total_targets
        if weight == 0:
            continue
        loss = lm_loss(model, sub)
        tape = backward_all(loss)
        for k, p in params.items():
            g = tape.get(id(p))
            if g is not None:
                grads[k] += weight * g
        loss_parts.append(weight * loss.item())
    value = math.fsum(loss_parts) if is_deterministic() else float(sum(loss_parts))
    return value, grads


def run_stage(model: ConvLLaVA, plan: StagePlan, data: MultimodalBatch, seed: int = 0,
              opt: OptimizerState | None = None) -> list[MetricRecord]:
    """Train one stage of the protocol and return its (step, stage, lr, loss) log."""
    n = len(data)
    if n == 0:
        raise ValueError("run_stage: empty dataset")
    n_trainable = apply_plan(model, plan)
    total = plan.total_steps(n)
    logger.info("stage=%d encoder=%s projector=%s lm=%s peak_lr=%g batch_size=%d micro_batch=%s "
                "steps=%d trainable=%d", plan.stage, plan.encoder, plan.projector, plan.lm, plan.peak_lr,
                plan.batch_size, plan.micro_batch, total, n_trainable)
    opt = opt or OptimizerState(weight_decay=plan.weight_decay)
    rng = np.random.default_rng(seed)
    records = []
    params = model.trainable_parameters()
    for step, idx in enumerate(_batch_indices(n, plan.batch_size, total, rng), 1):
        lr = cosine_lr(step, total, plan.peak_lr, plan.warmup_ratio)
        loss, grads = train_step(model, data.subset(idx), plan.micro_batch)
        adamw_step(params, grads, opt, lr)
        records.append(MetricRecord(step, plan.stage, lr, loss))
    return records


def run_protocol(model: ConvLLaVA, plans, data_by_stage, seed: int = 0, deterministic: bool = True):
    """Run several stages back to back; ``data_by_stage`` maps stage id to data."""
    prev = is_deterministic()
    set_deterministic(deterministic)
    try:
        log = []
        for plan in plans:
            log.extend(run_stage(model, plan, data_by_stage[plan.stage], seed=seed + plan.stage))
        return log
    finally:
        set_deterministic(prev)


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out

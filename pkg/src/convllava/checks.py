"""Numerical property checks shared by the CLI and the test-suite."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import PRESETS, EncoderConfig, build_encoder, encode_features
from .pipeline import MultimodalBatch, ToyLMConfig, build_model, lm_loss
from .tensor import Tensor, default_dtype, grad, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: str
    checked: int

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_err < tol


def relative_error(a: float, n: float) -> float:
    denom = max(abs(a), abs(n))
    return 0.0 if denom == 0 else abs(a - n) / denom


def finite_difference_check(fn, params: dict[str, Tensor], h: float = 1e-5, coords_per_tensor: int = 3,
                            seed: int = 0, skip_below: float = 1e-9) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn()`` with central differences.

    ``coords_per_tensor`` random entries of each tensor are perturbed (all
    entries for tensors at most that large). Entries whose analytic and
    numeric gradients are both below ``skip_below`` in magnitude are counted
    but do not contribute a relative error.
    """
    rng = np.random.default_rng(seed)
    analytic = grad(fn(), params)
    worst, worst_name, checked = 0.0, "", 0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size) if flat.size <= coords_per_tensor else \
                rng.choice(flat.size, coords_per_tensor, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                ana = float(analytic[name].reshape(-1)[i])
                checked += 1
                if max(abs(num), abs(ana)) < skip_below:
                    continue
                err = relative_error(ana, num)
                if err > worst:
                    worst, worst_name = err, f"{name}[{i}] analytic={ana:.6e} numeric={num:.6e}"
    return GradCheckReport(worst, worst_name, checked)


def tiny_lm_config() -> ToyLMConfig:
    return ToyLMConfig(vocab_size=16, embed_dim=16, num_layers=1, heads=2, max_seq=16)


def gradcheck_model(seed: int, image_size: int = 32, coords_per_tensor: int = 2,
                    encoder: EncoderConfig | None = None) -> GradCheckReport:
    """Finite-difference check of the whole model (encoder, projector, LM, loss) in float64."""
    import dataclasses

    cfg = dataclasses.replace(encoder or PRESETS["tiny"], dtype="float64")
    with default_dtype(np.float64):
        model = build_model(cfg, tiny_lm_config(), seed=seed)
        # spread parameters away from their structured init so every path carries signal
        rng = np.random.default_rng(seed + 100)
        for p in model.named_parameters().values():
            p.data += rng.normal(0.0, 0.1, p.shape)
        n_vis = model.num_visual_tokens(image_size, image_size)
        t_len = 5
        images = rng.normal(size=(2, 3, image_size, image_size))
        text = rng.integers(0, 16, size=(2, t_len))
        mask = np.zeros((2, n_vis + t_len), dtype=bool)
        mask[:, n_vis + 1:] = True
        batch = MultimodalBatch(images, text, mask)
        params = model.named_parameters()
        return finite_difference_check(lambda: lm_loss(model, batch), params,
                                       coords_per_tensor=coords_per_tensor, seed=seed)


@dataclass
class EquivarianceReport:
    max_abs_diff: float
    margin: int
    grid: tuple[int, int]
    compared_cells: int
    worst_cell: tuple[int, int]

    def passed(self, tol: float = 1e-5) -> bool:
        return self.compared_cells > 0 and self.max_abs_diff < tol


def equivariance_check(config: EncoderConfig | None = None, shift: int | None = None, seed: int = 0,
                       height: int | None = None, width_cells: int | None = None) -> EquivarianceReport:
    """Encode two crops of one canvas offset by ``shift`` pixels horizontally.

    The second crop's grid, moved back by ``shift / D`` cells, must match the
    first on every column outside the receptive-field margin.
    """
    cfg = config or PRESETS["toy5"]
    d = cfg.downsample_factor
    shift = d if shift is None else shift
    if shift % d:
        raise ValueError(f"shift {shift} is not a multiple of the downsampling factor {d}")
    cells = shift // d
    margin = math.ceil(cfg.receptive_radius() / d)
    width_cells = width_cells or 2 * margin + cells + 4
    height = height or 2 * d
    width = width_cells * d
    rng = np.random.default_rng(seed)
    canvas = rng.normal(size=(1, 3, height, width + shift)).astype(cfg.dtype)
    state = build_encoder(cfg, seed)
    with no_grad():
        a = encode_features(state, Tensor(canvas[..., :width])).data
        b = encode_features(state, Tensor(canvas[..., shift:shift + width])).data
    gw = a.shape[3]
    lo, hi = margin + cells, gw - margin  # columns of `a` compared against b[col - cells]
    if hi <= lo:
        return EquivarianceReport(float("nan"), margin, a.shape[2:], 0, (-1, -1))
    diff = np.abs(a[..., lo:hi] - b[..., lo - cells:hi - cells]).max(axis=1)[0]
    r, c = np.unravel_index(np.argmax(diff), diff.shape)
    return EquivarianceReport(float(diff.max()), margin, a.shape[2:], int(diff.size), (int(r), int(c) + lo))

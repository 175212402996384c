"""Acceptance gate. Every criterion prints exactly one PASS/FAIL line."""

import dataclasses
import logging
import time
import tracemalloc
from pathlib import Path

import numpy as np
import pytest

from convllava.analysis import token_count, total_ratio
from convllava.checks import equivariance_check, gradcheck_model
from convllava.encoder import PRESETS, EncoderConfig, build_encoder, count_params, encode
from convllava.pipeline import ToyLMConfig, build_model, forward
from convllava.preprocess import ImageRGB, PreprocessConfig, preprocess
from convllava.tensor import no_grad
from convllava.trainer import StagePlan, apply_plan, default_plans, run_protocol, run_stage, smoothed, synth_data

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def verdict(capsys):
    def emit(label: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, f"{label}: {detail}"
    return emit


# narrow channels, real strides: stem 4, then 2x per stage
NARROW4 = EncoderConfig(depths=(1, 1, 1, 1), channels=(4, 4, 4, 4))
NARROW5 = PRESETS["toy5"]


def test_c1_token_counts(verdict):
    table = [("vit", 336, 576), ("convnext4", 512, 256), ("convnext4", 768, 576), ("convnext5", 768, 144),
             ("convnext5", 1024, 256), ("convnext5", 1536, 576)]
    encoders = {"convnext4": build_encoder(NARROW4), "convnext5": build_encoder(NARROW5)}
    bad = []
    for kind, res, expected in table:
        got = token_count(kind, res)
        if kind in encoders:
            with no_grad():
                live = encode(encoders[kind], np.zeros((1, 3, res, res), dtype=np.float32)).count
        else:
            live = got  # no ViT forward exists; the analyzer is the only source
        if not got == live == expected:
            bad.append(f"{kind}@{res}: analyzer={got} encoder={live} expected={expected}")
    verdict("C1 token counts", not bad, "; ".join(bad) or f"{len(table)} (kind, res) pairs exact")


def test_c2_parameter_count(verdict):
    cfg = PRESETS["convnext-l"]
    analytic = count_params(cfg)
    tracemalloc.start()
    try:
        state = build_encoder(cfg, seed=0)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    built = state.param_count()
    rel = abs(built - 200e6) / 200e6
    ok = built == analytic and rel < 0.05 and sum(cfg.depths) == 36 and peak < 2 * 1024 ** 3
    verdict("C2 parameter count", ok,
            f"params={built:,} ({rel:.2%} from 200M), blocks={sum(cfg.depths)}, peak alloc={peak / 2 ** 30:.2f} GiB")


def test_c3_complexity_ratios(verdict):
    vit_vs_c4 = total_ratio("vit", "convnext4", 672)
    c4_vs_c5 = total_ratio("convnext4", "convnext5", 1536)
    ok = 5 <= vit_vs_c4 <= 10 and 4 <= c4_vs_c5 <= 8
    verdict("C3 complexity ratios", ok,
            f"vit/convnext4@672={vit_vs_c4:.3f} (want [5,10]); convnext4/convnext5@1536={c4_vs_c5:.3f} (want [4,8])")


def test_c4_gradient_fidelity(verdict):
    start = time.perf_counter()
    reports = [gradcheck_model(seed, coords_per_tensor=3) for seed in range(5)]
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_err for r in reports)
    checked = sum(r.checked for r in reports)
    verdict("C4 gradient fidelity", worst < 1e-5 and elapsed < 120,
            f"max rel err={worst:.2e} over {checked} coords, 5 seeds, {elapsed:.0f}s")


def test_c5_translation_equivariance(verdict):
    start = time.perf_counter()
    reps = [equivariance_check(NARROW5, shift=64, seed=0),
            equivariance_check(dataclasses.replace(NARROW5, layer_scale_init=1.0), shift=64, seed=1)]
    elapsed = time.perf_counter() - start
    worst = max(r.max_abs_diff for r in reps)
    ok = all(r.passed(1e-5) for r in reps) and elapsed < 60
    verdict("C5 translation equivariance", ok,
            f"interior max |d|={worst:.2e}, margin={reps[0].margin} cells, "
            f"{sum(r.compared_cells for r in reps)} cells compared, {elapsed:.1f}s")


def test_c6_freeze_protocol(verdict, caplog):
    start = time.perf_counter()
    model = build_model(PRESETS["tiny"], ToyLMConfig(embed_dim=16, heads=2, max_seq=16), seed=0)
    plans = [dataclasses.replace(p, steps=3, micro_batch=64) for p in default_plans(5)]
    data = synth_data(0, 256, image_size=32, n_visual=4)
    problems, logs = [], []
    with caplog.at_level(logging.INFO, logger="convllava.trainer"):
        for plan in plans:
            before = {k: p.data.copy() for k, p in model.named_parameters().items()}
            log = run_protocol(model, [plan], {plan.stage: data}, seed=0)
            apply_plan(model, plan)  # recover the masks the stage ran with
            for k, p in model.named_parameters().items():
                changed = p.data.tobytes() != before[k].tobytes()
                if changed != p.requires_grad:
                    problems.append(f"stage {plan.stage} {k} trainable={p.requires_grad} changed={changed}")
            if max(r.lr for r in log) != plan.peak_lr:
                problems.append(f"stage {plan.stage} peak lr {max(r.lr for r in log)} != {plan.peak_lr}")
            logs.append(log)
    text = caplog.text
    for plan in plans:
        if f"stage={plan.stage} " not in text or f"batch_size={plan.batch_size} " not in text:
            problems.append(f"stage {plan.stage} plan missing from the log")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 300 and [p.batch_size for p in plans] == [256, 256, 128] \
        and [p.peak_lr for p in plans] == [3e-4, 2e-5, 2e-5]
    verdict("C6 freeze-mask protocol", ok,
            "; ".join(problems[:3]) or f"lr 3e-4/2e-5/2e-5, batch 256/256/128, masks exact, {elapsed:.0f}s")


def test_c7_training_smoke(verdict):
    start = time.perf_counter()
    results = {}
    for shuffled in (False, True):
        model = build_model(PRESETS["tiny"], ToyLMConfig(embed_dim=64, max_seq=32), seed=0)
        data = synth_data(0, 64, image_size=64, n_visual=16, shuffle_images=shuffled)
        plan = StagePlan(1, "from_stage:5", projector=True, lm=False, peak_lr=5e-3, batch_size=32, steps=300)
        losses = [r.loss for r in run_stage(model, plan, data, seed=0)]
        results[shuffled] = (float(np.mean(losses[:5])), float(smoothed(losses)[-1]))
    elapsed = time.perf_counter() - start
    init, final = results[False]
    ratio = final / init
    gap = 1 - final / results[True][1]
    ok = ratio <= 0.7 and gap >= 0.2 and elapsed < 600
    verdict("C7 training smoke", ok,
            f"smoothed loss {init:.3f}->{final:.3f} (ratio {ratio:.3f}), shuffled control {results[True][1]:.3f} "
            f"(gap {gap:.1%}), {elapsed:.0f}s")


def test_c8_any_aspect_inference(verdict):
    # the factor-64 geometry that yields 576 tokens at 1536 in C1, run above that resolution
    model = build_model(NARROW5, ToyLMConfig(embed_dim=16, max_seq=1100), seed=0)
    img = ImageRGB.from_array(np.random.default_rng(0).integers(0, 256, (1000, 1500, 3)))
    x = preprocess(img, PreprocessConfig("short_side", 1664, factor=64))
    with no_grad():
        logits, n = forward(model, x, [[0, 5, 9]])
    h, w = x.shape[2:]
    expected = (h // 64) * (w // 64)
    ok = min(h, w) == 1664 and n == expected == token_count("convnext5", (h, w)) and logits.shape[1] == n + 3
    verdict("C8 any-aspect inference", ok, f"input {h}x{w} at short side 1664 -> N={n} = {h // 64}x{w // 64}")


def test_c9_benchmarks_out_of_scope(verdict):
    readme = (ROOT / "README.md").read_text()
    ok = "Benchmark accuracy is not reproduced" in readme
    verdict("C9 benchmark non-reproducibility", ok,
            "README states that benchmark accuracies are out of scope; the property suites stand in for them")

"""Command-line entry point: ``convllava <subcommand> ...``.

Exit codes: 0 success, 1 runtime or property failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import analysis, checkpoint
from .checks import equivariance_check, gradcheck_model
from .config import format_kv, read_kv, resolve_encoder_config
from .encoder import PRESETS, build_encoder, count_params, encode
from .pipeline import ToyLMConfig, build_model
from .preprocess import TENSOR_MAGIC, PreprocessConfig, load_ppm, load_tensor, preprocess, save_tensor
from .tensor import Tensor, no_grad

logger = logging.getLogger("convllava")


class UsageError(Exception):
    pass


def _csv_list(text: str, cast=str) -> list:
    try:
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse list {text!r}: {exc}") from exc


def _short(x: float) -> str:
    """``1e-05`` -> ``1e-5``."""
    return re.sub(r"e([+-])0*(\d)", lambda m: "e" + ("-" if m.group(1) == "-" else "") + m.group(2), f"{x:g}")


# -- analyze ---------------------------------------------------------------


def cmd_analyze(args) -> int:
    kinds = _csv_list(args.kinds)
    bad = [k for k in kinds if k not in analysis.KINDS]
    if bad:
        raise UsageError(f"invalid kind(s) {', '.join(bad)}; valid kinds: {', '.join(analysis.KINDS)}")
    resolutions = _csv_list(args.resolutions, int)
    if not resolutions or min(resolutions) <= 0:
        raise UsageError("resolutions must be positive integers")
    text = analysis.emit_curves(kinds, resolutions)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.plot:
        from .plotting import plot_flops_curves

        plot_flops_curves(analysis.curve_rows(kinds, resolutions), args.plot)
    return 0


# -- encode / preprocess ---------------------------------------------------


def _load_input(path: str, cfg: PreprocessConfig) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    with p.open("rb") as fh:
        head = fh.read(4)
    if head == TENSOR_MAGIC:
        arr = load_tensor(p)
        if arr.ndim != 4:
            raise UsageError(f"{path}: pre-decoded tensor must be (B, 3, H, W), got {arr.shape}")
        return arr
    return preprocess(load_ppm(p), cfg)


def _preprocess_config(args, factor: int) -> PreprocessConfig:
    try:
        return PreprocessConfig(mode=args.mode, resolution=args.res, factor=factor)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_preprocess(args) -> int:
    factor = args.factor or resolve_encoder_config(args.config).downsample_factor
    arr = _load_input(args.image, _preprocess_config(args, factor))
    save_tensor(arr, args.out)
    print(f"shape={'x'.join(str(d) for d in arr.shape)}")
    return 0


def cmd_encode(args) -> int:
    cfg = resolve_encoder_config(args.config)
    pcfg = _preprocess_config(args, cfg.downsample_factor)
    image = _load_input(args.image, pcfg)
    state = build_encoder(cfg, args.seed)
    if args.ckpt:
        loaded = checkpoint.load(args.ckpt)
        if any(k.startswith("encoder.") for k in loaded):
            loaded = {k[len("encoder."):]: v for k, v in loaded.items() if k.startswith("encoder.")}
        missing = [k for k in state.params if k not in loaded]
        if missing:
            raise checkpoint.CheckpointError(f"{args.ckpt}: missing encoder entries, e.g. {missing[0]!r}")
        for k, p in state.params.items():
            if loaded[k].shape != p.shape:
                raise checkpoint.CheckpointError(f"{args.ckpt}: {k} has shape {loaded[k].shape}, expected {p.shape}")
        for k, p in state.params.items():
            p.data = np.ascontiguousarray(loaded[k], dtype=p.dtype)
    with no_grad():
        tokens = encode(state, Tensor(image, dtype=np.dtype(cfg.dtype)))
    if args.out:
        save_tensor(tokens.tokens.data, args.out)
    print(f"tokens={tokens.count} grid={tokens.grid_h}x{tokens.grid_w}")
    return 0


# -- property commands -----------------------------------------------------


def cmd_gradcheck(args) -> int:
    cfg = resolve_encoder_config(args.config)
    seeds = [args.seed + i for i in range(args.seeds)]
    worst = None
    for s in seeds:
        rep = gradcheck_model(s, encoder=cfg, coords_per_tensor=args.coords)
        print(f"seed={s} max_rel_err={rep.max_rel_err:.3e} checked={rep.checked}")
        if worst is None or rep.max_rel_err > worst[1].max_rel_err:
            worst = (s, rep)
    s, rep = worst
    if rep.passed(args.tol):
        print(f"max_rel_err<{_short(args.tol)} PASS")
        return 0
    print(f"max_rel_err={rep.max_rel_err:.3e} >= {_short(args.tol)} FAIL; worst seed={s} at {rep.worst}")
    return 1


def cmd_equivariance(args) -> int:
    cfg = resolve_encoder_config(args.config)
    try:
        rep = equivariance_check(cfg, args.shift, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"grid={rep.grid[0]}x{rep.grid[1]} margin={rep.margin} cells={rep.compared_cells}")
    if rep.passed(args.tol):
        print(f"interior max |d|={rep.max_abs_diff:.3e} < {_short(args.tol)} PASS")
        return 0
    print(f"interior max |d|={rep.max_abs_diff:.3e} FAIL; worst cell (row, col)={rep.worst_cell}")
    return 1


# -- train -----------------------------------------------------------------


def build_training_run(values: dict[str, str]):
    """Model, plans and data described by a flat plan file."""
    from .trainer import plan_from_kv, synth_data

    if "stages" in values:
        stages = _csv_list(values["stages"], int)
    else:
        stages = [int(values.get("stage", "1"))]
    enc_cfg = resolve_encoder_config(values.get("encoder", "tiny"))
    lm_cfg = ToyLMConfig(
        vocab_size=int(values.get("vocab", 16)),
        embed_dim=int(values.get("embed_dim", 32)),
        num_layers=int(values.get("num_layers", 1)),
        heads=int(values.get("heads", 1)),
        max_seq=int(values.get("max_seq", 64)),
    )
    seed = int(values.get("seed", 0))
    image_size = int(values.get("image_size", 64))
    model = build_model(enc_cfg, lm_cfg, seed)
    shared = {k: v for k, v in values.items() if "." not in k}
    plans = []
    for s in stages:
        kv = dict(shared, stage=str(s), encoder_stages=str(enc_cfg.num_stages))
        kv.pop("encoder", None)
        kv.update({k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(f"stage{s}.")})
        plans.append(plan_from_kv(kv))
    data = synth_data(seed, int(values.get("n_samples", 64)), image_size, int(values.get("caption_len", 5)),
                      lm_cfg.vocab_size, n_visual=model.num_visual_tokens(image_size, image_size))
    return model, plans, data, seed


def cmd_train(args) -> int:
    from dataclasses import asdict

    from .trainer import run_protocol, write_metrics

    if args.data != "synth":
        raise UsageError(f"unknown data source {args.data!r}; only 'synth' is available")
    values = read_kv(args.plan)
    model, plans, data, seed = build_training_run(values)
    if args.init:
        checkpoint.load_into(model.named_parameters(), args.init)
    log = run_protocol(model, plans, {p.stage: data for p in plans}, seed=seed, deterministic=args.det)
    if args.log:
        write_metrics(log, args.log)
    if args.run_config:
        run = dict(values)
        run["deterministic"] = args.det
        for p in plans:
            run.update({f"stage{p.stage}.{k}": v for k, v in asdict(p).items() if k != "stage"})
        Path(args.run_config).write_text(format_kv(run))
    if args.plot:
        from .plotting import plot_loss_curve

        plot_loss_curve(log, args.plot)
    params = {k: v.data for k, v in model.named_parameters().items()}
    if args.out:
        checkpoint.save(params, args.out)
    for p in plans:
        recs = [r for r in log if r.stage == p.stage]
        print(f"stage={p.stage} steps={len(recs)} peak_lr={p.peak_lr:g} batch_size={p.batch_size} "
              f"first_loss={recs[0].loss:.4f} last_loss={recs[-1].loss:.4f}")
    print(f"checkpoint sha256={checkpoint.digest(params)}")
    return 0


# -- inspect ---------------------------------------------------------------


def cmd_inspect(args) -> int:
    if args.ckpt:
        entries = checkpoint.load(args.ckpt)
        total = 0
        for name, arr in entries.items():
            total += arr.size
            print(f"{name}\t{arr.dtype}\t{'x'.join(str(d) for d in arr.shape) or 'scalar'}")
        print(f"entries={len(entries)} params={total}")
    elif args.tensor:
        arr = load_tensor(args.tensor)
        print(f"shape={'x'.join(str(d) for d in arr.shape)} min={arr.min():.6g} max={arr.max():.6g}")
    else:
        cfg = resolve_encoder_config(args.config)
        print(format_kv({
            "stages": cfg.num_stages,
            "depths": cfg.stage_depths,
            "channels": cfg.stage_channels,
            "downsample_factor": cfg.downsample_factor,
            "receptive_radius": cfg.receptive_radius(),
            "params": count_params(cfg),
        }), end="")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convllava", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="FLOPs and token curves as CSV")
    p.add_argument("--kinds", default=",".join(analysis.KINDS))
    p.add_argument("--resolutions", default="336,448,672,768,1024,1344,1536")
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.add_argument("--plot", help="also render the curves to this image file")
    p.set_defaults(func=cmd_analyze)

    presets = ", ".join(PRESETS)
    for name, func, helptext in (("encode", cmd_encode, "image -> visual tokens"),
                                 ("preprocess", cmd_preprocess, "image -> normalized tensor file")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help=f"encoder preset ({presets}) or key=value file")
        p.add_argument("--image", required=True, help="binary PPM or CVT0 tensor file")
        p.add_argument("--mode", choices=("square", "short_side"), default="square")
        p.add_argument("--res", type=int, default=1536)
        p.add_argument("--out", required=(name == "preprocess"))
        if name == "encode":
            p.add_argument("--ckpt")
            p.add_argument("--seed", type=int, default=0)
        else:
            p.add_argument("--factor", type=int, help="override the downsampling factor")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--config", default="tiny")
    p.add_argument("--coords", type=int, default=2, help="entries checked per parameter tensor")
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("equivariance", help="shifted-crop translation check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift", type=int)
    p.add_argument("--config", default="toy5")
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_equivariance)

    p = sub.add_parser("train", help="run training stages from a plan file")
    p.add_argument("--plan", required=True)
    p.add_argument("--data", default="synth")
    p.add_argument("--det", action="store_true", help="deterministic reductions")
    p.add_argument("--out", help="final checkpoint path")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--log", help="metrics log path (step,stage,lr,loss)")
    p.add_argument("--run-config", help="write the resolved run config here")
    p.add_argument("--plot", help="render loss and lr curves to this image file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inspect", help="describe a checkpoint, tensor file or encoder config")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ckpt")
    g.add_argument("--tensor")
    g.add_argument("--config")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"convllava {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError, ValueError) as exc:
        print(f"convllava {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

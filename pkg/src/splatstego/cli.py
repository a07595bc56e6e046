"""Command-line entry point: ``splatstego <subcommand> ...``.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .config import Config, ConfigError, apply_overrides, dump_config, load_config

log = logging.getLogger("splatstego")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={int(args.seed)}")
    return apply_overrides(cfg, overrides)


def banner(cfg: Config, args) -> None:
    log.info("splatstego %s | seed=%d threads=%s", args.command, cfg.train.seed, args.threads or "default")
    log.info("resolved config:\n%s", dump_config(cfg))


def set_threads(n) -> None:
    if not n:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


def _ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _camera_for(args, cfg: Config):
    from .camera import Camera
    from .train import build_rig

    if args.camera:
        with open(args.camera) as fh:
            return Camera.from_dict(json.load(fh))
    rig = build_rig(cfg)
    idx = rig.checking_index if args.view is None else args.view
    if not 0 <= idx < len(rig.cameras):
        raise UsageError(f"--view {idx} out of range for a {len(rig.cameras)}-camera rig")
    return rig.cameras[idx]


def _scene_for(ck, ply):
    from .evaluation import stego_from_checkpoint
    from .io.ply import load_ply

    return load_ply(ply) if ply else stego_from_checkpoint(ck)


def _print_table(rows, columns) -> None:
    print(",".join(columns))
    for r in rows:
        print(",".join(f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in columns))


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, cfg: Config) -> int:
    from .io.ply import save_ply
    from .synth import synth_scene

    s = cfg.scene
    shape = args.shape or s.shape
    prims = s.prim_count if args.prims is None else args.prims
    tex = s.texture_seed if args.texture_seed is None else args.texture_seed
    if prims <= 0:
        raise UsageError("prim_count must be positive")
    scene = synth_scene(shape, prims, tex)
    save_ply(scene, args.out)
    log.info("wrote %d primitives to %s", len(scene), args.out)
    return EXIT_OK


def cmd_fit(args, cfg: Config) -> int:
    from .fit import fit_scene, load_posed_images
    from .io.ply import save_ply

    images, cameras = load_posed_images(args.cameras, args.images)
    scene = fit_scene(images, cameras, args.prims, args.steps, seed=cfg.train.seed,
                      views_per_step=cfg.train.views_per_step, tile_size=cfg.train.tile_size,
                      on_step=lambda s, l: log.info("fit step %d loss %.5f", s, l) if s % 50 == 0 else None)
    save_ply(scene, args.out)
    log.info("wrote fitted scene (%d primitives) to %s", len(scene), args.out)
    return EXIT_OK


def cmd_embed(args, cfg: Config) -> int:
    from .io.checkpoint import save_checkpoint
    from .io.metrics_csv import CsvWriter
    from .io.ply import save_ply
    from .train import CSV_COLUMNS, Trainer, TrainingAborted

    overrides = []
    if args.base:
        overrides.append(f"scene.path={json.dumps(args.base)}")
    if args.payload:
        if args.payload == "bits":
            overrides.append('payload.kind="bits"')
        elif args.payload in ("pattern", "emoji"):
            overrides += ['payload.kind="image"', f'payload.source="{args.payload}"']
        else:
            overrides += ['payload.kind="image"', 'payload.source="png"', f"payload.path={json.dumps(args.payload)}"]
    if overrides:
        cfg = apply_overrides(cfg, overrides)
        log.info("payload/base overrides: %s", overrides)
    out = _ensure_dir(args.out_dir)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(dump_config(cfg) + "\n")
    trainer = Trainer(cfg)
    ck_path = os.path.join(out, "checkpoint.gstg")
    t0 = time.time()

    def on_step(m):
        writer.write(m)
        if m["step"] % 50 == 0:
            log.info("step %d loss %.5f render %.2f dB hidden %.2f dB ssim %.3f acc %.3f keep %.2f",
                     m["step"], m["loss_total"], m["psnr_render"], m["psnr_hidden"], m["ssim_hidden"],
                     m["bit_acc"], m["mask_keep_frac"])

    with CsvWriter(os.path.join(out, "metrics.csv"), CSV_COLUMNS) as writer:
        try:
            trainer.run(on_step=on_step, on_checkpoint=lambda tr: save_checkpoint(tr.checkpoint(), ck_path))
        except TrainingAborted as exc:
            save_checkpoint(trainer.checkpoint(), ck_path)
            log.error("training aborted: %s (last good state saved to %s)", exc, ck_path)
            return EXIT_NUMERIC
    save_checkpoint(trainer.checkpoint(), ck_path)
    save_ply(trainer.stego_scene(), os.path.join(out, "stego.ply"))
    log.info("embedded in %.1fs; wrote %s and stego.ply", time.time() - t0, ck_path)
    return EXIT_OK


def cmd_render(args, cfg: Config) -> int:
    from .io.ply import load_ply
    from .io.png import save_png
    from .rasterizer import tile_render

    scene = load_ply(args.ply)
    img = tile_render(scene, _camera_for(args, cfg), cfg.train.tile_size).pixels
    save_png(img, args.out)
    log.info("rendered %s -> %s", args.ply, args.out)
    return EXIT_OK


def cmd_recover(args, cfg: Config) -> int:
    from .evaluation import recover
    from .io.checkpoint import load_checkpoint
    from .io.png import save_png

    ck = load_checkpoint(args.checkpoint)
    rec = recover(ck, _scene_for(ck, args.ply))
    if rec.kind == "image":
        if args.out:
            save_png(rec.image, args.out)
        print(f"psnr_hidden={rec.metrics['psnr_hidden']:.4f} ssim_hidden={rec.metrics['ssim_hidden']:.4f}")
        if rec.negative:
            print(f"null_ssim_hidden={rec.negative['ssim_hidden']:.4f} null_l1={rec.negative['l1_null']:.4f}")
    else:
        print("bits=" + "".join(str(int(b)) for b in rec.bits))
        print(f"bit_acc={rec.metrics['bit_acc']:.4f}")
        if rec.negative:
            print(f"null_bit_acc={rec.negative['bit_acc']:.4f}")
    return EXIT_OK


def cmd_evaluate(args, cfg: Config) -> int:
    from .evaluation import evaluate
    from .io.checkpoint import load_checkpoint
    from .io.metrics_csv import write_csv

    ck = load_checkpoint(args.checkpoint)
    res = evaluate(ck, _scene_for(ck, args.ply))
    _print_table(res["views"], ("view", "psnr_render", "ssim_render"))
    print()
    summary = res["summary"]
    _print_table([summary], tuple(summary))
    if args.out:
        write_csv(args.out, ("view", "psnr_render", "ssim_render"), res["views"])
        base, ext = os.path.splitext(args.out)
        write_csv(f"{base}_summary{ext or '.csv'}", tuple(summary), [summary])
    return EXIT_OK


DEFAULT_SWEEPS = {"jpeg": [90, 70, 50, 30, 10], "blur": [0, 0.5, 1, 1.5, 2], "noise": [0, 0.01, 0.02, 0.05, 0.1]}


def cmd_robustness(args, cfg: Config) -> int:
    from .evaluation import SWEEP_COLUMNS, robustness_sweep
    from .io.checkpoint import load_checkpoint
    from .io.metrics_csv import write_csv
    from .perturb import PerturbSpec
    from .plotting import plot_sweep

    out = _ensure_dir(args.out_dir)
    kinds = args.kind or ["jpeg", "blur"]
    cks = [load_checkpoint(p) for p in args.checkpoint]
    for kind in kinds:
        sweep = args.sweep if args.sweep else DEFAULT_SWEEPS[kind]
        spec = PerturbSpec(kind, sweep, cfg.train.seed)
        runs = []
        for i, ck in enumerate(cks):
            rows = robustness_sweep(ck, _scene_for(ck, args.ply if len(cks) == 1 else None), spec)
            runs.append(rows)
            suffix = f"_{i}" if len(cks) > 1 else ""
            write_csv(os.path.join(out, f"robustness_{kind}{suffix}.csv"), SWEEP_COLUMNS, rows)
            print(f"# {kind} ({args.checkpoint[i]})")
            _print_table(rows, SWEEP_COLUMNS)
        plot_sweep(kind, runs, os.path.join(out, f"robustness_{kind}.svg"))
        log.info("wrote robustness_%s.csv/.svg to %s", kind, out)
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config) -> int:
    from .gradcheck import all_suites

    ok = True
    print(f"{'suite':<20} {'max_rel_err':>12}  result")
    for name, suite in all_suites(cfg.train.seed).items():
        rep = suite()
        ok &= rep.passed
        print(f"{name:<20} {rep.max_error:>12.3e}  {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "embed": cmd_embed, "render": cmd_render, "recover": cmd_recover,
            "evaluate": cmd_evaluate, "robustness": cmd_robustness, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override (repeatable)")
    common.add_argument("--seed", type=int, help="training/sampling seed (train.seed)")
    common.add_argument("--threads", type=int, help="renderer thread count")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = argparse.ArgumentParser(prog="splatstego", description="Steganographic Gaussian-splatting toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="procedural base scene")
    s.add_argument("--shape", choices=["sphere", "torus", "box"])
    s.add_argument("--prims", type=int)
    s.add_argument("--texture-seed", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("fit", parents=[common], help="fit a scene to posed PNGs")
    s.add_argument("--cameras", required=True, help="cameras JSON")
    s.add_argument("--images", nargs="*", help="PNG paths (default: listed in the cameras JSON)")
    s.add_argument("--prims", type=int, required=True)
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--out", required=True)

    s = sub.add_parser("embed", parents=[common], help="train the hiding model")
    s.add_argument("--base", help="base scene PLY (default: synthetic scene from config)")
    s.add_argument("--payload", help="PNG path, 'pattern', 'emoji' or 'bits'")
    s.add_argument("--out-dir", required=True)

    s = sub.add_parser("render", parents=[common], help="render a PLY to PNG")
    s.add_argument("--ply", required=True)
    s.add_argument("--camera", help="camera JSON (default: a rig camera)")
    s.add_argument("--view", type=int, help="rig camera index (default: checking camera)")
    s.add_argument("--out", required=True)

    for name, helptext in (("recover", "decode the payload"), ("evaluate", "render fidelity + recovery table")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--ply", help="scene to decode (default: regenerated stego scene)")
        s.add_argument("--out", help="decoded PNG (recover) or CSV (evaluate)")

    s = sub.add_parser("robustness", parents=[common], help="perturbation sweeps")
    s.add_argument("--checkpoint", required=True, nargs="+", help="one or more checkpoints (band across them)")
    s.add_argument("--ply")
    s.add_argument("--kind", action="append", choices=["jpeg", "blur", "noise"])
    s.add_argument("--sweep", type=float, nargs="+")
    s.add_argument("--out-dir", required=True)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    from .autodiff import NonFiniteError
    from .train import TrainingAborted

    try:
        cfg = resolve_config(args)
        set_threads(args.threads)
        banner(cfg, args)
        return COMMANDS[args.command](args, cfg)
    except (NonFiniteError, FloatingPointError, TrainingAborted) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

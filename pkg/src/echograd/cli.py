"""Command-line entry point.

Subcommands: ``make-scene``, ``render``, ``gradcheck``, ``reconstruct``,
``eval``.  Exit codes: 0 success, 2 configuration error, 3 numerical
failure, 4 tolerance failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io as eio
from .config import ConfigError, RunConfig, build_config, dump_config
from .gradcheck import gradcheck
from .reconstruct import (LossSpec, NumericalFailure, OptimState, build_problem,
                          eval_bathymetry, reconstruct)
from .renderer import Waterfall, render_waterfall
from .scene import Heightfield, heightfield_to_mesh
from .sonar import pose_rows

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_TOLERANCE = 4


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _load_config(args) -> RunConfig:
    over = _overrides(args.set)
    if args.seed is not None:
        over.setdefault("run.seed", str(args.seed))
        over.setdefault("scene.seed", str(args.seed))
    if args.threads is not None:
        over.setdefault("run.threads", str(args.threads))
    return build_config(args.preset, args.config, over)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def split_rows_into_lines(rows) -> list[tuple[int, int]]:
    """(start, stop) row ranges of each survey line, split on heading change
    or a position jump."""
    if not rows:
        return []
    bounds = [0]
    positions = np.array([r[0].position[:2] for r in rows])
    headings = np.array([r[0].heading for r in rows])
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    typical = np.median(steps[steps > 0]) if (steps > 0).any() else 1.0
    for i in range(1, len(rows)):
        jump = steps[i - 1] > 2.5 * typical
        turn = not np.isclose(headings[i], headings[i - 1])
        if jump or turn:
            bounds.append(i)
    bounds.append(len(rows))
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def cmd_make_scene(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args)
    truth = cfg.truth_heightfield()
    poses = cfg.survey_poses()
    eio.write_heightfield(out / "truth.ehf", truth)
    eio.write_heightfield_csv(out / "truth.csv", truth)
    eio.write_obj(out / "truth.obj", heightfield_to_mesh(truth, cfg.run.albedo))
    eio.write_pose_csv(out / "poses.csv", poses)
    (out / "config.cfg").write_text(dump_config(cfg))
    print(f"scene '{cfg.scene.kind}': {truth.nx}x{truth.ny} grid at "
          f"{truth.cell_size} m, {len(poses)} poses -> {out}")
    return EXIT_OK


def _read_scene_and_rows(cfg: RunConfig, scene_path: str, poses_path: str):
    hf = eio.read_heightfield(scene_path)
    poses = eio.read_pose_csv(poses_path, float(np.deg2rad(cfg.sonar.tilt_deg)))
    return hf, pose_rows(poses)


def cmd_render(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args)
    hf, rows = _read_scene_and_rows(cfg, args.scene, args.poses)
    mesh = heightfield_to_mesh(hf, cfg.run.albedo)
    intr = cfg.intrinsics()
    wf = render_waterfall(mesh, rows, intr, cfg.beam(), cfg.render_params(),
                          threads=cfg.threads())
    for k, (lo, hi) in enumerate(split_rows_into_lines(rows)):
        data = wf.data[lo:hi]
        eio.write_float_grid(out / f"waterfall_line{k}.efg", data, cell=intr.bin_width)
        eio.write_waterfall_png(out / f"waterfall_line{k}.png", data)
    print(f"rendered {wf.n_pings} pings ({wf.data.shape[0]}x{wf.data.shape[1]}) -> {out}")
    return EXIT_OK


def _read_reference(ref_dir: Path) -> Waterfall:
    files = sorted(ref_dir.glob("waterfall_line*.efg"),
                   key=lambda p: int(p.stem.replace("waterfall_line", "")))
    if not files:
        raise FileNotFoundError(f"no waterfall_line*.efg files in {ref_dir}")
    return Waterfall(np.concatenate([eio.read_float_grid(f) for f in files]))


def _save_state(out: Path, epoch: int, hf: Heightfield, state: OptimState) -> None:
    eio.write_heightfield(out / f"checkpoint_{epoch:04d}.ehf", hf)
    np.savez(out / f"checkpoint_{epoch:04d}.npz", m=state.m, v=state.v,
             epoch=state.epoch, history=np.array(state.loss_history))


def _write_loss_csv(path: Path, history, first_epoch: int = 0) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,image_mse,normal_consistency,total\n")
        for e, (img, reg, tot) in enumerate(history, start=first_epoch):
            fh.write(f"{e},{img!r},{reg!r},{tot!r}\n")


def _load_resume_state(run_dir: Path) -> OptimState:
    ckpts = sorted(run_dir.glob("checkpoint_*.ehf"))
    if not ckpts:
        raise ConfigError(f"no checkpoints found in {run_dir}")
    last = ckpts[-1]
    epoch = int(last.stem.split("_")[1])
    hf = eio.read_heightfield(last)
    data = np.load(run_dir / f"checkpoint_{epoch:04d}.npz")
    history = [tuple(row) for row in data["history"]]
    return OptimState(int(data["epoch"]), hf, data["m"], data["v"], history)


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args)
    _hf_scene, rows = _read_scene_and_rows(cfg, args.scene, args.poses)
    reference = _read_reference(Path(args.reference))
    state = _load_resume_state(Path(args.resume)) if args.resume else None
    init = cfg.init_heightfield()
    intr = cfg.intrinsics()
    (out / "config.cfg").write_text(dump_config(cfg))

    def checkpoint(epoch, hf, st):
        _save_state(out, epoch, hf, st)
        _write_loss_csv(out / "loss.csv", st.loss_history)

    try:
        estimate, final = reconstruct(
            reference, rows, intr, cfg.beam(), cfg.render_params(), cfg.loss_spec(),
            init, cfg.run.epochs, cfg.adam(), freeze_boundary=cfg.run.freeze_boundary,
            threads=cfg.threads(), albedo=cfg.run.albedo, state=state,
            checkpoint_cb=checkpoint, checkpoint_every=cfg.run.checkpoint_every,
        )
    except NumericalFailure as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL

    _write_loss_csv(out / "loss.csv", final.loss_history)
    eio.write_heightfield(out / "estimate.ehf", estimate)
    eio.write_heightfield_csv(out / "estimate.csv", estimate)
    mesh = heightfield_to_mesh(estimate, cfg.run.albedo)
    eio.write_obj(out / "estimate.obj", mesh)
    wf = render_waterfall(mesh, rows, intr, cfg.beam(), cfg.render_params(),
                          threads=cfg.threads())
    for k, (lo, hi) in enumerate(split_rows_into_lines(rows)):
        eio.write_float_grid(out / f"rendered_line{k}.efg", wf.data[lo:hi],
                             cell=intr.bin_width)
        eio.write_waterfall_png(out / f"rendered_line{k}.png", wf.data[lo:hi])
        eio.write_waterfall_png(out / f"reference_line{k}.png", reference.data[lo:hi])

    first, last = final.loss_history[0], final.loss_history[-1]
    print(f"epochs {final.epoch}: image MSE {first[0]:.6g} -> {last[0]:.6g}, "
          f"total {first[2]:.6g} -> {last[2]:.6g}")
    if args.truth:
        truth = eio.read_heightfield(args.truth)
        metrics = eval_bathymetry(
            estimate, truth,
            feature_center=(0.0, 0.0) if cfg.scene.kind == "dome" else None,
            feature_radius=cfg.scene.dome_radius if cfg.scene.kind == "dome" else None,
        )
        lines = [f"{k} = {v!r}" for k, v in metrics.as_dict().items()]
        (out / "metrics.txt").write_text("\n".join(lines) + "\n")
        for line in lines:
            print(line)
    return EXIT_OK


def _corrupted_exp_vjp(g, out):
    return (g * out * 1.01,)


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args)
    intr = cfg.intrinsics()
    params = cfg.render_params()
    truth_mesh = heightfield_to_mesh(cfg.truth_heightfield(), cfg.run.albedo)
    rows = pose_rows(cfg.survey_poses())
    reference = render_waterfall(truth_mesh, rows, intr, cfg.beam(), params)
    init = cfg.init_heightfield()
    problem = build_problem(init, rows, reference, intr, cfg.beam(), params,
                            cfg.loss_spec(), cfg.run.albedo)
    from .reconstruct import free_parameter_mask
    free = free_parameter_mask(init, cfg.run.freeze_boundary)

    original = ad.VJPS["exp"]
    if args.corrupt_adjoint:
        ad.VJPS["exp"] = _corrupted_exp_vjp
    try:
        report = gradcheck(problem, init.z.ravel(), eps=cfg.run.grad_eps,
                           free_mask=free.ravel(), threads=cfg.threads())
    finally:
        ad.VJPS["exp"] = original

    report.to_csv(out / "gradreport.csv")
    tol = args.tol if args.tol is not None else cfg.run.grad_tol
    ok = report.passes(tol)
    print(f"gradcheck: {len(report.indices)} parameters, {report.n_flipped} branch flips, "
          f"max rel error {report.max_rel_error():.3e} "
          f"(tolerance {tol:g}) -> {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_eval(args) -> int:
    estimate = eio.read_heightfield(args.estimate)
    truth = eio.read_heightfield(args.truth)
    center = (args.feature_x, args.feature_y) if args.feature_radius else None
    metrics = eval_bathymetry(estimate, truth, feature_center=center,
                              feature_radius=args.feature_radius)
    for k, v in metrics.as_dict().items():
        print(f"{k} = {v!r}")
    if args.out:
        out = _outdir(args)
        with open(out / "metrics.csv", "w") as fh:
            items = metrics.as_dict()
            fh.write(",".join(items.keys()) + "\n")
            fh.write(",".join(repr(v) for v in items.values()) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echograd",
        description="Differentiable sidescan-sonar rendering and bathymetry reconstruction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--preset", help="named preset (dome, rocky, flat, gradcheck)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None,
                       help="ping-level workers; 1 is the bitwise reference")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("make-scene", help="generate a scene and its survey")
    common(p)
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("render", help="render waterfalls for a scene and pose file")
    common(p)
    p.add_argument("--scene", required=True, help="heightfield .ehf file")
    p.add_argument("--poses", required=True, help="pose CSV")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    common(p)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--corrupt-adjoint", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("reconstruct", help="optimize a heightfield against reference imagery")
    common(p)
    p.add_argument("--scene", required=True, help="heightfield .ehf (for grid/survey frame)")
    p.add_argument("--poses", required=True, help="pose CSV")
    p.add_argument("--reference", required=True, help="directory of waterfall_line*.efg")
    p.add_argument("--truth", default=None, help="truth .ehf for final metrics")
    p.add_argument("--resume", default=None, help="run directory to resume from")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="compare an estimated heightfield against truth")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--feature-x", type=float, default=0.0)
    p.add_argument("--feature-y", type=float, default=0.0)
    p.add_argument("--feature-radius", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"missing file: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

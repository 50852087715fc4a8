"""simulate <scene.cfg> -o <dir>: run a scene, write OBJ frames, per-frame stats and a run summary."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optimizer import OptimizerError, Simulator, SolverOptions, surface_min_distance
from .scene import load_scene

log = logging.getLogger("augcontact")

CSV_COLUMNS = ["frame", "wall_ms", "newton_iters", "pcg_iters_total", "n_constraints_max", "min_distance",
               "sigma_final"]
ITER_COLUMNS = ["frame", "iter", "residual", "ratio", "pcg_iters", "warm_iters", "alpha", "toi_truncated",
                "n_active", "n_aug", "sigma", "anchor_change"]


@dataclass
class FrameReport:
    frame: int
    wall_ms: float
    newton_iters: int
    pcg_iters_total: int
    n_constraints_max: int
    min_distance: float
    sigma_final: float


@dataclass
class RunReport:
    frames: list = field(default_factory=list)
    success: bool = False
    error: str | None = None
    warm_iters_total: int = 0
    warm_work_total: float = 0.0
    max_final_ratio: float = 0.0
    optimizations_total: int = 0

    def summary(self) -> dict:
        f = self.frames
        n = len(f)
        return {
            "success": self.success,
            "error": self.error,
            "frames_completed": n,
            "newton_iters_total": sum(r.newton_iters for r in f),
            "newton_iters_avg": sum(r.newton_iters for r in f) / n if n else 0.0,
            "pcg_iters_total": sum(r.pcg_iters_total for r in f),
            "pcg_iters_per_newton": (sum(r.pcg_iters_total for r in f) / max(sum(r.newton_iters for r in f), 1)),
            "warm_start_inner_iters": self.warm_iters_total,
            "warm_start_inner_work": self.warm_work_total,
            "n_constraints_max": max((r.n_constraints_max for r in f), default=0),
            "min_distance": _json_float(min((r.min_distance for r in f), default=math.inf)),
            "sigma_final": f[-1].sigma_final if f else None,
            "max_final_ratio": self.max_final_ratio,
            "optimizations_total": self.optimizations_total,
            "wall_ms_total": sum(r.wall_ms for r in f),
        }


def _json_float(v):
    return None if not math.isfinite(v) else v


def _fmt(v, f32: bool) -> str:
    return repr(float(np.float32(v))) if f32 else repr(float(v))


def write_obj(path, x, tris, f32=False):
    verts = np.unique(tris)
    remap = np.full(len(x), -1, dtype=np.int64)
    remap[verts] = np.arange(len(verts))
    with open(path, "w") as f:
        for p in x[verts]:
            f.write("v " + " ".join(_fmt(c, f32) for c in p) + "\n")
        for t in remap[tris] + 1:
            f.write(f"f {t[0]} {t[1]} {t[2]}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="simulate", description=__doc__)
    ap.add_argument("scene", type=Path)
    ap.add_argument("-o", "--out", type=Path, required=True)
    ap.add_argument("--frames", type=int, default=None, help="override the scene frame count")
    ap.add_argument("--no-warm-start", action="store_true")
    ap.add_argument("--no-auglag", action="store_true", help="plain barrier Newton (empty augmentation set, fixed sigma)")
    ap.add_argument("--friction-update", choices=["per-iteration", "per-optimization"], default="per-iteration")
    ap.add_argument("--precond", choices=["block-jacobi", "additive"], default="block-jacobi")
    ap.add_argument("--deterministic", action="store_true",
                    help="bit-reproducible outputs (wall_ms is written as 0)")
    ap.add_argument("--fp", choices=["f64", "f32"], default="f64")
    ap.add_argument("--dump-positions", action="store_true", help="also write all nodal positions per frame")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(scene_path, out_dir, frames=None, options: SolverOptions | None = None, deterministic=False,
        dump_positions=False) -> RunReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = load_scene(scene_path)
    opt = options or SolverOptions()
    sim = Simulator(scene, opt)
    report = RunReport()
    state = sim.initial_state()
    total = scene.frames if frames is None else frames
    f32 = opt.fp32
    tris = scene.mesh.surface_tris
    with open(out / "stats.csv", "w", newline="") as fs, open(out / "newton.csv", "w", newline="") as fi:
        ws, wi = csv.writer(fs), csv.writer(fi)
        ws.writerow(CSV_COLUMNS)
        wi.writerow(ITER_COLUMNS)
        try:
            for k in range(total):
                t0 = time.perf_counter()
                state, stats = sim.step(state)
                wall = 0.0 if deterministic else 1e3 * (time.perf_counter() - t0)
                dmin = surface_min_distance(sim, state.x)
                fr = FrameReport(state.frame, wall, stats.newton_iters, stats.pcg_iters, stats.max_active, dmin,
                                 stats.sigma_final)
                report.frames.append(fr)
                report.warm_iters_total += stats.warm_iters
                report.warm_work_total += stats.warm_work
                report.optimizations_total += stats.optimizations
                report.max_final_ratio = max(report.max_final_ratio, stats.final_ratio)
                ws.writerow([fr.frame, f"{fr.wall_ms:.3f}", fr.newton_iters, fr.pcg_iters_total, fr.n_constraints_max,
                             repr(fr.min_distance), repr(fr.sigma_final)])
                for i, r in enumerate(stats.records):
                    wi.writerow([state.frame, i, repr(r.residual), repr(r.ratio), r.pcg_iters, r.warm_iters,
                                 repr(r.alpha), int(r.toi_truncated), r.n_active, r.n_aug, repr(r.sigma),
                                 repr(r.anchor_change)])
                fs.flush()
                fi.flush()
                write_obj(out / f"frame_{state.frame:04d}.obj", state.x, tris, f32)
                if dump_positions:
                    np.savetxt(out / f"positions_{state.frame:04d}.txt", state.x, fmt="%.17g")
            report.success = True
        except OptimizerError as e:
            report.error = f"frame {state.frame + 1}: {e}"
            log.error("solver failure at %s", report.error)
            if e.x is not None:
                np.savetxt(out / "failed_iterate.txt", np.asarray(e.x).reshape(-1, 3), fmt="%.17g")
    summary = report.summary()
    summary["options"] = {"warm_start": opt.warm_start, "auglag": opt.auglag, "friction_update": opt.friction_update,
                          "precond": opt.precond, "fp": "f32" if opt.fp32 else "f64", "deterministic": deterministic}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    opt = SolverOptions(warm_start=not args.no_warm_start, auglag=not args.no_auglag,
                        friction_update=args.friction_update, precond=args.precond, fp32=args.fp == "f32")
    try:
        report = run(args.scene, args.out, args.frames, opt, args.deterministic, args.dump_positions)
    except (OSError, ValueError) as e:
        print(f"simulate: {e}", file=sys.stderr)
        return 2
    if not report.success:
        print(f"simulate: {report.error}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Backward-Euler time stepping: barrier-augmented Lagrangian outer loop with inexact Newton-PCG inner steps."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import contact as ct
from .collision import ccd_conservative_toi
from .distance import InteriorViolation
from .energy import elastic_all, elastic_energy_per_tet, inertia_energy
from .linalg import (BlockPattern, PcgSolver, additive_precond, assemble, block_jacobi_precond,
                     stiffness_groups, warm_start)
from .scene import Scene

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-4
MAX_NEWTON = 500
ALPHA_MIN = 1e-9
SIGMA_GROWTH = 1.2
SIGMA_JUMP = 100.0
SIGMA_CEIL = 1e8
SIGMA_FLOOR = 1e-11
FRICTION_MODES = ("per-iteration", "per-optimization")


class OptimizerError(RuntimeError):
    """Raised when a time step cannot be completed; carries the best iterate and stats."""

    def __init__(self, msg, x=None, stats=None):
        super().__init__(msg)
        self.x = x
        self.stats = stats


@dataclass
class SimState:
    x: np.ndarray  # (N, 3)
    v: np.ndarray  # (N, 3)
    t: float = 0.0
    frame: int = 0


@dataclass
class SolverOptions:
    warm_start: bool = True
    auglag: bool = True
    friction_update: str = "per-iteration"
    precond: str = "block-jacobi"
    additive_blocks: tuple = (3, 27)
    tol: float = NEWTON_TOL
    max_newton: int = MAX_NEWTON
    max_optimizations: int = 100
    fp32: bool = False

    def __post_init__(self):
        if self.friction_update not in FRICTION_MODES:
            raise ValueError(f"friction update must be one of {FRICTION_MODES}")
        if self.precond not in ("block-jacobi", "additive"):
            raise ValueError("precond must be block-jacobi or additive")


@dataclass
class IterRecord:
    residual: float
    ratio: float
    pcg_iters: int
    alpha: float
    toi_truncated: bool
    n_active: int
    sigma: float
    n_aug: int
    anchor_change: float = 0.0
    warm_iters: int = 0  # inner iterations of the per-group warm-start solves
    warm_work: float = 0.0  # the same, weighted by group size


@dataclass
class NewtonStats:
    records: list = field(default_factory=list)
    converged: bool = False
    final_ratio: float = np.inf
    optimizations: int = 1
    sigma0: float = 0.0
    anchor_change: float = 0.0

    @property
    def newton_iters(self) -> int:
        return len(self.records)

    @property
    def pcg_iters(self) -> int:
        return sum(r.pcg_iters for r in self.records)

    @property
    def warm_iters(self) -> int:
        return sum(r.warm_iters for r in self.records)

    @property
    def warm_work(self) -> float:
        return sum(r.warm_work for r in self.records)

    @property
    def max_active(self) -> int:
        return max((r.n_active for r in self.records), default=0)

    @property
    def sigma_final(self) -> float:
        return self.records[-1].sigma if self.records else self.sigma0


# ---------------------------------------------------------------- penalty scheduling


def sigma_from_gradients(grad_barrier_sum, grad_objective, floor: float) -> float:
    """Least-squares penalty -(sum grad b).grad E / |sum grad b|^2, clamped below by ``floor``."""
    gb = np.asarray(grad_barrier_sum, dtype=float).ravel()
    ge = np.asarray(grad_objective, dtype=float).ravel()
    den = float(gb @ gb)
    if den <= 0.0:
        return float("nan")
    return max(-float(gb @ ge) / den, floor)


def mass_scale(mass, free, gravity, dhat, h) -> float:
    m = float(np.mean(np.asarray(mass)[free])) if np.any(free) else float(np.mean(mass))
    return m * (float(np.linalg.norm(gravity)) + dhat / h**2) / dhat


def next_sigma(sigma, sigma0):
    return min(max(SIGMA_GROWTH * sigma, SIGMA_JUMP * sigma0), SIGMA_CEIL * sigma0)


def ccd_step_bound(topo: ct.SurfaceTopology, x, p, dhat: float) -> tuple[float, bool]:
    """Largest conservative fraction of the motion ``x -> x + p`` that keeps every surface pair apart.

    Pairs whose gap minus their total travel stays above ``dhat`` are skipped
    (the distance is 1-Lipschitz in the relative motion).
    """
    keys, nodes, d0 = topo.candidate_arrays(x, p, dhat)
    if not keys:
        return 1.0, False
    xs = np.asarray(x, dtype=float).reshape(-1, 3)
    dp = np.asarray(p, dtype=float).reshape(-1, 3)
    step = np.linalg.norm(dp[nodes], axis=2)  # (k, 4)
    na = np.array([1 if k[0] == "VF" else 2 for k in keys])
    travel = np.where(na == 1, step[:, 0], step[:, :2].max(axis=1)) + np.where(
        na == 1, step[:, 1:].max(axis=1), step[:, 2:].max(axis=1))
    alpha = 1.0
    for k in np.flatnonzero(d0 - travel <= dhat + 1e-12):
        nd = nodes[k]
        r = ccd_conservative_toi(keys[k][0], xs[nd], xs[nd] + dp[nd], dhat)
        if r.toi is not None and r.toi < alpha:
            alpha = r.toi
    return alpha, alpha < 1.0


# ---------------------------------------------------------------- simulator


class Simulator:
    def __init__(self, scene: Scene, options: SolverOptions | None = None):
        self.scene = scene
        self.opt = options or SolverOptions()
        mesh = scene.mesh
        self.mesh = mesh
        self.n = mesh.node_count
        self.mass = mesh.lumped_mass
        self.free = scene.free
        self.dof_free = np.repeat(self.free, 3)
        self.topo = ct.SurfaceTopology(mesh, self.free)
        self.pattern = BlockPattern.from_adjacency(mesh.adjacency)
        self.groups = list(scene.tet_models().items())
        self.mscale = mass_scale(self.mass, self.free, scene.gravity, scene.dhat, scene.h)
        self.iterate_hook = None  # called as hook(x_old, x_new) after every accepted Newton step

    def initial_state(self) -> SimState:
        return SimState(self.scene.x0.copy(), self.scene.v0.copy(), 0.0, 0)

    # -- objective pieces ---------------------------------------------------

    def _elastic(self, x):
        e, g, st = 0.0, np.zeros(3 * self.n), []
        for model, tets in self.groups:
            ei, gi, si = elastic_all(model, self.mesh, x, tets)
            e += ei
            g += gi
            st.append(si)
        return e, g, st

    def _elastic_per_tet(self, x):
        return [elastic_energy_per_tet(m, self.mesh, x, tets) for m, tets in self.groups]

    def _gradient_parts(self, x, y, pairs, aug, anchors, x_prev, hessian=True):
        sc = self.scene
        gi = (self.mass[:, None] * (x - y).reshape(-1, 3) / sc.h**2).ravel()
        _, ge, st = self._elastic(x)
        _, gc, sc_st = ct.contact_derivatives(self.topo, x, pairs, aug, sc.dhat, self.n, self.opt.auglag, hessian)
        _, gf, sf = ct.friction_potential(x, x_prev, anchors, sc.chi, sc.eps_v, sc.h, self.n, hessian)
        g = (gi + ge + gc + gf) * self.dof_free
        return g, st + sc_st + sf

    def _lagrangian_terms(self, x, pairs, aug, anchors, x_prev):
        sc = self.scene
        return (self._elastic_per_tet(x),
                ct.contact_energy(self.topo, x, pairs, aug, sc.dhat, self.opt.auglag),
                ct.friction_energy(x, x_prev, anchors, sc.chi, sc.eps_v, sc.h))

    def lagrangian(self, x, y, pairs, aug, anchors, x_prev) -> float:
        el, c, f = self._lagrangian_terms(x, pairs, aug, anchors, x_prev)
        return inertia_energy(x, y, self.mass, self.scene.h) + sum(float(e.sum()) for e in el) + c + f

    # -- collision helpers --------------------------------------------------

    def max_step(self, x, p) -> tuple[float, bool]:
        """Largest conservative fraction of ``p`` that keeps every surface pair apart."""
        return ccd_step_bound(self.topo, x, p, self.scene.dhat)

    def _pairs(self, x):
        return ct.active_pairs(self.topo, x, self.scene.dhat)

    # -- inner pieces -------------------------------------------------------

    def _solve(self, stencils, g):
        sc = self.scene
        sys_ = assemble(stencils, self.mass, sc.h, self.pattern, fixed=~self.free)
        rhs = -g
        if self.opt.precond == "additive":
            M = additive_precond(sys_, self.opt.additive_blocks)
        else:
            M = block_jacobi_precond(sys_)
        x0, inner, work = None, 0, 0.0
        if self.opt.warm_start:
            groups = stiffness_groups(stencils, self.n)
            x0, inner, work = warm_start(sys_, rhs, groups, self.free)
        solver = PcgSolver(sys_, rhs, M)
        res = solver.solve(x0)
        return solver, res, (inner, work)

    def _line_search(self, x, p, g, y, pairs, aug, anchors, x_prev):
        """Backtracking from the CCD bound; returns (alpha, x_new, pairs_new, truncated) or None."""
        sc = self.scene
        alpha, truncated = self.max_step(x, p)
        el0, c0, f0 = self._lagrangian_terms(x, pairs, aug, anchors, x_prev)
        d = (x - y).reshape(-1, 3)
        pr = p.reshape(-1, 3)
        m = self.mass / sc.h**2
        pd = float(np.sum(m * np.einsum("ij,ij->i", pr, d)))
        pp = float(np.sum(m * np.einsum("ij,ij->i", pr, pr)))
        scale = (abs(inertia_energy(x, y, self.mass, sc.h)) + sum(float(np.abs(e).sum()) for e in el0)
                 + abs(c0) + abs(f0))
        noise = 1e-13 * max(scale, 1e-300)
        while alpha >= ALPHA_MIN:
            xn = x + alpha * p
            try:
                pn = self._pairs(xn)
                if len(pn) > sc.max_constraints:
                    alpha *= 0.5
                    continue
                el1, c1, f1 = self._lagrangian_terms(xn, pn, aug, anchors, x_prev)
            except InteriorViolation:
                alpha *= 0.5
                continue
            delta = (alpha * pd + 0.5 * alpha**2 * pp
                     + sum(float((a - b).sum()) for a, b in zip(el1, el0)) + (c1 - c0) + (f1 - f0))
            if delta < 0.0 or delta <= noise:
                return alpha, xn, pn, truncated
            alpha *= 0.5
        return None

    # -- time step ----------------------------------------------------------

    def _apply_scripts(self, state: SimState):
        x = state.x.copy()
        t1 = state.t + self.scene.h
        target = self.scene.scripted_positions(t1)
        moving = self.scene.scripted
        if not np.any(moving):
            return x.ravel()
        x1 = x.copy()
        x1[moving] = target[moving]
        if np.any(x1 != x):
            alpha, hit = ccd_step_bound(self.topo, x.ravel(), (x1 - x).ravel(), 0.0)
            if hit:
                raise OptimizerError(f"scripted motion at t={t1:g} intersects the surface", x.ravel())
        return x1.ravel()

    def sigma_init(self, x, y, pairs) -> float:
        sc = self.scene
        if not pairs:
            return self.mscale
        gb = ct.barrier_gradient_sum(self.topo, x, pairs, sc.dhat, self.n) * self.dof_free
        gi = (self.mass[:, None] * (x - y).reshape(-1, 3) / sc.h**2).ravel()
        ge = (gi + self._elastic(x)[1]) * self.dof_free
        s = sigma_from_gradients(gb, ge, SIGMA_FLOOR * self.mscale)
        return self.mscale if not np.isfinite(s) else s

    def _update_aug_set(self, aug: ct.AugLagState, pairs, x):
        dhat = self.scene.dhat
        dmin = ct.min_distance(pairs)
        if dmin > ct.AUG_FRACTION * dhat:
            aug.aug = []
        elif dmin < aug.min_d_prev or not aug.aug:
            aug.aug = [p.key for p in pairs if p.d < ct.AUG_FRACTION * dhat]
            for p in pairs:
                if p.key in aug.aug:
                    aug.mu.setdefault(p.key, 0.0)
                    if p.key not in aug.slack:
                        aug.slack[p.key] = float(ct.slack_closed_form(aug.mu[p.key], aug.sigma, dhat, p.d))
        aug.min_d_prev = dmin

    def _dual_update(self, aug: ct.AugLagState, x, pairs):
        dhat = self.scene.dhat
        by_key = {p.key: p for p in pairs}
        for key in aug.aug:
            p = by_key.get(key) or ct.make_pair(self.topo, x, key)
            s = float(ct.slack_closed_form(aug.mu[key], aug.sigma, dhat, p.d))
            aug.slack[key] = s
            aug.mu[key] += aug.sigma * ct.barrier(p.d, dhat + s)[0]

    def step(self, state: SimState) -> tuple[SimState, NewtonStats]:
        sc, opt = self.scene, self.opt
        h = sc.h
        x_prev = state.x.ravel().copy()
        x = self._apply_scripts(state)
        y = (state.x + h * state.v + h * h * sc.gravity).ravel()
        y = np.where(self.dof_free, y, x)
        pairs = self._pairs(x)
        aug = ct.AugLagState()
        aug.sigma0 = aug.sigma = self.sigma_init(x, y, pairs)
        stats = NewtonStats(sigma0=aug.sigma0)
        per_iter = opt.friction_update == "per-iteration"
        friction = sc.chi > 0
        anchors = ct.update_friction_anchors(pairs, sc.dhat, aug, opt.auglag) if friction else []
        e0 = None
        converged_opt = False
        while True:
            if stats.newton_iters >= opt.max_newton:
                stats.final_ratio = stats.records[-1].ratio if stats.records else np.inf
                raise OptimizerError(f"no convergence after {opt.max_newton} Newton iterations", x, stats)
            pairs = self._pairs(x)
            if opt.auglag:
                self._update_aug_set(aug, pairs, x)
            change = 0.0
            if friction and per_iter:
                new = ct.update_friction_anchors(pairs, sc.dhat, aug, opt.auglag)
                change = ct.anchor_change(anchors, new) if stats.newton_iters else np.inf
                anchors = new
            g, stencils = self._gradient_parts(x, y, pairs, aug, anchors, x_prev)
            res = float(np.linalg.norm(g))
            if e0 is None:
                e0 = res
            ratio = res / e0 if e0 > 0 else 0.0
            done = ratio <= opt.tol and (not friction or not per_iter or change <= sc.friction_tol)
            solver, pres, (inner, work) = self._solve(stencils, g)
            p = pres.x * self.dof_free
            pcg_iters = pres.iterations
            if not p @ g < 0.0:
                p = -g
            ls = self._line_search(x, p, g, y, pairs, aug, anchors, x_prev)
            if ls is None:
                pres = solver.resume()
                pcg_iters = pres.iterations
                p = pres.x * self.dof_free
                if not p @ g < 0.0:
                    p = -g
                ls = self._line_search(x, p, g, y, pairs, aug, anchors, x_prev)
            if ls is None:
                if done:
                    # already at the requested tolerance: no step is needed
                    alpha, x_new, pairs_new, trunc = 0.0, x, pairs, False
                else:
                    stats.final_ratio = ratio
                    raise OptimizerError(f"line search failed (alpha < {ALPHA_MIN:g})", x, stats)
            else:
                alpha, x_new, pairs_new, trunc = ls
            if self.iterate_hook is not None and alpha > 0.0:
                self.iterate_hook(x, x_new)
            x = x_new
            if opt.auglag:
                self._dual_update(aug, x, pairs_new)
                if ct.min_distance(pairs_new) < ct.AUG_FRACTION * sc.dhat:
                    aug.sigma = next_sigma(aug.sigma, aug.sigma0)
            stats.records.append(IterRecord(res, ratio, pcg_iters, alpha, trunc, len(pairs), aug.sigma,
                                            len(aug.aug), change if np.isfinite(change) else 0.0, inner, work))
            if not done:
                continue
            stats.final_ratio = ratio
            if friction and not per_iter:
                pairs = self._pairs(x)
                new = ct.update_friction_anchors(pairs, sc.dhat, aug, opt.auglag)
                stats.anchor_change = ct.anchor_change(anchors, new)
                anchors = new
                if stats.anchor_change > sc.friction_tol:
                    if stats.optimizations >= opt.max_optimizations:
                        raise OptimizerError("friction anchors did not converge", x, stats)
                    stats.optimizations += 1
                    continue
            else:
                stats.anchor_change = change if np.isfinite(change) else 0.0
            converged_opt = True
            break
        stats.converged = converged_opt
        x = x.reshape(-1, 3)
        if opt.fp32:
            x = self._round_f32(state.x, x)
        v = (x - state.x) / h
        return SimState(x, v, state.t + h, state.frame + 1), stats

    def _round_f32(self, x_old, x):
        xr = x.astype(np.float32).astype(np.float64)
        if ccd_step_bound(self.topo, x.ravel(), (xr - x).ravel(), 0.0)[1]:
            log.warning("single-precision rounding would intersect; keeping double values")
            return x
        return xr

    def run(self, frames=None, state=None, callback=None):
        """Advance ``frames`` steps; yields (state, stats) per frame."""
        state = self.initial_state() if state is None else state
        for _ in range(self.scene.frames if frames is None else frames):
            state, stats = self.step(state)
            if callback is not None:
                callback(state, stats)
            yield state, stats


def surface_min_distance(sim: Simulator, x) -> float:
    """Smallest distance over all candidate surface pairs within dhat (inf when none)."""
    return ct.min_distance(ct.active_pairs(sim.topo, np.asarray(x).ravel(), sim.scene.dhat))

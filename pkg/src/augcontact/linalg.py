"""Block-sparse 3x3 systems, PCG, block-Jacobi / additive preconditioners and the grouped warm start."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

PCG_TOL = 1e-4
STAGNATION_WINDOW = 100
WARM_TOL = 1e-2
WARM_CAP = 100


# ---------------------------------------------------------------- storage


@dataclass
class BlockPattern:
    """Lower-triangular block pattern from the mesh adjacency (row > col)."""

    n: int
    row_offsets: np.ndarray  # n + 1
    cols: np.ndarray  # column of each lower block, rows grouped
    blocks_to_coords: np.ndarray  # (nnz, 2): (row, col) of each lower block

    @classmethod
    def from_adjacency(cls, adjacency) -> "BlockPattern":
        n = len(adjacency)
        rows, cols = [], []
        for i, nbrs in enumerate(adjacency):
            lower = [int(j) for j in nbrs if j < i]
            rows += [i] * len(lower)
            cols += sorted(lower)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        offsets = np.searchsorted(rows, np.arange(n + 1)).astype(np.int64)
        return cls(n, offsets, cols, np.stack([rows, cols], axis=1) if len(rows) else np.zeros((0, 2), np.int64))

    def slot(self, r, c) -> np.ndarray:
        """Index of lower block (r, c) or -1 when the slot does not exist."""
        r = np.asarray(r, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        keys = self.blocks_to_coords[:, 0] * self.n + self.blocks_to_coords[:, 1]
        q = r * self.n + c
        pos = np.searchsorted(keys, q)
        pos_c = np.minimum(pos, max(len(keys) - 1, 0))
        ok = (len(keys) > 0) & (pos < len(keys))
        ok = ok & (keys[pos_c] == q) if len(keys) else np.zeros_like(q, dtype=bool)
        return np.where(ok, pos_c, -1)


@dataclass
class BlockSparseSystem:
    diag: np.ndarray  # (N, 3, 3)
    pattern: BlockPattern
    lower: np.ndarray  # (nnz, 3, 3) aligned with pattern.blocks_to_coords
    contact_coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))  # row > col
    contact_vals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))

    @property
    def n(self) -> int:
        return len(self.diag)

    def to_dense(self) -> np.ndarray:
        n = self.n
        A = np.zeros((n, 3, n, 3))
        idx = np.arange(n)
        A[idx, :, idx, :] = self.diag
        for coords, vals in ((self.pattern.blocks_to_coords, self.lower), (self.contact_coords, self.contact_vals)):
            for (r, c), v in zip(coords, vals):
                A[r, :, c, :] += v
                A[c, :, r, :] += v.T
        return A.reshape(3 * n, 3 * n)

    def restrict(self, keep) -> "BlockSparseSystem":
        """Same-size system with every block touching a node outside ``keep`` removed."""
        keep = np.asarray(keep, dtype=bool)
        bc = self.pattern.blocks_to_coords
        lk = keep[bc[:, 0]] & keep[bc[:, 1]] if len(bc) else np.zeros(0, bool)
        ck = keep[self.contact_coords[:, 0]] & keep[self.contact_coords[:, 1]] if len(self.contact_coords) else np.zeros(0, bool)
        diag = np.where(keep[:, None, None], self.diag, np.eye(3))
        return BlockSparseSystem(diag, self.pattern, self.lower * lk[:, None, None],
                                 self.contact_coords[ck], self.contact_vals[ck])

    def dump(self, path) -> None:
        """Write every stored block as 'i j v00 ... v22' (lower blocks, then contact blocks)."""
        with open(path, "w") as f:
            for i, v in enumerate(self.diag):
                f.write(f"{i} {i} " + " ".join(repr(float(a)) for a in v.ravel()) + "\n")
            for coords, vals in ((self.pattern.blocks_to_coords, self.lower), (self.contact_coords, self.contact_vals)):
                for (r, c), v in zip(coords, vals):
                    f.write(f"{r} {c} " + " ".join(repr(float(a)) for a in v.ravel()) + "\n")


def assemble(stencils, mass, h, pattern: BlockPattern, fixed=None) -> BlockSparseSystem:
    """Sum stencil Hessians and M/h^2 into diagonal, lower-pattern and contact blocks.

    ``stencils`` is an iterable of StencilBatch objects.  Rows and columns of
    ``fixed`` nodes are cleared and their diagonal set to the identity.
    """
    n = pattern.n
    mass = np.asarray(mass, dtype=float)
    diag = np.zeros((n, 3, 3))
    diag[:] = np.eye(3) * (mass / h**2)[:, None, None]
    lower = np.zeros((len(pattern.cols), 3, 3))
    extra_r, extra_c, extra_v = [], [], []
    for batch in stencils:
        if len(batch) == 0:
            continue
        nodes = batch.nodes
        if nodes.min() < 0 or nodes.max() >= n:
            raise IndexError("stencil node index out of range")
        k = nodes.shape[1]
        H = batch.matrices.reshape(len(nodes), k, 3, k, 3)
        for a in range(k):
            np.add.at(diag, nodes[:, a], H[:, a, :, a, :])
            for b in range(a):
                r, c = nodes[:, a], nodes[:, b]
                blk = H[:, a, :, b, :]
                swap = r < c
                rr = np.where(swap, c, r)
                cc = np.where(swap, r, c)
                blk = np.where(swap[:, None, None], np.swapaxes(blk, 1, 2), blk)
                slot = pattern.slot(rr, cc)
                inl = slot >= 0
                np.add.at(lower, slot[inl], blk[inl])
                extra_r.append(rr[~inl])
                extra_c.append(cc[~inl])
                extra_v.append(blk[~inl])
    if extra_r and sum(len(r) for r in extra_r):
        rr = np.concatenate(extra_r)
        cc = np.concatenate(extra_c)
        vv = np.concatenate(extra_v)
        key = rr * n + cc
        uniq, inv = np.unique(key, return_inverse=True)
        vals = np.zeros((len(uniq), 3, 3))
        np.add.at(vals, inv.ravel(), vv)
        coords = np.stack([uniq // n, uniq % n], axis=1)
    else:
        coords, vals = np.zeros((0, 2), np.int64), np.zeros((0, 3, 3))
    sys_ = BlockSparseSystem(diag, pattern, lower, coords, vals)
    if fixed is not None and np.any(fixed):
        fx = np.asarray(fixed, dtype=bool)
        sys_.diag[fx] = np.eye(3)
        bc = pattern.blocks_to_coords
        if len(bc):
            sys_.lower[fx[bc[:, 0]] | fx[bc[:, 1]]] = 0.0
        if len(coords):
            keep = ~(fx[coords[:, 0]] | fx[coords[:, 1]])
            sys_.contact_coords, sys_.contact_vals = coords[keep], vals[keep]
    return sys_


def spmv(sys_: BlockSparseSystem, v) -> np.ndarray:
    """(D + L + L^T + sum C + sum C^T) v."""
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    y = np.einsum("nij,nj->ni", sys_.diag, v)
    for coords, vals in ((sys_.pattern.blocks_to_coords, sys_.lower), (sys_.contact_coords, sys_.contact_vals)):
        if len(coords):
            r, c = coords[:, 0], coords[:, 1]
            np.add.at(y, r, np.einsum("kij,kj->ki", vals, v[c]))
            np.add.at(y, c, np.einsum("kji,kj->ki", vals, v[r]))
    return y.ravel()


# ---------------------------------------------------------------- preconditioners


def _safe_inverse(blocks):
    out = np.empty_like(blocks)
    for i, b in enumerate(blocks):
        try:
            if np.linalg.cond(b) > 1e14:
                raise np.linalg.LinAlgError
            out[i] = np.linalg.inv(b)
        except np.linalg.LinAlgError:
            warnings.warn(f"singular block {i}; regularizing with 1e-12*trace", RuntimeWarning)
            tr = abs(np.trace(b)) or 1.0
            out[i] = np.linalg.pinv(b + 1e-12 * tr * np.eye(len(b)))
    return out


def block_jacobi_precond(sys_: BlockSparseSystem):
    """Returns P with P(r) = D^{-1} r blockwise."""
    try:
        inv = np.linalg.inv(sys_.diag)
        if not np.all(np.isfinite(inv)) or np.any(np.linalg.cond(sys_.diag) > 1e14):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        inv = _safe_inverse(sys_.diag)

    def apply(r):
        return np.einsum("nij,nj->ni", inv, np.asarray(r).reshape(-1, 3)).ravel()

    return apply


def identity_precond(sys_=None):
    return lambda r: np.array(r, dtype=float, copy=True)


def _dense_range(sys_: BlockSparseSystem, lo: int, hi: int) -> np.ndarray:
    """Dense principal submatrix over nodes [lo, hi)."""
    m = hi - lo
    A = np.zeros((m, 3, m, 3))
    idx = np.arange(m)
    A[idx, :, idx, :] = sys_.diag[lo:hi]
    for coords, vals in ((sys_.pattern.blocks_to_coords, sys_.lower), (sys_.contact_coords, sys_.contact_vals)):
        if not len(coords):
            continue
        sel = (coords[:, 0] >= lo) & (coords[:, 0] < hi) & (coords[:, 1] >= lo) & (coords[:, 1] < hi)
        for (r, c), v in zip(coords[sel] - lo, vals[sel]):
            A[r, :, c, :] += v
            A[c, :, r, :] += v.T
    return A.reshape(3 * m, 3 * m)


def additive_precond(sys_: BlockSparseSystem, block_sizes=(3, 27)):
    """Sum over levels of B_i^T (B_i A B_i^T)^{-1} B_i with contiguous DOF blocks.

    Block sizes count DOFs and must be multiples of 3.
    """
    n = sys_.n
    levels = []
    for size in block_sizes:
        if size % 3:
            raise ValueError("block sizes must be multiples of 3")
        nb = size // 3
        starts = list(range(0, n, nb))
        invs = []
        for s in starts:
            A = _dense_range(sys_, s, min(s + nb, n))
            invs.append(_safe_inverse(A[None])[0])
        levels.append((starts, nb, invs))

    def apply(r):
        r = np.asarray(r, dtype=float).ravel()
        z = np.zeros_like(r)
        for starts, nb, invs in levels:
            for s, inv in zip(starts, invs):
                sl = slice(3 * s, 3 * min(s + nb, n))
                z[sl] += inv @ r[sl]
        return z

    return apply


# ---------------------------------------------------------------- PCG


@dataclass
class PcgResult:
    x: np.ndarray
    iterations: int
    status: str  # converged | stagnated | cap | diverged
    residual: float
    history: list = field(default_factory=list)


class PcgSolver:
    """Preconditioned CG with relative-residual, stagnation and cap exits.

    The tolerance is relative to ``|rhs|`` (the cold-start residual), so a warm
    start shortens the solve instead of tightening it.  ``resume`` continues
    the same Krylov sequence for a fixed number of extra iterations.
    """

    def __init__(self, sys_, rhs, precond, tol=PCG_TOL, max_iter=None, window=STAGNATION_WINDOW, matvec=None):
        self.sys = sys_
        self.b = np.asarray(rhs, dtype=float).ravel()
        self.M = precond
        self.tol = tol
        self.max_iter = 10 * len(self.b) if max_iter is None else max_iter
        self.window = window
        self.matvec = matvec or (lambda v: spmv(sys_, v))
        self.iterations = 0
        self.history = []
        self._state = None

    def _start(self, x0):
        x = np.zeros_like(self.b) if x0 is None else np.array(x0, dtype=float).ravel()
        r = self.b - self.matvec(x) if x0 is not None else self.b.copy()
        z = self.M(r)
        self._state = [x, r, z, z.copy(), float(r @ z)]
        self.best = (float(np.linalg.norm(r)), x.copy())
        self.history = [self.best[0]]

    def _run(self, n_iter):
        x, r, z, p, rz = self._state
        target = self.tol * np.linalg.norm(self.b)
        status = "cap"
        if self.history[-1] <= target:
            status = "converged"
            n_iter = 0
        for _ in range(n_iter):
            Ap = self.matvec(p)
            pAp = float(p @ Ap)
            if not np.isfinite(pAp):
                status = "diverged"
                break
            if pAp <= 0.0:
                status = "stagnated"
                break
            alpha = rz / pAp
            x = x + alpha * p
            r = r - alpha * Ap
            self.iterations += 1
            rn = float(np.linalg.norm(r))
            if not np.isfinite(rn) or not np.all(np.isfinite(x)):
                status = "diverged"
                break
            self.history.append(rn)
            if rn < self.best[0]:
                self.best = (rn, x.copy())
            if rn <= target:
                status = "converged"
                break
            if len(self.history) > self.window and min(self.history[-self.window:]) >= min(self.history[:-self.window]):
                status = "stagnated"
                break
            z = self.M(r)
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        self._state = [x, r, z, p, rz]
        sol = x if status == "converged" else self.best[1]
        if status == "diverged":
            sol = self.best[1]
        return PcgResult(sol.copy(), self.iterations, status, float(np.linalg.norm(self.b - self.matvec(sol))),
                         list(self.history))

    def solve(self, x0=None) -> PcgResult:
        self._start(x0)
        return self._run(self.max_iter)

    def resume(self, n_iter=STAGNATION_WINDOW) -> PcgResult:
        if self._state is None:
            raise RuntimeError("resume called before solve")
        return self._run(n_iter)


def pcg_solve(sys_, rhs, precond=None, tol=PCG_TOL, x0=None, max_iter=None):
    """Returns (solution, iterations, status)."""
    M = block_jacobi_precond(sys_) if precond is None else precond
    res = PcgSolver(sys_, rhs, M, tol, max_iter).solve(x0)
    return res.x, res.iterations, res.status


# ---------------------------------------------------------------- stiffness groups & warm start


@dataclass
class StiffnessGroups:
    node_eigen: np.ndarray  # e_j
    group: np.ndarray  # group id per node

    @property
    def ids(self) -> list:
        return sorted(set(int(g) for g in self.group))

    @property
    def count(self) -> int:
        return len(self.ids)


def assembled_eigenvalues(stencils, n_nodes: int) -> np.ndarray:
    """Diagonal of sum_i S_i [mean eigenvalue_i] S_i^T, returned per DOF (3N)."""
    lam = np.zeros((n_nodes, 3))
    for batch in stencils:
        if len(batch) == 0:
            continue
        avg = batch.eigenvalues.mean(axis=1)
        k = batch.nodes.shape[1]
        np.add.at(lam, batch.nodes.ravel(), np.repeat(avg, k)[:, None] * np.ones(3))
    return lam.ravel()


def stiffness_groups(stencils, n_nodes: int) -> StiffnessGroups:
    e = assembled_eigenvalues(stencils, n_nodes).reshape(-1, 3).sum(axis=1)
    pos = e > 0
    g = np.zeros(n_nodes, dtype=np.int64)
    g[pos] = np.floor(np.log10(e[pos])).astype(np.int64)
    if np.any(~pos):
        g[~pos] = g[pos].min() if np.any(pos) else 0
    return StiffnessGroups(e, g)


def warm_start(sys_: BlockSparseSystem, rhs, groups: StiffnessGroups, free=None, tol=WARM_TOL, cap=WARM_CAP):
    """Initial guess from independent per-group solves with off-group couplings dropped.

    Returns (x0, inner iterations, inner iterations weighted by each group's share of the free nodes).
    """
    rhs = np.asarray(rhs, dtype=float).ravel()
    x0 = np.zeros_like(rhs)
    inner, work = 0, 0.0
    if not np.any(rhs):
        return x0, 0, 0.0
    free = np.ones(sys_.n, dtype=bool) if free is None else np.asarray(free, dtype=bool)
    n_free = max(int(free.sum()), 1)
    for gid in groups.ids:
        members = (groups.group == gid) & free
        if not np.any(members):
            continue
        sub = sys_.restrict(members)
        mask = np.repeat(members, 3)
        b = np.where(mask, rhs, 0.0)
        if not np.any(b):
            continue
        res = PcgSolver(sub, b, block_jacobi_precond(sub), tol, cap).solve()
        inner += res.iterations
        work += res.iterations * members.sum() / n_free
        if res.status in ("converged", "cap"):
            x0[mask] = res.x[mask]
    return x0, inner, work

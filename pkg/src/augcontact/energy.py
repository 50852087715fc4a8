"""Inertia and hyperelastic strain energies with per-stencil PSD-projected Hessians.

Deformation gradients are flattened column-major: vec(F)[a + 3b] = F[a, b].

StableNeoHookean::

    psi(F) = mu/2 (|F|^2 - 3) - mu (J - 1) + lam_s/2 (J - 1)^2,   lam_s = lam + mu

ARAP::

    psi(F) = mu |F - R|^2,   F = R S (polar, rotation-variant SVD)

Both are multiplied by the rest volume of the tet.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import SimMesh

MODEL_TAGS = ("StableNeoHookean", "ARAP")


@dataclass(frozen=True)
class ElasticModel:
    tag: str
    mu: float
    lam: float

    def __post_init__(self):
        if self.tag not in MODEL_TAGS:
            raise ValueError(f"unknown elastic model {self.tag!r}")
        if not self.mu > 0 or self.lam < 0:
            raise ValueError("need mu > 0 and lam >= 0")

    @classmethod
    def from_young(cls, tag: str, E: float, nu: float) -> "ElasticModel":
        if not E > 0 or not 0 <= nu < 0.5:
            raise ValueError("need E > 0 and 0 <= nu < 0.5")
        mu = E / (2.0 * (1.0 + nu))
        lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        return cls(tag, mu, lam)


@dataclass
class StencilHessian:
    nodes: np.ndarray
    matrix: np.ndarray
    eigenvalues: np.ndarray


class StencilBatch:
    """Stencils of equal size stored as stacked arrays.

    Behaves like a sequence of :class:`StencilHessian`.
    """

    def __init__(self, nodes, matrices, eigenvalues=None):
        self.nodes = np.asarray(nodes, dtype=np.int64)
        self.matrices = np.asarray(matrices, dtype=float)
        k = self.nodes.shape[1] if self.nodes.ndim == 2 else 0
        if eigenvalues is None:
            eigenvalues = np.zeros((len(self.nodes), 3 * k))
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, i):
        return StencilHessian(self.nodes[i], self.matrices[i], self.eigenvalues[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def empty(cls, k: int) -> "StencilBatch":
        return cls(np.zeros((0, k), dtype=np.int64), np.zeros((0, 3 * k, 3 * k)), np.zeros((0, 3 * k)))


def project_psd(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp negative eigenvalues of a stack of symmetric matrices to zero."""
    h = 0.5 * (h + np.swapaxes(h, -1, -2))
    if h.shape[0] == 0:
        return h, np.zeros(h.shape[:-1])
    w, v = np.linalg.eigh(h)
    w = np.maximum(w, 0.0)
    out = np.einsum("...ij,...j,...kj->...ik", v, w, v)
    return 0.5 * (out + np.swapaxes(out, -1, -2)), w


# ---------------------------------------------------------------- inertia


def inertia_energy(x, y, M, h) -> float:
    d = (np.asarray(x) - np.asarray(y)).reshape(-1, 3)
    return 0.5 / h**2 * float(np.sum(np.asarray(M) * np.einsum("ij,ij->i", d, d)))


def inertia_gradient(x, y, M, h) -> np.ndarray:
    d = (np.asarray(x) - np.asarray(y)).reshape(-1, 3)
    return (np.asarray(M)[:, None] * d / h**2).ravel()


# ---------------------------------------------------------------- per-F kernels


def _skew(v):
    z = np.zeros(v.shape[:-1] + (3, 3))
    z[..., 0, 1], z[..., 0, 2] = -v[..., 2], v[..., 1]
    z[..., 1, 0], z[..., 1, 2] = v[..., 2], -v[..., 0]
    z[..., 2, 0], z[..., 2, 1] = -v[..., 1], v[..., 0]
    return z


def _vec(F):
    return np.swapaxes(F, -1, -2).reshape(F.shape[:-2] + (9,))


def _unvec(v):
    return np.swapaxes(v.reshape(v.shape[:-1] + (3, 3)), -1, -2)


def _det_hessian(F):
    f0, f1, f2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    H = np.zeros(F.shape[:-2] + (9, 9))
    H[..., 0:3, 3:6] = -_skew(f2)
    H[..., 0:3, 6:9] = _skew(f1)
    H[..., 3:6, 0:3] = _skew(f2)
    H[..., 3:6, 6:9] = -_skew(f0)
    H[..., 6:9, 0:3] = -_skew(f1)
    H[..., 6:9, 3:6] = _skew(f0)
    return H


def _snh(F, mu, lam, order):
    lam_s = lam + mu
    J = np.linalg.det(F)
    ic = np.einsum("...ij,...ij->...", F, F)
    psi = 0.5 * mu * (ic - 3.0) - mu * (J - 1.0) + 0.5 * lam_s * (J - 1.0) ** 2
    if order == 0:
        return psi, None, None
    f0, f1, f2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    gJ = np.concatenate([np.cross(f1, f2), np.cross(f2, f0), np.cross(f0, f1)], axis=-1)
    P = mu * _vec(F) + (lam_s * (J - 1.0) - mu)[..., None] * gJ
    if order == 1:
        return psi, P, None
    H = mu * np.eye(9) + lam_s * gJ[..., :, None] * gJ[..., None, :] \
        + (lam_s * (J - 1.0) - mu)[..., None, None] * _det_hessian(F)
    return psi, P, H


def _rotation_svd(F):
    U, s, Vt = np.linalg.svd(F)
    du = np.linalg.det(U) < 0
    U[du, :, 2] *= -1.0
    s[du, 2] *= -1.0
    dv = np.linalg.det(Vt) < 0
    Vt[dv, 2, :] *= -1.0
    s[dv, 2] *= -1.0
    return U, s, Vt


def _arap(F, mu, lam, order):
    U, s, Vt = _rotation_svd(F)
    R = U @ Vt
    D = F - R
    psi = mu * np.einsum("...ij,...ij->...", D, D)
    if order == 0:
        return psi, None, None
    P = 2.0 * mu * _vec(D)
    if order == 1:
        return psi, P, None
    V = np.swapaxes(Vt, -1, -2)
    M = np.einsum("tai,tbj->tabij", U, V)  # U^T E_ab V
    denom = s[:, :, None] + s[:, None, :]
    denom = np.where(np.abs(denom) < 1e-12, np.where(denom < 0, -1e-12, 1e-12), denom)
    omega = (M - np.swapaxes(M, -1, -2)) / denom[:, None, None]
    dR = np.einsum("tik,tabkl,tlj->tabij", U, omega, Vt)
    # rows: vec(dR) (column-major), cols: (a + 3b)
    dRdF = np.transpose(dR, (0, 4, 3, 2, 1)).reshape(-1, 9, 9)
    H = 2.0 * mu * (np.eye(9) - dRdF)
    return psi, P, H


_KERNELS = {"StableNeoHookean": _snh, "ARAP": _arap}


def _tet_terms(model: ElasticModel, mesh: SimMesh, x, elements, order):
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite positions")
    dm_inv, vol, dfdx = mesh.rest_shape()
    tets = mesh.tets
    if elements is not None:
        tets, dm_inv, vol, dfdx = tets[elements], dm_inv[elements], vol[elements], dfdx[elements]
    p = x[tets]
    ds = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
    F = ds @ dm_inv
    psi, P, H = _KERNELS[model.tag](F, model.mu, model.lam, order)
    return tets, vol, dfdx, psi, P, H


def elastic_energy(model: ElasticModel, mesh: SimMesh, x, elements=None) -> float:
    _, vol, _, psi, _, _ = _tet_terms(model, mesh, x, elements, 0)
    return float(np.sum(vol * psi))


def elastic_energy_per_tet(model: ElasticModel, mesh: SimMesh, x, elements=None) -> np.ndarray:
    _, vol, _, psi, _, _ = _tet_terms(model, mesh, x, elements, 0)
    return vol * psi


def elastic_gradient(model: ElasticModel, mesh: SimMesh, x, elements=None) -> np.ndarray:
    tets, vol, dfdx, _, P, _ = _tet_terms(model, mesh, x, elements, 1)
    g_local = vol[:, None] * np.einsum("tij,ti->tj", dfdx, P)
    g = np.zeros((mesh.node_count, 3))
    np.add.at(g, tets.ravel(), g_local.reshape(-1, 3))
    return g.ravel()


def elastic_hessian(model: ElasticModel, mesh: SimMesh, x, elements=None, project=True) -> StencilBatch:
    """Per-tet 12x12 Hessians; eigen-projected to PSD unless ``project`` is False."""
    tets, vol, dfdx, _, _, H = _tet_terms(model, mesh, x, elements, 2)
    K = vol[:, None, None] * np.einsum("tai,tab,tbj->tij", dfdx, H, dfdx)
    if project:
        K, w = project_psd(K)
    else:
        K = 0.5 * (K + np.swapaxes(K, 1, 2))
        w = np.linalg.eigvalsh(K) if len(K) else np.zeros((0, 12))
    return StencilBatch(tets, K, w)


def elastic_hessian_projected(model: ElasticModel, mesh: SimMesh, x, elements=None) -> StencilBatch:
    return elastic_hessian(model, mesh, x, elements, project=True)


def elastic_all(model: ElasticModel, mesh: SimMesh, x, elements=None):
    """Energy, gradient and projected stencils in one pass."""
    tets, vol, dfdx, psi, P, H = _tet_terms(model, mesh, x, elements, 2)
    g_local = vol[:, None] * np.einsum("tij,ti->tj", dfdx, P)
    g = np.zeros((mesh.node_count, 3))
    np.add.at(g, tets.ravel(), g_local.reshape(-1, 3))
    K = vol[:, None, None] * np.einsum("tai,tab,tbj->tij", dfdx, H, dfdx)
    K, w = project_psd(K)
    return float(np.sum(vol * psi)), g.ravel(), StencilBatch(tets, K, w)

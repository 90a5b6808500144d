"""P1 finite-element operators on per-tet (discontinuous) degrees of freedom.

Every tet owns four DOFs, one per vertex, so the volume operators are block
diagonal. Neighbouring tets only talk through the face coupling operator
``B(kappa) = sum_f kappa_f B_f``, where each ``B_f`` is a Robin exchange term
weighted by the face's P1 surface mass matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

GAMMA = 267.51525  # rad / (ms mT)
DEFAULT_DIFFUSIVITY = 2.0  # um^2 / ms
# physical permeability in um/ms per unit of the dimensionless kappa field
DEFAULT_KAPPA_SCALE = 1000.0

_MIN_VOLUME = 1e-12
_TRI_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])


class DofMap:
    """Bijective map ``(tet, local vertex) -> 4 * tet + local vertex``."""

    def __init__(self, mesh):
        self.n_tets = mesh.n_tets
        self.n_dofs = 4 * mesh.n_tets
        self.tet_dofs = np.arange(self.n_dofs).reshape(-1, 4)

    def __call__(self, tet, local):
        return 4 * np.asarray(tet) + np.asarray(local)


def _check_volumes(mesh):
    vols = mesh.volumes
    if np.any(vols < _MIN_VOLUME):
        raise ValueError(f"degenerate tet {int(np.argmin(vols))} (volume {vols.min():.3e})")
    return vols


def _block_diag(dofmap, blocks):
    rows = np.repeat(dofmap.tet_dofs, 4, axis=1).ravel()
    cols = np.tile(dofmap.tet_dofs, (1, 4)).ravel()
    mat = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(dofmap.n_dofs,) * 2)
    return mat.tocsr()


def local_mass(vols):
    base = np.ones((4, 4)) + np.eye(4)
    return vols[:, None, None] / 20.0 * base


def barycentric_gradients(mesh):
    """(nt, 4, 3) gradients of the P1 hat functions on each tet."""
    p = mesh.vertices[mesh.tets]
    jac = (p[:, 1:] - p[:, :1]).transpose(0, 2, 1)  # columns are edge vectors
    inv = np.linalg.inv(jac)  # rows are grads of lambda_1..3
    grads = np.empty((len(p), 4, 3))
    grads[:, 1:] = inv
    grads[:, 0] = -inv.sum(axis=1)
    return grads


def assemble_mass(mesh, dofmap):
    vols = _check_volumes(mesh)
    return _block_diag(dofmap, local_mass(vols))


def assemble_stiffness(mesh, dofmap, diffusivity=DEFAULT_DIFFUSIVITY):
    if not diffusivity > 0:
        raise ValueError("diffusivity must be positive")
    vols = _check_volumes(mesh)
    grads = barycentric_gradients(mesh)
    blocks = diffusivity * vols[:, None, None] * np.einsum("tic,tjc->tij", grads, grads)
    return _block_diag(dofmap, blocks)


def _triple_products():
    # int lambda_i lambda_j lambda_l dV / V on a tet
    t = np.empty((4, 4, 4))
    for i in range(4):
        for j in range(4):
            for l in range(4):
                distinct = len({i, j, l})
                t[i, j, l] = {1: 1 / 20, 2: 1 / 60, 3: 1 / 120}[distinct]
    return t


_TRIPLE = _triple_products()


def assemble_dephasing(mesh, dofmap):
    """Coordinate-weighted mass matrices ``(J_k)_ij = int phi_i phi_j x_k``."""
    vols = _check_volumes(mesh)
    coords = mesh.vertices[mesh.tets]  # (nt, 4, 3)
    out = []
    for axis in range(3):
        blocks = vols[:, None, None] * np.einsum("ijl,tl->tij", _TRIPLE, coords[:, :, axis])
        out.append(_block_diag(dofmap, blocks))
    return tuple(out)


def assemble_relaxation(mass, t2=np.inf):
    if not t2 > 0:
        raise ValueError("T2 must be positive")
    if np.isinf(t2):
        return sp.csr_matrix(mass.shape)
    return (mass / t2).tocsr()


@dataclass(frozen=True)
class OperatorSet:
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    relaxation: sp.csr_matrix
    dephasing: tuple
    diffusivity: float
    t2: float

    @property
    def n_dofs(self):
        return self.mass.shape[0]


def assemble_operators(mesh, dofmap=None, diffusivity=DEFAULT_DIFFUSIVITY, t2=np.inf):
    dofmap = dofmap or DofMap(mesh)
    mass = assemble_mass(mesh, dofmap)
    return OperatorSet(
        mass=mass,
        stiffness=assemble_stiffness(mesh, dofmap, diffusivity),
        relaxation=assemble_relaxation(mass, t2),
        dephasing=assemble_dephasing(mesh, dofmap),
        diffusivity=diffusivity,
        t2=t2,
    )


class CouplingStructure:
    """Face-wise Robin coupling, stored in factored form.

    With ``C = L L^T`` the Cholesky factor of the reference triangle mass
    matrix, each face contributes three rows
    ``sqrt(A_f / 12) * L^T (e_a - e_b)`` to a sparse jump operator ``J``; then
    ``B_f = J_f^T J_f`` and ``B(kappa) = J^T diag(scale * kappa_rep) J``.
    The factored form makes ``U^T B(kappa) U`` and its gradient with respect to
    kappa cheap for any basis ``U``.
    """

    def __init__(self, mesh, dofmap=None, kappa_scale=DEFAULT_KAPPA_SCALE, tol=1e-9):
        dofmap = dofmap or DofMap(mesh)
        self.n_faces = mesh.n_faces
        self.n_dofs = dofmap.n_dofs
        self.kappa_scale = float(kappa_scale)

        fv = mesh.face_vertices
        side_dofs = []
        for side in range(2):
            tets = mesh.face_tets[:, side]
            tv = mesh.tets[tets]  # (nf, 4)
            # position of each face vertex inside this tet
            local = np.argmax(tv[:, None, :] == fv[:, :, None], axis=2)
            if not np.all(np.take_along_axis(tv, local, axis=1) == fv):
                raise ValueError("face vertices not found in incident tet")
            side_dofs.append(dofmap(tets[:, None], local))
        pa = mesh.vertices[mesh.tets[mesh.face_tets[:, 0]]]
        pb = mesh.vertices[mesh.tets[mesh.face_tets[:, 1]]]
        la = side_dofs[0] - 4 * mesh.face_tets[:, [0]]
        lb = side_dofs[1] - 4 * mesh.face_tets[:, [1]]
        gap = np.take_along_axis(pa, la[:, :, None], axis=1) - np.take_along_axis(pb, lb[:, :, None], axis=1)
        if gap.size and np.abs(gap).max() > tol:
            raise ValueError("coincident-vertex pairing failed across a face")

        self.dofs_a, self.dofs_b = side_dofs
        self.areas = mesh.face_areas()
        chol = np.linalg.cholesky(_TRI_MASS)  # C = chol @ chol.T
        weights = np.sqrt(self.areas / 12.0)[:, None, None] * chol.T[None]  # (nf, 3, 3)
        nf = self.n_faces
        rows = np.repeat(np.arange(3 * nf).reshape(nf, 3), 3, axis=1).reshape(nf, 3, 3)
        cols_a = np.broadcast_to(self.dofs_a[:, None, :], (nf, 3, 3))
        cols_b = np.broadcast_to(self.dofs_b[:, None, :], (nf, 3, 3))
        jump = sp.coo_matrix(
            (np.concatenate([weights.ravel(), -weights.ravel()]),
             (np.concatenate([rows.ravel(), rows.ravel()]),
              np.concatenate([cols_a.ravel(), cols_b.ravel()]))),
            shape=(3 * nf, self.n_dofs),
        )
        self.jump = jump.tocsr()

    def face_stencil(self, face):
        """Dense 6x6 block of ``B_f`` over ``(dofs_a[f], dofs_b[f])``."""
        s = self.areas[face] / 12.0 * _TRI_MASS
        return np.block([[s, -s], [-s, s]])

    def assemble(self, kappa):
        """``B(kappa)`` as a sparse matrix, in physical units."""
        kappa = np.asarray(kappa, dtype=float)
        if kappa.shape != (self.n_faces,):
            raise ValueError(f"expected {self.n_faces} permeabilities")
        w = sp.diags(np.repeat(self.kappa_scale * kappa, 3))
        b = self.jump.T @ w @ self.jump
        return (0.5 * (b + b.T)).tocsr()

    def apply(self, kappa, x):
        """Matrix-free ``B(kappa) @ x`` built from face jumps ``x_a - x_b``.

        Constants produce zero jumps, so ``apply(kappa, ones)`` is exactly 0.
        """
        x = np.asarray(x)
        jumps = x[self.dofs_a] - x[self.dofs_b]  # (nf, 3)
        flux = (self.kappa_scale * np.asarray(kappa) * self.areas / 12.0)[:, None] * (jumps @ _TRI_MASS)
        out = np.zeros(self.n_dofs, dtype=np.result_type(x, float))
        np.add.at(out, self.dofs_a.ravel(), flux.ravel())
        np.add.at(out, self.dofs_b.ravel(), -flux.ravel())
        return out

    def project(self, basis):
        """Jump operator applied to a basis, ``J U`` with shape (3 nf, k)."""
        return np.asarray(self.jump @ basis)

    @staticmethod
    def reduced_gradient(projected, grad_reduced, kappa_scale):
        """d<G, U^T B(kappa) U>/d kappa_f for every face."""
        rowwise = np.einsum("rk,rk->r", projected @ grad_reduced, projected)
        return kappa_scale * rowwise.reshape(-1, 3).sum(axis=1)


def dump_triplets(matrix, path):
    """Write a sparse matrix as ``row col value`` lines for debugging."""
    coo = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {float(v)!r}\n")

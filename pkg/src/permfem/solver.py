"""Reduced-order Bloch-Torrey propagation and its reverse-mode gradient.

The semi-discrete system ``M c' = -(K + R + i Q(t) + B(kappa)) c`` is
projected onto the lowest generalized eigenpairs of ``(K + B, M)``. Inside
each constant-gradient interval the reduced system is advanced exactly with
one dense matrix exponential. Gradients with respect to the reduced coupling
use the block-triangular identity

    expm([[A, E], [0, A]]) = [[expm(A), L(A, E)], [0, expm(A)]]

for the Frechet derivative ``L``, applied in adjoint form.
"""
from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .encoding import parse_acquisition, Protocol
from .fem import GAMMA, CouplingStructure

log = logging.getLogger(__name__)

DEFAULT_NEIG = 60
DEFAULT_REFRESH = 50
_DENSE_LIMIT = 1500


class EigensolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ReducedModel:
    basis: np.ndarray  # (ndof, k), M-orthonormal
    eigenvalues: np.ndarray  # at the kappa the basis was computed for
    projected_jump: np.ndarray  # J U, (3 nf, k)
    stiffness: np.ndarray  # U^T K U
    relaxation: np.ndarray  # U^T R U
    dephasing: tuple  # U^T J_x U, U^T J_y U, U^T J_z U
    readout: np.ndarray  # 1^T M U
    initial: np.ndarray  # U^T M 1
    coupling: np.ndarray  # U^T B(kappa) U for the current kappa
    kappa: np.ndarray
    kappa_scale: float
    staleness: int = 0

    @property
    def size(self):
        return len(self.eigenvalues)

    @property
    def operator(self):
        """Symmetric reduced diffusion-plus-exchange operator ``U^T (K + B) U``."""
        return self.stiffness + self.coupling


def _fix_signs(vecs):
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _arpack_start(n):
    rng = np.random.default_rng(12345)
    return 1.0 + 0.01 * rng.standard_normal(n)


def generalized_eigenpairs(stiff, mass, neig, method="auto", shift=-1e-2):
    """Lowest ``neig`` eigenpairs of ``stiff u = lam mass u``, M-orthonormal."""
    n = stiff.shape[0]
    if neig < 1 or neig > n:
        raise ValueError(f"neig must lie in [1, {n}]")
    if method == "auto":
        method = "dense" if n <= _DENSE_LIMIT or neig >= n - 1 else "arpack"
    if method == "dense":
        lam, vecs = sla.eigh(stiff.toarray(), mass.toarray(), subset_by_index=[0, neig - 1])
    elif method == "arpack":
        try:
            lam, vecs = spla.eigsh(stiff.tocsc(), k=neig, M=mass.tocsc(), sigma=shift,
                                   which="LM", v0=_arpack_start(n), tol=0, maxiter=20 * n)
        except spla.ArpackNoConvergence as err:
            raise EigensolverError(
                f"eigensolver did not converge: {len(err.eigenvalues)} of {neig} pairs") from err
        # Rayleigh-Ritz cleanup: exact M-orthonormality, sorted pairs
        gram = vecs.T @ (mass @ vecs)
        chol = np.linalg.cholesky(0.5 * (gram + gram.T))
        vecs = sla.solve_triangular(chol, vecs.T, lower=True).T
        small = vecs.T @ (stiff @ vecs)
        lam, rot = np.linalg.eigh(0.5 * (small + small.T))
        vecs = vecs @ rot
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    return lam, _fix_signs(vecs)


def eigen_residuals(stiff, mass, lam, vecs):
    mv = mass @ vecs
    res = np.linalg.norm(stiff @ vecs - mv * lam, axis=0)
    return res / np.linalg.norm(mv, axis=0)


def compute_reduced_basis(operators, coupling, kappa, neig=DEFAULT_NEIG, method="auto",
                          residual_tol=1e-8):
    kappa = np.array(kappa, dtype=float)
    stiff = (operators.stiffness + coupling.assemble(kappa)).tocsr()
    lam, basis = generalized_eigenpairs(stiff, operators.mass, neig, method=method)
    res = eigen_residuals(stiff, operators.mass, lam, basis)
    if res.max() > residual_tol:
        raise EigensolverError(
            f"eigenpair residual {res.max():.3e} exceeds {residual_tol:.0e} "
            f"(worst pair {int(res.argmax())}, lambda={lam[res.argmax()]:.6g})")
    mass_u = operators.mass @ basis
    ones = np.ones(operators.n_dofs)
    projected = coupling.project(basis)
    return ReducedModel(
        basis=basis,
        eigenvalues=lam,
        projected_jump=projected,
        stiffness=basis.T @ (operators.stiffness @ basis),
        relaxation=basis.T @ (operators.relaxation @ basis),
        dephasing=tuple(basis.T @ (j @ basis) for j in operators.dephasing),
        readout=ones @ mass_u,
        initial=mass_u.T @ ones,
        coupling=_reduced_coupling(projected, kappa, coupling.kappa_scale),
        kappa=kappa,
        kappa_scale=coupling.kappa_scale,
    )


def _reduced_coupling(projected, kappa, kappa_scale):
    w = np.repeat(kappa_scale * kappa, 3)
    return projected.T @ (w[:, None] * projected)


def refresh_coupling(model, kappa):
    """Re-project only the exchange operator for new permeabilities.

    The basis stays fixed; ``U^T B(kappa) U`` is rebuilt face by face.
    """
    kappa = np.array(kappa, dtype=float)
    return dataclasses.replace(
        model,
        coupling=_reduced_coupling(model.projected_jump, kappa, model.kappa_scale),
        kappa=kappa,
        staleness=model.staleness + 1,
    )


def maybe_refresh_basis(model, iteration, operators, coupling, kappa,
                        refresh_interval=DEFAULT_REFRESH, neig=None):
    """Full eigensolve every ``refresh_interval`` iterations, else coupling only."""
    if model is None or iteration % refresh_interval == 0:
        neig = neig or (model.size if model is not None else DEFAULT_NEIG)
        return compute_reduced_basis(operators, coupling, kappa, neig)
    return refresh_coupling(model, kappa)


def _generator(model, g):
    """Reduced Bloch-Torrey generator for a gradient vector ``g`` (mT/um)."""
    real = model.operator + model.relaxation
    if not np.any(g):
        return real.astype(complex)
    dephase = sum(gk * jk for gk, jk in zip(g, model.dephasing) if gk != 0)
    return real + 1j * GAMMA * dephase


def _intervals(acq):
    out = []
    for t0, t1, g in acq.waveform_intervals():
        h = t1 - t0
        if h < 0:
            raise ValueError("interval with negative duration")
        if h > 0:
            out.append((h, g))
    return out


def propagate(model, acq, rho=1.0, tape=False):
    """Complex signal ``1^T M U y(TE)`` for one acquisition."""
    y = rho * model.initial.astype(complex)
    steps = []
    for h, g in _intervals(acq):
        a = -h * _generator(model, g)
        prop = sla.expm(a)
        steps.append((h, a, prop, y))
        y = prop @ y
    signal = model.readout @ y
    return (signal, steps) if tape else signal


def _frechet_adjoint(a, weight):
    """``L(A^T, W)``, the adjoint of the Frechet derivative of expm at ``A``."""
    n = a.shape[0]
    block = np.zeros((2 * n, 2 * n), dtype=complex)
    block[:n, :n] = a.T
    block[n:, n:] = a.T
    block[:n, n:] = weight
    return sla.expm(block)[:n, n:]


def signal_operator_gradient(model, steps, cotangent):
    """Gradient of ``Re(conj(cotangent) * S)`` with respect to ``U^T (K + B) U``.

    ``cotangent`` is ``dl/dRe(S) + i dl/dIm(S)`` for a real loss ``l``.
    """
    grad = np.zeros((model.size, model.size))
    if cotangent == 0:
        return grad
    left = model.readout.astype(complex)
    for h, a, prop, y_in in reversed(steps):
        # dS = left^T L(A, -h dOp) y_in
        g_op = -h * _frechet_adjoint(a, np.outer(left, y_in))
        grad += np.real(np.conj(cotangent) * g_op)
        left = prop.T @ left
    return grad


@dataclass(frozen=True)
class SignalSet:
    protocol: Protocol
    signals: np.ndarray  # complex, one per acquisition

    def reference(self, i):
        return self.signals[self.protocol.reference_index(i)]

    @property
    def references(self):
        return np.array([self.reference(i) for i in range(len(self.protocol))])

    def normalized(self):
        return self.signals / self.references


def _run_parallel(func, items, workers):
    items = list(items)
    if workers is None or workers <= 1 or len(items) < 2:
        return [func(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def simulate_with_model(model, protocol, rho=1.0, workers=1, indices=None):
    indices = range(len(protocol)) if indices is None else indices
    out = np.zeros(len(protocol), dtype=complex)
    vals = _run_parallel(lambda i: propagate(model, protocol[i], rho), indices, workers)
    for i, v in zip(indices, vals):
        out[i] = v
    return SignalSet(protocol, out)


def simulate_protocol(operators, coupling, kappa, protocol, rho=1.0, neig=DEFAULT_NEIG,
                      workers=1, model=None):
    """Signals for every acquisition using one freshly computed reduced model."""
    if model is None:
        model = compute_reduced_basis(operators, coupling, kappa, neig)
    return simulate_with_model(model, protocol, rho, workers)


def data_loss_and_gradient(model, protocol, target, active, rho=1.0, workers=1):
    """Normalised squared-error data loss over ``active`` and its kappa-gradient.

    Returns ``(loss, dloss/dkappa, predicted SignalSet)``. Each active
    acquisition is normalised by the b=0 member of its Delta group, for both
    the prediction and the target; the references are differentiated too.
    """
    active = [int(i) for i in active]
    refs = sorted({protocol.reference_index(i) for i in active})
    needed = sorted(set(active) | set(refs))
    results = _run_parallel(lambda i: propagate(model, protocol[i], rho, tape=True),
                            needed, workers)
    pred = np.zeros(len(protocol), dtype=complex)
    steps = {}
    for i, (s, tp) in zip(needed, results):
        pred[i] = s
        steps[i] = tp

    loss = 0.0
    cot = dict.fromkeys(needed, 0j)
    for i in active:
        r = protocol.reference_index(i)
        s0 = pred[r]
        t0 = target.signals[r]
        if s0 == 0 or t0 == 0:
            raise ZeroDivisionError("zero b=0 reference signal")
        resid = pred[i] / s0 - target.signals[i] / t0
        loss += resid.real ** 2 + resid.imag ** 2
        # d|resid|^2 via Wirtinger calculus: cotangent of S is 2 * resid * conj(dresid/dS)
        cot[i] += 2.0 * resid * np.conj(1.0 / s0)
        cot[r] += 2.0 * resid * np.conj(-pred[i] / s0 ** 2)

    grads = _run_parallel(lambda i: signal_operator_gradient(model, steps[i], cot[i]),
                          needed, workers)
    grad_op = np.zeros((model.size, model.size))
    for g in grads:
        grad_op += g
    grad_kappa = CouplingStructure.reduced_gradient(model.projected_jump, grad_op, model.kappa_scale)
    return loss, grad_kappa, SignalSet(protocol, pred)


def save_signals(signals, path):
    lines = []
    for a, s in zip(signals.protocol, signals.signals):
        dx, dy, dz = a.direction
        lines.append(f"{dx!r} {dy!r} {dz!r} {float(a.b_s_mm2)!r} {float(a.delta)!r} {float(a.big_delta)!r} "
                     f"{float(s.real)!r} {float(s.imag)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_signals(path):
    acqs, vals = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 8:
            raise ValueError(f"line {lineno}: expected 'dx dy dz b delta Delta Re Im'")
        acqs.append(parse_acquisition(parts, lineno))
        try:
            vals.append(complex(float(parts[6]), float(parts[7])))
        except ValueError:
            raise ValueError(f"line {lineno}: malformed signal value") from None
    return SignalSet(Protocol(tuple(acqs)), np.array(vals))

import dataclasses

import numpy as np
import pytest
import scipy.linalg as sla

from permfem.encoding import Acquisition, Protocol, standard_protocol
from permfem.fem import GAMMA, CouplingStructure, assemble_operators
from permfem.mesh import Sphere, build_ambient_grid, generate_ground_truth
from permfem.solver import (
    EigensolverError,
    ReducedModel,
    SignalSet,
    compute_reduced_basis,
    data_loss_and_gradient,
    eigen_residuals,
    generalized_eigenpairs,
    load_signals,
    maybe_refresh_basis,
    propagate,
    refresh_coupling,
    save_signals,
    signal_operator_gradient,
    simulate_protocol,
)

VOLUME = 27.2 ** 3


def random_kappa(n, rng):
    return 10.0 ** rng.uniform(-5, -1, n)


def box_attenuation(length, b, delta, big_delta, diff=2.0, modes=120):
    """|S/S0| for 1D PGSE diffusion between reflecting walls, in cosine modes."""
    g = np.sqrt(b / (GAMMA ** 2 * delta ** 2 * (big_delta - delta / 3)))
    x, w = np.polynomial.legendre.leggauss(4 * modes)
    x = 0.5 * length * (x + 1)
    w = 0.5 * length * w
    n = np.arange(modes)
    norm = np.where(n == 0, 1.0, np.sqrt(2.0)) / np.sqrt(length)
    phi = np.cos(np.pi * np.outer(n, x) / length) * norm[:, None]
    pos = (phi * w) @ (phi * (x - length / 2)).T
    lap = np.diag(diff * (np.pi * n / length) ** 2)
    m = np.zeros(modes, complex)
    m[0] = np.sqrt(length)
    for h, amp in [(delta, g), (big_delta - delta, 0.0), (delta, -g)]:
        m = sla.expm(-h * (lap + 1j * GAMMA * amp * pos)) @ m
    return abs(m[0]) / np.sqrt(length)


@pytest.fixture(scope="module")
def sphere8():
    mesh = build_ambient_grid(8)
    ops = assemble_operators(mesh)
    cs = CouplingStructure(mesh)
    gt = generate_ground_truth(mesh, Sphere(8.0))
    return mesh, ops, cs, gt


def test_eigenpairs_match_dense_oracle(system2, rng):
    mesh, ops, cs = system2
    kappa = random_kappa(mesh.n_faces, rng)
    stiff = (ops.stiffness + cs.assemble(kappa)).tocsr()
    lam, _ = generalized_eigenpairs(stiff, ops.mass, 40, method="arpack")
    ref = sla.eigh(stiff.toarray(), ops.mass.toarray(), eigvals_only=True)[:40]
    scale = np.abs(ref).max()
    assert np.all(np.abs(lam - ref) <= 1e-8 * np.maximum(np.abs(ref), scale))


def test_basis_is_mass_orthonormal(system2, rng):
    mesh, ops, cs = system2
    kappa = random_kappa(mesh.n_faces, rng)
    for method in ("dense", "arpack"):
        lam, u = generalized_eigenpairs((ops.stiffness + cs.assemble(kappa)).tocsr(),
                                        ops.mass, 30, method=method)
        assert np.abs(u.T @ (ops.mass @ u) - np.eye(30)).max() <= 1e-10
        assert np.all(np.diff(lam) >= 0)
        assert lam[0] >= -1e-10


def test_decoupled_compartments_give_zero_multiplicity(system2):
    mesh, ops, cs = system2
    model = compute_reduced_basis(ops, cs, np.zeros(mesh.n_faces), neig=60)
    lam = model.eigenvalues
    tol = 1e-10 * lam.max()
    assert np.count_nonzero(np.abs(lam) <= tol) == mesh.n_tets
    assert lam[mesh.n_tets] > 1e-3


def test_lowest_mode_is_global_constant(system2, rng):
    mesh, ops, cs = system2
    model = compute_reduced_basis(ops, cs, random_kappa(mesh.n_faces, rng), neig=10)
    assert abs(model.eigenvalues[0]) <= 1e-10 * model.eigenvalues[-1]
    u0 = model.basis[:, 0]
    assert np.allclose(u0, u0[0], rtol=1e-8)
    assert u0[0] > 0
    assert np.isclose(u0[0], 1 / np.sqrt(VOLUME), rtol=1e-8)


def test_residuals_within_contract(system2, rng):
    mesh, ops, cs = system2
    kappa = random_kappa(mesh.n_faces, rng)
    model = compute_reduced_basis(ops, cs, kappa, neig=60)
    stiff = ops.stiffness + cs.assemble(kappa)
    assert eigen_residuals(stiff, ops.mass, model.eigenvalues, model.basis).max() <= 1e-8


def test_signs_are_deterministic(system2, rng):
    mesh, ops, cs = system2
    kappa = random_kappa(mesh.n_faces, rng)
    a = compute_reduced_basis(ops, cs, kappa, neig=20)
    b = compute_reduced_basis(ops, cs, kappa, neig=20)
    assert np.array_equal(a.basis, b.basis)
    idx = np.argmax(np.abs(a.basis), axis=0)
    assert np.all(a.basis[idx, np.arange(20)] > 0)


def test_bad_eigen_requests(system2):
    mesh, ops, cs = system2
    with pytest.raises(ValueError):
        compute_reduced_basis(ops, cs, np.zeros(mesh.n_faces), neig=0)
    with pytest.raises(ValueError):
        generalized_eigenpairs(ops.stiffness, ops.mass, 4, method="lanczos")
    with pytest.raises(EigensolverError, match="residual"):
        compute_reduced_basis(ops, cs, np.zeros(mesh.n_faces), neig=10, residual_tol=0.0)


# ---------------------------------------------------------------- propagation


def _full_space_signal(ops, cs, kappa, acq, rho=1.0):
    mass = ops.mass.toarray()
    base = (ops.stiffness + cs.assemble(kappa) + ops.relaxation).toarray()
    c = rho * np.ones(len(mass), dtype=complex)
    for t0, t1, g in acq.waveform_intervals():
        op = base + 1j * GAMMA * sum(gk * j.toarray() for gk, j in zip(g, ops.dephasing))
        c = sla.expm(-(t1 - t0) * np.linalg.solve(mass, op)) @ c
    return np.ones(len(mass)) @ mass @ c


def test_complete_basis_matches_full_space(grid1, rng):
    ops = assemble_operators(grid1, t2=80.0)
    cs = CouplingStructure(grid1)
    kappa = random_kappa(grid1.n_faces, rng)
    model = compute_reduced_basis(ops, cs, kappa, neig=ops.n_dofs)
    acq = Acquisition.from_si((1.0, 2.0, 0.5), 2000.0, 10.0, 20.0)
    ref = _full_space_signal(ops, cs, kappa, acq, rho=0.7)
    assert abs(propagate(model, acq, rho=0.7) - ref) <= 1e-9 * abs(ref)


def _synthetic_model(rng, k=10):
    a = rng.standard_normal((k, k))
    stiff = a @ a.T / k
    deph = []
    for _ in range(3):
        s = rng.standard_normal((k, k))
        deph.append(0.5 * (s + s.T))
    zero = np.zeros((k, k))
    return ReducedModel(
        basis=np.eye(k), eigenvalues=np.linalg.eigvalsh(stiff), projected_jump=np.zeros((3, k)),
        stiffness=stiff, relaxation=0.05 * np.eye(k), dephasing=tuple(deph),
        readout=rng.standard_normal(k), initial=rng.standard_normal(k), coupling=zero,
        kappa=np.zeros(1), kappa_scale=1.0)


def _rk4_signal(model, acq, h=1e-4):
    y = model.initial.astype(complex)
    for t0, t1, g in acq.waveform_intervals():
        op = -(model.operator + model.relaxation
               + 1j * GAMMA * sum(gk * jk for gk, jk in zip(g, model.dephasing)))
        steps = int(round((t1 - t0) / h))
        for _ in range(steps):
            k1 = op @ y
            k2 = op @ (y + 0.5 * h * k1)
            k3 = op @ (y + 0.5 * h * k2)
            k4 = op @ (y + h * k3)
            y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return model.readout @ y


@pytest.mark.parametrize("seed", [0, 1])
def test_interval_exponential_matches_rk4(seed):
    rng = np.random.default_rng(seed)
    model = _synthetic_model(rng)
    acq = Acquisition((0.6, 0.0, 0.8), 1.0, 1.0, 2.0)
    ref = _rk4_signal(model, acq)
    assert abs(propagate(model, acq) - ref) <= 1e-6 * abs(ref)


def test_b0_conserves_magnetisation(system2, rng):
    mesh, ops, cs = system2
    model = compute_reduced_basis(ops, cs, random_kappa(mesh.n_faces, rng), neig=40)
    for big_delta in (10.0, 20.0, 60.0, 200.0):
        s = propagate(model, Acquisition((1.0, 0.0, 0.0), 0.0, 10.0, big_delta), rho=1.5)
        assert abs(s - 1.5 * VOLUME) <= 1e-10 * 1.5 * VOLUME


def test_signal_linear_in_density(system2, rng):
    mesh, ops, cs = system2
    model = compute_reduced_basis(ops, cs, random_kappa(mesh.n_faces, rng), neig=40)
    acq = Acquisition.from_si((0.0, 1.0, 0.0), 3000.0, 10.0, 60.0)
    assert propagate(model, acq, rho=2.0) == 2.0 * propagate(model, acq, rho=1.0)


def test_zero_length_interval_is_skipped(system2):
    mesh, ops, cs = system2
    model = compute_reduced_basis(ops, cs, np.full(mesh.n_faces, 0.1), neig=20)
    # delta == Delta leaves an empty gap interval
    s = propagate(model, Acquisition.from_si((1.0, 0.0, 0.0), 1000.0, 10.0, 10.0))
    assert np.isfinite(s) and abs(s) < VOLUME


def test_negative_interval_rejected(system2):
    mesh, ops, cs = system2
    model = compute_reduced_basis(ops, cs, np.zeros(mesh.n_faces), neig=10)

    class Backwards:
        def waveform_intervals(self):
            return [(0.0, -1.0, np.zeros(3))]

    with pytest.raises(ValueError, match="negative"):
        propagate(model, Backwards())


def test_confined_box_attenuation_oracle():
    # walls at +-13.6 um restrict the phase spread, so the 1D box answer sits
    # well above the free-space exp(-bD)
    assert box_attenuation(27.2, 1.0, 10.0, 20.0) == pytest.approx(0.3245246, abs=2e-7)
    assert box_attenuation(27.2, 1.0, 10.0, 20.0) > 2 * np.exp(-2.0)


def test_open_grid_matches_confined_oracle(sphere8):
    mesh, ops, cs, _ = sphere8
    protocol = Protocol((Acquisition((1.0, 0.0, 0.0), 0.0, 10.0, 20.0),
                         Acquisition((1.0, 0.0, 0.0), 1.0, 10.0, 20.0)))
    sig = simulate_protocol(ops, cs, np.full(mesh.n_faces, 0.1), protocol)
    att = abs(sig.normalized()[1])
    assert att == pytest.approx(box_attenuation(27.2, 1.0, 10.0, 20.0), rel=0.02)


# ---------------------------------------------------------------- refresh


def test_refresh_with_same_kappa_is_identity(system2, rng):
    mesh, ops, cs = system2
    kappa = random_kappa(mesh.n_faces, rng)
    model = compute_reduced_basis(ops, cs, kappa, neig=40)
    again = refresh_coupling(model, kappa)
    assert again.staleness == 1
    acq = Acquisition.from_si((1.0, 0.0, 0.0), 2000.0, 10.0, 20.0)
    assert abs(propagate(again, acq) - propagate(model, acq)) <= 1e-12 * VOLUME


def test_refresh_zero_kappa_gives_zero_coupling(system2, rng):
    mesh, ops, cs = system2
    model = compute_reduced_basis(ops, cs, random_kappa(mesh.n_faces, rng), neig=40)
    assert not np.any(refresh_coupling(model, np.zeros(mesh.n_faces)).coupling)


def test_refreshed_coupling_matches_dense_projection(system2, rng):
    mesh, ops, cs = system2
    model = compute_reduced_basis(ops, cs, random_kappa(mesh.n_faces, rng), neig=40)
    kappa = random_kappa(mesh.n_faces, rng)
    u = model.basis
    dense = u.T @ cs.assemble(kappa).toarray() @ u
    got = refresh_coupling(model, kappa).coupling
    assert np.abs(got - dense).max() <= 1e-12 * np.abs(dense).max()


def test_refresh_policy(system2, rng):
    mesh, ops, cs = system2
    k0 = random_kappa(mesh.n_faces, rng)
    model = maybe_refresh_basis(None, 0, ops, cs, k0, 50, 30)
    assert model.staleness == 0 and model.size == 30
    k1 = random_kappa(mesh.n_faces, rng)
    stale = maybe_refresh_basis(model, 49, ops, cs, k1, 50)
    assert stale.staleness == 1 and stale.basis is model.basis
    fresh = maybe_refresh_basis(stale, 100, ops, cs, k1, 50)
    assert fresh.staleness == 0 and fresh.size == 30
    assert not np.array_equal(fresh.basis, model.basis)


# ---------------------------------------------------------------- signal sets


def test_all_b0_protocol(system2, rng):
    mesh, ops, cs = system2
    protocol = Protocol(tuple(Acquisition((0.0, 0.0, 1.0), 0.0, 10.0, d) for d in (20.0, 60.0)))
    sig = simulate_protocol(ops, cs, random_kappa(mesh.n_faces, rng), protocol, rho=2.0, neig=20)
    assert np.allclose(sig.signals, 2.0 * VOLUME, rtol=1e-10, atol=0)


def test_sphere_signals_monotone_and_bounded(sphere8):
    mesh, ops, cs, gt = sphere8
    protocol = standard_protocol()
    sig = simulate_protocol(ops, cs, gt.kappa, protocol)
    s = sig.signals
    assert np.all(np.abs(s) <= np.abs(sig.references) * (1 + 1e-9))
    mags = np.abs(s).reshape(2, 3, 6)
    assert np.all(np.diff(mags, axis=2) <= 1e-6 * VOLUME)


def test_restriction_reduces_attenuation(sphere8):
    mesh, ops, cs, gt = sphere8
    protocol = Protocol((Acquisition((1.0, 0.0, 0.0), 0.0, 10.0, 60.0),
                         Acquisition.from_si((1.0, 0.0, 0.0), 3000.0, 10.0, 60.0)))
    restricted = abs(simulate_protocol(ops, cs, gt.kappa, protocol).normalized()[1])
    free = abs(simulate_protocol(ops, cs, np.full(mesh.n_faces, 0.1), protocol).normalized()[1])
    assert restricted > free


def test_truncation_convergence(sphere8):
    mesh, ops, cs, gt = sphere8
    protocol = standard_protocol()
    a, b, c = (simulate_protocol(ops, cs, gt.kappa, protocol, neig=k).signals
               for k in (60, 120, 200))
    # at n=8 the 60-mode basis is off by ~6e-3 S0 at Delta=20, b=5000
    assert np.abs(b - a).max() / VOLUME <= 1e-2
    assert np.abs(c - b).max() / VOLUME <= 1e-3
    assert np.abs(c - b).max() < np.abs(b - a).max()


def test_signals_file_round_trip(tmp_path, system2, rng):
    mesh, ops, cs = system2
    sig = simulate_protocol(ops, cs, random_kappa(mesh.n_faces, rng), standard_protocol(), neig=20)
    save_signals(sig, tmp_path / "s.txt")
    back = load_signals(tmp_path / "s.txt")
    assert np.array_equal(back.signals, sig.signals)
    assert back.protocol == sig.protocol
    assert len((tmp_path / "s.txt").read_text().splitlines()) == 36


def test_signals_file_errors(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("1 0 0 0 10 20 1.0\n")
    with pytest.raises(ValueError, match="line 1"):
        load_signals(p)
    p.write_text("1 0 0 0 10 20 1.0 0\n1 0 0 1000 10 20 x 0\n")
    with pytest.raises(ValueError, match="line 2"):
        load_signals(p)


# ---------------------------------------------------------------- gradients


def _loss_at(model, kappa, protocol, target, active):
    return data_loss_and_gradient(refresh_coupling(model, kappa), protocol, target, active)[0]


@pytest.mark.parametrize("seed", range(3))
def test_data_gradient_matches_finite_differences(system2, seed):
    mesh, ops, cs = system2
    rng = np.random.default_rng(seed)
    protocol = Protocol((Acquisition((1.0, 0.0, 0.0), 0.0, 10.0, 20.0),
                         Acquisition.from_si(rng.normal(size=3), 2000.0, 10.0, 20.0)))
    target = simulate_protocol(ops, cs, random_kappa(mesh.n_faces, rng), protocol, neig=40)
    kappa = 10.0 ** rng.uniform(-4, -2, mesh.n_faces)
    model = compute_reduced_basis(ops, cs, kappa, neig=40)
    _, grad, _ = data_loss_and_gradient(model, protocol, target, [1])
    for f in rng.choice(mesh.n_faces, 8, replace=False):
        h = 1e-4 * kappa[f]
        up, dn = kappa.copy(), kappa.copy()
        up[f] += h
        dn[f] -= h
        fd = (_loss_at(model, up, protocol, target, [1])
              - _loss_at(model, dn, protocol, target, [1])) / (2 * h)
        assert fd == pytest.approx(grad[f], rel=1e-4, abs=1e-12)


def test_b0_signal_has_no_kappa_gradient(system2, rng):
    mesh, ops, cs = system2
    model = compute_reduced_basis(ops, cs, random_kappa(mesh.n_faces, rng), neig=40)
    s, steps = propagate(model, Acquisition((1.0, 0.0, 0.0), 0.0, 10.0, 20.0), tape=True)
    g_op = signal_operator_gradient(model, steps, 1.0 + 0j)
    g = CouplingStructure.reduced_gradient(model.projected_jump, g_op, model.kappa_scale)
    assert np.abs(g).max() <= 1e-10 * abs(s)


def test_zero_cotangent_short_circuits(system2):
    mesh, ops, cs = system2
    model = compute_reduced_basis(ops, cs, np.zeros(mesh.n_faces), neig=10)
    _, steps = propagate(model, Acquisition((1.0, 0.0, 0.0), 1.0, 10.0, 20.0), tape=True)
    assert not np.any(signal_operator_gradient(model, steps, 0j))


def test_worker_count_does_not_change_results(system2, rng):
    mesh, ops, cs = system2
    protocol = standard_protocol()
    kappa = random_kappa(mesh.n_faces, rng)
    model = compute_reduced_basis(ops, cs, kappa, neig=30)
    target = simulate_protocol(ops, cs, random_kappa(mesh.n_faces, rng), protocol, neig=30)
    one = data_loss_and_gradient(model, protocol, target, protocol.long, workers=1)
    four = data_loss_and_gradient(model, protocol, target, protocol.long, workers=4)
    assert one[0] == four[0]
    assert np.array_equal(one[1], four[1])
    assert np.array_equal(one[2].signals, four[2].signals)


def test_signal_set_normalisation():
    protocol = Protocol((Acquisition((1.0, 0.0, 0.0), 0.0, 10.0, 20.0),
                         Acquisition((1.0, 0.0, 0.0), 1.0, 10.0, 20.0)))
    sig = SignalSet(protocol, np.array([4.0 + 0j, 1.0 + 1j]))
    assert np.array_equal(sig.normalized(), [1.0, 0.25 + 0.25j])
    assert sig.reference(1) == 4.0
    assert dataclasses.is_dataclass(sig)

"""Permeability inversion: objective, geometric priors, schedule and Adam loop."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import K_MAX, K_MIN, THRESHOLD_KAPPA, PermeabilityField, sigmoid
from .solver import data_loss_and_gradient, maybe_refresh_basis

log = logging.getLogger(__name__)

LN10 = math.log(10.0)
HISTORY_HEADER = ("iter", "loss_total", "loss_data", "reg_cont", "reg_man", "lr", "phase")


class InversionError(RuntimeError):
    """Non-finite loss or gradient during the optimisation loop."""


@dataclass(frozen=True)
class InversionConfig:
    eta0: float = 0.75
    cycle: int = 200
    warmup: int = 50
    alpha: float = 0.1
    lambda_data: float = 100.0
    lambda_cont: float = 2.0
    lambda_man_max: float = 2.0
    lambda_man_ramp: int = 400
    t_switch: int = 200
    iters: int = 400
    neig: int = 60
    refresh_n: int = 50
    tau_sigma: float = 1.0
    tau_p: float = 0.5
    tau_m: float = 0.5
    seed: int = 0
    schedule: str = "staged"
    tau_b: float = THRESHOLD_KAPPA

    def __post_init__(self):
        if self.schedule not in ("staged", "joint"):
            raise ValueError("schedule must be 'staged' or 'joint'")
        for name in ("lambda_data", "lambda_cont", "lambda_man_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("tau_sigma", "tau_p", "tau_m", "eta0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.warmup < self.cycle:
            raise ValueError("need 0 <= warmup < cycle")
        if self.iters < 0 or self.neig < 1 or self.refresh_n < 1:
            raise ValueError("iters, neig and refresh_n must be positive")

    @classmethod
    def from_mapping(cls, values):
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = _coerce(f.default, values[f.name], f.name)
        return cls(**kwargs)

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def _coerce(default, value, name):
    if isinstance(value, str):
        value = value.strip()
        try:
            if isinstance(default, bool):
                return value.lower() in ("1", "true", "yes")
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
        except ValueError:
            raise ValueError(f"bad value for {name}: {value!r}") from None
    return type(default)(value)


def read_key_values(path):
    """Flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


# --------------------------------------------------------------------------
# Reparametrisation and soft indicators


def reparam(theta, tau_sigma=1.0, k_min=K_MIN, k_max=K_MAX):
    """Return ``(log10 kappa, kappa, dkappa/dtheta)``."""
    s = sigmoid(np.asarray(theta, dtype=float) / tau_sigma)
    k = k_min + (k_max - k_min) * s
    kappa = 10.0 ** k
    dk = (k_max - k_min) * s * (1.0 - s) / tau_sigma
    return k, kappa, kappa * LN10 * dk


def p_non(kappa, tau_p=0.5, tau_b=THRESHOLD_KAPPA):
    """Soft barrier indicator, logistic in ``log10 kappa`` centred on the threshold."""
    return sigmoid((math.log10(tau_b) - np.log10(kappa)) / tau_p)


def softmin(a, b, tau):
    """``-tau log(exp(-a/tau) + exp(-b/tau))``, evaluated without overflow."""
    if not tau > 0:
        raise ValueError("softmin temperature must be positive")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.minimum(a, b) - tau * np.log1p(np.exp(-np.abs(a - b) / tau))


def _softmin_weights(a, b, tau):
    # derivative of softmin w.r.t. a; the weight on b is 1 minus this
    return sigmoid((b - a) / tau)


def loss_data(pred, pred_ref, target, target_ref):
    """Squared error between normalised predicted and target signals."""
    pred_ref = np.asarray(pred_ref)
    target_ref = np.asarray(target_ref)
    if np.any(pred_ref == 0) or np.any(target_ref == 0):
        raise ZeroDivisionError("zero b=0 reference")
    r = np.asarray(pred) / pred_ref - np.asarray(target) / target_ref
    return float(np.sum(r.real ** 2 + r.imag ** 2))


def reg_continuity(kappa, adjacency, p, with_grad=False):
    """``sum w_ff' (kappa_f - kappa_f')^2`` with ``w = 1 - |p_f - p_f'|``."""
    i, j = adjacency[:, 0], adjacency[:, 1]
    d = kappa[i] - kappa[j]
    dp = p[i] - p[j]
    w = 1.0 - np.abs(dp)
    value = float(np.sum(w * d * d))
    if not with_grad:
        return value
    n = len(kappa)
    gk = np.bincount(i, 2 * w * d, n) - np.bincount(j, 2 * w * d, n)
    s = np.sign(dp) * d * d
    gp = -np.bincount(i, s, n) + np.bincount(j, s, n)
    return value, gk, gp


def edge_incidence_matrix(mesh):
    rows = np.concatenate([np.full(len(f), e) for e, f in enumerate(mesh.edge_faces)])
    cols = np.concatenate(mesh.edge_faces)
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)),
                         shape=(len(mesh.edge_faces), mesh.n_faces))


def reg_manifold(p, incidence, tau_m=0.5, with_grad=False):
    """Soft penalty on edges whose barrier load is far from 0 or 2."""
    load = incidence @ p
    a, b = load ** 2, (load - 2.0) ** 2
    value = float(np.sum(softmin(a, b, tau_m)))
    if not with_grad:
        return value
    wa = _softmin_weights(a, b, tau_m)
    dload = wa * 2.0 * load + (1.0 - wa) * 2.0 * (load - 2.0)
    return value, incidence.T @ dload


# --------------------------------------------------------------------------
# Schedules


def lr_schedule(t, eta0=0.75, cycle=200, warmup=50, alpha=0.1):
    """Cyclic linear warm-up followed by cosine decay to ``alpha * eta0``."""
    s = t % cycle
    if s < warmup:
        return eta0 * s / warmup
    floor = alpha * eta0
    return floor + (eta0 - floor) * 0.5 * (1.0 + math.cos(math.pi * (s - warmup) / (cycle - warmup)))


def lambda_manifold(t, lam_max=2.0, ramp=400):
    if ramp <= 0:
        return lam_max
    return min(t / ramp, 1.0) * lam_max


def active_acquisitions(t, protocol, t_switch=200, schedule="staged"):
    """``(indices, phase label)`` of the acquisitions driving the data term."""
    if schedule == "joint":
        return np.sort(np.concatenate([protocol.long, protocol.short])), "joint"
    if schedule != "staged":
        raise ValueError(f"unknown schedule {schedule!r}")
    if t < t_switch:
        return protocol.long, "long"
    return protocol.short, "short"


class Adam:
    """Plain Adam (no weight decay) with bias correction."""

    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.steps = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, theta, grad, lr):
        grad = np.asarray(grad, dtype=float)
        if not np.all(np.isfinite(grad)):
            bad = np.flatnonzero(~np.isfinite(grad))
            raise InversionError(f"non-finite gradient at {len(bad)} faces (first {bad[0]})")
        self.steps += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.steps)
        vhat = self.v / (1 - self.beta2 ** self.steps)
        return theta - lr * mhat / (np.sqrt(vhat) + self.eps)


# --------------------------------------------------------------------------
# Objective and loop


class Objective:
    """Weighted data term plus continuity and manifold priors over ``theta``."""

    def __init__(self, mesh, protocol, target, config=InversionConfig(), rho=1.0, workers=1):
        self.mesh = mesh
        self.protocol = protocol
        self.target = target
        self.config = config
        self.rho = rho
        self.workers = workers
        self.adjacency = np.asarray(mesh.face_adjacency)
        self.incidence = edge_incidence_matrix(mesh)

    def priors(self, theta, t):
        """Prior terms and their theta-gradients for iteration ``t``."""
        cfg = self.config
        _, kappa, dkappa = reparam(theta, cfg.tau_sigma)
        p = p_non(kappa, cfg.tau_p, cfg.tau_b)
        dp = -p * (1 - p) / cfg.tau_p * (dkappa / (kappa * LN10))
        cont, gk, gp = reg_continuity(kappa, self.adjacency, p, with_grad=True)
        man, gpm = reg_manifold(p, self.incidence, cfg.tau_m, with_grad=True)
        lam_man = lambda_manifold(t, cfg.lambda_man_max, cfg.lambda_man_ramp)
        grad = cfg.lambda_cont * (gk * dkappa + gp * dp) + lam_man * gpm * dp
        return cont, man, lam_man, grad

    def evaluate(self, theta, model, t, active=None):
        """Total loss, its parts and d(total)/d(theta) with the basis held fixed."""
        cfg = self.config
        if active is None:
            active, _ = active_acquisitions(t, self.protocol, cfg.t_switch, cfg.schedule)
        _, kappa, dkappa = reparam(theta, cfg.tau_sigma)
        data, gkappa, _ = data_loss_and_gradient(model, self.protocol, self.target, active,
                                                 self.rho, self.workers)
        cont, man, lam_man, gprior = self.priors(theta, t)
        total = cfg.lambda_data * data + cfg.lambda_cont * cont + lam_man * man
        grad = cfg.lambda_data * gkappa * dkappa + gprior
        return total, {"loss_data": data, "reg_cont": cont, "reg_man": man}, grad


def run_inversion(mesh, operators, coupling, protocol, target, config=InversionConfig(),
                  rho=1.0, workers=1, history_path=None, theta0=None, callback=None):
    """Fit face permeabilities to ``target`` signals.

    Returns the final :class:`PermeabilityField` and a list of per-iteration
    records. When ``history_path`` is given, records are appended to that CSV
    as they are produced.
    """
    cfg = config
    objective = Objective(mesh, protocol, target, cfg, rho, workers)
    theta = np.zeros(mesh.n_faces) if theta0 is None else np.array(theta0, dtype=float)
    adam = Adam(mesh.n_faces)
    model = None
    history = []
    fh = writer = None
    if history_path is not None:
        fh = open(history_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        fh.flush()
    try:
        for t in range(cfg.iters):
            active, phase = active_acquisitions(t, protocol, cfg.t_switch, cfg.schedule)
            kappa = reparam(theta, cfg.tau_sigma)[1]
            model = maybe_refresh_basis(model, t, operators, coupling, kappa,
                                        cfg.refresh_n, cfg.neig)
            total, parts, grad = objective.evaluate(theta, model, t, active)
            if not math.isfinite(total):
                raise InversionError(f"non-finite loss at iteration {t}")
            lr = lr_schedule(t, cfg.eta0, cfg.cycle, cfg.warmup, cfg.alpha)
            record = {"iter": t, "loss_total": total, **parts, "lr": lr, "phase": phase}
            history.append(record)
            if writer is not None:
                writer.writerow([repr(float(record[k])) if isinstance(record[k], float) else record[k]
                                 for k in HISTORY_HEADER])
                fh.flush()
            if callback is not None:
                callback(t, theta, record)
            try:
                theta = adam.step(theta, grad, lr)
            except InversionError as err:
                raise InversionError(f"iteration {t}: {err}") from None
            log.debug("iter %d %s loss %.6g", t, phase, total)
    finally:
        if fh is not None:
            fh.close()
    return PermeabilityField(theta, temperature=cfg.tau_sigma), history


def read_history(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def with_overrides(config, **changes):
    return dataclasses.replace(config, **changes)

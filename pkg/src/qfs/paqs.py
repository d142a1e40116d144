"""Locally optimal proportional-and-state feedback coefficients.

For a measurement channel set ``{M_i, eta_i}``, a Lie-closed Hamiltonian
basis ``{H_j}`` and a target observable ``X_T`` the feedback rotation is
``theta_j = B_j dt + sum_i A_ij dW_i``.  The coefficients maximize the
expected increment of ``Tr[X_T rho]`` one step ahead:

    c_ij = -Tr[X_T [H_j, [H_i, rho]]]
    a_ij = sqrt(eta_i) Tr[X_T [H_j, meas(M_i) rho]]
    b_j  = Tr[X_T [H_j, drift]]
    A = i a c^+,   B = i b c^+

``drift`` is the averaged feedback generator evaluated with the new A.  With
a feedback delay ``dt_fb`` first-order corrections are added to ``a`` and to
the drift.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm_frechet

from .qops import (
    DimensionError,
    SIGMA_MINUS,
    I2,
    dag,
    is_hermitian,
    kron,
    lie_closure_check,
    null_dimension,
    pseudoinverse,
    unitary_from_generator,
)

log = logging.getLogger(__name__)

# Sign of B = (+/-) i b c^+ selected by numerical stationarity, see select_b_sign.
B_SIGN = 1
REAL_TOL = 1e-10


class NonRealCoefficientError(ValueError):
    """i*a, i*b or c carry an imaginary part above tolerance."""


class LieClosureError(ValueError):
    """Feedback Hamiltonians do not span a Lie algebra."""


@dataclass(frozen=True)
class MeasurementChannel:
    op: np.ndarray
    eta: float = 1.0
    label: str = ""

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"efficiency must lie in (0, 1], got {self.eta}")


def homodyne_channels(gamma=1.0, phi_l=-np.pi / 2, phi_r=0.0, eta_l=1.0, eta_r=1.0):
    """Two homodyne channels ``sqrt(gamma) e^{-i phi}(s1 +/- s2)/sqrt(2)``."""
    s1, s2 = kron(SIGMA_MINUS, I2), kron(I2, SIGMA_MINUS)
    root = np.sqrt(gamma)
    ml = root * np.exp(-1j * phi_l) * (s1 + s2) / np.sqrt(2)
    mr = root * np.exp(-1j * phi_r) * (s1 - s2) / np.sqrt(2)
    return [MeasurementChannel(ml, eta_l, "L"), MeasurementChannel(mr, eta_r, "R")]


@dataclass
class ControlProblem:
    rho: np.ndarray
    target: np.ndarray
    channels: Sequence[MeasurementChannel]
    hamiltonians: Sequence[np.ndarray]
    delay: float = 0.0
    null_tol: float = 1e-9
    check_closure: bool = True

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=complex)
        self.target = np.asarray(self.target, dtype=complex)
        self.hamiltonians = np.asarray(self.hamiltonians, dtype=complex)
        d = self.rho.shape[0]
        if self.rho.shape != (d, d) or self.target.shape != (d, d):
            raise DimensionError("rho and target must be square and of equal size")
        if self.hamiltonians.ndim != 3 or self.hamiltonians.shape[1:] != (d, d):
            raise DimensionError("hamiltonians must be a list of d x d matrices")
        for ch in self.channels:
            if np.shape(ch.op) != (d, d):
                raise DimensionError("channel operator has wrong dimension")
        if self.delay < 0:
            raise ValueError("delay must be nonnegative")

    @property
    def ops(self) -> np.ndarray:
        return np.array([ch.op for ch in self.channels], dtype=complex)

    @property
    def etas(self) -> np.ndarray:
        return np.array([ch.eta for ch in self.channels], dtype=float)


@dataclass
class PaqsSolution:
    A: np.ndarray
    B: np.ndarray
    hessian_c: np.ndarray
    hessian_negative_semidefinite: bool
    null_directions: int
    a: np.ndarray = field(repr=False, default=None)
    b: np.ndarray = field(repr=False, default=None)
    a_delay: np.ndarray | None = field(repr=False, default=None)
    hessian_asymmetry: float = 0.0
    delay_form_residual: float = 0.0
    A0: np.ndarray | None = field(repr=False, default=None)  # zeroth-order gains
    B0: np.ndarray | None = field(repr=False, default=None)

    def effective_hamiltonians(self, hamiltonians) -> np.ndarray:
        return np.einsum("ij,jab->iab", self.A, np.asarray(hamiltonians))


# -- superoperators on stacks ----------------------------------------------


def _comm(x, y):
    return x @ y - y @ x


def _diss(x, r):
    xd = dag(x)
    xdx = xd @ x
    return x @ r @ xd - 0.5 * (xdx @ r + r @ xdx)


def _hbar(m, r):
    return m @ r + r @ dag(m)


def _tr(x, y):
    """Tr[x y] over the last two axes with broadcasting."""
    return np.einsum("...ab,...ba->...", x, y)


def meas_expectations(ops, rho) -> np.ndarray:
    """``Tr[(M_i + M_i^+) rho]`` for every channel."""
    return np.real(_tr(ops + dag(ops), rho[None]))


def feedback_generator(x, rho, ops, etas, hams, A, B) -> np.ndarray:
    """Linear feedback generator applied to ``x``.

    Expectation values are frozen at ``rho``; for ``x = rho`` this is the
    right-hand side of the averaged feedback master equation.
    """
    m = meas_expectations(ops, rho)
    ht = np.einsum("ij,jab->iab", A, hams)
    out = -1j * _comm(np.einsum("j,jab->ab", B, hams), x)
    meas = _hbar(ops, x[None]) - m[:, None, None] * x[None]
    root = np.sqrt(etas)[:, None, None]
    out = out + np.sum(_diss(ops, x[None]) - 1j * root * _comm(ht, meas) + _diss(ht, x[None]), axis=0)
    return out


def delay_correction(rho, ops, etas, hams, A_outer, A0, B0) -> np.ndarray:
    """``-i sum_i sqrt(eta_i) [H~_i, L Hbar_i rho - Hbar_i L rho]`` per unit delay."""
    lrho = feedback_generator(rho, rho, ops, etas, hams, A0, B0)
    ht = np.einsum("ij,jab->iab", A_outer, hams)
    out = np.zeros_like(rho)
    for i in range(len(ops)):
        hb = _hbar(ops[i], rho)
        term = feedback_generator(hb, rho, ops, etas, hams, A0, B0) - _hbar(ops[i], lrho)
        out = out - 1j * np.sqrt(etas[i]) * _comm(ht[i], term)
    return out


# -- assembly and solve -----------------------------------------------------


def _check_real(x, what, scale=1.0):
    bad = np.max(np.abs(np.imag(x)), initial=0.0)
    if bad > REAL_TOL * max(1.0, scale):
        raise NonRealCoefficientError(f"{what} has imaginary residual {bad:.3e}")
    return np.real(x)


def _structure(p: ControlProblem):
    hams = p.hamiltonians
    k = _comm(p.target[None], hams)  # [X_T, H_j]; Tr[X_T [H, Y]] = Tr[[X_T, H] Y]
    ch = _comm(hams, p.rho[None])
    # c_ij = -Tr[K_j [H_i, rho]]
    c = -np.einsum("jab,iba->ij", k, ch)
    return k, c


def _a_matrix(p, k):
    ops, etas, rho = p.ops, p.etas, p.rho
    m = meas_expectations(ops, rho)
    meas = _hbar(ops, rho[None]) - m[:, None, None] * rho[None]
    return np.sqrt(etas)[:, None] * np.einsum("jab,iba->ij", k, meas)


def _drift(p, A, A0=None, B0=None):
    ops, etas, hams, rho = p.ops, p.etas, p.hamiltonians, p.rho
    d = feedback_generator(rho, rho, ops, etas, hams, A, np.zeros(len(hams)))
    if p.delay > 0 and A0 is not None:
        d = d + p.delay * delay_correction(rho, ops, etas, hams, A, A0, B0)
    return d


def assemble_abc(p: ControlProblem, A: np.ndarray | None = None):
    """Complex ``a, b, c`` for the problem.

    ``b`` is evaluated with the proportional gains ``A``; if omitted they come
    from the ``a, c`` solve (two-stage evaluation).
    """
    k, c = _structure(p)
    a = _a_matrix(p, k)
    if A is None:
        cp = pseudoinverse(_check_real(c, "c", np.abs(c).max(initial=1.0)), p.null_tol)
        A = _check_real(1j * a, "i a", np.abs(a).max(initial=1.0)) @ cp
    b = np.einsum("jab,ba->j", k, _drift(p, A))
    return a, b, c


def hessian_status(c: np.ndarray, null_tol: float = 1e-9) -> tuple[bool, int, float]:
    """(negative semidefinite, null dimension, asymmetry) of the Hessian ``c``."""
    c = np.asarray(c, dtype=float)
    asym = float(np.max(np.abs(c - c.T), initial=0.0))
    sym = 0.5 * (c + c.T)
    w = np.linalg.eigvalsh(sym) if sym.size else np.zeros(0)
    scale = np.abs(w).max(initial=0.0)
    nsd = bool(w.size == 0 or w.max() <= null_tol * max(scale, 1e-300))
    return nsd, null_dimension(c, null_tol), asym


def solve(p: ControlProblem, b_sign: int = B_SIGN, proportional: bool = True) -> PaqsSolution:
    """Locally optimal ``A`` and ``B`` for the problem.

    ``proportional=False`` forces ``A = 0`` and returns the state-based term
    only (used before any delayed record is available).
    """
    if p.check_closure and not lie_closure_check(list(p.hamiltonians)):
        raise LieClosureError("feedback Hamiltonians are not Lie-closed")
    if not is_hermitian(p.target):
        raise ValueError("target operator must be Hermitian")
    ops, etas, hams = p.ops, p.etas, p.hamiltonians
    nc, nh = len(ops), len(hams)
    k, c_c = _structure(p)
    c = _check_real(c_c, "c", np.abs(c_c).max(initial=1.0))
    cp = pseudoinverse(c, p.null_tol)
    a = _a_matrix(p, k)
    ia = _check_real(1j * a, "i a", np.abs(a).max(initial=1.0))

    A0 = ia @ cp if proportional else np.zeros((nc, nh))
    b0 = np.einsum("jab,ba->j", k, _drift(p, A0))
    B0 = b_sign * (_check_real(1j * b0, "i b", np.abs(b0).max(initial=1.0)) @ cp)
    a_delay = None
    resid = 0.0
    A, B, b = A0, B0, b0
    if p.delay > 0 and proportional:
        rho = p.rho
        lrho = feedback_generator(rho, rho, ops, etas, hams, A0, B0)
        corr = np.empty((nc,) + rho.shape, dtype=complex)
        for i in range(nc):
            hb = _hbar(ops[i], rho)
            corr[i] = feedback_generator(hb, rho, ops, etas, hams, A0, B0) - _hbar(ops[i], lrho)
        root = np.sqrt(etas)[:, None]
        a_delay = root * np.einsum("jab,iba->ij", k, corr)
        # the expectation-subtracted form differs by sqrt(eta_i) Tr[(M_i+M_i^+) L rho] Tr[K_j rho]
        ml = meas_expectations(ops, lrho)
        resid = float(np.max(np.abs(root * np.outer(ml, np.einsum("jab,ba->j", k, rho)))))
        a_tot = a + p.delay * a_delay
        A = _check_real(1j * a_tot, "i a", np.abs(a_tot).max(initial=1.0)) @ cp
        b = np.einsum("jab,ba->j", k, _drift(p, A, A0, B0))
        B = b_sign * (_check_real(1j * b, "i b", np.abs(b).max(initial=1.0)) @ cp)

    nsd, nulls, asym = hessian_status(c, p.null_tol)
    if not nsd:
        log.info("indefinite feedback Hessian (max eigenvalue %.3e)",
                 np.linalg.eigvalsh(0.5 * (c + c.T)).max())
    return PaqsSolution(A=A, B=B, hessian_c=c, hessian_negative_semidefinite=nsd,
                        null_directions=nulls, a=a, b=b, a_delay=a_delay,
                        hessian_asymmetry=asym, delay_form_residual=resid, A0=A0, B0=B0)


# -- batched solve for many states (trajectory mode) -------------------------


def solve_batch(rhos, target, channels, hamiltonians, null_tol=1e-9, b_sign=B_SIGN,
                proportional=True):
    """Zero-delay ``A`` and ``B`` for a stack of states; no checks beyond shapes."""
    rhos = np.asarray(rhos, dtype=complex)
    hams = np.asarray(hamiltonians, dtype=complex)
    ops = np.array([ch.op for ch in channels])
    etas = np.array([ch.eta for ch in channels])
    k = _comm(np.asarray(target)[None], hams)
    hr = _comm(hams[None], rhos[:, None])  # (N, nh, d, d)
    c = -np.real(np.einsum("jab,niba->nij", k, hr))
    cp = pseudoinverse(c, null_tol)
    opsd = dag(ops)
    m = np.real(np.einsum("iab,nba->ni", ops + opsd, rhos))
    hb = ops[None] @ rhos[:, None] + rhos[:, None] @ opsd[None]
    meas = hb - m[:, :, None, None] * rhos[:, None]
    a = np.sqrt(etas)[None, :, None] * np.einsum("jab,niba->nij", k, meas)
    A = np.real(1j * a) @ cp
    if not proportional:
        A = np.zeros_like(A)
    ht = np.einsum("nij,jab->niab", A, hams)
    r = rhos[:, None]
    dr = (_diss(ops[None], r) - 1j * np.sqrt(etas)[None, :, None, None] * _comm(ht, meas)
          + _diss(ht, r)).sum(axis=1)
    b = np.einsum("jab,nba->nj", k, dr)
    B = b_sign * np.einsum("nj,njk->nk", np.real(1j * b), cp)
    return A, B


# -- pre-rotation to a stationary point ---------------------------------------


@dataclass
class PreRotation:
    unitary: np.ndarray
    theta: np.ndarray
    gain: float
    iterations: int


def gradient(rho, target, hamiltonians) -> np.ndarray:
    """d/dtheta_a Tr[X_T e^{-i theta H_a} rho e^{i theta H_a}] at theta = 0."""
    k = _comm(np.asarray(target)[None], np.asarray(hamiltonians))
    return np.real(-1j * np.einsum("jab,ba->j", k, rho))


def prerotation_search(p: ControlProblem, max_angle: float = np.pi, tol: float = 1e-10,
                       max_iter: int = 2000) -> PreRotation:
    """Gradient ascent over static rotations until the first-order condition holds.

    The accumulated rotation norm is capped at ``max_angle``.
    """
    hams = p.hamiltonians
    d = p.rho.shape[0]
    rho = p.rho.copy()
    u_tot = np.eye(d, dtype=complex)
    f0 = float(np.real(np.trace(p.target @ rho)))
    theta_acc = np.zeros(len(hams))
    it = 0
    for it in range(max_iter):
        g = gradient(rho, p.target, hams)
        if np.linalg.norm(g) <= tol:
            break
        _, c = _structure(ControlProblem(rho, p.target, p.channels, hams, check_closure=False))
        step = 0.5 / max(1.0, np.abs(c).max())
        dth = step * g
        if np.linalg.norm(theta_acc + dth) > max_angle:
            break
        theta_acc += dth
        u = unitary_from_generator(np.einsum("j,jab->ab", dth, hams))
        rho = u @ rho @ dag(u)
        u_tot = u @ u_tot
    theta = _log_coordinates(u_tot, hams) if it else np.zeros(len(hams))
    gain = float(np.real(np.trace(p.target @ rho))) - f0
    return PreRotation(u_tot, theta, gain, it)


def _log_coordinates(u, hams):
    """Real coordinates of ``i log(u)`` in the span of ``hams`` (least squares)."""
    w, v = np.linalg.eig(u)
    gen = (v * np.angle(w)) @ np.linalg.inv(v)  # u = exp(i gen) -> theta.H = -gen
    gen = -0.5 * (gen + dag(gen))
    cols = np.array([np.concatenate([h.real.ravel(), h.imag.ravel()]) for h in hams]).T
    tgt = np.concatenate([gen.real.ravel(), gen.imag.ravel()])
    coef, *_ = np.linalg.lstsq(cols, tgt, rcond=None)
    return coef


# -- local optimality verification --------------------------------------------


@dataclass
class OptimalityReport:
    passed: bool
    stationary: bool
    max_grad_A: float
    max_grad_B: float
    max_probe_gain: float
    failed_probes: int
    probe_count: int
    tol: float
    dt: float


def _post_step(rho, ops, etas, hams, A, B, dt, dw):
    """Post-measurement, post-feedback state for one increment pair ``dw``."""
    m = meas_expectations(ops, rho)
    meas = _hbar(ops, rho[None]) - m[:, None, None] * rho[None]
    rp = rho + dt * _diss(ops, rho[None]).sum(0) + np.einsum("i,i,iab->ab", np.sqrt(etas), dw, meas)
    theta = B * dt + dw @ A
    gen = -1j * np.einsum("j,jab->ab", theta, hams)
    return rp, gen


def expected_figure(p: ControlProblem, A, B, dt, order=8) -> float:
    """Exact Gaussian expectation of the post-step figure of merit."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    ops, etas, hams = p.ops, p.etas, p.hamiltonians
    nc = len(ops)
    grids = np.meshgrid(*([x] * nc), indexing="ij")
    wts = np.prod(np.meshgrid(*([w] * nc), indexing="ij"), axis=0).ravel()
    nodes = np.stack([g.ravel() for g in grids], axis=1) * np.sqrt(dt)
    total = 0.0
    for node, wt in zip(nodes, wts):
        rp, gen = _post_step(p.rho, ops, etas, hams, A, B, dt, node)
        u = unitary_from_generator(1j * gen)
        total += wt * np.real(np.trace(p.target @ u @ rp @ dag(u)))
    return float(total)


def coefficient_gradients(p: ControlProblem, A, B, dt, order=8):
    """Gradients of the expected post-step figure of merit w.r.t. ``A`` and ``B``."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    ops, etas, hams = p.ops, p.etas, p.hamiltonians
    nc, nh = len(ops), len(hams)
    grids = np.meshgrid(*([x] * nc), indexing="ij")
    wts = np.prod(np.meshgrid(*([w] * nc), indexing="ij"), axis=0).ravel()
    nodes = np.stack([g.ravel() for g in grids], axis=1) * np.sqrt(dt)
    gA = np.zeros((nc, nh))
    gB = np.zeros(nh)
    for node, wt in zip(nodes, wts):
        rp, gen = _post_step(p.rho, ops, etas, hams, A, B, dt, node)
        dfs = np.empty(nh)
        for a in range(nh):
            u, du = expm_frechet(gen, -1j * hams[a])
            ds = du @ rp @ dag(u) + u @ rp @ dag(du)
            dfs[a] = np.real(np.trace(p.target @ ds))
        gB += wt * dt * dfs
        gA += wt * np.outer(node, dfs)
    return gA, gB


def verify_local_optimality(p: ControlProblem, sol: PaqsSolution, probe_count: int = 20,
                            dt: float = 1e-5, tol: float = 1e-8, rng=None,
                            order: int = 8) -> OptimalityReport:
    """Check first-order stationarity and probe finite perturbations.

    Expectations over the Wiener increments use Gauss-Hermite quadrature, so
    the gradients are exact up to round-off.  Probes perturb ``A`` and ``B``
    with random directions whose induced rotations range from 1e-3 up to
    order one; none may raise the expected figure of merit by more than
    ``tol + dt**2``.
    """
    rng = np.random.default_rng(rng)
    gA, gB = coefficient_gradients(p, sol.A, sol.B, dt, order)
    stationary = bool(max(np.abs(gA).max(initial=0), np.abs(gB).max(initial=0)) <= tol)
    base = expected_figure(p, sol.A, sol.B, dt, order)
    worst = -np.inf
    failed = 0
    for _ in range(probe_count):
        scale = 10 ** rng.uniform(-3, 0) * np.pi
        dA = rng.normal(size=sol.A.shape)
        dA *= scale / (np.linalg.norm(dA) * np.sqrt(dt))
        dB = rng.normal(size=sol.B.shape)
        dB *= scale / (np.linalg.norm(dB) * dt) * rng.uniform(0, 1)
        gain = expected_figure(p, sol.A + dA, sol.B + dB, dt, order) - base
        worst = max(worst, gain)
        if gain > tol + dt * dt:
            failed += 1
    return OptimalityReport(
        passed=stationary and failed == 0, stationary=stationary,
        max_grad_A=float(np.abs(gA).max(initial=0)), max_grad_B=float(np.abs(gB).max(initial=0)),
        max_probe_gain=float(worst) if probe_count else 0.0, failed_probes=failed,
        probe_count=probe_count, tol=tol, dt=dt)


# -- sign selection for B ------------------------------------------------------


def post_step_figure(p: ControlProblem, sol: PaqsSolution, dt: float) -> float:
    """Figure of merit after one averaged step of length ``dt`` with ``sol``.

    The drift is integrated with the exact feedback unitary ``exp(-i B.H dt)``
    applied after the measurement/proportional part.
    """
    ops, etas, hams = p.ops, p.etas, p.hamiltonians
    d = _drift(p, sol.A, sol.A, sol.B) if p.delay > 0 else _drift(p, sol.A)
    rp = p.rho + dt * d
    u = unitary_from_generator(dt * np.einsum("j,jab->ab", sol.B, hams))
    return float(np.real(np.trace(p.target @ u @ rp @ dag(u))))


def select_b_sign(p: ControlProblem, dt: float = 1e-3) -> tuple[int, dict]:
    """Evaluate both sign candidates for B and return the better one."""
    scores = {}
    for s in (1, -1):
        scores[s] = post_step_figure(p, solve(p, b_sign=s), dt)
    best = max(scores, key=lambda s: scores[s])
    return best, scores


__all__ = [
    "B_SIGN", "ControlProblem", "LieClosureError", "MeasurementChannel", "NonRealCoefficientError",
    "OptimalityReport", "PaqsSolution", "PreRotation", "assemble_abc", "coefficient_gradients",
    "delay_correction", "expected_figure", "feedback_generator", "gradient", "hessian_status",
    "homodyne_channels", "meas_expectations", "post_step_figure", "prerotation_search",
    "select_b_sign", "solve", "solve_batch", "verify_local_optimality",
]

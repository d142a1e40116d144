"""Two-qubit entanglement measures, Schmidt parameterization and analytic
concurrence dynamics for the homodyne protocol (units with gamma = 1)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qops import SY, DimensionError, dag, is_physical, ket, projector

_SYSY = np.kron(SY, SY)
HITTING_TIME_UNIT = np.pi / 4 + np.log(2.0) / 2


def _sqrt1mc2(c: float) -> float:
    return float(np.sqrt(min(1.0, max(0.0, 1.0 - c * c))))


def bell_target() -> np.ndarray:
    """Projector onto ``(|ee> + |gg>)/sqrt(2)``."""
    return projector((ket(0, 0) + ket(1, 1)) / np.sqrt(2))


def _as_state(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex).ravel()
    if psi.shape != (4,):
        raise DimensionError(f"expected a two-qubit state vector, got shape {psi.shape}")
    return psi


def concurrence_pure(psi) -> float:
    psi = _as_state(psi)
    nrm = np.vdot(psi, psi).real
    return float(abs(psi @ _SYSY @ psi) / nrm)


def concurrence_mixed(rho, tol: float = 1e-8) -> float:
    """Wootters concurrence of a two-qubit density matrix."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise DimensionError(f"expected 4x4 density matrix, got {rho.shape}")
    if not is_physical(rho, tol):
        raise ValueError("density matrix is not physical")
    rho = 0.5 * (rho + dag(rho))
    rt = _SYSY @ rho.conj() @ _SYSY
    ev = np.linalg.eigvals(rho @ rt)
    lam = np.sort(np.sqrt(np.clip(ev.real, 0.0, None)))[::-1]
    return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


def fidelity_to_target(rho, target=None) -> float:
    """``Tr[X_T rho]``; ``rho`` may be a density matrix or a state vector."""
    x_t = bell_target() if target is None else np.asarray(target, dtype=complex)
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim == 1:
        rho = projector(rho / np.linalg.norm(rho))
    if rho.shape != x_t.shape:
        raise DimensionError(f"dimension mismatch: {rho.shape} vs {x_t.shape}")
    return float(np.einsum("ij,ji->", x_t, rho).real)


# -- Schmidt parameterization ------------------------------------------------


def _rz(a: float) -> np.ndarray:
    return np.diag([np.exp(-0.5j * a), np.exp(0.5j * a)])


def _ry(a: float) -> np.ndarray:
    c, s = np.cos(a / 2), np.sin(a / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def euler_unitary(theta_z: float, theta: float, phi_c: float) -> np.ndarray:
    """``Rz(theta_z) Ry(theta) Rz(phi_c)`` with ``R_a(t) = exp(-i t sigma_a / 2)``."""
    return _rz(theta_z) @ _ry(theta) @ _rz(phi_c)


def _euler_angles(u: np.ndarray) -> tuple[float, float, float, complex]:
    """ZYZ angles and global phase with ``u = phase * euler_unitary(...)``."""
    det = np.linalg.det(u)
    phase = np.sqrt(det)
    v = u / phase  # SU(2): [[a, -b*], [b, a*]]
    a, b = v[0, 0], v[1, 0]
    theta = 2 * np.arctan2(abs(b), abs(a))
    # a = cos(t/2) e^{-i(z+p)/2}, b = sin(t/2) e^{i(z-p)/2}
    if abs(b) < 1e-14:
        s, d = -2 * np.angle(a), 0.0
    elif abs(a) < 1e-14:
        s, d = 0.0, 2 * np.angle(b)
    else:
        s, d = -2 * np.angle(a), 2 * np.angle(b)
    return (s + d) / 2, float(theta), (s - d) / 2, complex(phase)


def schmidt_coefficients(c: float) -> tuple[float, float]:
    r = _sqrt1mc2(c)
    return float(np.sqrt((1 + r) / 2)), float(np.sqrt(max(0.0, (1 - r) / 2)))


@dataclass(frozen=True)
class SchmidtAngles:
    """Concurrence plus the Euler angles of the local unitaries."""

    C: float
    theta_1: float
    theta_2: float
    phi_c1: float
    phi_c2: float
    theta_z1: float
    theta_z2: float

    @property
    def theta(self) -> float:
        return 0.5 * (self.theta_1 + self.theta_2)

    @property
    def dtheta(self) -> float:
        return 0.5 * (self.theta_1 - self.theta_2)

    @property
    def phi_c(self) -> float:
        return 0.5 * (self.phi_c1 + self.phi_c2)

    @property
    def dphi_c(self) -> float:
        return 0.5 * (self.phi_c1 - self.phi_c2)

    @property
    def theta_z(self) -> float:
        return 0.5 * (self.theta_z1 + self.theta_z2)

    @property
    def dtheta_z(self) -> float:
        return 0.5 * (self.theta_z1 - self.theta_z2)

    @property
    def lambdas(self) -> tuple[float, float]:
        return schmidt_coefficients(self.C)

    @property
    def phi_lambda(self) -> float:
        """Relative phase of ``|ee>`` against ``|gg>`` when the local rotations
        reduce to z rotations (theta = dtheta = 0), wrapped into (-pi, pi]."""
        p = -2.0 * (self.theta_z + self.phi_c) - np.pi
        return float(np.angle(np.exp(1j * p)))

    def unitaries(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            euler_unitary(self.theta_z1, self.theta_1, self.phi_c1),
            euler_unitary(self.theta_z2, self.theta_2, self.phi_c2),
        )

    def state(self) -> np.ndarray:
        le, lg = self.lambdas
        u1, u2 = self.unitaries()
        core = le * ket(0, 0) - lg * ket(1, 1)
        return np.kron(u1, u2) @ core

    @classmethod
    def from_symmetric(cls, C, theta=0.0, dtheta=0.0, phi_c=0.0, dphi_c=0.0,
                       theta_z=0.0, dtheta_z=0.0) -> "SchmidtAngles":
        return cls(C, theta + dtheta, theta - dtheta, phi_c + dphi_c, phi_c - dphi_c,
                   theta_z + dtheta_z, theta_z - dtheta_z)


def schmidt_decompose(psi) -> tuple[SchmidtAngles, np.ndarray, np.ndarray]:
    """Write ``psi`` as ``U1 (x) U2 [l_e|ee> - l_g|gg>]`` up to a global phase.

    Returns the angles and the two unitaries built from them.  Gauge at the
    endpoints: the antisymmetric z rotation ``dphi_c`` is set to zero (the core
    state is invariant under it), and at C = 0 the Schmidt phase is chosen so
    that ``phi_lambda = 0``.
    """
    psi = _as_state(psi)
    psi = psi / np.linalg.norm(psi)
    w, s, vh = np.linalg.svd(psi.reshape(2, 2))
    le, lg = float(s[0]), float(s[1])
    c = float(min(1.0, 2 * le * lg))
    # psi = le w0 (x) v0 + lg w1 (x) v1 with v_k the rows of vh
    u1 = np.column_stack([w[:, 0], -w[:, 1]])
    u2 = vh.T
    z1, t1, p1, _ = _euler_angles(u1)
    z2, t2, p2, _ = _euler_angles(u2)
    # move the antisymmetric part of phi_c into the core (identity on the core
    # state only as a pair): Rz(p)(x)Rz(-p) acts trivially on |ee>,|gg>
    dp = 0.5 * (p1 - p2)
    p1, p2 = p1 - dp, p2 + dp
    if c < 1e-12:
        # phi_lambda gauge: fold the symmetric z phase into theta_z
        p1 = p2 = -0.5 * (z1 + z2) - np.pi / 2
    angles = SchmidtAngles(c, t1, t2, p1, p2, z1, z2)
    u1r, u2r = angles.unitaries()
    return angles, u1r, u2r


def schmidt_residual(psi, angles: SchmidtAngles) -> float:
    """Distance between ``psi`` and the reconstruction, minimized over global phase."""
    psi = _as_state(psi)
    psi = psi / np.linalg.norm(psi)
    rec = angles.state()
    ov = np.vdot(rec, psi)
    phase = ov / abs(ov) if abs(ov) > 0 else 1.0
    return float(np.linalg.norm(psi - phase * rec))


# -- analytic concurrence dynamics ------------------------------------------


def concurrence_rate_ideal(C: float, phi_l: float, phi_r: float, phi_lambda: float) -> float:
    """dC/dt for a Schmidt-form state under the feedback protocol."""
    if not 0.0 <= C <= 1.0 + 1e-12:
        raise ValueError("concurrence must lie in [0, 1]")
    if C == 0.0:
        return 2.0 * abs(np.sin(phi_l - phi_r))
    return float(
        np.sin(phi_l - phi_r) * np.sin(phi_l + phi_r - phi_lambda) * (_sqrt1mc2(C) + 1.0) - C
    )


def _x_ops(phi_l: float, phi_r: float) -> tuple[np.ndarray, np.ndarray]:
    s = np.array([[0, 0], [1, 0]], dtype=complex)
    s1, s2 = np.kron(s, np.eye(2)), np.kron(np.eye(2), s)
    cl = np.exp(-1j * phi_l) * (s1 + s2) / np.sqrt(2)
    cr = np.exp(-1j * phi_r) * (s1 - s2) / np.sqrt(2)
    return 0.5 * (cl + dag(cl)), 0.5 * (cr + dag(cr))


def concurrence_rate_general(s: SchmidtAngles, phi_l: float, phi_r: float) -> tuple[float, float, float]:
    """Drift and the two noise coefficients of dC for an arbitrary pure state.

    The noise coefficients are ``-2 C <x_L>`` and ``-2 C <x_R>``.
    """
    C = s.C
    if C <= 0.0:
        raise ValueError("C = 0 is handled by concurrence_rate_ideal")
    u, v = np.cos(s.theta), np.cos(s.dtheta)
    alpha = 2 * s.theta_z + phi_l + phi_r
    dphi = phi_l - phi_r
    r = _sqrt1mc2(C)
    bracket = (
        (r * (u * u + v * v) / 2 + u * v) * np.cos(alpha) * np.sin(2 * s.phi_c)
        + (r * u * v + (u * u + v * v) / 2) * np.sin(alpha) * np.cos(2 * s.phi_c)
        + C * (u * u - v * v) / 2 * np.sin(alpha)
    )
    drift = -C - np.sin(dphi) * bracket
    psi = s.state()
    xl, xr = _x_ops(phi_l, phi_r)
    ex_l = np.vdot(psi, xl @ psi).real
    ex_r = np.vdot(psi, xr @ psi).real
    return float(drift), float(-2 * C * ex_l), float(-2 * C * ex_r)


def hitting_time(C: float) -> float:
    """Time for the deterministic protocol to reach concurrence ``C`` from 0."""
    if not -1e-12 <= C <= 1.0 + 1e-12:
        raise ValueError("concurrence must lie in [0, 1]")
    C = min(1.0, max(0.0, C))
    return float(np.arcsin(C) / 2 - np.log(np.sqrt((1 + _sqrt1mc2(C)) / 2)))


def concurrence_of_time(t: float, tol: float = 1e-10) -> float:
    """Inverse of :func:`hitting_time`, by bisection."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t >= HITTING_TIME_UNIT:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if hitting_time(mid) < t:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def schmidt_form_residual(psi) -> float:
    """Weight of ``psi`` outside span{|ee>, |gg>}."""
    psi = _as_state(psi)
    psi = psi / np.linalg.norm(psi)
    return float(np.sqrt(abs(psi[1]) ** 2 + abs(psi[2]) ** 2))


__all__ = [
    "SchmidtAngles", "bell_target", "concurrence_mixed", "concurrence_of_time",
    "concurrence_pure", "concurrence_rate_general", "concurrence_rate_ideal",
    "euler_unitary", "fidelity_to_target", "hitting_time", "schmidt_coefficients",
    "schmidt_decompose", "schmidt_form_residual", "schmidt_residual", "HITTING_TIME_UNIT",
]

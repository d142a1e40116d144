"""Dense complex linear algebra and superoperators on small Hilbert spaces.

Conventions used throughout the package:

* qubit 1 is the left tensor factor;
* two-level basis order is ``(|e>, |g>)`` so that ``|ee>, |eg>, |ge>, |gg>``
  index 0..3, and ``sigma_z |e> = +|e>``;
* the lowering operator is ``SIGMA_MINUS = |g><e|``.

Everything here is a pure function of its arguments.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)


class DimensionError(ValueError):
    """Raised when operator shapes are incompatible."""


def as_operator(x) -> np.ndarray:
    m = np.asarray(x, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    return m


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[-2:] != y.shape[-2:]:
        raise DimensionError(f"dimension mismatch: {x.shape} vs {y.shape}")


def dag(x: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(x, -1, -2))


def commutator(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_pair(x, y)
    return x @ y - y @ x


def expectation(x: np.ndarray, rho: np.ndarray) -> complex:
    """Return ``Tr[x rho]``."""
    _check_pair(x, rho)
    return complex(np.einsum("ij,ji->", x, rho))


def kron(*ops: np.ndarray) -> np.ndarray:
    out = np.array([[1.0 + 0j]])
    for op in ops:
        out = np.kron(out, op)
    return out


def ket(*labels: int, dims: Sequence[int] | None = None) -> np.ndarray:
    """Product basis vector, e.g. ``ket(0, 1)`` is ``|eg>`` on two qubits."""
    dims = dims or [2] * len(labels)
    out = np.array([1.0 + 0j])
    for lab, d in zip(labels, dims):
        v = np.zeros(d, dtype=complex)
        v[lab] = 1.0
        out = np.kron(out, v)
    return out


def projector(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def dissipator(x: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Lindblad dissipator ``x rho x^+ - {x^+ x, rho}/2``."""
    _check_pair(x, rho)
    xd = dag(x)
    xdx = xd @ x
    return x @ rho @ xd - 0.5 * (xdx @ rho + rho @ xdx)


def meas_superop_bar(m: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``m rho + rho m^+`` (no expectation-value subtraction)."""
    _check_pair(m, rho)
    return m @ rho + rho @ dag(m)


def meas_superop(m: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Measurement superoperator ``m rho + rho m^+ - Tr[(m + m^+) rho] rho``."""
    out = meas_superop_bar(m, rho)
    return out - np.trace(out) * rho


def is_hermitian(x: np.ndarray, tol: float = 1e-10) -> bool:
    return bool(np.linalg.norm(x - dag(x)) <= tol * max(1.0, np.linalg.norm(x)))


def is_unitary(x: np.ndarray, tol: float = 1e-10) -> bool:
    return bool(np.linalg.norm(dag(x) @ x - np.eye(x.shape[0])) <= tol)


def is_physical(rho: np.ndarray, tol: float = 1e-8) -> bool:
    """Hermitian, unit trace and positive semidefinite within ``tol``."""
    rho = np.asarray(rho)
    if not is_hermitian(rho, tol):
        return False
    if abs(np.trace(rho) - 1.0) > tol:
        return False
    return bool(np.linalg.eigvalsh(0.5 * (rho + dag(rho))).min() >= -tol)


def expm(x: np.ndarray) -> np.ndarray:
    """Matrix exponential for small dense matrices.

    Normal matrices go through an eigendecomposition; anything else falls back
    to scaling-and-squaring.
    """
    x = as_operator(x)
    if np.linalg.norm(x @ dag(x) - dag(x) @ x) <= 1e-12 * max(1.0, np.linalg.norm(x)) ** 2:
        h = 0.5 * (x + dag(x))
        a = -0.5j * (x - dag(x))
        if np.linalg.norm(a) <= 1e-14 * max(1.0, np.linalg.norm(x)):
            w, v = np.linalg.eigh(h)
            return (v * np.exp(w)) @ dag(v)
        if np.linalg.norm(h) <= 1e-14 * max(1.0, np.linalg.norm(x)):
            w, v = np.linalg.eigh(a)
            return (v * np.exp(1j * w)) @ dag(v)
    from scipy.linalg import expm as _expm

    return _expm(x)


def unitary_from_generator(g: np.ndarray) -> np.ndarray:
    """``exp(-i g)`` for Hermitian ``g``; works on stacks of matrices."""
    g = 0.5 * (g + dag(g))
    w, v = np.linalg.eigh(g)
    return (v * np.exp(-1j * w)[..., None, :]) @ dag(v)


def pseudoinverse(m: np.ndarray, null_tol: float = 1e-9) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``null_tol`` times the largest one are treated as
    exact zeros.  Accepts a stack of matrices (leading batch axes).
    """
    if null_tol <= 0:
        raise ValueError("null_tol must be positive")
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    if s.shape[-1] == 0:
        return np.zeros(np.swapaxes(m, -1, -2).shape)
    top = s[..., :1]
    keep = (s > null_tol * top) & (top > 0)
    inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return np.swapaxes(vt, -1, -2) @ (inv[..., :, None] * np.swapaxes(u, -1, -2))


def null_dimension(m: np.ndarray, null_tol: float = 1e-9) -> int:
    s = np.linalg.svd(np.asarray(m, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return int(s.size)
    return int(np.sum(s <= null_tol * s[0]))


def lie_closure_residual(basis: Sequence[np.ndarray]) -> float:
    """Largest relative Frobenius residual of ``-i[H_a, H_b]`` outside span(basis).

    For Hermitian ``H_a``, ``-i[H_a, H_b]`` is Hermitian, so closure means it is
    a *real* combination of the basis; the residual is measured after a real
    least-squares projection.
    """
    if len(basis) == 0:
        raise ValueError("empty basis")
    mats = [as_operator(h) for h in basis]
    dim = mats[0].shape[0]
    for h in mats:
        if h.shape != (dim, dim):
            raise DimensionError("basis operators must share a dimension")
    # real embedding of the Hermitian matrices
    cols = np.array([np.concatenate([h.real.ravel(), h.imag.ravel()]) for h in mats]).T
    worst = 0.0
    for a in range(len(mats)):
        for b in range(a + 1, len(mats)):
            k = -1j * commutator(mats[a], mats[b])
            norm = np.linalg.norm(k)
            if norm == 0.0:
                continue
            target = np.concatenate([k.real.ravel(), k.imag.ravel()])
            coef, *_ = np.linalg.lstsq(cols, target, rcond=None)
            res = np.linalg.norm(cols @ coef - target) / norm
            worst = max(worst, float(res))
    return worst


def lie_closure_check(basis: Sequence[np.ndarray], tol: float = 1e-9) -> bool:
    """True iff the real span of ``basis`` is closed under ``-i[., .]``."""
    for h in basis:
        if not is_hermitian(as_operator(h)):
            raise ValueError("basis operators must be Hermitian")
    return lie_closure_residual(basis) <= tol


def local_paulis(n_qubits: int = 2) -> list[np.ndarray]:
    """``[sx_1, sy_1, sz_1, sx_2, sy_2, sz_2, ...]`` on ``n_qubits`` qubits."""
    out = []
    for q in range(n_qubits):
        for p in (SX, SY, SZ):
            factors = [I2] * n_qubits
            factors[q] = p
            out.append(kron(*factors))
    return out


LOCAL_PAULI_LABELS = ("sx1", "sy1", "sz1", "sx2", "sy2", "sz2")

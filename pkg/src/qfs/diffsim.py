"""Homodyne engines: stochastic Schroedinger/master equation trajectories with
proportional feedback, and the averaged (optionally delay-corrected) feedback
master equation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import paqs
from .measures import bell_target, concurrence_mixed, concurrence_pure
from .qops import dag, ket, lie_closure_check, local_paulis, projector, unitary_from_generator

log = logging.getLogger(__name__)


@dataclass
class HomodyneConfig:
    gamma: float = 1.0
    phi_l: float = -np.pi / 2
    phi_r: float = 0.0
    eta_l: float = 1.0
    eta_r: float = 1.0
    delay: float = 0.0
    dt: float = 1e-4
    T: float = 1.2
    seed: int = 0
    n_traj: int = 1
    scheme: str = "euler"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        for name in ("eta_l", "eta_r"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.dt <= 0 or self.T <= 0:
            raise ValueError("dt and T must be positive")
        if self.delay < 0:
            raise ValueError("delay must be nonnegative")
        if self.delay > 0 and self.dt > self.delay * (1 + 1e-9):
            raise ValueError("dt must resolve the feedback delay (dt <= delay)")
        if self.n_traj < 1:
            raise ValueError("n_traj must be positive")
        if self.scheme not in ("euler", "joint"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "joint" and (self.delay > 0 or not self.ideal_detection):
            raise ValueError("the joint scheme needs unit efficiencies and zero delay")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def delay_steps(self) -> int:
        if self.delay <= 0:
            return 0
        return int(math.ceil(self.delay / self.dt - 1e-9))

    def channels(self):
        return paqs.homodyne_channels(self.gamma, self.phi_l, self.phi_r, self.eta_l, self.eta_r)

    @property
    def ideal_detection(self) -> bool:
        return self.eta_l == 1.0 and self.eta_r == 1.0


@dataclass
class FeedbackSpec:
    """Feedback Hamiltonians and gains.

    ``mode`` is ``fixed`` (constant A, B) or ``paqs_recomputed`` (solved every
    step).  For recomputed gains ``state_source`` selects the state they are
    solved from, ``trajectory`` or ``ensemble`` (mean state of the batch).
    ``signal`` selects whether the proportional term multiplies the
    measurement record ``dr`` or the bare noise ``dW``.
    """

    hamiltonians: np.ndarray
    A: np.ndarray
    B: np.ndarray
    mode: str = "fixed"
    state_source: str = "trajectory"
    signal: str = "record"

    def __post_init__(self):
        self.hamiltonians = np.asarray(self.hamiltonians, dtype=complex)
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        nh = len(self.hamiltonians)
        if self.A.ndim != 2 or self.A.shape[1] != nh or self.B.shape != (nh,):
            raise ValueError("A must be (channels, hamiltonians) and B (hamiltonians,)")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("feedback gains must be finite")
        if self.mode not in ("fixed", "paqs_recomputed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.state_source not in ("trajectory", "ensemble"):
            raise ValueError(f"unknown state_source {self.state_source!r}")
        if self.signal not in ("record", "noise"):
            raise ValueError(f"unknown signal {self.signal!r}")
        if not lie_closure_check(list(self.hamiltonians)):
            raise paqs.LieClosureError("feedback Hamiltonians are not Lie-closed")
        self.local_pauli_basis = bool(
            self.hamiltonians.shape == (6, 4, 4)
            and np.array_equal(self.hamiltonians, np.array(local_paulis(2))))

    @classmethod
    def none(cls, n_channels=2, hamiltonians=None):
        h = local_paulis(2) if hamiltonians is None else hamiltonians
        return cls(h, np.zeros((n_channels, len(h))), np.zeros(len(h)))

    @classmethod
    def paqs(cls, hamiltonians=None, n_channels=2, **kw):
        h = local_paulis(2) if hamiltonians is None else hamiltonians
        return cls(h, np.zeros((n_channels, len(h))), np.zeros(len(h)), mode="paqs_recomputed", **kw)

    def with_gains(self, A, B) -> "FeedbackSpec":
        return FeedbackSpec(self.hamiltonians, A, B, "fixed", self.state_source, self.signal)


@dataclass
class DiffusiveRecord:
    times: np.ndarray
    dW: np.ndarray
    dr: np.ndarray
    fidelity: np.ndarray
    concurrence: np.ndarray

    COLUMNS = ("t", "dW_L", "dW_R", "dr_L", "dr_R", "fidelity", "concurrence")

    def rows(self):
        for k in range(len(self.times)):
            yield (self.times[k], self.dW[k, 0], self.dW[k, 1], self.dr[k, 0], self.dr[k, 1],
                   self.fidelity[k], self.concurrence[k])

    def to_csv(self, header_lines: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.rows():
            w.writerow([format_number(v) for v in row])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "steps": int(len(self.times)),
            "final_time": float(self.times[-1]) if len(self.times) else 0.0,
            "final_fidelity": float(self.fidelity[-1]) if len(self.times) else float("nan"),
            "final_concurrence": float(self.concurrence[-1]) if len(self.times) else float("nan"),
            "max_fidelity": float(np.max(self.fidelity)) if len(self.times) else float("nan"),
        }


def format_number(x) -> str:
    return f"{float(x):.12g}"


# -- single steps ------------------------------------------------------------


def _ops(cfg: HomodyneConfig) -> tuple[np.ndarray, np.ndarray]:
    ch = cfg.channels()
    return np.array([c.op for c in ch]), np.array([c.eta for c in ch])


def sse_step(psi, cfg: HomodyneConfig, dW_L, dW_R) -> np.ndarray:
    """One Euler-Maruyama step of the homodyne SSE, then renormalization.

    Works on a single state ``(4,)`` or a batch ``(N, 4)`` with matching
    increments.
    """
    psi = np.asarray(psi, dtype=complex)
    single = psi.ndim == 1
    ps = psi[None] if single else psi
    dw = np.stack([np.atleast_1d(dW_L), np.atleast_1d(dW_R)], axis=-1).astype(float)
    ops, _ = _ops(cfg)
    new = _sse_increment(ps, ops, dw, cfg.dt)
    return new[0] if single else new


def _sse_increment(ps, ops, dw, dt, return_x=False):
    # c psi for each channel: (N, nc, d)
    cpsi = np.swapaxes(ps[None] @ np.swapaxes(ops, 1, 2), 0, 1)
    x = np.real(np.sum(ps.conj()[:, None, :] * cpsi, axis=2))  # Re<M_i>
    mdm = np.einsum("iba,ibc->ac", ops.conj(), ops)
    cdc = ps @ mdm.T  # sum_i M^+ M psi
    drift = -0.5 * cdc + np.sum(x[:, :, None] * cpsi, axis=1) - 0.5 * np.sum(x * x, axis=1)[:, None] * ps
    noise = np.sum(dw[:, :, None] * cpsi, axis=1) - np.sum(x * dw, axis=1)[:, None] * ps
    out = ps + drift * dt + noise
    out = out / np.linalg.norm(out, axis=1, keepdims=True)
    return (out, x) if return_x else out


def joint_kraus_step(ps, ops, hams, A, B, dy, dt):
    """Measurement and instantaneous record feedback as one second-order map.

    Integrates the linear equation ``d psi = F psi dt + sum_i G_i psi dy_i``
    with ``G_i = M_i - i H~_i`` and
    ``F = -sum M^+M/2 - i B.H - sum H~^2/2 - i sum H~_i M_i`` (feedback acting
    after the measurement), keeping the ``G_i G_j (dy_i dy_j - delta_ij dt)/2``
    terms; the state is renormalized afterwards.  ``A`` and ``B`` carry a
    leading batch axis.
    """
    n, d = ps.shape
    ht = np.einsum("nij,jab->niab", A, hams)
    g = ops[None] - 1j * ht
    mdm = np.einsum("iba,ibc->ac", ops.conj(), ops)
    f = (-0.5 * mdm[None] - 1j * np.einsum("nj,jab->nab", B, hams)
         - 0.5 * np.einsum("niab,nibc->nac", ht, ht) - 1j * np.einsum("niab,ibc->nac", ht, ops))
    # apply to the state directly instead of building the Kraus matrix
    gpsi = np.einsum("niab,nb->nia", g, ps)
    out = ps + dt * np.einsum("nab,nb->na", f, ps) + np.einsum("ni,nia->na", dy, gpsi)
    nc = ops.shape[0]
    for i in range(nc):
        for j in range(nc):
            w = dy[:, i] * dy[:, j] - (dt if i == j else 0.0)
            out = out + 0.5 * w[:, None] * np.einsum("nab,nb->na", g[:, i], gpsi[:, j])
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def apply_feedback_unitary(psi, spec: FeedbackSpec, dW_delayed, dt: float, A=None, B=None):
    """Apply ``exp(-i sum_j theta_j H_j)`` with ``theta = B dt + A^T dW``.

    ``psi`` may be a state vector, a density matrix, or batches of either
    (leading axis).  ``A`` and ``B`` default to the feedback spec's gains and may carry a
    leading batch axis.
    """
    A = spec.A if A is None else np.asarray(A)
    B = spec.B if B is None else np.asarray(B)
    dw = np.asarray(dW_delayed, dtype=float)
    theta = B * dt + np.einsum("...i,...ij->...j", dw, A)
    d = spec.hamiltonians.shape[-1]
    psi = np.asarray(psi, dtype=complex)
    if psi.shape[-1] != d:
        raise ValueError("state and feedback Hamiltonians have different dimensions")
    if not np.any(theta):
        return psi.copy()
    if spec.local_pauli_basis:
        u = _local_pauli_unitary(theta)
    else:
        u = unitary_from_generator(np.einsum("...j,jab->...ab", theta, spec.hamiltonians))
    if psi.ndim >= 2 and psi.shape[-2:] == (d, d):
        return u @ psi @ dag(u)
    return (u @ psi[..., None])[..., 0]


_PAULIS = np.array([[[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]], dtype=complex)


def _local_pauli_unitary(theta):
    """``exp(-i theta.(s1, s2))`` for the local Pauli basis, as a product of 2x2 rotations."""
    theta = np.asarray(theta, dtype=float)
    factors = []
    for q in range(2):
        v = theta[..., 3 * q:3 * q + 3]
        n = np.linalg.norm(v, axis=-1)
        axis = np.einsum("...k,kab->...ab", v * np.sinc(n / np.pi)[..., None], _PAULIS)
        factors.append(np.cos(n)[..., None, None] * np.eye(2) - 1j * axis)
    u1, u2 = factors
    return np.einsum("...ab,...cd->...acbd", u1, u2).reshape(theta.shape[:-1] + (4, 4))


# -- trajectories ------------------------------------------------------------


@dataclass
class EnsembleResult:
    times: np.ndarray
    fidelity: np.ndarray  # (n_traj, samples)
    concurrence: np.ndarray
    mean_rho: np.ndarray  # (samples, d, d)
    dW: np.ndarray | None = None  # (n_traj, steps, 2)
    dr: np.ndarray | None = None
    final_states: np.ndarray | None = None

    def record(self, k: int) -> DiffusiveRecord:
        if self.dW is None:
            raise ValueError("increments were not kept")
        steps = self.dW.shape[1]
        stride = max(1, steps // max(1, len(self.times) - 1))
        idx = np.minimum(np.arange(1, len(self.times)) * stride - 1, steps - 1)
        return DiffusiveRecord(
            self.times[1:], self.dW[k, idx], self.dr[k, idx],
            self.fidelity[k, 1:], self.concurrence[k, 1:])


def trajectory_streams(seed: int, n: int):
    """Independent generators, one per trajectory index."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _concurrence_batch(states, pure: bool):
    if pure:
        return np.array([concurrence_pure(s) for s in states])
    out = []
    for r in states:
        try:
            out.append(concurrence_mixed(0.5 * (r + dag(r)), tol=1e-6))
        except ValueError:
            out.append(float("nan"))
    return np.array(out)


def run_homodyne_ensemble(cfg: HomodyneConfig, spec: FeedbackSpec, n_traj: int | None = None,
                          seed: int | None = None, rngs=None, sample_every: int = 1,
                          keep_increments: bool = False, initial=None, start_index: int = 0,
                          schedule=None) -> EnsembleResult:
    """Batched trajectories with a delay buffer.

    With unit efficiencies the state is a pure vector; otherwise each
    trajectory carries a density matrix (undetected emission averaged).
    Per-trajectory noise comes from independent generators, so each
    trajectory's increments do not depend on the batch composition.
    ``schedule`` optionally supplies per-step gains ``(A_t, B_t)`` arrays.
    """
    n = cfg.n_traj if n_traj is None else n_traj
    seed = cfg.seed if seed is None else seed
    if rngs is None:
        rngs = trajectory_streams(seed, start_index + n)[start_index:]
    steps = cfg.steps
    dt = cfg.dt
    ops, etas = _ops(cfg)
    pure = cfg.ideal_detection
    d = 4
    x_t = bell_target()
    noise = np.stack([g.standard_normal((steps, 2)) for g in rngs]) * np.sqrt(dt)  # (n, steps, 2)
    if initial is None:
        initial = ket(0, 0)
    initial = np.asarray(initial, dtype=complex)
    if pure:
        state = np.tile(initial, (n, 1))
    else:
        rho0 = projector(initial) if initial.ndim == 1 else initial
        state = np.tile(rho0, (n, 1, 1))
    if cfg.scheme == "joint" and spec.signal != "record":
        raise ValueError("the joint scheme feeds back the measurement record")
    nd = cfg.delay_steps
    sig_hist = np.zeros((steps, n, 2))
    dr_all = np.zeros((n, steps, 2)) if keep_increments else None
    times = [0.0]
    fid = [_fidelity_batch(state, x_t, pure)]
    conc = [_concurrence_batch(state, pure)]
    mean_rho = [_mean_rho(state, pure)]
    root = np.sqrt(etas)
    for k in range(steps):
        dw = noise[:, k, :]
        if pure and cfg.scheme == "joint":
            m = 2 * np.real(np.einsum("na,iab,nb->ni", state.conj(), ops, state, optimize=True))
            new = None
        elif pure:
            new, x = _sse_increment(state, ops, dw, dt, return_x=True)
            m = 2 * x
        else:
            m = np.real(np.einsum("iab,nba->ni", ops + dag(ops), state))
            new = _sme_increment(state, ops, root, dw, dt, m)
        dr = root * m * dt + dw
        sig_hist[k] = dr if spec.signal == "record" else dw
        if keep_increments:
            dr_all[:, k] = dr
        early = k < nd
        A, B = _gains(spec, state, pure, ops, etas, x_t, schedule, k, early)
        sig = np.zeros((n, 2)) if early else sig_hist[k - nd]
        if new is None:
            A_b = np.broadcast_to(A, (n,) + np.shape(A)[-2:])
            B_b = np.broadcast_to(B, (n,) + np.shape(B)[-1:])
            state = joint_kraus_step(state, ops, spec.hamiltonians, A_b, B_b, dr, dt)
        else:
            state = apply_feedback_unitary(new, spec, sig, dt, A=A, B=B)
        if (k + 1) % sample_every == 0 or k == steps - 1:
            times.append((k + 1) * dt)
            fid.append(_fidelity_batch(state, x_t, pure))
            conc.append(_concurrence_batch(state, pure))
            mean_rho.append(_mean_rho(state, pure))
    return EnsembleResult(
        times=np.array(times), fidelity=np.array(fid).T, concurrence=np.array(conc).T,
        mean_rho=np.array(mean_rho), dW=noise if keep_increments else None, dr=dr_all,
        final_states=state)


def _gains(spec, state, pure, ops, etas, x_t, schedule, k, early):
    if schedule is not None:
        A_t, B_t = schedule
        A, B = A_t[k], B_t[k]
    elif spec.mode == "fixed":
        A, B = spec.A, spec.B
    else:
        rhos = np.einsum("na,nb->nab", state, state.conj()) if pure else state
        chans = [paqs.MeasurementChannel(o, e) for o, e in zip(ops, etas)]
        if spec.state_source == "ensemble":
            rhos = rhos.mean(axis=0)[None]
        A, B = paqs.solve_batch(rhos, x_t, chans, spec.hamiltonians, proportional=not early)
        if spec.state_source == "ensemble":
            A, B = A[0], B[0]
    if early:
        A = np.zeros_like(A)
    return A, B


def _sme_increment(r, ops, root, dw, dt, m):
    opsd = dag(ops)
    mr = np.einsum("iab,nbc->niac", ops, r)
    rm = np.einsum("nab,ibc->niac", r, opsd)
    mdm = np.einsum("iab,ibc->iac", opsd, ops)
    diss = np.einsum("niab,ibc->nac", mr, opsd) - 0.5 * (
        np.einsum("iab,nbc->nac", mdm, r) + np.einsum("nab,ibc->nac", r, mdm))
    meas = mr + rm - m[:, :, None, None] * r[:, None]
    new = r + diss * dt + np.einsum("i,ni,niab->nab", root, dw, meas)
    new = 0.5 * (new + dag(new))
    return new / np.real(np.trace(new, axis1=1, axis2=2))[:, None, None]


def _fidelity_batch(state, x_t, pure):
    if pure:
        return np.real(np.einsum("na,ab,nb->n", state.conj(), x_t, state))
    return np.real(np.einsum("ab,nba->n", x_t, state))


def _mean_rho(state, pure):
    if pure:
        return np.einsum("na,nb->ab", state, state.conj()) / len(state)
    return state.mean(axis=0)


def run_homodyne_trajectory(cfg: HomodyneConfig, spec: FeedbackSpec, rng) -> DiffusiveRecord:
    """Single trajectory from ``|ee>`` driven by the generator ``rng``."""
    res = run_homodyne_ensemble(cfg, spec, n_traj=1, rngs=[np.random.default_rng(rng)],
                                keep_increments=True)
    return DiffusiveRecord(res.times[1:], res.dW[0], res.dr[0], res.fidelity[0, 1:],
                           res.concurrence[0, 1:])


# -- master equations ----------------------------------------------------------


def _generator(rho, cfg, spec, A, B, form="meas"):
    ops, etas = _ops(cfg)
    if form == "meas":
        return paqs.feedback_generator(rho, rho, ops, etas, spec.hamiltonians, A, B)
    if form == "linear":
        # expectation values dropped: the average of record-driven feedback
        zero = paqs.feedback_generator(rho, rho, ops, etas, spec.hamiltonians, A, B)
        m = paqs.meas_expectations(ops, rho)
        ht = np.einsum("ij,jab->iab", A, spec.hamiltonians)
        for i in range(len(ops)):
            zero = zero - 1j * np.sqrt(etas[i]) * m[i] * (ht[i] @ rho - rho @ ht[i])
        return zero
    raise ValueError(f"unknown form {form!r}")


def feedback_me_step(rho, cfg: HomodyneConfig, spec: FeedbackSpec, form: str = "meas",
                     dt: float | None = None) -> np.ndarray:
    """One Euler step of the averaged feedback master equation with the feedback spec's gains."""
    dt = cfg.dt if dt is None else dt
    out = rho + dt * _generator(rho, cfg, spec, spec.A, spec.B, form)
    return 0.5 * (out + dag(out))


def delayed_me_step(rho, cfg: HomodyneConfig, spec: FeedbackSpec, liouvillian_hint=None,
                    form: str = "meas", dt: float | None = None) -> np.ndarray:
    """Euler step including the first-order feedback-delay correction.

    ``liouvillian_hint`` is an optional ``(A0, B0)`` pair of zeroth-order
    gains used inside the correction; by default the feedback spec's own gains.
    """
    dt = cfg.dt if dt is None else dt
    ops, etas = _ops(cfg)
    A0, B0 = (spec.A, spec.B) if liouvillian_hint is None else liouvillian_hint
    d = _generator(rho, cfg, spec, spec.A, spec.B, form)
    if cfg.delay > 0:
        d = d + cfg.delay * paqs.delay_correction(rho, ops, etas, spec.hamiltonians, spec.A,
                                                  np.asarray(A0), np.asarray(B0))
    out = rho + dt * d
    return 0.5 * (out + dag(out))


def project_physical(rho: np.ndarray) -> np.ndarray:
    """Clip negative eigenvalues and restore unit trace (no-op for physical rho)."""
    w, v = np.linalg.eigh(0.5 * (rho + dag(rho)))
    if w.min() >= 0:
        return rho
    w = np.clip(w, 0.0, None)
    out = (v * w) @ dag(v)
    return out / np.real(np.trace(out))


@dataclass
class MEResult:
    times: np.ndarray
    fidelity: np.ndarray
    concurrence: np.ndarray
    A: np.ndarray  # (samples, channels, hamiltonians)
    B: np.ndarray
    rho: np.ndarray
    indefinite_events: int = 0
    stopped_early: bool = False

    @property
    def peak(self) -> tuple[float, float]:
        """Largest fidelity over t > 0 and the time it occurs."""
        if len(self.times) < 2:
            return float(self.fidelity[0]), float(self.times[0])
        k = int(np.argmax(self.fidelity[1:])) + 1
        return float(self.fidelity[k]), float(self.times[k])


def run_feedback_me(cfg: HomodyneConfig, spec: FeedbackSpec | None = None, rho0=None,
                    sample_every: int = 1, physical: bool = True, keep_gains: bool = True,
                    stop_drop: float | None = None, form: str = "meas") -> MEResult:
    """Integrate the averaged feedback master equation from ``|ee><ee|``.

    For ``paqs_recomputed`` specs the gains are solved each step from the
    current state, including first-order delay corrections.  Before the first
    delayed record exists (t < delay) the proportional gains are zero and only
    the state-based term acts.  ``stop_drop`` ends the run once the fidelity
    has fallen that far below its running maximum.
    """
    spec = FeedbackSpec.paqs() if spec is None else spec
    x_t = bell_target()
    rho = projector(ket(0, 0)) if rho0 is None else np.asarray(rho0, dtype=complex)
    chans = cfg.channels()
    ops, etas = _ops(cfg)
    hams = spec.hamiltonians
    dt = cfg.dt
    nd = cfg.delay_steps
    times, fids, concs, As, Bs = [0.0], [_fid(rho, x_t)], [_conc(rho)], [], []
    indefinite = 0
    best = fids[0]
    best_after_start = -np.inf
    stopped = False
    for k in range(cfg.steps):
        early = k < nd
        if spec.mode == "paqs_recomputed":
            prob = paqs.ControlProblem(rho, x_t, chans, hams, delay=0.0 if early else cfg.delay,
                                       check_closure=False)
            sol = paqs.solve(prob, proportional=not early)
            A, B = sol.A, sol.B
            A0, B0 = sol.A0, sol.B0
            if not sol.hessian_negative_semidefinite:
                indefinite += 1
        else:
            A, B = (np.zeros_like(spec.A), spec.B) if early else (spec.A, spec.B)
            A0, B0 = A, B
        d = _generator(rho, cfg, spec, A, B, form)
        if cfg.delay > 0 and not early:
            d = d + cfg.delay * paqs.delay_correction(rho, ops, etas, hams, A, A0, B0)
        rho = rho + dt * d
        rho = 0.5 * (rho + dag(rho))
        if physical:
            rho = project_physical(rho)
        if keep_gains and (k % sample_every == 0):
            As.append(A)
            Bs.append(B)
        if (k + 1) % sample_every == 0 or k == cfg.steps - 1:
            f = _fid(rho, x_t)
            times.append((k + 1) * dt)
            fids.append(f)
            concs.append(_conc(rho))
            best_after_start = max(best_after_start, f)
            best = max(best, f)
            if stop_drop is not None and f < best_after_start - stop_drop:
                stopped = True
                break
    if indefinite:
        log.info("%d steps with an indefinite feedback Hessian", indefinite)
    return MEResult(np.array(times), np.array(fids), np.array(concs),
                    np.array(As) if As else np.zeros((0,) + spec.A.shape),
                    np.array(Bs) if Bs else np.zeros((0,) + spec.B.shape),
                    rho, indefinite, stopped)


def _fid(rho, x_t):
    return float(np.real(np.einsum("ab,ba->", x_t, rho)))


def _conc(rho):
    try:
        return concurrence_mixed(rho, tol=1e-6)
    except ValueError:
        return float("nan")


def trace_distance(r1, r2) -> float:
    return float(0.5 * np.abs(np.linalg.eigvalsh(0.5 * ((r1 - r2) + dag(r1 - r2)))).sum())


__all__ = [
    "DiffusiveRecord", "EnsembleResult", "FeedbackSpec", "HomodyneConfig", "MEResult",
    "apply_feedback_unitary", "delayed_me_step", "joint_kraus_step", "feedback_me_step", "format_number",
    "project_physical", "run_feedback_me", "run_homodyne_ensemble", "run_homodyne_trajectory",
    "sse_step", "trace_distance", "trajectory_streams",
]

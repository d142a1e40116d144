"""Photon-counting entanglement protocol: quantum-jump trajectories.

Each atom is a three-level system with basis order ``(up, down, e)``; the
optically excited level ``e`` decays to ``down`` at rate ``gamma``.  Two
atoms live on a 9-dimensional product space with atom 1 as the left factor.

Between clicks the state evolves under the non-Hermitian drift, and jump times
are drawn exactly by inverting the norm decay (no time stepping).  Undetected
emissions (path loss, detector inefficiency) are explicit jump channels so
that every emission is accounted for.

The cavity variant replaces each atom by an atom-cavity pair on the basis
``(e0, down1, down0, up0, up1)`` (atomic level, cavity photon number) with an
analytic propagator, and detection acts on the cavity fields.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.optimize import brentq

from .qops import kron

UP, DOWN, EXC = 0, 1, 2
OUTCOMES = ("success", "photon_lost", "early_second_click")
DETECTOR_SIGN = {"L": 1.0, "R": -1.0}

# atomic operators on one three-level atom
_SIGMA = np.zeros((3, 3), dtype=complex)
_SIGMA[DOWN, EXC] = 1.0
_I3 = np.eye(3, dtype=complex)
_SWAP_UD = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=complex)
_SWAP_DE = np.array([[1, 0, 0], [0, 0, 1], [0, 1, 0]], dtype=complex)
# qubit subspace of one atom: (up, down)
_QUBIT_LEVELS = (UP, DOWN)


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for trajectory ``index``; independent of how many others run."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


# -- configuration -----------------------------------------------------------


@dataclass
class CountingConfig:
    gamma: float = 1.0
    delay: float = 0.0
    eta_loss_1: float = 1.0
    eta_loss_2: float = 1.0
    eta_l: float = 1.0
    eta_r: float = 1.0
    phi_1: float = 0.0
    phi_2: float = 0.0
    dt: float = 1e-3
    seed: int = 0
    n_traj: int = 1000
    pulse: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.delay >= 0:
            raise ValueError("delay must be non-negative")
        for name in ("eta_loss_1", "eta_loss_2", "eta_l", "eta_r"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.n_traj) < 1:
            raise ValueError("n_traj must be positive")
        for name in ("phi_1", "phi_2"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class CavityConfig(CountingConfig):
    g: float = 1.0
    kappa: float = 10.0

    def validate(self) -> None:
        super().validate()
        if not (self.g > 0 and self.kappa > 0):
            raise ValueError("g and kappa must be positive")

    @property
    def gamma_slow(self) -> float:
        return float(np.real(cavity_rates(self.g, self.kappa)[1]))

    @property
    def gamma_fast(self) -> float:
        return float(np.real(cavity_rates(self.g, self.kappa)[0]))


# -- records -----------------------------------------------------------------


@dataclass
class JumpRecord:
    jump_times: list
    detectors: list  # "L"/"R" for beam-splitter outputs, None for path loss
    pulse_time: float
    lost_flags: list
    final_state: np.ndarray  # two-qubit state, basis (up up, up down, down up, down down)
    outcome: str

    @property
    def detected(self) -> list:
        return [d for d, lost in zip(self.detectors, self.lost_flags) if not lost]

    def target(self) -> np.ndarray:
        """Bell state heralded by the detector pattern: (|du> + s|ud>)/sqrt(2)."""
        det = self.detected
        sign = DETECTOR_SIGN[det[0]] * DETECTOR_SIGN[det[1]] if len(det) == 2 else 1.0
        return bell_pair(sign)

    def fidelity(self) -> float:
        return float(abs(np.vdot(self.target(), self.final_state)) ** 2)

    def to_json(self) -> str:
        state = [[float(z.real), float(z.imag)] for z in self.final_state]
        pulse = None if math.isinf(self.pulse_time) else float(self.pulse_time)
        return json.dumps({
            "jump_times": [float(t) for t in self.jump_times],
            "detectors": list(self.detectors),
            "pulse_time": pulse,
            "lost_flags": [bool(x) for x in self.lost_flags],
            "final_state": state,
            "outcome": self.outcome,
        })

    @classmethod
    def from_json(cls, line: str) -> "JumpRecord":
        d = json.loads(line)
        pulse = math.inf if d["pulse_time"] is None else d["pulse_time"]
        state = np.array([complex(re, im) for re, im in d["final_state"]])
        return cls(d["jump_times"], d["detectors"], pulse, d["lost_flags"], state, d["outcome"])


def bell_pair(sign: float = 1.0) -> np.ndarray:
    """``(|down up> + sign |up down>)/sqrt(2)`` in the two-qubit (up, down) basis."""
    v = np.zeros(4, dtype=complex)
    v[2] = 1.0  # down up
    v[1] = sign  # up down
    return v / np.sqrt(2.0)


def _classify(lost_flags, times, pulse_time) -> str:
    if any(lost_flags):
        return "photon_lost"
    if len(times) == 2 and times[1] > pulse_time:
        return "success"
    return "early_second_click"


# -- jump operators ----------------------------------------------------------


def _beam_splitter_modes(cfg: CountingConfig, a1, a2):
    """Path-weighted mode combinations ``(w1 a1 +/- w2 a2)/sqrt(2)``."""
    w1 = np.sqrt(cfg.eta_loss_1) * np.exp(-1j * cfg.phi_1)
    w2 = np.sqrt(cfg.eta_loss_2) * np.exp(-1j * cfg.phi_2)
    plus = (w1 * a1 + w2 * a2) / np.sqrt(2.0)
    minus = (w1 * a1 - w2 * a2) / np.sqrt(2.0)
    return plus, minus


def atomic_lowering():
    s1 = kron(_SIGMA, _I3)
    s2 = kron(_I3, _SIGMA)
    return s1, s2


def jump_operators(cfg: CountingConfig):
    """Detected-click operators ``(c_L, c_R)`` on the two-atom space (rate factor excluded)."""
    s1, s2 = atomic_lowering()
    plus, minus = _beam_splitter_modes(cfg, s1, s2)
    return np.sqrt(cfg.eta_l) * plus, np.sqrt(cfg.eta_r) * minus


@dataclass
class Channel:
    op: np.ndarray  # includes the emission rate
    detector: str | None
    lost: bool


def _channels(cfg: CountingConfig, a1, a2, rate: float) -> list[Channel]:
    """All emission channels; their ``c^+c`` sum to ``rate (a1^+a1 + a2^+a2)``."""
    plus, minus = _beam_splitter_modes(cfg, a1, a2)
    r = np.sqrt(rate)
    out = [
        Channel(r * np.sqrt(cfg.eta_l) * plus, "L", False),
        Channel(r * np.sqrt(cfg.eta_r) * minus, "R", False),
    ]
    if cfg.eta_l < 1:
        out.append(Channel(r * np.sqrt(1 - cfg.eta_l) * plus, "L", True))
    if cfg.eta_r < 1:
        out.append(Channel(r * np.sqrt(1 - cfg.eta_r) * minus, "R", True))
    if cfg.eta_loss_1 < 1:
        out.append(Channel(r * np.sqrt(1 - cfg.eta_loss_1) * a1, None, True))
    if cfg.eta_loss_2 < 1:
        out.append(Channel(r * np.sqrt(1 - cfg.eta_loss_2) * a2, None, True))
    return out


def counting_channels(cfg: CountingConfig) -> list[Channel]:
    s1, s2 = atomic_lowering()
    return _channels(cfg, s1, s2, cfg.gamma)


# -- models ------------------------------------------------------------------


class _CountingModel:
    """Two three-level atoms; the no-click drift is diagonal."""

    def __init__(self, cfg: CountingConfig):
        self.gamma = cfg.gamma
        self.channels = counting_channels(cfg)
        n_exc = np.array([(a == EXC) + (b == EXC) for a in range(3) for b in range(3)], dtype=float)
        self.rates = cfg.gamma * n_exc  # norm-squared decay rate of each basis state
        self.pulse_op = kron(_SWAP_UD, _SWAP_UD)
        self.excite_op = kron(_SWAP_DE, _SWAP_DE) @ self.pulse_op

    def propagate(self, psi, t):
        return psi * np.exp(-0.5 * self.rates * t)

    def jump_time(self, psi, u):
        """Solve ``|exp(-iHt) psi|^2 = u`` for normalized ``psi``; ``inf`` if never."""
        w = np.abs(psi) ** 2
        dark = w[self.rates == 0].sum()
        if u <= dark:
            return math.inf
        active = np.unique(self.rates[(w > 0) & (self.rates > 0)])
        if len(active) == 1:
            k = active[0]
            wk = w[self.rates == k].sum()
            return -math.log((u - dark) / wk) / k

        def f(t):
            return float(np.dot(w, np.exp(-self.rates * t))) - u

        hi = 1.0 / self.gamma
        while f(hi) > 0:
            hi *= 2.0
        return brentq(f, 0.0, hi, xtol=1e-14, rtol=1e-14)

    def settle(self, psi):
        """Long-time limit of the no-click evolution, renormalized."""
        out = np.where(self.rates == 0, psi, 0)
        return out / np.linalg.norm(out)

    def qubit_state(self, psi):
        m = psi.reshape(3, 3)[np.ix_(_QUBIT_LEVELS, _QUBIT_LEVELS)].ravel()
        n = np.linalg.norm(m)
        return m / n if n > 0 else m


def _run(model, psi, rng, delay: float, pulse_enabled: bool, t_start: float = 0.0):
    """Evolve until no excitation is left; returns events and the final state.

    The feedback pulse is scheduled ``delay`` after the first detected click.
    """
    t = t_start
    times, dets, lost = [], [], []
    pulse_time = math.inf
    pulse_pending = False
    while True:
        tau = model.jump_time(psi, rng.random())
        if pulse_pending and t + tau > pulse_time:
            psi = model.propagate(psi, pulse_time - t)
            t = pulse_time
            psi = model.pulse_op @ psi
            psi = psi / np.linalg.norm(psi)
            pulse_pending = False
            continue
        if math.isinf(tau):
            psi = model.settle(psi)
            break
        psi = model.propagate(psi, tau)
        t += tau
        weights = np.array([np.linalg.norm(ch.op @ psi) ** 2 for ch in model.channels])
        k = int(np.searchsorted(np.cumsum(weights), rng.random() * weights.sum(), side="right"))
        k = min(k, len(weights) - 1)
        ch = model.channels[k]
        psi = ch.op @ psi
        psi = psi / np.linalg.norm(psi)
        times.append(t)
        dets.append(ch.detector)
        lost.append(ch.lost)
        if pulse_enabled and not ch.lost and math.isinf(pulse_time):
            if sum(1 for x in lost if not x) == 1:
                pulse_time = t + delay
                pulse_pending = True
    return times, dets, lost, pulse_time, psi


def run_counting_trajectory(cfg: CountingConfig, rng, model=None) -> JumpRecord:
    """One photon-counting trajectory starting from ``|ee>``."""
    model = model or _CountingModel(cfg)
    psi = np.zeros(9, dtype=complex)
    psi[EXC * 3 + EXC] = 1.0
    times, dets, lost, pulse_time, psi = _run(model, psi, rng, cfg.delay, cfg.pulse)
    det_times = [t for t, x in zip(times, lost) if not x]
    return JumpRecord(times, dets, pulse_time, lost, model.qubit_state(psi),
                      _classify(lost, det_times, pulse_time))


# -- ensembles ---------------------------------------------------------------


@dataclass
class CountingSummary:
    n_traj: int
    success_rate: float
    stderr: float
    mean_fidelity_given_success: float
    fidelity_stderr: float
    min_fidelity_given_success: float
    counts: dict = field(default_factory=dict)
    same_detector_fraction: float = float("nan")
    second_click_left_fraction: float = float("nan")
    n_two_clicks: int = 0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _chunk_records(args):
    kind, cfg, seed, lo, hi = args
    if kind == "counting":
        runner, model = run_counting_trajectory, _CountingModel(cfg)
    else:
        runner, model = cavity_trajectory, _CavityModel(cfg)
    return [runner(cfg, trajectory_rng(seed, k), model) for k in range(lo, hi)]


def simulate_records(cfg: CountingConfig, kind: str = "counting", workers: int = 1,
                     n_traj: int | None = None, seed: int | None = None) -> list[JumpRecord]:
    """Run ``n_traj`` trajectories in index order, optionally across processes."""
    n = int(cfg.n_traj if n_traj is None else n_traj)
    seed = int(cfg.seed if seed is None else seed)
    workers = max(1, int(workers))
    if workers == 1 or n < 2 * workers:
        return _chunk_records((kind, cfg, seed, 0, n))
    bounds = np.linspace(0, n, 4 * workers + 1).astype(int)
    jobs = [(kind, cfg, seed, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_chunk_records, jobs))
    return [r for part in parts for r in part]


def summarize(records: list[JumpRecord]) -> CountingSummary:
    n = len(records)
    counts = {o: 0 for o in OUTCOMES}
    fids = []
    same = 0
    left2 = 0
    two = 0
    for r in records:
        counts[r.outcome] += 1
        if r.outcome == "success":
            fids.append(r.fidelity())
        det = r.detected
        if len(det) == 2 and not any(r.lost_flags):
            two += 1
            same += det[0] == det[1]
            left2 += det[1] == "L"
    p = counts["success"] / n
    fids = np.array(fids)
    ns = len(fids)
    return CountingSummary(
        n_traj=n, success_rate=p, stderr=math.sqrt(p * (1 - p) / n),
        mean_fidelity_given_success=float(fids.mean()) if ns else float("nan"),
        fidelity_stderr=float(fids.std(ddof=1) / math.sqrt(ns)) if ns > 1 else 0.0,
        min_fidelity_given_success=float(fids.min()) if ns else float("nan"),
        counts=counts,
        same_detector_fraction=same / two if two else float("nan"),
        second_click_left_fraction=left2 / two if two else float("nan"),
        n_two_clicks=two)


def counting_ensemble(cfg: CountingConfig, workers: int = 1, return_records: bool = False):
    """Monte-Carlo success rate and conditional fidelity of the counting protocol."""
    records = simulate_records(cfg, "counting", workers)
    summary = summarize(records)
    return (summary, records) if return_records else summary


# -- Barrett-Kok comparator ----------------------------------------------------


@dataclass
class BarrettKokRecord:
    round_clicks: tuple
    success: bool
    final_state: np.ndarray
    fidelity: float


def barrett_kok_trajectory(cfg: CountingConfig, rng, model=None) -> BarrettKokRecord:
    """Two-round heralded scheme without feedback.

    Each atom starts in ``(|up> + |e>)/sqrt(2)``.  After the first round a
    swap of ``up`` and ``down`` and a re-excitation of ``down`` precede the
    second round.  Success requires exactly one detected click per round.
    """
    model = model or _CountingModel(cfg)
    one = np.zeros(3, dtype=complex)
    one[UP] = one[EXC] = 1 / np.sqrt(2)
    psi = np.kron(one, one)
    rounds = []
    signs = []
    for r in range(2):
        times, dets, lost, _, psi = _run(model, psi, rng, 0.0, False)
        clicks = [d for d, x in zip(dets, lost) if not x]
        rounds.append(len(clicks))
        signs.extend(DETECTOR_SIGN[d] for d in clicks)
        if r == 0:
            psi = model.excite_op @ psi
    final = model.qubit_state(psi)
    success = rounds == [1, 1]
    sign = signs[0] * signs[1] if success else 1.0
    fid = float(abs(np.vdot(bell_pair(sign), final)) ** 2)
    return BarrettKokRecord(tuple(rounds), success, final, fid)


def barrett_kok_ensemble(cfg: CountingConfig) -> dict:
    n = int(cfg.n_traj)
    model = _CountingModel(cfg)
    recs = [barrett_kok_trajectory(cfg, trajectory_rng(cfg.seed, k), model) for k in range(n)]
    ok = [r for r in recs if r.success]
    p = len(ok) / n
    return {
        "n_traj": n, "success_rate": p, "stderr": math.sqrt(p * (1 - p) / n),
        "mean_fidelity_given_success": float(np.mean([r.fidelity for r in ok])) if ok else float("nan"),
    }


# -- cavity model ------------------------------------------------------------

C_E0, C_D1, C_D0, C_U0, C_U1 = range(5)


def cavity_rates(g: float, kappa: float):
    """``(Gamma_fast, Gamma_slow)``; complex when ``g > kappa/2``."""
    s = np.sqrt(complex(kappa * kappa / 4 - g * g))
    return kappa / 2 + s, kappa / 2 - s


def _cavity_block(t: float, g: float, kappa: float):
    """Entries ``(A, B, D)`` of the symmetric 2x2 propagator on ``(|e,0>, |down,1>)``."""
    s = np.sqrt(complex(kappa * kappa / 4 - g * g))
    e_slow = np.exp(-(kappa / 2 - s) * t / 2)
    e_fast = np.exp(-(kappa / 2 + s) * t / 2)
    mean = 0.5 * (e_slow + e_fast)
    x = s * t / 2
    if abs(x) < 1e-3:
        # (e_slow - e_fast)/(2 s) without cancellation near critical damping
        half_diff = math.exp(-kappa * t / 4) * t / 2 * (1 + x * x / 6 + x ** 4 / 120)
    else:
        half_diff = (e_slow - e_fast) / (2 * s)
    a = mean + kappa / 2 * half_diff
    b = -1j * g * half_diff
    d = mean - kappa / 2 * half_diff
    return complex(a), complex(b), complex(d)


def cavity_amplitudes(t: float, cfg: CavityConfig):
    """Amplitudes ``(A, B)`` on ``(|e,0>, |down,1>)`` after time ``t`` from ``|e,0>``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    a, b, _ = _cavity_block(t, cfg.g, cfg.kappa)
    return a, b


def cavity_propagator(t: float, g: float, kappa: float) -> np.ndarray:
    """No-click propagator of one atom-cavity pair on ``(e0, down1, down0, up0, up1)``."""
    a, b, d = _cavity_block(t, g, kappa)
    p = np.zeros((5, 5), dtype=complex)
    p[C_E0, C_E0] = a
    p[C_E0, C_D1] = p[C_D1, C_E0] = b
    p[C_D1, C_D1] = d
    p[C_D0, C_D0] = p[C_U0, C_U0] = 1.0
    p[C_U1, C_U1] = math.exp(-kappa * t / 2)
    return p


class _CavityModel:
    def __init__(self, cfg: CavityConfig):
        self.g, self.kappa = cfg.g, cfg.kappa
        a = np.zeros((5, 5), dtype=complex)
        a[C_D0, C_D1] = a[C_U0, C_U1] = 1.0
        i5 = np.eye(5, dtype=complex)
        self.channels = _channels(cfg, np.kron(a, i5), np.kron(i5, a), cfg.kappa)
        sw = np.eye(5, dtype=complex)[[C_E0, C_U1, C_U0, C_D0, C_D1]]
        self.pulse_op = np.kron(sw, sw)
        dark1 = np.zeros(5, dtype=bool)
        dark1[[C_D0, C_U0]] = True
        self.dark = np.outer(dark1, dark1).ravel()
        self.scale = 1.0 / max(np.real(cavity_rates(cfg.g, cfg.kappa)[1]), 1e-300)

    def propagate(self, psi, t):
        p = cavity_propagator(t, self.g, self.kappa)
        return (p @ psi.reshape(5, 5) @ p.T).ravel()

    def jump_time(self, psi, u):
        dark = float(np.sum(np.abs(psi[self.dark]) ** 2))
        if u <= dark * (1 + 1e-12):
            return math.inf

        def f(t):
            return float(np.linalg.norm(self.propagate(psi, t)) ** 2) - u

        hi = min(self.scale, 1.0 / self.kappa)
        while f(hi) > 0:
            hi *= 2.0
        return brentq(f, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)

    def settle(self, psi):
        out = np.where(self.dark, psi, 0)
        return out / np.linalg.norm(out)

    def qubit_state(self, psi):
        m = psi.reshape(5, 5)[np.ix_((C_U0, C_D0), (C_U0, C_D0))].ravel()
        n = np.linalg.norm(m)
        return m / n if n > 0 else m


def cavity_trajectory(cfg: CavityConfig, rng, model=None) -> JumpRecord:
    """One counting trajectory with each atom inside a cavity, from ``|e,0>|e,0>``."""
    model = model or _CavityModel(cfg)
    psi = np.zeros(25, dtype=complex)
    psi[C_E0 * 5 + C_E0] = 1.0
    times, dets, lost, pulse_time, psi = _run(model, psi, rng, cfg.delay, cfg.pulse)
    det_times = [t for t, x in zip(times, lost) if not x]
    return JumpRecord(times, dets, pulse_time, lost, model.qubit_state(psi),
                      _classify(lost, det_times, pulse_time))


def cavity_final_state(tau_1: float, tau_pulse: float, tau_2: float, detectors, cfg: CavityConfig):
    """Closed-form unnormalized two-qubit state after clicks at ``tau_1`` and ``tau_2``.

    Basis ``(up up, up down, down up, down down)``; ``detectors`` is a pair of
    ``"L"``/``"R"`` labels.
    """
    if not tau_1 <= tau_pulse <= tau_2:
        raise ValueError("need tau_1 <= tau_pulse <= tau_2")
    s1, s2 = (DETECTOR_SIGN[d] for d in detectors)
    a_p, b_p = cavity_amplitudes(tau_pulse, cfg)
    _, b_d = cavity_amplitudes(tau_2 - tau_pulse, cfg)
    decay = math.exp(-cfg.kappa * (tau_2 - tau_pulse) / 2)
    out = np.zeros(4, dtype=complex)
    out[2] = a_p * b_d * s1  # down up
    out[1] = a_p * b_d * s2  # up down
    out[0] = b_p * decay * (s1 + s2)  # up up
    return out


def triplet_admixture(state: np.ndarray) -> complex:
    """Coefficient of ``|up up>`` relative to the ``(|ud> + |du>)/sqrt(2)`` component."""
    bell = (state[1] + state[2]) / np.sqrt(2)
    return state[0] / bell


def approx_triplet_admixture(delta: float, kappa: float) -> float:
    """Wide-cavity approximation ``sqrt(2) exp(-kappa delta/2)`` of the admixture."""
    return math.sqrt(2) * math.exp(-kappa * delta / 2)


def first_order_triplet_admixture(tau_pulse: float, delta: float, kappa: float) -> float:
    """Leading-order-in-``g`` admixture ``sqrt(2)(1-e^{-k tp/2})/(e^{k d/2}-1)``."""
    return math.sqrt(2) * -math.expm1(-kappa * tau_pulse / 2) / math.expm1(kappa * delta / 2)


def cavity_ensemble(cfg: CavityConfig, workers: int = 1, return_records: bool = False):
    records = simulate_records(cfg, "cavity", workers)
    summary = summarize(records)
    return (summary, records) if return_records else summary


__all__ = [
    "CountingConfig", "CavityConfig", "JumpRecord", "CountingSummary", "Channel",
    "BarrettKokRecord", "OUTCOMES", "bell_pair", "trajectory_rng", "jump_operators",
    "counting_channels", "atomic_lowering", "run_counting_trajectory", "simulate_records",
    "summarize", "counting_ensemble", "barrett_kok_trajectory", "barrett_kok_ensemble",
    "cavity_rates", "cavity_amplitudes", "cavity_propagator", "cavity_trajectory",
    "cavity_final_state", "triplet_admixture", "approx_triplet_admixture",
    "first_order_triplet_admixture", "cavity_ensemble",
]

import math

import numpy as np
import pytest
from scipy.linalg import expm

from qfs import diffsim, measures, paqs, qops
from qfs.diffsim import FeedbackSpec, HomodyneConfig
from qfs.qops import SX, I2, kron, local_paulis

from conftest import random_density

EE, GG = qops.ket(0, 0), qops.ket(1, 1)
SX1, SY1, SZ1, SX2, SY2, SZ2 = range(6)


def pattern_spec(k=0.6):
    A = np.zeros((2, 6))
    A[0, SX1] = A[0, SX2] = A[1, SY2] = k
    A[1, SY1] = -k
    return FeedbackSpec(local_paulis(2), A, np.zeros(6))


def lindbladian(cfg):
    # column-stacked superoperator of sum_i D[M_i]
    d = 4
    eye = np.eye(d)
    out = np.zeros((d * d, d * d), dtype=complex)
    for ch in cfg.channels():
        m = ch.op
        mdm = m.conj().T @ m
        out += np.kron(m.conj(), m) - 0.5 * (np.kron(eye, mdm) + np.kron(mdm.T, eye))
    return out


def evolve_lindblad(cfg, rho, t):
    v = expm(lindbladian(cfg) * t) @ rho.reshape(-1, order="F")
    return v.reshape(4, 4, order="F")


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(eta_l=0), dict(eta_r=1.5), dict(dt=0), dict(T=-1),
                                    dict(delay=-0.1), dict(delay=0.01, dt=0.02), dict(n_traj=0),
                                    dict(scheme="rk4"), dict(scheme="joint", delay=0.01, dt=1e-3),
                                    dict(scheme="joint", eta_l=0.5)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            HomodyneConfig(**kw)

    def test_delay_steps(self):
        assert HomodyneConfig(delay=0.05, dt=1e-3).delay_steps == 50
        assert HomodyneConfig(delay=0.0505, dt=1e-3).delay_steps == 51
        assert HomodyneConfig().delay_steps == 0

    def test_spec_rejects(self):
        with pytest.raises(ValueError):
            FeedbackSpec(local_paulis(2), np.zeros((2, 5)), np.zeros(6))
        with pytest.raises(ValueError):
            FeedbackSpec(local_paulis(2), np.full((2, 6), np.nan), np.zeros(6))
        with pytest.raises(ValueError):
            FeedbackSpec(local_paulis(2), np.zeros((2, 6)), np.zeros(6), mode="other")
        with pytest.raises(paqs.LieClosureError):
            FeedbackSpec([kron(SX, I2), kron(qops.SY, I2)], np.zeros((2, 2)), np.zeros(2))


class TestSseStep:
    def test_dark_state(self):
        cfg = HomodyneConfig(dt=1e-3)
        out = diffsim.sse_step(GG, cfg, 0.03, -0.02)
        np.testing.assert_allclose(out, GG, atol=1e-15)

    def test_excitation_decay(self):
        # Gaussian expectation of <n_1> after one step, against the Lindblad rate -gamma
        nodes, weights = np.polynomial.hermite_e.hermegauss(12)
        weights = weights / weights.sum()
        n1 = kron(np.diag([1.0, 0.0]), I2)
        for gamma in (1.0, 2.5):
            rates = []
            for dt in (1e-4, 5e-5):
                cfg = HomodyneConfig(gamma=gamma, dt=dt)
                mean = 0.0
                for xl, wl in zip(nodes, weights):
                    for xr, wr in zip(nodes, weights):
                        out = diffsim.sse_step(EE, cfg, xl * np.sqrt(dt), xr * np.sqrt(dt))
                        mean += wl * wr * np.real(np.vdot(out, n1 @ out))
                rates.append((mean - 1.0) / dt)
            assert rates[0] == pytest.approx(-gamma, rel=1e-3)
            # the O(dt) residual halves with the step
            assert abs(rates[1] + gamma) < 0.6 * abs(rates[0] + gamma) + 1e-9

    def test_batch_matches_single(self, rng):
        cfg = HomodyneConfig(dt=1e-3)
        psis = rng.normal(size=(5, 4)) + 1j * rng.normal(size=(5, 4))
        psis /= np.linalg.norm(psis, axis=1, keepdims=True)
        dw = rng.normal(size=(5, 2)) * np.sqrt(1e-3)
        batch = diffsim.sse_step(psis, cfg, dw[:, 0], dw[:, 1])
        for k in range(5):
            np.testing.assert_allclose(batch[k], diffsim.sse_step(psis[k], cfg, *dw[k]), atol=1e-15)
            assert np.linalg.norm(batch[k]) == pytest.approx(1.0, abs=1e-12)

    def test_quadratures_stay_zero_with_feedback(self, rng):
        # measurement alone moves <x> by O(sqrt dt); the feedback rotation cancels it to O(dt)
        spec = FeedbackSpec.paqs()
        worst = {}
        for dt in (1e-5, 1e-7):
            cfg = HomodyneConfig(dt=dt)
            ops = np.array([c.op for c in cfg.channels()])
            w = 0.0
            for _ in range(30):
                le, lg = measures.schmidt_coefficients(rng.uniform(0.05, 0.95))
                psi = le * EE + lg * GG
                dw = rng.normal(size=2) * np.sqrt(dt)
                A, B = paqs.solve_batch([qops.projector(psi)], measures.bell_target(), cfg.channels(),
                                        spec.hamiltonians)
                out = diffsim.apply_feedback_unitary(diffsim.sse_step(psi, cfg, *dw), spec, dw, dt,
                                                     A=A[0], B=B[0])
                w = max(w, max(abs(np.real(np.vdot(out, o @ out))) for o in ops))
            worst[dt] = w
        assert worst[1e-5] < 20 * 1e-5
        assert worst[1e-7] < 20 * 1e-7


class TestFeedbackUnitary:
    def test_identity(self, rng):
        psi = rng.normal(size=4) + 1j * rng.normal(size=4)
        out = diffsim.apply_feedback_unitary(psi, FeedbackSpec.none(), [0.1, -0.3], 1e-3)
        np.testing.assert_allclose(out, psi, atol=1e-15)

    def test_pauli_rotation(self, rng):
        dt = 1e-3
        spec = FeedbackSpec([kron(SX, I2)], np.zeros((2, 1)), np.array([np.pi / 2 / dt]))
        psi = rng.normal(size=4) + 1j * rng.normal(size=4)
        psi /= np.linalg.norm(psi)
        out = diffsim.apply_feedback_unitary(psi, spec, [0.0, 0.0], dt)
        np.testing.assert_allclose(out, -1j * kron(SX, I2) @ psi, atol=1e-12)
        assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)

    def test_density_matrix(self, rng):
        spec = pattern_spec()
        rho = random_density(rng, 4)
        dw = [0.02, -0.01]
        out = diffsim.apply_feedback_unitary(rho, spec, dw, 1e-3)
        # columns of the unitary from its action on basis vectors
        u = np.array([diffsim.apply_feedback_unitary(e, spec, dw, 1e-3) for e in np.eye(4)]).T
        assert qops.is_unitary(u, 1e-12)
        np.testing.assert_allclose(out, u @ rho @ u.conj().T, atol=1e-14)

    def test_local_pauli_shortcut_exact(self, rng):
        spec = pattern_spec()
        assert spec.local_pauli_basis
        general = FeedbackSpec(list(spec.hamiltonians)[::-1], spec.A[:, ::-1], spec.B)
        assert not general.local_pauli_basis
        psi = rng.normal(size=(10, 4)) + 1j * rng.normal(size=(10, 4))
        dw = rng.normal(size=(10, 2))
        np.testing.assert_allclose(diffsim.apply_feedback_unitary(psi, spec, dw, 1e-3),
                                   diffsim.apply_feedback_unitary(psi, general, dw, 1e-3), atol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            diffsim.apply_feedback_unitary(np.ones(3), pattern_spec(), [0, 0], 1e-3)

    def test_schmidt_form_maintained(self, rng):
        spec = FeedbackSpec.paqs()
        dt = 1e-4
        cfg = HomodyneConfig(dt=dt)
        worst_bare = worst = 0.0
        for _ in range(20):
            le, lg = measures.schmidt_coefficients(rng.uniform(0.05, 0.95))
            psi = le * EE + lg * GG
            dw = rng.normal(size=2) * np.sqrt(dt)
            A, B = paqs.solve_batch([qops.projector(psi)], measures.bell_target(), cfg.channels(),
                                    spec.hamiltonians)
            bare = diffsim.sse_step(psi, cfg, *dw)
            out = diffsim.apply_feedback_unitary(bare, spec, dw, dt, A=A[0], B=B[0])
            worst = max(worst, measures.schmidt_form_residual(out))
            worst_bare = max(worst_bare, measures.schmidt_form_residual(bare))
        assert worst < 20 * dt
        # without feedback the single-excitation weight grows like sqrt(dt)
        assert worst_bare > 20 * dt


class TestTrajectories:
    def test_frozen_without_measurement(self):
        cfg = HomodyneConfig(gamma=0.0, dt=1e-3, T=0.1)
        rec = diffsim.run_homodyne_trajectory(cfg, FeedbackSpec.paqs(), 1)
        np.testing.assert_allclose(rec.fidelity, 0.5, atol=1e-15)
        np.testing.assert_allclose(rec.concurrence, 0.0, atol=1e-15)

    def test_record_csv(self):
        cfg = HomodyneConfig(dt=1e-3, T=0.01)
        rec = diffsim.run_homodyne_trajectory(cfg, pattern_spec(), 4)
        text = rec.to_csv(["hello"])
        lines = text.splitlines()
        assert lines[0] == "# hello"
        assert lines[1] == ",".join(diffsim.DiffusiveRecord.COLUMNS)
        assert len(lines) == 2 + 10
        assert rec.summary()["steps"] == 10
        # record = signal + noise with the conditional mean
        np.testing.assert_allclose(rec.dr[0], rec.dW[0], atol=1e-15)

    def test_streams_independent_of_batch(self):
        cfg = HomodyneConfig(dt=1e-3, T=0.05, seed=3)
        a = diffsim.run_homodyne_ensemble(cfg, pattern_spec(), n_traj=3)
        b = diffsim.run_homodyne_ensemble(cfg, pattern_spec(), n_traj=8)
        c = diffsim.run_homodyne_ensemble(cfg, pattern_spec(), n_traj=5, start_index=3)
        np.testing.assert_array_equal(a.fidelity, b.fidelity[:3])
        np.testing.assert_array_equal(c.fidelity, b.fidelity[3:])

    def test_joint_scheme_deterministic(self):
        cfg = HomodyneConfig(dt=1e-4, T=measures.hitting_time(1.0), scheme="joint")
        res = diffsim.run_homodyne_ensemble(cfg, FeedbackSpec.paqs(), n_traj=12, seed=5,
                                            sample_every=50)
        ref = np.array([measures.concurrence_of_time(t) for t in res.times])
        assert np.abs(res.concurrence - ref).max() < 1e-3
        assert res.fidelity[:, -1].min() > 0.999

    def test_euler_scheme_spread_shrinks(self):
        # the default integrator is only weakly accurate; its spread is discretization error
        spread = []
        for dt in (1e-3, 2.5e-4):
            cfg = HomodyneConfig(dt=dt, T=1.0)
            res = diffsim.run_homodyne_ensemble(cfg, FeedbackSpec.paqs(), n_traj=30, seed=2,
                                                sample_every=int(round(0.05 / dt)))
            spread.append(res.concurrence.std(axis=0).max())
        assert spread[1] < 0.6 * spread[0]

    def test_joint_requires_record(self):
        cfg = HomodyneConfig(dt=1e-3, T=0.01, scheme="joint")
        with pytest.raises(ValueError):
            diffsim.run_homodyne_ensemble(cfg, FeedbackSpec.paqs(signal="noise"), n_traj=1)

    def test_ensemble_matches_lindblad(self):
        cfg = HomodyneConfig(dt=1e-3, T=1.0)
        n = 10000
        res = diffsim.run_homodyne_ensemble(cfg, FeedbackSpec.none(), n_traj=n, seed=11,
                                            sample_every=1000)
        exact = evolve_lindblad(cfg, qops.projector(EE), 1.0)
        x_t = measures.bell_target()
        f = res.fidelity[:, -1]
        # statistical error plus the O(dt) weak bias of the Euler step
        assert abs(f.mean() - np.real(np.trace(x_t @ exact))) < 3 * f.std() / np.sqrt(n) + cfg.dt
        assert diffsim.trace_distance(res.mean_rho[-1], exact) < 0.02

    def test_inefficient_detection_mixed_state(self):
        cfg = HomodyneConfig(dt=1e-3, T=0.2, eta_l=0.6)
        res = diffsim.run_homodyne_ensemble(cfg, pattern_spec(), n_traj=4, seed=0)
        assert res.final_states.shape == (4, 4, 4)
        for r in res.final_states:
            assert qops.is_physical(r, 1e-8)

    def test_ensemble_state_source(self):
        cfg = HomodyneConfig(dt=1e-3, T=0.1)
        spec = FeedbackSpec.paqs(state_source="ensemble")
        res = diffsim.run_homodyne_ensemble(cfg, spec, n_traj=20, seed=1)
        assert np.all(np.isfinite(res.fidelity))


class TestMasterEquation:
    def test_no_feedback_is_lindblad(self, rng):
        cfg = HomodyneConfig(dt=1e-4)
        rho = random_density(rng, 4)
        step = diffsim.feedback_me_step(rho, cfg, FeedbackSpec.none())
        ref = rho + 1e-4 * sum(qops.dissipator(c.op, rho) for c in cfg.channels())
        np.testing.assert_allclose(step, ref, atol=1e-15)

    def test_trace_preserved(self, rng):
        for _ in range(20):
            cfg = HomodyneConfig(dt=1e-3, eta_l=rng.uniform(0.1, 1), eta_r=rng.uniform(0.1, 1),
                                 phi_l=rng.uniform(-3, 3), phi_r=rng.uniform(-3, 3), delay=0.05)
            spec = FeedbackSpec(local_paulis(2), rng.normal(size=(2, 6)), rng.normal(size=6))
            rho = random_density(rng, 4)
            for step in (diffsim.feedback_me_step(rho, cfg, spec),
                         diffsim.delayed_me_step(rho, cfg, spec,
                                                 (rng.normal(size=(2, 6)), rng.normal(size=6)))):
                assert abs(np.trace(step) - 1) < 1e-10
                assert qops.is_hermitian(step, 1e-14)

    def test_zero_delay_identical(self, rng):
        cfg = HomodyneConfig(dt=1e-3)
        spec = pattern_spec()
        rho = random_density(rng, 4)
        np.testing.assert_array_equal(diffsim.delayed_me_step(rho, cfg, spec),
                                      diffsim.feedback_me_step(rho, cfg, spec))

    def test_project_physical(self):
        rho = np.diag([1.1, -0.1, 0, 0]).astype(complex)
        out = diffsim.project_physical(rho)
        assert qops.is_physical(out)
        good = np.eye(4) / 4
        assert diffsim.project_physical(good) is good

    def test_ideal_fidelity_rises(self):
        cfg = HomodyneConfig(dt=1e-3, T=1.14)
        res = diffsim.run_feedback_me(cfg, sample_every=10)
        f = res.fidelity
        sat = int(np.argmax(f >= 0.999))
        assert sat > 0
        assert np.all(np.diff(f[:sat + 1]) >= -1e-12)
        assert res.indefinite_events == 0

    def test_gain_traces(self):
        cfg = HomodyneConfig(dt=1e-3, T=0.2)
        res = diffsim.run_feedback_me(cfg, sample_every=10)
        assert res.A.shape == (20, 2, 6)
        A = res.A
        np.testing.assert_allclose(A[:, 0, SX2], A[:, 0, SX1], atol=1e-10)
        np.testing.assert_allclose(A[:, 1, SY2], A[:, 0, SX1], atol=1e-10)
        np.testing.assert_allclose(A[:, 1, SY1], -A[:, 0, SX1], atol=1e-10)
        np.testing.assert_allclose(res.B, 0, atol=1e-10)

    def test_fixed_spec_matches_trajectories(self):
        # record-driven trajectories average to the feedback master equation
        cfg = HomodyneConfig(dt=5e-4, T=1.0)
        spec = pattern_spec()
        n = 4000
        res = diffsim.run_homodyne_ensemble(cfg, spec, n_traj=n, seed=12, sample_every=2000)
        me = diffsim.run_feedback_me(cfg, spec, sample_every=2000)
        f = res.fidelity[:, -1]
        se = f.std() / np.sqrt(n)
        # statistical error plus the O(dt) weak bias of both Euler integrators
        assert abs(f.mean() - me.fidelity[-1]) < 3 * se + 2 * cfg.dt
        assert diffsim.trace_distance(res.mean_rho[-1], me.rho) < 0.01

    def test_delayed_me_matches_delay_buffer(self):
        delay = 0.05
        cfg = HomodyneConfig(dt=1e-3, T=0.6, delay=delay)
        spec = pattern_spec()
        n = 4000
        res = diffsim.run_homodyne_ensemble(cfg, spec, n_traj=n, seed=3, sample_every=600)
        me = diffsim.run_feedback_me(cfg, spec, sample_every=600)
        me0 = diffsim.run_feedback_me(HomodyneConfig(dt=1e-3, T=0.6), spec, sample_every=600)
        f = res.fidelity[:, -1]
        se = f.std() / np.sqrt(n)
        assert abs(f.mean() - me.fidelity[-1]) < delay ** 2 + 3 * se
        # the delay effect itself is much larger than the residual
        assert me0.fidelity[-1] - me.fidelity[-1] > 10 * abs(f.mean() - me.fidelity[-1])

    def test_peak(self):
        r = diffsim.MEResult(np.array([0, 1, 2.0]), np.array([0.5, 0.9, 0.7]), np.zeros(3),
                             np.zeros((0, 2, 6)), np.zeros((0, 6)), np.eye(4))
        assert r.peak == (0.9, 1.0)

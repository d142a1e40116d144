"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from qfs import cli, diffsim, jumpsim, measures, paqs
from qfs.diffsim import FeedbackSpec, HomodyneConfig
from qfs.jumpsim import CountingConfig

import test_diffsim
import test_paqs
import test_qops
from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.slow


def report(label, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


@pytest.fixture(scope="module")
def ideal_me():
    t0 = time.perf_counter()
    res = diffsim.run_feedback_me(HomodyneConfig(dt=1e-4, T=1.14), sample_every=1, keep_gains=True)
    return res, time.perf_counter() - t0


def test_1_ideal_homodyne(ideal_me):
    res, wall = ideal_me
    fid = res.fidelity[res.times <= 1.14 + 1e-12].max()
    t_hit = measures.hitting_time(1.0)
    before = res.times <= t_hit
    analytic = np.array([measures.concurrence_of_time(t) for t in res.times[before]])
    err = np.abs(res.concurrence[before] - analytic).max()
    ok = fid >= 0.999 and err <= 1e-3 and wall < 60
    assert report("1 ideal homodyne", ok,
                  f"F(1.14) = {fid:.9f}, max |C - C_analytic| = {err:.2e}, {wall:.1f} s")


def test_2_deterministic_trajectories():
    t0 = time.perf_counter()
    cfg = HomodyneConfig(dt=1e-4, T=1.14)
    res = diffsim.run_homodyne_ensemble(cfg, FeedbackSpec.paqs(), n_traj=100, seed=2024,
                                        sample_every=100)
    wall = time.perf_counter() - t0
    spread = res.concurrence.std(axis=0).max()
    ok = spread < 1e-2 and wall < 300
    assert report("2 deterministic trajectories", ok,
                  f"max std of C over 100 trajectories = {spread:.2e}, {wall:.1f} s")


def test_3_gain_pattern(ideal_me):
    res, _ = ideal_me
    resid = cli.gain_pattern_residual(res.A, res.B)
    gain = np.abs(res.A[:, 0, 0]).min()
    ok = resid <= 1e-8 and gain > 0
    assert report("3 gain pattern", ok,
                  f"residual {resid:.1e} over {len(res.A)} steps, min |A_L,sx1| = {gain:.3f}")


def test_4_delay_threshold():
    etas = sorted(set(cli.DEFAULT_ETAS) | {0.66}, reverse=True)
    cfg = cli.load_config("homodyne-sweep", None, {"etas": etas})
    t0 = time.perf_counter()
    etas, delays, fid, _, _ = cli.run_sweep(cfg)
    wall = time.perf_counter() - t0
    cross = cli.row_crossings(etas, delays, fid)[0.66]
    corner = fid[etas.index(1.0), delays.index(0.0)]
    viol = cli.monotone_violation(etas, delays, fid)
    ok = abs(cross - 0.13) <= 0.02 and wall < 1200
    assert report("4 delay threshold", ok,
                  f"eta = 0.66 crossing at gamma*delay = {cross:.4f}, grid {len(etas)}x{len(delays)} "
                  f"in {wall:.0f} s (corner {corner:.5f}, monotonicity violation {viol:.1e})")
    assert corner >= 0.999 and viol <= cli.MONOTONE_TOL


def test_5_counting_ideal():
    t0 = time.perf_counter()
    ideal = jumpsim.counting_ensemble(CountingConfig(n_traj=100_000, seed=51))
    late = jumpsim.counting_ensemble(CountingConfig(n_traj=100_000, seed=52, delay=0.5))
    wall = time.perf_counter() - t0
    p0 = math.exp(-0.5)
    sigma = math.sqrt(p0 * (1 - p0) / late.n_traj)
    ok = (ideal.success_rate == 1.0 and 1 - ideal.min_fidelity_given_success <= 1e-9
          and abs(late.success_rate - p0) <= 3 * sigma and wall < 120)
    assert report("5 photon counting", ok,
                  f"ideal success {ideal.success_rate}, min fidelity {ideal.min_fidelity_given_success:.12f}; "
                  f"delay 0.5 success {late.success_rate:.4f} vs {p0:.4f} +/- {sigma:.4f}; {wall:.0f} s")


def test_6_loss_robustness():
    eta = 0.8
    sym = jumpsim.counting_ensemble(CountingConfig(n_traj=20_000, seed=61, eta_loss_1=eta, eta_loss_2=eta))
    p0 = eta * eta
    sigma = math.sqrt(p0 * (1 - p0) / sym.n_traj)
    ok_sym = abs(sym.success_rate - p0) <= 3 * sigma and 1 - sym.min_fidelity_given_success <= 1e-9
    rng = np.random.default_rng(62)
    worst = 0.0
    for k in range(20):
        c = CountingConfig(n_traj=500, seed=600 + k, eta_loss_1=rng.uniform(0.3, 1), eta_loss_2=rng.uniform(0.3, 1),
                           phi_1=rng.uniform(0, 2 * np.pi), phi_2=rng.uniform(0, 2 * np.pi))
        s = jumpsim.counting_ensemble(c)
        worst = max(worst, 1 - s.min_fidelity_given_success)
    bk = jumpsim.barrett_kok_ensemble(CountingConfig(n_traj=20_000, seed=63, eta_loss_1=eta, eta_loss_2=eta))
    ratio = sym.success_rate / bk["success_rate"]
    r_sigma = ratio * math.hypot(sym.stderr / sym.success_rate, bk["stderr"] / bk["success_rate"])
    ok = ok_sym and worst <= 1e-9 and abs(ratio - 2.0) <= 3 * r_sigma
    assert report("6 loss robustness", ok,
                  f"success {sym.success_rate:.4f} vs 0.64 +/- {sigma:.4f}; worst asymmetric infidelity "
                  f"{worst:.1e}; ratio to comparator {ratio:.3f} +/- {r_sigma:.3f}")


def test_7_hong_ou_mandel():
    off = jumpsim.counting_ensemble(CountingConfig(n_traj=100_000, seed=71, pulse=False))
    on = jumpsim.counting_ensemble(CountingConfig(n_traj=100_000, seed=72))
    exceptions = off.n_two_clicks - round(off.same_detector_fraction * off.n_two_clicks)
    sigma = math.sqrt(0.25 / on.n_two_clicks)
    left = on.second_click_left_fraction
    ok = off.n_two_clicks == off.n_traj and exceptions == 0 and abs(left - 0.5) <= 3 * sigma
    assert report("7 Hong-Ou-Mandel", ok,
                  f"{exceptions} opposite-detector pairs in {off.n_two_clicks}; "
                  f"second click left {left:.4f} +/- {sigma:.4f}")


@pytest.fixture(scope="module")
def cavity_runs():
    out = {}
    for ratio in (10.0, 30.0, 100.0, 300.0, 1000.0):
        base = {"n_traj": 2000 if ratio == 100.0 else 500, "seed": 80}
        cc = cli.cavity_for_ratio(ratio, 1.0, base)
        recs = jumpsim.simulate_records(cc, "cavity")
        out[ratio] = (cc, cli.analyse_cavity(recs, cc))
    return out


def test_8_cavity_exact(cavity_runs):
    opp = max(a["max_opposite_infidelity"] for _, a in cavity_runs.values())
    form = max(a["max_formula_deviation"] for _, a in cavity_runs.values())
    ok = opp < 1e-10 and form < 1e-9
    assert report("8 cavity singlet and closed form", ok,
                  f"opposite-detector infidelity {opp:.1e}, closed-form deviation {form:.1e}")


@pytest.mark.xfail(strict=True, reason="wide-cavity admixture formula omits a slow-decay factor; "
                                       "see the decisions ledger")
def test_8b_cavity_admixture_formula(cavity_runs):
    cc, a = cavity_runs[100.0]
    same = a["same"]
    rel = cli.admixture_relative_error(same[:, 0], same[:, 1], cc.kappa)
    rel = rel[np.isfinite(rel)]
    ok = len(rel) > 0 and rel.max() <= 0.05
    detail = (f"kappa/gamma_eff = 100, {len(rel)} same-detector outcomes, "
              f"relative error median {np.median(rel):.2f}, max {rel.max():.2f}, within 5% for "
              f"{np.mean(rel <= 0.05):.1%}")
    assert report("8b cavity admixture formula", ok, detail)


def _over_seeds(test, *extra):
    # undecorated body of a property test, run on fixed draws outside hypothesis
    inner = test.hypothesis.inner_test
    instance = test_qops.TestProperties()
    for seed in np.random.default_rng(99).integers(0, 2**32 - 1, size=30):
        for args in extra:
            inner(instance, int(seed), args)


QOPS = test_qops.TestProperties

PROPERTY_ORACLES = {
    "superoperator hermiticity and trace": lambda: _over_seeds(
        QOPS.test_superoperators_hermitian_traceless, 2, 4, 6),
    "penrose conditions": lambda: _over_seeds(QOPS.test_penrose_conditions, 1, 3, 5),
    "lie closure detection": lambda: (test_qops.TestLieClosure().test_missing_generator(),
                                      test_qops.TestLieClosure().test_local_paulis(),
                                      _over_seeds(QOPS.test_closure_invariant_under_recombination,
                                                  True, False),
                                      test_paqs.TestErrors().test_not_lie_closed()),
    "coefficient realness": lambda: test_paqs.TestAssembly().test_realness(np.random.default_rng(9)),
    "finite-difference stationarity": lambda: (
        test_paqs.TestOptimality().test_ideal_passes(),
        test_paqs.TestOptimality().test_generic_stationary_state(np.random.default_rng(9))),
    "sse ensemble vs lindblad": lambda: test_diffsim.TestTrajectories().test_ensemble_matches_lindblad(),
    "sse ensemble vs feedback ME": lambda: test_diffsim.TestMasterEquation().test_fixed_spec_matches_trajectories(),
    "delayed ME vs delay buffer": lambda: test_diffsim.TestMasterEquation().test_delayed_me_matches_delay_buffer(),
}


@pytest.mark.parametrize("name", list(PROPERTY_ORACLES))
def test_9_property_suites(name):
    try:
        PROPERTY_ORACLES[name]()
        ok, detail = True, "oracle holds"
    except AssertionError as exc:
        ok, detail = False, str(exc).splitlines()[0] if str(exc) else "assertion failed"
    assert report(f"9 {name}", ok, detail)


def test_10_b_sign_regression():
    rng = np.random.default_rng(10)
    worst = np.inf
    mags = []
    for _ in range(6):
        p = test_paqs.stationary_problem(rng, delay=0.05)
        best, scores = paqs.select_b_sign(p, 1e-3)
        worst = min(worst, scores[paqs.B_SIGN] - scores[-paqs.B_SIGN])
        mags.append(np.abs(paqs.solve(p).B).max())
    ok = worst >= 0 and min(mags) > 1e-3
    assert report("10 B sign", ok,
                  f"selected sign {paqs.B_SIGN:+d}; least margin over the other sign {worst:.1e} "
                  f"with |B| >= {min(mags):.2f}")

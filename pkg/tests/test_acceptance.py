"""End-to-end acceptance battery.

Eight gates, each printing one PASS/FAIL line straight to the terminal
(bypassing capture) in addition to the usual assertion.  The unit suites
exercise the same machinery at reduced sizes; the sizes and tolerances
here are the release contract.
"""

import dataclasses
import filecmp
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.stats import norm

from schedfilt import diagnostics, grid, kalman, model, particle, simulate, testfns
from schedfilt.presets import build_preset

REPORTING = np.linspace(0.0, 2.0, 21)


def _verdict(capsys, num, ok, detail):
    line = f"ACCEPTANCE {num} {'PASS' if ok else 'FAIL'}: {detail}"
    with capsys.disabled():
        print(line, flush=True)
    assert ok, line


def _rows_at(traj, t, tol=1e-9):
    """Index of the last emitted row at time t (post beats pre)."""
    best = None
    for k in range(len(traj.times)):
        if abs(float(traj.times[k]) - t) <= tol:
            best = k
    return best


@pytest.fixture(scope="module")
def ou():
    return build_preset("ou_kalman")


@pytest.fixture(scope="module")
def ou_events(ou):
    return simulate.simulate_path(ou, path_id=0).events


@pytest.fixture(scope="module")
def kalman_traj(ou, ou_events):
    return kalman.run_filter(ou, ou_events, REPORTING)


def test_criterion_1_exact_filter_matches_grid(ou, ou_events, kalman_traj, capsys):
    t0 = time.perf_counter()
    gt = grid.grid_run_filter(ou, ou_events, REPORTING)
    elapsed = time.perf_counter() - t0

    kt = kalman_traj
    assert len(gt.times) == len(kt.times)
    np.testing.assert_allclose(gt.times, kt.times, atol=1e-9)
    dm = float(np.max(np.abs(gt.means[:, 0] - kt.means[:, 0])))
    dp = float(np.max(np.abs(gt.vars[:, 0] - kt.covs[:, 0, 0])))
    ok = dm <= 1e-3 and dp <= 1e-3 and elapsed <= 60.0
    _verdict(
        capsys, 1, ok,
        f"grid vs exact filter max |dm|={dm:.2e}, max |dP|={dp:.2e} "
        f"(tol 1e-3), runtime {elapsed:.1f}s (limit 60s)",
    )


def test_criterion_2_particle_consistency(ou, ou_events, kalman_traj, capsys):
    kmap = {round(t, 9): float(kalman_traj.means[_rows_at(kalman_traj, t), 0]) for t in REPORTING}

    worst = {"ks": 0.0, "zakai": 0.0}
    for method in ("ks", "zakai"):
        traj = particle.run_particle_filter(
            ou, ou_events, method=method, n_particles=100_000, snapshot_times=REPORTING
        )
        for t_snap, x, log_w in traj.snapshots:
            if t_snap <= 1e-12:
                continue
            w = np.exp(log_w)
            est = float(np.sum(w * x[:, 0]))
            se = particle.bootstrap_se(
                x[:, 0], w, n_boot=64, rng=np.random.default_rng(int(t_snap * 1e6))
            )
            z = abs(est - kmap[round(t_snap, 9)]) / se
            worst[method] = max(worst[method], z)
    se_ok = worst["ks"] <= 3.0 and worst["zakai"] <= 3.0

    # error halving under a 4x particle budget, pooled over replicates
    # and reporting times
    def rmse(n, label_base):
        errs = []
        for rep in range(32):
            traj = particle.run_particle_filter(
                ou, ou_events, method="ks", n_particles=n, run_label=label_base + rep
            )
            for t in REPORTING:
                if t <= 1e-12:
                    continue
                k = _rows_at(traj, t)
                errs.append(float(traj.means[k, 0]) - kmap[round(t, 9)])
        return float(np.sqrt(np.mean(np.square(errs))))

    r_small = rmse(10_000, 100)
    r_big = rmse(40_000, 200)
    ratio = r_small / r_big
    ratio_ok = 1.4 <= ratio <= 2.6
    _verdict(
        capsys, 2, se_ok and ratio_ok,
        f"worst |z| ks={worst['ks']:.2f}, zakai={worst['zakai']:.2f} (limit 3); "
        f"rmse 1e4/4e4 = {r_small:.2e}/{r_big:.2e}, ratio {ratio:.2f} (band [1.4, 2.6])",
    )


def test_criterion_3_event_sums_vs_predictable_projection(ou, capsys):
    rep = diagnostics.check_compensator(ou, n_paths=10_000)
    exact_row = rep.details["weights"]["one"]
    nc = diagnostics.check_compensator(ou, n_paths=10_000, negative_control=True)
    ok = (
        rep.passed
        and exact_row["mean_diff"] == 0.0
        and not nc.passed
        and not nc.details["weights"]["y_squared"]["passed"]
    )
    _verdict(
        capsys, 3, ok,
        f"worst |t|={rep.statistic:.2f} (limit 3), constant weight exact, "
        f"negative control t={nc.details['weights']['y_squared']['tstat']:.1f} rejected",
    )


def test_criterion_4_compensated_process_is_centered(ou, capsys):
    reports = [
        diagnostics.check_martingale_Mphi(ou, phi=testfns.battery_function("tanh"))
    ]
    reports.append(
        diagnostics.check_martingale_Mphi(ou, phi=testfns.battery_function("bump"))
    )
    nc = diagnostics.check_martingale_Mphi(ou, negative_control=True)
    first_event = 0.5
    late_break = any(
        (not p) and c > first_event
        for c, p in zip(nc.details["checkpoints"], nc.details["checkpoint_pass"])
    )
    pre_event_fine = nc.details["checkpoint_pass"][0]
    ok = all(r.passed for r in reports) and not nc.passed and late_break and pre_event_fine
    stats = ", ".join(f"{r.sizes['phi']}={r.statistic:.2f}" for r in reports)
    _verdict(
        capsys, 4, ok,
        f"max |z| per function: {stats} (limit 3); control breaks only "
        f"after the first event (z={nc.statistic:.1f})",
    )


def test_criterion_5_conditional_flow_residuals(ou, capsys):
    rep = diagnostics.check_ks_residual(ou, n_runs=20)
    ratio = rep.details["interior_ratio"]
    worst = rep.details["worst_event_residual"]
    ok = rep.passed and 3.2 <= ratio <= 4.8 and worst <= 1e-3
    _verdict(
        capsys, 5, ok,
        f"interior halving ratio {ratio:.2f} (band [3.2, 4.8]), "
        f"worst event residual {worst:.2e} over 20 runs (tol 1e-3)",
    )


def test_criterion_6_unnormalized_filter_structure(ou, capsys):
    rep = diagnostics.check_zakai(ou, n_runs=2, n_particles=100_000)
    drift = rep.details["compensated_drift"]["worst"]
    mass_z = rep.details["mass_jump"]["worst_tstat"]

    # the log density ratio against two normal densities, on a grid
    worst_gamma = 0.0
    for pm in (-1.0, 0.0, 0.8, 2.5):
        for pv in (0.0, 0.05, 1.3):
            for r in (0.01, 0.4, 2.0):
                for y in (-3.0, -0.2, 0.9, 4.0):
                    direct = norm.logpdf(y, 0.0, np.sqrt(r)) - norm.logpdf(
                        y, pm, np.sqrt(pv + r)
                    )
                    worst_gamma = max(
                        worst_gamma,
                        abs(particle.gamma_gaussian(pm, pv, r, y) - direct),
                    )
    ok = rep.passed and drift <= 1e-10 and mass_z <= 3.0 and worst_gamma <= 1e-12
    _verdict(
        capsys, 6, ok,
        f"drift quadrature {drift:.1e} (tol 1e-10), mass-jump |z|={mass_z:.2f} "
        f"(limit 3), log-ratio max err {worst_gamma:.1e} (tol 1e-12)",
    )


def test_criterion_7_degenerate_reductions(ou, capsys):
    # no events at all: every filter must reproduce the unconditioned
    # relaxation moments
    quiet = ou.with_overrides(schedule=model.Schedule(kind="deterministic", times=()))
    m_star = float(np.exp(-2.0))
    p_star = 0.125 * (1.0 - np.exp(-4.0))

    errs = {}
    kt = kalman.run_filter(quiet, [], [2.0])
    errs["kalman"] = max(abs(float(kt.means[-1, 0]) - m_star), abs(float(kt.covs[-1, 0, 0]) - p_star))
    gt = grid.grid_run_filter(quiet, [], [2.0], domain=(-2.0, 4.0))
    errs["grid"] = max(abs(float(gt.means[-1, 0]) - m_star), abs(float(gt.vars[-1, 0]) - p_star))
    for method in ("ks", "zakai"):
        traj = particle.run_particle_filter(
            quiet, [], method=method, n_particles=1_000_000,
            reporting_times=[2.0], antithetic=True,
        )
        errs[method] = max(
            abs(float(traj.means[-1, 0]) - m_star), abs(float(traj.vars[-1, 0]) - p_star)
        )
    moments_ok = all(e <= 1e-3 for e in errs.values())

    # degenerate signal jumps: the jump generator vanishes identically
    # and the event residual tightens to 1e-6
    frozen = ou.with_overrides(
        model=dataclasses.replace(
            ou.config.model,
            jump_law=model.JumpLawSpec(kind="degenerate_xi_zero", r=((0.01,),)),
        )
    )
    aphi = testfns.jump_generator(testfns.battery_function("tanh"), frozen)
    xs = np.linspace(-2.0, 3.0, 41)[:, None]
    a_max = float(np.max(np.abs(np.asarray(aphi(xs)).reshape(-1))))
    resid = diagnostics.check_ks_residual(frozen, n_runs=20)
    tight = resid.details["tol"] == 1e-6 and resid.passed

    ok = moments_ok and a_max <= 1e-14 and tight
    err_txt = ", ".join(f"{k}={v:.1e}" for k, v in errs.items())
    _verdict(
        capsys, 7, ok,
        f"event-free moment errors {err_txt} (tol 1e-3); frozen-jump generator "
        f"max {a_max:.1e}, event residual {resid.details['worst_event_residual']:.1e} (tol 1e-6)",
    )


def test_criterion_8_byte_determinism(tmp_path, capsys):
    cases = [
        ["simulate", "ou_kalman", "--paths", "2", "--out", "o"],
        ["filter", "ou_kalman", "--method", "kalman", "--out", "o"],
        ["diagnose", "ou_kalman", "--checks", "compensator", "--paths", "300", "--out", "o"],
    ]
    env = {"PATH": "/usr/bin:/bin:/usr/local/bin", "SOURCE_DATE_EPOCH": "1712000000"}
    all_ok = True
    summary = []
    for case in cases:
        trees = []
        codes = []
        for run in ("a", "b"):
            cwd = tmp_path / case[0] / run
            cwd.mkdir(parents=True)
            proc = subprocess.run(
                [sys.executable, "-m", "schedfilt.cli", *case],
                cwd=str(cwd), env=env, capture_output=True, text=True,
            )
            codes.append(proc.returncode)
            trees.append(cwd / "o")
        names_a = sorted(p.name for p in trees[0].iterdir())
        names_b = sorted(p.name for p in trees[1].iterdir())
        same = names_a == names_b and codes[0] == codes[1]
        if same:
            _, mismatch, errors = filecmp.cmpfiles(trees[0], trees[1], names_a, shallow=False)
            same = not mismatch and not errors
        all_ok &= same
        summary.append(f"{case[0]}:{'ok' if same else 'DIFFERS'}")
    _verdict(capsys, 8, all_ok, "re-runs byte-identical (" + ", ".join(summary) + ")")

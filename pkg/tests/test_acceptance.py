"""Acceptance checks, one per criterion.

Each check records a PASS/FAIL line with the measured quantity and its
runtime; pytest prints the lines in its terminal summary. Running this file
directly prints them as they finish.
"""

import hashlib
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from qfl.channels import equivalence_suite
from qfl.classical import (
    LinearSystem,
    ScalarSystem,
    closed_loop_eigenvalues,
    example1_simulate,
    static_output_feedback_check,
)
from qfl.cli import main as cli_main
from qfl.control import StabilizerController, StabilizerParams, purity_rate
from qfl.linalg import maximally_mixed, projector, random_density
from qfl.measurement import substream
from qfl.sme import (
    AtomicEnsembleModel,
    OpenLoop,
    Renorm,
    SmeConfig,
    ensemble_average,
    measurement_record,
    omega_step,
    simulate_master,
    simulate_trajectory,
    sme_step,
)
from qfl.stateprep import (
    MfcPrepConfig,
    RepeatUntilSuccess,
    TwoModeModel,
    cfc_fidelity_vs_mismatch,
    cfc_mismatch_fidelity,
    mfc_failure_prob,
    mfc_prepare,
    sector_leakage,
    two_mode_unitary,
    verify_amplitude_table,
)

RESULTS = []


def report(label, ok, detail, elapsed, budget=None):
    timing = f"{elapsed:.2f}s" + (f" (budget {budget:g}s)" if budget else "")
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}; {timing}"
    RESULTS.append(line)
    if __name__ == "__main__":
        print(line, flush=True)
    return ok


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# 1 -----------------------------------------------------------------------------


def test_1_cfc_mfc_equivalence():
    with Timer() as tm:
        res = equivalence_suite(200, np.random.default_rng(1))
    worst = max(d for _, _, d in res)
    pairs = {(p, a) for p, a, _ in res}
    ok = worst <= 1e-10 and len(res) == 200 and len(pairs) == 6 and tm.elapsed < 10
    report("1 CFC/MFC Choi equivalence", ok, f"200 steps over {len(pairs)} dim pairs, max dev {worst:.2e}", tm.elapsed, 10)
    assert ok


# 2 -----------------------------------------------------------------------------


def test_2_purity_monotone():
    rng = np.random.default_rng(2)
    worst_step, worst_rate = -np.inf, -np.inf
    with Timer() as tm:
        for i in range(100):
            n = 1 + i % 3
            m = rng.uniform(0.5, 2.0)
            model = AtomicEnsembleModel(n_atoms=n, s=rng.uniform(-1, 1), meas_rate=m)
            horizon = 5.0 / m
            levels = rng.uniform(-5, 5, 8)
            width = horizon / len(levels)

            def u(t, levels=levels, width=width):
                return levels[min(int(t / width), len(levels) - 1)]

            path = simulate_master(model, u, random_density(n + 1, rng), SmeConfig(dt=1e-3 / m, horizon=horizon))
            p = np.einsum("kij,kji->k", path.states, path.states).real
            worst_step = max(worst_step, np.diff(p).max())
        for i in range(200):
            n = 1 + i % 3
            model = AtomicEnsembleModel(n_atoms=n, meas_rate=rng.uniform(0.5, 2.0))
            worst_rate = max(worst_rate, purity_rate(model, random_density(n + 1, rng)))
    ok = worst_step <= 1e-8 and worst_rate <= 1e-12 and tm.elapsed < 30
    detail = f"max per-step purity increase {worst_step:.2e}, max purity rate {worst_rate:.2e}"
    report("2 purity monotonicity", ok, detail, tm.elapsed, 30)
    assert ok


# 3 -----------------------------------------------------------------------------


def test_3_obstruction_and_stabilization():
    q = AtomicEnsembleModel()
    target = projector(2, 1)
    controls = [0.0, 1.0, -3.0, lambda t: 5 * math.sin(2 * t), lambda t: 10.0 if t < 1 else -2.0]
    with Timer() as tm:
        worst = 0.0
        for c in controls:
            path = simulate_master(q, c, maximally_mixed(2), SmeConfig(dt=1e-3, horizon=10.0))
            worst = max(worst, np.abs(path.fidelity(target) - 0.5).max())
        cfg = SmeConfig(dt=1e-3, horizon=10.0, seed=0, u_max=10.0)
        ctrl = StabilizerController(StabilizerParams(target, gamma=0.4, u_max=10.0))
        ens = ensemble_average(q, ctrl, maximally_mixed(2), 500, cfg)
        f, se = ens.fidelity(target)
    ok = worst <= 1e-9 and f[-1] >= 0.95 and tm.elapsed < 300
    detail = f"averaged-equation fidelity dev {worst:.1e}; feedback final fidelity {f[-1]:.4f} +/- {se[-1]:.4f} (K=500)"
    report("3 mixed-state obstruction vs stabilization", ok, detail, tm.elapsed, 300)
    assert ok


# 4 -----------------------------------------------------------------------------


def test_4a_density_vs_bloch():
    q = AtomicEnsembleModel(s=0.5)
    rho0 = random_density(2, np.random.default_rng(4))
    ctrl = OpenLoop(lambda t: 2 * math.cos(t))
    kw = dict(dt=1e-4, horizon=5.0, seed=4)
    with Timer() as tm:
        a = simulate_trajectory(q, ctrl, rho0, SmeConfig(**kw))
        b = simulate_trajectory(q, ctrl, rho0, SmeConfig(state_rep="bloch", **kw))
    dev = np.abs(a.density() - b.density()).max()
    ok = dev <= 1e-6 and np.array_equal(a.dW, b.dW)
    report("4a density vs Bloch integrators", ok, f"max deviation {dev:.2e} over 50000 shared increments", tm.elapsed)
    assert ok


def test_4b_omega_order():
    q = AtomicEnsembleModel()
    rng = np.random.default_rng(5)
    states = [random_density(2, rng) for _ in range(100)]
    us = rng.uniform(-1, 1, 100)
    signs = rng.choice([-1.0, 1.0], 100)
    dts = np.array([1e-2, 1e-3, 1e-4])
    with Timer() as tm:
        gaps = []
        for dt in dts:
            g = 0.0
            for rho, u, sgn in zip(states, us, signs):
                dW = sgn * math.sqrt(dt)
                dy = measurement_record(q, rho, dW, dt)
                a = sme_step(q, rho, u, dW, dt, Renorm.HERMITIZE)
                b = omega_step(q, rho, u, dy, dt)
                g = max(g, np.abs(a - b).max())
            gaps.append(g)
    gaps = np.array(gaps)
    slope = np.polyfit(np.log(dts), np.log(gaps), 1)[0]
    c = (gaps / dts**1.5).max()
    ok = 1.3 <= slope <= 1.7
    detail = f"gaps {', '.join(f'{g:.1e}' for g in gaps)}; fitted order {slope:.3f}; C = {c:.2f}"
    report("4b Omega form vs Euler-Maruyama", ok, detail, tm.elapsed)
    assert ok


def test_4c_ensemble_vs_master():
    q = AtomicEnsembleModel(s=0.3)
    rho0 = random_density(2, np.random.default_rng(6))
    cfg = SmeConfig(dt=1e-3, horizon=1.0, seed=6, renorm=Renorm.HERMITIZE)
    with Timer() as tm:
        ens = ensemble_average(q, OpenLoop(0.8), rho0, 2000, cfg)
        ref = simulate_master(q, 0.8, rho0, cfg).states
    d = ens.mean - ref
    z = max(
        (np.abs(d.real) / (ens.stderr.real + 1e-300))[1:].max(),
        (np.abs(d.imag) / (ens.stderr.imag + 1e-300))[1:].max(),
    )
    ok = z <= 5 and tm.elapsed < 180
    report("4c ensemble mean vs averaged equation", ok, f"max |error| / stderr = {z:.2f} (K=2000, dt=1e-3)", tm.elapsed, 180)
    assert ok


# 5 -----------------------------------------------------------------------------


def test_5_mfc_unknown_coupling():
    theta, trials, n_max = 1.7, 10_000, 5
    worst, all_ok = 0.0, True
    with Timer() as tm:
        for j, tt in enumerate((math.pi / 6, math.pi / 4)):
            cfg = MfcPrepConfig(round_time=tt / theta, max_rounds=n_max)
            used = np.empty(trials, dtype=int)
            succ = np.empty(trials, dtype=bool)
            for i in range(trials):
                r = mfc_prepare(TwoModeModel(theta), cfg, projector(2, 0), substream(50 + j, i))
                used[i], succ[i] = r.rounds_used, r.success
            for n in range(1, n_max + 1):
                p = mfc_failure_prob(theta, tt / theta, n)
                emp = np.mean(~(succ & (used <= n)))
                sig = math.sqrt(p * (1 - p) / trials)
                worst = max(worst, abs(emp - p) / sig)
                all_ok &= abs(emp - p) <= 3 * sig
    import inspect

    blind = list(inspect.signature(RepeatUntilSuccess.decide).parameters) == ["self", "history"]
    blind &= vars(RepeatUntilSuccess()) == {}
    ok = all_ok and blind and tm.elapsed < 60
    report("5 MFC failure rate vs cos^2n", ok, f"max deviation {worst:.2f} sigma over 10 points; controller sees outcomes only: {blind}", tm.elapsed, 60)
    assert ok


# 6 -----------------------------------------------------------------------------


def test_6_cfc_mismatch():
    with Timer() as tm:
        ratios = np.linspace(0.5, 3.0, 50)
        curve = cfc_fidelity_vs_mismatch(1.3, ratios)
        one = cfc_fidelity_vs_mismatch(1.3, [1.0])[0, 1]
    dev = np.abs(curve[:, 1] - cfc_mismatch_fidelity(ratios)).max()
    ok = dev <= 1e-8 and one >= 1 - 1e-10 and tm.elapsed < 5
    report("6 CFC fidelity vs mismatch", ok, f"max deviation {dev:.1e} on 50 ratios; ratio 1 fidelity 1 - {1 - one:.1e}", tm.elapsed, 5)
    assert ok


# 7 -----------------------------------------------------------------------------


def test_7_amplitude_table():
    with Timer() as tm:
        errs, leak = [], []
        for tt in (0.1, 0.5, 1.3, 2.9):
            errs.append(verify_amplitude_table(1.0, tt).max_magnitude_error)
            leak.append(sector_leakage(two_mode_unitary(1.0, tt)))
    ok = max(errs) <= 1e-10 and max(leak) <= 1e-12 and tm.elapsed < 1
    report("7 two-mode amplitude table", ok, f"max magnitude error {max(errs):.1e}; sector leakage {max(leak):.1e}", tm.elapsed, 1)
    assert ok


# 8 -----------------------------------------------------------------------------


def test_8_classical():
    with Timer() as tm:
        s = ScalarSystem(1.0, 1.01)
        t, x, _ = example1_simulate(s, "openloop", 10.0, 1e-4)
        err = x - np.exp(-t) * s.believed
        closed = np.exp(t) * (s.x0 - s.believed)
        rel = (np.abs(err - closed)[1:] / np.abs(closed[1:])).max()
        w = closed_loop_eigenvalues(LinearSystem())
        spectrum_dev = np.abs(w - [-2, -2, -1, -1]).max()
        rep = static_output_feedback_check(LinearSystem(), -100 + 0.1 * np.arange(2001))
    ok = rel <= 1e-4 and spectrum_dev <= 1e-9 and np.all(w.real < 0) and not rep.stabilizing and rep.max_trace_abs == 0.0
    ok &= tm.elapsed < 10
    detail = f"open-loop rel error {rel:.1e}; spectrum dev {spectrum_dev:.1e}; {rep.summary()}, max |trace| {rep.max_trace_abs}"
    report("8 classical demos", ok, detail, tm.elapsed, 10)
    assert ok


# 9 -----------------------------------------------------------------------------


def _digests(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(Path(d).iterdir()) if p.name != "manifest.json"}


def test_9_cli_determinism():
    scenarios = [
        ("equivalence", ""),
        ("stabilize", ""),
        ("stateprep", ""),
        ("classical", "[run]\nscenario = example1\n"),
        ("classical", "[run]\nscenario = observer\n"),
        ("classical", "[run]\nscenario = output-feedback\n"),
    ]
    same, names = True, []
    old = os.environ.get("QFL_WORKERS")
    with Timer() as tm, tempfile.TemporaryDirectory() as tmp:
        for i, (cmd, text) in enumerate(scenarios):
            cfg = Path(tmp) / f"c{i}.ini"
            cfg.write_text(text)
            outs = []
            for run, workers in enumerate(("1", "2")):
                os.environ["QFL_WORKERS"] = workers
                out = Path(tmp) / f"{i}-{run}"
                rc = cli_main([cmd, "--config", str(cfg), "--out", str(out)])
                same &= rc == 0
                outs.append(_digests(out))
            same &= outs[0] == outs[1] and len(outs[0]) >= 2
            names.append(cmd if not text else text.split("= ")[1].strip())
    if old is None:
        os.environ.pop("QFL_WORKERS", None)
    else:
        os.environ["QFL_WORKERS"] = old
    report("9 CLI determinism", same, f"byte-identical re-runs for {', '.join(names)}", tm.elapsed)
    assert same


if __name__ == "__main__":
    checks = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    failed = 0
    for check in checks:
        try:
            check()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)

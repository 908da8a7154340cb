"""Command-line experiment runner.

Usage::

    qfl {equivalence,stabilize,stateprep,classical} [--config PATH]
        [--seed INT] [--out DIR] [--format {csv,jsonl}]

Configs are INI files (one scalar per line) with sections ``[experiment]``,
``[model]`` and ``[run]``; unknown sections or keys are rejected. Every run
writes its data files plus ``manifest.json`` into the output directory.

Exit codes: 0 success, 2 configuration error, 3 numerical or acceptance
failure.
"""

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .channels import equivalence_suite
from .classical import (
    LinearSystem,
    ScalarSystem,
    closed_loop_eigenvalues,
    example1_closed_form,
    example1_simulate,
    observer_simulate,
    static_output_feedback_check,
)
from .control import StabilizerController, StabilizerParams
from .linalg import maximally_mixed, projector
from .measurement import substream
from .sme import AtomicEnsembleModel, SmeConfig, ensemble_average, simulate_master, simulate_trajectory
from .stateprep import (
    MfcPrepConfig,
    TwoModeModel,
    cfc_fidelity_vs_mismatch,
    cfc_mismatch_fidelity,
    mfc_failure_prob,
    mfc_prepare,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

SCHEMA = {
    "experiment": {"name": str, "seed": int, "format": str},
    "model": {
        "n_atoms": int,
        "meas_rate": float,
        "efficiency": float,
        "s": float,
        "theta": float,
        "theta_assumed": float,
        "gamma": float,
        "u_max": float,
        "target": int,
    },
    "run": {
        "dt": float,
        "horizon": float,
        "trajectories": int,
        "master_u": float,
        "min_fidelity": float,
        "equivalence_trials": int,
        "trials": int,
        "max_rounds": int,
        "round_times": str,
        "ratio_min": float,
        "ratio_max": float,
        "ratio_points": int,
        "scenario": str,
        "x0": float,
        "x0_measured": float,
        "stride": int,
        "gain_min": float,
        "gain_max": float,
        "gain_step": float,
    },
}

DEFAULTS = {
    "experiment": {"seed": 0, "format": "csv"},
    "model": {
        "n_atoms": 1,
        "meas_rate": 1.0,
        "efficiency": 1.0,
        "s": 0.0,
        "theta": 1.0,
        "gamma": 0.4,
        "u_max": 10.0,
        "target": 1,
    },
    "run": {
        "trajectories": 500,
        "master_u": 1.0,
        "min_fidelity": 0.95,
        "equivalence_trials": 200,
        "trials": 10000,
        "max_rounds": 5,
        "round_times": "pi/6, pi/4",
        "ratio_min": 0.5,
        "ratio_max": 3.0,
        "ratio_points": 50,
        "scenario": "example1",
        "x0": 1.0,
        "x0_measured": 1.01,
        "stride": 10,
        "gain_min": -100.0,
        "gain_max": 100.0,
        "gain_step": 0.1,
    },
}


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


def parse_config(text):
    """Parse INI text into ``{section: {key: typed value}}`` over the defaults."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                cfg[sec][key] = SCHEMA[sec][key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {raw!r}") from exc
    validate(cfg)
    return cfg


RANGES = [
    ("model", "n_atoms", lambda v: v >= 1, "must be >= 1"),
    ("model", "meas_rate", lambda v: v > 0, "must be > 0"),
    ("model", "efficiency", lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    ("model", "theta", lambda v: v > 0, "must be > 0"),
    ("model", "theta_assumed", lambda v: v > 0, "must be > 0"),
    ("model", "gamma", lambda v: 0 < v < 1, "must lie in (0, 1)"),
    ("model", "u_max", lambda v: v > 0, "must be > 0"),
    ("run", "dt", lambda v: v > 0, "must be > 0"),
    ("run", "horizon", lambda v: v > 0, "must be > 0"),
    ("run", "trajectories", lambda v: v >= 2, "must be >= 2"),
    ("run", "equivalence_trials", lambda v: v >= 0, "must be >= 0"),
    ("run", "trials", lambda v: v >= 1, "must be >= 1"),
    ("run", "max_rounds", lambda v: v >= 1, "must be >= 1"),
    ("run", "ratio_min", lambda v: v > 0, "must be > 0"),
    ("run", "ratio_points", lambda v: v >= 1, "must be >= 1"),
    ("run", "stride", lambda v: v >= 1, "must be >= 1"),
    ("run", "gain_step", lambda v: v > 0, "must be > 0"),
    ("run", "min_fidelity", lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
]


def validate(cfg):
    if cfg["experiment"]["format"] not in ("csv", "jsonl"):
        raise ConfigError("format must be csv or jsonl")
    for sec, key, ok, msg in RANGES:
        if key in cfg[sec] and not ok(cfg[sec][key]):
            raise ConfigError(f"{sec}.{key} {msg}")
    m, r = cfg["model"], cfg["run"]
    if not 0 <= m["target"] <= m["n_atoms"]:
        raise ConfigError("model.target must index an Fz eigenstate (0..n_atoms)")
    if r["ratio_max"] < r["ratio_min"]:
        raise ConfigError("run.ratio_max must be >= run.ratio_min")
    if r["gain_max"] < r["gain_min"]:
        raise ConfigError("run.gain_max must be >= run.gain_min")
    if r["scenario"] not in ("example1", "observer", "output-feedback"):
        raise ConfigError(f"unknown scenario {r['scenario']!r}")
    if "dt" in r and "horizon" in r and r["dt"] > r["horizon"]:
        raise ConfigError("run.dt must not exceed run.horizon")


def _num(x):
    """Deterministic text form of a scalar."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def render_table(columns, rows, fmt):
    buf = io.StringIO()
    if fmt == "csv":
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _num(v) for v in row])
    else:
        for row in rows:
            rec = {}
            for c, v in zip(columns, row):
                rec[c] = v if isinstance(v, str) else json.loads(_num(v))
            buf.write(json.dumps(rec) + "\n")
    return buf.getvalue()


class Run:
    """Collects output files and writes them with a manifest."""

    def __init__(self, out_dir, cfg, command):
        self.out = Path(out_dir)
        self.cfg = cfg
        self.command = command
        self.fmt = cfg["experiment"]["format"]
        self.files = {}
        self.started = datetime.now(timezone.utc)
        self.t0 = time.perf_counter()

    def table(self, stem, columns, rows):
        self.files[f"{stem}.{self.fmt}"] = render_table(columns, rows, self.fmt)

    def text(self, name, content):
        self.files[name] = content

    def write(self, status):
        self.out.mkdir(parents=True, exist_ok=True)
        sums = {}
        for name, content in sorted(self.files.items()):
            data = content.encode()
            (self.out / name).write_bytes(data)
            sums[name] = hashlib.sha256(data).hexdigest()
        manifest = {
            "command": self.command,
            "config": self.cfg,
            "out": str(self.out),
            "version": __version__,
            "started": self.started.isoformat(),
            "wall_seconds": round(time.perf_counter() - self.t0, 3),
            "status": status,
            "outputs": sums,
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------------


def cmd_equivalence(cfg, run):
    seed = cfg["experiment"]["seed"]
    n = cfg["run"]["equivalence_trials"]
    devs = equivalence_suite(n, np.random.default_rng(seed))
    run.table(
        "equivalence",
        ["trial", "plant_dim", "anc_dim", "choi_deviation"],
        [(i, dp, da, dev) for i, (dp, da, dev) in enumerate(devs)],
    )
    worst = max((d for _, _, d in devs), default=0.0)
    lines = []
    if n == 0:
        lines.append("WARNING: zero trials requested; equivalence holds vacuously")
    ok = worst <= 1e-10
    lines.append(f"{'PASS' if ok else 'FAIL'}: {n} random coherent steps, max Choi deviation {worst:.3e}")
    run.text("summary.txt", "\n".join(lines) + "\n")
    if not ok:
        raise NumericalFailure(lines[-1])
    return lines


def cmd_stabilize(cfg, run):
    m, r = cfg["model"], cfg["run"]
    model = AtomicEnsembleModel(m["n_atoms"], m["s"], m["meas_rate"], m["efficiency"])
    dim = model.dim
    target = projector(dim, m["target"])
    dt = r.get("dt", 1e-3 / model.meas_rate)
    horizon = r.get("horizon", 10.0 / model.meas_rate)
    seed = cfg["experiment"]["seed"]
    config = SmeConfig(dt=dt, horizon=horizon, seed=seed, u_max=m["u_max"])
    rho0 = maximally_mixed(dim)
    stride = r["stride"]

    master = simulate_master(model, r["master_u"], rho0, config)
    mf = master.fidelity(target)
    run.table(
        "master_fidelity",
        ["t", "u", "fidelity", "purity"],
        [
            (master.times[k], master.controls[k], mf[k], np.trace(master.states[k] @ master.states[k]).real)
            for k in range(0, len(master), stride)
        ],
    )

    params = StabilizerParams(target, m["gamma"], m["u_max"])
    ctrl = StabilizerController(params)
    ens = ensemble_average(model, ctrl, rho0, r["trajectories"], config)
    fid, err = ens.fidelity(target)
    run.table(
        "ensemble_fidelity",
        ["t", "mean_fidelity", "stderr"],
        [(ens.times[k], fid[k], err[k]) for k in range(0, len(ens.times), stride)],
    )
    path = simulate_trajectory(model, ctrl, rho0, config, index=0)
    rows = path.to_csv() if run.fmt == "csv" else None
    if rows is not None:
        run.text("trajectory0.csv", _stride_csv(rows, stride))
    else:
        pf = path.fidelity(target)
        run.table(
            "trajectory0",
            ["t", "u", "dW", "dy", "fidelity"],
            [(path.times[k], path.controls[k], path.dW[k], path.dy[k], pf[k]) for k in range(0, len(path), stride)],
        )
    lines = [
        f"averaged equation: fidelity {mf[0]:.6f} -> {mf[-1]:.6f} under constant u = {r['master_u']}",
        f"real-time feedback: final mean fidelity {fid[-1]:.4f} +/- {err[-1]:.4f} over {ens.n_trajectories} trajectories",
    ]
    ok = fid[-1] >= r["min_fidelity"]
    lines.append(f"{'PASS' if ok else 'FAIL'}: threshold {r['min_fidelity']}")
    run.text("summary.txt", "\n".join(lines) + "\n")
    if not ok:
        raise NumericalFailure(lines[-1])
    return lines


def _stride_csv(text, stride):
    lines = text.splitlines(keepends=True)
    head, body = lines[:2], lines[2:]
    return "".join(head + body[::stride])


def _parse_angle(text):
    """``pi/6``, ``2pi/3``, ``pi`` or a plain number."""
    num, _, den = text.replace(" ", "").partition("/")
    if num.endswith("pi"):
        head = num[:-2].rstrip("*")
        val = (float(head) if head else 1.0) * math.pi
    else:
        val = float(num)
    return val / float(den) if den else val


def _parse_angle_list(text, theta):
    """Round times ``t`` from a comma-separated list of ``theta * t`` values."""
    out = []
    for item in text.split(","):
        label = item.strip()
        out.append((label.replace(" ", ""), _parse_angle(label) / theta))
    return out


def cmd_stateprep(cfg, run):
    m, r = cfg["model"], cfg["run"]
    theta = m["theta"]
    seed = cfg["experiment"]["seed"]
    trials, n_max = r["trials"], r["max_rounds"]
    try:
        times = _parse_angle_list(r["round_times"], theta)
    except ValueError as exc:
        raise ConfigError(f"bad round_times: {r['round_times']!r}") from exc
    model = TwoModeModel(theta)
    rho0 = projector(2, 0)
    table, batch, lines, ok = [], [], [], True
    for ti, (label, t) in enumerate(times):
        cfg_prep = MfcPrepConfig(round_time=t, max_rounds=n_max, seed=seed)
        used = np.empty(trials, dtype=int)
        succ = np.empty(trials, dtype=bool)
        for i in range(trials):
            res = mfc_prepare(model, cfg_prep, rho0, substream(seed, ti * trials + i))
            used[i], succ[i] = res.rounds_used, res.success
            batch.append(
                json.dumps({"theta_t": label, **json.loads(res.to_json(seed=ti * trials + i))})
            )
        for n in range(1, n_max + 1):
            fails = int(np.sum(~(succ & (used <= n))))
            p = mfc_failure_prob(theta, t, n)
            sigma = math.sqrt(p * (1 - p) / trials)
            emp = fails / trials
            within = abs(emp - p) <= 3 * sigma
            ok &= within
            table.append((label, n, trials, fails, emp, p, sigma, within))
    run.table(
        "mfc_failure",
        ["theta_t", "n", "trials", "failures", "empirical", "analytic", "sigma", "within_3sigma"],
        table,
    )
    run.text("mfc_runs.jsonl", "\n".join(batch) + "\n")

    ratios = np.linspace(r["ratio_min"], r["ratio_max"], r["ratio_points"])
    curve = cfc_fidelity_vs_mismatch(theta, ratios)
    analytic = cfc_mismatch_fidelity(ratios)
    dev = float(np.abs(curve[:, 1] - analytic).max())
    run.table(
        "cfc_mismatch",
        ["ratio", "simulated_fidelity", "analytic_fidelity"],
        [(a, b, c) for (a, b), c in zip(curve, analytic)],
    )
    ok &= dev <= 1e-8
    if "theta_assumed" in m:
        ratio = m["theta_assumed"] / theta
        point = cfc_fidelity_vs_mismatch(theta, [ratio])[0, 1]
        lines.append(f"CFC with assumed coupling {m['theta_assumed']}: fidelity {point:.6f} (ratio {ratio:.4f})")
    lines.append(f"MFC failure rates within 3 sigma of cos^(2n)(theta t): {'yes' if all(row[-1] for row in table) else 'no'}")
    lines.append(f"CFC mismatch curve max deviation from sin^2(pi/(2 ratio)): {dev:.3e}")
    lines.append("PASS" if ok else "FAIL")
    run.text("summary.txt", "\n".join(lines) + "\n")
    if not ok:
        raise NumericalFailure("state preparation checks failed")
    return lines


def cmd_classical(cfg, run):
    r = cfg["run"]
    scenario = r["scenario"]
    stride = r["stride"]
    lines = []
    if scenario == "example1":
        sys_ = ScalarSystem(r["x0"], r["x0_measured"])
        horizon, dt = r.get("horizon", 10.0), r.get("dt", 1e-4)
        t, xf, uf = example1_simulate(sys_, "feedback", horizon, dt)
        _, xo, uo = example1_simulate(sys_, "openloop", horizon, dt)
        div = xo - np.exp(-t) * sys_.believed
        run.table(
            "example1",
            ["t", "x_feedback", "u_feedback", "x_openloop", "u_openloop", "divergence", "divergence_closed_form"],
            [
                (t[k], xf[k], uf[k], xo[k], uo[k], div[k], np.exp(t[k]) * (sys_.x0 - sys_.believed))
                for k in range(0, len(t), stride)
            ],
        )
        ref = example1_closed_form(sys_, "openloop", t[-1])
        lines.append(f"open loop x(T) = {xo[-1]:.6f} (closed form {ref:.6f}); feedback x(T) = {xf[-1]:.3e}")
    elif scenario == "observer":
        sys_ = LinearSystem()
        horizon, dt = r.get("horizon", 15.0), r.get("dt", 1e-4)
        t, x, z, u = observer_simulate(sys_, [1.0, 0.0], [0.0, 0.0], horizon, dt)
        run.table(
            "observer",
            ["t", "x1", "x2", "z1", "z2", "u"],
            [(t[k], x[k, 0], x[k, 1], z[k, 0], z[k, 1], u[k]) for k in range(0, len(t), stride)],
        )
        w = closed_loop_eigenvalues(sys_)
        run.table("eigenvalues", ["re", "im"], [(v.real, v.imag) for v in w])
        lines.append("closed-loop eigenvalues: " + ", ".join(f"{v.real:.6f}{v.imag:+.6f}j" for v in w))
        lines.append(f"|x(T)| = {np.linalg.norm(x[-1]):.3e}")
        if not np.all(w.real < 0):
            raise NumericalFailure("observer-based loop is not stable")
    else:
        sys_ = LinearSystem()
        n = int(round((r["gain_max"] - r["gain_min"]) / r["gain_step"])) + 1
        gains = r["gain_min"] + r["gain_step"] * np.arange(n)
        rep = static_output_feedback_check(sys_, gains)
        run.table(
            "output_feedback",
            ["L", "re1", "im1", "re2", "im2", "trace"],
            [
                (g, e[0].real, e[0].imag, e[1].real, e[1].imag, tr)
                for g, e, tr in zip(rep.gains, rep.eigenvalues, rep.traces)
            ],
        )
        lines.append(rep.summary())
        lines.append(f"max |trace(A + BLC)| = {rep.max_trace_abs!r}")
    run.text("summary.txt", "\n".join(lines) + "\n")
    return lines


COMMANDS = {
    "equivalence": cmd_equivalence,
    "stabilize": cmd_stabilize,
    "stateprep": cmd_stateprep,
    "classical": cmd_classical,
}


def build_parser():
    p = argparse.ArgumentParser(prog="qfl", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("qfl-out"))
    p.add_argument("--format", choices=("csv", "jsonl"))
    return p


def load_config(path, seed=None, fmt=None):
    text = "" if path is None else Path(path).read_text()
    cfg = parse_config(text)
    if seed is not None:
        cfg["experiment"]["seed"] = seed
    if fmt is not None:
        cfg["experiment"]["format"] = fmt
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.format)
    except (OSError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(args.out, cfg, args.command)
    try:
        lines = COMMANDS[args.command](cfg, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, ArithmeticError) as exc:
        run.write("failed")
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    run.write("ok")
    for line in lines:
        print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

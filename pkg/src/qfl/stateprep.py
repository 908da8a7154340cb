"""Preparing ``|1>`` on a bosonic plant via a beam-splitter-coupled ancilla.

The joint space is plant (x) ancilla, each truncated at ``cutoff`` quanta.
The coupling ``exp[(a^dag b - a b^dag) theta t]`` conserves total
excitation number, so ``cutoff = 2`` is exact for every state used here.

Two strategies are compared:

* coherent: couple an ancilla in ``|1>`` for ``t = pi / (2 theta_assumed)``
  and discard it; correct only when ``theta_assumed`` equals the true value;
* measurement-based: measure the plant, then repeat "couple an ancilla in
  ``|1>`` for a fixed time, measure the ancilla" until the ancilla is
  found in ``|0>``. The controller sees only outcomes, never ``theta``.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .channels import KrausChannel, apply_channel, channels_equal, replacement_channel
from .linalg import annihilation, basis, dag, ket2dm, matrix_exponential, partial_trace, tensor
from .measurement import GeneralizedMeasurement, projective, sample_outcome


@dataclass(frozen=True)
class TwoModeModel:
    theta_true: float
    theta_assumed: float = None
    cutoff: int = 2

    def __post_init__(self):
        if self.theta_true <= 0:
            raise ValueError("coupling theta must be positive")
        if self.theta_assumed is not None and self.theta_assumed <= 0:
            raise ValueError("assumed coupling must be positive")
        if self.cutoff < 2:
            raise ValueError("cutoff must be at least 2")

    @property
    def mode_dim(self):
        return self.cutoff + 1


@dataclass(frozen=True)
class MfcPrepConfig:
    round_time: float = None  # pi / (4 theta_assumed) when an assumed value exists
    max_rounds: int = 50
    seed: int = 0

    def resolve(self, model):
        t = self.round_time
        if t is None:
            t = math.pi / (4 * model.theta_assumed) if model.theta_assumed else 1.0
        if t <= 0:
            raise ValueError("round time must be positive")
        return t


@dataclass
class PrepResult:
    success: bool
    rounds_used: int
    final_state: np.ndarray
    outcomes: list = field(default_factory=list)  # ("P", n) plant, ("A", n) ancilla
    stalled: bool = False
    repairs: list = field(default_factory=list)  # rounds in which decay was detected
    verified_ones: int = 0
    rounds: int = 0

    @property
    def outcome_string(self):
        return "".join(f"{kind}{n}" for kind, n in self.outcomes)

    def to_json(self, seed=None):
        return json.dumps(
            {
                "seed": seed,
                "success": self.success,
                "rounds_used": self.rounds_used,
                "outcomes": self.outcome_string,
            }
        )


def two_mode_generator(cutoff):
    """``a^dag b - a b^dag`` with ``b`` on the plant (left) and ``a`` on the ancilla."""
    op = annihilation(cutoff).lowering
    eye = np.eye(cutoff + 1)
    b = tensor(op, eye)
    a = tensor(eye, op)
    return dag(a) @ b - a @ dag(b)


def two_mode_unitary(theta, t, cutoff=2, sign=1):
    """``exp[sign (a^dag b - a b^dag) theta t]`` on the truncated joint space."""
    return matrix_exponential(sign * two_mode_generator(cutoff) * theta * t)


def joint_ket(n_plant, n_anc, cutoff=2):
    return np.kron(basis(cutoff + 1, n_plant), basis(cutoff + 1, n_anc))


def excitation_number(cutoff=2):
    n = np.diag(np.arange(cutoff + 1)).astype(float)
    eye = np.eye(cutoff + 1)
    return np.kron(n, eye) + np.kron(eye, n)


def sector_leakage(u, cutoff=2):
    """Largest matrix element of ``u`` between different total-excitation sectors."""
    tot = np.diag(excitation_number(cutoff))
    mask = tot[:, None] != tot[None, :]
    return float(np.abs(u[mask]).max())


def amplitude_table_rows(theta, t):
    """The four published transition amplitudes as ``{input: {output: amplitude}}``.

    Kets are ``(n_plant, n_ancilla)``.
    """
    c, s = math.cos(theta * t), math.sin(theta * t)
    c2, s2 = math.cos(2 * theta * t), math.sin(2 * theta * t)
    h = math.sqrt(2) / 2 * s2
    return {
        (0, 0): {(0, 0): 1.0},
        (1, 0): {(1, 0): c, (0, 1): -s},
        (0, 1): {(1, 0): s, (0, 1): c},
        (1, 1): {(1, 1): c2, (2, 0): h, (0, 2): -h},
    }


@dataclass
class AmplitudeTableReport:
    theta_t: float
    rows: list  # dicts: input, output, published, computed, magnitude_error, sign_agrees

    @property
    def max_magnitude_error(self):
        return max(r["magnitude_error"] for r in self.rows)

    @property
    def sign_mismatches(self):
        return [r for r in self.rows if not r["sign_agrees"]]

    def rows_with_sign_mismatch(self):
        return sorted({r["input"] for r in self.sign_mismatches})


def verify_amplitude_table(theta, t, cutoff=2, tol=1e-10, sign=1):
    """Compare the published amplitude table with direct exponentiation.

    Also checks that no amplitude outside the published support appears.
    With ``b`` on the plant and ``sign=1`` every ``sin`` term of the table
    comes out with the opposite sign; ``sign=-1`` reproduces it exactly.
    """
    u = two_mode_unitary(theta, t, cutoff, sign)
    rows = []
    for (nb, na), outputs in amplitude_table_rows(theta, t).items():
        col = u @ joint_ket(nb, na, cutoff)
        listed = set()
        for (mb, ma), amp in outputs.items():
            idx = mb * (cutoff + 1) + ma
            listed.add(idx)
            got = col[idx]
            rows.append(
                {
                    "input": (nb, na),
                    "output": (mb, ma),
                    "published": amp,
                    "computed": complex(got),
                    "magnitude_error": abs(abs(got) - abs(amp)),
                    "sign_agrees": bool(abs(got - amp) <= tol or abs(amp) <= tol),
                }
            )
        rest = [i for i in range(col.size) if i not in listed]
        rows.append(
            {
                "input": (nb, na),
                "output": "other",
                "published": 0.0,
                "computed": complex(np.linalg.norm(col[rest])),
                "magnitude_error": float(np.linalg.norm(col[rest])),
                "sign_agrees": True,
            }
        )
    return AmplitudeTableReport(theta * t, rows)


def _embed_plant(rho, cutoff):
    rho = np.asarray(rho, dtype=complex)
    d = cutoff + 1
    if rho.shape == (d, d):
        if np.abs(rho[2:, :]).max(initial=0) > 1e-12 or np.abs(rho[:, 2:]).max(initial=0) > 1e-12:
            raise ValueError("plant state must be supported on span{|0>, |1>}")
        return rho
    if rho.shape != (2, 2):
        raise ValueError(f"plant state has shape {rho.shape}")
    out = np.zeros((d, d), dtype=complex)
    out[:2, :2] = rho
    return out


def cfc_kraus(model):
    """Plant operators of one coherent round, restricted to ``span{|0>, |1>}``."""
    if model.theta_assumed is None:
        raise ValueError("coherent preparation needs an assumed coupling")
    d = model.mode_dim
    t = math.pi / (2 * model.theta_assumed)
    u = two_mode_unitary(model.theta_true, t, model.cutoff).reshape(d, d, d, d)
    ops = [u[:2, i, :2, 1] for i in range(d)]
    return ops


def cfc_prepare(model, rho0_plant):
    """Coherent preparation: one coupling for ``pi / (2 theta_assumed)``, ancilla discarded.

    The evolution runs at the true coupling. Returns the plant state on the
    full truncated mode space.
    """
    if model.theta_assumed is None:
        raise ValueError("coherent preparation needs an assumed coupling")
    d = model.mode_dim
    rho = _embed_plant(rho0_plant, model.cutoff)
    t = math.pi / (2 * model.theta_assumed)
    u = two_mode_unitary(model.theta_true, t, model.cutoff)
    joint = u @ tensor(rho, ket2dm(basis(d, 1))) @ dag(u)
    return partial_trace(joint, (d, d), keep=0)


def cfc_matches_replacement(model, tol=1e-10):
    """Whether the restricted coherent round equals the ``|1>``-replacement channel."""
    ops = cfc_kraus(model)
    total = sum(dag(e) @ e for e in ops)
    if np.abs(total - np.eye(2)).max() > tol:
        return False
    return channels_equal(KrausChannel(tuple(ops)), replacement_channel(2, 1), tol)


def cfc_mismatch_fidelity(ratio):
    """Analytic fidelity ``sin^2(pi / (2 ratio))`` with ``ratio = theta_assumed / theta``."""
    return np.sin(np.pi / (2 * np.asarray(ratio, dtype=float))) ** 2


def cfc_fidelity_vs_mismatch(theta, ratios, cutoff=2):
    """Simulated ``(ratio, fidelity to |1>)`` pairs starting from ``|0>``."""
    rho0 = ket2dm(basis(2, 0))
    out = []
    for r in ratios:
        if r <= 0:
            raise ValueError("ratios must be positive")
        final = cfc_prepare(TwoModeModel(theta, theta * r, cutoff), rho0)
        out.append((float(r), float(final[1, 1].real)))
    return np.array(out)


def mfc_failure_prob(theta, t, n):
    """Probability of still holding ``|0>`` after ``n`` coupling rounds."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return math.cos(theta * t) ** (2 * n)


class RepeatUntilSuccess:
    """Outcome-driven controller: sees measurement results only.

    ``decide`` returns ``"done"`` once the plant is known to be in ``|1>``
    and ``"couple"`` otherwise.
    """

    def decide(self, history):
        kind, n = history[-1]
        if kind == "P":
            return "done" if n == 1 else "couple"
        return "done" if n == 0 else "couple"


class _Lab:
    """Holds the physics, including the true coupling; the controller never sees it."""

    def __init__(self, model, round_time, decay_prob=0.0):
        d = model.mode_dim
        self.d = d
        self.unitary = two_mode_unitary(model.theta_true, round_time, model.cutoff)
        self.anc_one = ket2dm(basis(d, 1))
        self.plant_meas = projective(d)
        self.anc_meas = GeneralizedMeasurement(tuple(tensor(np.eye(d), p) for p in projective(d).operators))
        self.stalled = abs(math.sin(model.theta_true * round_time)) < 1e-12
        self.decay = amplitude_damping(d, decay_prob) if decay_prob > 0 else None

    def measure_plant(self, rho, rng):
        o = sample_outcome(self.plant_meas, rho, rng)
        return o.index, o.post_state

    def couple_and_measure(self, rho, rng):
        joint = self.unitary @ tensor(rho, self.anc_one) @ dag(self.unitary)
        o = sample_outcome(self.anc_meas, joint, rng)
        return o.index, partial_trace(o.post_state, (self.d, self.d), keep=0)

    def decohere(self, rho):
        return rho if self.decay is None else apply_channel(self.decay, rho)


def amplitude_damping(d, p):
    """Single-quantum loss ``|1> -> |0>`` with probability ``p`` (higher levels untouched)."""
    keep = np.eye(d, dtype=complex)
    keep[1, 1] = math.sqrt(1 - p)
    jump = np.zeros((d, d), dtype=complex)
    jump[0, 1] = math.sqrt(p)
    return KrausChannel((keep, jump))


def _run_protocol(model, config, rho0_plant, rng, decay_prob):
    round_time = config.resolve(model)
    lab = _Lab(model, round_time, decay_prob)
    controller = RepeatUntilSuccess()
    rho = _embed_plant(rho0_plant, model.cutoff)
    res = PrepResult(False, 0, rho, stalled=lab.stalled)
    prev_end_one = False
    for r in range(config.max_rounds):
        if r > 0:
            rho = lab.decohere(rho)
        n, rho = lab.measure_plant(rho, rng)
        res.outcomes.append(("P", n))
        res.rounds = r + 1
        if n == 1:
            res.verified_ones += 1
        elif prev_end_one:
            res.repairs.append(r)
        if controller.decide(res.outcomes) == "couple":
            k, rho = lab.couple_and_measure(rho, rng)
            res.outcomes.append(("A", k))
            res.rounds_used += 1
        prev_end_one = bool(rho[1, 1].real > 0.5)
        # without loss |1> is absorbing, so stopping here changes nothing
        if decay_prob == 0 and controller.decide(res.outcomes) == "done":
            break
    res.final_state = rho
    res.success = bool(abs(rho[1, 1].real - 1) <= 1e-10)
    return res


def mfc_prepare(model, config, rho0_plant, rng):
    """Measurement-based preparation of ``|1>`` without knowledge of ``theta``.

    Measure the plant; while it is not known to be in ``|1>``, couple a
    fresh ancilla in ``|1>`` for ``round_time`` and measure the ancilla.
    At most ``max_rounds`` couplings are used.
    """
    return _run_protocol(model, config, rho0_plant, rng, 0.0)


def detect_and_correct(model, decay_prob, config, rng, rho0_plant=None):
    """Maintain ``|1>`` against loss for ``max_rounds`` rounds.

    Each round after the first starts with a loss event of probability
    ``decay_prob``; a plant measurement follows, and a detected ``|0>``
    triggers one coupling-and-measure repair. With ``decay_prob == 0`` this
    reduces to :func:`mfc_prepare`.
    """
    if not 0 <= decay_prob <= 1:
        raise ValueError("decay probability must lie in [0, 1]")
    rho0 = ket2dm(basis(2, 0)) if rho0_plant is None else rho0_plant
    return _run_protocol(model, config, rho0, rng, decay_prob)


def stationary_distribution(p):
    """Stationary row vector of a finite Markov transition matrix ``p``."""
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    a = np.vstack([p.T - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(a, b, rcond=None)[0]

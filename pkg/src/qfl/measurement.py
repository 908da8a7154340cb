"""Discrete measurement-based feedback: sampling, conditioning, records.

A feedback policy is any callable ``policy(post_state, history)`` where
``history`` is the tuple of outcome indices observed so far (the current
outcome last). It returns either a unitary or a ``(unitary_id, unitary)``
pair; bare unitaries are labelled by a short content hash.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .linalg import as_density, as_matrix, dag

P_FLOOR = 1e-12
TOL_CPTP = 1e-9
TOL_UNITARY = 1e-10


def substream(seed, index):
    """Independent generator for trajectory ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def check_complete(operators, tol=TOL_CPTP):
    ops = [as_matrix(op) for op in operators]
    if not ops:
        raise ValueError("operator list is empty")
    dim = ops[0].shape[0]
    if any(op.shape != (dim, dim) for op in ops):
        raise ValueError("operators must share one square shape")
    total = sum(dag(op) @ op for op in ops)
    err = np.abs(total - np.eye(dim)).max()
    if err > tol:
        raise ValueError(f"sum of E^dag E deviates from identity by {err:.3e}")
    return ops


@dataclass(frozen=True)
class GeneralizedMeasurement:
    operators: tuple

    def __post_init__(self):
        ops = tuple(op.copy() for op in check_complete(self.operators))
        for op in ops:
            op.flags.writeable = False
        object.__setattr__(self, "operators", ops)

    @property
    def dim(self):
        return self.operators[0].shape[0]

    def __len__(self):
        return len(self.operators)


def projective(dim):
    """Measurement in the computational basis."""
    ops = []
    for k in range(dim):
        p = np.zeros((dim, dim), dtype=complex)
        p[k, k] = 1.0
        ops.append(p)
    return GeneralizedMeasurement(tuple(ops))


@dataclass(frozen=True)
class MeasurementOutcome:
    index: int
    probability: float
    post_state: np.ndarray = None  # None when probability <= P_FLOOR
    pruned: bool = False


def enumerate_outcomes(meas, rho, p_floor=P_FLOOR):
    """All outcomes of ``meas`` on ``rho`` with probabilities and post states."""
    rho = as_matrix(rho)
    if rho.shape[0] != meas.dim:
        raise ValueError(f"state dim {rho.shape[0]} != measurement dim {meas.dim}")
    out = []
    for n, m in enumerate(meas.operators):
        branch = m @ rho @ dag(m)
        p = float(np.trace(branch).real)
        if p <= p_floor:
            out.append(MeasurementOutcome(n, max(p, 0.0), None, True))
        else:
            out.append(MeasurementOutcome(n, p, as_density(branch / p)))
    return out


def sample_outcome(meas, rho, rng, p_floor=P_FLOOR):
    """Draw one outcome with Born-rule probabilities.

    When a single outcome carries all the weight no random number is
    consumed, so deterministic branches do not shift the stream.
    """
    outcomes = enumerate_outcomes(meas, rho, p_floor)
    live = [o for o in outcomes if not o.pruned]
    if len(live) == 1:
        return live[0]
    probs = np.array([o.probability for o in live])
    cdf = np.cumsum(probs / probs.sum())
    k = int(np.searchsorted(cdf, rng.random(), side="right"))
    return live[min(k, len(live) - 1)]


def unitary_id(u):
    return hashlib.sha1(np.round(u, 12).tobytes()).hexdigest()[:10]


def resolve_feedback(result, dim, tol=TOL_UNITARY):
    """Normalise a policy's return value to ``(uid, unitary)``."""
    uid, u = result if isinstance(result, tuple) else (None, result)
    u = as_matrix(u)
    if u.shape != (dim, dim):
        raise ValueError(f"feedback unitary has shape {u.shape}, expected {(dim, dim)}")
    if np.abs(dag(u) @ u - np.eye(dim)).max() > tol:
        raise ValueError("feedback policy returned a non-unitary matrix")
    return (uid if uid is not None else unitary_id(u)), u


def identity_policy(post_state, history):
    return "I", np.eye(post_state.shape[0], dtype=complex)


def constant_policy(u, uid=None):
    u = as_matrix(u)

    def policy(post_state, history):
        return (uid or unitary_id(u)), u

    return policy


def outcome_policy(table, default="I"):
    """Feedback keyed on the latest outcome: ``{n: (uid, U)}`` or ``{n: U}``."""

    def policy(post_state, history):
        entry = table.get(history[-1])
        if entry is None:
            return default, np.eye(post_state.shape[0], dtype=complex)
        return entry

    return policy


@dataclass(frozen=True)
class RecordEntry:
    k: int
    n: int
    unitary_id: str
    state: np.ndarray = None


@dataclass
class TrajectoryRecord:
    seed: object = None
    steps: list = field(default_factory=list)

    def append(self, entry):
        if entry.k != len(self.steps):
            raise ValueError("step indices must increase from 0 without gaps")
        self.steps.append(entry)

    def __len__(self):
        return len(self.steps)

    @property
    def outcomes(self):
        return [e.n for e in self.steps]

    def to_jsonl(self):
        lines = []
        for e in self.steps:
            row = {"k": e.k, "n": e.n, "unitary_id": e.unitary_id}
            if e.state is not None:
                flat = np.asarray(e.state).ravel()
                row["state"] = [[float(z.real), float(z.imag)] for z in flat]
            lines.append(json.dumps(row))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text, seed=None):
        rec = cls(seed=seed)
        for line in text.splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            state = None
            if "state" in row:
                flat = np.array([complex(re, im) for re, im in row["state"]])
                d = int(round(np.sqrt(flat.size)))
                state = flat.reshape(d, d)
            rec.append(RecordEntry(row["k"], row["n"], row["unitary_id"], state))
        return rec


def mfc_step(meas, policy, rho, rng, k=0, history=(), snapshot=False):
    """One selective measure-then-feedback step.

    Returns the conditioned state ``U rho_n U^dag`` and the record entry.
    """
    outcome = sample_outcome(meas, rho, rng)
    hist = tuple(history) + (outcome.index,)
    uid, u = resolve_feedback(policy(outcome.post_state, hist), meas.dim)
    new = as_density(u @ outcome.post_state @ dag(u))
    return new, RecordEntry(k, outcome.index, uid, new if snapshot else None)


def run_mfc(schedule, rho0, rng, seed=None, snapshot=False):
    """Apply a schedule of ``(measurement, policy)`` pairs in order."""
    if not schedule:
        raise ValueError("schedule must not be empty")
    rho = as_density(rho0)
    record = TrajectoryRecord(seed=seed)
    for k, (meas, policy) in enumerate(schedule):
        rho, entry = mfc_step(meas, policy, rho, rng, k, record.outcomes, snapshot)
        record.append(entry)
    return rho, record

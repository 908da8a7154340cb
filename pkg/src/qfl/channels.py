"""Operator-sum channels for coherent and measurement-based feedback."""

from dataclasses import dataclass

import numpy as np

from .linalg import (
    as_matrix,
    as_pure_state,
    dag,
    partial_trace,
    random_pure_state,
    random_unitary,
    tensor,
)
from .measurement import (
    P_FLOOR,
    TOL_CPTP,
    TOL_UNITARY,
    check_complete,
    enumerate_outcomes,
    resolve_feedback,
)


@dataclass(frozen=True)
class KrausChannel:
    operators: tuple

    def __post_init__(self):
        ops = tuple(op.copy() for op in check_complete(self.operators))
        for op in ops:
            op.flags.writeable = False
        object.__setattr__(self, "operators", ops)

    @property
    def dim(self):
        return self.operators[0].shape[0]

    def __call__(self, rho):
        return apply_channel(self, rho)


@dataclass(frozen=True)
class CoherentFeedbackStep:
    """Plant coupled to an ancilla through a joint unitary on plant (x) ancilla."""

    plant_dim: int
    anc_dim: int
    unitary: np.ndarray
    anc_init: np.ndarray
    anc_basis: np.ndarray = None  # columns are the basis kets; computational by default

    def __post_init__(self):
        d = self.plant_dim * self.anc_dim
        u = as_matrix(self.unitary)
        if u.shape != (d, d):
            raise ValueError(f"unitary must be {d}x{d}")
        if np.abs(dag(u) @ u - np.eye(d)).max() > TOL_UNITARY:
            raise ValueError("coupling matrix is not unitary")
        psi = as_pure_state(self.anc_init)
        if psi.size != self.anc_dim:
            raise ValueError("ancilla state has the wrong dimension")
        b = np.eye(self.anc_dim, dtype=complex) if self.anc_basis is None else as_matrix(self.anc_basis)
        if np.abs(dag(b) @ b - np.eye(self.anc_dim)).max() > TOL_UNITARY:
            raise ValueError("ancilla basis is not orthonormal")
        object.__setattr__(self, "unitary", u)
        object.__setattr__(self, "anc_init", psi)
        object.__setattr__(self, "anc_basis", b)


def kraus_from_cfc(step):
    """Plant operators ``E_i = <i|_a U |psi>_a``."""
    dp, da = step.plant_dim, step.anc_dim
    # U[(p, a), (q, b)] -> contract ancilla input with psi, output with <i|
    u = step.unitary.reshape(dp, da, dp, da)
    u_psi = np.einsum("pjqb,b->pjq", u, step.anc_init)
    ops = [np.einsum("pjq,j->pq", u_psi, step.anc_basis[:, i].conj()) for i in range(da)]
    return KrausChannel(tuple(ops))


def dilation_output(step, rho):
    """Plant state after ``Tr_a[U (rho (x) |psi><psi|) U^dag]``."""
    joint = tensor(rho, np.outer(step.anc_init, step.anc_init.conj()))
    joint = step.unitary @ joint @ dag(step.unitary)
    return partial_trace(joint, (step.plant_dim, step.anc_dim), keep=0)


def apply_channel(channel, rho):
    rho = as_matrix(rho)
    if rho.shape[0] != channel.dim:
        raise ValueError(f"state dim {rho.shape[0]} != channel dim {channel.dim}")
    ops = np.stack(channel.operators)
    return np.einsum("kij,jl,kml->im", ops, rho, ops.conj())


def choi_matrix(channel):
    """Unnormalised Choi matrix ``sum_ij |i><j| (x) E(|i><j|)``."""
    ops = np.stack(channel.operators)
    d = channel.dim
    # C[(i, a), (j, b)] = sum_k E_k[a, i] conj(E_k[b, j])
    return np.einsum("kai,kbj->iajb", ops, ops.conj()).reshape(d * d, d * d)


def channels_equal(c1, c2, tol=1e-10):
    if c1.dim != c2.dim:
        return False
    return bool(np.abs(choi_matrix(c1) - choi_matrix(c2)).max() <= tol)


def replacement_channel(d, target):
    """Channel ``{|target><i|}`` that prepares ``|target>`` from any input."""
    if not 0 <= target < d:
        raise IndexError(f"target {target} out of range for dimension {d}")
    ops = []
    for i in range(d):
        e = np.zeros((d, d), dtype=complex)
        e[target, i] = 1.0
        ops.append(e)
    return KrausChannel(tuple(ops))


def nonselective_mfc_step(meas, policy, rho, p_floor=P_FLOOR):
    """Outcome-averaged measure-then-feedback step, by exact enumeration.

    Branches with probability at most ``p_floor`` have no defined post state;
    they contribute ``M rho M^dag`` with identity feedback.
    """
    rho = as_matrix(rho)
    out = np.zeros_like(rho)
    for o in enumerate_outcomes(meas, rho, p_floor):
        m = meas.operators[o.index]
        branch = m @ rho @ dag(m)
        if o.pruned:
            out += branch
            continue
        _, u = resolve_feedback(policy(o.post_state, (o.index,)), meas.dim)
        out += u @ branch @ dag(u)
    return out


def adaptive_channel(meas, policy, rho, p_floor=P_FLOOR):
    """The state-dependent operators ``U(rho_n) M_n`` as a channel."""
    ops = []
    for o in enumerate_outcomes(meas, rho, p_floor):
        m = meas.operators[o.index]
        if o.pruned:
            ops.append(m)
            continue
        _, u = resolve_feedback(policy(o.post_state, (o.index,)), meas.dim)
        ops.append(u @ m)
    return KrausChannel(tuple(ops))


def random_cfc_step(plant_dim, anc_dim, rng):
    return CoherentFeedbackStep(
        plant_dim,
        anc_dim,
        random_unitary(plant_dim * anc_dim, rng),
        random_pure_state(anc_dim, rng),
    )


def cfc_dilation_choi(step):
    """Choi matrix of the dilate-evolve-trace map, built from matrix units."""
    dp = step.plant_dim
    out = np.zeros((dp * dp, dp * dp), dtype=complex)
    for i in range(dp):
        for j in range(dp):
            unit = np.zeros((dp, dp), dtype=complex)
            unit[i, j] = 1.0
            out += np.kron(unit, dilation_output(step, unit))
    return out


def equivalence_suite(n_trials, rng, plant_dims=(2, 3), anc_dims=(2, 3, 4)):
    """Compare the Kraus form with the dilation over random coherent steps.

    Dimensions cycle through every ``(plant_dim, anc_dim)`` pair. Returns a
    list of ``(plant_dim, anc_dim, max Choi deviation)``.
    """
    pairs = [(dp, da) for da in anc_dims for dp in plant_dims]
    out = []
    for t in range(n_trials):
        dp, da = pairs[t % len(pairs)]
        step = random_cfc_step(dp, da, rng)
        dev = np.abs(choi_matrix(kraus_from_cfc(step)) - cfc_dilation_choi(step)).max()
        out.append((dp, da, float(dev)))
    return out

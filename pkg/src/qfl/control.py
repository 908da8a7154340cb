"""Switching stabiliser for F_z eigenstates and the purity-rate diagnostic.

The stabiliser uses the overlap ``f = Tr(rho rho_d)`` with the target:

* ``f >= gamma``: feedback ``u = -Tr(i [Fy, rho] rho_d)``
* ``f <= gamma / 2``: constant drive ``u = 1``
* otherwise (the band): keep whichever law was active when the band was
  entered, i.e. feedback if it was entered from above, drive if from below.

A trajectory that starts inside the band is treated as having entered it
from below.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .linalg import as_density, spin_operators
from .sme import Controller


class Regime(enum.Enum):
    FEEDBACK = "feedback"
    DRIVE = "drive"


class Boundary(enum.Enum):
    UPPER = "upper"
    LOWER = "lower"
    NONE = "none"


@dataclass(frozen=True)
class StabilizerParams:
    target: np.ndarray
    gamma: float = 0.4
    u_max: float = 10.0
    fy: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        target = as_density(self.target)
        fz = spin_operators(target.shape[0] - 1).fz
        if abs(np.trace(target @ target).real - 1) > 1e-9:
            raise ValueError("target must be pure")
        if np.abs(fz @ target - target @ fz).max() > 1e-9:
            raise ValueError("target must be an eigenstate of Fz")
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "fy", spin_operators(target.shape[0] - 1).fy)


@dataclass(frozen=True)
class StabilizerMemory:
    regime: Regime
    last_entry_boundary: Boundary


def feedback_law(rho, target, fy):
    """``-Tr(i [Fy, rho] rho_d)`` for a batch of states."""
    c = fy @ rho - rho @ fy
    return -np.einsum("...ij,ji->...", 1j * c, target).real


def _update(fid, gamma, feedback):
    """New regime flags (True = feedback) from overlaps and previous flags."""
    return np.where(fid >= gamma, True, np.where(fid <= gamma / 2, False, feedback))


def initial_regime(fid, gamma):
    return np.asarray(fid) >= gamma


def _control(params, rho, feedback):
    fid = np.einsum("...ij,ji->...", rho, params.target).real
    feedback = _update(fid, params.gamma, feedback)
    u = np.where(feedback, feedback_law(rho, params.target, params.fy), 1.0)
    return np.clip(u, -params.u_max, params.u_max), feedback, fid


def stabilizer_control(params, memory, rho_c):
    """One evaluation of the switching law for a single state.

    ``memory=None`` initialises from the current overlap.
    Returns ``(u, new_memory)``.
    """
    rho_c = np.asarray(rho_c, dtype=complex)
    fid = float(np.trace(rho_c @ params.target).real)
    if memory is None:
        prev = bool(initial_regime(fid, params.gamma))
    else:
        prev = memory.regime is Regime.FEEDBACK
    u, fb, fid = _control(params, rho_c, np.asarray(prev))
    fb = bool(fb)
    if fid >= params.gamma:
        boundary = Boundary.UPPER
    elif fid <= params.gamma / 2:
        boundary = Boundary.LOWER
    elif memory is None:
        boundary = Boundary.LOWER
    else:
        boundary = memory.last_entry_boundary
    return float(u), StabilizerMemory(Regime.FEEDBACK if fb else Regime.DRIVE, boundary)


class StabilizerController(Controller):
    """Batched form of :func:`stabilizer_control` for the SME integrator."""

    def __init__(self, params):
        self.params = params

    def init_memory(self, rho):
        fid = np.einsum("kij,ji->k", rho, self.params.target).real
        return initial_regime(fid, self.params.gamma)

    def __call__(self, t, rho, memory):
        u, feedback, _ = _control(self.params, rho, memory)
        return u, feedback


def purity_rate(model, rho):
    """``d Tr(rho^2) / dt`` under the averaged equation; never positive."""
    fz = model.spin.fz
    a = fz @ rho
    tr_aa = np.einsum("...ij,...ji->...", a, a).real
    tr_fz2_rho2 = np.einsum("...ij,...ji->...", fz @ a, rho).real
    return 2 * model.meas_rate * (tr_aa - tr_fz2_rho2)

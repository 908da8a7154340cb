"""Classical motivation: open-loop vs feedback, output vs observer feedback."""

from dataclasses import dataclass, field

import numpy as np


def rk4_path(f, x0, horizon, dt):
    """Fixed-step RK4 for ``x' = f(t, x)``; returns ``(t, x)`` with ``x[0] = x0``."""
    n = int(round(horizon / dt))
    x = np.empty((n + 1,) + np.shape(x0))
    x[0] = x0
    t = np.arange(n + 1) * dt
    for k in range(n):
        tk, xk = t[k], x[k]
        k1 = f(tk, xk)
        k2 = f(tk + dt / 2, xk + dt / 2 * k1)
        k3 = f(tk + dt / 2, xk + dt / 2 * k2)
        k4 = f(tk + dt, xk + dt * k3)
        x[k + 1] = xk + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return t, x


@dataclass(frozen=True)
class ScalarSystem:
    """``x' = x + u`` with true initial state ``x0`` and a believed ``x0_measured``."""

    x0: float
    x0_measured: float = None

    @property
    def believed(self):
        return self.x0 if self.x0_measured is None else self.x0_measured


def example1_simulate(sys, mode="feedback", horizon=10.0, dt=1e-4):
    """Integrate the scalar system under ``u = -2x`` or ``u = -2 exp(-t) x0_measured``.

    Returns ``(t, x, u)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if mode == "feedback":
        law = lambda t, x: -2.0 * x  # noqa: E731
    elif mode == "openloop":
        xb = sys.believed
        law = lambda t, x: -2.0 * np.exp(-t) * xb  # noqa: E731
    else:
        raise ValueError(f"unknown mode {mode!r}")
    t, x = rk4_path(lambda t, x: x + law(t, x), float(sys.x0), horizon, dt)
    return t, x, law(t, x)


def example1_closed_form(sys, mode, t):
    t = np.asarray(t, dtype=float)
    if mode == "feedback":
        return np.exp(-t) * sys.x0
    return np.exp(-t) * sys.believed + np.exp(t) * (sys.x0 - sys.believed)


@dataclass(frozen=True)
class LinearSystem:
    A: np.ndarray = field(default_factory=lambda: np.array([[0.0, 1.0], [-1.0, 0.0]]))
    B: np.ndarray = field(default_factory=lambda: np.array([[0.0], [1.0]]))
    C: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.0]]))
    K: np.ndarray = field(default_factory=lambda: np.array([[-1.0, -3.0]]))
    G: np.ndarray = field(default_factory=lambda: np.array([[3.0], [1.0]]))

    def __post_init__(self):
        shapes = {"A": (2, 2), "B": (2, 1), "C": (1, 2), "K": (1, 2), "G": (2, 1)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float).reshape(shape)
            object.__setattr__(self, name, arr)

    def controllable(self):
        return np.linalg.matrix_rank(np.hstack([self.B, self.A @ self.B])) == 2

    def observable(self):
        return np.linalg.matrix_rank(np.vstack([self.C, self.C @ self.A])) == 2


def closed_loop_matrix(sys):
    """Plant-plus-observer generator ``[[A, BK], [GC, A - GC + BK]]``."""
    A, B, C, K, G = sys.A, sys.B, sys.C, sys.K, sys.G
    return np.block([[A, B @ K], [G @ C, A - G @ C + B @ K]])


def closed_loop_eigenvalues(sys):
    """Spectrum of the plant-plus-observer loop, sorted by real then imaginary part.

    In ``(x, e = x - z)`` coordinates the loop is block upper-triangular, so
    the spectrum is that of ``A + BK`` together with ``A - GC``. Working
    with the 2x2 blocks avoids the sqrt(eps) error that repeated
    eigenvalues cause in a 4x4 eigensolve.
    """
    t = np.block([[np.eye(2), np.zeros((2, 2))], [np.eye(2), -np.eye(2)]])
    m = t @ closed_loop_matrix(sys) @ t  # t is its own inverse
    if np.abs(m[2:, :2]).max() > 1e-12:
        raise ArithmeticError("loop is not block-triangular in error coordinates")
    w = np.concatenate([np.linalg.eigvals(m[:2, :2]), np.linalg.eigvals(m[2:, 2:])])
    return w[np.lexsort((w.imag, w.real))]


def observer_simulate(sys, x0, z0, horizon=15.0, dt=1e-4):
    """Plant ``x' = Ax + Bu`` with observer ``z' = (A - GC) z + G y + B u``, ``u = K z``.

    Returns ``(t, x, z, u)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    m = closed_loop_matrix(sys)
    w0 = np.concatenate([np.ravel(x0), np.ravel(z0)]).astype(float)
    t, w = rk4_path(lambda t, w: m @ w, w0, horizon, dt)
    x, z = w[:, :2], w[:, 2:]
    u = (z @ sys.K.T)[:, 0]
    return t, x, z, u


@dataclass
class OutputFeedbackReport:
    gains: np.ndarray
    eigenvalues: np.ndarray  # (n_gains, 2)
    traces: np.ndarray
    stabilizing: list

    @property
    def max_trace_abs(self):
        return float(np.abs(self.traces).max())

    def summary(self):
        if self.stabilizing:
            return f"{len(self.stabilizing)} stabilizing L found"
        return "no stabilizing L found"


def static_output_feedback_check(sys, gains):
    """Spectrum of ``A + B L C`` over a grid of scalar output gains ``L``."""
    gains = np.asarray(gains, dtype=float)
    eigs, traces, good = [], [], []
    for L in gains:
        acl = sys.A + L * (sys.B @ sys.C)
        w = np.linalg.eigvals(acl)
        eigs.append(np.sort_complex(w))
        traces.append(np.trace(acl))
        if np.all(w.real < 0):
            good.append(float(L))
    return OutputFeedbackReport(gains, np.array(eigs), np.array(traces), good)
